//! Hand-written reverse pass through the whole toy model.
//!
//! Every forward op has its adjoint here, in reverse order of the forward.
//! Gradients are only materialized for parameters in the trainable
//! registry; frozen weights still propagate gradients to their inputs.

use std::collections::{BTreeMap, BTreeSet};

use crate::attention::{AttnCache, DiffAttnLayer, Projection};
use crate::error::{Error, Result};
use crate::linalg::{
    masked_row_softmax_backward, matmul, matmul_nt, matmul_tn, rmsnorm_backward, Tensor2D,
    NORM_EPS,
};
use crate::model::{gelu_grad, BlockCache, ModelCache, ParamRole, ToyModel};

use super::loss::cross_entropy_with_grad;

/// Gradients keyed by trainable-parameter name. λ appears as a 1×1 tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientSet {
    grads: BTreeMap<String, Tensor2D>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor2D) {
        self.grads.insert(name, grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.grads.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor2D::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s * other`; both sets must hold the same names.
    pub fn add_scaled(&mut self, other: &GradientSet, s: f64) -> Result<()> {
        if self.grads.is_empty() {
            for (name, t) in &other.grads {
                self.grads.insert(name.clone(), t.scale(s));
            }
            return Ok(());
        }
        for (name, t) in &other.grads {
            let mine = self
                .grads
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            mine.add_scaled(t, s)?;
        }
        Ok(())
    }

    /// Test hook: perturbs one gradient in place.
    pub fn corrupt(&mut self, name: &str, offset: f64) -> Result<()> {
        let t = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        t.data_mut().iter_mut().for_each(|v| *v += offset);
        Ok(())
    }
}

/// Accumulates gradients for the trainable subset only.
struct Sink {
    wanted: BTreeSet<String>,
    grads: BTreeMap<String, Tensor2D>,
}

impl Sink {
    fn new(model: &ToyModel) -> Self {
        let mut wanted = BTreeSet::new();
        let mut grads = BTreeMap::new();
        for (info, _) in model.params() {
            if info.role == ParamRole::Trainable {
                grads.insert(info.name.clone(), Tensor2D::zeros(info.shape.0, info.shape.1));
                wanted.insert(info.name);
            }
        }
        Sink { wanted, grads }
    }

    fn wants(&self, name: &str) -> bool {
        self.wanted.contains(name)
    }

    fn add(&mut self, name: &str, g: &Tensor2D) -> Result<()> {
        if let Some(acc) = self.grads.get_mut(name) {
            acc.add_scaled(g, 1.0)?;
        }
        Ok(())
    }

    fn add_row(&mut self, name: &str, row: usize, g: &[f64]) {
        if let Some(acc) = self.grads.get_mut(name) {
            for (a, b) in acc.row_mut(row).iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

/// Adjoint of `y = x·W + (alpha/r)·x·B·A`; returns `dx`.
fn projection_backward(
    p: &Projection,
    prefix: &str,
    x: &Tensor2D,
    dy: &Tensor2D,
    sink: &mut Sink,
) -> Result<Tensor2D> {
    let mut dx = Tensor2D::zeros(x.rows(), x.cols());
    if let Some(w) = &p.weight {
        let name = format!("{prefix}.weight");
        if sink.wants(&name) {
            sink.add(&name, &matmul_tn(x, dy)?)?;
        }
        dx.add_scaled(&matmul_nt(dy, w)?, 1.0)?;
    }
    if let Some(ad) = &p.adapter {
        let s = ad.scaling();
        let u = matmul(x, &ad.b)?;
        let du = matmul_nt(dy, &ad.a)?.scale(s);
        sink.add(&format!("{prefix}.lora_a"), &matmul_tn(&u, dy)?.scale(s))?;
        sink.add(&format!("{prefix}.lora_b"), &matmul_tn(x, &du)?)?;
        dx.add_scaled(&matmul_nt(&du, &ad.b)?, 1.0)?;
    }
    Ok(dx)
}

/// Adjoint of one attention layer; returns the gradient w.r.t. its input.
fn attention_backward(
    layer: &DiffAttnLayer,
    cache: &AttnCache,
    prefix: &str,
    d_out: &Tensor2D,
    sink: &mut Sink,
) -> Result<Tensor2D> {
    let n = cache.x.rows();
    let d = layer.d_model();
    let hd = layer.head_dim;
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let differential = !cache.a2.is_empty();
    let lambda = cache.lambda;

    let d_concat = projection_backward(&layer.o, &format!("{prefix}.o"), &cache.concat, d_out, sink)?;
    let mut dq1 = Tensor2D::zeros(n, d);
    let mut dk1 = Tensor2D::zeros(n, d);
    let mut dv = Tensor2D::zeros(n, d);
    let mut dq2 = Tensor2D::zeros(n, d);
    let mut dk2 = Tensor2D::zeros(n, d);
    let mut d_lambda = 0.0;
    let gn_name = format!("{prefix}.gn_gain");

    for h in 0..layer.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let d_head = d_concat.col_block(lo, hi);
        let d_mixed = match (&layer.group_norm, differential) {
            (Some(gn), true) => {
                let upstream = d_head.scale(gn.output_scale());
                let (dm, dgain) =
                    rmsnorm_backward(&cache.mixed[h], gn.gain.row(h), NORM_EPS, &upstream);
                sink.add_row(&gn_name, h, &dgain);
                dm
            }
            _ => d_head,
        };
        let v_h = cache.v.col_block(lo, hi);
        let mut weights = cache.a1[h].clone();
        if differential {
            weights.add_scaled(&cache.a2[h], -lambda)?;
        }
        dv.set_col_block(lo, &matmul_tn(&weights, &d_mixed)?);
        let g = matmul_nt(&d_mixed, &v_h)?;

        let ds1 = masked_row_softmax_backward(&cache.a1[h], &g).scale(inv_sqrt);
        dq1.set_col_block(lo, &matmul(&ds1, &cache.k1.col_block(lo, hi))?);
        dk1.set_col_block(lo, &matmul_tn(&ds1, &cache.q1.col_block(lo, hi))?);

        if differential {
            let a2 = &cache.a2[h];
            d_lambda -= g.data().iter().zip(a2.data()).map(|(x, y)| x * y).sum::<f64>();
            let ds2 = masked_row_softmax_backward(a2, &g).scale(-lambda * inv_sqrt);
            let (q2, k2) = (cache.q2.as_ref().expect("differential"), cache.k2.as_ref().expect("differential"));
            dq2.set_col_block(lo, &matmul(&ds2, &k2.col_block(lo, hi))?);
            dk2.set_col_block(lo, &matmul_tn(&ds2, &q2.col_block(lo, hi))?);
        }
    }

    let x = &cache.x;
    let mut dx = projection_backward(&layer.q1, &format!("{prefix}.q1"), x, &dq1, sink)?;
    dx.add_scaled(&projection_backward(&layer.k1, &format!("{prefix}.k1"), x, &dk1, sink)?, 1.0)?;
    dx.add_scaled(&projection_backward(&layer.v, &format!("{prefix}.v"), x, &dv, sink)?, 1.0)?;
    if differential {
        let q2 = layer.q2.as_ref().expect("differential layer");
        let k2 = layer.k2.as_ref().expect("differential layer");
        dx.add_scaled(&projection_backward(q2, &format!("{prefix}.q2"), x, &dq2, sink)?, 1.0)?;
        dx.add_scaled(&projection_backward(k2, &format!("{prefix}.k2"), x, &dk2, sink)?, 1.0)?;
        let lambda_name = format!("{prefix}.lambda");
        sink.add(&lambda_name, &Tensor2D::filled(1, 1, d_lambda))?;
    }
    Ok(dx)
}

fn norm_backward(
    name: &str,
    x: &Tensor2D,
    gain: &Tensor2D,
    dy: &Tensor2D,
    sink: &mut Sink,
) -> Tensor2D {
    let (dx, dgain) = rmsnorm_backward(x, gain.data(), NORM_EPS, dy);
    sink.add_row(name, 0, &dgain);
    dx
}

fn block_backward(
    model: &ToyModel,
    i: usize,
    cache: &BlockCache,
    d_out: Tensor2D,
    sink: &mut Sink,
) -> Result<Tensor2D> {
    let block = &model.blocks[i];
    let d_act = projection_backward(&block.fc2, &format!("layers.{i}.mlp.fc2"), &cache.act, &d_out, sink)?;
    let mut d_pre = d_act;
    for (g, z) in d_pre.data_mut().iter_mut().zip(cache.pre_act.data()) {
        *g *= gelu_grad(*z);
    }
    let d_h_mlp = projection_backward(&block.fc1, &format!("layers.{i}.mlp.fc1"), &cache.h_mlp, &d_pre, sink)?;
    let mut d_mid = d_out;
    d_mid.add_scaled(
        &norm_backward(&format!("layers.{i}.mlp_norm.gain"), &cache.x_mid, &block.mlp_norm, &d_h_mlp, sink),
        1.0,
    )?;

    let d_h_attn = attention_backward(&block.attn, &cache.attn, &format!("layers.{i}.attn"), &d_mid, sink)?;
    let mut d_in = d_mid;
    d_in.add_scaled(
        &norm_backward(&format!("layers.{i}.attn_norm.gain"), &cache.x_in, &block.attn_norm, &d_h_attn, sink),
        1.0,
    )?;
    Ok(d_in)
}

pub(crate) fn backward_from_cache(
    model: &ToyModel,
    cache: &ModelCache,
    d_logits: &Tensor2D,
) -> Result<GradientSet> {
    let mut sink = Sink::new(model);
    let d_h_final = match &model.unembed {
        Some(u) => {
            if sink.wants("unembed") {
                sink.add("unembed", &matmul_tn(&cache.h_final, d_logits)?)?;
            }
            matmul_nt(d_logits, u)?
        }
        None => {
            if sink.wants("tok_emb") {
                sink.add("tok_emb", &matmul_tn(d_logits, &cache.h_final)?)?;
            }
            matmul(d_logits, &model.tok_emb)?
        }
    };
    let mut dx = norm_backward("final_norm.gain", &cache.x_final, &model.final_norm, &d_h_final, &mut sink);
    for i in (0..model.blocks.len()).rev() {
        dx = block_backward(model, i, &cache.blocks[i], dx, &mut sink)?;
    }
    for (pos, &tok) in cache.tokens.iter().enumerate() {
        sink.add_row("tok_emb", tok, dx.row(pos));
        sink.add_row("pos_emb", pos, dx.row(pos));
    }
    let grads = GradientSet { grads: sink.grads };
    if !grads.is_finite() {
        return Err(Error::NonFinite("backward"));
    }
    Ok(grads)
}

/// Loss and exact gradients for every trainable parameter.
///
/// `targets[i]` is the token predicted at position `i`; `mask[i]` selects
/// the positions that contribute to the loss.
pub fn backward(
    model: &ToyModel,
    tokens: &[usize],
    targets: &[usize],
    mask: &[bool],
) -> Result<(f64, GradientSet)> {
    let (logits, cache) = model.forward_cached(tokens)?;
    let (loss, d_logits) = cross_entropy_with_grad(&logits, targets, mask)?;
    let grads = backward_from_cache(model, &cache, &d_logits)?;
    Ok((loss, grads))
}
