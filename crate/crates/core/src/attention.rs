//! Causal multi-head attention in two flavours: the standard softmax
//! attention used by the frozen base and the differential form
//!
//! ```text
//! out_h = (sm(Q1_h K1_hᵀ / √head_dim) − λ · sm(Q2_h K2_hᵀ / √head_dim)) · V_h
//! ```
//!
//! where `Q2 = X·B·A` and `K2 = X·B·A` are pure adapter products and `Q1`,
//! `K1` are frozen projections with optional adapters on top.

use serde::{Deserialize, Serialize};

use crate::adapters::{apply_delta, merged_weight, LowRankAdapter};
use crate::error::{Error, Result};
use crate::linalg::{
    masked_row_softmax, matmul, per_head_rmsnorm, row_rms, scaled_scores, CausalMask, Tensor2D,
    NORM_EPS,
};

/// Default λ for both fixed and learnable modes.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// A linear map `x·W + adapter(x)`; either part may be absent but not both.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub weight: Option<Tensor2D>,
    pub adapter: Option<LowRankAdapter>,
}

impl Projection {
    pub fn frozen(weight: Tensor2D) -> Self {
        Projection {
            weight: Some(weight),
            adapter: None,
        }
    }

    pub fn adapter_only(adapter: LowRankAdapter) -> Self {
        Projection {
            weight: None,
            adapter: Some(adapter),
        }
    }

    pub fn forward(&self, x: &Tensor2D) -> Result<Tensor2D> {
        match (&self.weight, &self.adapter) {
            (Some(w), None) => matmul(x, w),
            (Some(w), Some(ad)) => matmul(x, w)?.add(&apply_delta(x, ad)?),
            (None, Some(ad)) => apply_delta(x, ad),
            (None, None) => Err(Error::State("projection has neither weight nor adapter".into())),
        }
    }

    /// Dense weight including the adapter delta.
    pub fn effective_weight(&self) -> Result<Tensor2D> {
        match (&self.weight, &self.adapter) {
            (Some(w), None) => Ok(w.clone()),
            (Some(w), Some(ad)) => merged_weight(w, ad),
            (None, Some(ad)) => Ok(ad.delta()),
            (None, None) => Err(Error::State("projection has neither weight nor adapter".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Fixed,
    Learnable,
}

/// Per-layer λ. In fixed mode `value` never leaves `init_value`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaState {
    pub mode: LambdaMode,
    pub value: f64,
    pub init_value: f64,
}

impl LambdaState {
    pub fn fixed(value: f64) -> Self {
        LambdaState {
            mode: LambdaMode::Fixed,
            value,
            init_value: value,
        }
    }

    pub fn learnable(init: f64) -> Self {
        LambdaState {
            mode: LambdaMode::Learnable,
            value: init,
            init_value: init,
        }
    }

    pub fn is_learnable(&self) -> bool {
        self.mode == LambdaMode::Learnable
    }
}

impl Default for LambdaState {
    fn default() -> Self {
        LambdaState::fixed(DEFAULT_LAMBDA)
    }
}

/// Per-head RMS normalization of the differential output with learnable
/// gains, followed by a constant `(1 − lambda_init)` factor.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    /// One row of `head_dim` gains per head.
    pub gain: Tensor2D,
    pub lambda_init: f64,
}

impl GroupNorm {
    pub fn new(n_heads: usize, head_dim: usize, lambda_init: f64) -> Result<Self> {
        if !(lambda_init > 0.0 && lambda_init < 1.0) {
            return Err(Error::Config(format!(
                "group norm requires lambda_init in (0, 1), got {lambda_init}"
            )));
        }
        Ok(GroupNorm {
            gain: Tensor2D::filled(n_heads, head_dim, 1.0),
            lambda_init,
        })
    }

    pub fn output_scale(&self) -> f64 {
        1.0 - self.lambda_init
    }
}

/// One layer's attention: frozen base projections, optional positive-term
/// adapters (inside `q1`/`k1`), the adapter-only denoiser projections, λ and
/// the optional group norm.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffAttnLayer {
    pub q1: Projection,
    pub k1: Projection,
    pub v: Projection,
    pub o: Projection,
    pub q2: Option<Projection>,
    pub k2: Option<Projection>,
    pub lambda: LambdaState,
    pub group_norm: Option<GroupNorm>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl DiffAttnLayer {
    /// A plain attention layer over frozen `d_model × d_model` weights.
    pub fn standard(
        w_q: Tensor2D,
        w_k: Tensor2D,
        w_v: Tensor2D,
        w_o: Tensor2D,
        n_heads: usize,
    ) -> Result<Self> {
        let d = w_q.rows();
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by n_heads {n_heads}"
            )));
        }
        for w in [&w_q, &w_k, &w_v, &w_o] {
            if w.shape() != (d, d) {
                return Err(Error::shape("DiffAttnLayer::standard", w.shape(), (d, d)));
            }
        }
        Ok(DiffAttnLayer {
            q1: Projection::frozen(w_q),
            k1: Projection::frozen(w_k),
            v: Projection::frozen(w_v),
            o: Projection::frozen(w_o),
            q2: None,
            k2: None,
            lambda: LambdaState::default(),
            group_norm: None,
            n_heads,
            head_dim: d / n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// True once denoiser projections are attached.
    pub fn is_differential(&self) -> bool {
        self.q2.is_some() && self.k2.is_some()
    }
}

/// Attention maps captured during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnTrace {
    /// Positive-term softmax map per head.
    pub a1: Vec<Tensor2D>,
    /// Denoiser softmax map per head; empty for standard attention.
    pub a2: Vec<Tensor2D>,
    pub lambda_used: f64,
    /// Per head, per row RMS of the group-normalized output before gains.
    /// Empty when group norm is off.
    pub group_norm_rms: Vec<Vec<f64>>,
}

/// Intermediate values kept for the reverse pass.
#[derive(Clone, Debug)]
pub(crate) struct AttnCache {
    pub x: Tensor2D,
    pub k1: Tensor2D,
    pub q1: Tensor2D,
    pub v: Tensor2D,
    pub q2: Option<Tensor2D>,
    pub k2: Option<Tensor2D>,
    pub a1: Vec<Tensor2D>,
    pub a2: Vec<Tensor2D>,
    /// `(A1 − λA2)·V_h` per head, before group norm.
    pub mixed: Vec<Tensor2D>,
    /// Heads concatenated, the input to `o`.
    pub concat: Tensor2D,
    pub lambda: f64,
}

impl AttnCache {
    pub fn trace(&self, layer: &DiffAttnLayer) -> AttnTrace {
        let group_norm_rms = match &layer.group_norm {
            Some(_) => self
                .mixed
                .iter()
                .map(|m| {
                    let unit = per_head_rmsnorm(m, &vec![1.0; m.cols()], NORM_EPS)
                        .expect("head width matches");
                    (0..unit.rows()).map(|i| row_rms(unit.row(i))).collect()
                })
                .collect(),
            None => Vec::new(),
        };
        AttnTrace {
            a1: self.a1.clone(),
            a2: self.a2.clone(),
            lambda_used: if self.a2.is_empty() { 0.0 } else { self.lambda },
            group_norm_rms,
        }
    }
}

fn check_input(x: &Tensor2D, layer: &DiffAttnLayer, mask: CausalMask) -> Result<()> {
    if x.cols() != layer.d_model() || x.rows() != mask.seq_len {
        return Err(Error::shape(
            "attention input",
            x.shape(),
            (mask.seq_len, layer.d_model()),
        ));
    }
    Ok(())
}

pub(crate) fn attention_forward(
    x: &Tensor2D,
    layer: &DiffAttnLayer,
    mask: CausalMask,
    differential: bool,
) -> Result<(Tensor2D, AttnCache)> {
    check_input(x, layer, mask)?;
    let hd = layer.head_dim;
    let q1 = layer.q1.forward(x)?;
    let k1 = layer.k1.forward(x)?;
    let v = layer.v.forward(x)?;
    let (q2, k2) = if differential {
        match (&layer.q2, &layer.k2) {
            (Some(q2), Some(k2)) => (Some(q2.forward(x)?), Some(k2.forward(x)?)),
            _ => {
                return Err(Error::Config(
                    "differential attention needs denoiser adapters on Q2 and K2".into(),
                ))
            }
        }
    } else {
        (None, None)
    };
    let lambda = layer.lambda.value;

    let mut a1 = Vec::with_capacity(layer.n_heads);
    let mut a2 = Vec::new();
    let mut mixed = Vec::with_capacity(layer.n_heads);
    let mut concat = Tensor2D::zeros(x.rows(), layer.d_model());
    for h in 0..layer.n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let p1 = masked_row_softmax(&scaled_scores(&q1.col_block(lo, hi), &k1.col_block(lo, hi), hd)?, mask)?;
        let mut weights = p1.clone();
        if let (Some(q2), Some(k2)) = (&q2, &k2) {
            let p2 = masked_row_softmax(
                &scaled_scores(&q2.col_block(lo, hi), &k2.col_block(lo, hi), hd)?,
                mask,
            )?;
            weights.add_scaled(&p2, -lambda)?;
            a2.push(p2);
        }
        let out_h = matmul(&weights, &v.col_block(lo, hi))?;
        let head_out = match (&layer.group_norm, differential) {
            (Some(gn), true) => {
                per_head_rmsnorm(&out_h, gn.gain.row(h), NORM_EPS)?.scale(gn.output_scale())
            }
            _ => out_h.clone(),
        };
        concat.set_col_block(lo, &head_out);
        a1.push(p1);
        mixed.push(out_h);
    }
    let out = layer.o.forward(&concat)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("attention"));
    }
    Ok((
        out,
        AttnCache {
            x: x.clone(),
            q1,
            k1,
            v,
            q2,
            k2,
            a1,
            a2,
            mixed,
            concat,
            lambda,
        },
    ))
}

/// Softmax attention over `Q1`, `K1`, `V`; the denoiser term, λ and group
/// norm are ignored. The trace carries `a1` only.
pub fn standard_attention(
    x: &Tensor2D,
    layer: &DiffAttnLayer,
    mask: CausalMask,
) -> Result<(Tensor2D, AttnTrace)> {
    let (out, cache) = attention_forward(x, layer, mask, false)?;
    Ok((out, cache.trace(layer)))
}

/// Differential attention. Fails with a configuration error when the layer
/// has no denoiser adapters.
pub fn diff_attention(
    x: &Tensor2D,
    layer: &DiffAttnLayer,
    mask: CausalMask,
) -> Result<(Tensor2D, AttnTrace)> {
    let (out, cache) = attention_forward(x, layer, mask, true)?;
    Ok((out, cache.trace(layer)))
}

/// `a1 − λ·a2` per head, or `a1` when the trace has no denoiser maps.
pub fn effective_attention_map(trace: &AttnTrace) -> Result<Vec<Tensor2D>> {
    if trace.a2.is_empty() {
        return Ok(trace.a1.clone());
    }
    if trace.a1.len() != trace.a2.len() {
        return Err(Error::shape(
            "effective_attention_map",
            (trace.a1.len(), 0),
            (trace.a2.len(), 0),
        ));
    }
    trace
        .a1
        .iter()
        .zip(&trace.a2)
        .map(|(p1, p2)| {
            let mut m = p1.clone();
            m.add_scaled(p2, -trace.lambda_used)?;
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::init_adapter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, std: f64) -> Tensor2D {
        let n = Normal::new(0.0, std).unwrap();
        Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).unwrap()
    }

    fn random_adapter(d: usize, rank: usize, rng: &mut ChaCha8Rng) -> LowRankAdapter {
        LowRankAdapter::new(random(d, rank, rng, 0.5), random(rank, d, rng, 0.5), 2.0 * rank as f64)
            .unwrap()
    }

    fn base_layer(d: usize, heads: usize, seed: u64) -> DiffAttnLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        DiffAttnLayer::standard(
            random(d, d, &mut rng, s),
            random(d, d, &mut rng, s),
            random(d, d, &mut rng, s),
            random(d, d, &mut rng, s),
            heads,
        )
        .unwrap()
    }

    fn with_denoiser(mut layer: DiffAttnLayer, rank: usize, lambda: f64, seed: u64, trained: bool) -> DiffAttnLayer {
        let d = layer.d_model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (q2, k2) = if trained {
            (random_adapter(d, rank, &mut rng), random_adapter(d, rank, &mut rng))
        } else {
            (
                init_adapter(d, d, rank, 2.0 * rank as f64, seed).unwrap(),
                init_adapter(d, d, rank, 2.0 * rank as f64, seed + 1).unwrap(),
            )
        };
        layer.q2 = Some(Projection::adapter_only(q2));
        layer.k2 = Some(Projection::adapter_only(k2));
        layer.lambda = LambdaState::fixed(lambda);
        layer
    }

    /// Literal transcription: merged dense weights, explicit per-head loops,
    /// scalar softmax.
    fn literal_standard(x: &Tensor2D, layer: &DiffAttnLayer) -> Tensor2D {
        let wq = layer.q1.effective_weight().unwrap();
        let wk = layer.k1.effective_weight().unwrap();
        let wv = layer.v.effective_weight().unwrap();
        let wo = layer.o.effective_weight().unwrap();
        let (n, d, hd) = (x.rows(), layer.d_model(), layer.head_dim);
        let proj = |w: &Tensor2D| {
            let mut out = vec![vec![0.0; d]; n];
            for i in 0..n {
                for j in 0..d {
                    for p in 0..d {
                        out[i][j] += x.get(i, p) * w.get(p, j);
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..layer.n_heads {
            for i in 0..n {
                let mut scores = Vec::new();
                for j in 0..=i {
                    let mut s = 0.0;
                    for c in h * hd..(h + 1) * hd {
                        s += q[i][c] * k[j][c];
                    }
                    scores.push(s / (hd as f64).sqrt());
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let p = (s - m).exp() / z;
                    for c in h * hd..(h + 1) * hd {
                        concat[i][c] += p * v[j][c];
                    }
                }
            }
        }
        let mut out = Tensor2D::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                let mut s = 0.0;
                for p in 0..d {
                    s += concat[i][p] * wo.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn single_token_copies_projected_value() {
        let layer = base_layer(8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(1, 8, &mut rng, 1.0);
        let (out, _) = standard_attention(&x, &layer, CausalMask::new(1)).unwrap();
        let v = layer.v.forward(&x).unwrap();
        let want = layer.o.forward(&v).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut layer = base_layer(8, 2, 3);
        layer.q1.adapter = Some(init_adapter(8, 8, 2, 4.0, 9).unwrap());
        let (out, _) = standard_attention(&Tensor2D::zeros(5, 8), &layer, CausalMask::new(5)).unwrap();
        assert_eq!(out, Tensor2D::zeros(5, 8));
    }

    #[test]
    fn standard_matches_literal_oracle() {
        let mut layer = base_layer(8, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        layer.q1.adapter = Some(random_adapter(8, 2, &mut rng));
        layer.k1.adapter = Some(random_adapter(8, 2, &mut rng));
        let x = random(4, 8, &mut rng, 1.0);
        let (out, trace) = standard_attention(&x, &layer, CausalMask::new(4)).unwrap();
        assert!(out.max_abs_diff(&literal_standard(&x, &layer)) < 1e-12);
        assert_eq!(trace.a1.len(), 2);
        assert!(trace.a2.is_empty());
    }

    #[test]
    fn zero_lambda_reduces_to_standard() {
        let layer = with_denoiser(base_layer(8, 2, 6), 2, 0.0, 7, true);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(6, 8, &mut rng, 1.0);
        let mask = CausalMask::new(6);
        let (d, _) = diff_attention(&x, &layer, mask).unwrap();
        let (s, _) = standard_attention(&x, &layer, mask).unwrap();
        assert!(d.max_abs_diff(&s) <= 1e-12);
    }

    #[test]
    fn fresh_denoiser_is_uniform_over_prefix() {
        let layer = with_denoiser(base_layer(8, 2, 9), 2, 0.1, 10, false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(5, 8, &mut rng, 1.0);
        let (_, trace) = diff_attention(&x, &layer, CausalMask::new(5)).unwrap();
        for a2 in &trace.a2 {
            for t in 0..5 {
                for j in 0..5 {
                    let want = if j <= t { 1.0 / (t + 1) as f64 } else { 0.0 };
                    assert!((a2.get(t, j) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn missing_denoiser_is_a_config_error() {
        let layer = base_layer(8, 2, 12);
        let err = diff_attention(&Tensor2D::zeros(2, 8), &layer, CausalMask::new(2)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_head_matches_composition_oracle() {
        let layer = with_denoiser(base_layer(4, 1, 13), 2, 0.1, 14, true);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(3, 4, &mut rng, 1.0);
        let mask = CausalMask::new(3);

        let q1 = matmul(&x, layer.q1.weight.as_ref().unwrap()).unwrap();
        let k1 = matmul(&x, layer.k1.weight.as_ref().unwrap()).unwrap();
        let v = matmul(&x, layer.v.weight.as_ref().unwrap()).unwrap();
        let ad_q = layer.q2.as_ref().unwrap().adapter.as_ref().unwrap();
        let ad_k = layer.k2.as_ref().unwrap().adapter.as_ref().unwrap();
        let q2 = matmul(&matmul(&x, &ad_q.b).unwrap(), &ad_q.a).unwrap().scale(ad_q.scaling());
        let k2 = matmul(&matmul(&x, &ad_k.b).unwrap(), &ad_k.a).unwrap().scale(ad_k.scaling());
        let s1 = masked_row_softmax(&scaled_scores(&q1, &k1, 4).unwrap(), mask).unwrap();
        let s2 = masked_row_softmax(&scaled_scores(&q2, &k2, 4).unwrap(), mask).unwrap();
        let mixed = matmul(&s1, &v).unwrap().sub(&matmul(&s2, &v).unwrap().scale(0.1)).unwrap();
        let want = matmul(&mixed, layer.o.weight.as_ref().unwrap()).unwrap();

        let (got, trace) = diff_attention(&x, &layer, mask).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert_eq!(trace.lambda_used, 0.1);
    }

    #[test]
    fn init_law_subtracts_prefix_mean_of_values() {
        let lambda = 0.3;
        let base = base_layer(8, 2, 16);
        let layer = with_denoiser(base.clone(), 2, lambda, 17, false);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for n in 1..=8 {
            let x = random(n, 8, &mut rng, 1.0);
            let mask = CausalMask::new(n);
            let (got, _) = diff_attention(&x, &layer, mask).unwrap();
            let (std, _) = standard_attention(&x, &base, mask).unwrap();
            let v = base.v.forward(&x).unwrap();
            let mut prefix_mean = Tensor2D::zeros(n, 8);
            for t in 0..n {
                for j in 0..=t {
                    for c in 0..8 {
                        let cur = prefix_mean.get(t, c);
                        prefix_mean.set(t, c, cur + v.get(j, c) / (t + 1) as f64);
                    }
                }
            }
            let correction = base.o.forward(&prefix_mean).unwrap().scale(lambda);
            let want = std.sub(&correction).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-12, "seq_len {n}");
        }
    }

    #[test]
    fn group_norm_rows_have_unit_rms() {
        let mut layer = with_denoiser(base_layer(8, 2, 19), 2, 0.1, 20, true);
        let mut gn = GroupNorm::new(2, 4, 0.1).unwrap();
        gn.gain = random(2, 4, &mut ChaCha8Rng::seed_from_u64(21), 1.0);
        layer.group_norm = Some(gn);
        let x = random(7, 8, &mut ChaCha8Rng::seed_from_u64(22), 1.0);
        let (_, trace) = diff_attention(&x, &layer, CausalMask::new(7)).unwrap();
        assert_eq!(trace.group_norm_rms.len(), 2);
        for head in &trace.group_norm_rms {
            for rms in head {
                assert!((rms - 1.0).abs() <= 1e-6);
            }
        }
        assert!(GroupNorm::new(2, 4, 1.0).is_err());
        assert!(GroupNorm::new(2, 4, 0.0).is_err());
    }

    #[test]
    fn effective_map_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mask = CausalMask::new(4);
        let p = masked_row_softmax(&random(4, 4, &mut rng, 2.0), mask).unwrap();
        let q = masked_row_softmax(&random(4, 4, &mut rng, 2.0), mask).unwrap();

        let zero = AttnTrace { a1: vec![p.clone()], a2: vec![q.clone()], lambda_used: 0.0, group_norm_rms: vec![] };
        assert_eq!(effective_attention_map(&zero).unwrap(), vec![p.clone()]);

        let same = AttnTrace { a1: vec![p.clone()], a2: vec![p.clone()], lambda_used: 0.25, group_norm_rms: vec![] };
        assert!(effective_attention_map(&same).unwrap()[0].max_abs_diff(&p.scale(0.75)) < 1e-15);

        let rand = AttnTrace { a1: vec![p.clone()], a2: vec![q.clone()], lambda_used: 0.1, group_norm_rms: vec![] };
        let eff = effective_attention_map(&rand).unwrap();
        for i in 0..4 {
            assert!((eff[0].row(i).iter().sum::<f64>() - 0.9).abs() <= 1e-12);
        }

        let bad = AttnTrace { a1: vec![p.clone(), p], a2: vec![q], lambda_used: 0.1, group_norm_rms: vec![] };
        assert!(matches!(effective_attention_map(&bad), Err(Error::Shape { .. })));
    }
}
