//! Toy decoder-only transformer that stands in for a pretrained base.
//!
//! Layout per block (pre-norm):
//!
//! ```text
//! x ← x + attn(rmsnorm(x))
//! x ← x + fc2(gelu(fc1(rmsnorm(x))))
//! ```
//!
//! followed by a final RMS norm and the unembedding. The base is built
//! frozen; [`inject_adapters`] adds the trainable parts for the FullLoRA and
//! DiffLoRA variants.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{init_adapter, AdapterPlacement, PlacementMode};
use crate::attention::{
    attention_forward, AttnCache, AttnTrace, DiffAttnLayer, GroupNorm, LambdaMode, LambdaState,
    Projection, DEFAULT_LAMBDA,
};
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, per_head_rmsnorm, CausalMask, Tensor2D, NORM_EPS};

pub use checkpoint::{
    apply_adapter_checkpoint, load_checkpoint, load_checkpoint_with_extras, read_checkpoint,
    save_adapter_checkpoint, save_checkpoint, write_checkpoint, CheckpointExtras, CheckpointKind,
    RawCheckpoint,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The frozen base alone; nothing is trainable.
    Baseline,
    /// LoRA on Q, K, V, O and both MLP projections at a parameter-matched rank.
    FullLora,
    /// Differential attention realized through adapters.
    DiffLora,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConfig {
    pub mode: LambdaMode,
    pub init: f64,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            mode: LambdaMode::Fixed,
            init: DEFAULT_LAMBDA,
        }
    }
}

impl LambdaConfig {
    pub fn state(&self) -> LambdaState {
        match self.mode {
            LambdaMode::Fixed => LambdaState::fixed(self.init),
            LambdaMode::Learnable => LambdaState::learnable(self.init),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub variant: Variant,
    /// DiffLoRA placement. For FullLoRA it is the reference whose adapter
    /// budget the solved rank must not exceed.
    pub placement: Option<AdapterPlacement>,
    /// LoRA alpha; `None` means `2 · rank` for every adapter.
    pub lora_alpha: Option<f64>,
    /// Explicit FullLoRA rank; `None` solves it from `placement`.
    pub full_lora_rank: Option<usize>,
    pub lambda: LambdaConfig,
    pub group_norm: bool,
    pub tied_embeddings: bool,
    /// Std of a Gaussian init for the B factors of the negative-term
    /// adapters. The default 0 is the plain LoRA init, under which Q2 and K2
    /// are both zero and every adapter gradient of the negative term
    /// vanishes (each factor's gradient is scaled by the other's output).
    pub negative_b_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            max_seq_len: 128,
            mlp_hidden: 64,
            variant: Variant::DiffLora,
            placement: Some(AdapterPlacement::negative_only(8)),
            lora_alpha: None,
            full_lora_rank: None,
            lambda: LambdaConfig::default(),
            group_norm: false,
            tied_embeddings: false,
            negative_b_init_std: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.lambda.init.is_finite() {
            return Err(Error::Config("lambda init must be finite".into()));
        }
        if !(self.negative_b_init_std.is_finite() && self.negative_b_init_std >= 0.0) {
            return Err(Error::Config("negative_b_init_std must be finite and non-negative".into()));
        }
        if let Some(alpha) = self.lora_alpha {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::Config("lora_alpha must be positive".into()));
            }
        }
        match self.variant {
            Variant::Baseline => {
                if self.group_norm {
                    return Err(Error::Config("group_norm requires the diff_lora variant".into()));
                }
            }
            Variant::DiffLora => {
                let placement = self.placement.ok_or_else(|| {
                    Error::Config("diff_lora variant requires an adapter placement".into())
                })?;
                placement.validate()?;
                if placement.rank_negative > self.d_model {
                    return Err(Error::Config(format!(
                        "rank {} exceeds d_model {}",
                        placement.rank_negative, self.d_model
                    )));
                }
                if self.group_norm && !(self.lambda.init > 0.0 && self.lambda.init < 1.0) {
                    return Err(Error::Config(format!(
                        "group norm requires lambda init in (0, 1), got {}",
                        self.lambda.init
                    )));
                }
            }
            Variant::FullLora => {
                if self.group_norm {
                    return Err(Error::Config("group_norm requires the diff_lora variant".into()));
                }
                self.full_lora_rank()?;
            }
        }
        Ok(())
    }

    /// LoRA alpha for an adapter of `rank`.
    pub fn alpha_for(&self, rank: usize) -> f64 {
        self.lora_alpha.unwrap_or(2.0 * rank as f64)
    }

    /// Trainable scalars one FullLoRA adapter rank adds across the model.
    pub fn full_lora_params_per_rank(&self) -> usize {
        let d = self.d_model;
        let h = self.mlp_hidden;
        self.n_layers * (4 * (d + d) + (d + h) + (h + d))
    }

    /// DiffLoRA adapter budget of `placement`, ignoring λ and gains.
    pub fn diff_lora_adapter_budget(&self) -> Option<usize> {
        self.placement.map(|p| {
            crate::adapters::trainable_param_count(
                p,
                self.n_layers,
                self.d_model,
                self.d_model,
                false,
                false,
                self.head_dim(),
                self.n_heads,
            )
        })
    }

    /// Explicit rank, or the largest rank whose FullLoRA count stays within
    /// the DiffLoRA adapter budget.
    pub fn full_lora_rank(&self) -> Result<usize> {
        let max_rank = self.d_model.min(self.mlp_hidden);
        let rank = match self.full_lora_rank {
            Some(r) => r,
            None => {
                let budget = self.diff_lora_adapter_budget().ok_or_else(|| {
                    Error::Config("full_lora needs a placement or an explicit full_lora_rank".into())
                })?;
                (budget / self.full_lora_params_per_rank().max(1)).min(max_rank)
            }
        };
        if rank == 0 || rank > max_rank {
            return Err(Error::Config(format!(
                "full_lora rank {rank} must be in 1..={max_rank}"
            )));
        }
        Ok(rank)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Frozen,
    Trainable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weights of the pretrained-style base.
    Base,
    Adapter,
    Lambda,
    GroupNormGain,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub role: ParamRole,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor2D,
    pub attn: DiffAttnLayer,
    pub mlp_norm: Tensor2D,
    pub fc1: Projection,
    pub fc2: Projection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub tok_emb: Tensor2D,
    pub pos_emb: Tensor2D,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor2D,
    /// `None` when embeddings are tied.
    pub unembed: Option<Tensor2D>,
    injected: bool,
    base_trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor2D,
    /// One trace per layer; empty unless requested.
    pub traces: Vec<AttnTrace>,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    pub x_in: Tensor2D,
    pub attn: AttnCache,
    pub x_mid: Tensor2D,
    pub h_mlp: Tensor2D,
    pub pre_act: Tensor2D,
    pub act: Tensor2D,
}

#[derive(Clone, Debug)]
pub(crate) struct ModelCache {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockCache>,
    pub x_final: Tensor2D,
    pub h_final: Tensor2D,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

pub(crate) fn gelu(z: f64) -> f64 {
    0.5 * z * (1.0 + (GELU_C * (z + 0.044715 * z * z * z)).tanh())
}

pub(crate) fn gelu_grad(z: f64) -> f64 {
    let t = (GELU_C * (z + 0.044715 * z * z * z)).tanh();
    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * z * z)
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor2D {
    let normal = Normal::new(0.0, std).expect("valid std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("finite gaussian samples")
}

/// Seed for the adapter in `slot` of `layer`, decorrelated from the base seed.
fn adapter_seed(seed: u64, layer: usize, slot: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul((layer * 16 + slot + 1) as u64)
}

/// Deterministic seeded base. Every tensor is frozen.
pub fn build_base(config: &ModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let (v, d, h) = (config.vocab_size, config.d_model, config.mlp_hidden);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let attn_std = 1.0 / (d as f64).sqrt();
    let tok_emb = gaussian(v, d, 1.0, &mut rng);
    let pos_emb = gaussian(config.max_seq_len, d, 1.0, &mut rng);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn = DiffAttnLayer::standard(
            gaussian(d, d, attn_std, &mut rng),
            gaussian(d, d, attn_std, &mut rng),
            gaussian(d, d, attn_std, &mut rng),
            gaussian(d, d, attn_std, &mut rng),
            config.n_heads,
        )?;
        let fc1 = Projection::frozen(gaussian(d, h, attn_std, &mut rng));
        let fc2 = Projection::frozen(gaussian(h, d, 1.0 / (h as f64).sqrt(), &mut rng));
        blocks.push(Block {
            attn_norm: Tensor2D::filled(1, d, 1.0),
            attn,
            mlp_norm: Tensor2D::filled(1, d, 1.0),
            fc1,
            fc2,
        });
    }
    let unembed = (!config.tied_embeddings).then(|| gaussian(d, v, attn_std, &mut rng));
    Ok(ToyModel {
        config: config.clone(),
        tok_emb,
        pos_emb,
        blocks,
        final_norm: Tensor2D::filled(1, d, 1.0),
        unembed,
        injected: false,
        base_trainable: false,
    })
}

/// Adds the trainable parts of `config.variant` to a frozen base.
///
/// DiffLoRA gets denoiser adapters on every layer, positive-term adapters
/// for `BothTerms`, λ and optional group norm. FullLoRA gets adapters on
/// Q, K, V, O and both MLP projections. All adapters start with `B = 0`.
pub fn inject_adapters(mut base: ToyModel, config: &ModelConfig) -> Result<ToyModel> {
    if base.injected {
        return Err(Error::State("adapters were already injected into this model".into()));
    }
    config.validate()?;
    let same_arch = |a: &ModelConfig, b: &ModelConfig| {
        (a.vocab_size, a.d_model, a.n_heads, a.n_layers, a.max_seq_len, a.mlp_hidden, a.tied_embeddings)
            == (b.vocab_size, b.d_model, b.n_heads, b.n_layers, b.max_seq_len, b.mlp_hidden, b.tied_embeddings)
    };
    if !same_arch(&base.config, config) {
        return Err(Error::Config("injection config does not match the base architecture".into()));
    }
    let d = config.d_model;
    match config.variant {
        Variant::Baseline => {
            return Err(Error::Config("the baseline variant has nothing to inject".into()))
        }
        Variant::DiffLora => {
            let placement = config.placement.expect("validated");
            for (i, block) in base.blocks.iter_mut().enumerate() {
                let attn = &mut block.attn;
                let rn = placement.rank_negative;
                attn.q2 = Some(Projection::adapter_only(init_adapter(
                    d, d, rn, config.alpha_for(rn), adapter_seed(config.seed, i, 0),
                )?));
                attn.k2 = Some(Projection::adapter_only(init_adapter(
                    d, d, rn, config.alpha_for(rn), adapter_seed(config.seed, i, 1),
                )?));
                if config.negative_b_init_std > 0.0 {
                    let normal = Normal::new(0.0, config.negative_b_init_std)
                        .map_err(|e| Error::Config(e.to_string()))?;
                    let mut rng = ChaCha8Rng::seed_from_u64(adapter_seed(config.seed, i, 10));
                    for p in [attn.q2.as_mut(), attn.k2.as_mut()].into_iter().flatten() {
                        let b = &mut p.adapter.as_mut().expect("adapter-only projection").b;
                        b.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                    }
                }
                if placement.mode == PlacementMode::BothTerms {
                    let rp = placement.rank_positive;
                    attn.q1.adapter = Some(init_adapter(
                        d, d, rp, config.alpha_for(rp), adapter_seed(config.seed, i, 2),
                    )?);
                    attn.k1.adapter = Some(init_adapter(
                        d, d, rp, config.alpha_for(rp), adapter_seed(config.seed, i, 3),
                    )?);
                }
                attn.lambda = config.lambda.state();
                if config.group_norm {
                    attn.group_norm =
                        Some(GroupNorm::new(attn.n_heads, attn.head_dim, config.lambda.init)?);
                }
            }
        }
        Variant::FullLora => {
            let r = config.full_lora_rank()?;
            let alpha = config.alpha_for(r);
            let h = config.mlp_hidden;
            for (i, block) in base.blocks.iter_mut().enumerate() {
                let attn = &mut block.attn;
                attn.q1.adapter = Some(init_adapter(d, d, r, alpha, adapter_seed(config.seed, i, 4))?);
                attn.k1.adapter = Some(init_adapter(d, d, r, alpha, adapter_seed(config.seed, i, 5))?);
                attn.v.adapter = Some(init_adapter(d, d, r, alpha, adapter_seed(config.seed, i, 6))?);
                attn.o.adapter = Some(init_adapter(d, d, r, alpha, adapter_seed(config.seed, i, 7))?);
                block.fc1.adapter = Some(init_adapter(d, h, r, alpha, adapter_seed(config.seed, i, 8))?);
                block.fc2.adapter = Some(init_adapter(h, d, r, alpha, adapter_seed(config.seed, i, 9))?);
            }
        }
    }
    base.config = config.clone();
    base.injected = true;
    Ok(base)
}

type ParamRef<'a> = (ParamInfo, &'a [f64]);
type ParamMut<'a> = (ParamInfo, &'a mut [f64]);

fn info(name: String, kind: ParamKind, role: ParamRole, shape: (usize, usize)) -> ParamInfo {
    ParamInfo { name, kind, role, shape }
}

fn push_ref<'a>(out: &mut Vec<ParamRef<'a>>, name: String, kind: ParamKind, role: ParamRole, t: &'a Tensor2D) {
    out.push((info(name, kind, role, t.shape()), t.data()));
}

fn push_mut<'a>(out: &mut Vec<ParamMut<'a>>, name: String, kind: ParamKind, role: ParamRole, t: &'a mut Tensor2D) {
    let shape = t.shape();
    out.push((info(name, kind, role, shape), t.data_mut()));
}

fn projection_ref<'a>(out: &mut Vec<ParamRef<'a>>, prefix: String, p: &'a Projection) {
    if let Some(w) = &p.weight {
        push_ref(out, format!("{prefix}.weight"), ParamKind::Base, ParamRole::Frozen, w);
    }
    if let Some(ad) = &p.adapter {
        push_ref(out, format!("{prefix}.lora_b"), ParamKind::Adapter, ParamRole::Trainable, &ad.b);
        push_ref(out, format!("{prefix}.lora_a"), ParamKind::Adapter, ParamRole::Trainable, &ad.a);
    }
}

fn projection_mut<'a>(out: &mut Vec<ParamMut<'a>>, prefix: String, p: &'a mut Projection) {
    if let Some(w) = &mut p.weight {
        push_mut(out, format!("{prefix}.weight"), ParamKind::Base, ParamRole::Frozen, w);
    }
    if let Some(ad) = &mut p.adapter {
        push_mut(out, format!("{prefix}.lora_b"), ParamKind::Adapter, ParamRole::Trainable, &mut ad.b);
        push_mut(out, format!("{prefix}.lora_a"), ParamKind::Adapter, ParamRole::Trainable, &mut ad.a);
    }
}

fn unfreeze_roles<T>(list: &mut [(ParamInfo, T)]) {
    for (info, _) in list {
        if info.kind == ParamKind::Base {
            info.role = ParamRole::Trainable;
        }
    }
}

/// Walks every parameter in registry order. Expanded once for shared and
/// once for mutable access so both walks agree on names and order.
macro_rules! collect_params {
    ($model:expr, $push:ident, $proj:ident, $from:path, [$($r:tt)*]) => {{
        let m = $model;
        let mut out = Vec::new();
        $push(&mut out, "tok_emb".into(), ParamKind::Base, ParamRole::Frozen, $($r)* m.tok_emb);
        $push(&mut out, "pos_emb".into(), ParamKind::Base, ParamRole::Frozen, $($r)* m.pos_emb);
        for (i, b) in ($($r)* m.blocks).into_iter().enumerate() {
            $push(&mut out, format!("layers.{i}.attn_norm.gain"), ParamKind::Base, ParamRole::Frozen, $($r)* b.attn_norm);
            let attn = $($r)* b.attn;
            let differential = attn.is_differential();
            let lambda_role = if attn.lambda.is_learnable() { ParamRole::Trainable } else { ParamRole::Frozen };
            $proj(&mut out, format!("layers.{i}.attn.q1"), $($r)* attn.q1);
            $proj(&mut out, format!("layers.{i}.attn.k1"), $($r)* attn.k1);
            $proj(&mut out, format!("layers.{i}.attn.v"), $($r)* attn.v);
            $proj(&mut out, format!("layers.{i}.attn.o"), $($r)* attn.o);
            if let Some(p) = $($r)* attn.q2 {
                $proj(&mut out, format!("layers.{i}.attn.q2"), p);
            }
            if let Some(p) = $($r)* attn.k2 {
                $proj(&mut out, format!("layers.{i}.attn.k2"), p);
            }
            if differential {
                let name = format!("layers.{i}.attn.lambda");
                out.push((info(name, ParamKind::Lambda, lambda_role, (1, 1)), $from($($r)* attn.lambda.value)));
            }
            if let Some(gn) = $($r)* attn.group_norm {
                $push(&mut out, format!("layers.{i}.attn.gn_gain"), ParamKind::GroupNormGain, ParamRole::Trainable, $($r)* gn.gain);
            }
            $push(&mut out, format!("layers.{i}.mlp_norm.gain"), ParamKind::Base, ParamRole::Frozen, $($r)* b.mlp_norm);
            $proj(&mut out, format!("layers.{i}.mlp.fc1"), $($r)* b.fc1);
            $proj(&mut out, format!("layers.{i}.mlp.fc2"), $($r)* b.fc2);
        }
        $push(&mut out, "final_norm.gain".into(), ParamKind::Base, ParamRole::Frozen, $($r)* m.final_norm);
        if let Some(u) = $($r)* m.unembed {
            $push(&mut out, "unembed".into(), ParamKind::Base, ParamRole::Frozen, u);
        }
        out
    }};
}

impl ToyModel {
    /// Base plus injected adapters, in one step.
    pub fn new(config: &ModelConfig) -> Result<ToyModel> {
        let base = build_base(config)?;
        match config.variant {
            Variant::Baseline => Ok(base),
            _ => inject_adapters(base, config),
        }
    }

    pub fn is_injected(&self) -> bool {
        self.injected
    }

    /// Marks the base weights trainable, for building a pretrained-style
    /// base. Only allowed before adapters are injected; the flag is not
    /// persisted, so a saved and reloaded base is frozen again.
    pub fn unfreeze_base(&mut self) -> Result<()> {
        if self.injected {
            return Err(Error::State("cannot unfreeze the base of an injected model".into()));
        }
        self.base_trainable = true;
        Ok(())
    }

    pub fn freeze_base(&mut self) {
        self.base_trainable = false;
    }

    /// Shared views of every parameter, in registry order.
    pub fn params(&self) -> Vec<(ParamInfo, &[f64])> {
        let mut list = collect_params!(self, push_ref, projection_ref, std::slice::from_ref, [&]);
        if self.base_trainable {
            unfreeze_roles(&mut list);
        }
        list
    }

    /// Mutable views of every parameter, in registry order.
    pub fn params_mut(&mut self) -> Vec<(ParamInfo, &mut [f64])> {
        let base_trainable = self.base_trainable;
        let mut list = collect_params!(self, push_mut, projection_mut, std::slice::from_mut, [&mut]);
        if base_trainable {
            unfreeze_roles(&mut list);
        }
        list
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.params().into_iter().map(|(info, _)| info).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params()
            .into_iter()
            .filter(|(i, _)| i.role == ParamRole::Trainable)
            .map(|(i, _)| i.name)
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(i, _)| i.role == ParamRole::Trainable)
            .map(|(_, d)| d.len())
            .sum()
    }

    pub fn param_info(&self, name: &str) -> Option<ParamInfo> {
        self.param_infos().into_iter().find(|i| i.name == name)
    }

    /// Copy of a parameter as a tensor (λ as 1×1).
    pub fn param_tensor(&self, name: &str) -> Option<Tensor2D> {
        self.params()
            .into_iter()
            .find(|(i, _)| i.name == name)
            .map(|(i, d)| Tensor2D::from_vec(i.shape.0, i.shape.1, d.to_vec()).expect("finite"))
    }

    /// Runs `f` on the raw storage of one parameter.
    pub fn with_param_mut<R>(&mut self, name: &str, f: impl FnOnce(&mut [f64]) -> R) -> Result<R> {
        let slot = self
            .params_mut()
            .into_iter()
            .find(|(i, _)| i.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        Ok(f(slot.1))
    }

    pub fn set_param(&mut self, name: &str, value: &Tensor2D) -> Result<()> {
        let info = self
            .param_info(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if info.shape != value.shape() {
            return Err(Error::shape("set_param", info.shape, value.shape()));
        }
        self.with_param_mut(name, |dst| dst.copy_from_slice(value.data()))
    }

    fn digest_where(&self, keep: impl Fn(&ParamInfo) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (info, data) in self.params() {
            if !keep(&info) {
                continue;
            }
            hasher.update(info.name.as_bytes());
            hasher.update((info.shape.0 as u64).to_le_bytes());
            hasher.update((info.shape.1 as u64).to_le_bytes());
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// SHA-256 over every frozen parameter.
    pub fn frozen_digest(&self) -> String {
        self.digest_where(|i| i.role == ParamRole::Frozen)
    }

    /// SHA-256 over the base weights only; identifies which base an
    /// adapter checkpoint belongs to.
    pub fn base_digest(&self) -> String {
        self.digest_where(|i| i.kind == ParamKind::Base)
    }

    /// Current λ of every differential layer.
    pub fn lambdas(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .filter(|b| b.attn.is_differential())
            .map(|b| b.attn.lambda.value)
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, tokens: &[usize]) -> Result<(Tensor2D, ModelCache)> {
        self.check_tokens(tokens)?;
        let n = tokens.len();
        let d = self.config.d_model;
        let mask = CausalMask::new(n);
        let mut x = Tensor2D::zeros(n, d);
        for (i, &t) in tokens.iter().enumerate() {
            for ((o, e), p) in x.row_mut(i).iter_mut().zip(self.tok_emb.row(t)).zip(self.pos_emb.row(i)) {
                *o = e + p;
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let x_in = x;
            let h_attn = per_head_rmsnorm(&x_in, block.attn_norm.data(), NORM_EPS)?;
            let (attn_out, attn) =
                attention_forward(&h_attn, &block.attn, mask, block.attn.is_differential())?;
            let x_mid = x_in.add(&attn_out)?;
            let h_mlp = per_head_rmsnorm(&x_mid, block.mlp_norm.data(), NORM_EPS)?;
            let pre_act = block.fc1.forward(&h_mlp)?;
            let act = pre_act.map(gelu);
            let mlp_out = block.fc2.forward(&act)?;
            x = x_mid.add(&mlp_out)?;
            caches.push(BlockCache { x_in, attn, x_mid, h_mlp, pre_act, act });
        }
        let h_final = per_head_rmsnorm(&x, self.final_norm.data(), NORM_EPS)?;
        let logits = match &self.unembed {
            Some(u) => matmul(&h_final, u)?,
            None => matmul_nt(&h_final, &self.tok_emb)?,
        };
        if !logits.is_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok((
            logits,
            ModelCache { tokens: tokens.to_vec(), blocks: caches, x_final: x, h_final },
        ))
    }

    /// Logits for every position, plus per-layer traces when requested.
    pub fn forward(&self, tokens: &[usize], capture_traces: bool) -> Result<ForwardOutput> {
        let (logits, cache) = self.forward_cached(tokens)?;
        let traces = if capture_traces {
            cache
                .blocks
                .iter()
                .zip(&self.blocks)
                .map(|(c, b)| c.attn.trace(&b.attn))
                .collect()
        } else {
            Vec::new()
        };
        Ok(ForwardOutput { logits, traces })
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor2D> {
        Ok(self.forward_cached(tokens)?.0)
    }
}
