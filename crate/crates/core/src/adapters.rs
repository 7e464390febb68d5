//! Low-rank adapters: `ΔW = (alpha / rank) · B·A` with `B: in×r`, `A: r×out`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Tensor2D};

/// Standard deviation of the Gaussian used for the `A` factor at init.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    /// `in_dim × rank`, applied first.
    pub b: Tensor2D,
    /// `rank × out_dim`, applied second.
    pub a: Tensor2D,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn new(b: Tensor2D, a: Tensor2D, alpha: f64) -> Result<Self> {
        if b.cols() != a.rows() || b.cols() == 0 {
            return Err(Error::shape("LowRankAdapter::new", b.shape(), a.shape()));
        }
        Ok(LowRankAdapter { b, a, alpha })
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn in_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.a.cols()
    }

    /// `alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.in_dim() + self.out_dim())
    }

    /// Dense `(alpha / rank) · B·A`. Only sensible for small dims.
    pub fn delta(&self) -> Tensor2D {
        matmul(&self.b, &self.a)
            .expect("adapter factors are shape-checked at construction")
            .scale(self.scaling())
    }
}

/// LoRA-style init: `B = 0`, `A ~ N(0, 0.02²)` from a ChaCha8 stream seeded
/// by `seed`. The initial delta is exactly zero.
pub fn init_adapter(
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LowRankAdapter> {
    if rank == 0 || rank > in_dim.min(out_dim) {
        return Err(Error::Config(format!(
            "adapter rank {rank} must be in 1..={} for a {in_dim}×{out_dim} projection",
            in_dim.min(out_dim)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("valid std");
    let a: Vec<f64> = (0..rank * out_dim).map(|_| normal.sample(&mut rng)).collect();
    Ok(LowRankAdapter {
        b: Tensor2D::zeros(in_dim, rank),
        a: Tensor2D::from_vec(rank, out_dim, a)?,
        alpha,
    })
}

/// `(alpha / rank) · x·B·A`, evaluated as two rank-r products.
pub fn apply_delta(x: &Tensor2D, adapter: &LowRankAdapter) -> Result<Tensor2D> {
    if x.cols() != adapter.in_dim() {
        return Err(Error::shape("apply_delta", x.shape(), adapter.b.shape()));
    }
    let xb = matmul(x, &adapter.b)?;
    let mut out = matmul(&xb, &adapter.a)?;
    let s = adapter.scaling();
    out.data_mut().iter_mut().for_each(|v| *v *= s);
    Ok(out)
}

/// `w + (alpha / rank) · B·A`. A zero-initialized adapter returns `w`
/// bit-identical.
pub fn merged_weight(w: &Tensor2D, adapter: &LowRankAdapter) -> Result<Tensor2D> {
    if w.shape() != (adapter.in_dim(), adapter.out_dim()) {
        return Err(Error::shape(
            "merged_weight",
            w.shape(),
            (adapter.in_dim(), adapter.out_dim()),
        ));
    }
    if adapter.b.data().iter().all(|&v| v == 0.0) {
        return Ok(w.clone());
    }
    w.add(&adapter.delta())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    /// Adapters only build the denoiser projections `Q2`, `K2`.
    NegativeOnly,
    /// Additional adapters on the frozen `Q1`, `K1` projections.
    BothTerms,
}

/// Where DiffLoRA adapters go and at which rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPlacement {
    pub mode: PlacementMode,
    pub rank_negative: usize,
    #[serde(default)]
    pub rank_positive: usize,
}

impl AdapterPlacement {
    pub fn negative_only(rank: usize) -> Self {
        AdapterPlacement {
            mode: PlacementMode::NegativeOnly,
            rank_negative: rank,
            rank_positive: 0,
        }
    }

    /// Both terms at the same per-adapter rank. Pass `r / 2` to match a
    /// negative-only placement at rank `r`.
    pub fn both_terms(rank: usize) -> Self {
        AdapterPlacement {
            mode: PlacementMode::BothTerms,
            rank_negative: rank,
            rank_positive: rank,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank_negative == 0 {
            return Err(Error::Config("rank_negative must be positive".into()));
        }
        match self.mode {
            PlacementMode::NegativeOnly if self.rank_positive != 0 => Err(Error::Config(
                "negative_only placement must have rank_positive 0".into(),
            )),
            PlacementMode::BothTerms if self.rank_positive != self.rank_negative => {
                Err(Error::Config(format!(
                    "both_terms placement needs equal ranks, got positive {} and negative {}",
                    self.rank_positive, self.rank_negative
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Exact number of trainable scalars a DiffLoRA model carries.
///
/// Per layer: `rank·(in_dim + out_dim)` for each adapted Q/K projection of
/// each adapted term, plus one λ when learnable, plus `n_heads·head_dim`
/// group-norm gains when enabled.
#[allow(clippy::too_many_arguments)]
pub fn trainable_param_count(
    placement: AdapterPlacement,
    n_layers: usize,
    in_dim: usize,
    out_dim: usize,
    lambda_learnable: bool,
    group_norm: bool,
    head_dim: usize,
    n_heads: usize,
) -> usize {
    let per_adapter = |rank: usize| rank * (in_dim + out_dim);
    let mut per_layer = 2 * per_adapter(placement.rank_negative);
    if placement.mode == PlacementMode::BothTerms {
        per_layer += 2 * per_adapter(placement.rank_positive);
    }
    if lambda_learnable {
        per_layer += 1;
    }
    if group_norm {
        per_layer += n_heads * head_dim;
    }
    n_layers * per_layer
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor2D::from_vec(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
            .unwrap()
    }

    fn dense_oracle(x: &Tensor2D, ad: &LowRankAdapter) -> Tensor2D {
        // Scalar triple loop over the materialized product.
        let (n, din, r, dout) = (x.rows(), ad.in_dim(), ad.rank(), ad.out_dim());
        let mut out = Tensor2D::zeros(n, dout);
        for i in 0..n {
            for j in 0..dout {
                let mut s = 0.0;
                for p in 0..din {
                    for q in 0..r {
                        s += x.get(i, p) * ad.b.get(p, q) * ad.a.get(q, j);
                    }
                }
                out.set(i, j, s * ad.alpha / r as f64);
            }
        }
        out
    }

    #[test]
    fn init_shapes_and_zero_delta() {
        let ad = init_adapter(8, 8, 4, 8.0, 3).unwrap();
        assert_eq!(ad.b.shape(), (8, 4));
        assert_eq!(ad.a.shape(), (4, 8));
        assert!(ad.a.data().iter().any(|&v| v != 0.0));
        let x = random(5, 8, 1);
        assert_eq!(apply_delta(&x, &ad).unwrap(), Tensor2D::zeros(5, 8));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_adapter(16, 12, 3, 6.0, 42).unwrap();
        let b = init_adapter(16, 12, 3, 6.0, 42).unwrap();
        let c = init_adapter(16, 12, 3, 6.0, 43).unwrap();
        assert_eq!(a.a.data(), b.a.data());
        assert_ne!(a.a.data(), c.a.data());
    }

    #[test]
    fn init_rejects_oversized_rank() {
        assert!(matches!(init_adapter(4, 8, 5, 10.0, 0), Err(Error::Config(_))));
        assert!(matches!(init_adapter(4, 8, 0, 10.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn identity_factorization_returns_input() {
        let ad = LowRankAdapter::new(Tensor2D::identity(4), Tensor2D::identity(4), 4.0).unwrap();
        let x = random(3, 4, 9);
        assert!(apply_delta(&x, &ad).unwrap().max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn apply_delta_matches_dense_oracle() {
        let ad = LowRankAdapter::new(random(6, 2, 1), random(2, 5, 2), 4.0).unwrap();
        let x = random(3, 6, 3);
        let got = apply_delta(&x, &ad).unwrap();
        assert!(got.max_abs_diff(&dense_oracle(&x, &ad)) < 1e-12);
        assert!(apply_delta(&random(3, 5, 0), &ad).is_err());
    }

    #[test]
    fn merged_weight_cases() {
        let w = random(6, 5, 4);
        let fresh = init_adapter(6, 5, 2, 4.0, 5).unwrap();
        assert_eq!(merged_weight(&w, &fresh).unwrap(), w);

        let ad = LowRankAdapter::new(random(6, 2, 6), random(2, 5, 7), 3.0).unwrap();
        let merged = merged_weight(&w, &ad).unwrap();
        let oracle = w.add(&dense_oracle(&Tensor2D::identity(6), &ad)).unwrap();
        assert!(merged.max_abs_diff(&oracle) < 1e-12);

        // zero base: x·merged == apply_delta(x)
        let x = random(4, 6, 8);
        let via_merge = matmul(&x, &merged_weight(&Tensor2D::zeros(6, 5), &ad).unwrap()).unwrap();
        let direct = apply_delta(&x, &ad).unwrap();
        let scale = direct.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        assert!(via_merge.max_abs_diff(&direct) / scale < 1e-12);

        assert!(merged_weight(&random(5, 5, 0), &ad).is_err());
    }

    #[test]
    fn parameter_counts() {
        let neg = trainable_param_count(AdapterPlacement::negative_only(64), 3, 40, 24, false, false, 8, 3);
        let both = trainable_param_count(AdapterPlacement::both_terms(32), 3, 40, 24, false, false, 8, 3);
        assert_eq!(neg, both);
        assert_eq!(neg, 3 * 2 * 64 * (40 + 24));

        assert_eq!(trainable_param_count(AdapterPlacement::negative_only(8), 0, 32, 32, true, true, 8, 4), 0);
        assert_eq!(
            trainable_param_count(AdapterPlacement::both_terms(32), 1, 16, 16, true, false, 4, 4),
            4097
        );
    }

    #[test]
    fn parameter_count_by_enumeration() {
        // Build the adapters and count their entries directly.
        for (placement, n_adapters) in [
            (AdapterPlacement::negative_only(4), 2),
            (AdapterPlacement::both_terms(2), 4),
        ] {
            let mut total = 0;
            for layer in 0..2 {
                for k in 0..n_adapters {
                    let rank = if k < 2 { placement.rank_negative } else { placement.rank_positive };
                    let ad = init_adapter(8, 8, rank, 2.0 * rank as f64, layer * 10 + k as u64).unwrap();
                    total += ad.b.data().len() + ad.a.data().len();
                }
                total += 1 + 4 * 2; // λ + gains
            }
            assert_eq!(total, trainable_param_count(placement, 2, 8, 8, true, true, 2, 4));
        }
    }

    #[test]
    fn placement_validation() {
        assert!(AdapterPlacement::negative_only(8).validate().is_ok());
        assert!(AdapterPlacement::both_terms(4).validate().is_ok());
        let bad = AdapterPlacement { mode: PlacementMode::BothTerms, rank_negative: 4, rank_positive: 2 };
        assert!(bad.validate().is_err());
    }
}
