use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::model::{ParamRole, ToyModel};

use super::backward::{backward, GradientSet};
use super::loss::cross_entropy;

pub const DEFAULT_FD_EPS: f64 = 1e-5;
pub const DEFAULT_GRAD_TOL: f64 = 1e-4;
/// Floor on the denominator of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

fn loss_at(model: &ToyModel, tokens: &[usize], targets: &[usize], mask: &[bool]) -> Result<f64> {
    cross_entropy(&model.logits(tokens)?, targets, mask)
}

/// Central finite-difference gradient of the loss w.r.t. one trainable
/// parameter. Each coordinate is restored bit-exactly afterwards.
pub fn finite_diff_grad(
    model: &mut ToyModel,
    tokens: &[usize],
    targets: &[usize],
    mask: &[bool],
    name: &str,
    eps: f64,
) -> Result<Tensor2D> {
    let info = model
        .param_info(name)
        .filter(|i| i.role == ParamRole::Trainable)
        .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
    let (rows, cols) = info.shape;
    let mut out = Tensor2D::zeros(rows, cols);
    for idx in 0..rows * cols {
        let orig = model.with_param_mut(name, |d| d[idx])?;
        model.with_param_mut(name, |d| d[idx] = orig + eps)?;
        let plus = loss_at(model, tokens, targets, mask);
        model.with_param_mut(name, |d| d[idx] = orig - eps)?;
        let minus = loss_at(model, tokens, targets, mask);
        model.with_param_mut(name, |d| d[idx] = orig)?;
        out.data_mut()[idx] = (plus? - minus?) / (2.0 * eps);
    }
    Ok(out)
}

/// `|analytic - numeric| / max(|analytic|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    /// Worst error per parameter group, where a group is a parameter name
    /// with its layer index replaced by `*`.
    pub fn by_group(&self) -> Vec<(String, f64)> {
        let mut groups: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            let key = group_name(&e.name);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, w)) => *w = w.max(e.max_rel_error),
                None => groups.push((key, e.max_rel_error)),
            }
        }
        groups
    }
}

pub fn group_name(name: &str) -> String {
    name.split('.')
        .map(|p| if p.parse::<usize>().is_ok() { "*" } else { p })
        .collect::<Vec<_>>()
        .join(".")
}

/// Compares two gradient sets coordinate by coordinate.
pub fn compare_gradients(analytic: &GradientSet, numeric: &GradientSet) -> Result<Vec<GradCheckEntry>> {
    let mut entries = Vec::new();
    for (name, a) in analytic.iter() {
        let n = numeric
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if n.shape() != a.shape() {
            return Err(Error::shape("compare_gradients", a.shape(), n.shape()));
        }
        let mut entry = GradCheckEntry {
            name: name.to_string(),
            coords: a.data().len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (idx, (&ga, &gn)) in a.data().iter().zip(n.data()).enumerate() {
            let err = relative_error(ga, gn);
            if idx == 0 || err > entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = idx;
                entry.analytic = ga;
                entry.numeric = gn;
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Numeric gradients for every trainable parameter.
pub fn finite_diff_all(
    model: &mut ToyModel,
    tokens: &[usize],
    targets: &[usize],
    mask: &[bool],
    eps: f64,
) -> Result<GradientSet> {
    let mut set = GradientSet::default();
    for name in model.trainable_names() {
        let g = finite_diff_grad(model, tokens, targets, mask, &name, eps)?;
        set.insert(name, g);
    }
    Ok(set)
}

/// Analytic gradients checked against central differences.
///
/// `corrupt` optionally perturbs one analytic gradient before comparison;
/// it exists so callers can confirm the check is able to fail.
pub fn grad_check(
    model: &mut ToyModel,
    tokens: &[usize],
    targets: &[usize],
    mask: &[bool],
    eps: f64,
    tolerance: f64,
    corrupt: Option<(&str, f64)>,
) -> Result<GradCheckReport> {
    let (loss, mut analytic) = backward(model, tokens, targets, mask)?;
    if let Some((name, offset)) = corrupt {
        analytic.corrupt(name, offset)?;
    }
    let numeric = finite_diff_all(model, tokens, targets, mask, eps)?;
    Ok(GradCheckReport {
        loss,
        eps,
        tolerance,
        entries: compare_gradients(&analytic, &numeric)?,
    })
}
