//! Head decomposition countermeasure.
//!
//! The classification head is stored as a chain of factor matrices whose
//! product reproduces it, so an attacker who targets "the head matrix" has to
//! work through several tensors instead of one. Factors come from repeated
//! Householder QR: `W = Q₁R₁`, `R₁ = Q₂R₂`, …, giving `[Q₁, Q₂, …, R_last]`.

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackOutcome};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::metrics::compute_cda;
use crate::trigger::Trigger;
use crate::trojan::InsertionConfig;
use crate::vit::{forward, ModelParams, HEAD_WEIGHT};

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedHead {
    pub factors: Vec<Tensor>,
    /// Max absolute deviation of the factor product from the original head.
    pub reconstruction_error: f64,
}

impl DecomposedHead {
    pub fn product(&self) -> Result<Tensor> {
        let mut acc = self.factors[0].clone();
        for f in &self.factors[1..] {
            acc = acc.matmul(f)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub factors: usize,
    /// Inner dimensions between consecutive factors; `None` keeps each one
    /// equal to the row count (exact, square orthogonal factors).
    pub inner_dims: Option<Vec<usize>>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            factors: 2,
            inner_dims: None,
        }
    }
}

impl DefenseConfig {
    pub fn inner_dims_for(&self, rows: usize) -> Vec<usize> {
        self.inner_dims
            .clone()
            .unwrap_or_else(|| vec![rows; self.factors.saturating_sub(1)])
    }
}

/// Householder QR of an `m × n` matrix: `Q` is `m × m` orthogonal, `R` is
/// `m × n` upper triangular.
pub fn householder_qr(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = a.dims2()?;
    let mut r = a.data().to_vec();
    let mut q = Tensor::identity(m).into_data();
    for j in 0..n.min(m.saturating_sub(1)) {
        let norm = (j..m).map(|i| r[i * n + j].powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[j * n + j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| r[i * n + j]).collect();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        if vv == 0.0 {
            continue;
        }
        // R ← (I − 2vvᵀ/vᵀv) R on rows j.., Q ← Q (I − 2vvᵀ/vᵀv) on cols j..
        for c in 0..n {
            let s: f64 = (j..m).map(|i| v[i - j] * r[i * n + c]).sum::<f64>() * 2.0 / vv;
            for i in j..m {
                r[i * n + c] -= s * v[i - j];
            }
        }
        for row in 0..m {
            let s: f64 = (j..m).map(|i| q[row * m + i] * v[i - j]).sum::<f64>() * 2.0 / vv;
            for i in j..m {
                q[row * m + i] -= s * v[i - j];
            }
        }
    }
    for i in 0..m {
        for c in 0..n.min(i) {
            r[i * n + c] = 0.0;
        }
    }
    Ok((Tensor::matrix(m, m, q)?, Tensor::matrix(m, n, r)?))
}

fn leading_cols(t: &Tensor, cols: usize) -> Result<Tensor> {
    let (m, n) = t.dims2()?;
    let data = (0..m).flat_map(|i| t.data()[i * n..i * n + cols].to_vec()).collect();
    Tensor::matrix(m, cols, data)
}

fn leading_rows(t: &Tensor, rows: usize) -> Result<Tensor> {
    let (_, n) = t.dims2()?;
    Tensor::matrix(rows, n, t.data()[..rows * n].to_vec())
}

/// Splits `head` (`d × c`) into `k_factors` matrices chained through
/// `inner_dims`. Each inner dimension must lie between `min(rows, c)` and the
/// row count of the matrix being split, which keeps the split exact.
pub fn decompose_head(head: &Tensor, k_factors: usize, inner_dims: &[usize]) -> Result<DecomposedHead> {
    let (_, c) = head.dims2()?;
    if k_factors == 0 {
        return Err(Error::Config("at least one factor is required".into()));
    }
    if inner_dims.len() != k_factors - 1 {
        return Err(Error::Config(format!(
            "{k_factors} factors need {} inner dimensions, got {}",
            k_factors - 1,
            inner_dims.len()
        )));
    }
    let mut factors = Vec::with_capacity(k_factors);
    let mut rest = head.clone();
    for &r in inner_dims {
        let rows = rest.dims2()?.0;
        if r < rows.min(c) || r > rows {
            return Err(Error::Config(format!(
                "inner dimension {r} outside {}..={rows}",
                rows.min(c)
            )));
        }
        let (q, full_r) = householder_qr(&rest)?;
        factors.push(leading_cols(&q, r)?);
        rest = leading_rows(&full_r, r)?;
    }
    factors.push(rest);
    let mut out = DecomposedHead {
        factors,
        reconstruction_error: 0.0,
    };
    let prod = out.product()?;
    out.reconstruction_error = prod
        .data()
        .iter()
        .zip(head.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(out)
}

/// `params` with its head replaced by the factors of `decomposed`.
pub fn factored_params(params: &ModelParams, decomposed: &DecomposedHead) -> Result<ModelParams> {
    params.with_head_factors(&decomposed.factors)
}

pub fn forward_with_decomposed(params: &ModelParams, decomposed: &DecomposedHead, image: &Tensor) -> Result<Tensor> {
    Ok(forward(&factored_params(params, decomposed)?, image, false)?.0)
}

/// Decomposes the head of `params` per `cfg`.
pub fn decompose_model_head(params: &ModelParams, cfg: &DefenseConfig) -> Result<DecomposedHead> {
    let head = params.get(HEAD_WEIGHT)?;
    decompose_head(head, cfg.factors, &cfg.inner_dims_for(head.dims2()?.0))
}

/// The same attack against the plain and the factored deployment.
#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    pub plain: AttackOutcome,
    pub defended: AttackOutcome,
    pub reconstruction_error: f64,
    /// Real-valued clean accuracy with the plain and the factored head.
    pub cda_plain: f64,
    pub cda_factored: f64,
}

/// Splits the head of `params` per `cfg` and attacks the factored deployment.
pub fn defended_attack(
    params: &ModelParams,
    trigger: &dyn Trigger,
    trigger_pixels: usize,
    batch: &[Tensor],
    eval: &Dataset,
    insertion: &InsertionConfig,
    cfg: &DefenseConfig,
) -> Result<(DecomposedHead, ModelParams, AttackOutcome)> {
    let decomposed = decompose_model_head(params, cfg)?;
    let factored = factored_params(params, &decomposed)?;
    let outcome = run_attack(&factored, trigger, trigger_pixels, batch, eval, insertion)?;
    Ok((decomposed, factored, outcome))
}

/// Runs the insertion twice with identical trigger, batch and budgets: once
/// on the plain model and once with its head split per `cfg`.
pub fn evaluate_defense(
    params: &ModelParams,
    trigger: &dyn Trigger,
    trigger_pixels: usize,
    batch: &[Tensor],
    eval: &Dataset,
    insertion: &InsertionConfig,
    cfg: &DefenseConfig,
) -> Result<DefenseOutcome> {
    let plain = run_attack(params, trigger, trigger_pixels, batch, eval, insertion)?;
    let (decomposed, factored, defended) =
        defended_attack(params, trigger, trigger_pixels, batch, eval, insertion, cfg)?;
    Ok(DefenseOutcome {
        plain,
        defended,
        reconstruction_error: decomposed.reconstruction_error,
        cda_plain: compute_cda(params, eval)?,
        cda_factored: compute_cda(&factored, eval)?,
    })
}
