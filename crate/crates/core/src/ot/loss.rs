//! Closed-form one-hot transport and the Wasserstein training loss.
//!
//! When the target distribution is one-hot at class `κ`, the only feasible
//! plan sends all of `q` into column `κ`, so the transport cost collapses to
//! the dot product `C^⊙p[κ] · q`. The loss adds a normalized entropic term:
//!
//! ```text
//! ℓ_W = C^⊙p[κ] · ŷ − (λ⁻¹ / ln K) · H(ŷ)
//! ```
//!
//! Both logarithms are natural, which makes the `1 / ln K` normalization
//! base-independent.

use super::{check_distribution, CostMatrix};
use crate::error::{Error, Result};
use crate::nn::Prediction;

fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(Error::Validation(format!(
            "class {class} out of range for {k} classes"
        )));
    }
    Ok(())
}

/// Transport cost from `q` to the one-hot distribution at `target_class`.
pub fn closed_form_w(q: &[f64], target_class: usize, cost: &CostMatrix) -> Result<f64> {
    let k = cost.size();
    check_distribution(q, k, "distribution")?;
    check_class(target_class, k)?;
    Ok(dot(cost.powered_row(target_class), q))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_loss_args(pred: &Prediction, label: usize, cost: &CostMatrix, lambda: f64) -> Result<f64> {
    let k = pred.num_classes();
    if k < 2 {
        return Err(Error::Validation(
            "the Wasserstein loss needs at least 2 classes".into(),
        ));
    }
    if cost.size() != k {
        return Err(Error::Dimension(format!(
            "cost matrix has {} classes, prediction has {k}",
            cost.size()
        )));
    }
    check_class(label, k)?;
    if !(lambda > 0.0) {
        return Err(Error::Validation(format!(
            "entropic lambda = {lambda} must be positive"
        )));
    }
    // coefficient of H(ŷ); λ = ∞ removes the entropic term
    Ok(1.0 / (lambda * (k as f64).ln()))
}

/// `C^⊙p[label] · probs − (λ⁻¹ / ln K) · H(probs)`
pub fn loss_w(pred: &Prediction, label: usize, cost: &CostMatrix, lambda: f64) -> Result<f64> {
    let coef = check_loss_args(pred, label, cost, lambda)?;
    let transport = dot(cost.powered_row(label), &pred.probs);
    if coef == 0.0 {
        return Ok(transport);
    }
    let log_p = pred.log_probs();
    let entropy: f64 = -pred
        .probs
        .iter()
        .zip(&log_p)
        .filter(|(&p, _)| p > 0.0)
        .map(|(p, lp)| p * lp)
        .sum::<f64>();
    Ok(transport - coef * entropy)
}

/// Gradient of [`loss_w`] with respect to the logits.
///
/// With `gⱼ = ∂ℓ/∂ŷⱼ = C^⊙p[label][j] + coef·(ln ŷⱼ + 1)`, the softmax
/// Jacobian gives `∂ℓ/∂zᵢ = ŷᵢ (gᵢ − Σⱼ ŷⱼ gⱼ)`; the constant `+1` cancels.
pub fn loss_w_grad(pred: &Prediction, label: usize, cost: &CostMatrix, lambda: f64) -> Result<Vec<f64>> {
    let coef = check_loss_args(pred, label, cost, lambda)?;
    let row = cost.powered_row(label);
    let g: Vec<f64> = if coef == 0.0 {
        row.to_vec()
    } else {
        row.iter()
            .zip(pred.log_probs())
            .map(|(&c, lp)| c + coef * lp)
            .collect()
    };
    let mean: f64 = pred.probs.iter().zip(&g).map(|(p, gi)| p * gi).sum();
    Ok(pred
        .probs
        .iter()
        .zip(&g)
        .map(|(p, gi)| if *p > 0.0 { p * (gi - mean) } else { 0.0 })
        .collect())
}
