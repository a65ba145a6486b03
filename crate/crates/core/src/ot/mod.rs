//! Optimal transport on the label space.
//!
//! Classes are the support points, a [`CostMatrix`] supplies the ground
//! metric. Three routes to a transport cost are provided: an exact min-cost
//! flow solver, entropic Sinkhorn scaling, and the closed form that applies
//! when one of the two distributions is one-hot. The Wasserstein training
//! loss in [`loss`] builds on the closed form.

mod cost;
mod exact;
pub mod loss;
mod sinkhorn;

pub use cost::CostMatrix;
pub use exact::{exact_ot, TransportPlan};
pub use loss::{closed_form_w, loss_w, loss_w_grad};
pub use sinkhorn::{sinkhorn, SinkhornConfig, SinkhornResult};

use crate::error::{Error, Result};

/// Marginal sums may differ from one by at most this much.
pub const MASS_TOLERANCE: f64 = 1e-9;

pub(crate) fn check_distribution(q: &[f64], k: usize, what: &str) -> Result<()> {
    if q.len() != k {
        return Err(Error::Dimension(format!(
            "{what} has {} entries, expected {k}",
            q.len()
        )));
    }
    if let Some(i) = q.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(format!(
            "{what}[{i}] = {} is not a valid probability",
            q[i]
        )));
    }
    let total: f64 = q.iter().sum();
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Validation(format!(
            "{what} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Shannon entropy `−Σ qᵢ ln qᵢ` with `0 ln 0 = 0`.
pub fn entropy(q: &[f64]) -> Result<f64> {
    check_distribution(q, q.len(), "distribution")?;
    Ok(entropy_unchecked(q))
}

pub fn entropy_unchecked(q: &[f64]) -> f64 {
    -q.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}
