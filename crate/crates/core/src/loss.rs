//! Cross-entropy on softmax outputs.

use crate::error::{Error, Result};
use crate::nn::Prediction;

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

pub(crate) fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        return Err(Error::Validation(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// `−ln max(probs[label], 1e-12)`
pub fn loss_ce(pred: &Prediction, label: usize) -> Result<f64> {
    check_label(label, pred.num_classes())?;
    Ok(-pred.probs[label].max(PROB_FLOOR).ln())
}

/// Gradient of [`loss_ce`] with respect to the logits: `probs − onehot`.
/// Zero when the floor is active, matching the clamped loss.
pub fn loss_ce_grad(pred: &Prediction, label: usize) -> Result<Vec<f64>> {
    check_label(label, pred.num_classes())?;
    if pred.probs[label] < PROB_FLOOR {
        return Ok(vec![0.0; pred.num_classes()]);
    }
    let mut g = pred.probs.clone();
    g[label] -= 1.0;
    Ok(g)
}
