//! Projected gradient ascent on the input (PGD), under ℓ∞ or ℓ2 budgets.
//!
//! The inner objective is either cross-entropy (plain PGD) or the
//! Wasserstein loss against a label metric (WPGD), which steers the
//! perturbation toward classes that are expensive to confuse with the true
//! one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledExample;
use crate::error::{Error, Result};
use crate::loss::{loss_ce, loss_ce_grad};
use crate::nn::MlpParams;
use crate::ot::{loss_w, loss_w_grad, CostMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ce,
    Wasserstein,
}

fn default_norm() -> Norm {
    Norm::Linf
}

fn default_objective() -> Objective {
    Objective::Ce
}

fn default_clamp() -> [f64; 2] {
    [0.0, 1.0]
}

fn default_lambda() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Radius of the perturbation ball, in input units.
    pub epsilon: f64,
    pub steps: usize,
    /// Ascent step; `None` resolves to `2.5 ε / steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_norm")]
    pub norm: Norm,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub random_start: bool,
    #[serde(default = "default_clamp")]
    pub clamp_range: [f64; 2],
    /// Entropic strength of the Wasserstein objective.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64, steps: usize, norm: Norm, objective: Objective) -> Self {
        Self {
            epsilon,
            steps,
            step_size: None,
            norm,
            objective,
            random_start: false,
            clamp_range: default_clamp(),
            lambda: default_lambda(),
            seed: 0,
        }
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    /// Copy with every default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            step_size: Some(self.step_size()),
            ..self.clone()
        }
    }

    /// `ε = 0` is accepted and turns the attack into the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!(
                "attack epsilon = {} must be finite and non-negative",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Validation("attack steps must be at least 1".into()));
        }
        let alpha = self.step_size();
        if !(alpha.is_finite() && (alpha > 0.0 || self.epsilon == 0.0)) || alpha < 0.0 {
            return Err(Error::Validation(format!(
                "attack step size = {alpha} must be positive"
            )));
        }
        let [lo, hi] = self.clamp_range;
        if !(lo < hi) {
            return Err(Error::Validation(format!(
                "clamp range [{lo}, {hi}] must satisfy lo < hi"
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Validation(format!(
                "attack lambda = {} must be positive",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub x_adv: Tensor,
    pub objective_value: f64,
    /// Objective at the clean input.
    pub initial_objective_value: f64,
}

fn linf_clip(cand: &[f64], center: &[f64], eps: f64, [lo, hi]: [f64; 2]) -> Vec<f64> {
    cand.iter()
        .zip(center)
        .map(|(&x, &c)| x.clamp((c - eps).max(lo), (c + eps).min(hi)))
        .collect()
}

fn l2_clip(cand: &[f64], center: &[f64], eps: f64, [lo, hi]: [f64; 2]) -> Vec<f64> {
    let norm = cand
        .iter()
        .zip(center)
        .map(|(x, c)| (x - c) * (x - c))
        .sum::<f64>()
        .sqrt();
    let scale = if norm > eps { eps / norm } else { 1.0 };
    cand.iter()
        .zip(center)
        .map(|(&x, &c)| (c + (x - c) * scale).clamp(lo, hi))
        .collect()
}

/// Component-wise clip into `[c − ε, c + ε] ∩ [lo, hi]`.
pub fn project_linf(x_cand: &Tensor, x_center: &Tensor, epsilon: f64, clamp_range: [f64; 2]) -> Result<Tensor> {
    x_cand.check_same_shape(x_center)?;
    Ok(x_cand.with_data(linf_clip(x_cand.data(), x_center.data(), epsilon, clamp_range)))
}

/// Rescales the offset onto the ℓ2 sphere when it is longer than `ε`, then
/// clamps to `[lo, hi]`. Clamping toward a center that lies inside the box
/// never lengthens the offset, so no second projection is needed.
pub fn project_l2(x_cand: &Tensor, x_center: &Tensor, epsilon: f64, clamp_range: [f64; 2]) -> Result<Tensor> {
    x_cand.check_same_shape(x_center)?;
    Ok(x_cand.with_data(l2_clip(x_cand.data(), x_center.data(), epsilon, clamp_range)))
}

/// Value of the attack objective at `x` and its gradient with respect to `x`.
pub fn objective_with_grad(
    params: &MlpParams,
    x: &[f64],
    label: usize,
    objective: Objective,
    cost: Option<&CostMatrix>,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let (pred, trace) = params.forward_slice(x)?;
    let (value, upstream) = match objective {
        Objective::Ce => (loss_ce(&pred, label)?, loss_ce_grad(&pred, label)?),
        Objective::Wasserstein => {
            let cost = require_cost(cost)?;
            (
                loss_w(&pred, label, cost, lambda)?,
                loss_w_grad(&pred, label, cost, lambda)?,
            )
        }
    };
    Ok((value, params.input_gradient(&trace, &upstream)?))
}

fn objective_value(
    params: &MlpParams,
    x: &[f64],
    label: usize,
    objective: Objective,
    cost: Option<&CostMatrix>,
    lambda: f64,
) -> Result<f64> {
    let pred = params.predict(x)?;
    match objective {
        Objective::Ce => loss_ce(&pred, label),
        Objective::Wasserstein => loss_w(&pred, label, require_cost(cost)?, lambda),
    }
}

fn require_cost(cost: Option<&CostMatrix>) -> Result<&CostMatrix> {
    cost.ok_or_else(|| Error::Validation("the wasserstein objective needs a cost matrix".into()))
}

/// Attack with the RNG stream of example 0. See [`pgd_attack_indexed`].
pub fn pgd_attack(
    params: &MlpParams,
    example: &LabeledExample,
    cfg: &AttackConfig,
    cost: Option<&CostMatrix>,
) -> Result<AdversarialExample> {
    pgd_attack_indexed(params, example, cfg, cost, 0)
}

/// PGD from `example.input`. The random start (if enabled) draws from the
/// stream `(cfg.seed, index)`, so results do not depend on which thread
/// handles which example.
pub fn pgd_attack_indexed(
    params: &MlpParams,
    example: &LabeledExample,
    cfg: &AttackConfig,
    cost: Option<&CostMatrix>,
    index: u64,
) -> Result<AdversarialExample> {
    cfg.validate()?;
    if cfg.objective == Objective::Wasserstein {
        require_cost(cost)?;
    }
    let clean = example.input.data();
    let [lo, hi] = cfg.clamp_range;
    if let Some(i) = clean.iter().position(|&v| v < lo || v > hi) {
        return Err(Error::Validation(format!(
            "input component {i} = {} lies outside the clamp range [{lo}, {hi}]",
            clean[i]
        )));
    }
    let eval = |x: &[f64]| objective_value(params, x, example.label, cfg.objective, cost, cfg.lambda);
    let initial = eval(clean)?;
    if cfg.epsilon == 0.0 {
        return Ok(AdversarialExample {
            x_adv: example.input.clone(),
            objective_value: initial,
            initial_objective_value: initial,
        });
    }

    let eps = cfg.epsilon;
    let project = |cand: &[f64]| match cfg.norm {
        Norm::Linf => linf_clip(cand, clean, eps, cfg.clamp_range),
        Norm::L2 => l2_clip(cand, clean, eps, cfg.clamp_range),
    };

    let mut x = clean.to_vec();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index);
        x = project(&random_start(&mut rng, clean, eps, cfg.norm));
    }

    let alpha = cfg.step_size();
    for _ in 0..cfg.steps {
        let (_, grad) =
            objective_with_grad(params, &x, example.label, cfg.objective, cost, cfg.lambda)?;
        let cand: Vec<f64> = match cfg.norm {
            Norm::Linf => x
                .iter()
                .zip(&grad)
                .map(|(&xi, &g)| xi + alpha * sign(g))
                .collect(),
            Norm::L2 => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    continue;
                }
                x.iter()
                    .zip(&grad)
                    .map(|(&xi, &g)| xi + alpha * g / norm)
                    .collect()
            }
        };
        x = project(&cand);
    }

    let value = eval(&x)?;
    Ok(AdversarialExample {
        x_adv: example.input.with_data(x),
        objective_value: value,
        initial_objective_value: initial,
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Uniform point in the ε-ball: per-component uniform for ℓ∞, Gaussian
/// direction with radius `ε·U^(1/d)` for ℓ2.
fn random_start(rng: &mut ChaCha8Rng, center: &[f64], eps: f64, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => center
            .iter()
            .map(|&c| c + rng.random_range(-eps..=eps))
            .collect(),
        Norm::L2 => {
            let dir: Vec<f64> = center.iter().map(|_| rng.sample(StandardNormal)).collect();
            let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if len == 0.0 {
                return center.to_vec();
            }
            let u: f64 = rng.random();
            let radius = eps * u.powf(1.0 / center.len() as f64);
            center
                .iter()
                .zip(&dir)
                .map(|(&c, &d)| c + radius * d / len)
                .collect()
        }
    }
}

/// Attacks every example of a slice in parallel; example `i` uses stream
/// `first_index + i`. Output order matches input order.
pub fn attack_batch(
    params: &MlpParams,
    examples: &[LabeledExample],
    cfg: &AttackConfig,
    cost: Option<&CostMatrix>,
    first_index: u64,
) -> Result<Vec<AdversarialExample>> {
    examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| pgd_attack_indexed(params, ex, cfg, cost, first_index + i as u64))
        .collect()
}

/// Distance of `x` from `center` in the given norm.
pub fn perturbation_norm(x: &[f64], center: &[f64], norm: Norm) -> f64 {
    let diffs = x.iter().zip(center).map(|(a, b)| (a - b).abs());
    match norm {
        Norm::Linf => diffs.fold(0.0, f64::max),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpSpec};

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn linf_projection_examples() {
        let c = t(&[0.5, 0.95, 0.2]);
        let inside = t(&[0.55, 0.9, 0.25]);
        assert_eq!(project_linf(&inside, &c, 0.1, [0.0, 1.0]).unwrap(), inside);
        let out = project_linf(&t(&[0.9, 1.2, 0.0]), &c, 0.1, [0.0, 1.0]).unwrap();
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(out.data()[1], 1.0);
        assert!((out.data()[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn l2_projection_examples() {
        let c = t(&[0.0, 0.0]);
        let r = [-10.0, 10.0];
        let inside = t(&[0.1, 0.2]);
        assert_eq!(project_l2(&inside, &c, 0.5, r).unwrap(), inside);
        let out = project_l2(&t(&[0.6, 0.8]), &c, 0.5, r).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-15);
        assert!((out.data()[1] - 0.4).abs() < 1e-15);
        assert_eq!(project_l2(&c, &c, 0.5, r).unwrap(), c);
    }

    #[test]
    fn projection_shape_mismatch() {
        assert!(project_linf(&t(&[0.0]), &t(&[0.0, 1.0]), 0.1, [0.0, 1.0]).is_err());
        assert!(project_l2(&t(&[0.0]), &t(&[0.0, 1.0]), 0.1, [0.0, 1.0]).is_err());
    }

    /// logits = (w·x, 0)
    fn one_d_model(w: f64) -> MlpParams {
        let spec = MlpSpec::new(vec![1, 2], Activation::Relu, 0).unwrap();
        MlpParams::from_flat(spec, &[w, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn one_d_linear_model_moves_against_the_margin() {
        let net = one_d_model(2.0);
        let ex = LabeledExample {
            input: t(&[0.6]),
            label: 0,
        };
        for (k, alpha, eps) in [(3, 0.02, 0.1), (10, 0.02, 0.1), (4, 0.05, 0.3)] {
            let mut cfg = AttackConfig::new(eps, k, Norm::Linf, Objective::Ce);
            cfg.step_size = Some(alpha);
            let adv = pgd_attack(&net, &ex, &cfg, None).unwrap();
            let expected = 0.6 - (k as f64 * alpha).min(eps);
            assert!((adv.x_adv.data()[0] - expected).abs() < 1e-12);
            assert!(adv.objective_value > adv.initial_objective_value);
        }
    }

    #[test]
    fn tiny_epsilon_keeps_clean_point() {
        let net = one_d_model(-1.0);
        let ex = LabeledExample {
            input: t(&[0.4]),
            label: 1,
        };
        let mut cfg = AttackConfig::new(1e-12, 20, Norm::L2, Objective::Ce);
        cfg.random_start = true;
        let adv = pgd_attack(&net, &ex, &cfg, None).unwrap();
        assert!((adv.x_adv.data()[0] - 0.4).abs() <= 1e-12);
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let net = one_d_model(1.0);
        let ex = LabeledExample {
            input: t(&[0.4]),
            label: 0,
        };
        let cfg = AttackConfig::new(0.0, 20, Norm::Linf, Objective::Ce);
        let adv = pgd_attack(&net, &ex, &cfg, None).unwrap();
        assert_eq!(adv.x_adv, ex.input);
    }

    #[test]
    fn wasserstein_needs_cost_and_range_checked() {
        let net = one_d_model(1.0);
        let ex = LabeledExample {
            input: t(&[0.4]),
            label: 0,
        };
        let cfg = AttackConfig::new(0.1, 2, Norm::Linf, Objective::Wasserstein);
        assert!(pgd_attack(&net, &ex, &cfg, None).is_err());
        let outside = LabeledExample {
            input: t(&[1.4]),
            label: 0,
        };
        let cfg = AttackConfig::new(0.1, 2, Norm::Linf, Objective::Ce);
        assert!(pgd_attack(&net, &outside, &cfg, None).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::new(0.1, 0, Norm::Linf, Objective::Ce);
        assert!(cfg.validate().is_err());
        cfg.steps = 3;
        assert!(cfg.validate().is_ok());
        assert!((cfg.step_size() - 2.5 * 0.1 / 3.0).abs() < 1e-15);
        cfg.clamp_range = [1.0, 1.0];
        assert!(cfg.validate().is_err());
        cfg.clamp_range = [0.0, 1.0];
        cfg.epsilon = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seeded_random_start_is_reproducible_and_stream_dependent() {
        let net = MlpSpec::new(vec![4, 6, 3], Activation::Tanh, 5)
            .unwrap()
            .init()
            .unwrap();
        let ex = LabeledExample {
            input: t(&[0.2, 0.4, 0.6, 0.8]),
            label: 2,
        };
        let mut cfg = AttackConfig::new(0.1, 5, Norm::L2, Objective::Ce);
        cfg.random_start = true;
        cfg.seed = 9;
        let a = pgd_attack_indexed(&net, &ex, &cfg, None, 3).unwrap();
        let b = pgd_attack_indexed(&net, &ex, &cfg, None, 3).unwrap();
        let c = pgd_attack_indexed(&net, &ex, &cfg, None, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.x_adv, c.x_adv);
    }
}
