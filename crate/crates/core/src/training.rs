//! Outer training loop: plain cross-entropy, PGD adversarial training and
//! WPGD (inner maximization of the Wasserstein loss, outer minimization of
//! cross-entropy at the resulting adversarial point).

use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackConfig, Objective};
use crate::data::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::loss::{loss_ce, loss_ce_grad};
use crate::nn::{Gradients, MlpParams, MlpSpec};
use crate::ot::CostMatrix;

/// Per-example gradients are summed sequentially inside chunks of this many
/// examples and the chunk sums are then added in order, so the result does
/// not depend on the number of worker threads.
const REDUCTION_CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Ce,
    Pgd,
    Wpgd,
}

fn default_epochs() -> usize {
    200
}
fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_lr_drop_at() -> f64 {
    0.75
}
fn default_lr_drop_factor() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Nesterov momentum coefficient.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub mode: TrainMode,
    /// Inner attack for `pgd` / `wpgd`. Its objective is forced by the mode.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    /// Fraction of the epochs after which the learning rate is multiplied by
    /// `lr_drop_factor` (once).
    #[serde(default = "default_lr_drop_at")]
    pub lr_drop_at: f64,
    #[serde(default = "default_lr_drop_factor")]
    pub lr_drop_factor: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            mode,
            attack: None,
            lr_drop_at: default_lr_drop_at(),
            lr_drop_factor: default_lr_drop_factor(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation(format!(
                "learning_rate = {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum = {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Validation("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Validation("invalid learning-rate drop settings".into()));
        }
        match (self.mode, &self.attack) {
            (TrainMode::Ce, _) => {}
            (_, None) => {
                return Err(Error::Validation(format!(
                    "mode {:?} needs an attack configuration",
                    self.mode
                )))
            }
            (_, Some(a)) => a.validate()?,
        }
        Ok(())
    }

    /// The inner attack with its objective set by the mode.
    pub fn effective_attack(&self) -> Option<AttackConfig> {
        let objective = match self.mode {
            TrainMode::Ce => return None,
            TrainMode::Pgd => Objective::Ce,
            TrainMode::Wpgd => Objective::Wasserstein,
        };
        self.attack.as_ref().map(|a| AttackConfig {
            objective,
            ..a.resolved()
        })
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drop_epoch = (self.lr_drop_at * self.epochs as f64).floor() as usize;
        if epoch >= drop_epoch && self.lr_drop_at < 1.0 {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

/// SGD with Nesterov momentum and L2 weight decay:
///
/// ```text
/// g ← ∇ + wd·θ
/// v ← μ v − lr g
/// θ ← θ + μ v − lr g
/// ```
///
/// Decay applies to biases as well as weights.
#[derive(Debug, Clone)]
pub struct NesterovSgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl NesterovSgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &Gradients, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((theta, g), v) in params
            .values_mut()
            .zip(grads.values())
            .zip(self.velocity.iter_mut())
        {
            let g = g + wd * *theta;
            *v = mu * *v - lr * g;
            *theta += mu * *v - lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean outer cross-entropy over the examples fed to the optimizer.
    pub train_loss: f64,
    /// Percent of clean training examples misclassified after the epoch.
    pub natural_error: f64,
    /// Percent of adversarial training inputs misclassified when they were
    /// generated (pgd / wpgd only).
    pub adversarial_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochStats>,
    /// Not serialized, so that reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

fn check_compat(spec: &MlpSpec, data: &Dataset, cost: Option<&CostMatrix>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("training data is empty".into()));
    }
    if data.num_classes != spec.num_classes() {
        return Err(Error::Validation(format!(
            "dataset has {} classes, model outputs {}",
            data.num_classes,
            spec.num_classes()
        )));
    }
    if data.input_dim != spec.input_dim() {
        return Err(Error::Validation(format!(
            "dataset inputs have {} dimensions, model expects {}",
            data.input_dim,
            spec.input_dim()
        )));
    }
    if let Some(c) = cost {
        if c.size() != data.num_classes {
            return Err(Error::Validation(format!(
                "cost matrix covers {} classes, dataset has {}",
                c.size(),
                data.num_classes
            )));
        }
    }
    Ok(())
}

/// Percent of examples whose clean prediction is wrong.
pub fn natural_error(params: &MlpParams, data: &Dataset) -> Result<f64> {
    let wrong = data
        .examples
        .par_iter()
        .map(|ex| Ok(usize::from(params.predict(ex.input.data())?.predicted_class != ex.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * wrong as f64 / data.len().max(1) as f64)
}

struct ChunkResult {
    grads: Gradients,
    loss: f64,
    wrong: usize,
}

fn batch_gradient(params: &MlpParams, inputs: &[(&[f64], usize)]) -> Result<ChunkResult> {
    let chunks = inputs
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut acc = ChunkResult {
                grads: Gradients::zeros_like(params),
                loss: 0.0,
                wrong: 0,
            };
            for &(x, label) in chunk {
                let (pred, trace) = params.forward_slice(x)?;
                acc.loss += loss_ce(&pred, label)?;
                acc.wrong += usize::from(pred.predicted_class != label);
                let upstream = loss_ce_grad(&pred, label)?;
                params.accumulate_backprop(&trace, &upstream, &mut acc.grads)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ChunkResult {
        grads: Gradients::zeros_like(params),
        loss: 0.0,
        wrong: 0,
    };
    for c in chunks {
        total.grads.add_assign(&c.grads);
        total.loss += c.loss;
        total.wrong += c.wrong;
    }
    Ok(total)
}

/// Trains a fresh network initialized from `spec`.
///
/// In `pgd` and `wpgd` modes every batch is replaced by adversarial examples
/// before the cross-entropy step. `cost` is required for `wpgd`.
pub fn train(
    spec: &MlpSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    cost: Option<&CostMatrix>,
) -> Result<(MlpParams, TrainReport)> {
    let params = spec.init()?;
    train_from(params, data, cfg, cost)
}

/// Continues training from existing parameters.
pub fn train_from(
    mut params: MlpParams,
    data: &Dataset,
    cfg: &TrainConfig,
    cost: Option<&CostMatrix>,
) -> Result<(MlpParams, TrainReport)> {
    let started = Instant::now();
    cfg.validate()?;
    check_compat(params.spec(), data, cost)?;
    if cfg.mode == TrainMode::Wpgd && cost.is_none() {
        return Err(Error::Validation("wpgd training needs a cost matrix".into()));
    }
    let attack = cfg.effective_attack();

    let n = data.len();
    let mut optimizer = NesterovSgd::new(params.spec().num_params(), cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut adv_wrong = 0usize;
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<LabeledExample> =
                batch_idx.iter().map(|&i| data.examples[i].clone()).collect();
            let adv_inputs = match &attack {
                Some(a) => {
                    let first = (epoch * n + b * cfg.batch_size) as u64;
                    Some(attack_batch(&params, &batch, a, cost, first)?)
                }
                None => None,
            };
            let inputs: Vec<(&[f64], usize)> = match &adv_inputs {
                Some(adv) => adv
                    .iter()
                    .zip(&batch)
                    .map(|(a, ex)| (a.x_adv.data(), ex.label))
                    .collect(),
                None => batch.iter().map(|ex| (ex.input.data(), ex.label)).collect(),
            };
            let mut result = batch_gradient(&params, &inputs)?;
            if !result.loss.is_finite() || result.grads.values().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {b}"
                )));
            }
            loss_sum += result.loss;
            adv_wrong += result.wrong;
            result.grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut params, &result.grads, lr);
        }

        epochs.push(EpochStats {
            epoch,
            learning_rate: lr,
            train_loss: loss_sum / n as f64,
            natural_error: natural_error(&params, data)?,
            adversarial_error: attack.as_ref().map(|_| 100.0 * adv_wrong as f64 / n as f64),
        });
    }

    Ok((
        params,
        TrainReport {
            mode: cfg.mode,
            epochs,
            wall_time: started.elapsed(),
        },
    ))
}

/// Subsamples `class` uniformly so that its count becomes
/// `floor(ratio · largest other class count)` (never more than it already
/// has). Kept examples stay in their original order.
pub fn unbalance(data: &Dataset, class: usize, ratio: f64, seed: u64) -> Result<Dataset> {
    if class >= data.num_classes {
        return Err(Error::Validation(format!(
            "class {class} out of range for {} classes",
            data.num_classes
        )));
    }
    let counts = data.class_counts();
    let majority = counts
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != class)
        .map(|(_, &n)| n)
        .max()
        .unwrap_or(0);
    let target = (ratio * majority as f64).floor() as usize;
    let mut targets = counts.clone();
    targets[class] = target.min(counts[class]);
    subsample_classes(data, &targets, ratio, seed)
}

/// Per-class variant: class `c` keeps `floor(ratios[c] · n_c)` examples.
pub fn unbalance_per_class(data: &Dataset, ratios: &[f64], seed: u64) -> Result<Dataset> {
    if ratios.len() != data.num_classes {
        return Err(Error::Validation(format!(
            "{} ratios for {} classes",
            ratios.len(),
            data.num_classes
        )));
    }
    let counts = data.class_counts();
    for &r in ratios {
        check_ratio(r)?;
    }
    let targets: Vec<usize> = counts
        .iter()
        .zip(ratios)
        .map(|(&n, &r)| (r * n as f64).floor() as usize)
        .collect();
    subsample_classes(data, &targets, 1.0, seed)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Validation(format!("ratio = {ratio} must lie in (0, 1]")));
    }
    Ok(())
}

fn subsample_classes(data: &Dataset, targets: &[usize], ratio: f64, seed: u64) -> Result<Dataset> {
    check_ratio(ratio)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(data.len());
    for (class, &target) in targets.iter().enumerate() {
        let members: Vec<usize> = (0..data.len())
            .filter(|&i| data.examples[i].label == class)
            .collect();
        if !members.is_empty() && target == 0 {
            return Err(Error::Validation(format!(
                "class {class} would be empty after subsampling"
            )));
        }
        if target >= members.len() {
            keep.extend(members);
        } else {
            keep.extend(
                index::sample(&mut rng, members.len(), target)
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    keep.sort_unstable();
    Ok(data.subset(&keep))
}
