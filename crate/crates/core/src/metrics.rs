//! Evaluation: confusion matrices, accuracy gap and its correlation with the
//! label metric, cost-weighted robustness score, prediction entropy and
//! decision-boundary rasters.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd_attack_indexed, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::MlpParams;
use crate::ot::{entropy_unchecked, CostMatrix};

pub const ENTROPY_BINS: usize = 30;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    /// Row-major counts.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_pairs(num_classes: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut m = Self::new(num_classes);
        for (truth, pred) in pairs {
            m.record(truth, pred);
        }
        m
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.get(i, i)).sum()
    }

    pub fn row_totals(&self) -> Vec<u64> {
        self.counts
            .chunks(self.num_classes)
            .map(|r| r.iter().sum())
            .collect()
    }

    /// `100 · (1 − trace / total)`: natural error without an attack,
    /// adversarial error with one.
    pub fn error_percent(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        100.0 * (total - self.trace()) as f64 / total as f64
    }

    /// Row-normalized form, row-major. Empty rows stay zero.
    pub fn normalized(&self) -> Vec<f64> {
        let k = self.num_classes;
        let mut out = vec![0.0; k * k];
        for (i, row) in self.counts.chunks(k).enumerate() {
            let total: u64 = row.iter().sum();
            if total > 0 {
                for (j, &c) in row.iter().enumerate() {
                    out[i * k + j] = c as f64 / total as f64;
                }
            }
        }
        out
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.num_classes).map(<[u64]>::to_vec).collect()
    }

    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        self.normalized()
            .chunks(self.num_classes)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(self.num_classes, &self.counts)
    }
}

pub(crate) fn matrix_csv<T: std::fmt::Display>(k: usize, values: &[T]) -> String {
    let mut out = String::new();
    for row in values.chunks(k) {
        let line: Vec<String> = row.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

fn check_model_data(params: &MlpParams, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation("evaluation data is empty".into()));
    }
    if params.num_classes() != data.num_classes || params.input_dim() != data.input_dim {
        return Err(Error::Validation(format!(
            "model ({} inputs, {} classes) does not match data ({} inputs, {} classes)",
            params.input_dim(),
            params.num_classes(),
            data.input_dim,
            data.num_classes
        )));
    }
    Ok(())
}

/// Confusion of `params` on `data`, on clean inputs or, with `attack`, on the
/// adversarial inputs it produces (example `i` uses RNG stream `i`).
pub fn confusion(
    params: &MlpParams,
    data: &Dataset,
    attack: Option<(&AttackConfig, Option<&CostMatrix>)>,
) -> Result<ConfusionMatrix> {
    check_model_data(params, data)?;
    let predictions = data
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let pred = match attack {
                None => params.predict(ex.input.data())?,
                Some((cfg, cost)) => {
                    let adv = pgd_attack_indexed(params, ex, cfg, cost, i as u64)?;
                    params.predict(adv.x_adv.data())?
                }
            };
            Ok((ex.label, pred.predicted_class))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConfusionMatrix::from_pairs(data.num_classes, predictions))
}

/// Element-wise `|A − B|` of two row-normalized confusion matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGap {
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl AccuracyGap {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.num_classes + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.num_classes).map(<[f64]>::to_vec).collect()
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(self.num_classes, &self.values)
    }
}

pub fn accuracy_gap(robust: &ConfusionMatrix, standard: &ConfusionMatrix) -> Result<AccuracyGap> {
    if robust.num_classes != standard.num_classes {
        return Err(Error::Dimension(format!(
            "confusion matrices have {} and {} classes",
            robust.num_classes, standard.num_classes
        )));
    }
    let values = robust
        .normalized()
        .iter()
        .zip(standard.normalized())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Ok(AccuracyGap {
        num_classes: robust.num_classes,
        values,
    })
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    // Rounding leaves a residue when all values are equal.
    let negligible = |s: f64, v: &[f64]| {
        let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        s <= n * (1e-12 * scale).powi(2)
    };
    if negligible(sxx, xs) || negligible(syy, ys) {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between the off-diagonal entries of the gap and of
/// the cost matrix. Diagonals are skipped: the metric is zero there.
pub fn gap_metric_correlation(gap: &AccuracyGap, cost: &CostMatrix) -> Result<Option<f64>> {
    let k = gap.num_classes;
    if cost.size() != k {
        return Err(Error::Dimension(format!(
            "gap has {k} classes, cost matrix {}",
            cost.size()
        )));
    }
    let (mut g, mut c) = (Vec::new(), Vec::new());
    for i in 0..k {
        for j in (0..k).filter(|&j| j != i) {
            g.push(gap.get(i, j));
            c.push(cost.get(i, j));
        }
    }
    Ok(pearson(&g, &c))
}

/// `S = Σᵢⱼ Cᵢⱼ Mᵢⱼ` on the row-normalized adversarial confusion.
pub fn robustness_score(adversarial: &ConfusionMatrix, cost: &CostMatrix) -> Result<f64> {
    robustness_score_normalized(&adversarial.normalized(), cost)
}

/// Same as [`robustness_score`] for an already-normalized row-major matrix.
pub fn robustness_score_normalized(m: &[f64], cost: &CostMatrix) -> Result<f64> {
    if m.len() != cost.size() * cost.size() {
        return Err(Error::Dimension(format!(
            "matrix has {} entries, cost matrix is {}x{}",
            m.len(),
            cost.size(),
            cost.size()
        )));
    }
    Ok(m.iter().zip(cost.entries()).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    /// Counts over `ENTROPY_BINS` equal bins spanning `[0, ln K]`.
    pub histogram: Vec<u64>,
    pub max_entropy: f64,
    pub mean: f64,
    pub median: f64,
}

/// Entropy of the softmax output for every example, in data order.
pub fn prediction_entropies(params: &MlpParams, data: &Dataset) -> Result<Vec<f64>> {
    check_model_data(params, data)?;
    data.examples
        .par_iter()
        .map(|ex| Ok(entropy_unchecked(&params.predict(ex.input.data())?.probs)))
        .collect()
}

pub fn entropy_stats(params: &MlpParams, data: &Dataset) -> Result<EntropyStats> {
    let values = prediction_entropies(params, data)?;
    Ok(summarize_entropies(&values, data.num_classes))
}

pub fn summarize_entropies(values: &[f64], num_classes: usize) -> EntropyStats {
    let max_entropy = (num_classes as f64).ln();
    let mut histogram = vec![0u64; ENTROPY_BINS];
    for &h in values {
        let bin = if max_entropy > 0.0 {
            ((h / max_entropy) * ENTROPY_BINS as f64).floor() as usize
        } else {
            0
        };
        histogram[bin.min(ENTROPY_BINS - 1)] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    EntropyStats {
        histogram,
        max_entropy,
        mean,
        median,
    }
}

/// Predicted class on a `resolution × resolution` lattice of cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryGrid {
    /// `[x_min, y_min, x_max, y_max]`
    pub bbox: [f64; 4],
    pub resolution: usize,
    /// Row-major with `y` as the row index.
    pub classes: Vec<usize>,
}

impl BoundaryGrid {
    pub fn point(&self, ix: usize, iy: usize) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        let r = self.resolution as f64;
        (
            x0 + (ix as f64 + 0.5) * (x1 - x0) / r,
            y0 + (iy as f64 + 0.5) * (y1 - y0) / r,
        )
    }

    pub fn class_at(&self, ix: usize, iy: usize) -> usize {
        self.classes[iy * self.resolution + ix]
    }

    /// Number of 4-neighbour pairs with different classes; a proxy for the
    /// total boundary length.
    pub fn boundary_changes(&self) -> usize {
        let r = self.resolution;
        let mut changes = 0;
        for iy in 0..r {
            for ix in 0..r {
                let c = self.class_at(ix, iy);
                if ix + 1 < r && self.class_at(ix + 1, iy) != c {
                    changes += 1;
                }
                if iy + 1 < r && self.class_at(ix, iy + 1) != c {
                    changes += 1;
                }
            }
        }
        changes
    }

    /// `x,y,class` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,class\n");
        for iy in 0..self.resolution {
            for ix in 0..self.resolution {
                let (x, y) = self.point(ix, iy);
                let _ = writeln!(out, "{x},{y},{}", self.class_at(ix, iy));
            }
        }
        out
    }
}

pub fn boundary_grid(params: &MlpParams, bbox: [f64; 4], resolution: usize) -> Result<BoundaryGrid> {
    if params.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "boundary rasters need a 2-D input model, this one takes {} inputs",
            params.input_dim()
        )));
    }
    if resolution == 0 || !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
        return Err(Error::Validation(format!(
            "invalid raster: bbox {bbox:?}, resolution {resolution}"
        )));
    }
    let mut grid = BoundaryGrid {
        bbox,
        resolution,
        classes: Vec::new(),
    };
    grid.classes = (0..resolution * resolution)
        .into_par_iter()
        .map(|idx| {
            let (x, y) = grid.point(idx % resolution, idx / resolution);
            Ok(params.predict(&[x, y])?.predicted_class)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(grid)
}
