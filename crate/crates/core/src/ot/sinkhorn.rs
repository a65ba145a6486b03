//! Entropy-regularized transport by Sinkhorn–Knopp scaling.

use serde::{Deserialize, Serialize};

use super::{check_distribution, CostMatrix, TransportPlan};
use crate::error::{Error, Result};

/// Above this value of `λ·max(C^⊙p)` the kernel `exp(−λ C^⊙p)` underflows and
/// the solver switches to log-domain potentials.
const LOG_DOMAIN_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Inverse regularization strength.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the ℓ1 marginal violation drops below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            max_iters: 10_000,
            tolerance: 1e-9,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || self.lambda.is_nan() {
            return Err(Error::Validation(format!(
                "sinkhorn lambda = {} must be positive",
                self.lambda
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::Validation("sinkhorn max_iters must be positive".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Validation("sinkhorn tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornResult {
    /// `plan.cost` is the transport term `⟨π, C^⊙p⟩` alone.
    pub plan: TransportPlan,
    /// `⟨π, C^⊙p⟩ − λ⁻¹ H(π)`
    pub regularized_cost: f64,
    pub iterations: usize,
    /// ℓ1 marginal violation of the returned plan.
    pub violation: f64,
    pub converged: bool,
    pub log_domain: bool,
}

/// Alternating row/column scaling on `exp(−λ C^⊙p)` restricted to the
/// supports of the two marginals. Non-convergence is reported through
/// [`SinkhornResult::converged`], not as an error.
pub fn sinkhorn(
    source: &[f64],
    target: &[f64],
    cost: &CostMatrix,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult> {
    cfg.validate()?;
    let k = cost.size();
    check_distribution(source, k, "source marginal")?;
    check_distribution(target, k, "target marginal")?;

    let rows: Vec<usize> = (0..k).filter(|&i| source[i] > 0.0).collect();
    let cols: Vec<usize> = (0..k).filter(|&j| target[j] > 0.0).collect();
    let a: Vec<f64> = rows.iter().map(|&i| source[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| target[j]).collect();
    let c: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost.powered(i, j)))
        .collect();

    let max_c = c.iter().copied().fold(0.0, f64::max);
    let log_domain = cfg.lambda * max_c > LOG_DOMAIN_THRESHOLD;
    let (sub_plan, iterations, converged) = if log_domain {
        solve_log(&a, &b, &c, cfg)
    } else {
        solve_scaling(&a, &b, &c, cfg)
    };

    let mut plan = vec![0.0; k * k];
    for (r, &i) in rows.iter().enumerate() {
        for (s, &j) in cols.iter().enumerate() {
            plan[i * k + j] = sub_plan[r * cols.len() + s];
        }
    }
    let transport: f64 = plan
        .iter()
        .enumerate()
        .map(|(idx, &p)| p * cost.powered(idx / k, idx % k))
        .sum();
    let regularized_cost = transport - super::entropy_unchecked(&plan) / cfg.lambda;
    let plan = TransportPlan {
        k,
        plan,
        cost: transport,
    };
    let violation = plan.marginal_violation(source, target);
    Ok(SinkhornResult {
        plan,
        regularized_cost,
        iterations,
        violation,
        converged,
        log_domain,
    })
}

fn l1_row_violation(plan: &[f64], a: &[f64], m: usize) -> f64 {
    plan.chunks(m)
        .zip(a)
        .map(|(row, &ai)| (row.iter().sum::<f64>() - ai).abs())
        .sum()
}

fn l1_col_violation(plan: &[f64], b: &[f64], m: usize) -> f64 {
    (0..m)
        .map(|s| (plan.iter().skip(s).step_by(m).sum::<f64>() - b[s]).abs())
        .sum()
}

fn solve_scaling(a: &[f64], b: &[f64], c: &[f64], cfg: &SinkhornConfig) -> (Vec<f64>, usize, bool) {
    let (n, m) = (a.len(), b.len());
    let kernel: Vec<f64> = c.iter().map(|&v| (-cfg.lambda * v).exp()).collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut plan = vec![0.0; n * m];
    for iter in 1..=cfg.max_iters {
        for r in 0..n {
            let kv: f64 = (0..m).map(|s| kernel[r * m + s] * v[s]).sum();
            u[r] = a[r] / kv;
        }
        for s in 0..m {
            let ku: f64 = (0..n).map(|r| kernel[r * m + s] * u[r]).sum();
            v[s] = b[s] / ku;
        }
        for r in 0..n {
            for s in 0..m {
                plan[r * m + s] = u[r] * kernel[r * m + s] * v[s];
            }
        }
        let violation = l1_row_violation(&plan, a, m).max(l1_col_violation(&plan, b, m));
        if violation < cfg.tolerance {
            return (plan, iter, true);
        }
    }
    (plan, cfg.max_iters, false)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Same fixed point as [`solve_scaling`] on dual potentials `f, g` with
/// `π = exp(λ (fᵢ + gⱼ − Cᵢⱼ))`.
fn solve_log(a: &[f64], b: &[f64], c: &[f64], cfg: &SinkhornConfig) -> (Vec<f64>, usize, bool) {
    let (n, m) = (a.len(), b.len());
    let lambda = cfg.lambda;
    let ln_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let ln_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut plan = vec![0.0; n * m];
    for iter in 1..=cfg.max_iters {
        for r in 0..n {
            let lse = log_sum_exp((0..m).map(|s| lambda * (g[s] - c[r * m + s])));
            f[r] = (ln_a[r] - lse) / lambda;
        }
        for s in 0..m {
            let lse = log_sum_exp((0..n).map(|r| lambda * (f[r] - c[r * m + s])));
            g[s] = (ln_b[s] - lse) / lambda;
        }
        for r in 0..n {
            for s in 0..m {
                plan[r * m + s] = (lambda * (f[r] + g[s] - c[r * m + s])).exp();
            }
        }
        let violation = l1_row_violation(&plan, a, m).max(l1_col_violation(&plan, b, m));
        if violation < cfg.tolerance {
            return (plan, iter, true);
        }
    }
    (plan, cfg.max_iters, false)
}
