//! Ground cost matrices on the label space and their validation.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Symmetric, non-negative, zero-diagonal ground metric over `K` classes,
/// together with its element-wise power `C^⊙p`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    k: usize,
    entries: Vec<f64>,
    p: f64,
    powered: Vec<f64>,
}

impl CostMatrix {
    /// Validates a square matrix and caches `C^⊙p`.
    pub fn new(raw: &[Vec<f64>], p: f64) -> Result<Self> {
        let k = raw.len();
        if let Some((i, row)) = raw.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(Error::Dimension(format!(
                "cost matrix row {i} has {} entries, expected {k}",
                row.len()
            )));
        }
        Self::from_flat(k, raw.concat(), p)
    }

    pub fn from_flat(k: usize, entries: Vec<f64>, p: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Validation("cost matrix is empty".into()));
        }
        if entries.len() != k * k {
            return Err(Error::Dimension(format!(
                "cost matrix of size {k} needs {} entries, got {}",
                k * k,
                entries.len()
            )));
        }
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Validation(format!("exponent p = {p} must be positive")));
        }
        for i in 0..k {
            for j in 0..k {
                let c = entries[i * k + j];
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::Validation(format!(
                        "cost entry ({i},{j}) = {c} must be finite and non-negative"
                    )));
                }
                if i == j && c != 0.0 {
                    return Err(Error::Validation(format!(
                        "cost entry ({i},{i}) = {c} must be zero on the diagonal"
                    )));
                }
                let t = entries[j * k + i];
                if j > i && c != t {
                    return Err(Error::Validation(format!(
                        "cost entry ({i},{j}) = {c} differs from ({j},{i}) = {t}"
                    )));
                }
            }
        }
        let powered = entries.iter().map(|&c| c.powf(p)).collect();
        Ok(Self {
            k,
            entries,
            p,
            powered,
        })
    }

    /// Same metric, different exponent.
    pub fn with_exponent(&self, p: f64) -> Result<Self> {
        Self::from_flat(self.k, self.entries.clone(), p)
    }

    /// Reads a `K×K` matrix from JSON (nested arrays) or CSV, chosen by the
    /// file extension.
    pub fn load(path: &Path, p: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_csv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let rows = if is_csv {
            parse_csv(&text)?
        } else {
            parse_json(&text)?
        };
        Self::new(&rows, p)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    #[inline]
    pub fn powered(&self, i: usize, j: usize) -> f64 {
        self.powered[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    /// Row `i` of `C^⊙p`.
    pub fn powered_row(&self, i: usize) -> &[f64] {
        &self.powered[i * self.k..(i + 1) * self.k]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn max_powered(&self) -> f64 {
        self.powered.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CostFile {
    Bare(Vec<Vec<f64>>),
    Wrapped { matrix: Vec<Vec<f64>> },
}

fn parse_json(text: &str) -> Result<Vec<Vec<f64>>> {
    Ok(match serde_json::from_str::<CostFile>(text)? {
        CostFile::Bare(m) | CostFile::Wrapped { matrix: m } => m,
    })
}

fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, line)| {
            line.split(',')
                .map(|field| {
                    field.trim().parse::<f64>().map_err(|e| {
                        Error::Validation(format!(
                            "cost csv line {}: {field:?} is not a number ({e})",
                            n + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}
