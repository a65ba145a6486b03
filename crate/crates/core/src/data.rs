//! Datasets: synthetic 2-D Gaussian mixtures and MNIST in IDX format.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_CLASSES: usize = 10;

/// Synthetic samples further than this many σ from their center (per
/// coordinate) are redrawn, which keeps every point inside the declared
/// bounding box.
const TRUNCATION_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: Tensor,
    pub label: usize,
}

impl LabeledExample {
    pub fn one_hot(&self, num_classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; num_classes];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub provenance: Provenance,
}

impl Dataset {
    /// Checks that every example has the declared dimension and a label in
    /// range.
    pub fn new(
        examples: Vec<LabeledExample>,
        num_classes: usize,
        input_dim: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.input.len() != input_dim {
                return Err(Error::Dimension(format!(
                    "example {i} has {} inputs, dataset declares {input_dim}",
                    ex.input.len()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::Validation(format!(
                    "example {i} has label {} but there are {num_classes} classes",
                    ex.label
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            input_dim,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            counts[ex.label] += 1;
        }
        counts
    }

    /// First `n` examples (or all of them).
    pub fn truncated(mut self, n: usize) -> Self {
        self.examples.truncate(n);
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            ..*self
        }
    }

    /// `x1,...,xd,label` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for d in 1..=self.input_dim {
            let _ = write!(out, "x{d},");
        }
        out.push_str("label\n");
        for ex in &self.examples {
            for v in ex.input.data() {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{}", ex.label);
        }
        out
    }
}

/// Isotropic Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataSpec {
    pub centers: Vec<[f64; 2]>,
    pub sigma: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticDataSpec {
    /// Three classes at the vertices of a unit equilateral triangle.
    fn default() -> Self {
        Self {
            centers: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]],
            sigma: 0.15,
            samples_per_class: 500,
            seed: 0,
        }
    }
}

impl SyntheticDataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 2 {
            return Err(Error::Validation("synthetic data needs at least 2 classes".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Validation(format!("sigma = {} must be positive", self.sigma)));
        }
        if self.centers.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Validation("class centers must be finite".into()));
        }
        Ok(())
    }

    /// `[x_min, y_min, x_max, y_max]` containing every generated sample.
    pub fn bbox(&self) -> [f64; 4] {
        let pad = TRUNCATION_SIGMAS * self.sigma;
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for c in &self.centers {
            b[0] = b[0].min(c[0] - pad);
            b[1] = b[1].min(c[1] - pad);
            b[2] = b[2].max(c[0] + pad);
            b[3] = b[3].max(c[1] + pad);
        }
        b
    }
}

/// Draws `samples_per_class` points per center, class by class.
pub fn gen_synthetic(spec: &SyntheticDataSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::with_capacity(spec.centers.len() * spec.samples_per_class);
    for (label, center) in spec.centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|&c| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    if z.abs() <= TRUNCATION_SIGMAS {
                        break c + spec.sigma * z;
                    }
                })
                .collect();
            examples.push(LabeledExample {
                input: Tensor::vector(point)?,
                label,
            });
        }
    }
    Dataset::new(examples, spec.centers.len(), 2, Provenance::Synthetic)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Validates an IDX header and returns the dimension sizes and the offset
/// of the payload.
fn parse_idx_header(bytes: &[u8], path: &Path, magic: u32) -> Result<(Vec<usize>, usize)> {
    let word = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| parse_error(path, bytes.len(), "file truncated inside the header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(parse_error(
            path,
            0,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|d| word(4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let payload: usize = dims.iter().product();
    if bytes.len() < header + payload {
        return Err(parse_error(
            path,
            bytes.len(),
            format!(
                "file truncated: header promises {payload} data bytes, found {}",
                bytes.len() - header
            ),
        ));
    }
    Ok((dims, header))
}

/// Reads MNIST images and labels (IDX format), scaling pixels to `[0, 1]`.
/// `limit` keeps only the first `n` examples.
pub fn load_mnist(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    let (idims, ioff) = parse_idx_header(&images, images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, loff) = parse_idx_header(&labels, labels_path, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(parse_error(
            labels_path,
            4,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let pixels = idims[1] * idims[2];
    if pixels == 0 {
        return Err(parse_error(images_path, 8, "images have zero size"));
    }
    let n = limit.map_or(idims[0], |l| l.min(idims[0]));
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = labels[loff + i] as usize;
        if label >= MNIST_CLASSES {
            return Err(parse_error(
                labels_path,
                loff + i,
                format!("label {label} outside 0..{MNIST_CLASSES}"),
            ));
        }
        let start = ioff + i * pixels;
        let data = images[start..start + pixels]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        examples.push(LabeledExample {
            input: Tensor::new(vec![pixels], data)?,
            label,
        });
    }
    Dataset::new(examples, MNIST_CLASSES, pixels, Provenance::Mnist)
}
