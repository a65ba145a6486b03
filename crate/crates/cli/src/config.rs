//! Experiment configuration.
//!
//! A config file is a JSON tree. Before it is typed it can be edited with
//! `--set path=value` overrides and the `--eps-255` rescaling, and every seed
//! the file leaves out is derived from the global `seed`. Resolution then
//! materializes all defaults, makes paths absolute, inlines the cost matrix
//! and checks that the sections agree with each other. The resolved config
//! serializes to a snapshot that reproduces the run on its own; its hash
//! (computed without `output_dir`) names the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use wpgd_core::attacks::{AttackConfig, Objective};
use wpgd_core::data::SyntheticDataSpec;
use wpgd_core::training::{TrainConfig, TrainMode};
use wpgd_core::{CostMatrix, MlpSpec};

use crate::error::{CliError, Result};

/// Stamped into every output file next to the config hash.
pub const ARTIFACT_VERSION: &str = concat!("wpgd ", env!("CARGO_PKG_VERSION"));

const MNIST_INPUT_DIM: usize = 28 * 28;
const MNIST_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: MlpSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub cost_matrix: Option<CostMatrixConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    Synthetic(SyntheticConfig),
    Mnist(MnistConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    #[serde(default = "default_centers")]
    pub centers: Vec<[f64; 2]>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_samples_per_class")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    /// Size of the held-out set drawn from the same mixture.
    #[serde(default = "default_test_samples_per_class")]
    pub test_samples_per_class: usize,
    #[serde(default)]
    pub test_seed: u64,
}

fn default_centers() -> Vec<[f64; 2]> {
    SyntheticDataSpec::default().centers
}
fn default_sigma() -> f64 {
    SyntheticDataSpec::default().sigma
}
fn default_samples_per_class() -> usize {
    SyntheticDataSpec::default().samples_per_class
}
fn default_test_samples_per_class() -> usize {
    200
}

impl SyntheticConfig {
    pub fn train_spec(&self) -> SyntheticDataSpec {
        SyntheticDataSpec {
            centers: self.centers.clone(),
            sigma: self.sigma,
            samples_per_class: self.samples_per_class,
            seed: self.seed,
        }
    }

    pub fn test_spec(&self) -> SyntheticDataSpec {
        SyntheticDataSpec {
            samples_per_class: self.test_samples_per_class,
            seed: self.test_seed,
            ..self.train_spec()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistConfig {
    /// Directory holding the four files under their usual names; individual
    /// paths take precedence. Resolution replaces it by explicit paths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default = "default_train_limit")]
    pub train_limit: usize,
    #[serde(default = "default_test_limit")]
    pub test_limit: usize,
}

fn default_train_limit() -> usize {
    10_000
}
fn default_test_limit() -> usize {
    2_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Which split `eval` and `compare` measure.
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub boundary: Option<BoundaryConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryConfig {
    /// `[x_min, y_min, x_max, y_max]`; defaults to the synthetic data bbox.
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn default_resolution() -> usize {
    200
}

/// Either a file (`.csv` or `.json`) or an inline matrix, plus the exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostMatrixConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    1.0
}

/// A fully resolved configuration and its hash.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl ResolvedConfig {
    /// `<output_dir>/<hash>`
    pub fn experiment_dir(&self) -> PathBuf {
        self.config.output_dir.join(&self.hash)
    }

    pub fn snapshot_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        text.push('\n');
        text
    }

    pub fn num_classes(&self) -> usize {
        self.config.model.num_classes()
    }

    pub fn cost_matrix(&self) -> Result<Option<CostMatrix>> {
        match &self.config.cost_matrix {
            None => Ok(None),
            Some(c) => {
                let m = c.matrix.as_ref().expect("resolved cost matrix is inline");
                Ok(Some(CostMatrix::new(m, c.p).map_err(|e| {
                    CliError::Config(format!("cost_matrix: {e}"))
                })?))
            }
        }
    }
}

/// Reads a config file as an untyped tree.
pub fn read_config_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Applies one `path=value` override. The path is dot-separated; numeric
/// segments index arrays. The value is parsed as JSON when possible and kept
/// as a string otherwise. Missing objects along the path are created.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects path=value, got {assignment:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("--set path {path:?} has an empty segment")));
    }
    let (leaf, parents) = segments.split_last().expect("split yields a segment");
    let mut node = root;
    for (depth, seg) in parents.iter().enumerate() {
        let here = segments[..=depth].join(".");
        if node.is_null() {
            *node = Value::Object(Map::new());
        }
        node = child(node, seg, &here)?;
    }
    if node.is_null() {
        *node = Value::Object(Map::new());
    }
    *child(node, leaf, path)? = value;
    Ok(())
}

fn child<'a>(node: &'a mut Value, seg: &str, here: &str) -> Result<&'a mut Value> {
    match node {
        Value::Array(items) => {
            let idx: usize = seg
                .parse()
                .map_err(|_| CliError::Config(format!("--set {here}: expected an array index")))?;
            let len = items.len();
            items
                .get_mut(idx)
                .ok_or_else(|| CliError::Config(format!("--set {here}: index out of range (length {len})")))
        }
        Value::Object(map) => Ok(map.entry(seg.to_string()).or_insert(Value::Null)),
        _ => Err(CliError::Config(format!("--set {here}: cannot descend into a scalar"))),
    }
}

/// Divides every attack radius (and explicit step size) by 255, for configs
/// written in byte units.
pub fn apply_eps_255(root: &mut Value) {
    fn rescale(attack: &mut Value) {
        for key in ["epsilon", "step_size"] {
            if let Some(v) = attack.get(key).and_then(Value::as_f64) {
                attack[key] = Value::from(v / 255.0);
            }
        }
    }
    if let Some(a) = root.pointer_mut("/train/attack") {
        if a.is_object() {
            rescale(a);
        }
    }
    if let Some(Value::Array(attacks)) = root.pointer_mut("/eval/attacks") {
        attacks.iter_mut().for_each(rescale);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for component `slot` derived from the global seed.
pub fn derive_seed(global: u64, slot: u64) -> u64 {
    splitmix64(global ^ splitmix64(slot))
}

fn fill_seed(node: Option<&mut Value>, key: &str, seed: u64) {
    if let Some(Value::Object(map)) = node {
        map.entry(key.to_string()).or_insert(Value::from(seed));
    }
}

/// Inserts every seed the tree leaves unspecified.
pub fn derive_seeds(root: &mut Value) -> Result<()> {
    let Value::Object(map) = root else {
        return Err(CliError::Config("config must be a JSON object".into()));
    };
    let global = match map.get("seed") {
        None => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| CliError::Config("seed must be a non-negative integer".into()))?,
    };
    map.insert("seed".into(), Value::from(global));
    if root.pointer("/dataset/kind").and_then(Value::as_str) == Some("synthetic") {
        fill_seed(root.pointer_mut("/dataset"), "seed", derive_seed(global, 1));
        fill_seed(root.pointer_mut("/dataset"), "test_seed", derive_seed(global, 2));
    }
    fill_seed(root.pointer_mut("/model"), "seed", derive_seed(global, 3));
    fill_seed(root.pointer_mut("/train"), "seed", derive_seed(global, 4));
    fill_seed(root.pointer_mut("/train/attack"), "seed", derive_seed(global, 5));
    if let Some(Value::Array(attacks)) = root.pointer_mut("/eval/attacks") {
        for (i, a) in attacks.iter_mut().enumerate() {
            fill_seed(Some(a), "seed", derive_seed(global, 100 + i as u64));
        }
    }
    Ok(())
}

/// Joins `p` onto `base` and folds `.` and `..` lexically, so snapshots
/// carry clean absolute paths.
fn absolutize(base: &Path, p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in base.join(p).components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    out
}

fn check_attack(attack: &AttackConfig, what: &str, has_cost: bool) -> Result<()> {
    attack
        .validate()
        .map_err(|e| CliError::Config(format!("{what}: {e}")))?;
    if attack.objective == Objective::Wasserstein && !has_cost {
        return Err(CliError::Config(format!(
            "{what}: the wasserstein objective needs a cost_matrix section"
        )));
    }
    Ok(())
}

/// Parses, overrides and resolves a config tree. Relative paths are taken
/// relative to `base_dir`.
pub fn resolve_value(mut root: Value, base_dir: &Path) -> Result<ResolvedConfig> {
    derive_seeds(&mut root)?;
    let mut cfg: ExperimentConfig =
        serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;

    cfg.output_dir = absolutize(base_dir, &cfg.output_dir);

    let (input_dim, num_classes) = match &mut cfg.dataset {
        DatasetConfig::Synthetic(s) => {
            s.train_spec()
                .validate()
                .map_err(|e| CliError::Config(format!("dataset: {e}")))?;
            if s.samples_per_class == 0 || s.test_samples_per_class == 0 {
                return Err(CliError::Config("dataset: sample counts must be positive".into()));
            }
            (2, s.centers.len())
        }
        DatasetConfig::Mnist(m) => {
            let dir = m.dir.take().map(|d| absolutize(base_dir, &d));
            let fill = |slot: &mut Option<PathBuf>, name: &str, key: &str| -> Result<()> {
                let path = match (slot.take(), &dir) {
                    (Some(p), _) => absolutize(base_dir, &p),
                    (None, Some(d)) => d.join(name),
                    (None, None) => {
                        return Err(CliError::Config(format!("dataset.{key} is required without dataset.dir")))
                    }
                };
                if !path.is_file() {
                    return Err(CliError::Config(format!(
                        "dataset.{key}: file {} does not exist",
                        path.display()
                    )));
                }
                *slot = Some(path);
                Ok(())
            };
            fill(&mut m.train_images, "train-images-idx3-ubyte", "train_images")?;
            fill(&mut m.train_labels, "train-labels-idx1-ubyte", "train_labels")?;
            fill(&mut m.test_images, "t10k-images-idx3-ubyte", "test_images")?;
            fill(&mut m.test_labels, "t10k-labels-idx1-ubyte", "test_labels")?;
            if m.train_limit == 0 || m.test_limit == 0 {
                return Err(CliError::Config("dataset: limits must be positive".into()));
            }
            (MNIST_INPUT_DIM, MNIST_CLASSES)
        }
    };

    cfg.model
        .validate()
        .map_err(|e| CliError::Config(format!("model: {e}")))?;
    if cfg.model.input_dim() != input_dim {
        return Err(CliError::Config(format!(
            "model.layer_widths[0] = {} but the dataset has input dimension {input_dim}",
            cfg.model.input_dim()
        )));
    }
    if cfg.model.num_classes() != num_classes {
        return Err(CliError::Config(format!(
            "model output width {} but the dataset has {num_classes} classes",
            cfg.model.num_classes()
        )));
    }

    if let Some(c) = &mut cfg.cost_matrix {
        let matrix = match (c.path.take(), c.matrix.take()) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config("cost_matrix: give either path or matrix, not both".into()))
            }
            (None, None) => return Err(CliError::Config("cost_matrix: path or matrix is required".into())),
            (None, Some(m)) => m,
            (Some(p), None) => {
                let path = absolutize(base_dir, &p);
                CostMatrix::load(&path, c.p)?.rows()
            }
        };
        let cost = CostMatrix::new(&matrix, c.p).map_err(|e| CliError::Config(format!("cost_matrix: {e}")))?;
        if cost.size() != num_classes {
            return Err(CliError::Config(format!(
                "cost_matrix is {0}×{0} but the dataset has {num_classes} classes",
                cost.size()
            )));
        }
        c.matrix = Some(matrix);
    }
    let has_cost = cfg.cost_matrix.is_some();

    cfg.train
        .validate()
        .map_err(|e| CliError::Config(format!("train: {e}")))?;
    if cfg.train.mode == TrainMode::Wpgd && !has_cost {
        return Err(CliError::Config("train.mode wpgd needs a cost_matrix section".into()));
    }
    cfg.train.attack = cfg.train.effective_attack();
    if let Some(a) = &cfg.train.attack {
        check_attack(a, "train.attack", has_cost)?;
    }
    for (i, a) in cfg.eval.attacks.iter_mut().enumerate() {
        *a = a.resolved();
        check_attack(a, &format!("eval.attacks.{i}"), has_cost)?;
    }

    if let Some(b) = &mut cfg.eval.boundary {
        if input_dim != 2 {
            return Err(CliError::Config(format!(
                "eval.boundary needs a 2-D input, the model has {input_dim}"
            )));
        }
        if b.resolution < 2 {
            return Err(CliError::Config("eval.boundary.resolution must be at least 2".into()));
        }
        if b.bbox.is_none() {
            if let DatasetConfig::Synthetic(s) = &cfg.dataset {
                b.bbox = Some(s.train_spec().bbox());
            }
        }
        let [x0, y0, x1, y1] = b
            .bbox
            .ok_or_else(|| CliError::Config("eval.boundary.bbox is required".into()))?;
        if !(x0 < x1 && y0 < y1) {
            return Err(CliError::Config("eval.boundary.bbox must be [x_min, y_min, x_max, y_max]".into()));
        }
    }

    let hash = config_hash(&cfg);
    Ok(ResolvedConfig { config: cfg, hash })
}

/// First 16 hex digits of the SHA-256 of the canonical JSON of `cfg`
/// without its output directory.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    if let Value::Object(map) = &mut value {
        map.remove("output_dir");
    }
    let digest = Sha256::digest(value.to_string().as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// Loads a config file, applies overrides and resolves it.
pub fn load_config(path: &Path, sets: &[String], eps_255: bool) -> Result<ResolvedConfig> {
    let mut value = read_config_value(path)?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    if eps_255 {
        apply_eps_255(&mut value);
    }
    let base = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let base = std::path::absolute(&base).map_err(|e| CliError::io(&base, e))?;
    resolve_value(value, &base)
}
