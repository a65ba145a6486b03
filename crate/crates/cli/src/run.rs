//! The subcommands as library functions. Each writes its files under
//! `<output_dir>/<config-hash>/` and returns what it wrote.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use wpgd_core::attacks::AttackConfig;
use wpgd_core::data::{gen_synthetic, load_mnist, Dataset};
use wpgd_core::metrics::{
    accuracy_gap, boundary_grid, confusion, entropy_stats, gap_metric_correlation, robustness_score, ConfusionMatrix,
    EntropyStats,
};
use wpgd_core::training::{train, TrainMode, TrainReport};
use wpgd_core::{Checkpoint, CostMatrix, MlpParams};

use crate::config::{DatasetConfig, ResolvedConfig, Split, ARTIFACT_VERSION};
use crate::error::{CliError, Result};

/// `train` and `test` splits of the configured dataset.
pub fn load_datasets(cfg: &ResolvedConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.config.dataset {
        DatasetConfig::Synthetic(s) => Ok((gen_synthetic(&s.train_spec())?, gen_synthetic(&s.test_spec())?)),
        DatasetConfig::Mnist(m) => {
            let path = |p: &Option<PathBuf>| p.clone().expect("resolved mnist paths are explicit");
            let train = load_mnist(&path(&m.train_images), &path(&m.train_labels), Some(m.train_limit))?;
            let test = load_mnist(&path(&m.test_images), &path(&m.test_labels), Some(m.test_limit))?;
            Ok((train, test))
        }
    }
}

fn eval_split(cfg: &ResolvedConfig) -> Result<Dataset> {
    let (train, test) = load_datasets(cfg)?;
    Ok(match cfg.config.eval.split {
        Split::Train => train,
        Split::Test => test,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    text
}

/// First line of every CSV output; the cost-matrix reader skips it too.
fn csv_stamp(cfg: &ResolvedConfig) -> String {
    format!("# {ARTIFACT_VERSION} config {}\n", cfg.hash)
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Reads a checkpoint and checks it against the configured model shape.
pub fn load_checkpoint(cfg: &ResolvedConfig, path: &Path) -> Result<MlpParams> {
    let params = Checkpoint::load(path)?.into_params()?;
    let spec = params.spec();
    let want = &cfg.config.model;
    if spec.num_classes() != want.num_classes() || spec.input_dim() != want.input_dim() {
        return Err(CliError::Config(format!(
            "checkpoint {} maps {} inputs to {} classes, the config expects {} → {}",
            path.display(),
            spec.input_dim(),
            spec.num_classes(),
            want.input_dim(),
            want.num_classes()
        )));
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize)]
struct Stamped<'a, T: Serialize> {
    version: &'a str,
    config_hash: &'a str,
    #[serde(flatten)]
    body: T,
}

fn stamped<'a, T: Serialize>(cfg: &'a ResolvedConfig, body: T) -> Stamped<'a, T> {
    Stamped {
        version: ARTIFACT_VERSION,
        config_hash: &cfg.hash,
        body,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub params: MlpParams,
    pub report: TrainReport,
}

pub const SNAPSHOT_FILE: &str = "resolved_config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

/// Trains the configured model and writes the config snapshot, the
/// checkpoint and the training report.
pub fn cmd_train(cfg: &ResolvedConfig) -> Result<TrainOutcome> {
    let dir = cfg.experiment_dir();
    write_file(&dir.join(SNAPSHOT_FILE), &cfg.snapshot_json())?;
    let (data, _) = load_datasets(cfg)?;
    let cost = cfg.cost_matrix()?;
    let (params, report) = train(&cfg.config.model, &data, &cfg.config.train, cost.as_ref())?;

    let mut checkpoint = Checkpoint::from_params(&params);
    checkpoint.metadata.insert("version".into(), ARTIFACT_VERSION.into());
    checkpoint.metadata.insert("config_hash".into(), cfg.hash.clone());
    let mode = match cfg.config.train.mode {
        TrainMode::Ce => "ce",
        TrainMode::Pgd => "pgd",
        TrainMode::Wpgd => "wpgd",
    };
    checkpoint.metadata.insert("mode".into(), mode.into());
    write_file(&dir.join(CHECKPOINT_FILE), &checkpoint.to_json()?)?;
    write_file(&dir.join(TRAIN_REPORT_FILE), &to_json(&stamped(cfg, &report)))?;
    Ok(TrainOutcome { dir, params, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionReport {
    pub error_percent: f64,
    pub counts: Vec<Vec<u64>>,
}

impl From<&ConfusionMatrix> for ConfusionReport {
    fn from(m: &ConfusionMatrix) -> Self {
        Self {
            error_percent: m.error_percent(),
            counts: m.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub attack: AttackConfig,
    pub adversarial: ConfusionReport,
    /// Cost-weighted adversarial confusion; present with a cost matrix.
    pub robustness_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    pub bbox: [f64; 4],
    pub resolution: usize,
    pub boundary_changes: usize,
}

/// Comparison of the evaluated model (`b`) against a reference (`a`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    /// `|N_b − N_a|` of the row-normalized natural confusions.
    pub accuracy_gap: Vec<Vec<f64>>,
    /// Pearson correlation of off-diagonal gap and cost entries; `None` when
    /// either is constant or no cost matrix is configured.
    pub correlation: Option<f64>,
    /// `S_b − S_a` per configured attack.
    pub score_deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEvaluation {
    pub checkpoint_sha256: String,
    pub split: Split,
    pub num_examples: usize,
    pub natural: ConfusionReport,
    pub attacks: Vec<AttackReport>,
    pub entropy: EntropyStats,
    pub boundary: Option<BoundaryReport>,
    #[serde(skip)]
    pub natural_confusion: ConfusionMatrix,
    #[serde(skip)]
    pub adversarial_confusions: Vec<ConfusionMatrix>,
}

fn evaluate_model(
    cfg: &ResolvedConfig,
    params: &MlpParams,
    data: &Dataset,
    cost: Option<&CostMatrix>,
    checkpoint_sha256: String,
) -> Result<(ModelEvaluation, Option<String>)> {
    let natural = confusion(params, data, None)?;
    let mut attacks = Vec::new();
    let mut adversarial_confusions = Vec::new();
    for attack in &cfg.config.eval.attacks {
        let m = confusion(params, data, Some((attack, cost)))?;
        let score = cost.map(|c| robustness_score(&m, c)).transpose()?;
        attacks.push(AttackReport {
            attack: attack.clone(),
            adversarial: (&m).into(),
            robustness_score: score,
        });
        adversarial_confusions.push(m);
    }
    let entropy = entropy_stats(params, data)?;
    let (boundary, boundary_csv) = match &cfg.config.eval.boundary {
        None => (None, None),
        Some(b) => {
            let bbox = b.bbox.expect("resolved boundary bbox");
            let grid = boundary_grid(params, bbox, b.resolution)?;
            let report = BoundaryReport {
                bbox,
                resolution: b.resolution,
                boundary_changes: grid.boundary_changes(),
            };
            (Some(report), Some(grid.to_csv()))
        }
    };
    Ok((
        ModelEvaluation {
            checkpoint_sha256,
            split: cfg.config.eval.split,
            num_examples: data.len(),
            natural: (&natural).into(),
            attacks,
            entropy,
            boundary,
            natural_confusion: natural,
            adversarial_confusions,
        },
        boundary_csv,
    ))
}

fn gap_report(a: &ModelEvaluation, b: &ModelEvaluation, cost: Option<&CostMatrix>) -> Result<GapReport> {
    let gap = accuracy_gap(&b.natural_confusion, &a.natural_confusion)?;
    let correlation = match cost {
        Some(c) => gap_metric_correlation(&gap, c)?,
        None => None,
    };
    let score_deltas = a
        .attacks
        .iter()
        .zip(&b.attacks)
        .map(|(x, y)| Some(y.robustness_score? - x.robustness_score?))
        .collect();
    Ok(GapReport {
        accuracy_gap: gap.rows(),
        correlation,
        score_deltas,
    })
}

fn gap_csv(cfg: &ResolvedConfig, gap: &[Vec<f64>]) -> String {
    let mut out = csv_stamp(cfg);
    let k = gap.len();
    let header: Vec<String> = (0..k).map(|j| format!("pred_{j}")).collect();
    let _ = writeln!(out, "true,{}", header.join(","));
    for (i, row) in gap.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{i},{}", cells.join(","));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub model: ModelEvaluation,
    pub reference: Option<ReferenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceReport {
    pub checkpoint_sha256: String,
    #[serde(flatten)]
    pub gap: GapReport,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub dir: PathBuf,
    pub report: EvalReport,
}

pub const METRICS_FILE: &str = "metrics.json";

fn short(sha: &str) -> &str {
    &sha[..12]
}

/// Evaluates a checkpoint (default: the one `train` wrote for this config)
/// on clean and attacked inputs. With a reference checkpoint the accuracy
/// gap, its correlation with the cost matrix and the score deltas are added.
/// Outputs go to `<experiment dir>/eval-<checkpoint sha prefix>/`.
pub fn cmd_eval(cfg: &ResolvedConfig, checkpoint: Option<&Path>, reference: Option<&Path>) -> Result<EvalOutcome> {
    let default = cfg.experiment_dir().join(CHECKPOINT_FILE);
    let checkpoint = checkpoint.unwrap_or(&default);
    let params = load_checkpoint(cfg, checkpoint)?;
    let sha = file_sha256(checkpoint)?;
    let data = eval_split(cfg)?;
    let cost = cfg.cost_matrix()?;
    let (model, boundary_csv) = evaluate_model(cfg, &params, &data, cost.as_ref(), sha.clone())?;

    let dir = cfg.experiment_dir().join(format!("eval-{}", short(&sha)));
    let stamp = csv_stamp(cfg);
    write_file(
        &dir.join("confusion_natural.csv"),
        &(stamp.clone() + &model.natural_confusion.to_csv()),
    )?;
    for (i, m) in model.adversarial_confusions.iter().enumerate() {
        write_file(&dir.join(format!("confusion_attack_{i}.csv")), &(stamp.clone() + &m.to_csv()))?;
    }
    if let Some(csv) = boundary_csv {
        write_file(&dir.join("boundary.csv"), &(stamp.clone() + &csv))?;
    }

    let reference = match reference {
        None => None,
        Some(path) => {
            let ref_params = load_checkpoint(cfg, path)?;
            let ref_sha = file_sha256(path)?;
            let (ref_model, _) = evaluate_model(cfg, &ref_params, &data, cost.as_ref(), ref_sha.clone())?;
            let gap = gap_report(&ref_model, &model, cost.as_ref())?;
            write_file(&dir.join("accuracy_gap.csv"), &gap_csv(cfg, &gap.accuracy_gap))?;
            Some(ReferenceReport {
                checkpoint_sha256: ref_sha,
                gap,
            })
        }
    };
    let report = EvalReport { model, reference };
    write_file(&dir.join(METRICS_FILE), &to_json(&stamped(cfg, &report)))?;
    Ok(EvalOutcome { dir, report })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub a: ModelEvaluation,
    pub b: ModelEvaluation,
    /// Offsets are `b − a`: put the baseline in `a`.
    #[serde(flatten)]
    pub gap: GapReport,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub dir: PathBuf,
    pub report: CompareReport,
}

pub const COMPARE_FILE: &str = "compare.json";

/// Evaluates two checkpoints under the same config and reports the gap,
/// its correlation with the cost matrix and `S_b − S_a` per attack.
pub fn cmd_compare(cfg: &ResolvedConfig, a: &Path, b: &Path) -> Result<CompareOutcome> {
    let data = eval_split(cfg)?;
    let cost = cfg.cost_matrix()?;
    let pa = load_checkpoint(cfg, a)?;
    let pb = load_checkpoint(cfg, b)?;
    let (sa, sb) = (file_sha256(a)?, file_sha256(b)?);
    let dir = cfg
        .experiment_dir()
        .join(format!("compare-{}-{}", short(&sa), short(&sb)));
    let (ea, _) = evaluate_model(cfg, &pa, &data, cost.as_ref(), sa)?;
    let (eb, _) = evaluate_model(cfg, &pb, &data, cost.as_ref(), sb)?;
    let gap = gap_report(&ea, &eb, cost.as_ref())?;
    write_file(&dir.join("accuracy_gap.csv"), &gap_csv(cfg, &gap.accuracy_gap))?;
    let report = CompareReport { a: ea, b: eb, gap };
    write_file(&dir.join(COMPARE_FILE), &to_json(&stamped(cfg, &report)))?;
    Ok(CompareOutcome { dir, report })
}

/// Writes both splits as `x1,...,xd,label` CSV (after the stamp line).
pub fn cmd_gen_data(cfg: &ResolvedConfig) -> Result<Vec<PathBuf>> {
    let (train, test) = load_datasets(cfg)?;
    let dir = cfg.experiment_dir();
    let stamp = csv_stamp(cfg);
    let mut written = Vec::new();
    for (name, data) in [("data_train.csv", &train), ("data_test.csv", &test)] {
        let path = dir.join(name);
        write_file(&path, &(stamp.clone() + &data.to_csv()))?;
        written.push(path);
    }
    Ok(written)
}
