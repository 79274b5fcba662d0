//! Reproducible experiment pipeline behind the command-line tool.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/manifest.json, data/<set>.jsonl     tuple sets with their split
//! model/model.ckpt, model/train_curve.csv  trained arithmetic model
//! planted/model.ckpt, planted/*.json       hand-wired recall model
//! runs/<label>/...                         masks, trajectory, evaluation
//! sweep/sweep.csv, sweep/summary.json      lambda sweep
//! report.md, results.csv                   consolidated table
//! ```
//!
//! Every JSON artifact carries the config hash and seed. Nothing records
//! wall-clock time, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::desiderata::{
    evaluate_accuracy, evaluate_mask_accuracy, optimize, DesiderataTuple, DiscoveryConfig,
    DiscoveryResult, TrajectoryRow,
};
use crate::error::{Error, Result};
use crate::patching::{round_mask, BinaryMask, Mask, MaskFile};
use crate::tasks::{
    build_planted_model, gen_oi_tuples, gen_recall_tuples, gen_vd_tuples, plain_tuples,
    read_jsonl, split_balanced, to_desideratum, train_toy_model, write_jsonl, LabeledTuple, Op,
    TrainConfig, TrainReport, TupleKind,
};
use crate::transformer::{load_checkpoint, save_checkpoint, ModelParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::ConfigMismatch(_)
        | Error::Json(_)
        | Error::Io { .. }
        | Error::Format { .. }
        | Error::Alignment(_)
        | Error::Generation(_) => EXIT_CONFIG,
        Error::NumericalAbort { .. } => EXIT_NUMERICAL,
        Error::TrainingFailure { .. } => EXIT_THRESHOLD,
        _ => EXIT_FAILURE,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Arithmetic,
    Recall,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DesiderataChoice {
    #[default]
    Full,
    VdOnly,
    OiOnly,
}

impl std::str::FromStr for DesiderataChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "vd-only" | "vd" => Ok(Self::VdOnly),
            "oi-only" | "oi" => Ok(Self::OiOnly),
            _ => Err(Error::Config(format!("unknown desiderata selection {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSource {
    /// Existing checkpoint; when absent the pipeline uses `model/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for ModelSource {
    fn default() -> Self {
        Self {
            checkpoint: None,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub train_per_desideratum: usize,
    pub test_per_desideratum: usize,
    pub discovery_ops: Vec<Op>,
    pub oi_pairs: Vec<(Op, Op)>,
    pub transfer_vd_ops: Vec<Op>,
    pub transfer_oi_pairs: Vec<(Op, Op)>,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            train_per_desideratum: 90,
            test_per_desideratum: 90,
            discovery_ops: vec![Op::Add, Op::Sub],
            oi_pairs: vec![(Op::Add, Op::Sub)],
            transfer_vd_ops: vec![Op::Mul],
            transfer_oi_pairs: vec![(Op::Add, Op::Mul)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub vd: f32,
    pub oi: f32,
    pub max_patched_fraction: f32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            vd: 0.8,
            oi: 0.8,
            max_patched_fraction: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    pub out_dir: PathBuf,
    pub model: ModelSource,
    pub data: DataSpec,
    pub discovery: DiscoveryConfig,
    pub desiderata: DesiderataChoice,
    pub sweep_lambdas: Vec<f64>,
    pub thresholds: Thresholds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Arithmetic,
            out_dir: PathBuf::from("runs/default"),
            model: ModelSource::default(),
            data: DataSpec::default(),
            discovery: DiscoveryConfig::default(),
            desiderata: DesiderataChoice::Full,
            sweep_lambdas: vec![0.0, 0.01, 0.03, 0.1, 0.3, 1.0],
            thresholds: Thresholds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.discovery.validate()?;
        let d = &self.data;
        if d.train_per_desideratum < 9 || d.test_per_desideratum < 9 {
            return Err(Error::Config(
                "each split needs at least nine tuples per desideratum".into(),
            ));
        }
        if d.discovery_ops.is_empty() || d.oi_pairs.is_empty() {
            return Err(Error::Config("discovery needs operations and OI pairs".into()));
        }
        if self.task == Task::Recall && self.desiderata != DesiderataChoice::Full {
            return Err(Error::Config(
                "the recall task has a single desideratum; use the full selection".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, truncated to 16 characters.
    /// The output directory is left out so relocated runs hash the same.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex(&Sha256::digest(bytes))[..16].to_string()
    }

    fn derived_seed(&self, stream: u64) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(stream)
    }

    fn discovery_config(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            seed: self.seed,
            ..self.discovery.clone()
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---- data ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub name: String,
    pub kind: TupleKind,
    pub split: Split,
    pub path: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<DataFile>,
}

/// Named tuple sets the pipeline reads.
pub mod sets {
    pub const VD_TRAIN: &str = "vd_train";
    pub const VD_TEST: &str = "vd_test";
    pub const OI_TRAIN: &str = "oi_train";
    pub const OI_TEST: &str = "oi_test";
    pub const VD_TRANSFER_TEST: &str = "vd_mul_test";
    pub const OI_TRANSFER_TEST: &str = "oi_addmul_test";
    pub const RECALL_TRAIN: &str = "recall_train";
    pub const RECALL_TEST: &str = "recall_test";
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

/// Generates every tuple set for the configured task and writes the manifest.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<DataManifest> {
    cfg.validate()?;
    let d = &cfg.data;
    let (n_train, n_test) = (d.train_per_desideratum, d.test_per_desideratum);
    let total = n_train + n_test;
    let mut sets: Vec<(&str, TupleKind, Split, Vec<LabeledTuple>)> = Vec::new();
    match cfg.task {
        Task::Arithmetic => {
            let (tr, te) = split_balanced(gen_vd_tuples(total, &d.discovery_ops, cfg.derived_seed(1))?, n_train)?;
            sets.push((sets::VD_TRAIN, TupleKind::Vd, Split::Train, tr));
            sets.push((sets::VD_TEST, TupleKind::Vd, Split::Test, te));
            let (tr, te) = split_balanced(gen_oi_tuples(total, &d.oi_pairs, cfg.derived_seed(2))?, n_train)?;
            sets.push((sets::OI_TRAIN, TupleKind::Oi, Split::Train, tr));
            sets.push((sets::OI_TEST, TupleKind::Oi, Split::Test, te));
            if !d.transfer_vd_ops.is_empty() {
                let te = gen_vd_tuples(n_test, &d.transfer_vd_ops, cfg.derived_seed(3))?;
                sets.push((sets::VD_TRANSFER_TEST, TupleKind::Vd, Split::Test, te));
            }
            if !d.transfer_oi_pairs.is_empty() {
                let te = gen_oi_tuples(n_test, &d.transfer_oi_pairs, cfg.derived_seed(4))?;
                sets.push((sets::OI_TRANSFER_TEST, TupleKind::Oi, Split::Test, te));
            }
        }
        Task::Recall => {
            let (tr, te) = split_balanced(gen_recall_tuples(total, cfg.derived_seed(5))?, n_train)?;
            sets.push((sets::RECALL_TRAIN, TupleKind::Recall, Split::Train, tr));
            sets.push((sets::RECALL_TEST, TupleKind::Recall, Split::Test, te));
        }
    }

    let dir = data_dir(out);
    let mut files = Vec::new();
    for (name, kind, split, tuples) in sets {
        let file = format!("{name}.jsonl");
        let path = dir.join(&file);
        write_jsonl(&tuples, &path)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.push(DataFile {
            name: name.to_string(),
            kind,
            split,
            path: file,
            count: tuples.len(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = DataManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        files,
    };
    write_json(&manifest, &dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn load_manifest(out: &Path) -> Result<DataManifest> {
    read_json(&data_dir(out).join("manifest.json"))
}

/// Loads a tuple set, insisting it belongs to `split`.
pub fn load_set(out: &Path, name: &str, split: Split) -> Result<Vec<LabeledTuple>> {
    let manifest = load_manifest(out)?;
    let entry = manifest
        .files
        .iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::Config(format!("data manifest has no set {name:?}")))?;
    if entry.split != split {
        return Err(Error::Config(format!(
            "set {name:?} belongs to the {:?} split, refusing to read it as {split:?}",
            entry.split
        )));
    }
    let path = data_dir(out).join(&entry.path);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if hex(&Sha256::digest(&bytes)) != entry.sha256 {
        return Err(Error::Config(format!(
            "{} does not match its manifest checksum",
            path.display()
        )));
    }
    read_jsonl(&path)
}

fn has_set(out: &Path, name: &str) -> Result<bool> {
    Ok(load_manifest(out)?.files.iter().any(|f| f.name == name))
}

// ---- models ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub report: TrainReport,
}

pub fn model_path(cfg: &ExperimentConfig, out: &Path) -> PathBuf {
    match cfg.task {
        Task::Recall => out.join("planted").join("model.ckpt"),
        Task::Arithmetic => cfg
            .model
            .checkpoint
            .clone()
            .unwrap_or_else(|| out.join("model").join("model.ckpt")),
    }
}

/// Writes CSV rows, each prefixed with the config hash and seed.
fn write_tagged_csv<R: Serialize>(rows: &[R], hash: &str, seed: u64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Serialize the plain rows first, then splice the two tag columns in front.
    let mut inner = csv::Writer::from_writer(Vec::new());
    for r in rows {
        inner.serialize(r)?;
    }
    let bytes = inner
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(bytes.as_slice());
    let mut w = csv::Writer::from_path(path)?;
    let seed = seed.to_string();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let tags = if i == 0 { ["config_hash", "seed"] } else { [hash, seed.as_str()] };
        w.write_record(tags.iter().copied().chain(rec.iter()))?;
    }
    if rows.is_empty() {
        w.write_record(["config_hash", "seed"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains the arithmetic model; the curve is written even when training fails.
pub fn train_model(cfg: &ExperimentConfig, out: &Path) -> Result<(ModelParams, TrainReport)> {
    let dir = out.join("model");
    match train_toy_model(&cfg.model.train) {
        Ok((params, report)) => {
            save_checkpoint(&params, dir.join("model.ckpt"))?;
            write_tagged_csv(&report.curve, &cfg.hash(), cfg.model.train.seed, &dir.join("train_curve.csv"))?;
            write_json(
                &TrainArtifact {
                    config_hash: cfg.hash(),
                    seed: cfg.model.train.seed,
                    report: report.clone(),
                },
                &dir.join("train_report.json"),
            )?;
            Ok((params, report))
        }
        Err(e) => {
            if let Error::TrainingFailure { curve, .. } = &e {
                write_tagged_csv(curve, &cfg.hash(), cfg.model.train.seed, &dir.join("train_curve.csv"))?;
            }
            Err(e)
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundTruth {
    pub components: Vec<String>,
    pub n_components: usize,
}

/// Writes the hand-wired recall model, its ground truth and self-check report.
pub fn build_planted(out: &Path) -> Result<crate::tasks::PlantedSpec> {
    let spec = build_planted_model()?;
    let dir = out.join("planted");
    save_checkpoint(&spec.params, dir.join("model.ckpt"))?;
    write_json(
        &GroundTruth {
            components: spec.ground_truth.iter().map(|c| c.to_string()).collect(),
            n_components: spec.report.n_components,
        },
        &dir.join("ground_truth.json"),
    )?;
    write_json(&spec.report, &dir.join("self_check.json"))?;
    Ok(spec)
}

pub fn load_model(cfg: &ExperimentConfig, out: &Path) -> Result<ModelParams> {
    let path = model_path(cfg, out);
    if !path.exists() {
        return Err(Error::Config(format!(
            "model checkpoint {} is missing; run train-model or build-planted first",
            path.display()
        )));
    }
    load_checkpoint(path)
}

// ---- discovery ------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub lambda: f64,
    pub desiderata: Vec<String>,
    pub patched: Vec<String>,
    pub n_components: usize,
    pub final_losses: BTreeMap<String, f32>,
}

pub fn run_dir(out: &Path, label: &str) -> PathBuf {
    out.join("runs").join(label)
}

fn selected_sets(cfg: &ExperimentConfig) -> Vec<(&'static str, &'static str, TupleKind)> {
    match (cfg.task, cfg.desiderata) {
        (Task::Recall, _) => vec![("recall", sets::RECALL_TRAIN, TupleKind::Recall)],
        (Task::Arithmetic, DesiderataChoice::Full) => vec![
            ("vd", sets::VD_TRAIN, TupleKind::Vd),
            ("oi", sets::OI_TRAIN, TupleKind::Oi),
        ],
        (Task::Arithmetic, DesiderataChoice::VdOnly) => vec![("vd", sets::VD_TRAIN, TupleKind::Vd)],
        (Task::Arithmetic, DesiderataChoice::OiOnly) => vec![("oi", sets::OI_TRAIN, TupleKind::Oi)],
    }
}

/// Learns a mask from the training split and writes it under `dir`.
pub fn discover_into(
    cfg: &ExperimentConfig,
    out: &Path,
    params: &ModelParams,
    dir: &Path,
    label: &str,
) -> Result<DiscoveryResult> {
    cfg.validate()?;
    let mut desiderata = Vec::new();
    for (name, set, kind) in selected_sets(cfg) {
        let tuples = load_set(out, set, Split::Train)?;
        desiderata.push(to_desideratum(name, kind, &tuples));
    }
    let dcfg = cfg.discovery_config();
    let result = optimize(params, &desiderata, &dcfg)?;

    let hash = cfg.hash();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    MaskFile::from_mask(&result.mask, &hash, dcfg.seed, dcfg.threshold).save(dir.join("mask.json"))?;
    MaskFile::from_binary(&result.binary, &params.config, &hash, dcfg.seed, dcfg.threshold)
        .save(dir.join("binary_mask.json"))?;
    write_tagged_csv::<TrajectoryRow>(&result.trajectory, &hash, dcfg.seed, &dir.join("trajectory.csv"))?;
    let mut final_losses = BTreeMap::new();
    for row in result.trajectory.iter().rev() {
        final_losses.entry(row.desideratum.clone()).or_insert(row.loss);
    }
    write_json(
        &RunRecord {
            label: label.to_string(),
            config_hash: hash,
            seed: dcfg.seed,
            lambda: dcfg.lambda,
            desiderata: desiderata.iter().map(|d| d.name.clone()).collect(),
            patched: result.binary.patched.iter().map(|c| c.to_string()).collect(),
            n_components: result.mask.components.len(),
            final_losses,
        },
        &dir.join("run.json"),
    )?;
    Ok(result)
}

pub fn discover(cfg: &ExperimentConfig, out: &Path, label: &str) -> Result<DiscoveryResult> {
    let params = load_model(cfg, out)?;
    discover_into(cfg, out, &params, &run_dir(out, label), label)
}

// ---- evaluation -----------------------------------------------------------------------

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub label: String,
    pub vd_acc: Option<f32>,
    pub oi_acc: Option<f32>,
    pub vd_mul_acc: Option<f32>,
    pub oi_addmul_acc: Option<f32>,
    pub patched: usize,
    pub total: usize,
    pub continuous_vd_acc: Option<f32>,
    pub continuous_oi_acc: Option<f32>,
    pub config_hash: String,
    pub seed: u64,
}

fn test_sets(task: Task) -> [(&'static str, usize); 4] {
    match task {
        Task::Arithmetic => [
            (sets::VD_TEST, 0),
            (sets::OI_TEST, 1),
            (sets::VD_TRANSFER_TEST, 2),
            (sets::OI_TRANSFER_TEST, 3),
        ],
        Task::Recall => [(sets::RECALL_TEST, 0), ("", 9), ("", 9), ("", 9)],
    }
}

/// Scores a mask on the held-out sets. `None` evaluates the identity mask.
pub fn evaluate(
    cfg: &ExperimentConfig,
    out: &Path,
    params: &ModelParams,
    mask: Option<&Mask>,
    label: &str,
) -> Result<ResultsRow> {
    let identity = Mask::ones(&params.config);
    let mask = mask.unwrap_or(&identity);
    mask.validate(&params.config)?;
    let threshold = cfg.discovery.threshold;
    let binary: BinaryMask = round_mask(mask, threshold);
    let is_binary = mask.weights.iter().all(|&w| w == 0.0 || w == 1.0);

    let mut accs = [None; 4];
    let mut cont = [None; 2];
    for (name, slot) in test_sets(cfg.task) {
        if name.is_empty() || !has_set(out, name)? {
            continue;
        }
        let tuples: Vec<DesiderataTuple> = plain_tuples(&load_set(out, name, Split::Test)?);
        accs[slot] = Some(evaluate_accuracy(params, &binary, &tuples)?);
        if slot < 2 {
            cont[slot] = Some(if is_binary {
                accs[slot].unwrap()
            } else {
                evaluate_mask_accuracy(params, mask, &tuples)?
            });
        }
    }
    Ok(ResultsRow {
        label: label.to_string(),
        vd_acc: accs[0],
        oi_acc: accs[1],
        vd_mul_acc: accs[2],
        oi_addmul_acc: accs[3],
        patched: binary.len(),
        total: mask.components.len(),
        continuous_vd_acc: cont[0],
        continuous_oi_acc: cont[1],
        config_hash: cfg.hash(),
        seed: cfg.seed,
    })
}

fn write_row(row: &ResultsRow, dir: &Path) -> Result<()> {
    write_json(row, &dir.join("eval.json"))?;
    let path = dir.join("eval.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Evaluates a mask file (or the identity mask) and records the row under `runs/<label>`.
pub fn eval_command(
    cfg: &ExperimentConfig,
    out: &Path,
    mask_path: Option<&Path>,
    label: &str,
) -> Result<ResultsRow> {
    let params = load_model(cfg, out)?;
    let mask = match mask_path {
        Some(p) => Some(MaskFile::load(p)?.to_mask(&params.config)?),
        None => None,
    };
    let row = evaluate(cfg, out, &params, mask.as_ref(), label)?;
    write_row(&row, &run_dir(out, label))?;
    Ok(row)
}

/// Whether a row meets the configured accuracy and sparsity thresholds.
pub fn meets_thresholds(row: &ResultsRow, t: &Thresholds) -> bool {
    let ok = |a: Option<f32>, min: f32| a.is_none_or(|a| a >= min);
    ok(row.vd_acc, t.vd)
        && ok(row.oi_acc, t.oi)
        && (row.patched as f32) <= t.max_patched_fraction * row.total as f32
}

// ---- sweep -----------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub patched: usize,
    pub vd_acc: Option<f32>,
    pub oi_acc: Option<f32>,
    pub vd_mul_acc: Option<f32>,
    pub oi_addmul_acc: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub seed: u64,
    pub spearman_lambda_patched: Option<f64>,
    pub weakly_decreasing: bool,
    /// Smallest patched count whose VD accuracy clears the threshold.
    pub approximate_minimum: Option<SweepRow>,
    pub rows: Vec<SweepRow>,
}

fn lambda_label(l: f64) -> String {
    format!("lambda_{l}")
}

/// One discovery and evaluation per lambda, sharing the seed.
pub fn sweep(cfg: &ExperimentConfig, out: &Path, lambdas: &[f64]) -> Result<SweepSummary> {
    if lambdas.len() < 2 {
        return Err(Error::Config("a sweep needs at least two lambda values".into()));
    }
    let params = load_model(cfg, out)?;
    let mut rows = Vec::new();
    for &l in lambdas {
        let mut arm = cfg.clone();
        arm.discovery.lambda = l;
        let label = lambda_label(l);
        let dir = out.join("sweep").join(&label);
        let result = discover_into(&arm, out, &params, &dir, &label)?;
        let row = evaluate(&arm, out, &params, Some(&result.binary.to_mask(&params.config)), &label)?;
        write_row(&row, &dir)?;
        rows.push(SweepRow {
            lambda: l,
            patched: row.patched,
            vd_acc: row.vd_acc,
            oi_acc: row.oi_acc,
            vd_mul_acc: row.vd_mul_acc,
            oi_addmul_acc: row.oi_addmul_acc,
        });
    }
    write_tagged_csv(&rows, &cfg.hash(), cfg.seed, &out.join("sweep").join("sweep.csv"))?;

    let xs: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.patched as f64).collect();
    let rho = spearman(&xs, &ys);
    let summary = SweepSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        spearman_lambda_patched: rho,
        weakly_decreasing: rho.is_none_or(|r| r <= 0.0),
        approximate_minimum: rows
            .iter()
            .filter(|r| r.vd_acc.is_some_and(|a| a >= cfg.thresholds.vd))
            .min_by_key(|r| r.patched)
            .cloned(),
        rows,
    };
    write_json(&summary, &out.join("sweep").join("summary.json"))?;
    Ok(summary)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

// ---- report -----------------------------------------------------------------------------

/// Run labels the report expects, in table order.
pub const REPORT_LABELS: [&str; 3] = ["clean", "full", "vd_only"];

#[derive(Clone, Debug)]
pub struct Report {
    pub markdown: String,
    pub rows: Vec<ResultsRow>,
    pub missing: Vec<String>,
}

fn pct(a: Option<f32>) -> String {
    a.map_or("n/a".to_string(), |a| format!("{:.1}", a * 100.0))
}

/// Collects every `runs/*/eval.json` into `report.md` and `results.csv`.
pub fn report(out: &Path) -> Result<Report> {
    let runs = out.join("runs");
    let mut rows = Vec::new();
    if runs.is_dir() {
        let mut dirs: Vec<_> = fs::read_dir(&runs)
            .map_err(|e| Error::io(&runs, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("eval.json").is_file())
            .collect();
        dirs.sort();
        for d in dirs {
            rows.push(read_json::<ResultsRow>(&d.join("eval.json"))?);
        }
    }
    rows.sort_by(|a, b| a.label.cmp(&b.label));
    let missing: Vec<String> = REPORT_LABELS
        .iter()
        .filter(|l| !rows.iter().any(|r| r.label == **l))
        .map(|l| l.to_string())
        .collect();

    let mut md = String::from("# Patching results\n\n");
    md.push_str("Accuracies are percentages on held-out tuples; binary masks use the rounding threshold.\n\n");
    md.push_str("| Run | VD Acc. | OI Acc. | VD-× Acc. | OI-(+,×) Acc. | # Patched |\n");
    md.push_str("|---|---|---|---|---|---|\n");
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {}/{} |\n",
            r.label,
            pct(r.vd_acc),
            pct(r.oi_acc),
            pct(r.vd_mul_acc),
            pct(r.oi_addmul_acc),
            r.patched,
            r.total
        ));
    }
    for m in &missing {
        md.push_str(&format!("| {m} | MISSING | MISSING | MISSING | MISSING | MISSING |\n"));
    }
    md.push_str(
        "\nFull-scale reference (13B model, 1640 components): full desiderata \
         VD 84, OI 82, VD-× 84, OI-(+,×) 91 with 10 patched. Shown for context only.\n",
    );

    let full = rows.iter().find(|r| r.label == "full");
    let vd_only = rows.iter().find(|r| r.label == "vd_only");
    md.push_str("\n## Incomplete desiderata\n\n");
    match (full, vd_only) {
        (Some(f), Some(v)) => {
            md.push_str("| Run | VD Acc. | OI Acc. | # Patched |\n|---|---|---|---|\n");
            for r in [f, v] {
                md.push_str(&format!(
                    "| {} | {} | {} | {} |\n",
                    r.label,
                    pct(r.vd_acc),
                    pct(r.oi_acc),
                    r.patched
                ));
            }
            match (f.oi_acc, v.oi_acc) {
                (Some(fo), Some(vo)) => {
                    let gap = (fo - vo) * 100.0;
                    md.push_str(&format!("\nOI gap (full − VD only): {gap:.1} points.\n"));
                    if gap < 20.0 {
                        md.push_str(
                            "Divergence: on this model dropping the OI desideratum costs less than \
                             20 points of OI accuracy, unlike the full-scale result.\n",
                        );
                    }
                }
                _ => md.push_str("\nOI accuracy unavailable for one of the runs.\n"),
            }
        }
        _ => md.push_str("MISSING: needs both the `full` and `vd_only` runs.\n"),
    }

    let continuous: Vec<_> = rows
        .iter()
        .filter(|r| r.continuous_vd_acc.is_some() && r.patched > 0)
        .collect();
    if !continuous.is_empty() {
        md.push_str("\n## Rounding\n\n| Run | VD cont. | VD bin. | OI cont. | OI bin. |\n|---|---|---|---|---|\n");
        for r in continuous {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.label,
                pct(r.continuous_vd_acc),
                pct(r.vd_acc),
                pct(r.continuous_oi_acc),
                pct(r.oi_acc)
            ));
        }
    }

    let summary_path = out.join("sweep").join("summary.json");
    if summary_path.is_file() {
        let s: SweepSummary = read_json(&summary_path)?;
        md.push_str("\n## Lambda sweep\n\n| λ | # Patched | VD Acc. | OI Acc. |\n|---|---|---|---|\n");
        for r in &s.rows {
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                r.lambda,
                r.patched,
                pct(r.vd_acc),
                pct(r.oi_acc)
            ));
        }
        md.push_str(&format!(
            "\nSpearman ρ(λ, # patched): {}\n",
            s.spearman_lambda_patched
                .map_or("undefined (constant)".to_string(), |r| format!("{r:.3}"))
        ));
        match &s.approximate_minimum {
            Some(r) => md.push_str(&format!(
                "Approximate minimum: {} patched at λ = {} (VD {}).\n",
                r.patched,
                r.lambda,
                pct(r.vd_acc)
            )),
            None => md.push_str("Approximate minimum: no arm reached the VD threshold.\n"),
        }
    }

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let md_path = out.join("report.md");
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    let csv_path = out.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(Report {
        markdown: md,
        rows,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[5.0, 5.0, 1.0, 0.0]).unwrap();
        assert!(r < 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        let abort = Error::NumericalAbort {
            step: 1,
            desideratum: "vd".into(),
            last_finite_loss: None,
            last_finite_step: None,
        };
        assert_eq!(exit_code(&abort), EXIT_NUMERICAL);
    }
}
