//! Command-line orchestration: configuration, run manifests and the
//! `augment` / `train-head` / `eval` / `pipeline-sim` / `report` / `gen-synth`
//! commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{replay, AugmentationSpec, EvalAttack, TrainingMode};
use crate::data::{load_manifest, split_train_eval, CropConfig, DatasetManifest, FaceSample, ManifestFormat, Split};
use crate::error::{FqaError, Result};
use crate::evaluation::{
    build_report, read_report, run_attack_eval, write_csvs, write_records, write_report, EvalModels,
    PolarityHandling, BASELINES, RECORDS_JSONL, REPORT_JSON,
};
use crate::monet::{
    fit_closed_form, table_features, train_head_on_features, ModelArchive, MonetWeights, QualityHead, TrainingConfig,
};
use crate::pipeline::{
    read_scenario, simulate, write_scenario, write_selections, Detector, GroundTruthDetector, MonetScorer, Pipeline,
    PipelineConfig, SlidingWindowDetector, TrackerParams,
};
use crate::recognition::{
    generate_label_rounds, LabelMode, LabelTable, Metric, PrecomputedBackend, RecognitionBackend,
    SyntheticOracleEmbedder,
};
use crate::synth::{synthetic_scenario, write_synthetic_dataset};

pub const MODEL_ARCHIVE: &str = "model.fqta";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const SELECTIONS_JSONL: &str = "selections.jsonl";
pub const TIMING_JSON: &str = "timing.json";
pub const WORKERS_ENV: &str = "FQA_NUM_WORKERS";

pub fn labels_file(mode: TrainingMode) -> String {
    format!("labels_{}.jsonl", mode.as_str())
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub manifest_format: ManifestFormat,
    /// Model archive holding the frozen extractor (and any trained heads).
    pub weights: Option<PathBuf>,
    /// Directory holding `labels_<mode>.jsonl`; defaults to the output directory.
    pub labels: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            manifest: None,
            manifest_format: ManifestFormat::Jsonl,
            weights: None,
            labels: None,
            scenario: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelOptions {
    pub label_mode: LabelMode,
    /// Independent augmentation passes over the training split.
    pub rounds: usize,
    pub write_crops: bool,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions { label_mode: LabelMode::SelfSimilarity, rounds: 1, write_crops: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitOptions {
    /// Fraction of identities held out when the manifest carries no split tags.
    pub eval_fraction: f64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions { eval_fraction: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Oracle,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Embedding archive for precomputed backends.
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

fn default_metric() -> Metric {
    Metric::Cosine
}

impl BackendConfig {
    pub fn oracle() -> Self {
        BackendConfig { kind: BackendKind::Oracle, name: None, metric: Metric::Cosine, embeddings: None }
    }

    pub fn build(&self) -> Result<Box<dyn RecognitionBackend>> {
        match self.kind {
            BackendKind::Oracle => {
                let name = self.name.clone().unwrap_or_else(|| match self.metric {
                    Metric::Cosine => "oracle".into(),
                    Metric::CosineDistance => "oracle_distance".into(),
                    Metric::Euclidean => "oracle_euclidean".into(),
                });
                Ok(Box::new(SyntheticOracleEmbedder::with_metric(name, self.metric)))
            }
            BackendKind::Precomputed => {
                let path = self
                    .embeddings
                    .as_ref()
                    .ok_or_else(|| FqaError::Config("precomputed backend needs an `embeddings` path".into()))?;
                let name = self.name.clone().unwrap_or_else(|| "precomputed".into());
                Ok(Box::new(PrecomputedBackend::load(path, name, self.metric)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub attacks: Vec<EvalAttack>,
    pub baselines: bool,
    pub polarity_handling: PolarityHandling,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { attacks: EvalAttack::ATTACKS.to_vec(), baselines: true, polarity_handling: PolarityHandling::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorOptions {
    pub kind: DetectorKind,
    /// Box position noise as a fraction of box size (ground-truth replay).
    pub jitter: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    GroundTruth,
    SlidingWindow,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        DetectorOptions { kind: DetectorKind::GroundTruth, jitter: 0.0, dropout: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub tracker: TrackerParams,
    pub k: usize,
    pub margin: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    /// Head used for scoring; falls back to the default head.
    pub variant: String,
    pub write_crops: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let p = PipelineConfig::default();
        PipelineOptions {
            tracker: p.tracker,
            k: p.k,
            margin: p.margin,
            frame_width: p.frame_width,
            frame_height: p.frame_height,
            variant: "BRO".into(),
            write_crops: false,
        }
    }
}

impl PipelineOptions {
    pub fn params(&self) -> PipelineConfig {
        PipelineConfig {
            tracker: self.tracker,
            k: self.k,
            margin: self.margin,
            frame_width: self.frame_width,
            frame_height: self.frame_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: String,
    pub paths: PathsConfig,
    pub augmentation: AugmentationSpec,
    pub crop: CropConfig,
    pub labels: LabelOptions,
    pub split: SplitOptions,
    pub training: TrainingConfig,
    /// Model variants to label and train.
    pub variants: Vec<TrainingMode>,
    pub backends: Vec<BackendConfig>,
    pub eval: EvalOptions,
    pub detector: DetectorOptions,
    pub pipeline: PipelineOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: "synthetic".into(),
            paths: PathsConfig::default(),
            augmentation: AugmentationSpec::default(),
            crop: CropConfig::default(),
            labels: LabelOptions::default(),
            split: SplitOptions::default(),
            training: TrainingConfig::default(),
            variants: TrainingMode::ALL.to_vec(),
            backends: vec![BackendConfig::oracle()],
            eval: EvalOptions::default(),
            detector: DetectorOptions::default(),
            pipeline: PipelineOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FqaError::io(path, e))?;
        toml::from_str(&text).map_err(|e| FqaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.augmentation.validate().map_err(|e| FqaError::Config(e.to_string()))?;
        self.training.validate().map_err(|e| FqaError::Config(e.to_string()))?;
        if self.labels.rounds == 0 {
            return Err(FqaError::Config("labels.rounds must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(FqaError::Config("variants must not be empty".into()));
        }
        if self.backends.is_empty() {
            return Err(FqaError::Config("at least one backend is required".into()));
        }
        if self.pipeline.k == 0 {
            return Err(FqaError::Config("pipeline k must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn labels_dir(&self) -> &Path {
        self.paths.labels.as_deref().unwrap_or(&self.paths.out_dir)
    }
}

// ---------------------------------------------------------------------------
// Run manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| FqaError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

struct ManifestBuilder {
    command: &'static str,
    started: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    fn new(command: &'static str) -> Self {
        ManifestBuilder { command, started: unix_now(), inputs: Vec::new(), outputs: Vec::new() }
    }

    fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
        paths
            .iter()
            .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect()
    }

    fn write(self, config: &RunConfig) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command.to_string(),
            config_hash: config.hash(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            inputs: Self::digests(&self.inputs)?,
            outputs: Self::digests(&self.outputs)?,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let path = config.paths.out_dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(&path, text).map_err(|e| FqaError::io(&path, e))?;
        Ok(m)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FqaError::io(dir, e))
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| FqaError::Config(format!("no {what} path configured")))?;
    if !p.exists() {
        return Err(FqaError::Config(format!("{what} not found: {}", p.display())));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Shared loading

/// Samples of one split: the manifest's own split tags when present, otherwise
/// an identity-disjoint split seeded by the run seed.
pub fn load_split(config: &RunConfig, split: Split) -> Result<(Vec<FaceSample>, PathBuf)> {
    let path = require(&config.paths.manifest, "manifest")?.to_path_buf();
    let manifest = load_manifest(&path, config.paths.manifest_format)?;
    let part: DatasetManifest = if manifest.records.iter().any(|r| r.split.is_some()) {
        manifest.with_split(split)
    } else {
        let (train, eval) = split_train_eval(&manifest, config.split.eval_fraction, config.seed)?;
        match split {
            Split::Train => train,
            Split::Eval => eval,
        }
    };
    if part.records.is_empty() {
        return Err(FqaError::Config(format!("{}: {split:?} split is empty", path.display())));
    }
    Ok((part.load_samples()?, path))
}

/// The configured model archive, or a seeded random extractor with no heads.
fn load_model(config: &RunConfig, inputs: &mut Vec<PathBuf>) -> Result<ModelArchive> {
    match &config.paths.weights {
        Some(_) => {
            let p = require(&config.paths.weights, "weights archive")?;
            inputs.push(p.to_path_buf());
            ModelArchive::load(p)
        }
        None => {
            warn!("no weights archive configured; using a random extractor seeded with {}", config.seed);
            Ok(ModelArchive { weights: MonetWeights::random(config.seed), head: None, variants: BTreeMap::new() })
        }
    }
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_augment(config: &RunConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("augment");
    let (samples, manifest_path) = load_split(config, Split::Train)?;
    mb.inputs.push(manifest_path);
    let backend = config.backends[0].build()?;
    let out = &config.paths.out_dir;
    ensure_dir(out)?;
    for &mode in &config.variants {
        let table = generate_label_rounds(
            &samples,
            backend.as_ref(),
            &config.augmentation,
            mode,
            config.labels.label_mode,
            &config.crop,
            config.labels.rounds,
            config.seed,
        )?;
        info!("{mode}: {} label rows, {} skipped", table.rows.len(), table.skipped);
        let path = out.join(labels_file(mode));
        table.write_jsonl(&path)?;
        mb.outputs.push(path);
        if config.labels.write_crops {
            let dir = out.join("augmented").join(mode.as_str());
            ensure_dir(&dir)?;
            let by_id: BTreeMap<&str, &FaceSample> = samples.iter().map(|s| (s.source_id.as_str(), s)).collect();
            for (i, row) in table.rows.iter().enumerate() {
                let img = replay(&config.crop.crop(by_id[row.sample_id.as_str()])?, &row.augmentation);
                let path = dir.join(format!("{i:06}_{}.png", sanitize(&row.sample_id)));
                img.save_png(&path)?;
                mb.outputs.push(path);
            }
        }
    }
    mb.write(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub variant: String,
    pub rows: usize,
    pub loss_trace: Vec<f64>,
    /// Correlation between SGD and closed-form ridge predictions.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle_r: Option<f64>,
}

pub fn cmd_train_head(config: &RunConfig, oracle_check: bool) -> Result<(RunManifest, Vec<HeadSummary>)> {
    let mut mb = ManifestBuilder::new("train-head");
    // Load (and so validate) the extractor before any work.
    let mut model = load_model(config, &mut mb.inputs)?;
    let (samples, manifest_path) = load_split(config, Split::Train)?;
    mb.inputs.push(manifest_path);
    let out = &config.paths.out_dir;
    ensure_dir(out)?;
    let mut summaries = Vec::new();
    for &mode in &config.variants {
        let path = config.labels_dir().join(labels_file(mode));
        if !path.exists() {
            return Err(FqaError::Config(format!("label table not found: {} (run `augment` first)", path.display())));
        }
        let table = LabelTable::read_jsonl(&path)?;
        mb.inputs.push(path);
        if table.rows.is_empty() {
            return Err(FqaError::invalid(format!("label table for {mode} is empty")));
        }
        let (features, labels) = table_features(&model.weights, &samples, &table, &config.crop)?;
        let trained = train_head_on_features(&features, &labels, &config.training)?;
        let oracle_r = if oracle_check {
            let cf = fit_closed_form(&features, &labels, config.training.weight_decay.max(1e-8))?;
            let a: Vec<f64> = features.iter().map(|f| trained.head.score(f)).collect();
            let b: Vec<f64> = features.iter().map(|f| cf.score(f)).collect();
            let r = crate::evaluation::pearson(&a, &b)?.r;
            info!("{mode}: SGD vs closed-form prediction r = {r:.6}");
            Some(r)
        } else {
            None
        };
        summaries.push(HeadSummary {
            variant: mode.variant_name().to_string(),
            rows: labels.len(),
            loss_trace: trained.loss_trace.clone(),
            oracle_r,
        });
        model.variants.insert(mode.variant_name().to_string(), trained.head);
    }
    let archive_path = out.join(MODEL_ARCHIVE);
    model.save(&archive_path)?;
    let summary_path = out.join(TRAIN_SUMMARY);
    fs::write(&summary_path, serde_json::to_string_pretty(&summaries)? + "\n")
        .map_err(|e| FqaError::io(&summary_path, e))?;
    mb.outputs.extend([archive_path, summary_path]);
    Ok((mb.write(config)?, summaries))
}

pub fn cmd_eval(config: &RunConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("eval");
    let model = load_model(config, &mut mb.inputs)?;
    let mut heads = model.variants.clone();
    if let Some(h) = &model.head {
        heads.entry("default".into()).or_insert_with(|| h.clone());
    }
    if heads.is_empty() {
        return Err(FqaError::Config("model archive holds no quality heads (run `train-head` first)".into()));
    }
    let (samples, manifest_path) = load_split(config, Split::Eval)?;
    mb.inputs.push(manifest_path);
    let models = EvalModels { weights: &model.weights, heads: &heads, baselines: config.eval.baselines };
    let mut records = Vec::new();
    let mut skipped = 0;
    for bc in &config.backends {
        if let Some(p) = &bc.embeddings {
            mb.inputs.push(p.clone());
        }
        let backend = bc.build()?;
        let run = run_attack_eval(
            &samples,
            &config.dataset,
            &models,
            backend.as_ref(),
            &config.eval.attacks,
            &config.crop,
            config.seed,
        )?;
        skipped += run.skipped.len();
        records.extend(run.records);
    }
    let mut names: Vec<String> = heads.keys().cloned().collect();
    if config.eval.baselines {
        names.extend(BASELINES.iter().map(|s| s.to_string()));
    }
    let report = build_report(&records, skipped, &names, config.eval.polarity_handling, config.seed, &config.hash());
    let out = &config.paths.out_dir;
    ensure_dir(out)?;
    mb.outputs.extend(write_report(&report, out)?);
    let records_path = out.join(RECORDS_JSONL);
    write_records(&records, &records_path)?;
    mb.outputs.push(records_path);
    mb.write(config)
}

pub fn cmd_pipeline_sim(config: &RunConfig) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("pipeline-sim");
    let scenario_path = require(&config.paths.scenario, "scenario")?.to_path_buf();
    let model = load_model(config, &mut mb.inputs)?;
    let scenario = read_scenario(&scenario_path)?;
    mb.inputs.push(scenario_path);
    let head = match model.variants.get(&config.pipeline.variant).or(model.head.as_ref()) {
        Some(h) => h.clone(),
        None => {
            warn!("no {} head in the model archive; scoring with a zero head", config.pipeline.variant);
            QualityHead::zeros()
        }
    };
    let scorer = MonetScorer { weights: &model.weights, head: &head };
    let mut pipeline = Pipeline::new(config.pipeline.params(), &scorer);
    let mut detector: Box<dyn Detector> = match config.detector.kind {
        DetectorKind::GroundTruth => Box::new(GroundTruthDetector::new(&scenario)?.with_noise(
            config.detector.jitter,
            config.detector.dropout,
            config.seed,
        )),
        DetectorKind::SlidingWindow => Box::new(SlidingWindowDetector::default()),
    };
    let result = simulate(&scenario, detector.as_mut(), &mut pipeline)?;
    let out = &config.paths.out_dir;
    ensure_dir(out)?;
    let sel = out.join(SELECTIONS_JSONL);
    write_selections(&sel, &result.selections)?;
    let timing = out.join(TIMING_JSON);
    fs::write(&timing, serde_json::to_string_pretty(&result.timing)? + "\n").map_err(|e| FqaError::io(&timing, e))?;
    mb.outputs.extend([sel, timing]);
    if config.pipeline.write_crops {
        let dir = out.join("crops");
        pipeline.write_selected_crops(&dir)?;
        mb.outputs.extend(result.selections.iter().map(|s| dir.join(&s.crop_path)));
    }
    info!("{} tracks, {} selections, {} face failures", result.tracks, result.selections.len(), result.failures.len());
    mb.write(config)
}

/// Re-render the CSV tables from an existing `report.json`.
pub fn cmd_report(config: &RunConfig, report_path: Option<&Path>) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("report");
    let out = &config.paths.out_dir;
    let path = report_path.map(Path::to_path_buf).unwrap_or_else(|| out.join(REPORT_JSON));
    if !path.exists() {
        return Err(FqaError::Config(format!("report not found: {}", path.display())));
    }
    let report = read_report(&path)?;
    mb.inputs.push(path);
    ensure_dir(out)?;
    mb.outputs.extend(write_csvs(&report, out)?);
    mb.write(config)
}

/// Write a synthetic dataset (images + manifest) and a walking-people scenario.
pub fn cmd_gen_synth(config: &RunConfig, identities: usize, per_identity: usize, people: usize, frames: u64) -> Result<RunManifest> {
    let mut mb = ManifestBuilder::new("gen-synth");
    let out = &config.paths.out_dir;
    ensure_dir(out)?;
    if identities > 0 && per_identity > 0 {
        mb.outputs.push(write_synthetic_dataset(out, identities, per_identity)?);
    }
    let p = &config.pipeline;
    let scenario = synthetic_scenario(people, frames, p.frame_width as f64, p.frame_height as f64, config.seed);
    let path = out.join("scenario.jsonl");
    write_scenario(&path, &scenario)?;
    mb.outputs.push(path);
    mb.write(config)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "fqa", version, about = "Face quality assessment toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Training mode(s): blur, rot, occ, bro.
    #[arg(long, global = true, value_delimiter = ',')]
    pub mode: Vec<TrainingMode>,
    /// Attack list, e.g. blur,occlusion,blur_occ.
    #[arg(long, global = true, value_delimiter = ',')]
    pub attacks: Vec<EvalAttack>,
    /// Recognition backend(s): oracle, oracle_distance, precomputed.
    #[arg(long, global = true, value_delimiter = ',')]
    pub backend: Vec<String>,
    /// Embedding archive for the precomputed backend.
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    /// Faces kept per track.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Augment the training split and write label tables.
    Augment,
    /// Train one quality head per variant on the label tables.
    TrainHead {
        /// Compare SGD predictions with the closed-form ridge solution.
        #[arg(long)]
        oracle_check: bool,
    },
    /// Attack evaluation and correlation report.
    Eval,
    /// Run the tracking / selection simulator over a scenario.
    PipelineSim,
    /// Re-render CSVs from report.json.
    Report {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and scenario.
    GenSynth {
        #[arg(long, default_value_t = 40)]
        identities: usize,
        #[arg(long, default_value_t = 5)]
        per_identity: usize,
        #[arg(long, default_value_t = 3)]
        people: usize,
        #[arg(long, default_value_t = 60)]
        frames: u64,
    },
}

fn backend_from_flag(name: &str, embeddings: &Option<PathBuf>) -> Result<BackendConfig> {
    match name {
        "oracle" => Ok(BackendConfig::oracle()),
        "oracle_distance" => Ok(BackendConfig { metric: Metric::CosineDistance, ..BackendConfig::oracle() }),
        "precomputed" => Ok(BackendConfig {
            kind: BackendKind::Precomputed,
            name: None,
            metric: Metric::Cosine,
            embeddings: embeddings.clone(),
        }),
        other => Err(FqaError::Config(format!("unknown backend {other} (expected oracle, oracle_distance, precomputed)"))),
    }
}

/// Config file (or defaults) with command-line flags applied on top.
pub fn effective_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => {
            if !p.exists() {
                return Err(FqaError::Config(format!("config file not found: {}", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        c.seed = s;
    }
    if let Some(o) = &g.out {
        c.paths.out_dir = o.clone();
    }
    if let Some(m) = &g.manifest {
        c.paths.manifest = Some(m.clone());
    }
    if let Some(w) = &g.weights {
        c.paths.weights = Some(w.clone());
    }
    if let Some(s) = &g.scenario {
        c.paths.scenario = Some(s.clone());
    }
    if !g.mode.is_empty() {
        c.variants = g.mode.clone();
    }
    if !g.attacks.is_empty() {
        c.eval.attacks = g.attacks.clone();
    }
    if !g.backend.is_empty() {
        c.backends = g.backend.iter().map(|b| backend_from_flag(b, &g.embeddings)).collect::<Result<_>>()?;
    }
    if let Some(k) = g.k {
        c.pipeline.k = k;
    }
    c.validate()?;
    Ok(c)
}

/// Cap rayon's pool at `FQA_NUM_WORKERS` threads when set.
pub fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| FqaError::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
        // A second initialization (e.g. in tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_workers()?;
    let config = effective_config(&cli.global)?;
    match &cli.command {
        Command::Augment => cmd_augment(&config).map(drop),
        Command::TrainHead { oracle_check } => {
            let (_, summaries) = cmd_train_head(&config, *oracle_check)?;
            for s in &summaries {
                let last = s.loss_trace.last().copied().unwrap_or(f64::NAN);
                match s.oracle_r {
                    Some(r) => println!("{}: {} rows, final loss {last:.6}, closed-form r {r:.6}", s.variant, s.rows),
                    None => println!("{}: {} rows, final loss {last:.6}", s.variant, s.rows),
                }
            }
            Ok(())
        }
        Command::Eval => cmd_eval(&config).map(drop),
        Command::PipelineSim => cmd_pipeline_sim(&config).map(drop),
        Command::Report { report } => cmd_report(&config, report.as_deref()).map(drop),
        Command::GenSynth { identities, per_identity, people, frames } => {
            cmd_gen_synth(&config, *identities, *per_identity, *people, *frames).map(drop)
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
