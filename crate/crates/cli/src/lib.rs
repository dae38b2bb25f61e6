//! Subcommand implementations behind the `vlnaug` binary.
//!
//! Every command reads its inputs from files named in a [`RunConfig`] and
//! writes its outputs under `out`. Results are merged in id order, so the
//! worker count never changes output bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use vlnaug_core::action_predictor::{predict_sequence_detailed, DiagnosticRecord, RotationConfig, TurnLabel};
use vlnaug_core::detection_store::{ClassFilter, DetectionStore};
use vlnaug_core::jsonl;
use vlnaug_core::navgraph_metrics::{derive_actions, evaluate_batch, EvalRecord, NavGraph};
use vlnaug_core::pretrain_data::{build_pretrain, write_pretrain, MlmConfig, PretrainConfig};
use vlnaug_core::template_engine::{
    compare_with_reference, extract_templates, lm_filter, Category, ChunkAnnotation, CorpusRecord, LmFilterConfig,
    ScoreFile, SentenceScorer, SubprocessScorer, TemplateBank, DEFAULT_PROBE_OBJECTS,
};
use vlnaug_core::trajectory_builder::{
    load_clips, run_pipeline, ImageFileLoader, PipelineConfig, SamplingConfig, VideoClip, VlnSample,
};
use vlnaug_core::FrameImage;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Input(#[from] vlnaug_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// How a command that ran to completion went.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some units failed; the report lists them.
    Partial,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Partial => 1,
        }
    }

    fn from_failures(n: usize) -> Self {
        if n == 0 {
            Outcome::Success
        } else {
            Outcome::Partial
        }
    }
}

pub type CliResult = Result<Outcome, CliError>;

/// Everything a run needs. Built from defaults, then a `key = value` file,
/// then command-line overrides.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: PathBuf,

    pub corpus: Option<PathBuf>,
    pub corpus_id: Option<String>,
    pub annotations: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub scorer_cmd: Option<String>,
    pub keep_fraction: f64,
    pub probe_objects: Vec<String>,
    pub compare_reference: bool,

    pub bank: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub blocklist: Option<PathBuf>,
    pub clips: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub eval_batch: Option<PathBuf>,

    pub interval_s: f64,
    pub length_min: usize,
    pub length_max: usize,
    pub window_deg: f64,
    pub shift_deg: f64,
    pub frame_fov_deg: f64,
    pub tie_epsilon: f64,
    pub downscale_width: Option<usize>,
    pub fwd_threshold_deg: f64,
    pub mask_prob: f64,
    pub shard_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampling = SamplingConfig::default();
        let rotation = RotationConfig::default();
        let pretrain = PretrainConfig::default();
        Self {
            seed: 0,
            workers: None,
            out: PathBuf::from("out"),
            corpus: None,
            corpus_id: None,
            annotations: None,
            scores: None,
            scorer_cmd: None,
            keep_fraction: LmFilterConfig::default().keep_fraction,
            probe_objects: DEFAULT_PROBE_OBJECTS.iter().map(|s| s.to_string()).collect(),
            compare_reference: false,
            bank: None,
            detections: None,
            blocklist: None,
            clips: None,
            samples: None,
            graph: None,
            eval_batch: None,
            interval_s: sampling.interval_s,
            length_min: sampling.length_range.0,
            length_max: sampling.length_range.1,
            window_deg: rotation.window_deg,
            shift_deg: rotation.shift_deg,
            frame_fov_deg: rotation.frame_fov_deg,
            tie_epsilon: rotation.tie_epsilon,
            downscale_width: rotation.downscale_width,
            fwd_threshold_deg: vlnaug_core::navgraph_metrics::DEFAULT_FWD_THRESHOLD_DEG,
            mask_prob: pretrain.mlm.mask_prob,
            shard_size: pretrain.shard_size,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    /// Sets one key. Relative paths are joined onto `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), CliError> {
        let path = || {
            let p = PathBuf::from(value);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        match key {
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = Some(parse(key, value)?),
            "out" => self.out = path(),
            "corpus" => self.corpus = Some(path()),
            "corpus_id" => self.corpus_id = Some(value.to_string()),
            "annotations" => self.annotations = Some(path()),
            "scores" => self.scores = Some(path()),
            "scorer_cmd" => self.scorer_cmd = Some(value.to_string()),
            "keep_fraction" => self.keep_fraction = parse(key, value)?,
            "probe_objects" => {
                self.probe_objects = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "compare_reference" => self.compare_reference = parse(key, value)?,
            "bank" => self.bank = Some(path()),
            "detections" => self.detections = Some(path()),
            "blocklist" => self.blocklist = Some(path()),
            "clips" => self.clips = Some(path()),
            "samples" => self.samples = Some(path()),
            "graph" => self.graph = Some(path()),
            "eval_batch" => self.eval_batch = Some(path()),
            "interval_s" => self.interval_s = parse(key, value)?,
            "length_min" => self.length_min = parse(key, value)?,
            "length_max" => self.length_max = parse(key, value)?,
            "window_deg" => self.window_deg = parse(key, value)?,
            "shift_deg" => self.shift_deg = parse(key, value)?,
            "frame_fov_deg" => self.frame_fov_deg = parse(key, value)?,
            "tie_epsilon" => self.tie_epsilon = parse(key, value)?,
            "downscale_width" => self.downscale_width = Some(parse(key, value)?),
            "fwd_threshold_deg" => self.fwd_threshold_deg = parse(key, value)?,
            "mask_prob" => self.mask_prob = parse(key, value)?,
            "shard_size" => self.shard_size = parse(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment. Relative paths in
    /// the file are resolved against the file's directory.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("{}:{}: expected key = value", path.display(), n + 1))
            })?;
            self.set(key.trim(), value.trim(), Some(base))
                .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim(), None)
    }

    pub fn rotation(&self) -> RotationConfig {
        RotationConfig {
            window_deg: self.window_deg,
            shift_deg: self.shift_deg,
            frame_fov_deg: self.frame_fov_deg,
            tie_epsilon: self.tie_epsilon,
            downscale_width: self.downscale_width,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            sampling: SamplingConfig {
                interval_s: self.interval_s,
                length_range: (self.length_min, self.length_max),
            },
            rotation: self.rotation(),
        }
    }

    pub fn lm_filter(&self) -> LmFilterConfig {
        LmFilterConfig {
            probe_objects: self.probe_objects.clone(),
            keep_fraction: self.keep_fraction,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            mlm: MlmConfig {
                mask_prob: self.mask_prob,
                ..MlmConfig::default()
            },
            shard_size: self.shard_size,
        }
    }

    /// Checks every tunable against its module's rules.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: vlnaug_core::Error| CliError::Config(e.to_string());
        self.pipeline().sampling.validate().map_err(bad)?;
        self.rotation().validate().map_err(bad)?;
        self.lm_filter().validate().map_err(bad)?;
        self.pretrain().validate().map_err(bad)?;
        if !(self.fwd_threshold_deg > 0.0 && self.fwd_threshold_deg <= 180.0) {
            return Err(CliError::Config(format!(
                "fwd_threshold_deg must be in (0, 180], got {}",
                self.fwd_threshold_deg
            )));
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Config(format!("`{key}` is required for this command")))
    }

    fn out_file(&self, name: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| vlnaug_core::Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        Ok(self.out.join(name))
    }
}

/// Runs `f` on a pool with the configured number of threads.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

struct ZeroScorer;

impl SentenceScorer for ZeroScorer {
    fn score(&mut self, _: &str, _: &str, _: &str) -> vlnaug_core::Result<f64> {
        Ok(0.0)
    }

    fn describe(&self) -> String {
        "none".into()
    }
}

fn scorer_for(cfg: &RunConfig) -> Result<Box<dyn SentenceScorer>, CliError> {
    if let Some(path) = &cfg.scores {
        return Ok(Box::new(ScoreFile::load(path)?));
    }
    if let Some(cmd) = &cfg.scorer_cmd {
        return Ok(Box::new(SubprocessScorer::spawn(cmd)?));
    }
    if cfg.keep_fraction >= 1.0 {
        // nothing is cut, so losses are irrelevant
        return Ok(Box::new(ZeroScorer));
    }
    Err(CliError::Config(
        "a scorer (`scores` or `scorer_cmd`) is required when keep_fraction < 1".into(),
    ))
}

#[derive(Serialize)]
struct ExtractionSummary {
    sentences: usize,
    missing_annotations: usize,
    rejected: BTreeMap<String, usize>,
    candidates: BTreeMap<Category, usize>,
    retained: BTreeMap<Category, usize>,
    dropped: usize,
}

/// Writes `bank.json` and `extraction.json`.
pub fn cmd_extract_templates(cfg: &RunConfig) -> CliResult {
    let corpus_path = cfg.require(&cfg.corpus, "corpus")?;
    let annotations_path = cfg.require(&cfg.annotations, "annotations")?;
    let corpus: Vec<CorpusRecord> = jsonl::read_records(corpus_path)?;
    let annotations: Vec<ChunkAnnotation> = jsonl::read_records(annotations_path)?;
    let mut scorer = scorer_for(cfg)?;

    let extraction = extract_templates(&corpus, &annotations)?;
    let mut bank = lm_filter(&extraction.candidates, scorer.as_mut(), &cfg.lm_filter())?;
    bank.metadata.corpus_id = cfg.corpus_id.clone().unwrap_or_else(|| {
        corpus_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });

    let bank_path = cfg.out_file("bank.json")?;
    std::fs::write(&bank_path, bank.to_json()?).map_err(|e| vlnaug_core::Error::Io {
        path: bank_path.clone(),
        source: e,
    })?;
    let summary = ExtractionSummary {
        sentences: extraction.sentences,
        missing_annotations: extraction.missing_annotations,
        rejected: extraction
            .rejected
            .iter()
            .map(|(r, n)| (format!("{r:?}"), *n))
            .collect(),
        candidates: bank.metadata.candidates.clone(),
        retained: Category::ALL.iter().map(|&c| (c, bank.count(c))).collect(),
        dropped: bank.metadata.dropped.len(),
    };
    jsonl::write_json(&cfg.out_file("extraction.json")?, &summary)?;

    for c in Category::ALL {
        println!(
            "{c}: {} candidates, {} retained",
            bank.metadata.candidates.get(&c).copied().unwrap_or(0),
            bank.count(c)
        );
    }
    if cfg.compare_reference {
        let comparison = compare_with_reference(&bank);
        for row in &comparison {
            println!(
                "reference {}: observed {} vs {} ({:.1}% off){}",
                row.group,
                row.observed,
                row.reference,
                100.0 * row.relative_deviation,
                if row.flagged { " REVIEW" } else { "" }
            );
        }
        jsonl::write_json(&cfg.out_file("reference_comparison.json")?, &comparison)?;
    }
    Ok(Outcome::from_failures(bank.metadata.dropped.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActionRecord {
    pub video_id: String,
    pub from_frame: usize,
    pub to_frame: usize,
    pub label: TurnLabel,
}

#[derive(Serialize)]
struct PredictReport {
    clips_in: usize,
    clips_labelled: usize,
    labels: BTreeMap<TurnLabel, usize>,
    failures: Vec<BTreeMap<&'static str, String>>,
}

fn label_clip(clip: &VideoClip, rotation: &RotationConfig) -> vlnaug_core::Result<(Vec<ActionRecord>, Vec<DiagnosticRecord>)> {
    let frames = clip
        .frames()
        .iter()
        .map(|f| FrameImage::load(&clip.resolve(f)))
        .collect::<vlnaug_core::Result<Vec<_>>>()?;
    let predictions = predict_sequence_detailed(&frames, rotation)?;
    let mut actions = Vec::with_capacity(predictions.len());
    let mut diagnostics = Vec::with_capacity(predictions.len() * 3);
    for (pair, p) in clip.frames().windows(2).zip(&predictions) {
        actions.push(ActionRecord {
            video_id: clip.video_id.clone(),
            from_frame: pair[0].index,
            to_frame: pair[1].index,
            label: p.label,
        });
        diagnostics.extend(p.diagnostics(Some(&clip.video_id), pair[0].index));
    }
    Ok((actions, diagnostics))
}

/// Labels every consecutive frame pair of every clip. Writes
/// `actions.jsonl`, `diagnostics.jsonl` and `predict_report.json`.
pub fn cmd_predict_actions(cfg: &RunConfig) -> CliResult {
    let mut clips = load_clips(cfg.require(&cfg.clips, "clips")?)?;
    clips.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let rotation = cfg.rotation();
    let results = with_workers(cfg.workers, || {
        clips
            .par_iter()
            .map(|c| label_clip(c, &rotation))
            .collect::<Vec<_>>()
    })?;

    let mut actions = Vec::new();
    let mut diagnostics = Vec::new();
    let mut report = PredictReport {
        clips_in: clips.len(),
        clips_labelled: 0,
        labels: TurnLabel::MOVES.iter().map(|&l| (l, 0)).collect(),
        failures: Vec::new(),
    };
    for (clip, result) in clips.iter().zip(results) {
        match result {
            Ok((a, d)) => {
                report.clips_labelled += 1;
                for r in &a {
                    *report.labels.entry(r.label).or_default() += 1;
                }
                actions.extend(a);
                diagnostics.extend(d);
            }
            Err(e) => {
                log::warn!("clip {} not labelled: {e}", clip.video_id);
                report.failures.push(BTreeMap::from([
                    ("video_id", clip.video_id.clone()),
                    ("reason", e.to_string()),
                ]));
            }
        }
    }
    jsonl::write_records(&cfg.out_file("actions.jsonl")?, &actions)?;
    jsonl::write_records(&cfg.out_file("diagnostics.jsonl")?, &diagnostics)?;
    jsonl::write_json(&cfg.out_file("predict_report.json")?, &report)?;
    println!(
        "{} of {} clips labelled, {} pairs",
        report.clips_labelled,
        report.clips_in,
        actions.len()
    );
    Ok(Outcome::from_failures(report.failures.len()))
}

fn load_detections(cfg: &RunConfig) -> Result<DetectionStore, CliError> {
    let filter = match &cfg.blocklist {
        Some(p) => ClassFilter::from_file(p)?,
        None => ClassFilter::default_blocklist(),
    };
    let store = match &cfg.detections {
        Some(p) => DetectionStore::load(p)?,
        None => {
            log::warn!("no detections given; only slotless templates can be used");
            DetectionStore::default()
        }
    };
    Ok(store.filtered(&filter))
}

/// Full clip-to-sample pipeline. Writes `samples.jsonl` and `report.json`.
pub fn cmd_generate(cfg: &RunConfig) -> CliResult {
    let clips = load_clips(cfg.require(&cfg.clips, "clips")?)?;
    let bank = TemplateBank::load(cfg.require(&cfg.bank, "bank")?)?;
    let detections = load_detections(cfg)?;
    let pipeline = cfg.pipeline();
    let (samples, report) = with_workers(cfg.workers, || {
        run_pipeline(&clips, &bank, &detections, &pipeline, cfg.seed, &ImageFileLoader)
    })?;
    jsonl::write_records(&cfg.out_file("samples.jsonl")?, &samples)?;
    jsonl::write_json(&cfg.out_file("report.json")?, &report)?;
    println!(
        "{} clips: {} samples, {} rejected",
        report.clips_in, report.samples_out, report.rejected
    );
    Ok(Outcome::from_failures(report.rejected))
}

/// Proxy-task datasets from generated samples, written under `out/pretrain/`.
pub fn cmd_build_pretrain(cfg: &RunConfig) -> CliResult {
    let samples_path = cfg.samples.clone().unwrap_or_else(|| cfg.out.join("samples.jsonl"));
    let samples: Vec<VlnSample> = jsonl::read_records(&samples_path)?;
    let pretrain = cfg.pretrain();
    let out = with_workers(cfg.workers, || build_pretrain(&samples, &pretrain, cfg.seed))??;
    write_pretrain(&cfg.out.join("pretrain"), &out)?;
    let m = &out.manifest;
    println!(
        "{} samples in {} shards: {} mlm, {} itm, {} nap, {} skipped",
        m.samples_in,
        m.shards,
        m.mlm,
        m.itm,
        m.nap,
        m.skipped.len()
    );
    Ok(Outcome::from_failures(m.skipped.len()))
}

#[derive(Serialize)]
struct GoldActions {
    sample_id: String,
    actions: Vec<TurnLabel>,
}

/// TC/SPD/SED per record plus means. Writes `metrics.jsonl`,
/// `metrics_summary.json` and the heading-derived actions of every gold
/// trajectory to `gold_actions.jsonl`.
pub fn cmd_evaluate(cfg: &RunConfig) -> CliResult {
    let graph = NavGraph::load(cfg.require(&cfg.graph, "graph")?)?;
    let records: Vec<EvalRecord> = jsonl::read_records(cfg.require(&cfg.eval_batch, "eval_batch")?)?;
    let (results, summary) = evaluate_batch(&graph, &records);
    let gold: Vec<GoldActions> = records
        .iter()
        .filter_map(|r| {
            derive_actions(&graph, &r.gold, cfg.fwd_threshold_deg)
                .ok()
                .map(|actions| GoldActions {
                    sample_id: r.sample_id.clone(),
                    actions,
                })
        })
        .collect();
    jsonl::write_records(&cfg.out_file("metrics.jsonl")?, &results)?;
    jsonl::write_json(&cfg.out_file("metrics_summary.json")?, &summary)?;
    jsonl::write_records(&cfg.out_file("gold_actions.jsonl")?, &gold)?;
    println!(
        "{} evaluated, {} failed: TC {:.4}  SPD {:.4}  SED {:.4}",
        summary.evaluated, summary.failed, summary.tc, summary.spd, summary.sed
    );
    Ok(Outcome::from_failures(summary.failed))
}
