//! End-to-end annotation: sample, benchmark, aggregate, select.
//!
//! An [`AnnotationConfig`] is a single JSON file. Relative paths inside it
//! (scene, cache directory, outputs) are resolved against the directory that
//! contains the file. Every field except `sequence_id`, `sequence_length`,
//! `class_names` and `evaluator` has a default.
//!
//! The report separates deterministic content from `run_stats` (timings,
//! evaluator launches, parallelism). Everything before `run_stats` is a pure
//! function of the config and the evaluator's behavior.

use std::collections::HashMap;
use std::error::Error;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{
    evenly_spaced_thresholds, finalize_multiclass, finalize_singleclass, AggregationParams, CandidateRecord,
    MaskScorer, ScoredSample, ScorerError,
};
use crate::evaluation::{EvaluationError, EvaluationRecord, Evaluator, EvaluatorKind, EvaluatorSpec};
use crate::mask::{check_class_names, TemporalMask};
use crate::mask_space::{build_count_table, is_member, sample_multiclass, MaskSpaceParams};
use crate::metrics::{EvalResult, UsmParams};
use crate::sim::SceneScript;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Pipeline stage a failure belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Evaluator,
    Sampling,
    Evaluation,
    Aggregation,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Evaluator => "evaluator",
            Stage::Sampling => "sampling",
            Stage::Evaluation => "evaluation",
            Stage::Aggregation => "aggregation",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug)]
pub struct PipelineError {
    pub stage: Stage,
    pub source: Box<dyn Error + Send + Sync>,
}

impl PipelineError {
    fn new(stage: Stage, source: impl Into<Box<dyn Error + Send + Sync>>) -> Self {
        Self {
            stage,
            source: source.into(),
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.source)
    }
}

impl Error for PipelineError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        Some(&*self.source)
    }
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::new(Stage::Config, message.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "SamplingConfig::default_q")]
    pub q: usize,
    #[serde(default = "SamplingConfig::default_block")]
    pub k0: usize,
    #[serde(default = "SamplingConfig::default_block")]
    pub k1: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SamplingConfig {
    fn default_q() -> usize {
        200
    }

    fn default_block() -> usize {
        25
    }
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            q: Self::default_q(),
            k0: Self::default_block(),
            k1: Self::default_block(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsmConfig {
    #[serde(default = "UsmConfig::default_lambda")]
    pub lambda: f64,
}

impl UsmConfig {
    fn default_lambda() -> f64 {
        10.0
    }
}

impl Default for UsmConfig {
    fn default() -> Self {
        Self {
            lambda: Self::default_lambda(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    #[serde(default = "AggregationConfig::default_sigma_a")]
    pub sigma_a: f64,
    #[serde(default = "AggregationConfig::default_sigma_r")]
    pub sigma_r: f64,
    #[serde(default = "AggregationConfig::default_threshold_count")]
    pub threshold_count: usize,
}

impl AggregationConfig {
    fn default_sigma_a() -> f64 {
        0.01
    }

    fn default_sigma_r() -> f64 {
        0.05
    }

    fn default_threshold_count() -> usize {
        101
    }
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            sigma_a: Self::default_sigma_a(),
            sigma_r: Self::default_sigma_r(),
            threshold_count: Self::default_threshold_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorBackend {
    InProcessSimulator { scene: PathBuf },
    Subprocess { command_template: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorConfig {
    #[serde(flatten)]
    pub backend: EvaluatorBackend,
    #[serde(default = "EvaluatorConfig::default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "EvaluatorConfig::default_timeout")]
    pub timeout_secs: f64,
}

impl EvaluatorConfig {
    fn default_repetitions() -> u32 {
        crate::evaluation::DEFAULT_REPETITIONS
    }

    fn default_timeout() -> f64 {
        crate::evaluation::DEFAULT_TIMEOUT_SECS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "OutputConfig::default_mask")]
    pub mask: PathBuf,
    #[serde(default = "OutputConfig::default_report")]
    pub report: PathBuf,
}

impl OutputConfig {
    fn default_mask() -> PathBuf {
        "final_mask.csv".into()
    }

    fn default_report() -> PathBuf {
        "report.json".into()
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            mask: Self::default_mask(),
            report: Self::default_report(),
        }
    }
}

fn default_parallelism() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationConfig {
    pub sequence_id: String,
    pub sequence_length: usize,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub usm: UsmConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    pub evaluator: EvaluatorConfig,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// `None` disables the on-disk cache.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl AnnotationConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| config_err(format!("invalid config: {e}")))
    }

    /// Pretty JSON with every default written out.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }

    /// Reads a config and returns it with the directory relative paths refer to.
    pub fn load(path: &Path) -> Result<(Self, PathBuf), PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_json(&text)?, base))
    }

    pub fn mask_space(&self) -> Result<MaskSpaceParams, PipelineError> {
        MaskSpaceParams::new(self.sequence_length, self.sampling.k0, self.sampling.k1)
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn usm_params(&self) -> Result<UsmParams, PipelineError> {
        UsmParams::new(self.usm.lambda).map_err(|e| config_err(e.to_string()))
    }

    pub fn aggregation_params(&self) -> Result<AggregationParams, PipelineError> {
        let a = &self.aggregation;
        AggregationParams::new(a.sigma_a, a.sigma_r, evenly_spaced_thresholds(a.threshold_count))
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.sequence_id.is_empty() {
            return Err(config_err("sequence_id must not be empty"));
        }
        check_class_names(&self.class_names).map_err(|e| config_err(e.to_string()))?;
        if self.sampling.q < 2 {
            return Err(config_err(format!(
                "sampling.q must be at least 2 (aggregation compares pairs of samples), got {}",
                self.sampling.q
            )));
        }
        let (l, k0, k1) = (self.sequence_length, self.sampling.k0, self.sampling.k1);
        self.mask_space()?;
        if l < k0 + k1 {
            return Err(config_err(format!(
                "sequence has {l} frames but k0 + k1 = {}; use smaller block sizes, e.g. k0 = k1 = {}",
                k0 + k1,
                (l / 4).max(1)
            )));
        }
        self.usm_params()?;
        self.aggregation_params()?;
        if self.parallelism == 0 {
            return Err(config_err("parallelism must be at least 1"));
        }
        self.evaluator_spec()?
            .validate()
            .map_err(|e| config_err(e.to_string()))
    }

    pub fn evaluator_spec(&self) -> Result<EvaluatorSpec, PipelineError> {
        let e = &self.evaluator;
        let kind = match &e.backend {
            EvaluatorBackend::InProcessSimulator { .. } => EvaluatorKind::InProcessSimulator,
            EvaluatorBackend::Subprocess { command_template } => EvaluatorKind::Subprocess {
                command_template: command_template.clone(),
            },
        };
        Ok(EvaluatorSpec {
            kind,
            repetitions: e.repetitions,
            usm: self.usm_params()?,
            base_seed: e.base_seed,
            timeout_secs: e.timeout_secs,
        })
    }

    /// Result-relevant part of the config: scheduling, caching, output
    /// locations, timeout and the scene's location are dropped (the scene's
    /// content enters through the evaluator digest).
    pub fn semantic_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        for key in ["parallelism", "cache_dir", "output"] {
            obj.remove(key);
        }
        let ev = obj["evaluator"].as_object_mut().expect("object");
        ev.remove("timeout_secs");
        ev.remove("scene");
        v
    }
}

/// One class column of the final mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskColumnReport {
    pub class: String,
    pub bits: String,
    pub masked_frames: usize,
    /// Whether the column satisfies the minimum run lengths used for sampling.
    pub in_mask_space: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub all_zeros: EvalResult,
    pub all_ones: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub evaluator_digest: String,
    pub sampling_seed: u64,
    pub evaluator_base_seed: u64,
    /// `|E(l, k0, k1)|` in decimal.
    pub mask_space_size: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub parallelism: usize,
    pub evaluator_executions: usize,
    pub distinct_masks: usize,
    pub wall_clock_secs: f64,
    pub sampling_secs: f64,
    pub evaluation_secs: f64,
    pub aggregation_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationReport {
    pub sequence_id: String,
    pub frames: usize,
    pub class_names: Vec<String>,
    pub final_mask: Vec<MaskColumnReport>,
    pub final_mask_digest: String,
    pub final_score: EvalResult,
    /// Set when the aggregated mask lost to a trivial mask beyond the band.
    pub fallback: Option<String>,
    pub equivalence_band: f64,
    pub baselines: Baselines,
    pub sample_scores: Vec<f64>,
    /// Classes whose score field was constant.
    pub degenerate_classes: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    pub provenance: Provenance,
    pub run_stats: RunStats,
}

impl AnnotationReport {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

#[derive(Debug, Clone)]
pub struct Annotation {
    pub mask: TemporalMask,
    pub report: AnnotationReport,
    pub mask_path: PathBuf,
    pub report_path: PathBuf,
}

/// Batch scorer with an in-memory memo in front of the (optionally cached)
/// evaluator, so a mask is evaluated at most once per run.
struct Scorer<'a> {
    evaluator: &'a Evaluator,
    cache_dir: Option<&'a Path>,
    sequence_id: &'a str,
    parallelism: usize,
    memo: HashMap<String, EvaluationRecord>,
}

impl Scorer<'_> {
    fn records(&mut self, masks: &[TemporalMask]) -> Result<Vec<EvaluationRecord>, EvaluationError> {
        let mut pending: Vec<TemporalMask> = Vec::new();
        let mut pending_digests: Vec<String> = Vec::new();
        for m in masks {
            let d = m.digest();
            if !self.memo.contains_key(&d) && !pending_digests.contains(&d) {
                pending.push(m.clone());
                pending_digests.push(d);
            }
        }
        if !pending.is_empty() {
            let results = self
                .evaluator
                .evaluate_batch(self.cache_dir, self.sequence_id, &pending, self.parallelism)?;
            for (d, r) in pending_digests.into_iter().zip(results) {
                self.memo.insert(d, r?);
            }
        }
        Ok(masks.iter().map(|m| self.memo[&m.digest()].clone()).collect())
    }
}

impl MaskScorer for Scorer<'_> {
    fn score(&mut self, masks: &[TemporalMask]) -> Result<Vec<f64>, ScorerError> {
        Ok(self.records(masks)?.iter().map(EvaluationRecord::score).collect())
    }
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn write_output(path: &Path, text: &str) -> Result<(), PipelineError> {
    let out = |e: std::io::Error| PipelineError::new(Stage::Output, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(out)?;
    }
    fs::write(path, text).map_err(out)
}

fn build_evaluator(config: &AnnotationConfig, base_dir: &Path) -> Result<Evaluator, PipelineError> {
    let spec = config.evaluator_spec()?;
    let scene = match &config.evaluator.backend {
        EvaluatorBackend::InProcessSimulator { scene } => {
            let path = resolve(base_dir, scene);
            let scene = SceneScript::load(&path).map_err(|e| PipelineError::new(Stage::Evaluator, e))?;
            if scene.sequence_id != config.sequence_id {
                return Err(config_err(format!(
                    "scene {} describes sequence {:?}, config names {:?}",
                    path.display(),
                    scene.sequence_id,
                    config.sequence_id
                )));
            }
            if scene.len() != config.sequence_length || scene.class_names != config.class_names {
                return Err(config_err(format!(
                    "scene has {} frames and classes {:?}; config expects {} frames and {:?}",
                    scene.len(),
                    scene.class_names,
                    config.sequence_length,
                    config.class_names
                )));
            }
            Some(scene)
        }
        EvaluatorBackend::Subprocess { .. } => None,
    };
    Evaluator::new(spec, scene).map_err(|e| PipelineError::new(Stage::Evaluator, e))
}

/// Runs the whole pipeline and writes the final mask CSV and report JSON.
pub fn annotate(config: &AnnotationConfig, base_dir: &Path) -> Result<Annotation, PipelineError> {
    let started = Instant::now();
    config.validate()?;
    let space = config.mask_space()?;
    let agg_params = config.aggregation_params()?;
    let evaluator = build_evaluator(config, base_dir)?;
    let cache_dir = config.cache_dir.as_ref().map(|d| resolve(base_dir, d));
    let (l, names) = (config.sequence_length, config.class_names.clone());

    let t = Instant::now();
    let table = build_count_table(space);
    let samples = sample_multiclass(&table, &names, config.sampling.q, config.sampling.seed)
        .map_err(|e| PipelineError::new(Stage::Sampling, e))?;
    let sampling_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut scorer = Scorer {
        evaluator: &evaluator,
        cache_dir: cache_dir.as_deref(),
        sequence_id: &config.sequence_id,
        parallelism: config.parallelism,
        memo: HashMap::new(),
    };
    let eval_err = |e| PipelineError::new(Stage::Evaluation, e);
    let sample_records = scorer.records(&samples).map_err(eval_err)?;
    let zeros = TemporalMask::zeros(names.clone(), l).map_err(|e| config_err(e.to_string()))?;
    let ones = TemporalMask::ones(names.clone(), l).map_err(|e| config_err(e.to_string()))?;
    let base = scorer.records(&[zeros.clone(), ones.clone()]).map_err(eval_err)?;
    let baselines = Baselines {
        all_zeros: base[0].median,
        all_ones: base[1].median,
    };
    let evaluation_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let scored: Vec<ScoredSample> = samples
        .into_iter()
        .zip(&sample_records)
        .map(|(mask, r)| ScoredSample { mask, score: r.score() })
        .collect();
    let agg_err = |e| PipelineError::new(Stage::Aggregation, e);
    let (mut mask, candidates, degenerate_classes) = if names.len() == 1 {
        let f = finalize_singleclass(&scored, &agg_params, &mut scorer).map_err(agg_err)?;
        let degenerate = if f.degenerate { names.clone() } else { vec![] };
        (f.mask, f.candidates, degenerate)
    } else {
        let f = finalize_multiclass(&scored, &agg_params, &mut scorer).map_err(agg_err)?;
        let degenerate = f
            .per_class
            .iter()
            .zip(&names)
            .filter(|(p, _)| p.degenerate)
            .map(|(_, n)| n.clone())
            .collect();
        let candidates = f.per_class.into_iter().flat_map(|p| p.candidates).collect();
        (f.mask, candidates, degenerate)
    };
    let mut final_score = scorer.records(std::slice::from_ref(&mask)).map_err(eval_err)?[0].median;
    let aggregation_secs = t.elapsed().as_secs_f64();

    let best_trivial = baselines.all_zeros.usm.max(baselines.all_ones.usm);
    let band = agg_params.band(final_score.usm.max(best_trivial));
    let mut fallback = None;
    if final_score.usm < best_trivial - band {
        // only reachable when per-class winners interact badly
        let (name, m, s) = if baselines.all_ones.usm > baselines.all_zeros.usm {
            ("all_ones", ones, baselines.all_ones)
        } else {
            ("all_zeros", zeros, baselines.all_zeros)
        };
        log::warn!("aggregated mask scored {} below the {name} baseline; falling back", final_score.usm);
        fallback = Some(name.to_owned());
        mask = m;
        final_score = s;
    }

    let final_mask = (0..names.len())
        .map(|c| {
            let column = mask.column(c);
            Ok(MaskColumnReport {
                class: names[c].clone(),
                bits: mask.column_bits(c),
                masked_frames: column.iter().filter(|&&v| v).count(),
                in_mask_space: is_member(&column, &space).map_err(|e| config_err(e.to_string()))?,
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;

    let semantic = config.semantic_json();
    let report = AnnotationReport {
        sequence_id: config.sequence_id.clone(),
        frames: l,
        class_names: names,
        final_mask,
        final_mask_digest: mask.digest(),
        final_score,
        fallback,
        equivalence_band: band,
        baselines,
        sample_scores: sample_records.iter().map(EvaluationRecord::score).collect(),
        degenerate_classes,
        candidates,
        provenance: Provenance {
            tool_version: TOOL_VERSION.to_owned(),
            config_digest: sha256_hex(semantic.to_string().as_bytes()),
            config: semantic,
            evaluator_digest: evaluator.spec_digest().to_owned(),
            sampling_seed: config.sampling.seed,
            evaluator_base_seed: config.evaluator.base_seed,
            mask_space_size: table.total().to_string(),
        },
        run_stats: RunStats {
            parallelism: config.parallelism,
            evaluator_executions: evaluator.executions(),
            distinct_masks: scorer.memo.len(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            sampling_secs,
            evaluation_secs,
            aggregation_secs,
        },
    };

    let mask_path = resolve(base_dir, &config.output.mask);
    let report_path = resolve(base_dir, &config.output.report);
    write_output(&mask_path, &mask.to_csv())?;
    write_output(&report_path, &report.to_json())?;
    Ok(Annotation {
        mask,
        report,
        mask_path,
        report_path,
    })
}
