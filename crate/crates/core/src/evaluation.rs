//! The black-box evaluator boundary.
//!
//! An evaluator maps `(sequence, temporal mask)` to ATE RMSE and tracking
//! rate. It runs `repetitions` times with seeds `base_seed + rep`, and the
//! score of a mask is the median of the per-repetition USM values (never the
//! USM of the median ATE and TR).
//!
//! Two backends exist: the in-process simulator ([`crate::sim`]) and an
//! external command. The command template must contain `{mask}`, `{sequence}`
//! and `{out}` exactly once each; they are replaced by single-quoted shell
//! words and the result runs under `sh -c` with `TEMPMASK_SEED` set. The
//! command writes a result JSON file to `{out}`.
//!
//! Records are cached as JSON under a directory, one file per
//! `(sequence, mask digest, spec digest)` key, written via rename so that
//! concurrent writers never expose partial files.

use std::fs::{self, File};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::mask::TemporalMask;
use crate::metrics::{EvalResult, MetricsError, UsmParams};
use crate::protocol::{ProtocolError, ResultFile, SEED_ENV};
use crate::sim::{simulate, SceneScript, SimError};

pub const DEFAULT_REPETITIONS: u32 = 10;
pub const DEFAULT_TIMEOUT_SECS: f64 = 600.0;

const PLACEHOLDERS: [&str; 3] = ["{mask}", "{sequence}", "{out}"];

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("invalid evaluator spec: {0}")]
    InvalidSpec(String),
    #[error("sequence {got:?} is unknown to the simulator (scene is {expected:?})")]
    UnknownSequence { expected: String, got: String },
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("evaluator command failed ({status}): {diagnostics}")]
    CommandFailed { status: String, diagnostics: String },
    #[error("evaluator protocol violation: {0}")]
    Protocol(String),
    #[error("evaluator exceeded the {secs} s timeout")]
    Timeout { secs: f64 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("all {count} evaluations failed; first error: {first}")]
    AllFailed {
        count: usize,
        first: Box<EvaluationError>,
    },
}

impl From<ProtocolError> for EvaluationError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Io { path, source } => EvaluationError::Io { context: path, source },
            other => EvaluationError::Protocol(other.to_string()),
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> EvaluationError {
    let context = context.into();
    move |source| EvaluationError::Io { context, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorKind {
    InProcessSimulator,
    Subprocess { command_template: String },
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorSpec {
    #[serde(flatten)]
    pub kind: EvaluatorKind,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default)]
    pub usm: UsmParams,
    #[serde(default)]
    pub base_seed: u64,
    /// Per repetition; subprocess backend only.
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl EvaluatorSpec {
    pub fn simulator(repetitions: u32, usm: UsmParams, base_seed: u64) -> Self {
        Self {
            kind: EvaluatorKind::InProcessSimulator,
            repetitions,
            usm,
            base_seed,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    pub fn subprocess(command_template: impl Into<String>, repetitions: u32, usm: UsmParams, base_seed: u64) -> Self {
        Self {
            kind: EvaluatorKind::Subprocess {
                command_template: command_template.into(),
            },
            repetitions,
            usm,
            base_seed,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }

    pub fn validate(&self) -> Result<(), EvaluationError> {
        let bad = |m: String| Err(EvaluationError::InvalidSpec(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        UsmParams::new(self.usm.lambda())?;
        if let EvaluatorKind::Subprocess { command_template } = &self.kind {
            for p in PLACEHOLDERS {
                let n = command_template.matches(p).count();
                if n != 1 {
                    return bad(format!("command template must contain {p} exactly once (found {n})"));
                }
            }
        }
        Ok(())
    }
}

/// Evaluator outcome for one `(sequence, mask)` under one spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub sequence_id: String,
    pub mask_digest: String,
    pub spec_digest: String,
    pub per_rep: Vec<EvalResult>,
    /// Componentwise medians; `usm` is the median of per-repetition USM.
    pub median: EvalResult,
}

impl EvaluationRecord {
    /// The scalar used for ranking and aggregation.
    pub fn score(&self) -> f64 {
        self.median.usm
    }
}

/// Middle order statistic, or the mean of the two middle ones for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn median_result(per_rep: &[EvalResult]) -> EvalResult {
    let pick = |f: fn(&EvalResult) -> f64| median(&per_rep.iter().map(f).collect::<Vec<_>>());
    EvalResult {
        ate_rmse: pick(|r| r.ate_rmse),
        tracking_rate: pick(|r| r.tracking_rate),
        usm: pick(|r| r.usm),
    }
}

fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Wraps a value as a single-quoted `sh` word.
fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Replaces each placeholder in one left-to-right pass.
fn render_command(template: &str, mask: &str, sequence: &str, out: &str) -> String {
    let mut rendered = String::with_capacity(template.len() + 128);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        rendered.push_str(&rest[..start]);
        let tail = &rest[start..];
        let (value, len) = if tail.starts_with("{mask}") {
            (Some(mask), 6)
        } else if tail.starts_with("{sequence}") {
            (Some(sequence), 10)
        } else if tail.starts_with("{out}") {
            (Some(out), 5)
        } else {
            (None, 1)
        };
        match value {
            Some(v) => rendered.push_str(&shell_quote(v)),
            None => rendered.push('{'),
        }
        rest = &tail[len..];
    }
    rendered.push_str(rest);
    rendered
}

fn tail_of(file: &mut File, max: u64) -> String {
    let len = file.seek(SeekFrom::End(0)).unwrap_or(0);
    let _ = file.seek(SeekFrom::Start(len.saturating_sub(max)));
    let mut buf = Vec::new();
    let _ = file.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).trim().to_string()
}

/// A configured evaluator. Shareable across threads.
#[derive(Debug)]
pub struct Evaluator {
    spec: EvaluatorSpec,
    scene: Option<Arc<SceneScript>>,
    spec_digest: String,
    executions: AtomicUsize,
}

impl Evaluator {
    /// `scene` is required for the simulator backend and ignored otherwise.
    pub fn new(spec: EvaluatorSpec, scene: Option<SceneScript>) -> Result<Self, EvaluationError> {
        spec.validate()?;
        let scene = match spec.kind {
            EvaluatorKind::InProcessSimulator => {
                let scene = scene.ok_or_else(|| {
                    EvaluationError::InvalidSpec("the in-process simulator needs a scene".into())
                })?;
                scene.validate()?;
                Some(Arc::new(scene))
            }
            EvaluatorKind::Subprocess { .. } => None,
        };
        // timeout does not influence results, so it stays out of the digest
        let mut keyed = spec.clone();
        keyed.timeout_secs = 0.0;
        let mut material = serde_json::to_string(&keyed).expect("spec serializes");
        if let Some(scene) = &scene {
            material.push('\n');
            material.push_str(&sha256_hex(scene.to_json().as_bytes()));
        }
        Ok(Self {
            spec,
            scene,
            spec_digest: sha256_hex(material.as_bytes()),
            executions: AtomicUsize::new(0),
        })
    }

    pub fn spec(&self) -> &EvaluatorSpec {
        &self.spec
    }

    pub fn spec_digest(&self) -> &str {
        &self.spec_digest
    }

    /// Evaluator runs performed so far (one per repetition).
    pub fn executions(&self) -> usize {
        self.executions.load(Ordering::SeqCst)
    }

    /// One repetition.
    pub fn run_once(&self, sequence_id: &str, mask: &TemporalMask, rep_seed: u64) -> Result<EvalResult, EvaluationError> {
        match &self.spec.kind {
            EvaluatorKind::InProcessSimulator => {
                let scene = self.scene.as_ref().expect("validated in new");
                if scene.sequence_id != sequence_id {
                    return Err(EvaluationError::UnknownSequence {
                        expected: scene.sequence_id.clone(),
                        got: sequence_id.to_owned(),
                    });
                }
                self.executions.fetch_add(1, Ordering::SeqCst);
                Ok(simulate(scene, mask, rep_seed, &self.spec.usm)?.eval)
            }
            EvaluatorKind::Subprocess { command_template } => {
                self.run_subprocess(command_template, sequence_id, mask, rep_seed)
            }
        }
    }

    fn run_subprocess(
        &self,
        template: &str,
        sequence_id: &str,
        mask: &TemporalMask,
        rep_seed: u64,
    ) -> Result<EvalResult, EvaluationError> {
        let dir = tempfile::Builder::new()
            .prefix("tempmask-eval-")
            .tempdir()
            .map_err(io_err("creating evaluation directory"))?;
        let mask_path = dir.path().join("mask.csv");
        let out_path = dir.path().join("result.json");
        fs::write(&mask_path, mask.to_csv()).map_err(io_err("writing mask file"))?;
        let stdout = File::create(dir.path().join("stdout.log")).map_err(io_err("creating stdout log"))?;
        let mut stderr = tempfile::tempfile_in(dir.path()).map_err(io_err("creating stderr log"))?;
        let command = render_command(
            template,
            &mask_path.to_string_lossy(),
            sequence_id,
            &out_path.to_string_lossy(),
        );
        self.executions.fetch_add(1, Ordering::SeqCst);
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(&command)
            .env(SEED_ENV, rep_seed.to_string())
            .stdin(Stdio::null())
            .stdout(stdout)
            .stderr(stderr.try_clone().map_err(io_err("cloning stderr log"))?)
            .spawn()
            .map_err(io_err(format!("spawning `{command}`")))?;
        let timeout = Duration::from_secs_f64(self.spec.timeout_secs);
        let status = match child.wait_timeout(timeout).map_err(io_err("waiting for evaluator"))? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(EvaluationError::Timeout {
                    secs: self.spec.timeout_secs,
                });
            }
        };
        if !status.success() {
            return Err(EvaluationError::CommandFailed {
                status: status.to_string(),
                diagnostics: tail_of(&mut stderr, 4096),
            });
        }
        if !out_path.exists() {
            return Err(EvaluationError::Protocol(format!(
                "command exited successfully but wrote no result file: `{command}`"
            )));
        }
        let result = ResultFile::read(&out_path)?;
        Ok(EvalResult::new(result.ate_rmse, result.tracking_rate, &self.spec.usm)?)
    }

    /// All repetitions, uncached.
    pub fn evaluate_mask(&self, sequence_id: &str, mask: &TemporalMask) -> Result<EvaluationRecord, EvaluationError> {
        let per_rep = (0..self.spec.repetitions)
            .map(|rep| self.run_once(sequence_id, mask, self.spec.base_seed.wrapping_add(u64::from(rep))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvaluationRecord {
            sequence_id: sequence_id.to_owned(),
            mask_digest: mask.digest(),
            spec_digest: self.spec_digest.clone(),
            median: median_result(&per_rep),
            per_rep,
        })
    }

    pub fn cache_path(&self, cache_dir: &Path, sequence_id: &str, mask: &TemporalMask) -> PathBuf {
        let key = format!("{sequence_id}\n{}\n{}", mask.digest(), self.spec_digest);
        cache_dir.join(format!("{}.json", sha256_hex(key.as_bytes())))
    }

    fn load_cached(&self, path: &Path, sequence_id: &str, mask: &TemporalMask) -> Option<EvaluationRecord> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
            Err(e) => {
                warn!("unreadable cache entry {}: {e}; re-evaluating", path.display());
                return None;
            }
        };
        match serde_json::from_str::<EvaluationRecord>(&text) {
            Ok(r)
                if r.sequence_id == sequence_id
                    && r.mask_digest == mask.digest()
                    && r.spec_digest == self.spec_digest
                    && r.per_rep.len() == self.spec.repetitions as usize =>
            {
                Some(r)
            }
            Ok(_) => {
                warn!("cache entry {} does not match its key; re-evaluating", path.display());
                None
            }
            Err(e) => {
                warn!("corrupt cache entry {}: {e}; re-evaluating", path.display());
                None
            }
        }
    }

    fn store(&self, path: &Path, record: &EvaluationRecord) -> Result<(), EvaluationError> {
        let dir = path.parent().expect("cache entries live in a directory");
        fs::create_dir_all(dir).map_err(io_err(format!("creating cache directory {}", dir.display())))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err("creating cache temp file"))?;
        let mut text = serde_json::to_string_pretty(record).expect("record serializes");
        text.push('\n');
        tmp.write_all(text.as_bytes()).map_err(io_err("writing cache entry"))?;
        tmp.persist(path)
            .map_err(|e| EvaluationError::Io {
                context: format!("publishing cache entry {}", path.display()),
                source: e.error,
            })?;
        Ok(())
    }

    /// Evaluates through the cache; `None` disables caching.
    pub fn cached_evaluate(
        &self,
        cache_dir: Option<&Path>,
        sequence_id: &str,
        mask: &TemporalMask,
    ) -> Result<EvaluationRecord, EvaluationError> {
        let Some(dir) = cache_dir else {
            return self.evaluate_mask(sequence_id, mask);
        };
        let path = self.cache_path(dir, sequence_id, mask);
        if let Some(record) = self.load_cached(&path, sequence_id, mask) {
            return Ok(record);
        }
        let record = self.evaluate_mask(sequence_id, mask)?;
        self.store(&path, &record)?;
        Ok(record)
    }

    /// Evaluates `masks` with at most `parallelism` in flight. Output order
    /// follows input order; the batch itself fails only when every mask does.
    pub fn evaluate_batch(
        &self,
        cache_dir: Option<&Path>,
        sequence_id: &str,
        masks: &[TemporalMask],
        parallelism: usize,
    ) -> Result<Vec<Result<EvaluationRecord, EvaluationError>>, EvaluationError> {
        if parallelism == 0 {
            return Err(EvaluationError::InvalidSpec("parallelism must be at least 1".into()));
        }
        let run = || {
            masks
                .par_iter()
                .map(|m| self.cached_evaluate(cache_dir, sequence_id, m))
                .collect::<Vec<_>>()
        };
        let results = if parallelism == 1 {
            masks
                .iter()
                .map(|m| self.cached_evaluate(cache_dir, sequence_id, m))
                .collect()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(parallelism)
                .build()
                .map_err(|e| EvaluationError::InvalidSpec(format!("thread pool: {e}")))?
                .install(run)
        };
        if !results.is_empty() && results.iter().all(Result::is_err) {
            let count = results.len();
            let first = results.into_iter().next().and_then(Result::err).expect("non-empty");
            return Err(EvaluationError::AllFailed {
                count,
                first: Box::new(first),
            });
        }
        Ok(results)
    }
}
