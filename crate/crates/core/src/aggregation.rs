//! Score-weighted aggregation of benchmarked masks into one final mask.
//!
//! For scored samples `(x, s_x)`, the field is
//!
//! ```text
//! R = Σ_{x ≠ y} gate(x, y) · (s_y − s_x) · (y − x)
//! gate(x, y) = 1  iff  |s_y − s_x| > max(σ_r · |s_x|, σ_a)
//! ```
//!
//! summed over ordered pairs. High entries mark (frame, class) cells where
//! masking went together with better scores. `R` is min-max normalized to
//! `[0, 1]`, binarized at a set of thresholds, each distinct candidate is
//! scored, and the best one wins. Scores within `max(σ_a, σ_r · s_max)` of the
//! best count as equivalent; among those the candidate masking the most cells
//! is kept.

use std::error::Error as StdError;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{MaskError, TemporalMask};

pub type ScorerError = Box<dyn StdError + Send + Sync>;

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("aggregation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("sample {index} uses classes {got:?}, expected {expected:?}")]
    ClassMismatch {
        index: usize,
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("score {score} of sample {index} is outside [0, 1]")]
    InvalidScore { index: usize, score: f64 },
    #[error("invalid aggregation parameters: {0}")]
    InvalidParams(String),
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("score field must be normalized before binarizing")]
    NotNormalized,
    #[error("no candidates to select from")]
    NoCandidates,
    #[error("scorer returned {got} scores for {expected} masks")]
    ScoreCount { expected: usize, got: usize },
    #[error("candidate evaluation failed: {0}")]
    Scorer(#[source] ScorerError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub mask: TemporalMask,
    pub score: f64,
}

/// `σ_a`, `σ_r` and the binarization thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    sigma_a: f64,
    sigma_r: f64,
    thresholds: Vec<f64>,
}

impl Default for AggregationParams {
    /// σ_a = 0.01, σ_r = 0.05, thresholds 0.00, 0.01, …, 1.00.
    fn default() -> Self {
        Self {
            sigma_a: 0.01,
            sigma_r: 0.05,
            thresholds: evenly_spaced_thresholds(101),
        }
    }
}

/// `count` thresholds from 0 to 1 inclusive (`[0.0]` when `count == 1`).
pub fn evenly_spaced_thresholds(count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

impl AggregationParams {
    pub fn new(sigma_a: f64, sigma_r: f64, thresholds: Vec<f64>) -> Result<Self, AggregationError> {
        let bad = |m: String| Err(AggregationError::InvalidParams(m));
        if !(sigma_a.is_finite() && sigma_a >= 0.0) {
            return bad(format!("sigma_a must be non-negative, got {sigma_a}"));
        }
        if !(sigma_r.is_finite() && sigma_r >= 0.0) {
            return bad(format!("sigma_r must be non-negative, got {sigma_r}"));
        }
        if thresholds.is_empty() {
            return bad("at least one threshold is required".into());
        }
        if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("threshold {t} is outside [0, 1]"));
        }
        if thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return bad("thresholds must be strictly increasing".into());
        }
        Ok(Self {
            sigma_a,
            sigma_r,
            thresholds,
        })
    }

    pub fn sigma_a(&self) -> f64 {
        self.sigma_a
    }

    pub fn sigma_r(&self) -> f64 {
        self.sigma_r
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    /// Whether the ordered pair `(x, y)` contributes to the field.
    pub fn gate(&self, s_x: f64, s_y: f64) -> bool {
        (s_y - s_x).abs() > (self.sigma_r * s_x.abs()).max(self.sigma_a)
    }

    /// Half-width of the equivalence band below the best score.
    pub fn band(&self, s_max: f64) -> f64 {
        self.sigma_a.max(self.sigma_r * s_max.abs())
    }
}

/// Real-valued `l × p` field, row-major like [`TemporalMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    class_names: Vec<String>,
    frames: usize,
    values: Vec<f64>,
    normalized: bool,
    degenerate: bool,
}

impl ScoreField {
    pub fn new(class_names: Vec<String>, frames: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), frames * class_names.len(), "field size mismatch");
        Self {
            class_names,
            frames,
            values,
            normalized: false,
            degenerate: false,
        }
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, frame: usize, class: usize) -> f64 {
        self.values[frame * self.classes() + class]
    }

    pub fn column(&self, class: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, class)).collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Set by [`normalize`] when every entry was equal.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Copy with every column except `class` set to zero.
    pub fn isolate_column(&self, class: usize) -> ScoreField {
        let p = self.classes();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % p == class { v } else { 0.0 })
            .collect();
        ScoreField::new(self.class_names.clone(), self.frames, values)
    }
}

fn check_samples(samples: &[ScoredSample]) -> Result<(), AggregationError> {
    if samples.len() < 2 {
        return Err(AggregationError::TooFewSamples(samples.len()));
    }
    let first = &samples[0].mask;
    for (index, s) in samples.iter().enumerate() {
        if (s.mask.frames(), s.mask.classes()) != (first.frames(), first.classes()) {
            return Err(AggregationError::ShapeMismatch {
                index,
                expected: (first.frames(), first.classes()),
                got: (s.mask.frames(), s.mask.classes()),
            });
        }
        if s.mask.class_names() != first.class_names() {
            return Err(AggregationError::ClassMismatch {
                index,
                expected: first.class_names().to_vec(),
                got: s.mask.class_names().to_vec(),
            });
        }
        if !(0.0..=1.0).contains(&s.score) {
            return Err(AggregationError::InvalidScore { index, score: s.score });
        }
    }
    Ok(())
}

/// Un-normalized field `R` over all ordered pairs of distinct samples.
///
/// Each pair contributes `± w · mask`, so the sum is accumulated as one
/// weight per sample: `R = Σ_i c_i · mask_i`.
pub fn aggregate(samples: &[ScoredSample], params: &AggregationParams) -> Result<ScoreField, AggregationError> {
    check_samples(samples)?;
    let n = samples.len();
    let mut weights = vec![0.0f64; n];
    for x in 0..n {
        for y in 0..n {
            if x == y {
                continue;
            }
            let (s_x, s_y) = (samples[x].score, samples[y].score);
            if params.gate(s_x, s_y) {
                let w = s_y - s_x;
                weights[y] += w;
                weights[x] -= w;
            }
        }
    }
    let first = &samples[0].mask;
    let mut values = vec![0.0f64; first.decisions().len()];
    for (sample, &w) in samples.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        for (v, &d) in values.iter_mut().zip(sample.mask.decisions()) {
            if d {
                *v += w;
            }
        }
    }
    Ok(ScoreField::new(first.class_names().to_vec(), first.frames(), values))
}

/// Joint min-max normalization to `[0, 1]`. A constant field maps to all
/// zeros and is flagged degenerate.
pub fn normalize(field: &ScoreField) -> ScoreField {
    let (lo, hi) = field
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = !(hi > lo);
    let values = if degenerate {
        vec![0.0; field.values.len()]
    } else {
        field.values.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect()
    };
    ScoreField {
        class_names: field.class_names.clone(),
        frames: field.frames,
        values,
        normalized: true,
        degenerate,
    }
}

/// Mask cells whose normalized value is at least `threshold`.
pub fn binarize(field: &ScoreField, threshold: f64) -> Result<TemporalMask, AggregationError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(AggregationError::InvalidThreshold(threshold));
    }
    if !field.normalized {
        return Err(AggregationError::NotNormalized);
    }
    let mut mask = TemporalMask::zeros(field.class_names.clone(), field.frames)?;
    let p = field.classes();
    for (i, &v) in field.values.iter().enumerate() {
        if v >= threshold {
            mask.set(i / p, i % p, true);
        }
    }
    Ok(mask)
}

/// Index of the winning candidate: best score up to the equivalence band,
/// then most masked cells, then earliest position.
pub fn select_best(candidates: &[(TemporalMask, f64)], params: &AggregationParams) -> Result<usize, AggregationError> {
    let s_max = candidates
        .iter()
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if candidates.is_empty() {
        return Err(AggregationError::NoCandidates);
    }
    let band = params.band(s_max);
    let mut best: Option<(usize, usize)> = None;
    for (i, (mask, s)) in candidates.iter().enumerate() {
        if (s - s_max).abs() > band {
            continue;
        }
        let masked = mask.masked_count();
        if best.is_none_or(|(_, m)| masked > m) {
            best = Some((i, masked));
        }
    }
    Ok(best.expect("the best-scoring candidate is always in band").0)
}

/// Evaluates candidate masks; one score per input mask, same order.
pub trait MaskScorer {
    fn score(&mut self, masks: &[TemporalMask]) -> Result<Vec<f64>, ScorerError>;
}

impl<F> MaskScorer for F
where
    F: FnMut(&[TemporalMask]) -> Result<Vec<f64>, ScorerError>,
{
    fn score(&mut self, masks: &[TemporalMask]) -> Result<Vec<f64>, ScorerError> {
        self(masks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CandidateSource {
    Threshold { value: f64 },
    AllOnes,
    AllZeros,
}

/// One distinct candidate and everything that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    /// Class whose column was optimized; `None` in the single-class case.
    pub class: Option<String>,
    pub sources: Vec<CandidateSource>,
    pub score: f64,
    pub masked_frames: usize,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    pub mask: TemporalMask,
    pub score: f64,
    /// The field was constant, so only the trivial masks were tried.
    pub degenerate: bool,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalizedMulticlass {
    pub mask: TemporalMask,
    pub score: f64,
    /// Per-class winners `T_i`.
    pub per_class: Vec<Finalized>,
}

fn push_unique(list: &mut Vec<(TemporalMask, Vec<CandidateSource>)>, mask: TemporalMask, source: CandidateSource) {
    match list.iter_mut().find(|(m, _)| *m == mask) {
        Some((_, sources)) => sources.push(source),
        None => list.push((mask, vec![source])),
    }
}

/// Threshold candidates for `field` restricted to `active` columns (all
/// columns when `None`), followed by the trivial masks, deduplicated.
fn candidates_for(
    normalized: &ScoreField,
    params: &AggregationParams,
    active: Option<usize>,
) -> Result<Vec<(TemporalMask, Vec<CandidateSource>)>, AggregationError> {
    let names = normalized.class_names.to_vec();
    let frames = normalized.frames;
    let restrict = |mut mask: TemporalMask| {
        if let Some(i) = active {
            for c in (0..mask.classes()).filter(|&c| c != i) {
                mask.set_column(c, &vec![false; frames]);
            }
        }
        mask
    };
    let mut out = Vec::new();
    if !normalized.degenerate {
        for &t in &params.thresholds {
            let mask = restrict(binarize(normalized, t)?);
            push_unique(&mut out, mask, CandidateSource::Threshold { value: t });
        }
    }
    let ones = restrict(TemporalMask::ones(names.clone(), frames)?);
    push_unique(&mut out, ones, CandidateSource::AllOnes);
    push_unique(&mut out, TemporalMask::zeros(names, frames)?, CandidateSource::AllZeros);
    Ok(out)
}

fn score_all(scorer: &mut dyn MaskScorer, masks: &[TemporalMask]) -> Result<Vec<f64>, AggregationError> {
    let scores = scorer.score(masks).map_err(AggregationError::Scorer)?;
    if scores.len() != masks.len() {
        return Err(AggregationError::ScoreCount {
            expected: masks.len(),
            got: scores.len(),
        });
    }
    Ok(scores)
}

fn evaluate_and_select(
    candidates: Vec<(TemporalMask, Vec<CandidateSource>)>,
    params: &AggregationParams,
    scorer: &mut dyn MaskScorer,
    class: Option<&str>,
    active: Option<usize>,
    degenerate: bool,
) -> Result<Finalized, AggregationError> {
    let masks: Vec<TemporalMask> = candidates.iter().map(|(m, _)| m.clone()).collect();
    let scores = score_all(scorer, &masks)?;
    let scored: Vec<(TemporalMask, f64)> = masks.into_iter().zip(scores).collect();
    let winner = select_best(&scored, params)?;
    let records = candidates
        .into_iter()
        .zip(&scored)
        .enumerate()
        .map(|(i, ((mask, sources), (_, score)))| CandidateRecord {
            class: class.map(str::to_owned),
            sources,
            score: *score,
            masked_frames: match active {
                Some(c) => mask.column(c).iter().filter(|&&v| v).count(),
                None => mask.masked_count(),
            },
            selected: i == winner,
        })
        .collect();
    let (mask, score) = scored[winner].clone();
    Ok(Finalized {
        mask,
        score,
        degenerate,
        candidates: records,
    })
}

/// Single-class aggregation: field, normalization, thresholds, evaluation,
/// selection. The all-ones and all-zeros masks are always candidates.
pub fn finalize_singleclass(
    samples: &[ScoredSample],
    params: &AggregationParams,
    scorer: &mut dyn MaskScorer,
) -> Result<Finalized, AggregationError> {
    let field = normalize(&aggregate(samples, params)?);
    let candidates = candidates_for(&field, params, None)?;
    evaluate_and_select(candidates, params, scorer, None, None, field.degenerate)
}

/// Multiclass aggregation: one joint field, then per class `i` the field with
/// every other column zeroed is thresholded and its candidates are evaluated
/// with the other classes unmasked. The final mask takes column `i` from the
/// winner for class `i`.
pub fn finalize_multiclass(
    samples: &[ScoredSample],
    params: &AggregationParams,
    scorer: &mut dyn MaskScorer,
) -> Result<FinalizedMulticlass, AggregationError> {
    let joint = aggregate(samples, params)?;
    let names = joint.class_names.clone();
    let mut final_mask = TemporalMask::zeros(names.clone(), joint.frames)?;
    let mut per_class = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let field = normalize(&joint.isolate_column(i));
        let candidates = candidates_for(&field, params, Some(i))?;
        let best = evaluate_and_select(candidates, params, scorer, Some(name), Some(i), field.degenerate)?;
        final_mask.set_column(i, &best.mask.column(i));
        per_class.push(best);
    }
    let score = score_all(scorer, std::slice::from_ref(&final_mask))?[0];
    Ok(FinalizedMulticlass {
        mask: final_mask,
        score,
        per_class,
    })
}
