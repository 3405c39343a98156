//! The constrained temporal-mask space `E(l, k0, k1)`.
//!
//! `E` holds every binary string of length `l` whose maximal runs of zeros are
//! at least `k0` long and whose maximal runs of ones are at least `k1` long.
//! Members are root-to-leaf paths of a binary tree (depth = frame index, node
//! value = masking decision). Uniform sampling walks that tree and picks each
//! child with probability proportional to the number of valid completions
//! below it, which requires exact counts. Counts grow exponentially with `l`,
//! so they are kept as big integers.
//!
//! # Counting
//!
//! The state after a prefix is `(position, last symbol, current run length)`.
//! Once a run reaches its minimum, any further extension is unconstrained, so
//! run lengths saturate at the symbol's minimum. A state whose run has not
//! reached the minimum has a single forced continuation until it does, which
//! means every state's completion count equals that of a saturated state
//! further along. Only saturated counts are therefore stored:
//!
//! ```text
//! A_s(0) = 1
//! A_s(n) = A_s(n - 1) + A_t(n - k_t)     (t = other symbol, term present iff n >= k_t)
//! ```
//!
//! where `n` is the number of frames still to decide. The total is
//! `A_0(l - k0) + A_1(l - k1)` with out-of-range terms dropped.

use std::fmt;

use num_bigint::{BigUint, RandBigInt};
use num_traits::{One, Zero};
use rand::Rng;
use thiserror::Error;

use crate::mask::{MaskError, TemporalMask};
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskSpaceError {
    #[error("invalid mask-space parameters: {0}")]
    InvalidParams(String),
    #[error("E({len}, {min_zero_run}, {min_one_run}) is empty: both minimum run lengths exceed the sequence length")]
    EmptySpace {
        len: usize,
        min_zero_run: usize,
        min_one_run: usize,
    },
    #[error("mask column has {got} frames, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// `(l, k0, k1)`: sequence length and minimum lengths of zero and one runs.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskSpaceParams {
    len: usize,
    min_zero_run: usize,
    min_one_run: usize,
}

impl MaskSpaceParams {
    /// Validates `l, k0, k1 >= 1` and rejects the empty space (`k0 > l` and
    /// `k1 > l`). If only one minimum exceeds `l` the space is the single
    /// constant string of the other symbol.
    pub fn new(len: usize, min_zero_run: usize, min_one_run: usize) -> Result<Self, MaskSpaceError> {
        if len == 0 || min_zero_run == 0 || min_one_run == 0 {
            return Err(MaskSpaceError::InvalidParams(format!(
                "l, k0 and k1 must all be positive (got l={len}, k0={min_zero_run}, k1={min_one_run})"
            )));
        }
        if min_zero_run > len && min_one_run > len {
            return Err(MaskSpaceError::EmptySpace {
                len,
                min_zero_run,
                min_one_run,
            });
        }
        Ok(Self {
            len,
            min_zero_run,
            min_one_run,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn min_zero_run(&self) -> usize {
        self.min_zero_run
    }

    pub fn min_one_run(&self) -> usize {
        self.min_one_run
    }

    /// `k = k0 + k1`.
    pub fn block_sum(&self) -> usize {
        self.min_zero_run + self.min_one_run
    }

    fn min_run(&self, symbol: bool) -> usize {
        if symbol {
            self.min_one_run
        } else {
            self.min_zero_run
        }
    }
}

impl fmt::Debug for MaskSpaceParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E({}, {}, {})", self.len, self.min_zero_run, self.min_one_run)
    }
}

/// `|E(l, k0, k1)|`, exact.
///
/// Keeps only a sliding window of the recurrence, so memory stays
/// `O(max(k0, k1))` big integers even for very long sequences.
pub fn count_masks(params: &MaskSpaceParams) -> BigUint {
    let l = params.len;
    let (k0, k1) = (params.min_zero_run, params.min_one_run);
    let window = k0.max(k1) + 1;
    let mut zero: Vec<BigUint> = vec![BigUint::zero(); window];
    let mut one: Vec<BigUint> = vec![BigUint::zero(); window];
    zero[0] = BigUint::one();
    one[0] = BigUint::one();
    let target_zero = l.checked_sub(k0);
    let target_one = l.checked_sub(k1);
    let horizon = target_zero.into_iter().chain(target_one).max().unwrap_or(0);
    let mut total = BigUint::zero();
    for n in 0..=horizon {
        if n > 0 {
            let next_zero = if n >= k1 {
                &zero[(n - 1) % window] + &one[(n - k1) % window]
            } else {
                zero[(n - 1) % window].clone()
            };
            let next_one = if n >= k0 {
                &one[(n - 1) % window] + &zero[(n - k0) % window]
            } else {
                one[(n - 1) % window].clone()
            };
            zero[n % window] = next_zero;
            one[n % window] = next_one;
        }
        if Some(n) == target_zero {
            total += &zero[n % window];
        }
        if Some(n) == target_one {
            total += &one[n % window];
        }
    }
    total
}

/// Completion counts for every sampler state of one mask space.
///
/// Immutable once built; share it across threads freely.
#[derive(Clone)]
pub struct PathCountTable {
    params: MaskSpaceParams,
    /// `zero_run[n]`: completions with `n` frames left after a saturated run of zeros.
    zero_run: Vec<BigUint>,
    /// `one_run[n]`: same after a saturated run of ones.
    one_run: Vec<BigUint>,
    total: BigUint,
    zero: BigUint,
}

impl PathCountTable {
    pub fn build(params: MaskSpaceParams) -> Self {
        let l = params.len;
        let (k0, k1) = (params.min_zero_run, params.min_one_run);
        let mut zero_run = Vec::with_capacity(l + 1);
        let mut one_run = Vec::with_capacity(l + 1);
        zero_run.push(BigUint::one());
        one_run.push(BigUint::one());
        for n in 1..=l {
            let mut z = zero_run[n - 1].clone();
            if n >= k1 {
                z += &one_run[n - k1];
            }
            let mut o = one_run[n - 1].clone();
            if n >= k0 {
                o += &zero_run[n - k0];
            }
            zero_run.push(z);
            one_run.push(o);
        }
        let mut total = BigUint::zero();
        if l >= k0 {
            total += &zero_run[l - k0];
        }
        if l >= k1 {
            total += &one_run[l - k1];
        }
        Self {
            params,
            zero_run,
            one_run,
            total,
            zero: BigUint::zero(),
        }
    }

    pub fn params(&self) -> &MaskSpaceParams {
        &self.params
    }

    /// Completions at the root, i.e. `|E|`.
    pub fn total(&self) -> &BigUint {
        &self.total
    }

    fn saturated(&self, symbol: bool, remaining: usize) -> &BigUint {
        if symbol {
            &self.one_run[remaining]
        } else {
            &self.zero_run[remaining]
        }
    }

    /// Number of members of `E` extending a prefix of length `position` whose
    /// final maximal run is `run_length` copies of `last_symbol`.
    ///
    /// Panics if the state is impossible (`run_length == 0`,
    /// `run_length > position` or `position > l`).
    pub fn completions(&self, position: usize, last_symbol: bool, run_length: usize) -> &BigUint {
        assert!(
            run_length >= 1 && run_length <= position && position <= self.params.len,
            "invalid sampler state (position {position}, run {run_length})"
        );
        let remaining = self.params.len - position;
        let forced = self.params.min_run(last_symbol).saturating_sub(run_length);
        if forced > remaining {
            return &self.zero;
        }
        self.saturated(last_symbol, remaining - forced)
    }

    /// Number of members whose first run consists of `symbol`.
    fn root_weight(&self, symbol: bool) -> &BigUint {
        let k = self.params.min_run(symbol);
        match self.params.len.checked_sub(k) {
            Some(remaining) => self.saturated(symbol, remaining),
            None => &self.zero,
        }
    }

    /// One uniform draw from `E`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<bool>, MaskSpaceError> {
        if self.total.is_zero() {
            let p = self.params;
            return Err(MaskSpaceError::EmptySpace {
                len: p.len,
                min_zero_run: p.min_zero_run,
                min_one_run: p.min_one_run,
            });
        }
        let l = self.params.len;
        let mut out = Vec::with_capacity(l);
        let zero_weight = self.root_weight(false);
        let mut symbol = !pick_first(rng, zero_weight, &self.total);
        out.extend(std::iter::repeat_n(symbol, self.params.min_run(symbol)));
        while out.len() < l {
            let remaining = l - out.len();
            let other = !symbol;
            let other_run = self.params.min_run(other);
            let stay = self.saturated(symbol, remaining - 1);
            // A saturated node's count is the sum of its two children.
            let here = self.saturated(symbol, remaining);
            if remaining >= other_run && !pick_first(rng, stay, here) {
                symbol = other;
                out.extend(std::iter::repeat_n(symbol, other_run));
            } else {
                out.push(symbol);
            }
        }
        Ok(out)
    }
}

/// True with probability `first / total`.
fn pick_first<R: Rng + ?Sized>(rng: &mut R, first: &BigUint, total: &BigUint) -> bool {
    if first.is_zero() {
        return false;
    }
    if first == total {
        return true;
    }
    rng.gen_biguint_below(total) < *first
}

pub fn build_count_table(params: MaskSpaceParams) -> PathCountTable {
    PathCountTable::build(params)
}

/// Uniform draw from `E` driven by a ChaCha8 stream seeded with `seed`.
pub fn sample_mask(table: &PathCountTable, seed: u64) -> Result<Vec<bool>, MaskSpaceError> {
    table.sample_with(&mut rng_from_seed(seed))
}

/// `q` masks of shape `l × p`, every column an independent uniform draw.
///
/// Column `c` of mask `j` uses seed `derive_seed(seed, j·p + c)`.
pub fn sample_multiclass(
    table: &PathCountTable,
    class_names: &[String],
    q: usize,
    seed: u64,
) -> Result<Vec<TemporalMask>, MaskSpaceError> {
    let p = class_names.len();
    (0..q)
        .map(|j| {
            let columns = (0..p)
                .map(|c| sample_mask(table, derive_seed(seed, (j * p + c) as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TemporalMask::from_columns(class_names.to_vec(), &columns)?)
        })
        .collect()
}

/// Whether every maximal run of `column` respects its minimum length.
pub fn is_member(column: &[bool], params: &MaskSpaceParams) -> Result<bool, MaskSpaceError> {
    if column.len() != params.len {
        return Err(MaskSpaceError::LengthMismatch {
            expected: params.len,
            got: column.len(),
        });
    }
    Ok(run_lengths(column)
        .into_iter()
        .all(|(symbol, len)| len >= params.min_run(symbol)))
}

/// Maximal runs as `(symbol, length)` pairs.
pub fn run_lengths(column: &[bool]) -> Vec<(bool, usize)> {
    let mut runs: Vec<(bool, usize)> = Vec::new();
    for &v in column {
        match runs.last_mut() {
            Some((s, n)) if *s == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}
