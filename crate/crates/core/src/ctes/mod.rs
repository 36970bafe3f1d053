//! Continuous-time event sequences: the data model, the offset-aligned
//! distance, noise-and-sort perturbation, padding, JSON Lines I/O and a
//! multivariate Hawkes generator.

mod batch;
mod distance;
mod hawkes;
mod io;
mod noise;

pub use batch::{pad_batch, PaddedBatch, PAD_SPACING};
pub use distance::{distance_hard, distance_hard_masked, DistanceParams};
pub use hawkes::{simulate_dataset, simulate_hawkes, spectral_radius, HawkesParams, SyntheticConfig};
pub use io::{load_jsonl, load_jsonl_with_perms, save_jsonl, save_jsonl_with_perms};
pub use noise::{apply_noise_and_sort, sort_perturbed};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CtesError {
    #[error("a sequence needs at least one event")]
    Empty,
    #[error("times must be strictly increasing: t[{index}] = {curr} follows {prev}")]
    NonIncreasing { index: usize, prev: f64, curr: f64 },
    #[error("time {time} at index {index} is negative")]
    NegativeTime { index: usize, time: f64 },
    #[error("time at index {index} is not finite")]
    NonFinite { index: usize },
    #[error("mark {mark} at index {index} is outside [0, {num_marks})")]
    MarkOutOfRange {
        index: usize,
        mark: usize,
        num_marks: usize,
    },
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("sequence of length {len} exceeds padded length {max}")]
    TooLong { len: usize, max: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("Hawkes parameters are not stationary (spectral radius of alpha/beta = {0:.4})")]
    NonStationary(f64),
    #[error("the process produced no events on [0, {horizon}]")]
    NoEvents { horizon: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event<T> {
    pub t: T,
    pub c: usize,
}

/// Chronologically ordered events with strictly increasing times.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence<T> {
    times: Vec<T>,
    marks: Vec<usize>,
}

impl<T: Scalar> Sequence<T> {
    /// Validates ordering, finiteness and nonnegativity.
    pub fn new(times: Vec<T>, marks: Vec<usize>) -> Result<Self, CtesError> {
        if times.len() != marks.len() {
            return Err(CtesError::LengthMismatch {
                what: "times and marks",
                left: times.len(),
                right: marks.len(),
            });
        }
        if times.is_empty() {
            return Err(CtesError::Empty);
        }
        for (i, &t) in times.iter().enumerate() {
            if !t.is_finite() {
                return Err(CtesError::NonFinite { index: i });
            }
            if t < T::zero() {
                return Err(CtesError::NegativeTime {
                    index: i,
                    time: t.as_f64(),
                });
            }
            if i > 0 && !(t > times[i - 1]) {
                return Err(CtesError::NonIncreasing {
                    index: i,
                    prev: times[i - 1].as_f64(),
                    curr: t.as_f64(),
                });
            }
        }
        Ok(Self { times, marks })
    }

    pub fn from_events(events: &[Event<T>]) -> Result<Self, CtesError> {
        Self::new(
            events.iter().map(|e| e.t).collect(),
            events.iter().map(|e| e.c).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn marks(&self) -> &[usize] {
        &self.marks
    }

    pub fn event(&self, i: usize) -> Event<T> {
        Event {
            t: self.times[i],
            c: self.marks[i],
        }
    }

    pub fn events(&self) -> impl Iterator<Item = Event<T>> + '_ {
        self.times
            .iter()
            .zip(&self.marks)
            .map(|(&t, &c)| Event { t, c })
    }

    pub fn max_mark(&self) -> usize {
        self.marks.iter().copied().max().unwrap_or(0)
    }

    /// Adds `delta` to every time. Fails if a time would become negative.
    pub fn shifted(&self, delta: T) -> Result<Self, CtesError> {
        Self::new(
            self.times.iter().map(|&t| t + delta).collect(),
            self.marks.clone(),
        )
    }

    /// The first `n` events (or all of them).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        Self {
            times: self.times[..n].to_vec(),
            marks: self.marks[..n].to_vec(),
        }
    }

    pub fn mean_gap(&self) -> Option<T> {
        if self.len() < 2 {
            return None;
        }
        let span = self.times[self.len() - 1] - self.times[0];
        Some(span / T::from_usize_lossy(self.len() - 1))
    }

    pub fn cast<U: Scalar>(&self) -> Sequence<U> {
        Sequence {
            times: self.times.iter().map(|t| U::lit(t.as_f64())).collect(),
            marks: self.marks.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub num_marks: usize,
    pub sequences: Vec<Sequence<T>>,
}

impl<T: Scalar> Dataset<T> {
    /// Checks that every mark is below `num_marks`.
    pub fn new(name: impl Into<String>, num_marks: usize, sequences: Vec<Sequence<T>>) -> Result<Self, CtesError> {
        if num_marks == 0 {
            return Err(CtesError::InvalidParam("num_marks must be positive".into()));
        }
        for seq in &sequences {
            if let Some((index, &mark)) = seq.marks().iter().enumerate().find(|(_, &m)| m >= num_marks) {
                return Err(CtesError::MarkOutOfRange {
                    index,
                    mark,
                    num_marks,
                });
            }
        }
        Ok(Self {
            name: name.into(),
            num_marks,
            sequences,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn max_len(&self) -> usize {
        self.sequences.iter().map(Sequence::len).max().unwrap_or(0)
    }

    /// Mean inter-event gap over all sequences with at least two events.
    pub fn mean_gap(&self) -> Option<T> {
        let (mut span, mut gaps) = (T::zero(), 0usize);
        for s in &self.sequences {
            if s.len() >= 2 {
                span = span + (s.times()[s.len() - 1] - s.times()[0]);
                gaps += s.len() - 1;
            }
        }
        (gaps > 0).then(|| span / T::from_usize_lossy(gaps))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            num_marks: self.num_marks,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }
}
