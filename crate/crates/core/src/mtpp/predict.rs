use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::ctes::{Dataset, Sequence};
use crate::scalar::Scalar;

use super::model::{encode, intensity, mark_logits, SequenceInput};
use super::{MtppError, MtppModel};

/// Predicted next event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T> {
    pub time: T,
    pub mark: usize,
    /// Survival probability at the horizon exceeded 0.01.
    pub truncated: bool,
}

/// Expected next time `t_last + E[s]` under the density
/// `lambda(s) exp(-int_0^s lambda)` on `[0, t_max]`, with the survival mass
/// beyond the horizon placed at `t_max`; mark is the argmax of the mark
/// distribution (first index on ties).
pub fn predict_next<T: Scalar>(model: &MtppModel<T>, h: &[T], t_last: T) -> Prediction<T> {
    let k = model.config.k_pred;
    let t_max = T::lit(model.config.t_max);
    let step = t_max / T::from_usize_lossy(k - 1);
    let half = T::lit(0.5);
    let rate = |s: T| intensity(model, h, t_last + s, t_last).expect("query is never before t_last");

    let mut prev_rate = rate(T::zero());
    let mut cumulative = T::zero();
    let mut prev_g = T::zero();
    let mut mean = T::zero();
    let mut survival = T::one();
    for j in 1..k {
        let s = step * T::from_usize_lossy(j);
        let r = rate(s);
        cumulative = cumulative + half * step * (prev_rate + r);
        survival = (-cumulative).exp();
        let g = s * r * survival;
        mean = mean + half * step * (prev_g + g);
        prev_rate = r;
        prev_g = g;
    }
    mean = mean + t_max * survival;

    let logits = mark_logits(model, h);
    let mut mark = 0;
    for (c, &l) in logits.iter().enumerate() {
        if l > logits[mark] {
            mark = c;
        }
    }
    Prediction {
        time: t_last + mean,
        mark,
        truncated: survival > T::lit(0.01),
    }
}

/// Predictions for events `1..n` of `history`, entry `j` conditioned on
/// the first `j + 1` events.
pub fn predict_sequence<T: Scalar>(
    model: &MtppModel<T>,
    history: &Sequence<T>,
) -> Result<Vec<Prediction<T>>, MtppError> {
    let tape = Tape::new();
    let w = model.params.constants();
    let input = SequenceInput::from_sequence(history, model.config.num_marks);
    let h = encode(&tape, &model.config, &w, &input)?;
    let d = model.config.dim;
    Ok((0..history.len().saturating_sub(1))
        .map(|j| predict_next(model, &h.values()[j * d..(j + 1) * d], history.times()[j]))
        .collect())
}

/// Dataset-level next-event metrics: per-sequence means over events
/// `i >= 2`, then averaged over sequences having such events.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub mpa: f64,
    pub sequences: usize,
    pub events: usize,
    pub truncated: usize,
}

/// Scores `predictions[s][j]` against event `j + 1` of clean sequence `s`.
pub fn metrics_from_predictions<T: Scalar>(clean: &Dataset<T>, predictions: &[Vec<Prediction<T>>]) -> Metrics {
    let mut out = Metrics::default();
    let (mut mae, mut mpa) = (0.0, 0.0);
    for (seq, preds) in clean.sequences.iter().zip(predictions) {
        let m = preds.len().min(seq.len().saturating_sub(1));
        if m == 0 {
            continue;
        }
        let (mut abs_err, mut hits) = (0.0, 0usize);
        for (j, p) in preds.iter().take(m).enumerate() {
            let e = seq.event(j + 1);
            abs_err += (e.t - p.time).abs().as_f64();
            hits += usize::from(e.c == p.mark);
            out.truncated += usize::from(p.truncated);
        }
        mae += abs_err / m as f64;
        mpa += hits as f64 / m as f64;
        out.sequences += 1;
        out.events += m;
    }
    if out.sequences > 0 {
        out.mae = mae / out.sequences as f64;
        out.mpa = mpa / out.sequences as f64;
    }
    out
}

/// Predicts each clean event from the matching (possibly perturbed)
/// history. Pass `clean` as `histories` for ordinary evaluation.
pub fn metrics<T: Scalar>(
    model: &MtppModel<T>,
    clean: &Dataset<T>,
    histories: &Dataset<T>,
) -> Result<Metrics, MtppError> {
    if clean.len() != histories.len() {
        return Err(MtppError::Config(format!(
            "{} clean sequences but {} histories",
            clean.len(),
            histories.len()
        )));
    }
    let preds = histories
        .sequences
        .par_iter()
        .map(|s| predict_sequence(model, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(metrics_from_predictions(clean, &preds))
}
