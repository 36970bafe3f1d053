use crate::autodiff::{Tape, Tensor};
use crate::ctes::{PaddedBatch, Sequence};
use crate::nn::{causal_attention, causal_mask, mask_column, one_hot, repeat_row, time_encoding};
use crate::params::GroupGrads;
use crate::scalar::{self, Scalar};

use super::{MtppConfig, MtppError, MtppModel, MtppVars};

/// A sequence laid out as tensors: times `[n, 1]`, mark rows `[n, C + 1]`
/// (one-hot or convex mixtures), mark ids and a real-event mask.
#[derive(Clone, Debug)]
pub struct SequenceInput<T> {
    pub times: Tensor<T>,
    pub marks: Tensor<T>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<T: Scalar> SequenceInput<T> {
    pub fn from_sequence(seq: &Sequence<T>, num_marks: usize) -> Self {
        Self {
            times: Tensor::column(seq.times().to_vec()),
            marks: one_hot(seq.marks(), num_marks + 1),
            labels: seq.marks().to_vec(),
            mask: vec![true; seq.len()],
        }
    }

    pub fn from_padded(batch: &PaddedBatch<T>, b: usize) -> Self {
        Self {
            times: Tensor::column(batch.times[b].clone()),
            marks: one_hot(&batch.marks[b], batch.pad_mark + 1),
            labels: batch.marks[b].clone(),
            mask: batch.mask[b].clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// History embeddings `h` of shape `[n, D]`; row `i` depends only on rows
/// `0..=i` of the input.
pub fn encode<T: Scalar>(
    tape: &Tape<T>,
    cfg: &MtppConfig,
    w: &MtppVars<T>,
    input: &SequenceInput<T>,
) -> Result<Tensor<T>, MtppError> {
    let n = input.len();
    let emb = tape.matmul(&input.marks, &w.mark_embed)?;
    let pe = time_encoding(tape, &input.times, cfg.dim)?;
    let pe = tape.mul(&pe, &repeat_row(tape, &w.time_weight, n)?)?;
    let z = tape.add(&emb, &pe)?;
    let s = causal_attention(tape, &z, &w.enc_q, &w.enc_k, &w.enc_v, &causal_mask(&input.mask))?;
    let pre = tape.add(&tape.matmul(&s, &w.enc_out)?, &repeat_row(tape, &w.enc_out_b, n)?)?;
    Ok(tape.tanh(&pre)?)
}

/// Per-event likelihood pieces, each `[n, 1]`, for target event `i`
/// conditioned on `h_{i-1}` and the conditioning time `t'_{i-1}`.
#[derive(Clone, Debug)]
pub struct LikelihoodTerms<T> {
    pub log_intensity: Tensor<T>,
    /// Signed `int_{t'_{i-1}}^{t_i} lambda`.
    pub compensator: Tensor<T>,
    pub mark_log_prob: Tensor<T>,
    /// `sum_i mask_i (log_intensity - compensator + mark_log_prob)`.
    pub log_likelihood: Tensor<T>,
}

/// Likelihood of `target` events given embeddings `h` of a conditioning
/// sequence with times `cond_times`, aligned by position.
///
/// When `cond_times == target_times` this is the ordinary log-likelihood.
pub fn log_likelihood_terms<T: Scalar>(
    tape: &Tape<T>,
    cfg: &MtppConfig,
    w: &MtppVars<T>,
    h: &Tensor<T>,
    cond_times: &Tensor<T>,
    target_times: &Tensor<T>,
    target_marks: &[usize],
    mask: &[bool],
) -> Result<LikelihoodTerms<T>, MtppError> {
    let n = mask.len();
    if let Some(&mark) = target_marks.iter().zip(mask).find(|(&c, &m)| m && c >= cfg.num_marks).map(|(c, _)| c) {
        return Err(MtppError::MarkOutOfRange {
            mark,
            num_marks: cfg.num_marks,
        });
    }
    let h_prev = tape.concat(&[&w.h0, &tape.slice(h, 0, 0, n - 1)?], 0)?;
    let prev_times = tape.concat(&[&Tensor::zeros(&[1, 1]), &tape.slice(cond_times, 0, 0, n - 1)?], 0)?;
    let elapsed = tape.sub(target_times, &prev_times)?;

    let base = tape.add(&tape.matmul(&h_prev, &w.int_v)?, &w.int_b)?;
    let pre = tape.add(&base, &tape.mul(&elapsed, &w.int_w)?)?;
    let log_intensity = tape.log(&tape.softplus(&pre)?)?;

    // Trapezoid over s in [0, elapsed] on k_int points, done for all
    // intervals at once: grid[i, k] = base_i + w * elapsed_i * k / (K - 1).
    let k = cfg.k_int;
    let denom = T::from_usize_lossy(k - 1);
    let fractions = Tensor::row((0..k).map(|j| T::from_usize_lossy(j) / denom).collect());
    let mut weights = vec![T::one() / denom; k];
    weights[0] = T::lit(0.5) / denom;
    weights[k - 1] = T::lit(0.5) / denom;
    let grid = tape.add(
        &tape.matmul(&base, &Tensor::ones(&[1, k]))?,
        &tape.mul(&tape.matmul(&elapsed, &fractions)?, &w.int_w)?,
    )?;
    let mean_rate = tape.matmul(&tape.softplus(&grid)?, &Tensor::column(weights))?;
    let compensator = tape.mul(&mean_rate, &elapsed)?;

    let logits = tape.add(
        &tape.matmul(&h_prev, &tape.transpose(&w.mark_w)?)?,
        &repeat_row(tape, &w.mark_b, n)?,
    )?;
    let log_probs = tape.log_softmax(&logits, 1)?;
    let picked = tape.sum(&tape.mul(&log_probs, &one_hot(target_marks, cfg.num_marks))?, Some(1))?;
    let mark_log_prob = tape.reshape(&picked, &[n, 1])?;

    let per_event = tape.add(&tape.sub(&log_intensity, &compensator)?, &mark_log_prob)?;
    let per_event = tape.mul(&per_event, &mask_column(mask))?;
    let log_likelihood = tape.sum(&per_event, None)?;
    Ok(LikelihoodTerms {
        log_intensity,
        compensator,
        mark_log_prob,
        log_likelihood,
    })
}

fn sequence_nll<T: Scalar>(
    tape: &Tape<T>,
    cfg: &MtppConfig,
    w: &MtppVars<T>,
    input: &SequenceInput<T>,
) -> Result<Tensor<T>, MtppError> {
    let h = encode(tape, cfg, w, input)?;
    let terms = log_likelihood_terms(tape, cfg, w, &h, &input.times, &input.times, &input.labels, &input.mask)?;
    Ok(tape.neg(&terms.log_likelihood)?)
}

/// Negative log-likelihood of a clean sequence.
pub fn nll_clean<T: Scalar>(model: &MtppModel<T>, seq: &Sequence<T>) -> Result<T, MtppError> {
    let tape = Tape::new();
    let w = model.params.constants();
    let input = SequenceInput::from_sequence(seq, model.config.num_marks);
    Ok(sequence_nll(&tape, &model.config, &w, &input)?.item())
}

/// Negative log-likelihood of row `b` of a padded batch; equals
/// [`nll_clean`] of the unpadded sequence.
pub fn nll_padded<T: Scalar>(model: &MtppModel<T>, batch: &PaddedBatch<T>, b: usize) -> Result<T, MtppError> {
    let tape = Tape::new();
    let w = model.params.constants();
    let input = SequenceInput::from_padded(batch, b);
    Ok(sequence_nll(&tape, &model.config, &w, &input)?.item())
}

/// [`nll_clean`] together with its gradient for every parameter.
pub fn nll_with_gradients<T: Scalar>(
    model: &MtppModel<T>,
    seq: &Sequence<T>,
) -> Result<(T, GroupGrads<T>), MtppError> {
    let tape = Tape::new();
    let w = model.params.bind(&tape);
    let input = SequenceInput::from_sequence(seq, model.config.num_marks);
    let loss = sequence_nll(&tape, &model.config, &w, &input)?;
    let grads = tape.backward(&loss)?;
    Ok((loss.item(), w.gradients(&grads)))
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `softplus(v . h + w * (t - t_last) + b)`.
pub fn intensity<T: Scalar>(model: &MtppModel<T>, h: &[T], t: T, t_last: T) -> Result<T, MtppError> {
    if t < t_last {
        return Err(MtppError::QueryBeforeLast {
            t: t.as_f64(),
            last: t_last.as_f64(),
        });
    }
    let p = &model.params;
    Ok(scalar::softplus(
        dot(&p.int_v.values, h) + p.int_w.values[0] * (t - t_last) + p.int_b.values[0],
    ))
}

pub fn mark_logits<T: Scalar>(model: &MtppModel<T>, h: &[T]) -> Vec<T> {
    let p = &model.params;
    let d = model.config.dim;
    (0..model.config.num_marks)
        .map(|c| dot(&p.mark_w.values[c * d..(c + 1) * d], h) + p.mark_b.values[c])
        .collect()
}

pub fn mark_dist<T: Scalar>(model: &MtppModel<T>, h: &[T]) -> Vec<T> {
    let logits = mark_logits(model, h);
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / z).collect()
}
