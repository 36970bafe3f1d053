use crate::scalar::Scalar;

use super::{CtesError, Sequence};

/// Spacing of padding events after the last real event.
pub const PAD_SPACING: f64 = 1.0;

/// Sequences padded at the tail to a common length.
///
/// Padding events carry mark id `num_marks` and times
/// `last + k * PAD_SPACING`; `mask[b][i]` is true for real events only.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch<T> {
    pub len: usize,
    pub pad_mark: usize,
    pub times: Vec<Vec<T>>,
    pub marks: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
}

impl<T: Scalar> PaddedBatch<T> {
    pub fn batch_size(&self) -> usize {
        self.times.len()
    }

    /// Recovers the unpadded sequence at `b`.
    pub fn unpadded(&self, b: usize) -> Sequence<T> {
        let n = self.lengths[b];
        Sequence::new(self.times[b][..n].to_vec(), self.marks[b][..n].to_vec())
            .expect("padded batch holds valid prefixes")
    }
}

pub fn pad_batch<T: Scalar>(
    seqs: &[Sequence<T>],
    len: usize,
    num_marks: usize,
) -> Result<PaddedBatch<T>, CtesError> {
    let spacing = T::lit(PAD_SPACING);
    let mut batch = PaddedBatch {
        len,
        pad_mark: num_marks,
        times: Vec::with_capacity(seqs.len()),
        marks: Vec::with_capacity(seqs.len()),
        mask: Vec::with_capacity(seqs.len()),
        lengths: Vec::with_capacity(seqs.len()),
    };
    for s in seqs {
        if s.len() > len {
            return Err(CtesError::TooLong { len: s.len(), max: len });
        }
        let last = s.times()[s.len() - 1];
        let mut times = s.times().to_vec();
        let mut marks = s.marks().to_vec();
        for k in 1..=(len - s.len()) {
            times.push(last + spacing * T::from_usize_lossy(k));
            marks.push(num_marks);
        }
        let mut mask = vec![true; s.len()];
        mask.resize(len, false);
        batch.times.push(times);
        batch.marks.push(marks);
        batch.mask.push(mask);
        batch.lengths.push(s.len());
    }
    Ok(batch)
}
