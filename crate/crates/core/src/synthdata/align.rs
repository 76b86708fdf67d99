//! Word-level temporal alignment: averaging a high-rate sequence over
//! per-token intervals so modalities sampled at different rates land on a
//! common token grid.

use super::WordIntervals;
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Result of [`word_align`]: one row per token interval.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSequence {
    /// `(len(intervals), d)` array of per-interval means.
    pub values: ArrayD<f64>,
    /// `empty[t]` marks intervals that covered no rows; their output row is
    /// all zeros and downstream consumers must tolerate the padding.
    pub empty: Vec<bool>,
}

/// Average `seq` rows over each interval: output step `t` is the mean of the
/// rows whose time lies in `[s_t, e_t)`, where row `i` sits at time `i`.
///
/// Intervals given in other time units must be rescaled to row units first
/// ([`WordIntervals::scaled`]). Intervals covering no rows — too narrow, or
/// reaching past the end of `seq` — produce a zero row flagged in
/// [`AlignedSequence::empty`] instead of an error, so ragged annotations
/// degrade to padding that downstream fusion must tolerate.
pub fn word_align(seq: &ArrayD<f64>, intervals: &WordIntervals) -> Result<AlignedSequence> {
    if seq.ndim() != 2 {
        return Err(Error::dim(
            "word_align",
            format!("sequence must be (T, d), got shape {:?}", seq.shape()),
        ));
    }
    let rows = seq.shape()[0];
    let d = seq.shape()[1];
    let t_out = intervals.len();
    let mut out = ArrayD::zeros(IxDyn(&[t_out, d]));
    let mut empty = vec![false; t_out];
    for (t, &(s, e)) in intervals.as_slice().iter().enumerate() {
        let first = s.ceil() as usize;
        let mut count = 0usize;
        for i in first..rows {
            if (i as f64) >= e {
                break;
            }
            for k in 0..d {
                out[[t, k]] += seq[[i, k]];
            }
            count += 1;
        }
        if count == 0 {
            empty[t] = true;
        } else {
            for k in 0..d {
                out[[t, k]] /= count as f64;
            }
        }
    }
    Ok(AlignedSequence { values: out, empty })
}
