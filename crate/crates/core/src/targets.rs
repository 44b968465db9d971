//! Span masking of encoder inputs and decoder target preparation.

use rand::Rng;

use crate::error::{CoreError, Result};

/// Which frames of one utterance are masked.
///
/// Masked positions are the union of fixed-length spans, one per
/// selected start frame, truncated at the end of the utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
    pub selection_prob: f64,
    pub span_length: usize,
}

impl MaskSpec {
    pub fn indices(&self) -> Vec<usize> {
        self.masked
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn fraction(&self) -> f64 {
        if self.masked.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.masked.len() as f64
        }
    }
}

/// Select each frame independently with probability `p`; every selected
/// frame masks itself and the following `span_length - 1` frames,
/// truncated at `t`. Overlaps are unioned.
pub fn sample_mask_spans<R: Rng>(t: usize, p: f64, span_length: usize, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&p) || p <= 0.0 {
        return Err(CoreError::Config(format!("selection probability {} outside (0,1)", p)));
    }
    if span_length == 0 {
        return Err(CoreError::Config("span length must be positive".into()));
    }
    let mut masked = vec![false; t];
    for start in 0..t {
        if rng.gen::<f64>() < p {
            let end = (start + span_length).min(t);
            for m in &mut masked[start..end] {
                *m = true;
            }
        }
    }
    Ok(MaskSpec {
        masked,
        selection_prob: p,
        span_length,
    })
}

/// Sampling against masks with no true entries is retried a bounded
/// number of times; all-unmasked draws carry no prediction loss.
pub fn sample_mask_nonempty<R: Rng>(
    t: usize,
    p: f64,
    span_length: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    for _ in 0..10 {
        let spec = sample_mask_spans(t, p, span_length, rng)?;
        if spec.count() > 0 {
            return Ok(spec);
        }
    }
    Err(CoreError::Numerical(format!(
        "no masked frames after 10 draws (t={}, p={})",
        t, p
    )))
}

/// Consecutive runs of equal IDs as (id, run length) pairs.
pub fn collapse_runs(ids: &[usize]) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &id in ids {
        match runs.last_mut() {
            Some((last, n)) if *last == id => *n += 1,
            _ => runs.push((id, 1)),
        }
    }
    runs
}

/// Replace every run of equal consecutive IDs by a single ID.
pub fn collapse_repetitions(ids: &[usize]) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(CoreError::Shape {
            op: "collapse_repetitions",
            detail: "empty input".into(),
        });
    }
    Ok(collapse_runs(ids).into_iter().map(|(id, _)| id).collect())
}

/// Teacher-forcing frame for the decoder: `input` starts with SOS,
/// `target` ends with EOS, shifted by one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderTargetSeq {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub sos: usize,
    pub eos: usize,
}

impl DecoderTargetSeq {
    /// The collapsed sequence without sentinels.
    pub fn strip(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

/// Sentinels live just past the cluster vocabulary: SOS = K, EOS = K+1.
pub fn add_sos_eos(seq: &[usize], vocab_k: usize) -> Result<DecoderTargetSeq> {
    if let Some(&bad) = seq.iter().find(|&&s| s >= vocab_k) {
        return Err(CoreError::Index {
            op: "add_sos_eos",
            detail: format!("id {} outside cluster vocabulary {}", bad, vocab_k),
        });
    }
    let sos = vocab_k;
    let eos = vocab_k + 1;
    let mut input = Vec::with_capacity(seq.len() + 1);
    input.push(sos);
    input.extend_from_slice(seq);
    let mut target = Vec::with_capacity(seq.len() + 1);
    target.extend_from_slice(seq);
    target.push(eos);
    Ok(DecoderTargetSeq {
        input,
        target,
        sos,
        eos,
    })
}

/// Full decoder target preparation for one utterance: collapse, then
/// frame with sentinels. Depends only on the cluster IDs, never on the
/// mask.
pub fn decoder_targets(ids: &[usize], vocab_k: usize) -> Result<DecoderTargetSeq> {
    add_sos_eos(&collapse_repetitions(ids)?, vocab_k)
}
