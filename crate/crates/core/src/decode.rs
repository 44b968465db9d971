//! Decoding and evaluation: best-path CTC decoding, attention beam
//! search, Levenshtein distance, and character error rate.

use crate::error::{CoreError, Result};
use crate::targets::collapse_repetitions;

/// Candidate output of the attention decoder. `score` is the summed
/// token log-probability including EOS when terminated.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub terminated: bool,
}

/// Per-frame argmax (lowest index on ties), collapse repeats, drop
/// blanks.
pub fn ctc_greedy_decode(frame_scores: &[f64], t: usize, classes: usize, blank: usize) -> Result<Vec<usize>> {
    if t * classes != frame_scores.len() || classes == 0 {
        return Err(CoreError::Shape {
            op: "ctc_greedy_decode",
            detail: format!("{} scores for {} x {}", frame_scores.len(), t, classes),
        });
    }
    if t == 0 {
        return Ok(Vec::new());
    }
    let path: Vec<usize> = frame_scores
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    Ok(collapse_repetitions(&path)?
        .into_iter()
        .filter(|&c| c != blank)
        .collect())
}

/// Beam search over an autoregressive scorer, returning the final
/// pool. `score_prefix` maps a prefix starting with SOS to next-token
/// log-probabilities over the vocabulary. Terminated hypotheses stay
/// in the pool and compete on raw score during pruning; ties prefer
/// earlier termination, then lexicographic tokens. The pool keeps the
/// pruning order (best raw score first) so callers can rescore it.
pub fn attention_beam<F>(
    mut score_prefix: F,
    vocab: usize,
    sos: usize,
    eos: usize,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    if beam_size == 0 {
        return Err(CoreError::Config("beam size must be at least 1".into()));
    }
    if eos >= vocab || sos >= vocab {
        return Err(CoreError::Config(format!(
            "sentinels {}/{} outside vocabulary {}",
            sos, eos, vocab
        )));
    }
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        terminated: false,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.terminated) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in &beam {
            if h.terminated {
                candidates.push(h.clone());
                continue;
            }
            let mut prefix = Vec::with_capacity(h.tokens.len() + 1);
            prefix.push(sos);
            prefix.extend_from_slice(&h.tokens);
            let logp = score_prefix(&prefix)?;
            if logp.len() != vocab {
                return Err(CoreError::Shape {
                    op: "attention_decode",
                    detail: format!("scorer returned {} entries for vocab {}", logp.len(), vocab),
                });
            }
            for (tok, &lp) in logp.iter().enumerate() {
                if tok == sos {
                    continue;
                }
                if tok == eos {
                    candidates.push(Hypothesis {
                        tokens: h.tokens.clone(),
                        score: h.score + lp,
                        terminated: true,
                    });
                } else {
                    let mut tokens = h.tokens.clone();
                    tokens.push(tok);
                    candidates.push(Hypothesis {
                        tokens,
                        score: h.score + lp,
                        terminated: false,
                    });
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| b.terminated.cmp(&a.terminated))
                .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        beam = candidates;
    }
    Ok(beam)
}

/// Beam search returning a single hypothesis: the terminated pool
/// entry with the best per-token log-probability, so short outputs
/// hold no structural advantage; `score` stays the raw sum. Open
/// hypotheses come back flagged rather than erroring when nothing
/// terminated; the caller decides whether a capped output is
/// acceptable.
pub fn attention_decode<F>(
    score_prefix: F,
    vocab: usize,
    sos: usize,
    eos: usize,
    beam_size: usize,
    max_len: usize,
) -> Result<Hypothesis>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let beam = attention_beam(score_prefix, vocab, sos, eos, beam_size, max_len)?;
    let pick = beam
        .iter()
        .filter(|h| h.terminated)
        .max_by(|a, b| {
            normalized(a)
                .partial_cmp(&normalized(b))
                .unwrap()
                .then_with(|| b.tokens.len().cmp(&a.tokens.len()))
                .then_with(|| b.tokens.cmp(&a.tokens))
        })
        .cloned();
    Ok(pick.unwrap_or_else(|| beam.into_iter().next().unwrap()))
}

/// Per-token log-probability of a terminated hypothesis; the +1
/// counts the EOS step so the empty output has a defined value.
pub fn normalized(h: &Hypothesis) -> f64 {
    h.score / (h.tokens.len() + 1) as f64
}

/// Levenshtein distance with unit costs, rolling single row.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ai) in a.iter().enumerate() {
        let mut prev = row[0];
        row[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev + usize::from(ai != bj);
            prev = row[j + 1];
            row[j + 1] = sub.min(prev + 1).min(row[j] + 1);
        }
    }
    row[b.len()]
}

/// Corpus character error rate: total edit distance over total
/// reference length.
pub fn cer(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(CoreError::Shape {
            op: "cer",
            detail: format!("{} references against {} hypotheses", refs.len(), hyps.len()),
        });
    }
    let total_ref: usize = refs.iter().map(|r| r.len()).sum();
    if total_ref == 0 {
        return Err(CoreError::Numerical("zero total reference length".into()));
    }
    let total_dist: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    Ok(total_dist as f64 / total_ref as f64)
}
