//! Connectionist temporal classification loss internals.
//!
//! Forward (alpha) and suffix (beta) recursions over the
//! blank-interleaved label, entirely in log space. The alpha values
//! include the emission at their own frame; the beta values cover
//! strictly later frames, so total probability at any frame t is
//! logsumexp_s(alpha[t][s] + beta[t][s]).

use crate::error::{CoreError, Result};

const LOG_ZERO: f64 = f64::NEG_INFINITY;

fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == LOG_ZERO {
        return b;
    }
    if b == LOG_ZERO {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn logsumexp3(a: f64, b: f64, c: f64) -> f64 {
    logsumexp2(logsumexp2(a, b), c)
}

/// Blank-interleaved label: [blank, l1, blank, l2, ..., blank].
fn extend(label: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * label.len() + 1);
    ext.push(blank);
    for &l in label {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Fewest frames that can emit the label: one per symbol plus a
/// separating blank between each adjacent repeat.
pub fn min_frames(label: &[usize]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

pub fn check_admissible(label: &[usize], blank: usize, classes: usize, frames: usize) -> Result<()> {
    if blank >= classes {
        return Err(CoreError::Index {
            op: "ctc_nll",
            detail: format!("blank {} outside {} classes", blank, classes),
        });
    }
    if let Some(&bad) = label.iter().find(|&&l| l >= classes || l == blank) {
        return Err(CoreError::Index {
            op: "ctc_nll",
            detail: format!("label symbol {} invalid for {} classes with blank {}", bad, classes, blank),
        });
    }
    let need = min_frames(label);
    if frames < need {
        return Err(CoreError::CtcInfeasible {
            label_len: label.len(),
            min_frames: need,
            frames,
        });
    }
    Ok(())
}

/// Alpha table [t, s] with emissions included at frame t.
fn alphas(logp: &[f64], t: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut a = vec![LOG_ZERO; t * s];
    a[0] = logp[ext[0]];
    if s > 1 {
        a[1] = logp[ext[1]];
    }
    for ti in 1..t {
        let frame = &logp[ti * c..(ti + 1) * c];
        for si in 0..s {
            let stay = a[(ti - 1) * s + si];
            let step = if si >= 1 { a[(ti - 1) * s + si - 1] } else { LOG_ZERO };
            // Skipping over a blank is allowed only between distinct symbols.
            let skip = if si >= 2 && ext[si] != ext[0] && ext[si] != ext[si - 2] {
                a[(ti - 1) * s + si - 2]
            } else {
                LOG_ZERO
            };
            let total = logsumexp3(stay, step, skip);
            if total != LOG_ZERO {
                a[ti * s + si] = total + frame[ext[si]];
            }
        }
    }
    a
}

/// Beta table [t, s] covering frames strictly after t.
fn betas(logp: &[f64], t: usize, c: usize, ext: &[usize]) -> Vec<f64> {
    let s = ext.len();
    let mut b = vec![LOG_ZERO; t * s];
    b[(t - 1) * s + s - 1] = 0.0;
    if s > 1 {
        b[(t - 1) * s + s - 2] = 0.0;
    }
    for ti in (0..t - 1).rev() {
        let next = &logp[(ti + 1) * c..(ti + 2) * c];
        for si in 0..s {
            let stay = b[(ti + 1) * s + si] + next[ext[si]];
            let step = if si + 1 < s {
                b[(ti + 1) * s + si + 1] + next[ext[si + 1]]
            } else {
                LOG_ZERO
            };
            let skip = if si + 2 < s && ext[si + 2] != ext[0] && ext[si + 2] != ext[si] {
                b[(ti + 1) * s + si + 2] + next[ext[si + 2]]
            } else {
                LOG_ZERO
            };
            b[ti * s + si] = logsumexp3(stay, step, skip);
        }
    }
    b
}

fn total_from_alphas(a: &[f64], t: usize, s: usize) -> f64 {
    let last = &a[(t - 1) * s..t * s];
    if s > 1 {
        logsumexp2(last[s - 1], last[s - 2])
    } else {
        last[s - 1]
    }
}

/// Negative log-probability of the label. Inputs must already pass
/// `check_admissible`.
pub fn forward_nll(logp: &[f64], t: usize, c: usize, label: &[usize], blank: usize) -> f64 {
    let ext = extend(label, blank);
    let a = alphas(logp, t, c, &ext);
    -total_from_alphas(&a, t, ext.len())
}

/// Gradient of the negative log-probability with respect to each
/// logp entry, treating entries as free variables.
pub fn grad_wrt_logp(logp: &[f64], t: usize, c: usize, label: &[usize], blank: usize) -> Vec<f64> {
    let ext = extend(label, blank);
    let s = ext.len();
    let a = alphas(logp, t, c, &ext);
    let b = betas(logp, t, c, &ext);
    let log_total = total_from_alphas(&a, t, s);
    let mut grad = vec![0.0; t * c];
    // Occupancy of class k at frame t is the share of path mass through
    // states labeled k; d(-logP)/dlogp[t,k] = -occupancy.
    let mut per_class = vec![LOG_ZERO; c];
    for ti in 0..t {
        per_class.fill(LOG_ZERO);
        for si in 0..s {
            let post = a[ti * s + si] + b[ti * s + si];
            if post != LOG_ZERO {
                per_class[ext[si]] = logsumexp2(per_class[ext[si]], post);
            }
        }
        for k in 0..c {
            if per_class[k] != LOG_ZERO {
                grad[ti * c + k] = -(per_class[k] - log_total).exp();
            }
        }
    }
    grad
}
