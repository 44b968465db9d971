//! Training objectives: masked prediction, collapsed-sequence loss,
//! their weighted pretraining combination, CTC, and the joint
//! CTC/attention finetuning combination.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, TensorId};
use crate::targets::MaskSpec;

/// Pretraining mix weight: alpha on masked prediction, 1 - alpha on
/// the decoder sequence loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointSslWeights {
    pub alpha: f64,
}

impl JointSslWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Config(format!("alpha {} outside [0,1]", alpha)));
        }
        Ok(JointSslWeights { alpha })
    }
}

/// Finetuning mix weight: beta on CTC, 1 - beta on attention.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JointFinetuneWeights {
    pub beta: f64,
}

impl JointFinetuneWeights {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(CoreError::Config(format!("beta {} outside [0,1]", beta)));
        }
        Ok(JointFinetuneWeights { beta })
    }
}

/// Mean cross-entropy of cluster targets over masked positions only.
/// Unmasked positions contribute nothing, in value and in gradient.
pub fn masked_prediction_loss(
    g: &mut Graph,
    unit_logits: TensorId,
    targets: &[usize],
    mask: &MaskSpec,
) -> Result<TensorId> {
    let t = g.shape(unit_logits)[0];
    if targets.len() != t || mask.len() != t {
        return Err(CoreError::Shape {
            op: "masked_prediction_loss",
            detail: format!(
                "{} logit rows, {} targets, mask of {}",
                t,
                targets.len(),
                mask.len()
            ),
        });
    }
    let rows = mask.indices();
    if rows.is_empty() {
        return Err(CoreError::Numerical("mask selects zero frames".into()));
    }
    let logp = g.log_softmax(unit_logits)?;
    g.gather_nll_mean(logp, targets, &rows)
}

/// Label-smoothed cross-entropy over a teacher-forced target sequence,
/// averaged over positions. Smoothing eps spreads eps/V onto every
/// class; eps = 0 is plain cross-entropy.
pub fn sequence_loss(
    g: &mut Graph,
    dec_logits: TensorId,
    targets: &[usize],
    smoothing: f64,
) -> Result<TensorId> {
    let l = g.shape(dec_logits)[0];
    if targets.len() != l {
        return Err(CoreError::Shape {
            op: "sequence_loss",
            detail: format!("{} logit rows against {} targets", l, targets.len()),
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(CoreError::Config(format!("label smoothing {} outside [0,1)", smoothing)));
    }
    let rows: Vec<usize> = (0..l).collect();
    let logp = g.log_softmax(dec_logits)?;
    let nll = g.gather_nll_mean(logp, targets, &rows)?;
    if smoothing == 0.0 {
        return Ok(nll);
    }
    // (1-eps) * CE(target) + eps * mean over classes of (-log p).
    let spread = g.mean_all(logp)?;
    let a = g.scale(nll, 1.0 - smoothing)?;
    let b = g.scale(spread, -smoothing)?;
    g.add(a, b)
}

/// alpha * L_M + (1 - alpha) * L_S.
pub fn joint_ssl_loss(
    g: &mut Graph,
    l_m: TensorId,
    l_s: TensorId,
    w: JointSslWeights,
) -> Result<TensorId> {
    let a = g.scale(l_m, w.alpha)?;
    let b = g.scale(l_s, 1.0 - w.alpha)?;
    g.add(a, b)
}

/// CTC negative log-likelihood of the label, through a log-softmax
/// over frame logits (blank id 0 by crate convention).
pub fn ctc_loss(g: &mut Graph, logits: TensorId, label: &[usize], blank: usize) -> Result<TensorId> {
    let logp = g.log_softmax(logits)?;
    g.ctc_nll(logp, label, blank)
}

/// beta * CTC + (1 - beta) * attention.
pub fn joint_finetune_loss(
    g: &mut Graph,
    ctc: TensorId,
    attention: TensorId,
    w: JointFinetuneWeights,
) -> Result<TensorId> {
    let a = g.scale(ctc, w.beta)?;
    let b = g.scale(attention, 1.0 - w.beta)?;
    g.add(a, b)
}

/// Equal-weight mean of per-utterance scalar losses.
pub fn mean_of(g: &mut Graph, parts: &[TensorId]) -> Result<TensorId> {
    if parts.is_empty() {
        return Err(CoreError::Shape {
            op: "mean_of",
            detail: "no loss terms".into(),
        });
    }
    let stacked = g.concat_rows(parts)?;
    g.mean_all(stacked)
}
