//! Matching loss over the two per-prior heads plus classification loss over
//! the fused logits.
//!
//! Head semantics for the matching loss: in head `i`, index 1 means "the input
//! matches prior `i`" and index 0 means "does not match", so head `i` targets
//! index 1 exactly when the label is `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BatchForward, ClassWiseOutput};
use crate::numerics::{softmax_rows, Real, Tape, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

/// Which class probability the classification loss rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossConvention {
    /// Cross-entropy on the sample's own class: `-ln y'[label]`.
    #[default]
    ProseConsistent,
    /// `-label * ln y'[0] - (1 - label) * ln y'[1]`.
    LiteralPaper,
}

impl LossConvention {
    pub fn cls_target(self, label: u8) -> usize {
        match self {
            LossConvention::ProseConsistent => label as usize,
            LossConvention::LiteralPaper => 1 - label as usize,
        }
    }
}

impl std::str::FromStr for LossConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "prose_consistent" => Ok(Self::ProseConsistent),
            "literal_paper" => Ok(Self::LiteralPaper),
            other => Err(Error::config(format!(
                "unknown loss convention `{other}` (expected prose_consistent or literal_paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub match_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
    pub convention: LossConvention,
}

fn check_label(label: u8) -> Result<()> {
    if label > 1 {
        return Err(Error::data(format!("label {label} is not 0 or 1")));
    }
    Ok(())
}

fn nll(p: f64) -> f64 {
    -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

fn probs<F: Real>(logits: [F; 2]) -> [f64; 2] {
    let p = softmax_rows(&ndarray::Array2::from_shape_vec((1, 2), logits.to_vec()).expect("1x2"));
    [p[[0, 0]].as_f64(), p[[0, 1]].as_f64()]
}

/// Matching loss from per-head probability pairs.
pub fn matching_loss_from_probs(head_c0: [f64; 2], head_c1: [f64; 2], label: u8) -> Result<f64> {
    check_label(label)?;
    let (t0, t1) = if label == 1 { (0, 1) } else { (1, 0) };
    Ok(nll(head_c0[t0]) + nll(head_c1[t1]))
}

pub fn classification_loss_from_probs(fused: [f64; 2], label: u8, convention: LossConvention) -> Result<f64> {
    check_label(label)?;
    Ok(nll(fused[convention.cls_target(label)]))
}

pub fn matching_loss<F: Real>(output: &ClassWiseOutput<F>, label: u8) -> Result<f64> {
    matching_loss_from_probs(probs(output.y_c0), probs(output.y_c1), label)
}

pub fn classification_loss<F: Real>(output: &ClassWiseOutput<F>, label: u8, convention: LossConvention) -> Result<f64> {
    classification_loss_from_probs(probs(output.y_prime), label, convention)
}

pub fn total_loss<F: Real>(output: &ClassWiseOutput<F>, label: u8, convention: LossConvention) -> Result<LossBreakdown> {
    let match_loss = matching_loss(output, label)?;
    let cls_loss = classification_loss(output, label, convention)?;
    Ok(LossBreakdown {
        match_loss,
        cls_loss,
        total: match_loss + cls_loss,
        convention,
    })
}

/// Mean of the per-sample breakdowns.
pub fn mean_breakdown(items: &[LossBreakdown]) -> Option<LossBreakdown> {
    let first = items.first()?;
    let n = items.len() as f64;
    let match_loss = items.iter().map(|b| b.match_loss).sum::<f64>() / n;
    let cls_loss = items.iter().map(|b| b.cls_loss).sum::<f64>() / n;
    Some(LossBreakdown {
        match_loss,
        cls_loss,
        total: match_loss + cls_loss,
        convention: first.convention,
    })
}

/// Loss nodes of a batch on the tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// Batch mean of matching plus classification loss.
    pub total: Var,
    pub match_sum: Var,
    pub cls_sum: Var,
}

pub fn batch_loss<F: Real>(
    tape: &mut Tape<'_, F>,
    fwd: &BatchForward,
    labels: &[u8],
    convention: LossConvention,
) -> Result<BatchLoss> {
    for &l in labels {
        check_label(l)?;
    }
    let (batch, _) = tape.shape(fwd.fused);
    if labels.len() != batch {
        return Err(Error::config(format!("{} labels for a batch of {batch}", labels.len())));
    }
    let head_targets: Vec<usize> = labels
        .iter()
        .flat_map(|&l| if l == 1 { [0, 1] } else { [1, 0] })
        .collect();
    let cls_targets: Vec<usize> = labels.iter().map(|&l| convention.cls_target(l)).collect();
    let match_sum = tape.clamped_nll(fwd.logits, &head_targets, PROB_CLAMP)?;
    let cls_sum = tape.clamped_nll(fwd.fused, &cls_targets, PROB_CLAMP)?;
    let sum = tape.add(match_sum, cls_sum)?;
    let total = tape.scale(sum, F::from_f64_lossy(1.0 / batch as f64))?;
    Ok(BatchLoss {
        total,
        match_sum,
        cls_sum,
    })
}
