//! Structure alignment losses between source and target mini-batches.
//!
//! Both losses are linear-kernel MMD estimates: per variable, the
//! distance between the batch means of the attention weights, summed
//! over variables. `L_α` aligns the segment-length distributions,
//! `L_β` the flattened associative-structure weights.

use serde::{Deserialize, Serialize};

use crate::series::Domain;
use crate::tape::{Tape, TensorId};
use crate::{Error, Result};

/// Guard on the norm backward division; forward values are exact.
const NORM_EPS: f64 = 1e-8;

/// How the mean-difference distance enters the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentNorm {
    /// `‖mean_S − mean_T‖₂` — the written form of the losses.
    L2,
    /// `‖mean_S − mean_T‖₂²` — smooth-at-zero variant.
    SquaredL2,
}

/// Attention weights of one mini-batch, still on the tape.
///
/// `alpha[s][m]` is sample `s`'s length-`N` simplex for variable `m`;
/// `beta[s][m]` the flattened `(M-1)·N` structure simplex. `beta` rows
/// are absent entirely when `M == 1`.
pub struct BatchWeights {
    pub domain: Domain,
    pub alpha: Vec<Vec<TensorId>>,
    pub beta: Vec<Vec<TensorId>>,
}

impl BatchWeights {
    pub fn batch_size(&self) -> usize {
        self.alpha.len()
    }

    fn num_vars(&self) -> Result<usize> {
        if self.alpha.is_empty() {
            return Err(Error::Invalid("alignment over an empty batch".into()));
        }
        Ok(self.alpha[0].len())
    }
}

fn mean_difference_distance(
    tape: &mut Tape,
    src: &[TensorId],
    tgt: &[TensorId],
    norm: AlignmentNorm,
) -> TensorId {
    let src_stack = tape.stack_rows(src);
    let tgt_stack = tape.stack_rows(tgt);
    let src_mean = tape.mean(src_stack, Some(0));
    let tgt_mean = tape.mean(tgt_stack, Some(0));
    let diff = tape.sub(src_mean, tgt_mean);
    match norm {
        AlignmentNorm::L2 => tape.norm2(diff, NORM_EPS),
        AlignmentNorm::SquaredL2 => tape.dot(diff, diff),
    }
}

fn weight_alignment_loss(
    tape: &mut Tape,
    src: &BatchWeights,
    tgt: &BatchWeights,
    norm: AlignmentNorm,
    pick_beta: bool,
) -> Result<TensorId> {
    let m = src.num_vars()?;
    if m != tgt.num_vars()? {
        return Err(Error::Shape("source and target batches disagree on M".into()));
    }
    let rows_of = |b: &BatchWeights, var: usize| -> Vec<TensorId> {
        let table = if pick_beta { &b.beta } else { &b.alpha };
        table.iter().map(|sample| sample[var]).collect()
    };

    // beta is empty with a single variable: zero by convention.
    if pick_beta && (src.beta.is_empty() || src.beta[0].is_empty()) {
        return Ok(tape.scalar(0.0));
    }

    let mut total: Option<TensorId> = None;
    for var in 0..m {
        let term = {
            let s = rows_of(src, var);
            let t = rows_of(tgt, var);
            mean_difference_distance(tape, &s, &t, norm)
        };
        total = Some(match total {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    Ok(total.unwrap())
}

/// `L_α = Σ_m ‖ mean_src(α^m) − mean_tgt(α^m) ‖`.
pub fn alpha_alignment_loss(
    tape: &mut Tape,
    src: &BatchWeights,
    tgt: &BatchWeights,
    norm: AlignmentNorm,
) -> Result<TensorId> {
    weight_alignment_loss(tape, src, tgt, norm, false)
}

/// `L_β = Σ_m ‖ mean_src(β^m) − mean_tgt(β^m) ‖`; zero when `M == 1`.
pub fn beta_alignment_loss(
    tape: &mut Tape,
    src: &BatchWeights,
    tgt: &BatchWeights,
    norm: AlignmentNorm,
) -> Result<TensorId> {
    weight_alignment_loss(tape, src, tgt, norm, true)
}
