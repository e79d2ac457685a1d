//! Training losses, all built on the reverse-mode tape: closed-set cross
//! entropy, a per-location distillation loss between two feature maps, and
//! the one-vs-all binary losses (plain and edge-coupled) with hard negative
//! mining.
//!
//! Probability terms share one clamp, -ln(min(p + 1e-8, 1)), so every loss
//! stays finite for any finite logits.

use crate::autodiff::{Graph, VarId};
use crate::error::{Error, Result};

/// Clamp offset inside every -ln(p) term.
pub const PROB_EPS: f64 = 1e-8;

fn check_labels(labels: &[usize], k: usize, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch
        )));
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::data(format!(
                "label {} at batch position {} is outside the {} known classes",
                y, i, k
            )));
        }
    }
    Ok(())
}

/// Batch-mean cross entropy over closed-set class logits [B, K].
pub fn ce_loss_tape(g: &mut Graph, class_logits: VarId, labels: &[usize]) -> Result<VarId> {
    let shape = g.value(class_logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape(format!(
            "class logits must be [B,K], got {:?}",
            shape
        )));
    }
    check_labels(labels, shape[1], shape[0])?;
    let ls = g.log_softmax(class_logits, 1)?;
    let picked = g.select_per_row(ls, labels.to_vec())?;
    let p = g.exp(picked);
    let lp = g.ln_eps(p, PROB_EPS);
    let neg = g.neg(lp);
    Ok(g.mean_all(neg))
}

/// Distillation between two feature maps [B, C, H, W]: per-location channel
/// softmax at temperature `tau`, KL(teacher || student), averaged over
/// locations and the batch. The teacher side is detached inside, so its
/// producer receives no gradient.
pub fn kd_loss_tape(
    g: &mut Graph,
    student_prepool: VarId,
    teacher_prepool: VarId,
    tau: f64,
) -> Result<VarId> {
    if tau <= 0.0 {
        return Err(Error::config("tau must be positive"));
    }
    let s_shape = g.value(student_prepool).shape().to_vec();
    let t_shape = g.value(teacher_prepool).shape().to_vec();
    if s_shape.len() != 4 || s_shape != t_shape {
        return Err(Error::shape(format!(
            "distillation needs matching [B,C,H,W] maps, got {:?} vs {:?}",
            s_shape, t_shape
        )));
    }
    let (b, h, w) = (s_shape[0], s_shape[2], s_shape[3]);
    let teacher = g.detach(teacher_prepool);
    let s_scaled = g.mul_scalar(student_prepool, 1.0 / tau);
    let t_scaled = g.mul_scalar(teacher, 1.0 / tau);
    let ls_s = g.log_softmax(s_scaled, 1)?;
    let ls_t = g.log_softmax(t_scaled, 1)?;
    let p_t = g.exp(ls_t);
    let diff = g.sub(ls_t, ls_s)?;
    let contrib = g.mul(p_t, diff)?;
    let summed = g.sum_axes(contrib, &[1, 2, 3]);
    let per_sample = g.reshape(summed, &[b])?;
    let per_loc = g.mul_scalar(per_sample, 1.0 / (h * w) as f64);
    Ok(g.mean_all(per_loc))
}

/// For each row, the most confusable wrong class: the k != y whose binary
/// head is most confident the sample is positive, i.e. the smallest
/// negative-channel log-probability. Chosen off the tape; ties take the
/// first k.
fn hard_negatives(g: &Graph, log_softmaxed: VarId, labels: &[usize]) -> Result<Vec<usize>> {
    let ls = g.value(log_softmaxed);
    let shape = ls.shape();
    let (b, k) = (shape[0], shape[1]);
    if k < 2 {
        return Err(Error::config(
            "hard negative mining needs at least 2 known classes",
        ));
    }
    let mut out = Vec::with_capacity(b);
    for (bi, &y) in labels.iter().enumerate().take(b) {
        let mut best = usize::MAX;
        let mut best_v = f64::INFINITY;
        for ki in 0..k {
            if ki == y {
                continue;
            }
            let v = ls[[bi, ki, 1]];
            if v < best_v {
                best_v = v;
                best = ki;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Per-row clamped negative log-probability terms picked from a
/// log-softmaxed [B, K, 2] tensor at flat indices k*2 + channel.
fn picked_nll(g: &mut Graph, log_softmaxed: VarId, flat_idx: Vec<usize>) -> Result<VarId> {
    let lp = g.select_per_row(log_softmaxed, flat_idx)?;
    let p = g.exp(lp);
    let clamped = g.ln_eps(p, PROB_EPS);
    Ok(g.neg(clamped))
}

/// One-vs-all loss on binary head logits [B, K, 2]: pull up the true class's
/// positive probability and the hardest wrong class's negative probability.
pub fn ova_loss_tape(g: &mut Graph, binary_logits: VarId, labels: &[usize]) -> Result<VarId> {
    let shape = g.value(binary_logits).shape().to_vec();
    if shape.len() != 3 || shape[2] != 2 {
        return Err(Error::shape(format!(
            "binary logits must be [B,K,2], got {:?}",
            shape
        )));
    }
    check_labels(labels, shape[1], shape[0])?;
    let ls = g.log_softmax(binary_logits, 2)?;
    let negs = hard_negatives(g, ls, labels)?;
    let pos_idx: Vec<usize> = labels.iter().map(|&y| y * 2).collect();
    let neg_idx: Vec<usize> = negs.iter().map(|&k| k * 2 + 1).collect();
    let pos_term = picked_nll(g, ls, pos_idx)?;
    let neg_term = picked_nll(g, ls, neg_idx)?;
    let total = g.add(pos_term, neg_term)?;
    Ok(g.mean_all(total))
}

/// Edge-coupled one-vs-all loss. The positive term rewards recognizing the
/// class from the edge view alone; the negative term splits evenly between
/// the edge view and the original view, each with its own hard negative.
pub fn eova_loss_tape(
    g: &mut Graph,
    binary_logits_edge: VarId,
    binary_logits_orig: VarId,
    labels: &[usize],
) -> Result<VarId> {
    let e_shape = g.value(binary_logits_edge).shape().to_vec();
    let o_shape = g.value(binary_logits_orig).shape().to_vec();
    if e_shape.len() != 3 || e_shape[2] != 2 || e_shape != o_shape {
        return Err(Error::shape(format!(
            "edge/original binary logits must both be [B,K,2], got {:?} vs {:?}",
            e_shape, o_shape
        )));
    }
    check_labels(labels, e_shape[1], e_shape[0])?;
    let ls_e = g.log_softmax(binary_logits_edge, 2)?;
    let ls_o = g.log_softmax(binary_logits_orig, 2)?;
    let negs_e = hard_negatives(g, ls_e, labels)?;
    let negs_o = hard_negatives(g, ls_o, labels)?;

    let pos_idx: Vec<usize> = labels.iter().map(|&y| y * 2).collect();
    let neg_idx_e: Vec<usize> = negs_e.iter().map(|&k| k * 2 + 1).collect();
    let neg_idx_o: Vec<usize> = negs_o.iter().map(|&k| k * 2 + 1).collect();

    let pos_term = picked_nll(g, ls_e, pos_idx)?;
    let neg_e = picked_nll(g, ls_e, neg_idx_e)?;
    let neg_o = picked_nll(g, ls_o, neg_idx_o)?;
    let neg_e_half = g.mul_scalar(neg_e, 0.5);
    let neg_o_half = g.mul_scalar(neg_o, 0.5);
    let partial = g.add(pos_term, neg_e_half)?;
    let total = g.add(partial, neg_o_half)?;
    Ok(g.mean_all(total))
}
