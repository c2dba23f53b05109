//! Training objectives: masked-language cross-entropy, masked-image feature
//! distillation with smooth L1, queue-based contrastive alignment, and binary
//! matching with mined hard negatives, plus their unweighted sum.

use thiserror::Error;

use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("masked-image loss requires at least one masked patch")]
    EmptyImageMask,
    #[error("masked-language loss requires at least one masked position")]
    EmptyTextMask,
    #[error("positive index {0} out of queue range {1}")]
    PositiveOutOfRange(usize, usize),
    #[error("anchor {0} has no eligible negative candidate")]
    NoEligibleNegative(usize),
    #[error("non-finite value in loss term {0}")]
    NonFinite(&'static str),
}

/// Smooth L1 (Eq-style fixed 0.5 offset): quadratic inside the margin,
/// absolute beyond it.
pub fn smooth_l1(a: f64, b: f64, gamma: f64) -> f64 {
    let d = a - b;
    if d.abs() < gamma {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Feature-distillation loss for masked patches: mean smooth-L1 over the
/// feature dimension per masked patch, averaged over the masked set. The
/// teacher features enter as constants, so gradients flow only into the
/// student.
pub fn mim_dist(
    tape: &Tape,
    teacher_feats: &Tensor,
    student_feats: Var,
    m_image: &[u8],
    gamma: f64,
) -> Result<Var, LossError> {
    let masked: Vec<usize> = m_image
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0)
        .map(|(k, _)| k + 1) // skip the [CLS] row
        .collect();
    if masked.is_empty() {
        return Err(LossError::EmptyImageMask);
    }
    let t_rows = {
        let mut out = Tensor::zeros(masked.len(), teacher_feats.cols());
        for (o, &r) in masked.iter().enumerate() {
            out.data_mut()[o * teacher_feats.cols()..(o + 1) * teacher_feats.cols()]
                .copy_from_slice(teacher_feats.row(r));
        }
        tape.constant(out)
    };
    let s_rows = tape.select_rows(student_feats, &masked);
    let h = tape.huber(s_rows, t_rows, gamma);
    Ok(tape.mean_all(h))
}

/// Masked-token cross-entropy: mean over masked positions of the negative
/// log-probability of the original token.
pub fn mlm_loss(
    tape: &Tape,
    logits: Var,
    target_ids: &[usize],
    m_text: &[u8],
) -> Result<Var, LossError> {
    assert_eq!(target_ids.len(), m_text.len(), "mlm_loss: targets vs mask length");
    let masked: Vec<usize> =
        m_text.iter().enumerate().filter(|(_, &m)| m != 0).map(|(j, _)| j).collect();
    if masked.is_empty() {
        return Err(LossError::EmptyTextMask);
    }
    let rows = tape.select_rows(logits, &masked);
    let logp = tape.log_softmax_rows(rows);
    let picks: Vec<(usize, usize)> =
        masked.iter().enumerate().map(|(o, &j)| (o, target_ids[j])).collect();
    let nll = tape.neg(tape.select_entries(logp, &picks));
    Ok(tape.mean_all(nll))
}

/// Queue-based contrastive loss, both directions averaged. Each batch element
/// must have exactly one positive slot per direction inside the queues.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss(
    tape: &Tape,
    batch_v: &[Var],
    batch_t: &[Var],
    teacher_queue_v: &Tensor,
    teacher_queue_t: &Tensor,
    positives: &[usize],
    inv_tau: Var,
) -> Result<Var, LossError> {
    assert_eq!(batch_v.len(), batch_t.len());
    assert_eq!(batch_v.len(), positives.len());
    let u = teacher_queue_v.rows();
    for &p in positives {
        if p >= u {
            return Err(LossError::PositiveOutOfRange(p, u));
        }
    }
    let qt_t = tape.transpose(tape.constant(teacher_queue_t.clone()));
    let qv_t = tape.transpose(tape.constant(teacher_queue_v.clone()));
    let b = batch_v.len() as f64;
    let mut total: Option<Var> = None;
    for (i, (&v, &t)) in batch_v.iter().zip(batch_t.iter()).enumerate() {
        let pos = positives[i];
        // v2t: image anchor against the text queue
        let sims_v = tape.mul_scalar(tape.matmul(v, qt_t), inv_tau);
        let ce_v = tape.neg(tape.select_entries(tape.log_softmax_rows(sims_v), &[(0, pos)]));
        // t2v: text anchor against the image queue
        let sims_t = tape.mul_scalar(tape.matmul(t, qv_t), inv_tau);
        let ce_t = tape.neg(tape.select_entries(tape.log_softmax_rows(sims_t), &[(0, pos)]));
        let pair = tape.add(ce_v, ce_t);
        total = Some(match total {
            Some(acc) => tape.add(acc, pair),
            None => pair,
        });
    }
    Ok(tape.scale(tape.sum_all(total.expect("non-empty batch")), 0.5 / b))
}

/// Sample one in-batch hard negative per anchor per direction, proportional to
/// the softmax of the anchor's similarity row. The anchor itself and any
/// same-item candidate get zero probability.
pub fn mine_hard_negatives(
    sim_v2t: &Tensor,
    sim_t2v: &Tensor,
    item_ids: &[i64],
    rng: &mut DetRng,
) -> Result<(Vec<usize>, Vec<usize>), LossError> {
    let b = item_ids.len();
    assert!(b >= 2, "mine_hard_negatives: need at least 2 pairs, got {b}");
    assert_eq!(sim_v2t.shape(), (b, b));
    assert_eq!(sim_t2v.shape(), (b, b));
    let sample_row = |sim: &Tensor, anchor: usize, rng: &mut DetRng| -> Result<usize, LossError> {
        let row = sim.row(anchor);
        let max = row
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != anchor && item_ids[*k] != item_ids[anchor])
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(LossError::NoEligibleNegative(anchor));
        }
        let weights: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                if k == anchor || item_ids[k] == item_ids[anchor] {
                    0.0
                } else {
                    (v - max).exp()
                }
            })
            .collect();
        Ok(rng.weighted(&weights))
    };
    // one hard negative image per text, then one hard negative text per image
    let mut neg_image_for_text = Vec::with_capacity(b);
    for j in 0..b {
        neg_image_for_text.push(sample_row(sim_t2v, j, rng)?);
    }
    let mut neg_text_for_image = Vec::with_capacity(b);
    for j in 0..b {
        neg_text_for_image.push(sample_row(sim_v2t, j, rng)?);
    }
    Ok((neg_image_for_text, neg_text_for_image))
}

/// Mean binary cross-entropy over positives (label 1) and mined negatives
/// (label 0). Logit rows are 1x2 [negative, positive] scores.
pub fn itm_loss(tape: &Tape, pos_logits: &[Var], neg_logits: &[Var]) -> Var {
    assert!(!pos_logits.is_empty(), "itm_loss: no positives");
    let mut all = Vec::with_capacity(pos_logits.len() + neg_logits.len());
    all.extend_from_slice(pos_logits);
    all.extend_from_slice(neg_logits);
    let stacked = tape.concat_rows(&all);
    let logp = tape.log_softmax_rows(stacked);
    let picks: Vec<(usize, usize)> = (0..all.len())
        .map(|i| (i, if i < pos_logits.len() { 1 } else { 0 }))
        .collect();
    tape.mean_all(tape.neg(tape.select_entries(logp, &picks)))
}

/// The four objective values plus their unweighted sum.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub mlm: f64,
    pub mim: f64,
    pub itc: f64,
    pub itm: f64,
    pub total: f64,
}

/// Unweighted sum of the four objectives, on the tape so gradients reach all
/// parts. Rejects non-finite parts, naming the offender.
pub fn total_loss(
    tape: &Tape,
    mlm: Var,
    mim: Var,
    itc: Var,
    itm: Var,
) -> Result<(Var, LossBundle), LossError> {
    let vals = [
        ("mlm", tape.scalar_value(mlm)),
        ("mim", tape.scalar_value(mim)),
        ("itc", tape.scalar_value(itc)),
        ("itm", tape.scalar_value(itm)),
    ];
    for (name, v) in vals {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    let total = tape.add(tape.add(mlm, mim), tape.add(itc, itm));
    let bundle = LossBundle {
        mlm: vals[0].1,
        mim: vals[1].1,
        itc: vals[2].1,
        itm: vals[3].1,
        total: tape.scalar_value(total),
    };
    Ok((total, bundle))
}
