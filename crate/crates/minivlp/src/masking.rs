//! Attention-guided synchronized masking: reduce the teacher's bidirectional
//! cross-attention maps to per-token importance scores, pick a shuffled top
//! pool, and emit coupled text/image masks.

use thiserror::Error;

use crate::model::CrossAttentionRecord;
use crate::rng::DetRng;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid pool bounds: K={k}, L={l}, n={n} (need K <= L <= n)")]
    BadBounds { k: usize, l: usize, n: usize },
    #[error("mask index {0} out of range {1}")]
    IndexOutOfRange(usize, usize),
    #[error("duplicate mask index {0}")]
    DuplicateIndex(usize),
    #[error("length mismatch: mask {0} vs sequence {1}")]
    LengthMismatch(usize, usize),
}

/// Per-token importance scores distilled from a [`CrossAttentionRecord`].
#[derive(Clone, Debug)]
pub struct AttentionSummary {
    /// length N, one score per non-[CLS] text position
    pub o_text: Vec<f64>,
    /// length N_img, one score per patch
    pub o_image: Vec<f64>,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub r_text: f64,
    pub r_image: f64,
    /// pool size multiplier: L = min(n, ceil(pool_factor * K))
    pub pool_factor: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { r_text: 0.2, r_image: 0.5, pool_factor: 2.0 }
    }
}

impl MaskConfig {
    /// Mask count for a sequence of length n: round(r*n), half away from zero.
    pub fn k_for(&self, r: f64, n: usize) -> usize {
        (r * n as f64).round() as usize
    }

    pub fn pool_for(&self, k: usize, n: usize) -> usize {
        n.min((self.pool_factor * k as f64).ceil() as usize)
    }
}

/// Synchronized masks for one image-text pair, tagged with the provenance id
/// of the teacher forward pass they came from.
#[derive(Clone, Debug)]
pub struct MaskPlan {
    pub m_text: Vec<u8>,
    pub m_image: Vec<u8>,
    pub idx_text: Vec<usize>,
    pub idx_image: Vec<usize>,
    pub provenance: u64,
}

/// Collapse the record's two attention maps to per-position scores: each text
/// position's score is the average attention it receives from non-[CLS] image
/// queries (and vice versa for patches), averaged jointly over heads and rows.
/// [CLS] columns are skipped, so scores index real tokens/patches only.
pub fn summarize_attention(record: &CrossAttentionRecord) -> AttentionSummary {
    let a_i2t = &record.a_i2t;
    let a_t2i = &record.a_t2i;
    let heads = a_i2t.len();
    assert!(heads > 0, "summarize_attention: empty record");
    let n_text = a_i2t[0].cols() - 1;
    let n_img = a_t2i[0].cols() - 1;

    let mut o_text = vec![0.0; n_text];
    let mut rows = 0usize;
    for h in a_i2t {
        for q in 1..h.rows() {
            for (j, o) in o_text.iter_mut().enumerate() {
                *o += h.at(q, j + 1);
            }
            rows += 1;
        }
    }
    for o in &mut o_text {
        *o /= rows as f64;
    }

    let mut o_image = vec![0.0; n_img];
    let mut rows = 0usize;
    for h in a_t2i {
        for q in 1..h.rows() {
            for (k, o) in o_image.iter_mut().enumerate() {
                *o += h.at(q, k + 1);
            }
            rows += 1;
        }
    }
    for o in &mut o_image {
        *o /= rows as f64;
    }

    AttentionSummary { o_text, o_image }
}

/// Indices of the L largest weights in descending order, ties broken by lower
/// index first.
fn top_l_indices(weights: &[f64], l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).expect("finite weights").then(a.cmp(&b))
    });
    order.truncate(l);
    order
}

/// Take the top-L pool by weight, shuffle it, keep the first K.
pub fn select_mask_indices(
    weights: &[f64],
    k: usize,
    l: usize,
    rng: &mut DetRng,
) -> Result<Vec<usize>, MaskError> {
    let n = weights.len();
    if k > l || l > n {
        return Err(MaskError::BadBounds { k, l, n });
    }
    let mut pool = top_l_indices(weights, l);
    rng.shuffle(&mut pool);
    pool.truncate(k);
    Ok(pool)
}

/// Uniformly random K-subset (the random-masking ablation baseline).
pub fn random_mask_indices(n: usize, k: usize, rng: &mut DetRng) -> Result<Vec<usize>, MaskError> {
    if k > n {
        return Err(MaskError::BadBounds { k, l: n, n });
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    Ok(all)
}

/// Zeros with ones at `idx`.
pub fn build_mask(idx: &[usize], n: usize) -> Result<Vec<u8>, MaskError> {
    let mut m = vec![0u8; n];
    for &i in idx {
        if i >= n {
            return Err(MaskError::IndexOutOfRange(i, n));
        }
        if m[i] != 0 {
            return Err(MaskError::DuplicateIndex(i));
        }
        m[i] = 1;
    }
    Ok(m)
}

/// Replace masked token positions with the mask token id.
pub fn apply_text_mask(
    tokens: &[usize],
    m_text: &[u8],
    mask_token_id: usize,
) -> Result<Vec<usize>, MaskError> {
    if tokens.len() != m_text.len() {
        return Err(MaskError::LengthMismatch(m_text.len(), tokens.len()));
    }
    Ok(tokens
        .iter()
        .zip(m_text.iter())
        .map(|(&t, &m)| if m != 0 { mask_token_id } else { t })
        .collect())
}

/// Which selection rule each modality uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    Random,
    Attentional,
}

/// Build one pair's synchronized mask plan from a teacher attention summary.
/// Per-modality strategy picks between attention-pool selection and the
/// uniform baseline; both modalities share the provenance of the same teacher
/// pass.
pub fn plan_masks(
    summary: &AttentionSummary,
    cfg: &MaskConfig,
    strat_text: MaskStrategy,
    strat_image: MaskStrategy,
    provenance: u64,
    rng: &mut DetRng,
) -> Result<MaskPlan, MaskError> {
    let n_text = summary.o_text.len();
    let n_img = summary.o_image.len();
    let k_text = cfg.k_for(cfg.r_text, n_text);
    let k_img = cfg.k_for(cfg.r_image, n_img);
    let idx_text = match strat_text {
        MaskStrategy::Random => random_mask_indices(n_text, k_text, rng)?,
        MaskStrategy::Attentional => {
            select_mask_indices(&summary.o_text, k_text, cfg.pool_for(k_text, n_text), rng)?
        }
    };
    let idx_image = match strat_image {
        MaskStrategy::Random => random_mask_indices(n_img, k_img, rng)?,
        MaskStrategy::Attentional => {
            select_mask_indices(&summary.o_image, k_img, cfg.pool_for(k_img, n_img), rng)?
        }
    };
    Ok(MaskPlan {
        m_text: build_mask(&idx_text, n_text)?,
        m_image: build_mask(&idx_image, n_img)?,
        idx_text,
        idx_image,
        provenance,
    })
}
