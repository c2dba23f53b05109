//! Grouped mini-batch construction: collect teacher projections, shuffle,
//! group each sub-queue by alternating-direction semi-hard similarity with
//! optional same-item deprioritization, then shuffle the resulting batches.

use thiserror::Error;

use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("queue size {0} is not a multiple of sub-queue size {1}")]
    NotMultiple(usize, usize),
    #[error("sub-queue size {0} too small (need >= 2)")]
    SubqueueTooSmall(usize),
    #[error("batch size {0} does not divide sub-queue size {1}")]
    BatchMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingStrategy {
    Random,
    Hardest,
    Semihard,
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingConfig {
    pub strategy: GroupingStrategy,
    /// semi-hard rank: pick the s-th most similar candidate (hardest = rank 1)
    pub s: usize,
    /// deprioritize same-item candidates (false-negative exclusion)
    pub efn: bool,
    pub collect_queue_size: usize,
    pub subqueue_size: usize,
    pub batch_size: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            strategy: GroupingStrategy::Semihard,
            s: 3,
            efn: true,
            collect_queue_size: 512,
            subqueue_size: 64,
            batch_size: 4,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.subqueue_size < 2 {
            return Err(SamplerError::SubqueueTooSmall(self.subqueue_size));
        }
        if self.subqueue_size % self.batch_size != 0 {
            return Err(SamplerError::BatchMismatch(self.batch_size, self.subqueue_size));
        }
        Ok(())
    }

    /// Effective rank for the non-random strategies.
    fn rank(&self) -> usize {
        match self.strategy {
            GroupingStrategy::Hardest => 1,
            _ => self.s.max(1),
        }
    }
}

/// One collected example: its corpus index, item id, and teacher-projected
/// unit features for both modalities.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub example: usize,
    pub item_id: i64,
    pub z_text: Vec<f64>,
    pub z_image: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct SampleQueue {
    pub records: Vec<SampleRecord>,
}

/// Ordered mini-batches of (example index, item id).
#[derive(Clone, Debug)]
pub struct EpochPlan {
    pub batches: Vec<Vec<(usize, i64)>>,
}

impl EpochPlan {
    pub fn example_indices(&self) -> Vec<usize> {
        self.batches.iter().flatten().map(|&(e, _)| e).collect()
    }
}

/// Rank candidates for one grouping step: similarity descending, ties broken
/// by lower index; with efn, same-item candidates sort after every
/// different-item candidate (still similarity-ordered among themselves).
fn ranked_candidates(
    sim_row: &[f64],
    anchor: usize,
    item_ids: &[i64],
    available: &[usize],
    efn: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = available.to_vec();
    order.sort_by(|&a, &b| {
        if efn {
            let sa = item_ids[a] == item_ids[anchor];
            let sb = item_ids[b] == item_ids[anchor];
            if sa != sb {
                return sa.cmp(&sb); // different-item (false) first
            }
        }
        sim_row[b].partial_cmp(&sim_row[a]).expect("finite similarity").then(a.cmp(&b))
    });
    order
}

/// Alternating-direction greedy grouping over one sub-queue. Returns the full
/// visiting order; the caller slices it into batches. The start index counts
/// as a text-to-image pick, so the first real step ranks by the image-to-text
/// row of the anchor.
pub fn group_subqueue(
    q_v2t: &Tensor,
    q_t2v: &Tensor,
    item_ids: &[i64],
    cfg: &GroupingConfig,
    rng: &mut DetRng,
) -> Result<Vec<usize>, SamplerError> {
    let s_len = item_ids.len();
    if s_len < 2 {
        return Err(SamplerError::SubqueueTooSmall(s_len));
    }
    assert_eq!(q_v2t.shape(), (s_len, s_len));
    assert_eq!(q_t2v.shape(), (s_len, s_len));
    let start = rng.below(s_len);
    Ok(group_from(q_v2t, q_t2v, item_ids, cfg, start))
}

fn group_from(
    q_v2t: &Tensor,
    q_t2v: &Tensor,
    item_ids: &[i64],
    cfg: &GroupingConfig,
    start: usize,
) -> Vec<usize> {
    let s_len = item_ids.len();
    let rank = cfg.rank();
    let mut chosen = vec![false; s_len];
    let mut order = Vec::with_capacity(s_len);
    chosen[start] = true;
    order.push(start);
    // step parity: the start acts as a t2v pick, so step 1 uses v2t
    let mut use_v2t = true;
    while order.len() < s_len {
        let anchor = *order.last().unwrap();
        let sim = if use_v2t { q_v2t } else { q_t2v };
        let available: Vec<usize> = (0..s_len).filter(|&k| !chosen[k]).collect();
        let ranked = ranked_candidates(sim.row(anchor), anchor, item_ids, &available, cfg.efn);
        let pick = *ranked.get(rank - 1).unwrap_or_else(|| ranked.last().unwrap());
        chosen[pick] = true;
        order.push(pick);
        use_v2t = !use_v2t;
    }
    order
}

/// Independent re-derivation of the grouping semantics for testing: explicit
/// stable full sorts at every step, no shared helpers with [`group_subqueue`].
pub fn brute_force_group(
    q_v2t: &Tensor,
    q_t2v: &Tensor,
    item_ids: &[i64],
    cfg: &GroupingConfig,
    start_index: usize,
) -> Vec<usize> {
    let n = item_ids.len();
    assert!(n <= 16, "brute_force_group: oracle limited to S <= 16");
    let rank = match cfg.strategy {
        GroupingStrategy::Hardest => 1,
        _ => cfg.s.max(1),
    };
    let mut order = vec![start_index];
    for step in 1.. {
        if order.len() == n {
            break;
        }
        let anchor = order[order.len() - 1];
        let sim = if step % 2 == 1 { q_v2t } else { q_t2v };
        // (same_item, -similarity, index) lexicographic; same_item only
        // participates when efn is on
        let mut cands: Vec<(bool, f64, usize)> = (0..n)
            .filter(|k| !order.contains(k))
            .map(|k| {
                (
                    cfg.efn && item_ids[k] == item_ids[anchor],
                    sim.at(anchor, k),
                    k,
                )
            })
            .collect();
        cands.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(b.1.partial_cmp(&a.1).unwrap())
                .then(a.2.cmp(&b.2))
        });
        let idx = (rank - 1).min(cands.len() - 1);
        order.push(cands[idx].2);
    }
    order
}

/// Build an epoch plan: shuffle examples, group each contiguous sub-queue
/// (or keep the shuffled order for the random strategy), slice into batches,
/// shuffle the batch list.
pub fn plan_epoch(
    queue: &SampleQueue,
    cfg: &GroupingConfig,
    rng: &mut DetRng,
) -> Result<EpochPlan, SamplerError> {
    cfg.validate()?;
    let n = queue.records.len();
    let s_len = cfg.subqueue_size;
    if n % s_len != 0 {
        return Err(SamplerError::NotMultiple(n, s_len));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);

    let mut ordered: Vec<usize> = Vec::with_capacity(n);
    for chunk in perm.chunks(s_len) {
        match cfg.strategy {
            GroupingStrategy::Random => ordered.extend_from_slice(chunk),
            _ => {
                let ids: Vec<i64> = chunk.iter().map(|&r| queue.records[r].item_id).collect();
                let (v2t, t2v) = subqueue_similarities(queue, chunk);
                let local = group_subqueue(&v2t, &t2v, &ids, cfg, rng)?;
                ordered.extend(local.into_iter().map(|l| chunk[l]));
            }
        }
    }

    let mut batches: Vec<Vec<(usize, i64)>> = ordered
        .chunks(cfg.batch_size)
        .map(|c| {
            c.iter()
                .map(|&r| (queue.records[r].example, queue.records[r].item_id))
                .collect()
        })
        .collect();
    rng.shuffle(&mut batches);
    Ok(EpochPlan { batches })
}

/// Dot-product similarity matrices for one sub-queue: v2t rows are image
/// anchors against text candidates, t2v the reverse.
fn subqueue_similarities(queue: &SampleQueue, chunk: &[usize]) -> (Tensor, Tensor) {
    let s_len = chunk.len();
    let mut v2t = Tensor::zeros(s_len, s_len);
    let mut t2v = Tensor::zeros(s_len, s_len);
    for (i, &ri) in chunk.iter().enumerate() {
        for (j, &rj) in chunk.iter().enumerate() {
            let a = &queue.records[ri];
            let b = &queue.records[rj];
            let sv: f64 = a.z_image.iter().zip(&b.z_text).map(|(x, y)| x * y).sum();
            let st: f64 = a.z_text.iter().zip(&b.z_image).map(|(x, y)| x * y).sum();
            v2t.set(i, j, sv);
            t2v.set(i, j, st);
        }
    }
    (v2t, t2v)
}
