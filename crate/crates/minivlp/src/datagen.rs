//! Synthetic fashion-toy corpus: items carry categorical attribute slots, each
//! item yields several partial views that all share one caption, so some
//! caption tokens name attributes invisible in a given view.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::ModelConfig;
use crate::rng::{derive_seed, DetRng};
use crate::tensor::Tensor;

pub const ATTR_SLOTS: usize = 4;
pub const VALUES_PER_SLOT: usize = 8;
/// Attribute token ids occupy [ATTR_BASE, ATTR_BASE + ATTR_SLOTS*VALUES_PER_SLOT).
pub const ATTR_BASE: usize = 8;
pub const PAD_TOKEN: usize = 1;
const NOISE_AMPLITUDE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("vocab size {0} too small: need ids up to {1} plus mask token")]
    VocabTooSmall(usize, usize),
    #[error("attribute regions need {0} patch rows but the grid has {1}")]
    RegionOverflow(usize, usize),
    #[error("caption length {0} cannot hold {1} attribute tokens")]
    CaptionTooShort(usize, usize),
    #[error("corpus file malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemSpec {
    pub item_id: i64,
    /// one chosen value index per slot
    pub attributes: Vec<usize>,
}

impl ItemSpec {
    /// Vocab token id naming slot `a`'s chosen value.
    pub fn token_for_slot(&self, a: usize) -> usize {
        ATTR_BASE + a * VALUES_PER_SLOT + self.attributes[a]
    }
}

/// Decode which attribute slot a token names, if any.
pub fn token_slot(token: usize) -> Option<usize> {
    if (ATTR_BASE..ATTR_BASE + ATTR_SLOTS * VALUES_PER_SLOT).contains(&token) {
        Some((token - ATTR_BASE) / VALUES_PER_SLOT)
    } else {
        None
    }
}

#[derive(Clone, Debug)]
pub struct View {
    pub item_id: i64,
    /// per attribute slot
    pub visible: Vec<bool>,
    /// N_img x patch_dim
    pub patches: Tensor,
    /// length N, no [CLS]
    pub caption_tokens: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<View>,
}

/// Per caption position: true iff the token names an attribute whose slot is
/// visible in this view. Filler tokens are never visible.
pub fn visibility_labels(view: &View) -> Vec<bool> {
    view.caption_tokens
        .iter()
        .map(|&t| token_slot(t).is_some_and(|a| view.visible[a]))
        .collect()
}

/// Value-specific base intensity for one pixel of one patch in a slot's
/// region: a hash-derived constant in [-1, 1], stable across runs.
fn pattern_value(slot: usize, value: usize, patch_in_region: usize, pixel: usize) -> f64 {
    let h = derive_seed(
        0x5EED_F00D,
        &[slot as u64, value as u64, patch_in_region as u64, pixel as u64],
    );
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Deterministic patch grid for one (item, visibility) combination. Slot `a`
/// paints patch row `a` of the grid; hidden slots leave their region at the
/// zero background. Seeded low-amplitude noise covers every pixel.
pub fn render_view(
    item: &ItemSpec,
    visibility: &[bool],
    cfg: &ModelConfig,
    rng: &mut DetRng,
) -> Result<Tensor, DataError> {
    assert_eq!(visibility.len(), ATTR_SLOTS, "render_view: visibility length");
    assert!(visibility.iter().any(|&v| v), "render_view: at least one slot must be visible");
    let p = cfg.patches_per_side;
    if ATTR_SLOTS > p {
        return Err(DataError::RegionOverflow(ATTR_SLOTS, p));
    }
    let mut grid = Tensor::zeros(cfg.n_patches(), cfg.patch_dim);
    for (a, &vis) in visibility.iter().enumerate() {
        if !vis {
            continue;
        }
        let value = item.attributes[a];
        for c in 0..p {
            let patch = a * p + c;
            for d in 0..cfg.patch_dim {
                grid.set(patch, d, pattern_value(a, value, c, d));
            }
        }
    }
    for v in grid.data_mut() {
        *v += (rng.uniform() * 2.0 - 1.0) * NOISE_AMPLITUDE;
    }
    Ok(grid)
}

/// Caption shared by all of an item's views: its attribute tokens at
/// item-seeded distinct positions, filler elsewhere.
fn item_caption(item: &ItemSpec, n: usize, seed: u64) -> Result<Vec<usize>, DataError> {
    if n < ATTR_SLOTS {
        return Err(DataError::CaptionTooShort(n, ATTR_SLOTS));
    }
    let mut rng = DetRng::derived(seed, &[b'c' as u64, item.item_id as u64]);
    let mut positions: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut positions);
    let mut caption = vec![PAD_TOKEN; n];
    for a in 0..ATTR_SLOTS {
        caption[positions[a]] = item.token_for_slot(a);
    }
    Ok(caption)
}

/// Deterministic corpus of n_items * views_per_item pairs. View 0 of every
/// item shows all slots; later views hide a seeded nonempty subset (1 or 2
/// slots), so every attribute stays visible in at least one view.
pub fn generate_corpus(
    n_items: usize,
    views_per_item: usize,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Corpus, DataError> {
    assert!(n_items >= 1 && views_per_item >= 1);
    let max_id = ATTR_BASE + ATTR_SLOTS * VALUES_PER_SLOT;
    if max_id > cfg.vocab_size || cfg.mask_token_id < max_id {
        return Err(DataError::VocabTooSmall(cfg.vocab_size, max_id));
    }
    let mut pairs = Vec::with_capacity(n_items * views_per_item);
    for i in 0..n_items {
        let mut item_rng = DetRng::derived(seed, &[b'i' as u64, i as u64]);
        let item = ItemSpec {
            item_id: i as i64,
            attributes: (0..ATTR_SLOTS).map(|_| item_rng.below(VALUES_PER_SLOT)).collect(),
        };
        let caption = item_caption(&item, cfg.text_len, seed)?;
        for v in 0..views_per_item {
            let mut view_rng = DetRng::derived(seed, &[b'v' as u64, i as u64, v as u64]);
            let visible = if v == 0 {
                vec![true; ATTR_SLOTS]
            } else {
                let hide = 1 + view_rng.below(2);
                let mut slots: Vec<usize> = (0..ATTR_SLOTS).collect();
                view_rng.shuffle(&mut slots);
                let mut vis = vec![true; ATTR_SLOTS];
                for &a in slots.iter().take(hide) {
                    vis[a] = false;
                }
                vis
            };
            let patches = render_view(&item, &visible, cfg, &mut view_rng)?;
            pairs.push(View {
                item_id: item.item_id,
                visible,
                patches,
                caption_tokens: caption.clone(),
            });
        }
    }
    Ok(Corpus { pairs })
}

/// Fraction of caption token positions that are visible, over the whole
/// corpus (the random-masking baseline's expected mask-on-visible fraction).
pub fn corpus_visible_rate(corpus: &Corpus) -> f64 {
    let mut visible = 0usize;
    let mut total = 0usize;
    for view in &corpus.pairs {
        let labels = visibility_labels(view);
        visible += labels.iter().filter(|&&b| b).count();
        total += labels.len();
    }
    visible as f64 / total as f64
}

/// Textual corpus file: a header line with the generating parameters, then
/// one record per pair (item id, visibility bits, caption ids, patch values).
pub fn write_corpus(
    path: &Path,
    corpus: &Corpus,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<(), DataError> {
    let mut out = String::new();
    writeln!(
        out,
        "minivlp-corpus v1 pairs={} text_len={} n_patches={} patch_dim={} seed={}",
        corpus.pairs.len(),
        cfg.text_len,
        cfg.n_patches(),
        cfg.patch_dim,
        seed
    )
    .unwrap();
    for view in &corpus.pairs {
        writeln!(out, "item {}", view.item_id).unwrap();
        let bits: Vec<String> =
            view.visible.iter().map(|&b| if b { "1".into() } else { "0".into() }).collect();
        writeln!(out, "visible {}", bits.join(" ")).unwrap();
        let caption: Vec<String> = view.caption_tokens.iter().map(|t| t.to_string()).collect();
        writeln!(out, "caption {}", caption.join(" ")).unwrap();
        for r in 0..view.patches.rows() {
            let row: Vec<String> = view.patches.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(out, "patch {}", row.join(" ")).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| DataError::Malformed("empty file".into()))?;
    let field = |name: &str| -> Result<usize, DataError> {
        header
            .split_whitespace()
            .find_map(|tok| tok.strip_prefix(&format!("{name}=")))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DataError::Malformed(format!("missing header field {name}")))
    };
    let n_pairs = field("pairs")?;
    let n_patches = field("n_patches")?;
    let patch_dim = field("patch_dim")?;
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let take = |prefix: &str, lines: &mut std::str::Lines| -> Result<String, DataError> {
            let line = lines
                .next()
                .ok_or_else(|| DataError::Malformed(format!("truncated before {prefix}")))?;
            line.strip_prefix(prefix)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| DataError::Malformed(format!("expected {prefix}, got {line:?}")))
        };
        let item_id: i64 = take("item", &mut lines)?
            .parse()
            .map_err(|e| DataError::Malformed(format!("item id: {e}")))?;
        let visible: Vec<bool> =
            take("visible", &mut lines)?.split_whitespace().map(|b| b == "1").collect();
        let caption_tokens: Vec<usize> = take("caption", &mut lines)?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| DataError::Malformed(format!("caption: {e}"))))
            .collect::<Result<_, _>>()?;
        let mut patches = Tensor::zeros(n_patches, patch_dim);
        for r in 0..n_patches {
            let row = take("patch", &mut lines)?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(|v| v.parse().map_err(|e| DataError::Malformed(format!("patch: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != patch_dim {
                return Err(DataError::Malformed(format!(
                    "patch row has {} values, expected {patch_dim}",
                    vals.len()
                )));
            }
            patches.data_mut()[r * patch_dim..(r + 1) * patch_dim].copy_from_slice(&vals);
        }
        pairs.push(View { item_id, visible, patches, caption_tokens });
    }
    Ok(Corpus { pairs })
}
