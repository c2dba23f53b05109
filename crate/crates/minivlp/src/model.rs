//! The toy dual-transformer stack: text encoder, vision patch encoder,
//! fusion encoder with bidirectional cross-attention exposure, plus the
//! MLM/ITM heads and contrastive projections.
//!
//! The same forward code serves student and teacher; the teacher is simply
//! bound to the tape with gradient tracking off, so it can never appear as a
//! grad-tracked leaf.

use serde::{Deserialize, Serialize};

use crate::rng::DetRng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer width D.
    pub embed_dim: usize,
    /// Attention head count H.
    pub heads: usize,
    /// Per-head width d (D = H * d).
    pub head_dim: usize,
    pub layers_text: usize,
    pub layers_vision: usize,
    pub layers_fusion: usize,
    /// Text sequence length N, excluding [CLS].
    pub text_len: usize,
    /// Patches per side P; the patch count is P*P.
    pub patches_per_side: usize,
    /// Raw feature width of one image patch.
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub mask_token_id: usize,
    pub cls_token_id: usize,
    /// Width of the normalized contrastive projections.
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            heads: 4,
            head_dim: 16,
            layers_text: 2,
            layers_vision: 2,
            layers_fusion: 2,
            text_len: 16,
            patches_per_side: 4,
            patch_dim: 64,
            vocab_size: 64,
            mask_token_id: 63,
            cls_token_id: 0,
            proj_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.patches_per_side * self.patches_per_side
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim != self.heads * self.head_dim {
            return Err(format!(
                "embed_dim {} != heads {} * head_dim {}",
                self.embed_dim, self.heads, self.head_dim
            ));
        }
        if self.mask_token_id >= self.vocab_size {
            return Err(format!(
                "mask_token_id {} out of vocab {}",
                self.mask_token_id, self.vocab_size
            ));
        }
        if self.cls_token_id >= self.vocab_size {
            return Err(format!(
                "cls_token_id {} out of vocab {}",
                self.cls_token_id, self.vocab_size
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameter tree, generic over the leaf type so the same structure describes
// stored tensors (ModelParams) and tape bindings (ModelVars).
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttnP<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Clone, Debug)]
pub struct FeedForwardP<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug)]
pub struct EncoderBlockP<T> {
    pub ln_attn_g: T,
    pub ln_attn_b: T,
    pub attn: AttnP<T>,
    pub ln_ff_g: T,
    pub ln_ff_b: T,
    pub ff: FeedForwardP<T>,
}

#[derive(Clone, Debug)]
pub struct FusionBlockP<T> {
    pub self_block: EncoderBlockP<T>,
    pub ln_cross_g: T,
    pub ln_cross_b: T,
    pub cross: AttnP<T>,
}

#[derive(Clone, Debug)]
pub struct TextEncP<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<EncoderBlockP<T>>,
}

#[derive(Clone, Debug)]
pub struct VisionEncP<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls_emb: T,
    /// Learnable embedding substituted for masked patches.
    pub mask_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<EncoderBlockP<T>>,
}

#[derive(Clone, Debug)]
pub struct HeadsP<T> {
    pub mlm_w: T,
    pub mlm_b: T,
    pub itm_w: T,
    pub itm_b: T,
    pub proj_v_w: T,
    pub proj_v_b: T,
    pub proj_t_w: T,
    pub proj_t_b: T,
    /// Contrastive temperature, stored as log(tau) so tau stays positive.
    pub log_tau: T,
}

#[derive(Clone, Debug)]
pub struct ModelP<T> {
    pub text: TextEncP<T>,
    pub vision: VisionEncP<T>,
    pub fusion: Vec<FusionBlockP<T>>,
    pub heads: HeadsP<T>,
}

pub type ModelParams = ModelP<Tensor>;
pub type ModelVars = ModelP<Var>;

macro_rules! visit_fields {
    ($self:ident, $f:ident, $($field:ident),+) => {
        $( $self.$field.visit($f); )+
    };
}
macro_rules! visit_fields_mut {
    ($self:ident, $f:ident, $($field:ident),+) => {
        $( $self.$field.visit_mut($f); )+
    };
}
macro_rules! map_struct {
    ($name:ident, $self:ident, $f:ident, $($field:ident),+) => {
        $name { $( $field: $self.$field.map_with($f), )+ }
    };
}

/// Fixed-order traversal over parameter leaves. The order defines the
/// flattened layout used by the optimizer, EMA, and checkpoints.
pub trait ParamTree<T> {
    type Mapped<U>;
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T))
    where
        T: 'a;
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T))
    where
        T: 'a;
    fn map_with<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::Mapped<U>;
}

// Leaves terminate the recursion.
impl ParamTree<Tensor> for Tensor {
    type Mapped<U> = U;
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Tensor)) {
        f(self)
    }
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut Tensor)) {
        f(self)
    }
    fn map_with<U>(&self, f: &mut impl FnMut(&Tensor) -> U) -> U {
        f(self)
    }
}

impl ParamTree<Var> for Var {
    type Mapped<U> = U;
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Var)) {
        f(self)
    }
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut Var)) {
        f(self)
    }
    fn map_with<U>(&self, f: &mut impl FnMut(&Var) -> U) -> U {
        f(self)
    }
}

impl<T, L: ParamTree<T>> ParamTree<T> for Vec<L> {
    type Mapped<U> = Vec<L::Mapped<U>>;
    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T))
    where
        T: 'a,
    {
        for x in self {
            x.visit(f);
        }
    }
    fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T))
    where
        T: 'a,
    {
        for x in self {
            x.visit_mut(f);
        }
    }
    fn map_with<U>(&self, f: &mut impl FnMut(&T) -> U) -> Vec<L::Mapped<U>> {
        self.iter().map(|x| x.map_with(f)).collect()
    }
}

macro_rules! impl_param_tree {
    ($name:ident, $($field:ident),+) => {
        impl<T, L: ParamTree<T>> ParamTree<T> for $name<L>
        where
            L: ParamTree<T>,
        {
            type Mapped<U> = $name<L::Mapped<U>>;
            fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T))
            where
                T: 'a,
            {
                visit_fields!(self, f, $($field),+);
            }
            fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&'a mut T))
            where
                T: 'a,
            {
                visit_fields_mut!(self, f, $($field),+);
            }
            fn map_with<U>(&self, f: &mut impl FnMut(&T) -> U) -> Self::Mapped<U> {
                map_struct!($name, self, f, $($field),+)
            }
        }
    };
}

impl_param_tree!(AttnP, wq, wk, wv, wo, bo);
impl_param_tree!(FeedForwardP, w1, b1, w2, b2);
impl_param_tree!(EncoderBlockP, ln_attn_g, ln_attn_b, attn, ln_ff_g, ln_ff_b, ff);
impl_param_tree!(FusionBlockP, self_block, ln_cross_g, ln_cross_b, cross);
impl_param_tree!(TextEncP, tok_emb, pos_emb, blocks);
impl_param_tree!(VisionEncP, patch_w, patch_b, cls_emb, mask_emb, pos_emb, blocks);
impl_param_tree!(
    HeadsP, mlm_w, mlm_b, itm_w, itm_b, proj_v_w, proj_v_b, proj_t_w, proj_t_b, log_tau
);
impl_param_tree!(ModelP, text, vision, fusion, heads);

impl ModelParams {
    pub fn flatten(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut |t| out.push(t));
        out
    }

    pub fn param_count(&self) -> usize {
        self.flatten().iter().map(|t| t.numel()).sum()
    }

    /// Bind every parameter onto a tape. Returns the var tree plus the flat
    /// binding order, aligned with `flatten()`.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> (ModelVars, Vec<Var>) {
        let mut order = Vec::new();
        let vars = self.map_with(&mut |t: &Tensor| {
            let v = tape.leaf(t.clone(), requires_grad);
            order.push(v);
            v
        });
        (vars, order)
    }
}

fn init_attn(rng: &mut DetRng, d: usize, std: f64) -> AttnP<Tensor> {
    let mut w = |r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, std)).collect())
    };
    AttnP { wq: w(d, d), wk: w(d, d), wv: w(d, d), wo: w(d, d), bo: Tensor::zeros(1, d) }
}

fn init_block(rng: &mut DetRng, d: usize, std: f64) -> EncoderBlockP<Tensor> {
    let hidden = 4 * d;
    let attn = init_attn(rng, d, std);
    let mut w = |r: usize, c: usize| {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, std)).collect())
    };
    EncoderBlockP {
        ln_attn_g: Tensor::filled(1, d, 1.0),
        ln_attn_b: Tensor::zeros(1, d),
        attn,
        ln_ff_g: Tensor::filled(1, d, 1.0),
        ln_ff_b: Tensor::zeros(1, d),
        ff: FeedForwardP {
            w1: w(d, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: w(hidden, d),
            b2: Tensor::zeros(1, d),
        },
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = DetRng::derived(seed, &[0x6d6f64]);
        let d = cfg.embed_dim;
        let std = 0.15;
        let w = |rng: &mut DetRng, r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.normal(0.0, std)).collect())
        };
        let text = TextEncP {
            tok_emb: w(&mut rng, cfg.vocab_size, d),
            pos_emb: w(&mut rng, cfg.text_len + 1, d),
            blocks: (0..cfg.layers_text).map(|_| init_block(&mut rng, d, std)).collect(),
        };
        let vision = VisionEncP {
            patch_w: w(&mut rng, cfg.patch_dim, d),
            patch_b: Tensor::zeros(1, d),
            cls_emb: w(&mut rng, 1, d),
            mask_emb: w(&mut rng, 1, d),
            pos_emb: w(&mut rng, cfg.n_patches() + 1, d),
            blocks: (0..cfg.layers_vision).map(|_| init_block(&mut rng, d, std)).collect(),
        };
        let fusion = (0..cfg.layers_fusion)
            .map(|_| FusionBlockP {
                self_block: init_block(&mut rng, d, std),
                ln_cross_g: Tensor::filled(1, d, 1.0),
                ln_cross_b: Tensor::zeros(1, d),
                cross: init_attn(&mut rng, d, std),
            })
            .collect();
        let heads = HeadsP {
            mlm_w: w(&mut rng, d, cfg.vocab_size),
            mlm_b: Tensor::zeros(1, cfg.vocab_size),
            itm_w: w(&mut rng, d, 2),
            itm_b: Tensor::zeros(1, 2),
            proj_v_w: w(&mut rng, d, cfg.proj_dim),
            proj_v_b: Tensor::zeros(1, cfg.proj_dim),
            proj_t_w: w(&mut rng, d, cfg.proj_dim),
            proj_t_b: Tensor::zeros(1, cfg.proj_dim),
            log_tau: Tensor::scalar(0.07f64.ln()),
        };
        ModelP { text, vision, fusion, heads }
    }
}

/// Student/teacher parameter pair. The teacher tracks the student through EMA
/// and never receives gradients.
#[derive(Clone, Debug)]
pub struct DualModel {
    pub student: ModelParams,
    pub teacher: ModelParams,
}

impl DualModel {
    /// Teacher starts as an exact copy of the student.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let student = ModelParams::init(cfg, seed);
        let teacher = student.clone();
        DualModel { student, teacher }
    }
}

/// Per-head cross-attention weights from the fusion encoder's last layer,
/// both directions, plus a provenance tag linking derived mask plans back to
/// the teacher pass that produced them.
#[derive(Clone, Debug)]
pub struct CrossAttentionRecord {
    /// Text queries over image keys: H maps of (N+1) x (N_img+1).
    pub a_t2i: Vec<Tensor>,
    /// Image queries over text keys: H maps of (N_img+1) x (N+1).
    pub a_i2t: Vec<Tensor>,
    pub provenance: u64,
}

const LN_EPS: f64 = 1e-5;

fn layer_norm(tape: &Tape, x: Var, g: Var, b: Var) -> Var {
    tape.layer_norm_rows(x, g, b, LN_EPS)
}

/// Multi-head attention. Queries come from `q_in`, keys/values from `kv_in`.
/// When `record` is given, the per-head softmax maps are copied out.
fn mha(
    tape: &Tape,
    q_in: Var,
    kv_in: Var,
    p: &AttnP<Var>,
    heads: usize,
    head_dim: usize,
    mut record: Option<&mut Vec<Tensor>>,
) -> Var {
    let q = tape.matmul(q_in, p.wq);
    let k = tape.matmul(kv_in, p.wk);
    let v = tape.matmul(kv_in, p.wv);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
        let attn = tape.softmax_rows(scores);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(tape.tensor(attn));
        }
        outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&outs);
    tape.add_row(tape.matmul(cat, p.wo), p.bo)
}

/// Attention maps only, with query/key roles taken from the given inputs.
fn attention_maps(
    tape: &Tape,
    q_in: Var,
    k_in: Var,
    p: &AttnP<Var>,
    heads: usize,
    head_dim: usize,
) -> Vec<Tensor> {
    let q = tape.matmul(q_in, p.wq);
    let k = tape.matmul(k_in, p.wk);
    let scale = 1.0 / (head_dim as f64).sqrt();
    (0..heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * head_dim, head_dim);
            let kh = tape.slice_cols(k, h * head_dim, head_dim);
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), scale);
            tape.tensor(tape.softmax_rows(scores))
        })
        .collect()
}

fn feed_forward(tape: &Tape, x: Var, ff: &FeedForwardP<Var>) -> Var {
    let h = tape.gelu(tape.add_row(tape.matmul(x, ff.w1), ff.b1));
    tape.add_row(tape.matmul(h, ff.w2), ff.b2)
}

/// Pre-norm self-attention block: x + MHA(LN(x)); x + FFN(LN(x)).
fn encoder_block(tape: &Tape, x: Var, b: &EncoderBlockP<Var>, heads: usize, head_dim: usize) -> Var {
    let h = layer_norm(tape, x, b.ln_attn_g, b.ln_attn_b);
    let x = tape.add(x, mha(tape, h, h, &b.attn, heads, head_dim, None));
    let h = layer_norm(tape, x, b.ln_ff_g, b.ln_ff_b);
    tape.add(x, feed_forward(tape, h, &b.ff))
}

/// Text encoder: token + positional embedding, then self-attention blocks.
/// `tokens` has length N+1 with [CLS] at position 0.
pub fn encode_text(tape: &Tape, cfg: &ModelConfig, p: &TextEncP<Var>, tokens: &[usize]) -> Var {
    assert_eq!(
        tokens.len(),
        cfg.text_len + 1,
        "encode_text: expected {} tokens incl [CLS], got {}",
        cfg.text_len + 1,
        tokens.len()
    );
    for &t in tokens {
        assert!(t < cfg.vocab_size, "encode_text: token id {} out of vocab {}", t, cfg.vocab_size);
    }
    let mut x = tape.add(tape.gather_rows(p.tok_emb, tokens), p.pos_emb);
    for b in &p.blocks {
        x = encoder_block(tape, x, b, cfg.heads, cfg.head_dim);
    }
    x
}

/// Vision encoder. Patches project linearly; masked positions are swapped for
/// the learnable mask embedding before the positional addition, then [CLS] is
/// prepended and the self-attention blocks run.
pub fn encode_image(
    tape: &Tape,
    cfg: &ModelConfig,
    p: &VisionEncP<Var>,
    patches: &Tensor,
    mask: Option<&[u8]>,
) -> Var {
    let n = cfg.n_patches();
    assert_eq!(
        patches.shape(),
        (n, cfg.patch_dim),
        "encode_image: patch grid {:?}, expected {}x{}",
        patches.shape(),
        n,
        cfg.patch_dim
    );
    if let Some(m) = mask {
        assert_eq!(m.len(), n, "encode_image: mask length {} != {} patches", m.len(), n);
    }
    let raw = tape.constant(patches.clone());
    let mut proj = tape.add_row(tape.matmul(raw, p.patch_w), p.patch_b);
    if let Some(m) = mask {
        // (1 - m) * proj + m * mask_emb, with the mask held constant.
        let d = cfg.embed_dim;
        let keep = tape.constant(Tensor::from_vec(
            n,
            d,
            m.iter().flat_map(|&b| std::iter::repeat(1.0 - b as f64).take(d)).collect(),
        ));
        let m_col = tape.constant(Tensor::from_vec(n, 1, m.iter().map(|&b| b as f64).collect()));
        let masked_rows = tape.matmul(m_col, p.mask_emb);
        proj = tape.add(tape.mul(proj, keep), masked_rows);
    }
    let with_cls = tape.concat_rows(&[p.cls_emb, proj]);
    let mut x = tape.add(with_cls, p.pos_emb);
    for b in &p.blocks {
        x = encoder_block(tape, x, b, cfg.heads, cfg.head_dim);
    }
    x
}

/// Fusion encoder over the text sequence with image as key/value. Each block
/// runs text self-attention, text-query/image-key cross-attention, then a
/// feed-forward. The last block records both attention directions; the
/// image-query direction reuses that block's projections with query/key roles
/// swapped.
pub fn fuse(
    tape: &Tape,
    cfg: &ModelConfig,
    blocks: &[FusionBlockP<Var>],
    text_feats: Var,
    img_feats: Var,
    provenance: u64,
) -> (Var, CrossAttentionRecord) {
    {
        let tv = tape.value(text_feats);
        let iv = tape.value(img_feats);
        assert_eq!(tv.cols(), cfg.embed_dim, "fuse: text width {} != D {}", tv.cols(), cfg.embed_dim);
        assert_eq!(iv.cols(), cfg.embed_dim, "fuse: image width {} != D {}", iv.cols(), cfg.embed_dim);
    }
    let mut x = text_feats;
    let mut a_t2i = Vec::new();
    let mut a_i2t = Vec::new();
    let last = blocks.len().saturating_sub(1);
    for (li, b) in blocks.iter().enumerate() {
        let sb = &b.self_block;
        let h = layer_norm(tape, x, sb.ln_attn_g, sb.ln_attn_b);
        x = tape.add(x, mha(tape, h, h, &sb.attn, cfg.heads, cfg.head_dim, None));

        let h = layer_norm(tape, x, b.ln_cross_g, b.ln_cross_b);
        let record = if li == last { Some(&mut a_t2i) } else { None };
        x = tape.add(x, mha(tape, h, img_feats, &b.cross, cfg.heads, cfg.head_dim, record));
        if li == last {
            a_i2t = attention_maps(tape, img_feats, h, &b.cross, cfg.heads, cfg.head_dim);
        }

        let h = layer_norm(tape, x, sb.ln_ff_g, sb.ln_ff_b);
        x = tape.add(x, feed_forward(tape, h, &sb.ff));
    }
    (x, CrossAttentionRecord { a_t2i, a_i2t, provenance })
}

/// Linear MLM head over the non-[CLS] rows: N x vocab logits.
pub fn mlm_logits(tape: &Tape, cfg: &ModelConfig, heads: &HeadsP<Var>, mm_feats: Var) -> Var {
    let rows: Vec<usize> = (1..=cfg.text_len).collect();
    let x = tape.select_rows(mm_feats, &rows);
    tape.add_row(tape.matmul(x, heads.mlm_w), heads.mlm_b)
}

/// Binary matching head on the fusion [CLS] row.
pub fn itm_logits(tape: &Tape, heads: &HeadsP<Var>, mm_feats: Var) -> Var {
    let cls = tape.select_rows(mm_feats, &[0]);
    tape.add_row(tape.matmul(cls, heads.itm_w), heads.itm_b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

/// Contrastive projection of a [CLS] embedding to a unit vector.
pub fn itc_project(tape: &Tape, heads: &HeadsP<Var>, cls: Var, which: Modality) -> Var {
    let (w, b) = match which {
        Modality::Visual => (heads.proj_v_w, heads.proj_v_b),
        Modality::Textual => (heads.proj_t_w, heads.proj_t_b),
    };
    tape.l2_normalize_rows(tape.add_row(tape.matmul(cls, w), b))
}

/// 1/tau as a tape scalar: exp(-log_tau), so gradients reach the learnable
/// temperature.
pub fn inv_tau(tape: &Tape, heads: &HeadsP<Var>) -> Var {
    tape.exp(tape.neg(heads.log_tau))
}
