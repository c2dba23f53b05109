//! The pretraining loop: teacher pass, synchronized masking, the four
//! objectives, AdamW, EMA, and queue maintenance, all under hierarchical
//! seeding for end-to-end determinism.

use thiserror::Error;

use crate::config::TrainConfig;
use crate::datagen::{visibility_labels, Corpus, View};
use crate::losses::{
    itc_loss, itm_loss, mim_dist, mine_hard_negatives, mlm_loss, total_loss, LossBundle, LossError,
};
use crate::masking::{plan_masks, summarize_attention, MaskError, MaskPlan, MaskStrategy};
use crate::model::{
    encode_image, encode_text, fuse, inv_tau, itc_project, itm_logits, mlm_logits, DualModel,
    Modality,
};
use crate::momentum::{ema_update, FeatureQueue};
use crate::optimizer::AdamW;
use crate::rng::{derive_seed, DetRng};
use crate::sampler::{plan_epoch, SampleQueue, SampleRecord, SamplerError};
use crate::tensor::{Tape, Tensor, Var};

const TAG_MODEL: u64 = 1;
const TAG_QUEUE: u64 = 2;
const TAG_PLAN: u64 = 3;
const TAG_MASK: u64 = 4;
const TAG_MINE: u64 = 5;
const TAG_PROV: u64 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("mask: {0}")]
    Mask(#[from] MaskError),
    #[error("sampler: {0}")]
    Sampler(#[from] SamplerError),
    #[error("corpus size {0} incompatible with sub-queue size {1}")]
    CorpusSize(usize, usize),
}

/// Per-step record written to the metrics JSONL. Wall time is measured but
/// not serialized: the metrics stream is part of the byte-identical
/// determinism contract and timing is not reproducible.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub mask_visible_fraction: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DualModel,
    opt: AdamW,
    queue_v: FeatureQueue,
    queue_t: FeatureQueue,
    global_step: usize,
    /// (first global step, planned step count) of the current `train` call;
    /// drives the warmup/cosine learning-rate schedule. Standalone
    /// `pretrain_step` calls run at the full configured rate.
    schedule: Option<(usize, usize)>,
}

/// Everything the rest of the pipeline needs from one teacher forward pass.
struct TeacherPass {
    record: crate::model::CrossAttentionRecord,
    img_feats: Tensor,
    proj_v: Vec<f64>,
    proj_t: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let mut model = DualModel::init(&cfg.model, derive_seed(cfg.seed, &[TAG_MODEL]));
        let log_tau = cfg.itc.tau_init.ln();
        model.student.heads.log_tau.data_mut()[0] = log_tau;
        model.teacher.heads.log_tau.data_mut()[0] = log_tau;
        let opt = AdamW::new(cfg.optimizer, &model.student);
        let mut qrng = DetRng::derived(cfg.seed, &[TAG_QUEUE]);
        let queue_v = FeatureQueue::new_seeded(cfg.momentum.queue_size, cfg.model.proj_dim, &mut qrng);
        let queue_t = FeatureQueue::new_seeded(cfg.momentum.queue_size, cfg.model.proj_dim, &mut qrng);
        Trainer { cfg, model, opt, queue_v, queue_t, global_step: 0, schedule: None }
    }

    fn with_cls(&self, caption: &[usize]) -> Vec<usize> {
        let mut tokens = Vec::with_capacity(caption.len() + 1);
        tokens.push(self.cfg.model.cls_token_id);
        tokens.extend_from_slice(caption);
        tokens
    }

    /// One teacher forward on the full pair; its own tape, nothing tracked.
    fn teacher_pass(&self, view: &View, provenance: u64) -> TeacherPass {
        let tape = Tape::new();
        let (tv, _) = self.model.teacher.bind(&tape, false);
        let txt = encode_text(&tape, &self.cfg.model, &tv.text, &self.with_cls(&view.caption_tokens));
        let img = encode_image(&tape, &self.cfg.model, &tv.vision, &view.patches, None);
        let (_, record) = fuse(&tape, &self.cfg.model, &tv.fusion, txt, img, provenance);
        let img_cls = tape.select_rows(img, &[0]);
        let txt_cls = tape.select_rows(txt, &[0]);
        let proj_v = tape.tensor(itc_project(&tape, &tv.heads, img_cls, Modality::Visual));
        let proj_t = tape.tensor(itc_project(&tape, &tv.heads, txt_cls, Modality::Textual));
        TeacherPass {
            record,
            img_feats: tape.tensor(img),
            proj_v: proj_v.data().to_vec(),
            proj_t: proj_t.data().to_vec(),
        }
    }

    /// Phase-1 collection: teacher projections for every corpus example.
    fn collect(&self, corpus: &Corpus) -> SampleQueue {
        let tape = Tape::new();
        let (tv, _) = self.model.teacher.bind(&tape, false);
        let records = corpus
            .pairs
            .iter()
            .enumerate()
            .map(|(e, view)| {
                let txt =
                    encode_text(&tape, &self.cfg.model, &tv.text, &self.with_cls(&view.caption_tokens));
                let img = encode_image(&tape, &self.cfg.model, &tv.vision, &view.patches, None);
                let img_cls = tape.select_rows(img, &[0]);
                let txt_cls = tape.select_rows(txt, &[0]);
                let z_image =
                    tape.tensor(itc_project(&tape, &tv.heads, img_cls, Modality::Visual));
                let z_text =
                    tape.tensor(itc_project(&tape, &tv.heads, txt_cls, Modality::Textual));
                SampleRecord {
                    example: e,
                    item_id: view.item_id,
                    z_text: z_text.data().to_vec(),
                    z_image: z_image.data().to_vec(),
                }
            })
            .collect();
        SampleQueue { records }
    }

    /// Mask plan for one pair, honoring the epoch-0 warmup (random masking
    /// while the teacher is still uninformative).
    fn plan_pair_masks(
        &self,
        view: &View,
        epoch: usize,
        batch_idx: usize,
        pair: usize,
    ) -> Result<(MaskPlan, TeacherPass), TrainError> {
        let provenance =
            derive_seed(self.cfg.seed, &[TAG_PROV, epoch as u64, batch_idx as u64, pair as u64]);
        let pass = self.teacher_pass(view, provenance);
        let summary = summarize_attention(&pass.record);
        let (st, si) = if epoch == 0 {
            (MaskStrategy::Random, MaskStrategy::Random)
        } else {
            (self.cfg.masking_text, self.cfg.masking_image)
        };
        let mut rng = DetRng::derived(
            self.cfg.seed,
            &[TAG_MASK, epoch as u64, batch_idx as u64, pair as u64],
        );
        let plan = plan_masks(&summary, &self.cfg.mask, st, si, provenance, &mut rng)?;
        assert!(!plan.idx_image.is_empty(), "image mask is empty; checked at config time");
        Ok((plan, pass))
    }

    /// One optimizer step over one mini-batch.
    pub fn pretrain_step(
        &mut self,
        corpus: &Corpus,
        batch: &[(usize, i64)],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<StepMetrics, TrainError> {
        let started = std::time::Instant::now();
        let cfg = &self.cfg.model;
        let b = batch.len();
        let tape = Tape::new();
        let (sv, svar_order) = self.model.student.bind(&tape, true);

        let mut mlm_acc: Option<Var> = None;
        let mut mim_acc: Option<Var> = None;
        let mut v_projs = Vec::with_capacity(b);
        let mut t_projs = Vec::with_capacity(b);
        let mut txt_fulls = Vec::with_capacity(b);
        let mut img_fulls = Vec::with_capacity(b);
        let mut pos_logits = Vec::with_capacity(b);
        let mut teacher_v = Tensor::zeros(b, cfg.proj_dim);
        let mut teacher_t = Tensor::zeros(b, cfg.proj_dim);
        let mut item_ids = Vec::with_capacity(b);
        let mut masked_visible = 0usize;
        let mut masked_total = 0usize;

        for (pair, &(example, item_id)) in batch.iter().enumerate() {
            let view = &corpus.pairs[example];
            let (plan, pass) = self.plan_pair_masks(view, epoch, batch_idx, pair)?;

            let labels = visibility_labels(view);
            masked_visible += plan.idx_text.iter().filter(|&&j| labels[j]).count();
            masked_total += plan.idx_text.len();

            // MIM: masked image against the detached teacher features
            let img_masked = encode_image(&tape, cfg, &sv.vision, &view.patches, Some(&plan.m_image));
            let mim_i = mim_dist(&tape, &pass.img_feats, img_masked, &plan.m_image, 1.0)?;
            mim_acc = Some(match mim_acc {
                Some(a) => tape.add(a, mim_i),
                None => mim_i,
            });

            // MLM: masked text fused with the unmasked image
            let masked_tokens = crate::masking::apply_text_mask(
                &view.caption_tokens,
                &plan.m_text,
                cfg.mask_token_id,
            )?;
            let txt_masked = encode_text(&tape, cfg, &sv.text, &self.with_cls(&masked_tokens));
            let img_full = encode_image(&tape, cfg, &sv.vision, &view.patches, None);
            let (mm_masked, _) = fuse(&tape, cfg, &sv.fusion, txt_masked, img_full, 0);
            let logits = mlm_logits(&tape, cfg, &sv.heads, mm_masked);
            let mlm_i = mlm_loss(&tape, logits, &view.caption_tokens, &plan.m_text)?;
            mlm_acc = Some(match mlm_acc {
                Some(a) => tape.add(a, mlm_i),
                None => mlm_i,
            });

            // ITC projections and the ITM positive use the unmasked pair
            let txt_full = encode_text(&tape, cfg, &sv.text, &self.with_cls(&view.caption_tokens));
            let img_cls = tape.select_rows(img_full, &[0]);
            let txt_cls = tape.select_rows(txt_full, &[0]);
            v_projs.push(itc_project(&tape, &sv.heads, img_cls, Modality::Visual));
            t_projs.push(itc_project(&tape, &sv.heads, txt_cls, Modality::Textual));
            let (mm_pos, _) = fuse(&tape, cfg, &sv.fusion, txt_full, img_full, 0);
            pos_logits.push(itm_logits(&tape, &sv.heads, mm_pos));
            txt_fulls.push(txt_full);
            img_fulls.push(img_full);

            teacher_v.data_mut()[pair * cfg.proj_dim..(pair + 1) * cfg.proj_dim]
                .copy_from_slice(&pass.proj_v);
            teacher_t.data_mut()[pair * cfg.proj_dim..(pair + 1) * cfg.proj_dim]
                .copy_from_slice(&pass.proj_t);
            item_ids.push(item_id);
        }

        let mlm = tape.scale(mlm_acc.expect("non-empty batch"), 1.0 / b as f64);
        let mim = tape.scale(mim_acc.expect("non-empty batch"), 1.0 / b as f64);

        // enqueue this batch's teacher features so each anchor has exactly one
        // positive queue slot, then score against the full queues
        let slots_v = self.queue_v.enqueue(&teacher_v, &item_ids).expect("B <= U by config");
        let slots_t = self.queue_t.enqueue(&teacher_t, &item_ids).expect("B <= U by config");
        debug_assert_eq!(slots_v, slots_t);
        let it = inv_tau(&tape, &sv.heads);
        let itc = itc_loss(
            &tape,
            &v_projs,
            &t_projs,
            self.queue_v.vectors(),
            self.queue_t.vectors(),
            &slots_v,
            it,
        )?;

        // ITM negatives mined from in-batch student similarities
        let it_val = tape.scalar_value(it);
        let mut sim_v2t = Tensor::zeros(b, b);
        let mut sim_t2v = Tensor::zeros(b, b);
        for i in 0..b {
            let vi = tape.tensor(v_projs[i]);
            let ti = tape.tensor(t_projs[i]);
            for j in 0..b {
                let tj = tape.tensor(t_projs[j]);
                let vj = tape.tensor(v_projs[j]);
                let sv_ij: f64 =
                    vi.data().iter().zip(tj.data()).map(|(a, c)| a * c).sum::<f64>() * it_val;
                let st_ij: f64 =
                    ti.data().iter().zip(vj.data()).map(|(a, c)| a * c).sum::<f64>() * it_val;
                sim_v2t.set(i, j, sv_ij);
                sim_t2v.set(i, j, st_ij);
            }
        }
        let mut mine_rng =
            DetRng::derived(self.cfg.seed, &[TAG_MINE, epoch as u64, batch_idx as u64]);
        let (neg_img_for_text, neg_text_for_img) =
            mine_hard_negatives(&sim_v2t, &sim_t2v, &item_ids, &mut mine_rng)?;
        let mut neg_logits = Vec::with_capacity(2 * b);
        for j in 0..b {
            let (mm, _) =
                fuse(&tape, cfg, &sv.fusion, txt_fulls[j], img_fulls[neg_img_for_text[j]], 0);
            neg_logits.push(itm_logits(&tape, &sv.heads, mm));
        }
        for j in 0..b {
            let (mm, _) =
                fuse(&tape, cfg, &sv.fusion, txt_fulls[neg_text_for_img[j]], img_fulls[j], 0);
            neg_logits.push(itm_logits(&tape, &sv.heads, mm));
        }
        let itm = itm_loss(&tape, &pos_logits, &neg_logits);

        let (total, bundle) = total_loss(&tape, mlm, mim, itc, itm)?;
        let grads = tape.backward(total);
        let grad_list: Vec<Option<Tensor>> =
            svar_order.iter().map(|&v| grads.get(v).cloned()).collect();
        let scale = match self.schedule {
            Some((start, total)) => crate::optimizer::lr_scale(
                self.global_step - start,
                total,
                self.cfg.optimizer.warmup_steps,
                self.cfg.optimizer.final_lr_frac,
            ),
            None => 1.0,
        };
        self.opt.step_scaled(&mut self.model.student, &grad_list, scale);
        ema_update(&mut self.model.teacher, &self.model.student, self.cfg.momentum.beta)
            .expect("shape-identical by construction");

        let metrics = StepMetrics {
            step: self.global_step,
            epoch,
            losses: bundle,
            mask_visible_fraction: masked_visible as f64 / masked_total as f64,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        self.global_step += 1;
        Ok(metrics)
    }

    /// Full run over the corpus. Returns one StepMetrics per optimizer step.
    pub fn train(&mut self, corpus: &Corpus) -> Result<Vec<StepMetrics>, TrainError> {
        let s_len = self.cfg.grouping.subqueue_size;
        if corpus.pairs.is_empty() || corpus.pairs.len() % s_len != 0 {
            return Err(TrainError::CorpusSize(corpus.pairs.len(), s_len));
        }
        let batches_per_epoch =
            (corpus.pairs.len() / s_len) * (s_len / self.cfg.grouping.batch_size);
        self.schedule = Some((self.global_step, self.cfg.epochs * batches_per_epoch));
        let mut metrics = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let queue = self.collect(corpus);
            let mut plan_rng = DetRng::derived(self.cfg.seed, &[TAG_PLAN, epoch as u64]);
            let plan = plan_epoch(&queue, &self.cfg.grouping, &mut plan_rng)?;
            for (batch_idx, batch) in plan.batches.iter().enumerate() {
                metrics.push(self.pretrain_step(corpus, batch, epoch, batch_idx)?);
            }
        }
        self.schedule = None;
        Ok(metrics)
    }

    /// The teacher's last-layer cross-attention record for one pair (the
    /// dump-masks entry point).
    pub fn teacher_record(
        &self,
        view: &View,
        provenance: u64,
    ) -> crate::model::CrossAttentionRecord {
        self.teacher_pass(view, provenance).record
    }

    /// Mean mask-on-visible-token fraction the current teacher induces over a
    /// corpus, under the given text strategy (the post-training measurement
    /// behind the semantic check and the ablation report).
    pub fn measure_visible_fraction(
        &self,
        corpus: &Corpus,
        strategy: MaskStrategy,
        seed: u64,
    ) -> f64 {
        let mut visible = 0usize;
        let mut total = 0usize;
        for (e, view) in corpus.pairs.iter().enumerate() {
            let pass = self.teacher_pass(view, derive_seed(seed, &[e as u64]));
            let summary = summarize_attention(&pass.record);
            let mut rng = DetRng::derived(seed, &[TAG_MASK, e as u64]);
            let plan = plan_masks(
                &summary,
                &self.cfg.mask,
                strategy,
                strategy,
                pass.record.provenance,
                &mut rng,
            )
            .expect("valid mask bounds");
            let labels = visibility_labels(view);
            visible += plan.idx_text.iter().filter(|&&j| labels[j]).count();
            total += plan.idx_text.len();
        }
        visible as f64 / total as f64
    }
}

/// Serialize metrics as JSONL, one record per line.
pub fn metrics_to_jsonl(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    for m in metrics {
        out.push_str(&serde_json::to_string(m).expect("metrics serialize"));
        out.push('\n');
    }
    out
}
