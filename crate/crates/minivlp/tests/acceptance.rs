//! End-to-end acceptance suite. Each test covers one release criterion and
//! prints a single [PASS]/[FAIL] line (visible with `--nocapture`) before
//! asserting. The two training-based criteria share one set of trained runs.

use std::sync::OnceLock;

use minivlp::ablate::{format_report, run_ablation, AblationAxis};
use minivlp::checkpoint;
use minivlp::config::TrainConfig;
use minivlp::datagen::{corpus_visible_rate, generate_corpus, Corpus};
use minivlp::eval::{evaluate_retrieval, RetrievalReport};
use minivlp::losses::{
    itc_loss, itm_loss, mim_dist, mlm_loss, smooth_l1, total_loss,
};
use minivlp::masking::{apply_text_mask, select_mask_indices, MaskStrategy};
use minivlp::model::{
    encode_image, encode_text, fuse, inv_tau, itc_project, itm_logits, mlm_logits, Modality,
    ModelConfig, ModelParams,
};
use minivlp::momentum::ema_update;
use minivlp::rng::DetRng;
use minivlp::sampler::{brute_force_group, group_subqueue, GroupingConfig, GroupingStrategy};
use minivlp::tensor::{finite_diff_grad, max_rel_err, Tape, Tensor};
use minivlp::train::{metrics_to_jsonl, Trainer};

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] {criterion} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion}: {detail}");
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        heads: 2,
        head_dim: 4,
        layers_text: 1,
        layers_vision: 1,
        layers_fusion: 1,
        text_len: 4,
        patches_per_side: 2,
        patch_dim: 4,
        vocab_size: 16,
        mask_token_id: 15,
        cls_token_id: 0,
        proj_dim: 6,
    }
}

fn with_cls(cfg: &ModelConfig, caption: &[usize]) -> Vec<usize> {
    let mut t = vec![cfg.cls_token_id];
    t.extend_from_slice(caption);
    t
}

fn unit_rows(rows: usize, dim: usize, rng: &mut DetRng) -> Tensor {
    let mut t = Tensor::zeros(rows, dim);
    for r in 0..rows {
        let v = rng.unit_vector(dim);
        t.data_mut()[r * dim..(r + 1) * dim].copy_from_slice(&v);
    }
    t
}

/// Composite-objective gradient check at tiny shapes (B=2, U=8): the full
/// four-term training loss differentiated through both encoders and the
/// fusion stack, compared against central differences on the token embedding.
fn composite_grad_err(seed: u64) -> f64 {
    let cfg = tiny_cfg();
    let params = ModelParams::init(&cfg, seed);
    let mut rng = DetRng::new(seed ^ 0xBEEF);
    let b = 2usize;
    let u = 8usize;
    let mut patch_sets = Vec::with_capacity(b);
    let mut token_sets = Vec::with_capacity(b);
    for _ in 0..b {
        let mut patches = Tensor::zeros(cfg.n_patches(), cfg.patch_dim);
        for v in patches.data_mut() {
            *v = rng.normal(0.0, 0.5);
        }
        patch_sets.push(patches);
        token_sets.push(
            (0..cfg.text_len).map(|_| 1 + rng.below(cfg.vocab_size - 1)).collect::<Vec<usize>>(),
        );
    }
    let m_texts: [Vec<u8>; 2] = [vec![1, 0, 1, 0], vec![0, 1, 0, 1]];
    let m_images: [Vec<u8>; 2] = [vec![1, 1, 0, 0], vec![0, 1, 1, 0]];
    let mut teacher_feats = Vec::with_capacity(b);
    for _ in 0..b {
        let mut t = Tensor::zeros(cfg.n_patches() + 1, cfg.embed_dim);
        for v in t.data_mut() {
            *v = rng.normal(0.0, 0.5);
        }
        teacher_feats.push(t);
    }
    let queue_v = unit_rows(u, cfg.proj_dim, &mut rng);
    let queue_t = unit_rows(u, cfg.proj_dim, &mut rng);

    let eval = |emb: &Tensor, track: bool| -> (f64, Option<Tensor>) {
        let mut p = params.clone();
        p.text.tok_emb = emb.clone();
        let tape = Tape::new();
        let (vars, order) = p.bind(&tape, track);
        let mut mlm_acc = None;
        let mut mim_acc = None;
        let mut v_projs = Vec::new();
        let mut t_projs = Vec::new();
        let mut txts = Vec::new();
        let mut imgs = Vec::new();
        let mut pos_logits = Vec::new();
        for i in 0..b {
            let masked =
                apply_text_mask(&token_sets[i], &m_texts[i], cfg.mask_token_id).unwrap();
            let txt_masked = encode_text(&tape, &cfg, &vars.text, &with_cls(&cfg, &masked));
            let img_full = encode_image(&tape, &cfg, &vars.vision, &patch_sets[i], None);
            let (mm, _) = fuse(&tape, &cfg, &vars.fusion, txt_masked, img_full, 0);
            let logits = mlm_logits(&tape, &cfg, &vars.heads, mm);
            let mlm_i = mlm_loss(&tape, logits, &token_sets[i], &m_texts[i]).unwrap();
            mlm_acc = Some(match mlm_acc {
                Some(a) => tape.add(a, mlm_i),
                None => mlm_i,
            });
            let img_masked =
                encode_image(&tape, &cfg, &vars.vision, &patch_sets[i], Some(&m_images[i]));
            let mim_i =
                mim_dist(&tape, &teacher_feats[i], img_masked, &m_images[i], 1.0).unwrap();
            mim_acc = Some(match mim_acc {
                Some(a) => tape.add(a, mim_i),
                None => mim_i,
            });
            let txt_full = encode_text(&tape, &cfg, &vars.text, &with_cls(&cfg, &token_sets[i]));
            v_projs.push(itc_project(
                &tape,
                &vars.heads,
                tape.select_rows(img_full, &[0]),
                Modality::Visual,
            ));
            t_projs.push(itc_project(
                &tape,
                &vars.heads,
                tape.select_rows(txt_full, &[0]),
                Modality::Textual,
            ));
            let (mm_pos, _) = fuse(&tape, &cfg, &vars.fusion, txt_full, img_full, 0);
            pos_logits.push(itm_logits(&tape, &vars.heads, mm_pos));
            txts.push(txt_full);
            imgs.push(img_full);
        }
        let mlm = tape.scale(mlm_acc.unwrap(), 1.0 / b as f64);
        let mim = tape.scale(mim_acc.unwrap(), 1.0 / b as f64);
        let itc = itc_loss(
            &tape,
            &v_projs,
            &t_projs,
            &queue_v,
            &queue_t,
            &[0, 1],
            inv_tau(&tape, &vars.heads),
        )
        .unwrap();
        let mut neg_logits = Vec::new();
        for i in 0..b {
            let (mm, _) = fuse(&tape, &cfg, &vars.fusion, txts[i], imgs[b - 1 - i], 0);
            neg_logits.push(itm_logits(&tape, &vars.heads, mm));
        }
        let itm = itm_loss(&tape, &pos_logits, &neg_logits);
        let (total, _) = total_loss(&tape, mlm, mim, itc, itm).unwrap();
        let val = tape.scalar_value(total);
        if track {
            let g = tape.backward(total);
            (val, Some(g.get(order[0]).unwrap().clone()))
        } else {
            (val, None)
        }
    };

    let (_, analytic) = eval(&params.text.tok_emb, true);
    let numeric = finite_diff_grad(|x| eval(x, false).0, &params.text.tok_emb, 1e-5);
    max_rel_err(analytic.as_ref().unwrap(), &numeric)
}

/// Every differentiable tape op composed into one scalar, against the
/// central-difference oracle.
fn all_ops_grad_err(seed: u64) -> f64 {
    let mut rng = DetRng::new(seed);
    let rand_tensor = |r: usize, c: usize, rng: &mut DetRng| {
        let mut t = Tensor::zeros(r, c);
        for v in t.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        t
    };
    let x0 = rand_tensor(4, 6, &mut rng);
    let w0 = rand_tensor(6, 6, &mut rng);
    let g0 = rand_tensor(1, 6, &mut rng);
    let b0 = rand_tensor(1, 6, &mut rng);
    let s0 = Tensor::scalar(rng.normal(0.0, 0.5));
    let f = |x: &Tensor, track: bool| -> (f64, Option<Tensor>) {
        let t = Tape::new();
        let xv = t.leaf(x.clone(), track);
        let w = t.constant(w0.clone());
        let gn = t.constant(g0.clone());
        let bn = t.constant(b0.clone());
        let s = t.constant(s0.clone());
        let h = t.matmul(xv, w);
        let h = t.add_row(h, bn);
        let h = t.layer_norm_rows(h, gn, bn, 1e-5);
        let h = t.gelu(h);
        let sm = t.softmax_rows(h);
        let ls = t.log_softmax_rows(h);
        let picked = t.select_entries(ls, &[(0, 1), (2, 3)]);
        let sl = t.slice_cols(h, 1, 3);
        let cat = t.concat_cols(&[sl, sl]);
        let stacked = t.concat_rows(&[cat, cat]);
        let rows = t.select_rows(stacked, &[0, 2, 2]);
        let nrm = t.l2_normalize_rows(rows);
        let hb = t.huber(nrm, t.constant(Tensor::filled(3, 6, 0.3)), 1.0);
        let tr = t.transpose(sm);
        let mm = t.matmul(sm, tr);
        let scaled = t.mul_scalar(mm, t.exp(s));
        let diff = t.sub(scaled, t.constant(Tensor::filled(4, 4, 0.1)));
        let prod = t.mul(diff, diff);
        let parts = [
            t.sum_all(prod),
            t.mean_all(hb),
            t.sum_all(picked),
            t.mean_all(t.neg(sm)),
            t.sum_all(t.scale(t.gather_rows(xv, &[1, 1, 3]), 0.5)),
        ];
        let mut root = parts[0];
        for p in &parts[1..] {
            root = t.add(root, *p);
        }
        let val = t.scalar_value(root);
        if track {
            let g = t.backward(root);
            (val, Some(g.get(xv).unwrap().clone()))
        } else {
            (val, None)
        }
    };
    let (_, analytic) = f(&x0, true);
    let fd = finite_diff_grad(|x| f(x, false).0, &x0, 1e-5);
    max_rel_err(analytic.as_ref().unwrap(), &fd)
}

#[test]
fn criterion_1_gradient_suite() {
    let mut worst_ops = 0.0f64;
    let mut worst_full = 0.0f64;
    for seed in 0..20u64 {
        worst_ops = worst_ops.max(all_ops_grad_err(seed));
        worst_full = worst_full.max(composite_grad_err(seed));
    }
    report(
        "criterion 1: gradient suite (all ops + composite objective, 20 seeds)",
        worst_ops < 1e-4 && worst_full < 1e-4,
        &format!("ops rel err {worst_ops:.3e}, composite rel err {worst_full:.3e}, tol 1e-4"),
    );
}

#[test]
fn criterion_2_mask_exactness() {
    let mut pass = true;
    let mut detail = String::from("1000 seeds, text (K=3,L=6,n=16) and image (K=4,L=8,n=16)");
    // distinct weights so top-L sets are unambiguous
    let mut weights: Vec<f64> = (0..16).map(|i| (i as f64) * 0.07 + 0.01).collect();
    DetRng::new(99).shuffle(&mut weights);
    let top_set = |l: usize| -> Vec<usize> {
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| weights[b].partial_cmp(&weights[a]).unwrap());
        let mut s = order[..l].to_vec();
        s.sort_unstable();
        s
    };
    'outer: for seed in 0..1000u64 {
        for (k, l) in [(3usize, 6usize), (4, 8)] {
            let top = top_set(l);
            let idx = select_mask_indices(&weights, k, l, &mut DetRng::new(seed)).unwrap();
            if idx.len() != k || idx.iter().any(|i| !top.contains(i)) {
                pass = false;
                detail = format!("seed {seed}: K={k} L={l} violated with idx {idx:?}");
                break 'outer;
            }
        }
        // L = K forces exactly the top-K set
        let mut idx = select_mask_indices(&weights, 5, 5, &mut DetRng::new(seed)).unwrap();
        idx.sort_unstable();
        if idx != top_set(5) {
            pass = false;
            detail = format!("seed {seed}: L=K selection is not top-K: {idx:?}");
            break;
        }
    }
    report("criterion 2: mask selection exactness", pass, &detail);
}

#[test]
fn criterion_3_loss_closed_forms() {
    let mut fails = Vec::new();
    if smooth_l1(1.0, 0.5, 1.0) != 0.125 || smooth_l1(3.0, 0.0, 1.0) != 2.5 {
        fails.push("smooth_l1");
    }
    {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 16));
        let mlm = tape.scalar_value(mlm_loss(&tape, logits, &[3, 4], &[1, 1]).unwrap());
        if (mlm - 16.0f64.ln()).abs() >= 1e-9 {
            fails.push("MLM ln(vocab)");
        }
    }
    {
        // all queue rows identical: every candidate scores alike, CE = ln U
        let tape = Tape::new();
        let u = 8;
        let dim = 6;
        let mut q = Tensor::zeros(u, dim);
        for r in 0..u {
            q.set(r, 0, 1.0);
        }
        let mut a = Tensor::zeros(1, dim);
        a.set(0, 2, 1.0);
        let anchor = tape.constant(a);
        let one = tape.constant(Tensor::scalar(1.0));
        let itc =
            tape.scalar_value(itc_loss(&tape, &[anchor], &[anchor], &q, &q, &[3], one).unwrap());
        if (itc - (u as f64).ln()).abs() >= 1e-9 {
            fails.push("uniform ITC ln U");
        }
    }
    {
        // orthonormal U=4 queue, anchor on one axis: loss = ln(1 + 3/e)
        let tape = Tape::new();
        let dim = 8;
        let mut q = Tensor::zeros(4, dim);
        for i in 0..4 {
            q.set(i, i, 1.0);
        }
        let mut a = Tensor::zeros(1, dim);
        a.set(0, 1, 1.0);
        let anchor = tape.constant(a);
        let one = tape.constant(Tensor::scalar(1.0));
        let itc =
            tape.scalar_value(itc_loss(&tape, &[anchor], &[anchor], &q, &q, &[1], one).unwrap());
        if (itc - (1.0 + 3.0 / std::f64::consts::E).ln()).abs() >= 1e-9 {
            fails.push("hard-positive ITC U=4");
        }
    }
    {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 2));
        let itm = tape.scalar_value(itm_loss(&tape, &[z], &[z, z]));
        if (itm - 2.0f64.ln()).abs() >= 1e-9 {
            fails.push("ITM ln 2");
        }
    }
    {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let (total, bundle) =
            total_loss(&tape, c(0.3), c(0.7), c(1.1), c(0.2)).unwrap();
        let t = tape.scalar_value(total);
        if (t - 2.3).abs() >= 1e-12 || (bundle.total - t).abs() >= 1e-12 {
            fails.push("additivity");
        }
    }
    report(
        "criterion 3: loss closed forms",
        fails.is_empty(),
        &if fails.is_empty() {
            "smooth_l1, MLM, uniform/hard-positive ITC, ITM, additivity".into()
        } else {
            format!("failed: {fails:?}")
        },
    );
}

#[test]
fn criterion_4_ema_dynamics() {
    let cfg = tiny_cfg();
    let mut pass = true;
    let mut detail = String::from("boundary betas exact, 50-step geometric decay within 1e-12");

    // beta = 1: teacher frozen
    let student = ModelParams::init(&cfg, 1);
    let mut teacher = ModelParams::init(&cfg, 2);
    let before: Vec<f64> = teacher.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
    ema_update(&mut teacher, &student, 1.0).unwrap();
    let after: Vec<f64> = teacher.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
    if before != after {
        pass = false;
        detail = "beta=1 moved the teacher".into();
    }
    // beta = 0: teacher snaps to student
    ema_update(&mut teacher, &student, 0.0).unwrap();
    let t: Vec<f64> = teacher.flatten().iter().flat_map(|x| x.data().to_vec()).collect();
    let s: Vec<f64> = student.flatten().iter().flat_map(|x| x.data().to_vec()).collect();
    if t != s {
        pass = false;
        detail = "beta=0 did not copy the student".into();
    }
    // beta = 0.5: exact midpoint
    let mut teacher = ModelParams::init(&cfg, 1);
    let mut student = ModelParams::init(&cfg, 1);
    for x in teacher.flatten_mut() {
        x.data_mut().fill(2.0);
    }
    for x in student.flatten_mut() {
        x.data_mut().fill(4.0);
    }
    ema_update(&mut teacher, &student, 0.5).unwrap();
    if teacher.flatten().iter().any(|x| x.data().iter().any(|&v| v != 3.0)) {
        pass = false;
        detail = "beta=0.5 is not the exact midpoint".into();
    }
    // geometric decay: gap shrinks by beta each step
    for x in teacher.flatten_mut() {
        x.data_mut().fill(5.0);
    }
    for x in student.flatten_mut() {
        x.data_mut().fill(1.0);
    }
    let beta: f64 = 0.9;
    for n in 1..=50 {
        ema_update(&mut teacher, &student, beta).unwrap();
        let gap = teacher.flatten()[0].data()[0] - 1.0;
        if (gap - beta.powi(n) * 4.0).abs() >= 1e-12 {
            pass = false;
            detail = format!("geometric decay broke at step {n}");
            break;
        }
    }
    report("criterion 4: EMA boundary cases and geometric decay", pass, &detail);
}

fn grouping_cfg(strategy: GroupingStrategy, s: usize, efn: bool) -> GroupingConfig {
    GroupingConfig { strategy, s, efn, collect_queue_size: 8, subqueue_size: 8, batch_size: 4 }
}

#[test]
fn criterion_5_sampler_oracle() {
    let mut pass = true;
    let mut detail =
        String::from("100 oracle instances, 2 hand traces, 1000 EFN trials on corpus ids");

    // hand-traced S=3 cases on a symmetric similarity matrix
    let sym3 = Tensor::from_vec(3, 3, vec![0.0, 0.9, 0.1, 0.9, 0.0, 0.5, 0.1, 0.5, 0.0]);
    let hardest = grouping_cfg(GroupingStrategy::Hardest, 1, false);
    let semihard2 = grouping_cfg(GroupingStrategy::Semihard, 2, false);
    if brute_force_group(&sym3, &sym3, &[1, 2, 3], &hardest, 0) != vec![0, 1, 2]
        || brute_force_group(&sym3, &sym3, &[1, 2, 3], &semihard2, 0) != vec![0, 2, 1]
    {
        pass = false;
        detail = "hand-traced oracle sequences diverged".into();
    }
    // the production path reproduces the same traces once its random start is 0
    let start0_seed = (0..)
        .find(|&s| DetRng::new(s).below(3) == 0)
        .expect("some seed starts at 0");
    let fast_h =
        group_subqueue(&sym3, &sym3, &[1, 2, 3], &hardest, &mut DetRng::new(start0_seed)).unwrap();
    let fast_s =
        group_subqueue(&sym3, &sym3, &[1, 2, 3], &semihard2, &mut DetRng::new(start0_seed))
            .unwrap();
    if fast_h != vec![0, 1, 2] || fast_s != vec![0, 2, 1] {
        pass = false;
        detail = format!("group_subqueue hand traces diverged: {fast_h:?} {fast_s:?}");
    }

    // production grouping vs the brute-force re-derivation, 100 instances
    'oracle: for seed in 0..100u64 {
        let mut rng = DetRng::new(seed);
        let s_len = 8;
        let mut v2t = Tensor::zeros(s_len, s_len);
        let mut t2v = Tensor::zeros(s_len, s_len);
        for i in 0..s_len {
            for j in 0..s_len {
                v2t.set(i, j, rng.uniform() * 2.0 - 1.0);
                t2v.set(i, j, rng.uniform() * 2.0 - 1.0);
            }
        }
        let ids: Vec<i64> = (0..s_len as i64).map(|i| i / 2).collect();
        for strategy in [GroupingStrategy::Hardest, GroupingStrategy::Semihard] {
            for efn in [false, true] {
                let cfg = grouping_cfg(strategy, 3, efn);
                let fast =
                    group_subqueue(&v2t, &t2v, &ids, &cfg, &mut DetRng::new(seed ^ 0xAB)).unwrap();
                let oracle = brute_force_group(&v2t, &t2v, &ids, &cfg, fast[0]);
                if fast != oracle {
                    pass = false;
                    detail = format!("oracle mismatch at seed {seed} {strategy:?} efn {efn}");
                    break 'oracle;
                }
            }
        }
    }

    // EFN property over the synthetic corpus's item structure (4 views/item)
    let corpus = generate_corpus(2, 4, &ModelConfig::default(), 3).unwrap();
    let ids: Vec<i64> = corpus.pairs.iter().map(|v| v.item_id).collect();
    let dim = 6;
    'efn: for trial in 0..1000u64 {
        let mut rng = DetRng::new(trial);
        let zi: Vec<Vec<f64>> = (0..ids.len()).map(|_| rng.unit_vector(dim)).collect();
        let zt: Vec<Vec<f64>> = (0..ids.len()).map(|_| rng.unit_vector(dim)).collect();
        let n = ids.len();
        let mut v2t = Tensor::zeros(n, n);
        let mut t2v = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                v2t.set(i, j, zi[i].iter().zip(&zt[j]).map(|(a, b)| a * b).sum());
                t2v.set(i, j, zt[i].iter().zip(&zi[j]).map(|(a, b)| a * b).sum());
            }
        }
        let cfg = grouping_cfg(GroupingStrategy::Hardest, 1, true);
        let order =
            group_subqueue(&v2t, &t2v, &ids, &cfg, &mut DetRng::new(trial ^ 0x5EED)).unwrap();
        for step in 1..order.len() {
            let anchor = order[step - 1];
            let remaining: Vec<usize> = (0..n).filter(|k| !order[..step].contains(k)).collect();
            let diff_exists = remaining.iter().any(|&k| ids[k] != ids[anchor]);
            if diff_exists && ids[order[step]] == ids[anchor] {
                pass = false;
                detail = format!("EFN violated at trial {trial} step {step}");
                break 'efn;
            }
        }
    }

    report("criterion 5: sampler oracle, hand traces, EFN property", pass, &detail);
}

/// Shared fixture for the two training-based criteria: three five-epoch runs
/// on the 256-pair corpus under the default configuration, evaluated on a
/// held-out 64-pair set.
struct TrainedRun {
    trainer: Trainer,
    report: RetrievalReport,
}

struct Fixture {
    train_corpus: Corpus,
    runs: Vec<TrainedRun>,
}

fn trained_runs() -> &'static Fixture {
    static RUNS: OnceLock<Fixture> = OnceLock::new();
    RUNS.get_or_init(|| {
        let base = TrainConfig::default();
        let train_corpus = generate_corpus(64, 4, &base.model, 11).unwrap();
        let eval_corpus = generate_corpus(64, 1, &base.model, 77).unwrap();
        let runs = (1..=3)
            .map(|seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                let mut trainer = Trainer::new(cfg);
                trainer.train(&train_corpus).unwrap();
                let report =
                    evaluate_retrieval(&trainer.model, &trainer.cfg.model, &eval_corpus, &[1])
                        .unwrap();
                TrainedRun { trainer, report }
            })
            .collect();
        Fixture { train_corpus, runs }
    })
}

#[test]
fn criterion_6_semantic_mask_margin() {
    let fx = trained_runs();
    let measure_seed = 5;
    let mut attn_sum = 0.0;
    let mut rand_sum = 0.0;
    for run in &fx.runs {
        attn_sum += run.trainer.measure_visible_fraction(
            &fx.train_corpus,
            MaskStrategy::Attentional,
            measure_seed,
        );
        rand_sum += run.trainer.measure_visible_fraction(
            &fx.train_corpus,
            MaskStrategy::Random,
            measure_seed,
        );
    }
    let attn = attn_sum / fx.runs.len() as f64;
    let rand = rand_sum / fx.runs.len() as f64;
    let margin = attn - rand;
    let rate = corpus_visible_rate(&fx.train_corpus);
    let baseline_ok = (rand - rate).abs() <= 0.03;
    report(
        "criterion 6: attentional masking targets visible tokens (3-seed avg)",
        margin >= 0.05 && baseline_ok,
        &format!(
            "attentional {attn:.4}, random {rand:.4} (corpus rate {rate:.4}), margin {margin:.4} >= 0.05"
        ),
    );
}

#[test]
fn criterion_7_retrieval_above_chance() {
    let fx = trained_runs();
    let threshold = 5.0 / 64.0; // 5x chance on the 64-pair eval set
    let mut pass = true;
    let mut lines = Vec::new();
    for (i, run) in fx.runs.iter().enumerate() {
        let i2t = run.report.recall(true, 1).unwrap();
        let t2i = run.report.recall(false, 1).unwrap();
        if i2t < threshold || t2i < threshold {
            pass = false;
        }
        lines.push(format!("seed {} i2t {:.4} t2i {:.4}", i + 1, i2t, t2i));
    }
    report(
        "criterion 7: R@1 at least 7.8% both directions, each of 3 seeds",
        pass,
        &lines.join("; "),
    );
}

fn small_train_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.grouping.collect_queue_size = 16;
    cfg.grouping.subqueue_size = 8;
    cfg.grouping.batch_size = 4;
    cfg.momentum.queue_size = 16;
    cfg.seed = 9;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn criterion_8_ablation_shape() {
    let mut base = small_train_cfg();
    base.epochs = 1;
    let corpus = generate_corpus(4, 2, &base.model, 5).unwrap();
    let eval_corpus = generate_corpus(4, 1, &base.model, 6).unwrap();
    let axes = [AblationAxis::Masking, AblationAxis::Grouping];
    let rows_a = run_ablation(&base, &corpus, &eval_corpus, &axes);
    let rows_b = run_ablation(&base, &corpus, &eval_corpus, &axes);
    let masking = rows_a.iter().filter(|r| r.axis == "masking").count();
    let grouping = rows_a.iter().filter(|r| r.axis == "grouping").count();
    let all_ok = rows_a.iter().all(|r| r.ok);
    let deterministic = format_report(&rows_a) == format_report(&rows_b);
    report(
        "criterion 8: ablation emits 4 masking + 4 grouping rows, deterministic",
        masking == 4 && grouping == 4 && all_ok && deterministic,
        &format!("masking {masking}, grouping {grouping}, all ok {all_ok}, deterministic {deterministic}"),
    );
}

#[test]
fn criterion_9_determinism() {
    let cfg = small_train_cfg();
    let corpus = generate_corpus(4, 4, &cfg.model, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut trainer = Trainer::new(cfg.clone());
        let metrics = trainer.train(&corpus).unwrap();
        let path = dir.path().join(name);
        checkpoint::save(&path, &cfg.model, &trainer.model).unwrap();
        (metrics_to_jsonl(&metrics), std::fs::read(&path).unwrap())
    };
    let (jsonl_a, ckpt_a) = run("a.ckpt");
    let (jsonl_b, ckpt_b) = run("b.ckpt");
    report(
        "criterion 9: identical config/seed gives byte-identical metrics and checkpoints",
        jsonl_a == jsonl_b && ckpt_a == ckpt_b,
        &format!(
            "metrics bytes {} vs {}, checkpoint bytes {} vs {}",
            jsonl_a.len(),
            jsonl_b.len(),
            ckpt_a.len(),
            ckpt_b.len()
        ),
    );
}
