//! Release-gate invariant suite at tiny shapes: gradient oracles, closed-form
//! loss identities, sampler oracle equivalence, EMA dynamics, mask exactness.

use crate::losses::{itc_loss, itm_loss, mlm_loss, smooth_l1};
use crate::masking::select_mask_indices;
use crate::model::{encode_image, encode_text, fuse, mlm_logits, DualModel, ModelConfig};
use crate::momentum::ema_update;
use crate::rng::DetRng;
use crate::sampler::{brute_force_group, GroupingConfig, GroupingStrategy};
use crate::tensor::{finite_diff_grad, max_rel_err, Tape, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
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

/// Full-forward gradient check: perturb the token embedding table, compare
/// the analytic gradient of an MLM-style scalar against central differences.
fn gradient_check(seed: u64) -> (f64, f64) {
    let cfg = tiny_cfg();
    let params = crate::model::ModelParams::init(&cfg, seed);
    let mut rng = DetRng::new(seed ^ 0xF00D);
    let mut patches = Tensor::zeros(cfg.n_patches(), cfg.patch_dim);
    for v in patches.data_mut() {
        *v = rng.normal(0.0, 0.5);
    }
    let tokens: Vec<usize> = std::iter::once(0)
        .chain((0..cfg.text_len).map(|_| 1 + rng.below(cfg.vocab_size - 1)))
        .collect();
    let eval = |emb: &Tensor, track: bool| -> (f64, Option<Tensor>) {
        let mut p = params.clone();
        p.text.tok_emb = emb.clone();
        let tape = Tape::new();
        let (vars, order) = p.bind(&tape, track);
        let txt = encode_text(&tape, &cfg, &vars.text, &tokens);
        let img = encode_image(&tape, &cfg, &vars.vision, &patches, Some(&[1, 0, 1, 0]));
        let (mm, _) = fuse(&tape, &cfg, &vars.fusion, txt, img, 0);
        let logits = mlm_logits(&tape, &cfg, &vars.heads, mm);
        let loss = mlm_loss(&tape, logits, &tokens[1..], &[1, 0, 1, 1]).unwrap();
        let val = tape.scalar_value(loss);
        if track {
            let g = tape.backward(loss);
            (val, Some(g.get(order[0]).unwrap().clone()))
        } else {
            (val, None)
        }
    };
    let (_, analytic) = eval(&params.text.tok_emb, true);
    let numeric = finite_diff_grad(|x| eval(x, false).0, &params.text.tok_emb, 1e-5);
    let err = max_rel_err(analytic.as_ref().unwrap(), &numeric);
    (err, 1e-4)
}

pub fn run_selfcheck() -> Vec<CheckResult> {
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let (err, _) = gradient_check(seed);
        worst = worst.max(err);
    }
    results.push(check(
        "full-forward gradient vs finite differences",
        worst < 1e-4,
        format!("max rel err {worst:.3e} (tol 1e-4)"),
    ));

    let s1 = smooth_l1(1.0, 0.5, 1.0);
    let s2 = smooth_l1(3.0, 0.0, 1.0);
    results.push(check(
        "smooth-L1 closed forms",
        s1 == 0.125 && s2 == 2.5,
        format!("(1,0.5,1)={s1}, (3,0,1)={s2}"),
    ));

    {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(2, 16));
        let mlm = tape.scalar_value(mlm_loss(&tape, logits, &[3, 4], &[1, 1]).unwrap());
        let expect = 16.0f64.ln();
        results.push(check(
            "uniform-logit MLM = ln(vocab)",
            (mlm - expect).abs() < 1e-9,
            format!("{mlm:.12} vs {expect:.12}"),
        ));
    }

    {
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
        let expect = (1.0 + 3.0 / std::f64::consts::E).ln();
        results.push(check(
            "hard-positive ITC closed form (U=4)",
            (itc - expect).abs() < 1e-9,
            format!("{itc:.12} vs {expect:.12}"),
        ));
    }

    {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(1, 2));
        let itm = tape.scalar_value(itm_loss(&tape, &[z], &[z, z]));
        let expect = 2.0f64.ln();
        results.push(check(
            "all-zero-logit ITM = ln 2",
            (itm - expect).abs() < 1e-9,
            format!("{itm:.12} vs {expect:.12}"),
        ));
    }

    {
        let mut ok = true;
        let mut detail = String::from("100 instances");
        'outer: for seed in 0..100u64 {
            let mut rng = DetRng::new(seed);
            let s_len = 8;
            let mut v2t = Tensor::zeros(s_len, s_len);
            let mut t2v = Tensor::zeros(s_len, s_len);
            for i in 0..s_len {
                for j in 0..s_len {
                    v2t.set(i, j, rng.uniform());
                    t2v.set(i, j, rng.uniform());
                }
            }
            let ids: Vec<i64> = (0..s_len as i64).map(|i| i / 2).collect();
            for strategy in [GroupingStrategy::Hardest, GroupingStrategy::Semihard] {
                for efn in [false, true] {
                    let cfg = GroupingConfig {
                        strategy,
                        s: 3,
                        efn,
                        collect_queue_size: 8,
                        subqueue_size: 8,
                        batch_size: 4,
                    };
                    let start = rng.below(s_len);
                    let fast = crate::sampler::group_subqueue(
                        &v2t,
                        &t2v,
                        &ids,
                        &cfg,
                        &mut DetRng::new(seed ^ 0xAB),
                    )
                    .unwrap();
                    let oracle_start = fast[0];
                    let oracle = brute_force_group(&v2t, &t2v, &ids, &cfg, oracle_start);
                    if fast != oracle {
                        ok = false;
                        detail = format!("mismatch at seed {seed} start {start}");
                        break 'outer;
                    }
                }
            }
        }
        results.push(check("sampler oracle equivalence (S=8)", ok, detail));
    }

    {
        let cfg = tiny_cfg();
        let mut model = DualModel::init(&cfg, 3);
        for t in model.teacher.flatten_mut() {
            t.data_mut().fill(5.0);
        }
        for s in model.student.flatten_mut() {
            s.data_mut().fill(1.0);
        }
        let beta: f64 = 0.9;
        let mut ok = true;
        for n in 1..=50 {
            ema_update(&mut model.teacher, &model.student, beta).unwrap();
            let gap = model.teacher.flatten()[0].data()[0] - 1.0;
            if (gap - beta.powi(n) * 4.0).abs() >= 1e-12 {
                ok = false;
                break;
            }
        }
        results.push(check("EMA geometric decay over 50 steps", ok, "tol 1e-12".into()));
    }

    {
        let weights = [0.1, 0.4, 0.05, 0.3, 0.15];
        let mut ok = true;
        for seed in 0..1000u64 {
            let idx =
                select_mask_indices(&weights, 2, 3, &mut DetRng::new(seed)).unwrap();
            if idx.len() != 2 || idx.iter().any(|i| ![1usize, 3, 4].contains(i)) {
                ok = false;
                break;
            }
        }
        results.push(check("mask selection exactness (1000 seeds)", ok, "K=2, L=3".into()));
    }

    results
}

pub fn all_pass(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}
