//! Qualitative artifacts: per-pair mask dumps and P2 graymap heatmaps of the
//! image attention summary.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::TrainConfig;
use crate::datagen::{visibility_labels, Corpus};
use crate::masking::{plan_masks, summarize_attention, AttentionSummary};
use crate::rng::{derive_seed, DetRng};
use crate::train::Trainer;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("cannot write {0}: {1}")]
    Io(String, std::io::Error),
}

/// o_image (length P*P) as a P2 portable graymap, row-major, scaled so the
/// largest entry maps to 255.
pub fn heatmap_pgm(o_image: &[f64], p: usize) -> String {
    assert_eq!(o_image.len(), p * p, "heatmap: o_image is not a {p}x{p} grid");
    let max = o_image.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{p} {p}\n255\n");
    for r in 0..p {
        let row: Vec<String> = (0..p)
            .map(|c| {
                let v = o_image[r * p + c];
                let g = if max > 0.0 { (v / max * 255.0).round() as i64 } else { 0 };
                g.clamp(0, 255).to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn fmt_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ")
}

fn fmt_indices(xs: &[usize]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Write `masks.txt` plus one `heatmap_NNNN.pgm` per pair into `out_dir`.
/// Deterministic for a fixed (model, corpus, seed).
pub fn dump_masks(
    trainer: &Trainer,
    corpus: &Corpus,
    seed: u64,
    out_dir: &Path,
) -> Result<(), DumpError> {
    let io_err = |p: &Path, e: std::io::Error| DumpError::Io(p.display().to_string(), e);
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let cfg: &TrainConfig = &trainer.cfg;
    let p_side = cfg.model.patches_per_side;
    let mut text = String::new();
    for (e, view) in corpus.pairs.iter().enumerate() {
        let (summary, plan) = pair_summary_and_plan(trainer, e, view, seed);
        let labels = visibility_labels(view);
        writeln!(text, "pair {e} item {}", view.item_id).unwrap();
        writeln!(text, "o_text {}", fmt_floats(&summary.o_text)).unwrap();
        writeln!(text, "o_image {}", fmt_floats(&summary.o_image)).unwrap();
        writeln!(text, "idx_text {}", fmt_indices(&plan.idx_text)).unwrap();
        writeln!(text, "idx_image {}", fmt_indices(&plan.idx_image)).unwrap();
        let bits: Vec<&str> = labels.iter().map(|&b| if b { "1" } else { "0" }).collect();
        writeln!(text, "visible {}", bits.join(" ")).unwrap();
        let pgm_path = out_dir.join(format!("heatmap_{e:04}.pgm"));
        std::fs::write(&pgm_path, heatmap_pgm(&summary.o_image, p_side))
            .map_err(|err| io_err(&pgm_path, err))?;
    }
    let txt_path = out_dir.join("masks.txt");
    std::fs::write(&txt_path, text).map_err(|e| io_err(&txt_path, e))?;
    Ok(())
}

fn pair_summary_and_plan(
    trainer: &Trainer,
    e: usize,
    view: &crate::datagen::View,
    seed: u64,
) -> (AttentionSummary, crate::masking::MaskPlan) {
    let pass = trainer.teacher_record(view, derive_seed(seed, &[e as u64]));
    let summary = summarize_attention(&pass);
    let mut rng = DetRng::derived(seed, &[b'd' as u64, e as u64]);
    let plan = plan_masks(
        &summary,
        &trainer.cfg.mask,
        trainer.cfg.masking_text,
        trainer.cfg.masking_image,
        pass.provenance,
        &mut rng,
    )
    .expect("valid mask bounds");
    (summary, plan)
}
