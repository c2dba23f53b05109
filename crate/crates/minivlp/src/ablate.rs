//! Ablation runner: the four masking combinations and the four grouping
//! strategies, each trained under identical seed and budget, reported as a
//! descriptive table (no ordering asserted).

use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::datagen::Corpus;
use crate::eval::evaluate_retrieval;
use crate::masking::MaskStrategy;
use crate::sampler::GroupingStrategy;
use crate::train::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Masking,
    Grouping,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub label: String,
    pub ok: bool,
    pub i2t_r1: Option<f64>,
    pub t2i_r1: Option<f64>,
    pub visible_fraction: Option<f64>,
    pub error: Option<String>,
}

/// The Table-5 analog: (text, image) masking strategy combinations.
fn masking_cells(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let combos = [
        ("random-text/random-image", MaskStrategy::Random, MaskStrategy::Random),
        ("random-text/attn-image", MaskStrategy::Random, MaskStrategy::Attentional),
        ("attn-text/random-image", MaskStrategy::Attentional, MaskStrategy::Random),
        ("attn-text/attn-image", MaskStrategy::Attentional, MaskStrategy::Attentional),
    ];
    combos
        .into_iter()
        .map(|(label, t, i)| {
            let mut cfg = base.clone();
            cfg.masking_text = t;
            cfg.masking_image = i;
            (label.to_string(), cfg)
        })
        .collect()
}

/// The Table-6 analog: batch grouping strategies.
fn grouping_cells(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let combos = [
        ("random", GroupingStrategy::Random, 1, false),
        ("hardest", GroupingStrategy::Hardest, 1, false),
        ("hardest+efn", GroupingStrategy::Hardest, 1, true),
        ("semihard+efn", GroupingStrategy::Semihard, base.grouping.s.max(2), true),
    ];
    combos
        .into_iter()
        .map(|(label, strategy, s, efn)| {
            let mut cfg = base.clone();
            cfg.grouping.strategy = strategy;
            cfg.grouping.s = s;
            cfg.grouping.efn = efn;
            (label.to_string(), cfg)
        })
        .collect()
}

fn run_cell(
    axis: &str,
    label: &str,
    cfg: &TrainConfig,
    corpus: &Corpus,
    eval_corpus: &Corpus,
) -> AblationRow {
    let attempt = || -> Result<(f64, f64, f64), String> {
        let mut tr = Trainer::new(cfg.clone());
        tr.train(corpus).map_err(|e| e.to_string())?;
        let report = evaluate_retrieval(&tr.model, &cfg.model, eval_corpus, &[1])
            .map_err(|e| e.to_string())?;
        let frac = tr.measure_visible_fraction(corpus, cfg.masking_text, cfg.seed);
        Ok((
            report.recall(true, 1).unwrap(),
            report.recall(false, 1).unwrap(),
            frac,
        ))
    };
    match attempt() {
        Ok((i2t, t2i, frac)) => AblationRow {
            axis: axis.into(),
            label: label.into(),
            ok: true,
            i2t_r1: Some(i2t),
            t2i_r1: Some(t2i),
            visible_fraction: Some(frac),
            error: None,
        },
        Err(e) => AblationRow {
            axis: axis.into(),
            label: label.into(),
            ok: false,
            i2t_r1: None,
            t2i_r1: None,
            visible_fraction: None,
            error: Some(e),
        },
    }
}

/// Train every requested cell and collect one row each; failed cells are
/// reported, not fatal.
pub fn run_ablation(
    base: &TrainConfig,
    corpus: &Corpus,
    eval_corpus: &Corpus,
    axes: &[AblationAxis],
) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for axis in axes {
        let (name, cells) = match axis {
            AblationAxis::Masking => ("masking", masking_cells(base)),
            AblationAxis::Grouping => ("grouping", grouping_cells(base)),
        };
        for (label, cfg) in cells {
            rows.push(run_cell(name, &label, &cfg, corpus, eval_corpus));
        }
    }
    rows
}

/// Plain-text comparison table.
pub fn format_report(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<10} {:<28} {:>8} {:>8} {:>10}",
        "axis", "cell", "i2t_r1", "t2i_r1", "vis_frac"
    )
    .unwrap();
    for r in rows {
        if r.ok {
            writeln!(
                out,
                "{:<10} {:<28} {:>8.4} {:>8.4} {:>10.4}",
                r.axis,
                r.label,
                r.i2t_r1.unwrap(),
                r.t2i_r1.unwrap(),
                r.visible_fraction.unwrap()
            )
            .unwrap();
        } else {
            writeln!(
                out,
                "{:<10} {:<28} FAILED: {}",
                r.axis,
                r.label,
                r.error.as_deref().unwrap_or("unknown")
            )
            .unwrap();
        }
    }
    out
}
