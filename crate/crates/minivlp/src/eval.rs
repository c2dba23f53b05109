//! Cross-modal retrieval evaluation: student projections, full similarity
//! matrix, recall at K in both directions.

use thiserror::Error;

use crate::datagen::Corpus;
use crate::model::{
    encode_image, encode_text, itc_project, DualModel, Modality, ModelConfig,
};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate eval pair for item {0}")]
    DuplicatePair(i64),
    #[error("recall cutoff {0} exceeds eval-set size {1}")]
    CutoffTooLarge(usize, usize),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct RetrievalReport {
    /// (K, recall) pairs, image query -> text candidates
    pub i2t: Vec<(usize, f64)>,
    /// text query -> image candidates
    pub t2i: Vec<(usize, f64)>,
}

impl RetrievalReport {
    pub fn recall(&self, direction_i2t: bool, k: usize) -> Option<f64> {
        let rows = if direction_i2t { &self.i2t } else { &self.t2i };
        rows.iter().find(|&&(kk, _)| kk == k).map(|&(_, r)| r)
    }
}

/// Student ITC projections for every pair in the corpus.
pub fn project_corpus(model: &DualModel, cfg: &ModelConfig, corpus: &Corpus) -> (Tensor, Tensor) {
    let tape = Tape::new();
    let (sv, _) = model.student.bind(&tape, false);
    let m = corpus.pairs.len();
    let mut v = Tensor::zeros(m, cfg.proj_dim);
    let mut t = Tensor::zeros(m, cfg.proj_dim);
    for (i, view) in corpus.pairs.iter().enumerate() {
        let mut tokens = vec![cfg.cls_token_id];
        tokens.extend_from_slice(&view.caption_tokens);
        let txt = encode_text(&tape, cfg, &sv.text, &tokens);
        let img = encode_image(&tape, cfg, &sv.vision, &view.patches, None);
        let pv = tape.tensor(itc_project(
            &tape,
            &sv.heads,
            tape.select_rows(img, &[0]),
            Modality::Visual,
        ));
        let pt = tape.tensor(itc_project(
            &tape,
            &sv.heads,
            tape.select_rows(txt, &[0]),
            Modality::Textual,
        ));
        v.data_mut()[i * cfg.proj_dim..(i + 1) * cfg.proj_dim].copy_from_slice(pv.data());
        t.data_mut()[i * cfg.proj_dim..(i + 1) * cfg.proj_dim].copy_from_slice(pt.data());
    }
    (v, t)
}

/// Rank of the true match for query row `q`: 1 + the number of candidates
/// strictly more similar, plus equally-similar candidates with a lower index.
fn rank_of_match(sims: &[f64], truth: usize) -> usize {
    let target = sims[truth];
    1 + sims
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > target || (s == target && j < truth))
        .count()
}

/// R@K from a similarity matrix whose diagonal marks the true matches.
pub fn recalls_from_similarity(sim: &Tensor, ks: &[usize]) -> Vec<(usize, f64)> {
    let m = sim.rows();
    ks.iter()
        .map(|&k| {
            let hits = (0..m).filter(|&q| rank_of_match(sim.row(q), q) <= k).count();
            (k, hits as f64 / m as f64)
        })
        .collect()
}

pub fn evaluate_retrieval(
    model: &DualModel,
    cfg: &ModelConfig,
    eval_corpus: &Corpus,
    ks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    let m = eval_corpus.pairs.len();
    for &k in ks {
        if k > m {
            return Err(EvalError::CutoffTooLarge(k, m));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    for view in &eval_corpus.pairs {
        if !seen.insert(view.item_id) {
            return Err(EvalError::DuplicatePair(view.item_id));
        }
    }
    let (v, t) = project_corpus(model, cfg, eval_corpus);
    let mut sim_i2t = Tensor::zeros(m, m);
    let mut sim_t2i = Tensor::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let s: f64 = v.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum();
            sim_i2t.set(i, j, s);
            sim_t2i.set(j, i, s);
        }
    }
    Ok(RetrievalReport {
        i2t: recalls_from_similarity(&sim_i2t, ks),
        t2i: recalls_from_similarity(&sim_t2i, ks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_corpus;
    use crate::rng::DetRng;

    #[test]
    fn identity_similarity_is_perfect() {
        let sim = Tensor::eye(5);
        let r = recalls_from_similarity(&sim, &[1, 5]);
        assert_eq!(r, vec![(1, 1.0), (5, 1.0)]);
    }

    #[test]
    fn single_pair_is_forced() {
        let sim = Tensor::scalar(0.3);
        assert_eq!(recalls_from_similarity(&sim, &[1]), vec![(1, 1.0)]);
    }

    #[test]
    fn ties_break_by_lower_index() {
        let sim = Tensor::filled(3, 3, 0.5);
        // query 0's match ranks 1; query 2's match ranks 3
        let r = recalls_from_similarity(&sim, &[1]);
        assert!((r[0].1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chance_level_for_random_vectors() {
        let m = 100;
        let mut total = 0.0;
        let seeds = 50;
        for seed in 0..seeds {
            let mut rng = DetRng::new(seed);
            let mut sim = Tensor::zeros(m, m);
            let vs: Vec<Vec<f64>> = (0..m).map(|_| rng.unit_vector(16)).collect();
            let ts: Vec<Vec<f64>> = (0..m).map(|_| rng.unit_vector(16)).collect();
            for i in 0..m {
                for j in 0..m {
                    sim.set(i, j, vs[i].iter().zip(&ts[j]).map(|(a, b)| a * b).sum());
                }
            }
            total += recalls_from_similarity(&sim, &[1])[0].1;
        }
        let mean = total / seeds as f64;
        assert!((mean - 0.01).abs() < 0.01, "mean R@1 {mean}");
    }

    #[test]
    fn untrained_model_evaluates_and_rejects_duplicates() {
        let cfg = ModelConfig::default();
        let model = DualModel::init(&cfg, 3);
        let eval = generate_corpus(8, 1, &cfg, 11).unwrap();
        let report = evaluate_retrieval(&model, &cfg, &eval, &[1, 4]).unwrap();
        for (_, r) in report.i2t.iter().chain(&report.t2i) {
            assert!((0.0..=1.0).contains(r));
        }
        assert!(report.recall(true, 4).unwrap() >= report.recall(true, 1).unwrap());

        let dup = generate_corpus(4, 2, &cfg, 11).unwrap(); // two views per item
        assert!(matches!(
            evaluate_retrieval(&model, &cfg, &dup, &[1]),
            Err(EvalError::DuplicatePair(_))
        ));
        assert!(matches!(
            evaluate_retrieval(&model, &cfg, &eval, &[9]),
            Err(EvalError::CutoffTooLarge(9, 8))
        ));
    }
}
