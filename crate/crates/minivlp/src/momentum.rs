//! Teacher EMA dynamics and the contrastive feature queues.

use thiserror::Error;

use crate::model::ModelParams;
use crate::rng::DetRng;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum MomentumError {
    #[error("parameter shape mismatch at flat index {0}")]
    ShapeMismatch(usize),
    #[error("enqueue of {0} vectors exceeds queue capacity {1}")]
    BatchTooLarge(usize, usize),
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumConfig {
    pub beta: f64,
    pub queue_size: usize,
}

impl Default for MomentumConfig {
    fn default() -> Self {
        MomentumConfig { beta: 0.9, queue_size: 16 }
    }
}

/// theta' <- beta*theta' + (1-beta)*theta, elementwise over the flattened
/// parameter lists.
pub fn ema_update(
    teacher: &mut ModelParams,
    student: &ModelParams,
    beta: f64,
) -> Result<(), MomentumError> {
    let s: Vec<&Tensor> = student.flatten();
    let mut t: Vec<&mut Tensor> = teacher.flatten_mut();
    assert_eq!(s.len(), t.len());
    for (i, (tt, st)) in t.iter_mut().zip(s.iter()).enumerate() {
        if tt.shape() != st.shape() {
            return Err(MomentumError::ShapeMismatch(i));
        }
        for (tv, &sv) in tt.data_mut().iter_mut().zip(st.data().iter()) {
            *tv = beta * *tv + (1.0 - beta) * sv;
        }
    }
    Ok(())
}

/// Fixed-capacity FIFO ring of unit feature vectors with parallel item ids.
#[derive(Clone, Debug)]
pub struct FeatureQueue {
    vectors: Tensor, // U x dim
    item_ids: Vec<i64>,
    cursor: usize,
    dim: usize,
}

impl FeatureQueue {
    /// Start full of seeded random unit vectors (item id -1, matching nothing)
    /// so similarity denominators are well-defined before real features land.
    pub fn new_seeded(capacity: usize, dim: usize, rng: &mut DetRng) -> Self {
        assert!(capacity > 0 && dim > 0);
        let mut vectors = Tensor::zeros(capacity, dim);
        for i in 0..capacity {
            let v = rng.unit_vector(dim);
            vectors.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(&v);
        }
        FeatureQueue { vectors, item_ids: vec![-1; capacity], cursor: 0, dim }
    }

    pub fn capacity(&self) -> usize {
        self.vectors.rows()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn item_ids(&self) -> &[i64] {
        &self.item_ids
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Overwrite the oldest slots with `batch` rows; returns the slot indices
    /// written, in row order (these are the queue positions of the new
    /// positives).
    pub fn enqueue(&mut self, batch: &Tensor, item_ids: &[i64]) -> Result<Vec<usize>, MomentumError> {
        let u = self.capacity();
        let b = batch.rows();
        if b > u {
            return Err(MomentumError::BatchTooLarge(b, u));
        }
        assert_eq!(batch.cols(), self.dim, "enqueue: feature width mismatch");
        assert_eq!(item_ids.len(), b);
        let mut slots = Vec::with_capacity(b);
        for r in 0..b {
            let slot = (self.cursor + r) % u;
            self.vectors.data_mut()[slot * self.dim..(slot + 1) * self.dim]
                .copy_from_slice(batch.row(r));
            self.item_ids[slot] = item_ids[r];
            slots.push(slot);
        }
        self.cursor = (self.cursor + b) % u;
        Ok(slots)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_params(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
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
        };
        ModelParams::init(&cfg, seed)
    }

    #[test]
    fn ema_boundary_cases() {
        let student = tiny_params(1);
        let mut teacher = tiny_params(2);
        let before: Vec<f64> =
            teacher.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        let after: Vec<f64> = teacher.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
        assert_eq!(before, after);

        ema_update(&mut teacher, &student, 0.0).unwrap();
        let t: Vec<f64> = teacher.flatten().iter().flat_map(|x| x.data().to_vec()).collect();
        let s: Vec<f64> = student.flatten().iter().flat_map(|x| x.data().to_vec()).collect();
        assert_eq!(t, s);
    }

    #[test]
    fn ema_midpoint() {
        let mut teacher = tiny_params(1);
        let mut student = tiny_params(1);
        for t in teacher.flatten_mut() {
            t.data_mut().fill(2.0);
        }
        for s in student.flatten_mut() {
            s.data_mut().fill(4.0);
        }
        ema_update(&mut teacher, &student, 0.5).unwrap();
        for t in teacher.flatten() {
            for &v in t.data() {
                assert_eq!(v, 3.0);
            }
        }
    }

    #[test]
    fn ema_geometric_decay() {
        let mut teacher = tiny_params(1);
        let mut student = tiny_params(1);
        for t in teacher.flatten_mut() {
            t.data_mut().fill(5.0);
        }
        for s in student.flatten_mut() {
            s.data_mut().fill(1.0);
        }
        let beta: f64 = 0.9;
        for n in 1..=50usize {
            ema_update(&mut teacher, &student, beta).unwrap();
            let gap = teacher.flatten()[0].data()[0] - 1.0;
            let expect = beta.powi(n as i32) * 4.0;
            assert!((gap - expect).abs() < 1e-12, "n={n}: {gap} vs {expect}");
        }
    }

    #[test]
    fn queue_fills_in_order() {
        let mut rng = DetRng::new(7);
        let mut q = FeatureQueue::new_seeded(4, 3, &mut rng);
        let batch = Tensor::from_vec(
            4,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0],
        );
        let slots = q.enqueue(&batch, &[10, 11, 12, 13]).unwrap();
        assert_eq!(slots, vec![0, 1, 2, 3]);
        assert_eq!(q.item_ids(), &[10, 11, 12, 13]);
        assert_eq!(q.vectors().row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn queue_evicts_fifo() {
        let mut rng = DetRng::new(7);
        let mut q = FeatureQueue::new_seeded(4, 2, &mut rng);
        for i in 0..5i64 {
            let v = Tensor::row_vec(vec![1.0, 0.0]);
            q.enqueue(&v, &[i]).unwrap();
        }
        // slot 0 was overwritten by the 5th push
        assert_eq!(q.item_ids(), &[4, 1, 2, 3]);
        assert_eq!(q.cursor(), 1);
    }

    #[test]
    fn queue_matches_reference_simulation() {
        let mut rng = DetRng::new(9);
        let u = 7;
        let mut q = FeatureQueue::new_seeded(u, 2, &mut rng);
        let mut reference: Vec<i64> = q.item_ids().to_vec();
        let mut cursor = 0usize;
        let mut pushed = 0usize;
        let mut script_rng = DetRng::new(33);
        for step in 0..40 {
            let b = 1 + script_rng.below(u);
            let mut batch = Tensor::zeros(b, 2);
            let mut ids = Vec::with_capacity(b);
            for r in 0..b {
                batch.set(r, 0, 1.0);
                let id = (step * 100 + r) as i64;
                ids.push(id);
                reference[cursor] = id;
                cursor = (cursor + 1) % u;
            }
            pushed += b;
            q.enqueue(&batch, &ids).unwrap();
            assert_eq!(q.item_ids(), reference.as_slice());
            let stored_real = q.item_ids().iter().filter(|&&i| i >= 0).count();
            assert_eq!(stored_real, pushed.min(u));
        }
    }

    #[test]
    fn queue_rejects_oversized_batch() {
        let mut rng = DetRng::new(1);
        let mut q = FeatureQueue::new_seeded(2, 2, &mut rng);
        let batch = Tensor::zeros(3, 2);
        assert!(matches!(
            q.enqueue(&batch, &[1, 2, 3]),
            Err(MomentumError::BatchTooLarge(3, 2))
        ));
    }

    #[test]
    fn seeded_queue_vectors_are_unit_norm() {
        let mut rng = DetRng::new(5);
        let q = FeatureQueue::new_seeded(16, 8, &mut rng);
        for i in 0..16 {
            let n: f64 = q.vectors().row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
