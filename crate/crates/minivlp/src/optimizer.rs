//! AdamW with decoupled weight decay over the flattened parameter list.

use crate::config::OptimConfig;
use crate::model::ModelParams;
use crate::tensor::Tensor;

pub struct AdamW {
    cfg: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig, params: &ModelParams) -> Self {
        let shapes: Vec<(usize, usize)> =
            params.flatten().iter().map(|p| p.shape()).collect();
        AdamW {
            cfg,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// One update at the full configured learning rate.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>]) {
        self.step_scaled(params, grads, 1.0);
    }

    /// One update. `grads` is aligned with the flatten order; a `None` slot
    /// means the parameter received no gradient this step (left untouched by
    /// the moment update but still decayed). `lr_scale` multiplies the
    /// configured rate, for warmup/decay schedules.
    pub fn step_scaled(
        &mut self,
        params: &mut ModelParams,
        grads: &[Option<Tensor>],
        lr_scale: f64,
    ) {
        let OptimConfig { lr, weight_decay, beta1, beta2, eps, .. } = self.cfg;
        let lr = lr * lr_scale;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut flat = params.flatten_mut();
        assert_eq!(flat.len(), grads.len(), "optimizer: grad list misaligned");
        for (i, p) in flat.iter_mut().enumerate() {
            let data = p.data_mut();
            for d in data.iter_mut() {
                *d -= lr * weight_decay * *d;
            }
            let Some(g) = &grads[i] else { continue };
            assert_eq!(g.numel(), data.len(), "optimizer: grad shape misaligned at {i}");
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((d, &gv), (mi, vi)) in
                data.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *d -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Learning-rate multiplier for step `step` of `total`: linear warmup over
/// `warmup` steps, then cosine decay from 1 down to `final_frac` over the
/// remainder.
pub fn lr_scale(step: usize, total: usize, warmup: usize, final_frac: f64) -> f64 {
    assert!(step < total, "lr_scale: step {step} out of {total}");
    assert!((0.0..=1.0).contains(&final_frac), "lr_scale: final_frac {final_frac}");
    let warmup = warmup.min(total);
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    if total == warmup {
        return 1.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    final_frac + (1.0 - final_frac) * cos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            layers_text: 0,
            layers_vision: 0,
            layers_fusion: 1,
            text_len: 4,
            patches_per_side: 2,
            patch_dim: 4,
            vocab_size: 16,
            mask_token_id: 15,
            cls_token_id: 0,
            proj_dim: 6,
        };
        ModelParams::init(&cfg, 1)
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = tiny();
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg, &params);
        let before: Vec<f64> =
            params.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
        let grads: Vec<Option<Tensor>> = params
            .flatten()
            .iter()
            .map(|t| Some(Tensor::filled(t.rows(), t.cols(), 2.0)))
            .collect();
        opt.step(&mut params, &grads);
        let after: Vec<f64> =
            params.flatten().iter().flat_map(|t| t.data().to_vec()).collect();
        // bias-corrected first step is lr * g/|g| up to eps
        for (b, a) in before.iter().zip(&after) {
            let delta = a - b;
            assert!((delta + cfg.lr).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut params = tiny();
        for t in params.flatten_mut() {
            t.data_mut().fill(1.0);
        }
        let cfg = OptimConfig { lr: 0.1, weight_decay: 0.5, ..OptimConfig::default() };
        let mut opt = AdamW::new(cfg, &params);
        let grads: Vec<Option<Tensor>> = params.flatten().iter().map(|_| None).collect();
        opt.step(&mut params, &grads);
        for t in params.flatten() {
            for &v in t.data() {
                assert!((v - 0.95).abs() < 1e-12); // 1 - lr*wd, no moment update
            }
        }
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = tiny();
            let mut opt = AdamW::new(OptimConfig::default(), &params);
            for step in 0..5 {
                let grads: Vec<Option<Tensor>> = params
                    .flatten()
                    .iter()
                    .map(|t| Some(Tensor::filled(t.rows(), t.cols(), 0.1 * (step + 1) as f64)))
                    .collect();
                opt.step(&mut params, &grads);
            }
            params.flatten().iter().flat_map(|t| t.data().to_vec()).collect::<Vec<f64>>()
        };
        assert_eq!(run(), run());
    }
}
