use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::params::{ParamLayout, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW with bias correction. Moments are kept in `f32` like the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub(crate) m: Params<f32>,
    pub(crate) v: Params<f32>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new(layout: Arc<ParamLayout>, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            m: Params::zeros(layout.clone()),
            v: Params::zeros(layout),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Params<f32>, &Params<f32>) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, params: &mut Params<f32>, grads: &Params<f32>, lr: f64) {
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let layout = params.layout().clone();
        for info in layout.tensors() {
            let range = info.offset..info.offset + info.numel();
            let decay = if info.shape.len() == 2 { weight_decay } else { 0.0 };
            let p = &mut params.as_mut_slice()[range.clone()];
            let g = &grads.as_slice()[range.clone()];
            let m = &mut self.m.as_mut_slice()[range.clone()];
            let v = &mut self.v.as_mut_slice()[range];
            for i in 0..p.len() {
                let gi = g[i] as f64;
                let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
                let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mut w = p[i] as f64;
                w -= lr * decay * w;
                w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = w as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PositionalStrategy;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = ModelConfig::new(5, 4, 1, 2, 8, PositionalStrategy::Vanilla { base: 1e4 }, 0).unwrap();
        let mut p = Params::<f32>::init(&cfg);
        let before = p.clone();
        let mut g = Params::<f32>::zeros(p.layout().clone());
        for (i, x) in g.as_mut_slice().iter_mut().enumerate() {
            *x = if i % 2 == 0 { 0.3 } else { -2.0 };
        }
        let mut opt = AdamW::new(
            p.layout().clone(),
            AdamHyper {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.update(&mut p, &g, 1e-2);
        for (i, (a, b)) in p.as_slice().iter().zip(before.as_slice()).enumerate() {
            let expect = if i % 2 == 0 { -1e-2 } else { 1e-2 };
            assert!(((a - b) as f64 - expect).abs() < 1e-6, "{i}");
        }
        assert_eq!(opt.step_count(), 1);
    }
}
