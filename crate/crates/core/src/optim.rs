//! Adam with decoupled weight decay, two learning-rate groups, linear
//! warmup then linear decay.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup_ratio: f64,
    pub total_steps: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 1e-5,
            lr_heads: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            total_steps: 10_000,
            max_grad_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_encoder > 0.0 && self.lr_heads > 0.0) {
            return Err(Error::InvalidArgument {
                arg: "lr",
                reason: "learning rates must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidArgument {
                arg: "warmup_ratio",
                reason: format!("{} is not in [0, 1]", self.warmup_ratio),
            });
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidArgument {
                arg: "steps",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Multiplier on the base learning rate for 0-based `step`.
    pub fn schedule(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            (step + 1) as f64 / warmup as f64
        } else if self.total_steps <= warmup {
            1.0
        } else {
            let left = self.total_steps.saturating_sub(step) as f64;
            (left / (self.total_steps - warmup) as f64).clamp(0.0, 1.0)
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Heads => self.lr_heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: usize,
}

impl AdamW {
    pub fn new(config: OptimConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.raw_dim()))
            .collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if let Some(max) = self.config.max_grad_norm {
            if norm > max {
                grads.scale(max / norm);
            }
        }
        let c = &self.config;
        let scale = c.schedule(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let i = id.index();
            let param = store.param(id);
            let lr = c.lr(param.group) * scale;
            let decay = if param.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            });
            let value = store.get_mut(id);
            Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / bias1) / ((v / bias2).sqrt() + c.eps);
                *p -= lr * (update + decay * *p);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimConfig {
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(c.warmup_steps(), 6);
        assert!((c.schedule(0) - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(c.schedule(5), 1.0);
        assert_eq!(c.schedule(6), 1.0);
        assert!((c.schedule(53) - 0.5).abs() < 1e-12);
        assert_eq!(c.schedule(100), 0.0);
        let flat = OptimConfig {
            warmup_ratio: 0.0,
            total_steps: 10,
            ..Default::default()
        };
        assert_eq!(flat.schedule(0), 1.0);
    }

    #[test]
    fn first_step_moves_each_group_by_its_rate() {
        let mut store = ParamStore::new(0);
        let e = store.add("enc", array![[1.0, -1.0]], ParamGroup::Encoder, false);
        let h = store.add("head", array![[1.0, -1.0]], ParamGroup::Heads, false);
        let cfg = OptimConfig {
            lr_encoder: 0.01,
            lr_heads: 0.1,
            warmup_ratio: 0.0,
            max_grad_norm: None,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Gradients::new(2);
        g.accumulate(e, &array![[2.0, -3.0]]);
        g.accumulate(h, &array![[0.5, 0.5]]);
        opt.step(&mut store, &mut g);
        // A bias-corrected first Adam step has magnitude lr in every coordinate.
        let de = store.get(e) - &array![[1.0, -1.0]];
        let dh = store.get(h) - &array![[1.0, -1.0]];
        for (v, want) in de.iter().zip([-0.01, 0.01]) {
            assert!((v - want).abs() < 1e-8);
        }
        for v in dh.iter() {
            assert!((v + 0.1).abs() < 1e-8);
        }
    }

    #[test]
    fn decay_only_touches_flagged_params() {
        let mut store = ParamStore::new(0);
        let w = store.add("w", array![[2.0]], ParamGroup::Heads, true);
        let b = store.add("b", array![[2.0]], ParamGroup::Heads, false);
        let cfg = OptimConfig {
            lr_heads: 0.1,
            weight_decay: 0.5,
            warmup_ratio: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Gradients::new(2);
        g.accumulate(w, &array![[0.0]]);
        g.accumulate(b, &array![[0.0]]);
        opt.step(&mut store, &mut g);
        assert!((store.get(w)[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
        assert_eq!(store.get(b)[[0, 0]], 2.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new(0);
        let x = store.add("x", array![[3.0, -2.0]], ParamGroup::Heads, false);
        let cfg = OptimConfig {
            lr_heads: 0.05,
            total_steps: 2000,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..2000 {
            let mut g = Gradients::new(1);
            let grad = store.get(x).mapv(|v| 2.0 * v);
            g.accumulate(x, &grad);
            opt.step(&mut store, &mut g);
        }
        assert!(store.get(x).iter().all(|v| v.abs() < 1e-2));
    }
}
