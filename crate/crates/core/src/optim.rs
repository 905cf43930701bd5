//! AdamW with decoupled weight decay, warmup + cosine schedule and global-norm
//! clipping.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use geode_tensor::{GradMap, ParamStore, Tensor, TensorError};

use crate::{GeodeError, Result};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_SKIPPED: u32 = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub schedule: Schedule,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, clip: f64, schedule: Schedule) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip: (clip > 0.0).then_some(clip),
            schedule,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to zero at `total`.
    WarmupCosine { warmup: u64, total: u64 },
}

impl Schedule {
    pub fn warmup_cosine(total: u64, warmup_frac: f64) -> Self {
        let total = total.max(1);
        Schedule::WarmupCosine {
            warmup: ((total as f64 * warmup_frac).round() as u64).min(total),
            total,
        }
    }

    /// Learning-rate multiplier for 0-based step `t`.
    pub fn factor(&self, t: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupCosine { warmup, total } => {
                if t < warmup {
                    (t + 1) as f64 / warmup as f64
                } else if total <= warmup {
                    1.0
                } else {
                    let p = ((t - warmup) as f64 / (total - warmup) as f64).min(1.0);
                    0.5 * (1.0 + (PI * p).cos())
                }
            }
        }
    }
}

/// Global L2 norm of `grads`.
pub fn grad_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { lr: f64, grad_norm: f64 },
    Skipped { consecutive: u32 },
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    step: u64,
    skipped: u32,
}

impl AdamW {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            skipped: 0,
        }
    }

    /// Applied steps so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.config.schedule.factor(self.step)
    }

    /// One update of every trainable parameter present in `grads`. Non-finite
    /// gradients skip the step; too many in a row abort.
    pub fn step(&mut self, store: &mut ParamStore, mut grads: GradMap) -> Result<StepOutcome> {
        for name in grads.keys() {
            if !store.is_trainable(name) {
                return Err(TensorError::Contract(format!("gradient for frozen or unknown parameter `{name}`")).into());
            }
        }
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient; skipped step ({} in a row)", self.skipped);
            if self.skipped >= MAX_SKIPPED {
                return Err(GeodeError::Diverged(format!(
                    "{} consecutive non-finite gradients",
                    self.skipped
                )));
            }
            return Ok(StepOutcome::Skipped {
                consecutive: self.skipped,
            });
        }
        self.skipped = 0;
        let norm = match self.config.clip {
            Some(c) => clip_gradients(&mut grads, c),
            None => grad_norm(&grads),
        };
        let lr = self.current_lr();
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, g) in &grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let m_new = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
                let w64 = *w as f64;
                *w = (w64 - lr * c.weight_decay * w64 - lr * update) as f32;
            }
        }
        Ok(StepOutcome::Applied { lr, grad_norm: norm })
    }

    /// Moments and step count as a store (`m.<name>`, `v.<name>`, `step`).
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, m) in &self.m {
            s.insert(format!("m.{name}"), Tensor::vector(m.clone()));
        }
        for (name, v) in &self.v {
            s.insert(format!("v.{name}"), Tensor::vector(v.clone()));
        }
        // split into two exact f32 halves
        let hi = (self.step >> 16) as f32;
        let lo = (self.step & 0xFFFF) as f32;
        s.insert("step", Tensor::vector(vec![hi, lo, self.skipped as f32]));
        s
    }

    pub fn load_state(&mut self, state: &ParamStore) -> Result<()> {
        let step = state.get("step")?.data().to_vec();
        if step.len() != 3 {
            return Err(TensorError::Contract("malformed optimizer step record".into()).into());
        }
        self.step = ((step[0] as u64) << 16) | step[1] as u64;
        self.skipped = step[2] as u32;
        self.m.clear();
        self.v.clear();
        for (name, t) in state.iter() {
            if let Some(n) = name.strip_prefix("m.") {
                self.m.insert(n.to_string(), t.data().to_vec());
            } else if let Some(n) = name.strip_prefix("v.") {
                self.v.insert(n.to_string(), t.data().to_vec());
            }
        }
        Ok(())
    }
}
