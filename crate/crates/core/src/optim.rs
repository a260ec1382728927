//! Adam and Nadam optimizers plus the learning-rate-on-plateau schedule and
//! early stopping.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::layers::VisitParams;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    Nadam,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Adam => "adam",
            OptimKind::Nadam => "nadam",
        }
    }

    pub fn parse(s: &str) -> Result<OptimKind> {
        match s {
            "adam" => Ok(OptimKind::Adam),
            "nadam" => Ok(OptimKind::Nadam),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}', expected one of: adam, nadam"
            ))),
        }
    }
}

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

struct Moments<T: Element> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// First/second-moment optimizer with bias correction. `Nadam` applies the
/// Nesterov look-ahead `beta1 * m_hat + (1 - beta1) * g / (1 - beta1^t)` in
/// the numerator; both divide by `sqrt(v_hat) + eps`.
pub struct Optimizer<T: Element> {
    pub kind: OptimKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    slots: HashMap<String, Moments<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimKind, lr: f64) -> Optimizer<T> {
        Optimizer {
            kind,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step_count: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over every trainable parameter carrying a gradient.
    /// Parameters without gradients are treated as having gradient zero.
    /// Errors if no gradient is present at all.
    pub fn step<M: VisitParams<T> + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        let mut any = false;
        model.visit_params(&mut |p| {
            if p.trainable && p.grad.is_some() {
                any = true;
            }
        });
        if !any {
            return Err(Error::Numeric(
                "optimizer step with no gradients populated".into(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let lr = T::from_f64(self.lr);
        let beta1 = T::from_f64(self.beta1);
        let beta2 = T::from_f64(self.beta2);
        let eps = T::from_f64(self.eps);
        let one = T::one();
        let bc1 = one - beta1.powi(t);
        let bc2 = one - beta2.powi(t);
        let kind = self.kind;
        let slots = &mut self.slots;

        model.visit_params(&mut |p| {
            if !p.trainable {
                return;
            }
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.value.shape()),
                v: Tensor::zeros(p.value.shape()),
            });
            let zero_grad;
            let grad = match &p.grad {
                Some(g) => g,
                None => {
                    zero_grad = Tensor::zeros(p.value.shape());
                    &zero_grad
                }
            };
            let theta = p.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..theta.len() {
                let g = grad.data()[i];
                m[i] = beta1 * m[i] + (one - beta1) * g;
                v[i] = beta2 * v[i] + (one - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let numerator = match kind {
                    OptimKind::Adam => m_hat,
                    OptimKind::Nadam => beta1 * m_hat + (one - beta1) * g / bc1,
                };
                theta[i] -= lr * numerator / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }

    /// Serializes moments and the step counter for checkpointing.
    pub fn state_entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut entries = vec![(
            "step_count".to_string(),
            Tensor::scalar(T::from_f64(self.step_count as f64)),
        )];
        let mut names: Vec<&String> = self.slots.keys().collect();
        names.sort();
        for name in names {
            let s = &self.slots[name];
            entries.push((format!("m.{name}"), s.m.clone()));
            entries.push((format!("v.{name}"), s.v.clone()));
        }
        entries
    }

    pub fn load_state_entries(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        self.slots.clear();
        let mut m_parts: HashMap<String, Tensor<T>> = HashMap::new();
        let mut v_parts: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, tensor) in entries {
            if name == "step_count" {
                self.step_count = tensor.data()[0].to_f64() as u64;
            } else if let Some(rest) = name.strip_prefix("m.") {
                m_parts.insert(rest.to_string(), tensor);
            } else if let Some(rest) = name.strip_prefix("v.") {
                v_parts.insert(rest.to_string(), tensor);
            } else {
                return Err(Error::Config(format!(
                    "unexpected optimizer state entry '{name}'"
                )));
            }
        }
        if m_parts.len() != v_parts.len() {
            return Err(Error::Config("optimizer state m/v entries unpaired".into()));
        }
        for (name, m) in m_parts {
            let v = v_parts
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("optimizer state missing v.{name}")))?;
            self.slots.insert(name, Moments { m, v });
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// an improvement greater than `min_delta`; never below `min_lr`, never
/// increases.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: u64,
    pub min_delta: f64,
    pub min_lr: f64,
    pub best: f64,
    pub wait: u64,
}

impl Default for ReduceOnPlateau {
    fn default() -> Self {
        ReduceOnPlateau {
            factor: 0.1,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-7,
            best: f64::INFINITY,
            wait: 0,
        }
    }
}

impl ReduceOnPlateau {
    /// Feeds one epoch's validation metric (lower is better) and returns the
    /// learning rate to use next.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric < self.best - self.min_delta {
            self.best = metric;
            self.wait = 0;
            lr
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.wait = 0;
                (lr * self.factor).max(self.min_lr)
            } else {
                lr
            }
        }
    }
}

/// Latches `stopped` after `patience` epochs without improvement greater
/// than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: u64,
    pub min_delta: f64,
    pub best: f64,
    pub wait: u64,
    pub stopped: bool,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 15,
            min_delta: 1e-4,
            best: f64::INFINITY,
            wait: 0,
            stopped: false,
        }
    }
}

impl EarlyStopping {
    pub fn observe(&mut self, loss: f64) -> bool {
        if self.stopped {
            return true;
        }
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.stopped = true;
            }
        }
        self.stopped
    }
}
