//! Update rules. Weight decay is the coupled (L2) form, added to the
//! incoming gradient before any moment statistics.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}` (expected sgd, momentum or adam)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Config(format!("{what} out of range: {v}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr);
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay", self.weight_decay);
        }
        for (what, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(what, v);
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon", self.adam_epsilon);
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based): the base rate times
/// 0.1 for every decay epoch already reached.
pub fn step_decay_lr(base: f64, decay_epochs: &[usize], epoch: usize) -> f64 {
    let hits = decay_epochs.iter().filter(|&&e| e <= epoch).count();
    base * 0.1f64.powi(hits as i32)
}

#[derive(Clone, Debug)]
struct Moments<T: Scalar> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar> {
    config: OptimizerConfig,
    lr: f64,
    t: u64,
    state: IndexMap<String, Moments<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            lr: config.lr,
            t: 0,
            state: IndexMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. `grads` must be finite and cover every
    /// parameter; it is stored as each parameter's gradient. Nothing is
    /// modified when validation fails.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradMap<T>) -> Result<()> {
        for (path, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { path: path.clone() });
            }
        }
        params.set_grads(grads)?;
        self.t += 1;
        let cfg = self.config;
        let lr = self.lr;
        let wd = cfg.weight_decay;
        let t = self.t as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
        for p in params.iter_mut() {
            let moments = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                first: p.value.zeros_like(),
                second: (cfg.kind == OptimizerKind::Adam).then(|| p.value.zeros_like()),
            });
            let w = p.value.data_mut();
            let g = p.grad.data();
            let v = moments.first.data_mut();
            match cfg.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in w.iter_mut().zip(g) {
                        let w64 = w.as_f64();
                        *w = T::of(w64 - lr * (g.as_f64() + wd * w64));
                    }
                }
                OptimizerKind::Momentum => {
                    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        let w64 = w.as_f64();
                        let v64 = cfg.momentum * v.as_f64() + g.as_f64() + wd * w64;
                        *v = T::of(v64);
                        *w = T::of(w64 - lr * v64);
                    }
                }
                OptimizerKind::Adam => {
                    let s = moments.second.as_mut().expect("adam second moment").data_mut();
                    for (((w, &g), m), s) in w.iter_mut().zip(g).zip(v.iter_mut()).zip(s.iter_mut()) {
                        let w64 = w.as_f64();
                        let g64 = g.as_f64() + wd * w64;
                        let m64 = cfg.beta1 * m.as_f64() + (1.0 - cfg.beta1) * g64;
                        let s64 = cfg.beta2 * s.as_f64() + (1.0 - cfg.beta2) * g64 * g64;
                        *m = T::of(m64);
                        *s = T::of(s64);
                        let step = (m64 / c1) / ((s64 / c2).sqrt() + cfg.adam_epsilon);
                        *w = T::of(w64 - lr * step);
                    }
                }
            }
        }
        Ok(())
    }
}
