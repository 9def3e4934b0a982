//! Gated MLP backbone with sinusoidal time embedding and optional class or
//! vector conditioning.

pub mod checkpoint;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndmath::{randn, Gradients, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub cond_classes: Option<usize>,
    pub cond_vec_dim: Option<usize>,
}

impl MlpConfig {
    /// Toy defaults: hidden width 256, two gated layers, 128-dimensional
    /// embedding, no conditioning.
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            hidden: 256,
            layers: 2,
            embed_dim: 128,
            cond_classes: None,
            cond_vec_dim: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_dim > 0 && self.out_dim > 0 && self.hidden > 0 && self.layers > 0,
            Config,
            "network dimensions must be positive: {self:?}"
        );
        ensure!(
            self.embed_dim > 0 && self.embed_dim.is_multiple_of(2),
            Config,
            "embed_dim must be positive and even, got {}",
            self.embed_dim
        );
        ensure!(
            !(self.cond_classes.is_some() && self.cond_vec_dim.is_some()),
            Config,
            "class and vector conditioning are mutually exclusive"
        );
        ensure!(
            self.cond_classes != Some(0) && self.cond_vec_dim != Some(0),
            Config,
            "conditioning size must be positive"
        );
        Ok(())
    }
}

/// Ordered, named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, self.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_entries(checkpoint::load_tensors(path)?))
    }
}

/// Per-row conditioning input.
#[derive(Debug, Clone, Copy)]
pub enum Cond<'a> {
    None,
    Classes(&'a [usize]),
    Vectors(&'a Tensor),
}

/// Sinusoidal embedding: interleaved `(sin(t·ω_k), cos(t·ω_k))` with `ω_k`
/// geometric from 1 to 10⁴.
pub fn time_embed(t: f64, dim: usize) -> Result<Tensor> {
    ensure!(dim > 0 && dim.is_multiple_of(2), Config, "time embedding dimension must be even, got {dim}");
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let w = 10f64.powf(4.0 * frac);
        data.push((t * w).sin());
        data.push((t * w).cos());
    }
    Tensor::new([1, dim], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: Params,
}

/// Parameters registered on a tape, in the same order as [`Params`].
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    /// Gradient tensors ordered like the parameters.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get(*v).expect("bound parameter").clone()).collect()
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, var: f64) -> Tensor {
    randn(rng, [rows, cols]).map(|v| v * var.sqrt())
}

impl Mlp {
    /// Weights `N(0, 1/fan_in)`, biases zero, class table `N(0, 1)`.
    pub fn init(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (h, e) = (config.hidden, config.embed_dim);
        let mut entries = Vec::new();
        if let Some(c) = config.cond_classes {
            entries.push(("cond.table".to_string(), gaussian(rng, c, e, 1.0)));
        }
        if let Some(v) = config.cond_vec_dim {
            entries.push(("cond.w".to_string(), gaussian(rng, v, e, 1.0 / v as f64)));
            entries.push(("cond.b".to_string(), Tensor::zeros([e])));
        }
        for l in 0..config.layers {
            let fan_in = if l == 0 { config.in_dim } else { h };
            entries.push((format!("l{l}.w"), gaussian(rng, fan_in, h, 1.0 / fan_in as f64)));
            entries.push((format!("l{l}.b"), Tensor::zeros([h])));
            entries.push((format!("l{l}.g"), gaussian(rng, e, h, 1.0 / e as f64)));
            entries.push((format!("l{l}.c"), Tensor::zeros([h])));
        }
        entries.push(("out.w".to_string(), gaussian(rng, h, config.out_dim, 1.0 / h as f64)));
        entries.push(("out.b".to_string(), Tensor::zeros([config.out_dim])));
        Ok(Self {
            config,
            params: Params::from_entries(entries),
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(config: MlpConfig) -> Result<Self> {
        let mut m = Self::init(config, &mut Rng::new(0))?;
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn from_params(config: MlpConfig, params: Params) -> Result<Self> {
        let reference = Self::zeroed(config.clone())?;
        ensure!(
            reference.params.len() == params.len(),
            Config,
            "checkpoint holds {} tensors, architecture needs {}",
            params.len(),
            reference.params.len()
        );
        for ((rn, rt), (n, t)) in reference.params.iter().zip(params.iter()) {
            ensure!(
                rn == n && rt.shape() == t.shape(),
                Config,
                "checkpoint tensor `{n}` {:?} does not match `{rn}` {:?}",
                t.shape(),
                rt.shape()
            );
        }
        Ok(Self { config, params })
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .tensors()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Registers every parameter as a trainable tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.register(tape, true)
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        let i = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        bound.vars[i]
    }

    /// Condition embedding `[batch × embed_dim]`, or `None` when unconditioned.
    pub fn embed_condition(&self, tape: &mut Tape, bound: &Bound, cond: Cond, batch: usize) -> Result<Option<Var>> {
        let e = self.config.embed_dim;
        match (cond, self.config.cond_classes, self.config.cond_vec_dim) {
            (Cond::None, None, None) => Ok(None),
            (Cond::Classes(labels), Some(classes), None) => {
                ensure!(
                    labels.len() == batch,
                    Config,
                    "{} class labels for a batch of {batch}",
                    labels.len()
                );
                let mut onehot = vec![0.0; batch * classes];
                for (i, &c) in labels.iter().enumerate() {
                    ensure!(c < classes, Domain, "class {c} out of range 0..{classes}");
                    onehot[i * classes + c] = 1.0;
                }
                let oh = tape.constant(Tensor::new([batch, classes], onehot)?);
                let table = self.var(bound, "cond.table");
                Ok(Some(tape.matmul(oh, table)?))
            }
            (Cond::Vectors(v), None, Some(dim)) => {
                ensure!(
                    v.shape() == [batch, dim],
                    Config,
                    "condition vectors {:?}, expected [{batch}, {dim}]",
                    v.shape()
                );
                let cv = tape.constant(v.clone());
                let w = self.var(bound, "cond.w");
                let b = self.var(bound, "cond.b");
                let m = tape.matmul(cv, w)?;
                let out = tape.add_bias(m, b)?;
                debug_assert_eq!(tape.value(out).cols(), e);
                Ok(Some(out))
            }
            _ => Err(Error::Config(format!(
                "condition {cond:?} does not match the configured conditioning (classes {:?}, vector {:?})",
                self.config.cond_classes, self.config.cond_vec_dim
            ))),
        }
    }

    /// Network output `[batch × out_dim]` for inputs `z` at shared time `t`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, t: f64, cond: Cond) -> Result<Var> {
        let shape = tape.value(z).shape().to_vec();
        ensure!(
            shape.len() == 2 && shape[1] == self.config.in_dim,
            Dimension,
            "input {shape:?}, expected [batch, {}]",
            self.config.in_dim
        );
        let batch = shape[0];
        let temb = tape.constant(time_embed(t, self.config.embed_dim)?);
        let emb = match self.embed_condition(tape, bound, cond, batch)? {
            None => temb,
            Some(ce) => {
                let te = tape.repeat_rows(temb, batch)?;
                tape.add(te, ce)?
            }
        };
        let mut h = z;
        for l in 0..self.config.layers {
            let w = self.var(bound, &format!("l{l}.w"));
            let b = self.var(bound, &format!("l{l}.b"));
            let g = self.var(bound, &format!("l{l}.g"));
            let c = self.var(bound, &format!("l{l}.c"));
            let pre = tape.linear(h, w, b)?;
            let gpre = tape.linear(emb, g, c)?;
            let gate = tape.sigmoid(gpre)?;
            h = tape.gated_silu(pre, gate)?;
        }
        let w = self.var(bound, "out.w");
        let b = self.var(bound, "out.b");
        tape.linear(h, w, b)
    }

    /// Forward pass without gradient tracking.
    pub fn predict(&self, z: &Tensor, t: f64, cond: Cond) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.register(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward(&mut tape, &bound, zv, t, cond)?;
        Ok(tape.value(out).clone())
    }
}
