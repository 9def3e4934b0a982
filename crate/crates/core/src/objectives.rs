//! Prediction-space × loss-space pairings and gradient instrumentation.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndmath::{Tape, Tensor, Var};
use crate::stats::median;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    XPred,
    VPred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    XMse,
    VMse,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub prediction: Prediction,
    pub loss: LossSpace,
    /// Guard added to `1 - t` when converting an x-prediction into a velocity
    /// at inference time.
    pub epsilon_t: f64,
}

pub const DEFAULT_EPSILON_T: f64 = 1e-6;

impl ObjectiveConfig {
    pub fn new(prediction: Prediction, loss: LossSpace) -> Result<Self> {
        let cfg = Self {
            prediction,
            loss,
            epsilon_t: DEFAULT_EPSILON_T,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prediction == Prediction::VPred && self.loss == LossSpace::Bce {
            return Err(Error::Config(
                "BCE needs signal-space logits and cannot be paired with v-prediction".into(),
            ));
        }
        ensure!(
            self.epsilon_t > 0.0 && self.epsilon_t <= 1e-3,
            Config,
            "epsilon_t = {} outside (0, 1e-3]",
            self.epsilon_t
        );
        Ok(())
    }

    /// True when the loss is measured in the space the network predicts.
    pub fn is_aligned(&self) -> bool {
        matches!(
            (self.prediction, self.loss),
            (Prediction::XPred, LossSpace::XMse)
                | (Prediction::XPred, LossSpace::Bce)
                | (Prediction::VPred, LossSpace::VMse)
        )
    }

    pub fn label(&self) -> String {
        let p = match self.prediction {
            Prediction::XPred => "x",
            Prediction::VPred => "v",
        };
        let l = match self.loss {
            LossSpace::XMse => "xmse",
            LossSpace::VMse => "vmse",
            LossSpace::Bce => "bce",
        };
        format!("{p}-{l}")
    }

    /// Builds the training loss for raw network output `out`.
    pub fn loss(&self, tape: &mut Tape, out: Var, x: &Tensor, e: &Tensor, z: &Tensor, t: f64) -> Result<Var> {
        self.validate()?;
        let xv = tape.constant(x.clone());
        match (self.prediction, self.loss) {
            (Prediction::XPred, LossSpace::XMse) => loss_x_mse(tape, out, xv),
            (Prediction::XPred, LossSpace::VMse) => loss_v_mse_mismatched(tape, out, xv, t),
            (Prediction::XPred, LossSpace::Bce) => loss_bce(tape, out, x),
            (Prediction::VPred, LossSpace::VMse) => {
                let target = tape.constant(x.zip_map(e, |a, b| a - b)?);
                loss_v_mse_aligned(tape, out, target)
            }
            (Prediction::VPred, LossSpace::XMse) => {
                let zv = tape.constant(z.clone());
                let step = tape.scale(out, 1.0 - t);
                let x_hat = tape.add(zv, step)?;
                loss_x_mse(tape, x_hat, xv)
            }
            (Prediction::VPred, LossSpace::Bce) => unreachable!("rejected by validate"),
        }
    }

    /// Signal estimate implied by raw network output.
    pub fn to_signal(&self, out: &Tensor, z: &Tensor, t: f64) -> Result<Tensor> {
        match (self.prediction, self.loss) {
            (Prediction::XPred, LossSpace::Bce) => Ok(out.map(|a| (0.5 * a).tanh())),
            (Prediction::XPred, _) => Ok(out.clone()),
            (Prediction::VPred, _) => z.zip_map(out, |zi, vi| zi + (1.0 - t) * vi),
        }
    }

    /// Velocity implied by raw network output.
    pub fn to_velocity(&self, out: &Tensor, z: &Tensor, t: f64) -> Result<Tensor> {
        match self.prediction {
            Prediction::VPred => Ok(out.clone()),
            Prediction::XPred => {
                let x_hat = self.to_signal(out, z, t)?;
                derive_velocity(&x_hat, z, t, self.epsilon_t)
            }
        }
    }
}

/// `(x_pred - z) / (1 - t + epsilon_t)`.
pub fn derive_velocity(x_pred: &Tensor, z: &Tensor, t: f64, epsilon_t: f64) -> Result<Tensor> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1]");
    let denom = 1.0 - t + epsilon_t;
    x_pred.zip_map(z, |a, b| (a - b) / denom)
}

fn batch_size(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0]
    } else {
        1
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    ensure!(sa == sb, Dimension, "loss operands differ in shape: {sa:?} vs {sb:?}");
    Ok(())
}

fn batch_sq_error(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target)?;
    let b = batch_size(tape.value(pred).shape());
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 1.0 / b as f64))
}

/// Batch mean of `‖x_pred - x‖²`.
pub fn loss_x_mse(tape: &mut Tape, x_pred: Var, x: Var) -> Result<Var> {
    batch_sq_error(tape, x_pred, x)
}

/// Batch mean of `‖v_pred - (x - e)‖²`, with the target supplied as `x - e`.
pub fn loss_v_mse_aligned(tape: &mut Tape, v_pred: Var, v_target: Var) -> Result<Var> {
    batch_sq_error(tape, v_pred, v_target)
}

/// Velocity-space loss of an x-prediction: `(1-t)⁻² ‖x_pred - x‖²`, batch mean.
pub fn loss_v_mse_mismatched(tape: &mut Tape, x_pred: Var, x: Var, t: f64) -> Result<Var> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1)");
    if t == 1.0 {
        return Err(Error::Divergence("velocity weight (1-t)^-2 is infinite at t = 1".into()));
    }
    let l = batch_sq_error(tape, x_pred, x)?;
    Ok(tape.scale(l, (1.0 - t).powi(-2)))
}

/// Bernoulli negative log-likelihood of bipolar targets under `logits`,
/// summed over coordinates and averaged over the batch.
///
/// Uses `softplus(a) - y·a` with `y = (1+x)/2`.
pub fn loss_bce(tape: &mut Tape, logits: Var, x: &Tensor) -> Result<Var> {
    let shape = tape.value(logits).shape().to_vec();
    ensure!(
        shape == x.shape(),
        Dimension,
        "logits {shape:?} vs targets {:?}",
        x.shape()
    );
    if let Some(bad) = x.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::Domain(format!("BCE target {bad} not in {{-1, +1}}")));
    }
    let b = batch_size(&shape);
    let y = tape.constant(x.map(|v| 0.5 * (1.0 + v)));
    let sp = tape.softplus(logits)?;
    let ya = tape.mul(y, logits)?;
    let nll = tape.sub(sp, ya)?;
    let s = tape.sum(nll);
    Ok(tape.scale(s, 1.0 / b as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRecord {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    pub grad_sq_norm: f64,
}

/// Per-step gradient second-moment records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradTrace {
    pub records: Vec<GradRecord>,
}

impl GradTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,t,loss,grad_sq_norm")?;
        for r in &self.records {
            writeln!(w, "{},{},{},{}", r.step, r.t, r.loss, r.grad_sq_norm)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Appends a record whose `grad_sq_norm` is the sum of squared entries of
/// every gradient tensor in `grads`.
pub fn record_grad<'a>(
    trace: &mut GradTrace,
    step: usize,
    t: f64,
    loss: f64,
    grads: impl IntoIterator<Item = &'a Tensor>,
) -> f64 {
    let grad_sq_norm: f64 = grads.into_iter().map(Tensor::sq_norm).sum();
    trace.records.push(GradRecord {
        step,
        t,
        loss,
        grad_sq_norm,
    });
    grad_sq_norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeBin {
    pub t_mid: f64,
    pub mean_grad_sq: f64,
    pub count: usize,
}

/// Mean `grad_sq_norm` in equal-width bins of `t` over `[0, 1]`.
pub fn binned_second_moment(trace: &GradTrace, bins: usize) -> Result<Vec<TimeBin>> {
    ensure!(bins >= 2, Contract, "need at least 2 bins, got {bins}");
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for r in &trace.records {
        let k = ((r.t * bins as f64) as usize).min(bins - 1);
        sums[k] += r.grad_sq_norm;
        counts[k] += 1;
    }
    Ok((0..bins)
        .map(|k| TimeBin {
            t_mid: (k as f64 + 0.5) / bins as f64,
            mean_grad_sq: if counts[k] > 0 { sums[k] / counts[k] as f64 } else { 0.0 },
            count: counts[k],
        })
        .collect())
}

/// Largest bin mean divided by the median bin mean, over bins holding at
/// least `min_count` records.
pub fn spike_ratio(bins: &[TimeBin], min_count: usize) -> f64 {
    let means: Vec<f64> = bins
        .iter()
        .filter(|b| b.count >= min_count.max(1))
        .map(|b| b.mean_grad_sq)
        .collect();
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max / median(&means)
}
