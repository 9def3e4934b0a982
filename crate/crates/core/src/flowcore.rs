//! The linear probability path `z_t = t·x + (1-t)·e`, its time samplers, and
//! closed-form Bayes references for binary and Gaussian signals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ndmath::{randn, sigmoid, Rng, Tensor};

/// One training tuple on the linear path.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x: Tensor,
    pub e: Tensor,
    pub t: f64,
    pub z: Tensor,
    pub v_target: Tensor,
}

impl FlowSample {
    pub fn new(x: Tensor, e: Tensor, t: f64) -> Result<Self> {
        let z = interpolate(&x, &e, t)?;
        let v_target = x.zip_map(&e, |a, b| a - b)?;
        Ok(Self {
            x,
            e,
            t,
            z,
            v_target,
        })
    }
}

pub fn interpolate(x: &Tensor, e: &Tensor, t: f64) -> Result<Tensor> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1]");
    x.zip_map(e, |xi, ei| t * xi + (1.0 - t) * ei)
}

/// Instantaneous signal-to-noise ratio `t² / (1-t)²`.
pub fn snr(t: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1)");
    if t == 1.0 {
        return Err(Error::Divergence("SNR diverges at t = 1".into()));
    }
    Ok(t * t / ((1.0 - t) * (1.0 - t)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    LogitNormal,
}

/// Training-time distribution over `t`, with draws capped at `t_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeSampler {
    pub kind: SamplerKind,
    pub m: f64,
    pub s: f64,
    pub t_max: f64,
}

impl TimeSampler {
    pub fn uniform() -> Self {
        Self {
            kind: SamplerKind::Uniform,
            m: 0.0,
            s: 1.0,
            t_max: 1.0,
        }
    }

    pub fn logit_normal(m: f64, s: f64) -> Result<Self> {
        let sampler = Self {
            kind: SamplerKind::LogitNormal,
            m,
            s,
            t_max: 1.0,
        };
        sampler.validate()?;
        Ok(sampler)
    }

    pub fn with_t_max(mut self, t_max: f64) -> Result<Self> {
        self.t_max = t_max;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.t_max > 0.0 && self.t_max <= 1.0,
            Config,
            "t_max = {} outside (0, 1]",
            self.t_max
        );
        if self.kind == SamplerKind::LogitNormal {
            ensure!(
                self.s > 0.0 && self.s.is_finite(),
                Config,
                "logit-normal scale must be positive, got {}",
                self.s
            );
            ensure!(self.m.is_finite(), Config, "logit-normal location must be finite");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        sample_t(self, rng)
    }

    pub fn label(&self) -> String {
        match self.kind {
            SamplerKind::Uniform => "uniform".into(),
            SamplerKind::LogitNormal => format!("logitnormal(m={} s={})", self.m, self.s),
        }
    }
}

pub fn sample_t(sampler: &TimeSampler, rng: &mut Rng) -> f64 {
    match sampler.kind {
        SamplerKind::Uniform => sampler.t_max * rng.uniform(),
        SamplerKind::LogitNormal => {
            let u = sampler.m + sampler.s * rng.normal();
            sigmoid(u).min(sampler.t_max)
        }
    }
}

/// Density of `t = σ(u)`, `u ~ N(m, s²)`.
pub fn logit_normal_pdf(t: f64, m: f64, s: f64) -> Result<f64> {
    ensure!(t > 0.0 && t < 1.0, Domain, "t = {t} outside (0, 1)");
    ensure!(s > 0.0, Domain, "scale must be positive, got {s}");
    let u = (t / (1.0 - t)).ln();
    let g = (-(u - m).powi(2) / (2.0 * s * s)).exp();
    Ok(g / (s * (2.0 * std::f64::consts::PI).sqrt() * t * (1.0 - t)))
}

/// `E[x | z_t = z]` for `x` uniform on `{-1, +1}` and unit Gaussian noise.
pub fn scalar_binary_mmse(z: f64, t: f64) -> Result<f64> {
    ensure!(t > 0.0 && t < 1.0, Domain, "t = {t} outside (0, 1)");
    Ok((t * z / ((1.0 - t) * (1.0 - t))).tanh())
}

/// Bayes-optimal x-prediction residual `Tr(Σ - t²Σ(t²Σ + (1-t)²I)⁻¹Σ)` for
/// `x ~ N(0, Σ)`.
pub fn gaussian_bayes_residual(sigma: &Tensor, t: f64) -> Result<f64> {
    ensure!((0.0..=1.0).contains(&t), Domain, "t = {t} outside [0, 1]");
    let sigma = spd_matrix(sigma)?;
    residual_with_complement(&sigma, t, 1.0 - t)
}

/// Converts and validates a symmetric positive definite matrix.
pub(crate) fn spd_matrix(sigma: &Tensor) -> Result<DMatrix<f64>> {
    let d = match sigma.shape() {
        [a, b] if a == b => *a,
        s => return Err(Error::Domain(format!("covariance must be square, got {s:?}"))),
    };
    let m = DMatrix::from_row_slice(d, d, sigma.data());
    let asym = (&m - m.transpose()).abs().max();
    ensure!(
        asym <= 1e-12 * m.abs().max().max(1.0),
        Domain,
        "covariance is not symmetric (max asymmetry {asym:e})"
    );
    ensure!(
        m.clone().cholesky().is_some(),
        Domain,
        "covariance is not positive definite"
    );
    Ok(m)
}

/// Residual evaluated from `t` and an independently supplied `1 - t`.
///
/// Uses the equivalent form `(1-t)²·Tr(Σ(t²Σ + (1-t)²I)⁻¹)`, which avoids the
/// cancellation in `Σ - t²Σ(…)⁻¹Σ` as `t → 1`.
pub(crate) fn residual_with_complement(sigma: &DMatrix<f64>, t: f64, one_minus_t: f64) -> Result<f64> {
    let d = sigma.nrows();
    let a = one_minus_t * one_minus_t;
    let m = sigma * (t * t) + DMatrix::identity(d, d) * a;
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::Domain("t²Σ + (1-t)²I is not positive definite".into()))?;
    let x = chol.solve(sigma);
    Ok(a * x.trace())
}

/// `t0·x_prior + (1-t0)·e` with a fresh noise draw.
pub fn denoising_init(x_prior: &Tensor, t0: f64, rng: &mut Rng) -> Result<Tensor> {
    ensure!((0.0..1.0).contains(&t0), Domain, "t0 = {t0} outside [0, 1)");
    let e = randn(rng, x_prior.shape().to_vec());
    interpolate(x_prior, &e, t0)
}
