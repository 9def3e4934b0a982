//! Forward-Euler integration of a learned flow, bit error rates, and PGM export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowcore::denoising_init;
use crate::ndmath::{randn, Rng, Tensor};
use crate::nets::{Cond, Mlp};
use crate::objectives::{ObjectiveConfig, DEFAULT_EPSILON_T};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub t0: f64,
    pub epsilon_t: f64,
    pub hard_threshold: bool,
}

impl SampleConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            t0: 0.0,
            epsilon_t: DEFAULT_EPSILON_T,
            hard_threshold: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps > 0, Config, "sampling needs at least one step");
        ensure!((0.0..1.0).contains(&self.t0), Config, "t0 = {} outside [0, 1)", self.t0);
        ensure!(
            self.epsilon_t > 0.0 && self.epsilon_t <= 1e-3,
            Config,
            "epsilon_t = {} outside (0, 1e-3]",
            self.epsilon_t
        );
        Ok(())
    }

    /// Left endpoints of the uniform grid from `t0` towards 1.
    pub fn grid(&self) -> Vec<f64> {
        let dt = (1.0 - self.t0) / self.steps as f64;
        (0..self.steps).map(|k| self.t0 + k as f64 * dt).collect()
    }
}

/// Anything that maps a state `z` at time `t` to raw network output.
pub trait FlowModel {
    fn predict(&self, z: &Tensor, t: f64) -> Result<Tensor>;
}

/// A network paired with fixed per-row conditioning.
pub struct Conditioned<'a> {
    pub model: &'a Mlp,
    pub cond: Cond<'a>,
}

impl FlowModel for Conditioned<'_> {
    fn predict(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        self.model.predict(z, t, self.cond)
    }
}

impl FlowModel for Mlp {
    fn predict(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        Mlp::predict(self, z, t, Cond::None)
    }
}

/// Integrates `z ← z + v·Δt` from `config.t0` to 1 starting at `z0`.
pub fn euler_sample(
    model: &dyn FlowModel,
    objective: &ObjectiveConfig,
    config: &SampleConfig,
    z0: Tensor,
) -> Result<Tensor> {
    config.validate()?;
    let obj = ObjectiveConfig {
        epsilon_t: config.epsilon_t,
        ..*objective
    };
    obj.validate()?;
    let dt = (1.0 - config.t0) / config.steps as f64;
    let mut z = z0;
    for (k, t) in config.grid().into_iter().enumerate() {
        let out = model.predict(&z, t)?;
        let v = obj.to_velocity(&out, &z, t)?;
        z = z.zip_map(&v, |a, b| a + b * dt)?;
        if !z.all_finite() {
            return Err(Error::IntegrationDivergence { step: k });
        }
    }
    if config.hard_threshold {
        z = z.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
    }
    Ok(z)
}

/// Generative mode: start from standard normal noise at `t0`.
pub fn generate(
    model: &dyn FlowModel,
    objective: &ObjectiveConfig,
    config: &SampleConfig,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor> {
    let z0 = randn(rng, shape.to_vec());
    euler_sample(model, objective, config, z0)
}

/// Denoising mode: start from `t0·x_prior + (1-t0)·e`.
pub fn denoise(
    model: &dyn FlowModel,
    objective: &ObjectiveConfig,
    config: &SampleConfig,
    x_prior: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let z0 = denoising_init(x_prior, config.t0, rng)?;
    euler_sample(model, objective, config, z0)
}

/// Fraction of coordinates where `sign(x_hat)` differs from `x_true`; a zero
/// estimate counts as an error.
pub fn ber(x_hat: &Tensor, x_true: &Tensor) -> Result<f64> {
    ensure!(
        x_hat.shape() == x_true.shape(),
        Dimension,
        "{:?} vs {:?}",
        x_hat.shape(),
        x_true.shape()
    );
    Ok(bit_errors(x_hat, x_true)? as f64 / x_true.len() as f64)
}

pub fn bit_errors(x_hat: &Tensor, x_true: &Tensor) -> Result<usize> {
    let mut errors = 0;
    for (&a, &b) in x_hat.data().iter().zip(x_true.data()) {
        ensure!(b == 1.0 || b == -1.0, Domain, "true bit {b} not in {{-1, +1}}");
        if !(a * b > 0.0) {
            errors += 1;
        }
    }
    Ok(errors)
}

/// Writes `images` (`[n × h·w]` or `[n × h × w]`, values in `[-1, 1]`) as a
/// single binary PGM grid with `cols` tiles per row.
pub fn write_pgm_grid(w: &mut impl Write, images: &Tensor, h: usize, width: usize, cols: usize) -> Result<()> {
    let n = images.rows();
    ensure!(
        images.cols() == h * width && cols > 0,
        Dimension,
        "images {:?} are not {h}x{width}",
        images.shape()
    );
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h, cols * width);
    let mut pixels = vec![0u8; gh * gw];
    for i in 0..n {
        let (r0, c0) = ((i / cols) * h, (i % cols) * width);
        let img = images.row(i);
        for y in 0..h {
            for x in 0..width {
                let v = img[y * width + x].clamp(-1.0, 1.0);
                pixels[(r0 + y) * gw + c0 + x] = ((v + 1.0) * 127.5).round() as u8;
            }
        }
    }
    write!(w, "P5\n{gw} {gh}\n255\n")?;
    w.write_all(&pixels)?;
    Ok(())
}

pub fn save_pgm_grid(path: &Path, images: &Tensor, h: usize, width: usize, cols: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm_grid(&mut f, images, h, width, cols)?;
    f.flush()?;
    Ok(())
}
