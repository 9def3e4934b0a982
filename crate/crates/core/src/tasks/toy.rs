//! Toy stability study on i.i.d. Gaussian or BPSK vectors.

use serde::{Deserialize, Serialize};

use crate::engine::{train, Batch, CheckpointPolicy, CondData, DataSource, TrainConfig, TrainOutcome};
use crate::error::{ensure, Result};
use crate::flowcore::{denoising_init, scalar_binary_mmse, TimeSampler};
use crate::ndmath::{rand_signs, randn, Rng, Tensor};
use crate::nets::{Mlp, MlpConfig};
use crate::objectives::{binned_second_moment, spike_ratio, LossSpace, ObjectiveConfig, Prediction, TimeBin};
use crate::sampler::{bit_errors, euler_sample, SampleConfig};
use crate::stats::q_function;
use crate::tasks::ObjectiveCell;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    GaussianIid,
    BpskIid,
}

pub struct ToyData {
    pub kind: DataKind,
    pub d: usize,
}

impl DataSource for ToyData {
    fn dim(&self) -> usize {
        self.d
    }

    fn batch(&mut self, rng: &mut Rng, size: usize) -> Result<Batch> {
        let x = match self.kind {
            DataKind::GaussianIid => randn(rng, [size, self.d]),
            DataKind::BpskIid => rand_signs(rng, [size, self.d]),
        };
        Ok(Batch { x, cond: CondData::None })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRecipe {
    pub data_kind: DataKind,
    pub d: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub cells: Vec<ObjectiveCell>,
    pub net: MlpConfig,
    /// Starting times of the denoising BER evaluation.
    pub t0_grid: Vec<f64>,
    pub euler_steps: usize,
    /// Vectors per `t0` in the BER evaluation.
    pub ber_samples: usize,
    pub bins: usize,
    /// Bins with fewer records are left out of the spike ratio.
    pub min_bin_count: usize,
}

impl ToyRecipe {
    /// D = 16, batch 1000, 5000 steps, lr 1e-4, 3 Euler steps.
    pub fn new(data_kind: DataKind, cells: Vec<ObjectiveCell>, seed: u64) -> Self {
        Self {
            data_kind,
            d: 16,
            batch: 1000,
            steps: 5000,
            lr: 1e-4,
            seed,
            cells,
            net: MlpConfig::new(16, 16),
            t0_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            euler_steps: 3,
            ber_samples: 8192,
            bins: 10,
            min_bin_count: 10,
        }
    }

    /// Every valid (prediction, loss) pairing for the data kind, under
    /// uniform and logit-normal(-0.8, 0.8) sampling.
    pub fn full_grid(data_kind: DataKind, seed: u64) -> Result<Self> {
        let mut cells = Vec::new();
        let samplers = [TimeSampler::uniform(), TimeSampler::logit_normal(-0.8, 0.8)?];
        for sampler in samplers {
            for (p, l) in [
                (Prediction::XPred, LossSpace::XMse),
                (Prediction::XPred, LossSpace::VMse),
                (Prediction::VPred, LossSpace::VMse),
                (Prediction::VPred, LossSpace::XMse),
                (Prediction::XPred, LossSpace::Bce),
            ] {
                if l == LossSpace::Bce && data_kind != DataKind::BpskIid {
                    continue;
                }
                cells.push(ObjectiveCell::new(p, l, sampler)?);
            }
        }
        Ok(Self::new(data_kind, cells, seed))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.d > 0 && self.batch > 0, Config, "toy dimensions must be positive");
        ensure!(
            self.net.in_dim == self.d && self.net.out_dim == self.d,
            Config,
            "network dimensions must equal D = {}",
            self.d
        );
        ensure!(self.bins >= 2, Config, "need at least 2 bins");
        for c in &self.cells {
            c.objective.validate()?;
            c.sampler.validate()?;
            ensure!(
                !(c.objective.loss == LossSpace::Bce && self.data_kind != DataKind::BpskIid),
                Config,
                "BCE needs binary data"
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub t0: f64,
    pub model_ber: f64,
    /// Thresholded conditional mean at `t0`, on the same draws.
    pub mmse_ber: f64,
    /// `Q(t0 / (1 - t0))`.
    pub mmse_closed_form: f64,
    pub bits: usize,
}

#[derive(Debug, Clone)]
pub struct ObjectiveCellResult {
    pub cell: ObjectiveCell,
    pub outcome: TrainOutcome,
    pub bins: Vec<TimeBin>,
    pub spike_ratio: f64,
    pub ber: Option<Vec<BerRow>>,
}

/// Denoising BER of `model` from each `t0`, alongside the scalar MMSE reference.
pub fn ber_table(model: &Mlp, objective: &ObjectiveConfig, recipe: &ToyRecipe, seed: u64) -> Result<Vec<BerRow>> {
    let mut rows = Vec::new();
    for (i, &t0) in recipe.t0_grid.iter().enumerate() {
        let mut rng = Rng::derived(seed, 1000 + i as u64);
        let x = rand_signs(&mut rng, [recipe.ber_samples, recipe.d]);
        let z0 = denoising_init(&x, t0, &mut rng)?;
        let reference = z0.data().iter().map(|&z| scalar_binary_mmse(z, t0)).collect::<Result<Vec<_>>>()?;
        let reference = Tensor::new(z0.shape().to_vec(), reference)?;
        let cfg = SampleConfig {
            t0,
            hard_threshold: true,
            ..SampleConfig::new(recipe.euler_steps)
        };
        let x_hat = euler_sample(model, objective, &cfg, z0)?;
        let bits = x.len();
        rows.push(BerRow {
            t0,
            model_ber: bit_errors(&x_hat, &x)? as f64 / bits as f64,
            mmse_ber: bit_errors(&reference, &x)? as f64 / bits as f64,
            mmse_closed_form: q_function(t0 / (1.0 - t0)),
            bits,
        });
    }
    Ok(rows)
}

pub fn run_toy_cell(recipe: &ToyRecipe, cell: &ObjectiveCell) -> Result<ObjectiveCellResult> {
    recipe.validate()?;
    let mut cfg = TrainConfig::new(cell.objective, cell.sampler, recipe.seed);
    cfg.lr = recipe.lr;
    cfg.steps = recipe.steps;
    cfg.batch = recipe.batch;
    let model = Mlp::init(recipe.net.clone(), &mut Rng::derived(recipe.seed, 1))?;
    let mut data = ToyData {
        kind: recipe.data_kind,
        d: recipe.d,
    };
    let outcome = train(&cfg, model, &mut data, None, &CheckpointPolicy::default())?;
    let bins = binned_second_moment(&outcome.trace, recipe.bins)?;
    let ratio = spike_ratio(&bins, recipe.min_bin_count);
    let ber = if recipe.data_kind == DataKind::BpskIid && outcome.divergence.is_none() {
        Some(ber_table(&outcome.model, &cell.objective, recipe, recipe.seed)?)
    } else {
        None
    };
    Ok(ObjectiveCellResult {
        cell: *cell,
        outcome,
        bins,
        spike_ratio: ratio,
        ber,
    })
}

pub fn run_toy(recipe: &ToyRecipe) -> Result<Vec<ObjectiveCellResult>> {
    recipe.validate()?;
    recipe.cells.iter().map(|c| run_toy_cell(recipe, c)).collect()
}
