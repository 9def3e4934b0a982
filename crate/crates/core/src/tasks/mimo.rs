//! Real-valued MIMO detection: channel simulation, classical detectors, and
//! learned detectors conditioned on the observation.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{train, Batch, CheckpointPolicy, CondData, DataSource, TrainConfig, TrainOutcome, ValSet};
use crate::error::{ensure, Result};
use crate::flowcore::TimeSampler;
use crate::ndmath::{Rng, Tensor};
use crate::nets::{Cond, Mlp, MlpConfig};
use crate::objectives::{LossSpace, Prediction};
use crate::sampler::{bit_errors, generate, Conditioned, SampleConfig};
use crate::stats::binomial_sigma;
use crate::tasks::ObjectiveCell;

pub const ZF_RIDGE: f64 = 1e-12;

/// One use of `y = Hx + n` in the real decomposition, with `2N` real dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoInstance {
    pub h: DMatrix<f64>,
    pub x: DVector<f64>,
    pub noise_var: f64,
    pub y: DVector<f64>,
}

impl MimoInstance {
    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Row-major `H`, then `y`, then `σ²`.
    pub fn condition(&self) -> Vec<f64> {
        let d = self.dim();
        let mut c = Vec::with_capacity(d * d + d + 1);
        for i in 0..d {
            c.extend(self.h.row(i).iter());
        }
        c.extend(self.y.iter());
        c.push(self.noise_var);
        c
    }
}

pub fn condition_dim(n: usize) -> usize {
    let d = 2 * n;
    d * d + d + 1
}

/// `σ² = 10^(-snr_db/10)`; with `H` entries of variance `1/(2N)` this is the
/// inverse per-dimension SNR.
pub fn noise_var(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

pub fn gen_instance(rng: &mut Rng, n: usize, noise_var: f64) -> MimoInstance {
    let d = 2 * n;
    let sd = (1.0 / d as f64).sqrt();
    let h = DMatrix::from_fn(d, d, |_, _| sd * rng.normal());
    let x = DVector::from_fn(d, |_, _| rng.sign());
    let noise = DVector::from_fn(d, |_, _| noise_var.sqrt() * rng.normal());
    let y = &h * &x + noise;
    MimoInstance { h, x, noise_var, y }
}

pub fn gen_mimo(rng: &mut Rng, n: usize, snr_db: f64, count: usize) -> Result<Vec<MimoInstance>> {
    ensure!(n >= 1, Config, "N must be at least 1");
    ensure!(count >= 1, Config, "count must be at least 1");
    let s2 = noise_var(snr_db);
    Ok((0..count).map(|_| gen_instance(rng, n, s2)).collect())
}

fn signs(v: &DVector<f64>) -> DVector<f64> {
    v.map(|a| if a >= 0.0 { 1.0 } else { -1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZfDecision {
    pub bits: DVector<f64>,
    /// `H` was singular and the ridge-regularized inverse was used.
    pub ridge_fallback: bool,
}

fn ridge_solve(inst: &MimoInstance, lambda: f64) -> Option<DVector<f64>> {
    let d = inst.dim();
    let gram = inst.h.transpose() * &inst.h + DMatrix::identity(d, d) * lambda;
    let rhs = inst.h.transpose() * &inst.y;
    gram.cholesky().map(|c| c.solve(&rhs))
}

pub fn detect_zf(inst: &MimoInstance) -> ZfDecision {
    let direct = inst.h.clone().lu().solve(&inst.y).filter(|s| s.iter().all(|v| v.is_finite()));
    match direct {
        Some(s) => ZfDecision {
            bits: signs(&s),
            ridge_fallback: false,
        },
        None => {
            let s = ridge_solve(inst, ZF_RIDGE).unwrap_or_else(|| DVector::zeros(inst.dim()));
            ZfDecision {
                bits: signs(&s),
                ridge_fallback: true,
            }
        }
    }
}

pub fn detect_lmmse(inst: &MimoInstance) -> DVector<f64> {
    let s = ridge_solve(inst, inst.noise_var).expect("HᵀH + σ²I is positive definite");
    signs(&s)
}

/// Exhaustive search over `{-1, +1}^{2N}`, visiting candidates in Gray-code
/// order so each step flips one symbol.
pub fn detect_map(inst: &MimoInstance) -> Result<DVector<f64>> {
    let d = inst.dim();
    ensure!(d <= 16, Config, "exhaustive MAP needs 2N <= 16, got {d}");
    let mut x = DVector::from_element(d, -1.0);
    let mut r = &inst.y - &inst.h * &x;
    let mut best = (r.norm_squared(), x.clone());
    for k in 1u32..(1 << d) {
        let j = k.trailing_zeros() as usize;
        let delta = -2.0 * x[j];
        x[j] = -x[j];
        r.axpy(-delta, &inst.h.column(j), 1.0);
        let cost = r.norm_squared();
        if cost < best.0 {
            best = (cost, x.clone());
        }
    }
    Ok(best.1)
}

/// Training instances with SNR drawn uniformly from a dB range.
pub struct MimoData {
    pub n: usize,
    pub snr_db: (f64, f64),
}

pub fn instances_to_batch(insts: &[MimoInstance]) -> Result<Batch> {
    let d = insts[0].dim();
    let mut x = Vec::with_capacity(insts.len() * d);
    let mut c = Vec::with_capacity(insts.len() * (d * d + d + 1));
    for inst in insts {
        x.extend(inst.x.iter());
        c.extend(inst.condition());
    }
    let cols = c.len() / insts.len();
    Ok(Batch {
        x: Tensor::new([insts.len(), d], x)?,
        cond: CondData::Vectors(Tensor::new([insts.len(), cols], c)?),
    })
}

impl MimoData {
    fn draw(&self, rng: &mut Rng, count: usize) -> Vec<MimoInstance> {
        let (lo, hi) = self.snr_db;
        (0..count)
            .map(|_| {
                let snr = lo + (hi - lo) * rng.uniform();
                gen_instance(rng, self.n, noise_var(snr))
            })
            .collect()
    }
}

impl DataSource for MimoData {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn batch(&mut self, rng: &mut Rng, size: usize) -> Result<Batch> {
        instances_to_batch(&self.draw(rng, size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimoRecipe {
    pub n: usize,
    pub snr_sweep: Vec<f64>,
    /// SNR range in dB that training instances are drawn from.
    pub train_snr: (f64, f64),
    pub cells: Vec<ObjectiveCell>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub net: MlpConfig,
    pub euler_steps: usize,
    /// Minimum bits per detector and SNR point.
    pub eval_bits: usize,
    pub map: bool,
    pub val_count: usize,
    pub val_every: usize,
    pub val_t_grid: Vec<f64>,
}

impl MimoRecipe {
    /// lr 1e-3, clipping at 0.99, `t` capped at 0.99, 2 Euler steps, sweep
    /// 0–12 dB in 2 dB steps.
    pub fn new(n: usize, cells: Vec<ObjectiveCell>, seed: u64) -> Self {
        let d = 2 * n;
        Self {
            n,
            snr_sweep: (0..=6).map(|i| 2.0 * i as f64).collect(),
            train_snr: (0.0, 12.0),
            cells,
            steps: 3000,
            batch: 500,
            lr: 1e-3,
            grad_clip: Some(0.99),
            seed,
            net: MlpConfig {
                cond_vec_dim: Some(condition_dim(n)),
                ..MlpConfig::new(d, d)
            },
            euler_steps: 2,
            eval_bits: 100_000,
            map: d <= 16,
            val_count: 2000,
            val_every: 100,
            val_t_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
        }
    }

    /// Aligned BCE, aligned x-MSE, aligned v-MSE, and the mismatched pairing,
    /// all under uniform `t` capped at 0.99.
    pub fn standard(n: usize, seed: u64) -> Result<Self> {
        let u = TimeSampler::uniform().with_t_max(0.99)?;
        let cells = vec![
            ObjectiveCell::new(Prediction::XPred, LossSpace::Bce, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::XMse, u)?,
            ObjectiveCell::new(Prediction::VPred, LossSpace::VMse, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::VMse, u)?,
        ];
        Ok(Self::new(n, cells, seed))
    }

    pub fn validate(&self) -> Result<()> {
        let d = 2 * self.n;
        ensure!(self.n >= 1, Config, "N must be at least 1");
        ensure!(
            self.net.in_dim == d && self.net.out_dim == d && self.net.cond_vec_dim == Some(condition_dim(self.n)),
            Config,
            "network must map {d} inputs to {d} outputs with a {}-dimensional condition",
            condition_dim(self.n)
        );
        ensure!(!self.snr_sweep.is_empty(), Config, "empty SNR sweep");
        ensure!(self.train_snr.0 <= self.train_snr.1, Config, "train_snr range is reversed");
        ensure!(!self.map || d <= 16, Config, "MAP needs 2N <= 16, got {d}");
        ensure!(self.eval_bits > 0 && self.val_count > 0 && self.val_every > 0, Config, "counts must be positive");
        for c in &self.cells {
            c.objective.validate()?;
            c.sampler.validate()?;
        }
        Ok(())
    }

    /// Instances per SNR point needed for `eval_bits`.
    pub fn eval_instances(&self) -> usize {
        self.eval_bits.div_ceil(2 * self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub detector: String,
    pub ber: f64,
    pub bit_count: usize,
}

impl BerPoint {
    pub fn sigma(&self) -> f64 {
        binomial_sigma(self.ber, self.bit_count)
    }
}

pub fn write_ber_csv(w: &mut impl Write, rows: &[BerPoint]) -> Result<()> {
    writeln!(w, "snr_db,detector,ber,bit_count")?;
    for r in rows {
        writeln!(w, "{},{},{:e},{}", r.snr_db, r.detector, r.ber, r.bit_count)?;
    }
    Ok(())
}

pub fn save_ber_csv(path: &Path, rows: &[BerPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ber_csv(&mut f, rows)?;
    f.flush()?;
    Ok(())
}

fn count_errors(decided: &DVector<f64>, truth: &DVector<f64>) -> usize {
    decided.iter().zip(truth.iter()).filter(|(a, b)| a != b).count()
}

/// BER of each classical detector on the same instances.
pub fn classical_ber(insts: &[MimoInstance], snr_db: f64, with_map: bool) -> Result<(Vec<BerPoint>, usize)> {
    let bits = insts.len() * insts[0].dim();
    let (mut zf, mut lmmse, mut map, mut ridge) = (0, 0, 0, 0);
    for inst in insts {
        let z = detect_zf(inst);
        ridge += z.ridge_fallback as usize;
        zf += count_errors(&z.bits, &inst.x);
        lmmse += count_errors(&detect_lmmse(inst), &inst.x);
        if with_map {
            map += count_errors(&detect_map(inst)?, &inst.x);
        }
    }
    let point = |name: &str, errors: usize| BerPoint {
        snr_db,
        detector: name.into(),
        ber: errors as f64 / bits as f64,
        bit_count: bits,
    };
    let mut rows = vec![point("zf", zf), point("lmmse", lmmse)];
    if with_map {
        rows.push(point("map", map));
    }
    Ok((rows, ridge))
}

/// Hard-decision BER of a learned detector integrated from noise with
/// `steps` Euler steps; `None` when the integration diverges.
pub fn learned_ber(model: &Mlp, cell: &ObjectiveCell, insts: &[MimoInstance], steps: usize, seed: u64) -> Result<Option<f64>> {
    let batch = instances_to_batch(insts)?;
    let CondData::Vectors(cond) = &batch.cond else { unreachable!() };
    let cfg = SampleConfig {
        hard_threshold: true,
        ..SampleConfig::new(steps)
    };
    let flow = Conditioned {
        model,
        cond: Cond::Vectors(cond),
    };
    let mut rng = Rng::new(seed);
    match generate(&flow, &cell.objective, &cfg, batch.x.shape(), &mut rng) {
        Ok(x_hat) => Ok(Some(bit_errors(&x_hat, &batch.x)? as f64 / batch.x.len() as f64)),
        Err(crate::Error::IntegrationDivergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone)]
pub struct MimoCellResult {
    pub cell: ObjectiveCell,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct MimoReport {
    pub rows: Vec<BerPoint>,
    pub cells: Vec<MimoCellResult>,
    /// Instances where ZF fell back to the ridge inverse.
    pub zf_ridge_fallbacks: usize,
    /// (cell label, SNR) pairs whose sampling diverged and were left out of `rows`.
    pub sampling_divergences: Vec<(String, f64)>,
}

impl MimoReport {
    pub fn get(&self, detector: &str, snr_db: f64) -> Option<&BerPoint> {
        self.rows.iter().find(|r| r.detector == detector && r.snr_db == snr_db)
    }
}

pub fn train_mimo_cell(recipe: &MimoRecipe, cell: &ObjectiveCell) -> Result<MimoCellResult> {
    recipe.validate()?;
    let mut data = MimoData {
        n: recipe.n,
        snr_db: recipe.train_snr,
    };
    let val_batch = instances_to_batch(&data.draw(&mut Rng::derived(recipe.seed, 3), recipe.val_count))?;
    let val = ValSet::new(
        val_batch.x,
        val_batch.cond,
        recipe.val_t_grid.clone(),
        Rng::derived(recipe.seed, 4).next_u64(),
    )?;
    let mut cfg = TrainConfig::new(cell.objective, cell.sampler, recipe.seed);
    cfg.lr = recipe.lr;
    cfg.steps = recipe.steps;
    cfg.batch = recipe.batch;
    cfg.grad_clip = recipe.grad_clip;
    cfg.val_every = Some(recipe.val_every);
    let model = Mlp::init(recipe.net.clone(), &mut Rng::derived(recipe.seed, 1))?;
    let outcome = train(&cfg, model, &mut data, Some(&val), &CheckpointPolicy::default())?;
    Ok(MimoCellResult { cell: *cell, outcome })
}

/// Trains every cell, then sweeps SNR evaluating the classical detectors and
/// each cell's best checkpoint on shared instances.
pub fn run_mimo(recipe: &MimoRecipe) -> Result<MimoReport> {
    recipe.validate()?;
    let cells = recipe
        .cells
        .iter()
        .map(|c| train_mimo_cell(recipe, c))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<Mlp> = cells.iter().map(|c| c.outcome.best_model()).collect();
    let mut rows = Vec::new();
    let mut ridge = 0;
    let mut sampling_divergences = Vec::new();
    for (k, &snr) in recipe.snr_sweep.iter().enumerate() {
        let insts = gen_mimo(&mut Rng::derived(recipe.seed, 500 + k as u64), recipe.n, snr, recipe.eval_instances())?;
        let (classical, r) = classical_ber(&insts, snr, recipe.map)?;
        rows.extend(classical);
        ridge += r;
        for (c, model) in cells.iter().zip(&models) {
            let seed = Rng::derived(recipe.seed, 900 + k as u64).next_u64();
            match learned_ber(model, &c.cell, &insts, recipe.euler_steps, seed)? {
                Some(ber) => rows.push(BerPoint {
                    snr_db: snr,
                    detector: c.cell.label(),
                    ber,
                    bit_count: insts.len() * 2 * recipe.n,
                }),
                None => sampling_divergences.push((c.cell.label(), snr)),
            }
        }
    }
    Ok(MimoReport {
        rows,
        cells,
        zf_ridge_fallbacks: ridge,
        sampling_divergences,
    })
}
