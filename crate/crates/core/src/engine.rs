//! Adam, global-norm clipping, the flow-matching training loop, validation,
//! and metric persistence.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowcore::{FlowSample, TimeSampler};
use crate::ndmath::{randn, Rng, Tape, Tensor};
use crate::nets::{Cond, Mlp, Params};
use crate::objectives::{record_grad, GradTrace, ObjectiveConfig};
use crate::stats::median;

/// Owned per-row conditioning data.
#[derive(Debug, Clone, PartialEq)]
pub enum CondData {
    None,
    Classes(Vec<usize>),
    Vectors(Tensor),
}

impl CondData {
    pub fn as_cond(&self) -> Cond<'_> {
        match self {
            CondData::None => Cond::None,
            CondData::Classes(c) => Cond::Classes(c),
            CondData::Vectors(v) => Cond::Vectors(v),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> CondData {
        match self {
            CondData::None => CondData::None,
            CondData::Classes(c) => CondData::Classes(idx.iter().map(|&i| c[i]).collect()),
            CondData::Vectors(v) => CondData::Vectors(v.select_rows(idx)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub cond: CondData,
}

/// Yields training batches; all randomness comes from the supplied rng.
pub trait DataSource {
    fn dim(&self) -> usize;
    fn batch(&mut self, rng: &mut Rng, size: usize) -> Result<Batch>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRule {
    /// Halt when the squared gradient norm exceeds this value.
    pub max_grad_sq: f64,
    /// Halt when the squared gradient norm exceeds this multiple of the
    /// running median of recent steps.
    pub spike_factor: Option<f64>,
    pub spike_window: usize,
    pub spike_warmup: usize,
}

impl Default for DivergenceRule {
    fn default() -> Self {
        Self {
            max_grad_sq: 1e30,
            spike_factor: Some(1e6),
            spike_window: 256,
            spike_warmup: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub steps: usize,
    pub batch: usize,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub sampler: TimeSampler,
    pub objective: ObjectiveConfig,
    pub divergence: DivergenceRule,
    /// Run validation every this many steps (and after the last one).
    pub val_every: Option<usize>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveConfig, sampler: TimeSampler, seed: u64) -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            steps: 5000,
            batch: 1000,
            grad_clip: None,
            seed,
            sampler,
            objective,
            divergence: DivergenceRule::default(),
            val_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0, Config, "lr must be positive");
        ensure!(
            self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0,
            Config,
            "Adam betas must lie in (0, 1)"
        );
        ensure!(self.eps_adam > 0.0, Config, "eps_adam must be positive");
        ensure!(self.batch > 0, Config, "batch must be positive");
        if let Some(c) = self.grad_clip {
            ensure!(c > 0.0, Config, "grad_clip must be positive");
        }
        ensure!(self.val_every != Some(0), Config, "val_every must be positive");
        self.sampler.validate()?;
        self.objective.validate()
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: usize,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
        }
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One bias-corrected Adam update, clipping first when configured.
/// Returns the pre-clip global gradient norm.
pub fn adam_step(
    params: &mut Params,
    grads: &mut [Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<f64> {
    ensure!(
        grads.len() == params.len() && state.m.len() == params.len(),
        Contract,
        "{} gradients for {} parameters",
        grads.len(),
        params.len()
    );
    for (i, g) in grads.iter().enumerate() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                step: state.step_count,
                param: params.name(i).to_string(),
            });
        }
    }
    let norm = match config.grad_clip {
        Some(c) => clip_global_norm(grads, c),
        None => grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt(),
    };
    state.step_count += 1;
    let k = state.step_count as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(k);
    let c2 = 1.0 - b2.powi(k);
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for j in 0..pd.len() {
            let gj = g.data()[j];
            md[j] = b1 * md[j] + (1.0 - b1) * gj;
            vd[j] = b2 * vd[j] + (1.0 - b2) * gj * gj;
            let mh = md[j] / c1;
            let vh = vd[j] / c2;
            pd[j] -= config.lr * mh / (vh.sqrt() + config.eps_adam);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub pre_clip_grad_norm: f64,
    pub t: f64,
}

pub fn write_loss_history(w: &mut impl Write, history: &[LossRecord]) -> Result<()> {
    writeln!(w, "step,loss,pre_clip_grad_norm,t")?;
    for r in history {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.pre_clip_grad_norm, r.t)?;
    }
    Ok(())
}

pub fn save_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_loss_history(&mut f, history)?;
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEvent {
    pub step: usize,
    pub reason: String,
}

/// Fixed validation triples: the same (x, e, t) at every evaluation.
#[derive(Debug, Clone)]
pub struct ValSet {
    pub x: Tensor,
    pub cond: CondData,
    pub t_grid: Vec<f64>,
    noise: Vec<Tensor>,
}

impl ValSet {
    pub fn new(x: Tensor, cond: CondData, t_grid: Vec<f64>, seed: u64) -> Result<Self> {
        ensure!(!t_grid.is_empty(), Config, "validation t grid is empty");
        ensure!(
            t_grid.iter().all(|t| (0.0..1.0).contains(t)),
            Domain,
            "validation times must lie in [0, 1)"
        );
        let noise = (0..t_grid.len())
            .map(|i| randn(&mut Rng::derived(seed, i as u64), x.shape().to_vec()))
            .collect();
        Ok(Self {
            x,
            cond,
            t_grid,
            noise,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValRow {
    pub t: f64,
    /// Training objective at this `t`.
    pub loss: f64,
    /// `‖x̂ - x‖²` batch mean, comparable across objectives.
    pub x_mse: f64,
}

pub fn validate(model: &Mlp, objective: &ObjectiveConfig, val: &ValSet) -> Result<Vec<ValRow>> {
    let mut rows = Vec::with_capacity(val.t_grid.len());
    let b = val.x.rows() as f64;
    for (&t, e) in val.t_grid.iter().zip(&val.noise) {
        let s = FlowSample::new(val.x.clone(), e.clone(), t)?;
        let mut tape = Tape::new();
        let out = {
            let out = model.predict(&s.z, t, val.cond.as_cond())?;
            tape.constant(out)
        };
        let loss = objective.loss(&mut tape, out, &s.x, &s.e, &s.z, t)?;
        let loss = tape.value(loss).item()?;
        let x_hat = objective.to_signal(tape.value(out), &s.z, t)?;
        let x_mse = x_hat.zip_map(&s.x, |a, b| (a - b).powi(2))?.sum() / b;
        rows.push(ValRow { t, loss, x_mse });
    }
    Ok(rows)
}

pub fn mean_x_mse(rows: &[ValRow]) -> f64 {
    rows.iter().map(|r| r.x_mse).sum::<f64>() / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub step: usize,
    pub rows: Vec<ValRow>,
    pub mean_x_mse: f64,
}

#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub step: usize,
    pub mean_x_mse: f64,
    pub params: Params,
}

/// Where and how often parameters are written during training.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub dir: Option<PathBuf>,
    pub every: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub trace: GradTrace,
    pub history: Vec<LossRecord>,
    pub divergence: Option<DivergenceEvent>,
    pub validations: Vec<ValRecord>,
    pub best: Option<BestCheckpoint>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn completed_steps(&self) -> usize {
        self.history.len()
    }

    /// The best validated parameters, falling back to the final ones.
    pub fn best_model(&self) -> Mlp {
        match &self.best {
            Some(b) => Mlp {
                config: self.model.config.clone(),
                params: b.params.clone(),
            },
            None => self.model.clone(),
        }
    }
}

struct SpikeWindow {
    recent: std::collections::VecDeque<f64>,
}

impl SpikeWindow {
    fn check(&mut self, rule: &DivergenceRule, seen: usize, grad_sq: f64) -> Option<String> {
        let factor = rule.spike_factor?;
        let mut verdict = None;
        if seen >= rule.spike_warmup && !self.recent.is_empty() {
            let med = median(self.recent.make_contiguous());
            if grad_sq > factor * med {
                verdict = Some(format!(
                    "squared gradient norm {grad_sq:e} exceeds {factor:e} x running median {med:e}"
                ));
            }
        }
        self.recent.push_back(grad_sq);
        if self.recent.len() > rule.spike_window {
            self.recent.pop_front();
        }
        verdict
    }
}

/// Trains `model` with the flow-matching objective.
///
/// Each step draws one `t`, a batch, and fresh noise. A divergence halts the
/// run and is returned as data; the step that diverged is recorded in the
/// traces but its update is not applied.
pub fn train(
    config: &TrainConfig,
    mut model: Mlp,
    data: &mut dyn DataSource,
    val: Option<&ValSet>,
    checkpoints: &CheckpointPolicy,
) -> Result<TrainOutcome> {
    config.validate()?;
    ensure!(
        data.dim() == model.config.in_dim,
        Dimension,
        "data dimension {} vs network input {}",
        data.dim(),
        model.config.in_dim
    );
    let mut rng = Rng::new(config.seed);
    let mut adam = AdamState::new(&model.params);
    let mut trace = GradTrace::new();
    let mut history = Vec::with_capacity(config.steps);
    let mut validations = Vec::new();
    let mut best: Option<BestCheckpoint> = None;
    let mut written = Vec::new();
    let mut divergence = None;
    let mut spikes = SpikeWindow {
        recent: Default::default(),
    };

    let mut run_validation = |step: usize, model: &Mlp, best: &mut Option<BestCheckpoint>| -> Result<()> {
        let Some(val) = val else { return Ok(()) };
        let rows = validate(model, &config.objective, val)?;
        let score = mean_x_mse(&rows);
        validations.push(ValRecord {
            step,
            rows,
            mean_x_mse: score,
        });
        if score.is_finite() && best.as_ref().is_none_or(|b| score < b.mean_x_mse) {
            *best = Some(BestCheckpoint {
                step,
                mean_x_mse: score,
                params: model.params.clone(),
            });
        }
        Ok(())
    };

    for step in 0..config.steps {
        let batch = data.batch(&mut rng, config.batch)?;
        let t = config.sampler.sample(&mut rng);
        let e = randn(&mut rng, batch.x.shape().to_vec());
        let s = FlowSample::new(batch.x, e, t)?;

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let zv = tape.constant(s.z.clone());
        let out = model.forward(&mut tape, &bound, zv, t, batch.cond.as_cond())?;
        let loss_var = config.objective.loss(&mut tape, out, &s.x, &s.e, &s.z, t)?;
        let loss = tape.value(loss_var).item()?;
        let mut grads = bound.gradients(&tape.backward(loss_var)?);
        drop(tape);

        let grad_sq = record_grad(&mut trace, step, t, loss, grads.iter());
        history.push(LossRecord {
            step,
            loss,
            pre_clip_grad_norm: grad_sq.sqrt(),
            t,
        });

        let reason = if !loss.is_finite() {
            Some(format!("non-finite loss {loss}"))
        } else if !grad_sq.is_finite() || grad_sq > config.divergence.max_grad_sq {
            Some(format!("squared gradient norm {grad_sq:e}"))
        } else {
            spikes.check(&config.divergence, step, grad_sq)
        };
        if let Some(reason) = reason {
            divergence = Some(DivergenceEvent { step, reason });
            break;
        }

        adam_step(&mut model.params, &mut grads, &mut adam, config)?;
        if let Some(name) = model.params.first_non_finite() {
            divergence = Some(DivergenceEvent {
                step,
                reason: format!("non-finite parameter `{name}` after update"),
            });
            break;
        }

        let done = step + 1;
        if let Some(k) = config.val_every {
            if done % k == 0 || done == config.steps {
                run_validation(done, &model, &mut best)?;
            }
        }
        if let (Some(dir), Some(k)) = (&checkpoints.dir, checkpoints.every) {
            if done % k == 0 {
                let p = dir.join(format!("step{done:06}.bnfm"));
                model.params.save(&p)?;
                written.push(p);
            }
        }
    }

    if let (Some(dir), Some(b)) = (&checkpoints.dir, &best) {
        let p = dir.join("best.bnfm");
        b.params.save(&p)?;
        written.push(p);
    }

    Ok(TrainOutcome {
        model,
        trace,
        history,
        divergence,
        validations,
        best,
        checkpoints: written,
    })
}
