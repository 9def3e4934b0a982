//! Class-conditional generation of binarized, downscaled MNIST digits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{train, Batch, CheckpointPolicy, CondData, DataSource, LossRecord, TrainConfig, TrainOutcome, ValSet};
use crate::error::{ensure, Error, Result};
use crate::flowcore::TimeSampler;
use crate::ndmath::{Rng, Tensor};
use crate::nets::checkpoint::{load_tensors, save_tensors};
use crate::nets::{Cond, Mlp, MlpConfig};
use crate::objectives::{LossSpace, Prediction};
use crate::sampler::{generate, Conditioned, SampleConfig};
use crate::stats::{is_nonincreasing, stratified_block_means};
use crate::tasks::ObjectiveCell;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// Grayscale images and labels as stored in a pair of IDX files.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, `count · rows · cols` bytes.
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl GrayImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` images.
    pub fn take(&self, n: usize) -> GrayImages {
        let n = n.min(self.count);
        GrayImages {
            count: n,
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * self.rows * self.cols].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

fn be_u32(buf: &[u8], offset: usize) -> Result<u32> {
    let bytes = buf.get(offset..offset + 4).ok_or_else(|| Error::Format {
        offset: buf.len(),
        msg: format!("truncated header: need 4 bytes at offset {offset}"),
    })?;
    Ok(u32::from_be_bytes(bytes.try_into().expect("4 bytes")))
}

fn check_magic(buf: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(buf, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload(buf: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    if buf.len() < start + len {
        return Err(Error::Format {
            offset: buf.len(),
            msg: format!("truncated payload: expected {} bytes, found {}", start + len, buf.len()),
        });
    }
    if buf.len() > start + len {
        return Err(Error::Format {
            offset: start + len,
            msg: format!("{} trailing bytes", buf.len() - start - len),
        });
    }
    Ok(&buf[start..])
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(buf: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(buf, IMAGES_MAGIC)?;
    let count = be_u32(buf, 4)? as usize;
    let rows = be_u32(buf, 8)? as usize;
    let cols = be_u32(buf, 12)? as usize;
    let pixels = payload(buf, 16, count * rows * cols)?;
    Ok((count, rows, cols, pixels.to_vec()))
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    check_magic(buf, LABELS_MAGIC)?;
    let count = be_u32(buf, 4)? as usize;
    let labels = payload(buf, 8, count)?;
    if let Some(i) = labels.iter().position(|&l| l as usize >= CLASSES) {
        return Err(Error::Format {
            offset: 8 + i,
            msg: format!("label {} outside 0..{CLASSES}", labels[i]),
        });
    }
    Ok(labels.to_vec())
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput { path: path.to_path_buf() }),
        Err(e) => Err(e.into()),
    }
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<GrayImages> {
    let (count, rows, cols, pixels) = parse_idx_images(&read_input(images_path)?)?;
    let labels = parse_idx_labels(&read_input(labels_path)?)?;
    if labels.len() != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {} does not match image count {count}", labels.len()),
        });
    }
    Ok(GrayImages {
        count,
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Images with entries exactly ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryImageSet {
    /// `[count × height × width]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub source_dims: [usize; 2],
}

impl BinaryImageSet {
    pub fn new(images: Tensor, labels: Vec<usize>, source_dims: [usize; 2]) -> Result<Self> {
        ensure!(images.shape().len() == 3, Dimension, "images must be [count, h, w], got {:?}", images.shape());
        ensure!(
            images.rows() == labels.len(),
            Dimension,
            "{} images but {} labels",
            images.rows(),
            labels.len()
        );
        ensure!(
            images.data().iter().all(|&v| v == 1.0 || v == -1.0),
            Domain,
            "binary images must contain only -1 and +1"
        );
        ensure!(labels.iter().all(|&l| l < CLASSES), Domain, "labels must lie in 0..{CLASSES}");
        Ok(Self {
            images,
            labels,
            source_dims,
        })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    /// `[count × height·width]`.
    pub fn flat(&self) -> Tensor {
        Tensor::new([self.count(), self.pixels()], self.images.data().to_vec()).expect("same length")
    }

    /// The images at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let images = self.flat().select_rows(idx).reshape([idx.len(), self.height(), self.width()])?;
        Self::new(images, idx.iter().map(|&i| self.labels[i]).collect(), self.source_dims)
    }

    /// A seeded random subset of `n` images, kept in file order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        ensure!(n <= self.count(), Config, "subset of {n} from {} images", self.count());
        self.select(&Rng::derived(seed, 6).choose_sorted(self.count(), n))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = Tensor::new([self.count()], self.labels.iter().map(|&l| l as f64).collect())?;
        let dims = Tensor::new([2], self.source_dims.iter().map(|&d| d as f64).collect())?;
        save_tensors(path, [("images", &self.images), ("labels", &labels), ("source_dims", &dims)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut entries = load_tensors(path)?;
        let mut take = |name: &str| {
            let i = entries.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("cache has no `{name}` tensor"),
            })?;
            Ok::<_, Error>(entries.swap_remove(i).1)
        };
        let images = take("images")?;
        let labels = take("labels")?.data().iter().map(|&l| l as usize).collect();
        let dims = take("source_dims")?;
        ensure!(dims.len() == 2, Dimension, "source_dims must hold two extents");
        Self::new(images, labels, [dims.data()[0] as usize, dims.data()[1] as usize])
    }
}

/// Mean-pools by `factor` and maps each pixel to `sign(p/255 - threshold)`,
/// with ties going to +1.
pub fn binarize_and_downscale(gray: &GrayImages, threshold: f64, factor: usize) -> Result<BinaryImageSet> {
    ensure!(threshold > 0.0 && threshold < 1.0, Config, "threshold {threshold} outside (0, 1)");
    ensure!(factor == 1 || factor == 2, Config, "downscale factor must be 1 or 2, got {factor}");
    ensure!(
        gray.rows.is_multiple_of(factor) && gray.cols.is_multiple_of(factor),
        Dimension,
        "{}x{} images are not divisible by {factor}",
        gray.rows,
        gray.cols
    );
    let (h, w) = (gray.rows / factor, gray.cols / factor);
    let area = (factor * factor) as f64;
    let mut out = Vec::with_capacity(gray.count * h * w);
    for i in 0..gray.count {
        let img = gray.image(i);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += img[(y * factor + dy) * gray.cols + x * factor + dx] as f64;
                    }
                }
                let p = acc / area / 255.0;
                out.push(if p - threshold >= 0.0 { 1.0 } else { -1.0 });
            }
        }
    }
    BinaryImageSet::new(
        Tensor::new([gray.count, h, w], out)?,
        gray.labels.iter().map(|&l| l as usize).collect(),
        [gray.rows, gray.cols],
    )
}

/// Fraction of rows with a nonnegative value, per column.
pub fn pixel_marginals(images: &Tensor) -> Vec<f64> {
    let (n, d) = (images.rows(), images.cols());
    let mut p = vec![0.0; d];
    for i in 0..n {
        for (acc, &v) in p.iter_mut().zip(images.row(i)) {
            if v >= 0.0 {
                *acc += 1.0;
            }
        }
    }
    p.iter_mut().for_each(|v| *v /= n as f64);
    p
}

/// Mean absolute difference between per-pixel `P(+1)` of `samples` and `reference`.
pub fn marginal_l1(samples: &Tensor, reference: &[f64]) -> Result<f64> {
    ensure!(
        samples.cols() == reference.len(),
        Dimension,
        "{} pixels vs {} reference marginals",
        samples.cols(),
        reference.len()
    );
    let p = pixel_marginals(samples);
    Ok(p.iter().zip(reference).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

fn pack_signs(row: &[f64]) -> Vec<u64> {
    let mut words = vec![0u64; row.len().div_ceil(64)];
    for (j, &v) in row.iter().enumerate() {
        if v >= 0.0 {
            words[j / 64] |= 1 << (j % 64);
        }
    }
    words
}

/// Mean over samples of the Hamming distance from the thresholded sample to
/// its nearest training image.
pub fn nn_hamming(samples: &Tensor, train: &Tensor) -> Result<f64> {
    ensure!(
        samples.cols() == train.cols() && train.rows() > 0,
        Dimension,
        "samples {:?} vs training images {:?}",
        samples.shape(),
        train.shape()
    );
    let train: Vec<Vec<u64>> = (0..train.rows()).map(|i| pack_signs(train.row(i))).collect();
    let mut total = 0.0;
    for i in 0..samples.rows() {
        let s = pack_signs(samples.row(i));
        let best = train
            .iter()
            .map(|t| t.iter().zip(&s).map(|(a, b)| (a ^ b).count_ones()).sum::<u32>())
            .min()
            .expect("nonempty training set");
        total += best as f64;
    }
    Ok(total / samples.rows() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// Mean `|x̂|` after the final Euler step.
    pub binariness: f64,
    pub marginal_l1: f64,
    pub nn_hamming: f64,
}

pub fn quality_metrics(samples: &Tensor, train: &Tensor) -> Result<QualityMetrics> {
    Ok(QualityMetrics {
        binariness: samples.data().iter().map(|v| v.abs()).sum::<f64>() / samples.len() as f64,
        marginal_l1: marginal_l1(samples, &pixel_marginals(train))?,
        nn_hamming: nn_hamming(samples, train)?,
    })
}

/// Uniformly resampled rows of a flat image set.
pub struct ImageData<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

impl DataSource for ImageData<'_> {
    fn dim(&self) -> usize {
        self.images.cols()
    }

    fn batch(&mut self, rng: &mut Rng, size: usize) -> Result<Batch> {
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.labels.len())).collect();
        Ok(Batch {
            x: self.images.select_rows(&idx),
            cond: CondData::Classes(idx.iter().map(|&i| self.labels[i]).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmnistRecipe {
    pub cells: Vec<ObjectiveCell>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub net: MlpConfig,
    /// Images held out from the end of the set for validation.
    pub val_count: usize,
    pub val_every: usize,
    pub val_t_grid: Vec<f64>,
    pub sample_steps: usize,
    pub samples_per_class: usize,
    /// Fraction of the loss history, counted from the end, checked for monotone decrease.
    pub tail_fraction: f64,
    /// Number of block means the tail is smoothed into.
    pub smooth_blocks: usize,
    /// Equal-width `t` strata averaged with equal weight inside each block.
    pub smooth_t_strata: usize,
}

impl BmnistRecipe {
    pub fn new(pixels: usize, cells: Vec<ObjectiveCell>, seed: u64) -> Self {
        Self {
            cells,
            steps: 4000,
            batch: 128,
            lr: 1e-4,
            grad_clip: None,
            seed,
            net: MlpConfig {
                hidden: 512,
                cond_classes: Some(CLASSES),
                ..MlpConfig::new(pixels, pixels)
            },
            val_count: 500,
            val_every: 200,
            val_t_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sample_steps: 50,
            samples_per_class: 20,
            tail_fraction: 0.8,
            smooth_blocks: 8,
            smooth_t_strata: 10,
        }
    }

    /// Aligned x-MSE, aligned v-MSE, BCE, and the mismatched pairing under
    /// uniform and logit-normal(-0.8, 0.8) sampling.
    pub fn standard(pixels: usize, seed: u64) -> Result<Self> {
        let ln = TimeSampler::logit_normal(-0.8, 0.8)?;
        let u = TimeSampler::uniform();
        let cells = vec![
            ObjectiveCell::new(Prediction::XPred, LossSpace::XMse, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::XMse, ln)?,
            ObjectiveCell::new(Prediction::VPred, LossSpace::VMse, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::Bce, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::VMse, u)?,
            ObjectiveCell::new(Prediction::XPred, LossSpace::VMse, ln)?,
        ];
        Ok(Self::new(pixels, cells, seed))
    }

    pub fn validate(&self, set: &BinaryImageSet) -> Result<()> {
        ensure!(
            self.net.in_dim == set.pixels() && self.net.out_dim == set.pixels(),
            Config,
            "network dimensions must equal the {} image pixels",
            set.pixels()
        );
        ensure!(self.net.cond_classes == Some(CLASSES), Config, "the network must be class-conditioned");
        ensure!(
            self.val_count > 0 && self.val_count < set.count(),
            Config,
            "val_count {} must lie in 1..{}",
            self.val_count,
            set.count()
        );
        ensure!(self.val_every > 0, Config, "val_every must be positive");
        ensure!(
            self.tail_fraction > 0.0 && self.tail_fraction <= 1.0,
            Config,
            "tail_fraction must lie in (0, 1]"
        );
        ensure!(self.smooth_blocks >= 2, Config, "need at least 2 smoothing blocks");
        ensure!(self.smooth_t_strata >= 1, Config, "need at least 1 smoothing stratum");
        ensure!(self.samples_per_class > 0, Config, "samples_per_class must be positive");
        for c in &self.cells {
            c.objective.validate()?;
            c.sampler.validate()?;
        }
        Ok(())
    }

    /// Class labels of the sample grid: `samples_per_class` of each digit, in order.
    pub fn sample_labels(&self) -> Vec<usize> {
        (0..CLASSES).flat_map(|c| std::iter::repeat_n(c, self.samples_per_class)).collect()
    }
}

/// Block means of the last `fraction` of the loss history.
/// Block means of the last `fraction` of the loss history.
///
/// Each step draws one `t`, and the loss level depends strongly on it, so
/// blocks average per-`t`-stratum means instead of raw losses.
pub fn smoothed_tail(history: &[LossRecord], fraction: f64, blocks: usize, t_strata: usize) -> Vec<f64> {
    let start = history.len() - ((history.len() as f64 * fraction).round() as usize).min(history.len());
    let tail = &history[start..];
    if tail.len() < blocks {
        return Vec::new();
    }
    let losses: Vec<f64> = tail.iter().map(|r| r.loss).collect();
    let ts: Vec<f64> = tail.iter().map(|r| r.t).collect();
    stratified_block_means(&losses, &ts, blocks, t_strata)
}

#[derive(Debug, Clone)]
pub struct BmnistCellResult {
    pub cell: ObjectiveCell,
    pub outcome: TrainOutcome,
    pub smoothed_loss: Vec<f64>,
    /// Training finished every step and the smoothed tail never increased.
    pub loss_monotone: bool,
    /// `None` when sampling from the evaluated checkpoint diverged.
    pub metrics: Option<QualityMetrics>,
    pub samples: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BmnistReport {
    pub untrained: QualityMetrics,
    pub sample_labels: Vec<usize>,
    pub cells: Vec<BmnistCellResult>,
}

fn sample_model(model: &Mlp, cell: &ObjectiveCell, recipe: &BmnistRecipe, labels: &[usize]) -> Result<Option<Tensor>> {
    let cond = Conditioned {
        model,
        cond: Cond::Classes(labels),
    };
    let mut rng = Rng::derived(recipe.seed, 77);
    let pixels = model.config.in_dim;
    match generate(&cond, &cell.objective, &SampleConfig::new(recipe.sample_steps), &[labels.len(), pixels], &mut rng) {
        Ok(s) => Ok(Some(s)),
        Err(Error::IntegrationDivergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Seeded split into training images and `val_count` validation images,
/// each kept in file order.
pub fn split(set: &BinaryImageSet, val_count: usize, seed: u64) -> (Tensor, Vec<usize>, Tensor, Vec<usize>) {
    let flat = set.flat();
    let val_idx = Rng::derived(seed, 5).choose_sorted(set.count(), val_count);
    let mut is_val = vec![false; set.count()];
    val_idx.iter().for_each(|&i| is_val[i] = true);
    let train_idx: Vec<usize> = (0..set.count()).filter(|&i| !is_val[i]).collect();
    let labels = |idx: &[usize]| idx.iter().map(|&i| set.labels[i]).collect();
    (
        flat.select_rows(&train_idx),
        labels(&train_idx),
        flat.select_rows(&val_idx),
        labels(&val_idx),
    )
}

pub fn run_bmnist_cell(set: &BinaryImageSet, recipe: &BmnistRecipe, cell: &ObjectiveCell) -> Result<BmnistCellResult> {
    recipe.validate(set)?;
    let (train_x, train_labels, val_x, val_labels) = split(set, recipe.val_count, recipe.seed);
    let val = ValSet::new(
        val_x,
        CondData::Classes(val_labels),
        recipe.val_t_grid.clone(),
        Rng::derived(recipe.seed, 2).next_u64(),
    )?;
    let mut cfg = TrainConfig::new(cell.objective, cell.sampler, recipe.seed);
    cfg.lr = recipe.lr;
    cfg.steps = recipe.steps;
    cfg.batch = recipe.batch;
    cfg.grad_clip = recipe.grad_clip;
    cfg.val_every = Some(recipe.val_every);
    let model = Mlp::init(recipe.net.clone(), &mut Rng::derived(recipe.seed, 1))?;
    let mut data = ImageData {
        images: &train_x,
        labels: &train_labels,
    };
    let outcome = train(&cfg, model, &mut data, Some(&val), &CheckpointPolicy::default())?;
    let smoothed_loss = smoothed_tail(&outcome.history, recipe.tail_fraction, recipe.smooth_blocks, recipe.smooth_t_strata);
    let loss_monotone =
        outcome.divergence.is_none() && !smoothed_loss.is_empty() && is_nonincreasing(&smoothed_loss);
    let samples = sample_model(&outcome.best_model(), cell, recipe, &recipe.sample_labels())?;
    let metrics = samples.as_ref().map(|s| quality_metrics(s, &train_x)).transpose()?;
    Ok(BmnistCellResult {
        cell: *cell,
        outcome,
        smoothed_loss,
        loss_monotone,
        metrics,
        samples,
    })
}

/// Quality metrics of samples drawn from the zero-weight network.
pub fn untrained_baseline(set: &BinaryImageSet, recipe: &BmnistRecipe) -> Result<QualityMetrics> {
    recipe.validate(set)?;
    let (train_x, ..) = split(set, recipe.val_count, recipe.seed);
    let cell = ObjectiveCell::new(Prediction::XPred, LossSpace::XMse, TimeSampler::uniform())?;
    let samples = sample_model(&Mlp::zeroed(recipe.net.clone())?, &cell, recipe, &recipe.sample_labels())?
        .ok_or_else(|| Error::Contract("the untrained network cannot diverge".into()))?;
    quality_metrics(&samples, &train_x)
}

pub fn run_bmnist(set: &BinaryImageSet, recipe: &BmnistRecipe) -> Result<BmnistReport> {
    recipe.validate(set)?;
    let untrained = untrained_baseline(set, recipe)?;
    let cells = recipe
        .cells
        .iter()
        .map(|c| run_bmnist_cell(set, recipe, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(BmnistReport {
        untrained,
        sample_labels: recipe.sample_labels(),
        cells,
    })
}
