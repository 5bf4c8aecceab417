//! Sharpening, losses, the ramp-up schedule and the three-model training loop.

pub mod losses;
pub mod optim;
pub mod sharpen;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use losses::{
    dice_loss, mse, rampup_weight, supervised_loss, total_loss, unsupervised_loss, LossBreakdown, Reduction,
};
pub use optim::{poly_lr, Sgd};
pub use sharpen::{sharpen, sharpen_value, PseudoLabel};

use crate::checkpoint::{self, CheckpointMeta};
use crate::datapipe::{augment, sample_patch, Case, PatchSpec};
use crate::error::{Error, Result};
use crate::netcore::{ArchConfig, CcNet, Role};
use crate::nn::Module;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::volume::{Grid, Mask};
use losses::{cc_objective, supervised_only_objective, Objective};

/// Which objective drives the updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// All three models with supervised Dice and cross pseudo-label consistency.
    #[default]
    CcNet,
    /// Main model alone on the labeled cases.
    SupervisedOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_iteration: usize,
    pub lr: f64,
    /// Exponent of the polynomial learning-rate decay (0 keeps lr constant).
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lambda_s: f64,
    pub lambda_u_max: f64,
    /// Ramp-up horizon; `None` means `max_iteration`.
    pub rampup_iterations: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
    pub detach_pseudo_labels: bool,
    pub sup_reduction: Reduction,
    pub patch: PatchSpec,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iteration: 10_000,
            lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            labeled_per_batch: 2,
            unlabeled_per_batch: 2,
            lambda_s: 0.3,
            lambda_u_max: 1.0,
            rampup_iterations: None,
            temperature: 0.1,
            seed: 1337,
            detach_pseudo_labels: false,
            sup_reduction: Reduction::Mean,
            patch: PatchSpec::default(),
            augment: true,
            checkpoint_every: 1000,
            mode: TrainMode::CcNet,
        }
    }
}

impl TrainConfig {
    pub fn rampup_length(&self) -> usize {
        self.rampup_iterations.unwrap_or(self.max_iteration)
    }

    pub fn validate(&self) -> Result<()> {
        sharpen::check_temperature(self.temperature)?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_s > 0.0) {
            return bad(format!("lambda_s must be positive, got {}", self.lambda_s));
        }
        if !(self.lambda_u_max >= 0.0) {
            return bad(format!("lambda_u_max must be nonnegative, got {}", self.lambda_u_max));
        }
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch must be at least 1".into());
        }
        if self.max_iteration == 0 {
            return bad("max_iteration must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be nonnegative and momentum in [0, 1)".into());
        }
        PatchSpec::new(self.patch.size)?;
        Ok(())
    }

    fn objective(&self, iteration: usize) -> Objective {
        Objective {
            lambda_s: self.lambda_s,
            lambda_u: rampup_weight(iteration, self),
            temperature: self.temperature,
            detach: self.detach_pseudo_labels,
            reduction: self.sup_reduction,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(rename = "L_sup")]
    pub l_sup: f64,
    #[serde(rename = "L_unsup")]
    pub l_unsup: f64,
    pub lambda_u: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub lr: f64,
}

/// Images of a step: the first `labels.batch()` cases are labeled.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub images: Tensor<F>,
    pub labels: Tensor<F>,
}

impl<F: Real> Batch<F> {
    pub fn new(images: Tensor<F>, labels: Tensor<F>) -> Result<Self> {
        if images.channels() != 1
            || labels.channels() != 1
            || labels.batch() > images.batch()
            || labels.dims() != images.dims()
        {
            return Err(Error::Shape(format!(
                "batch images [{}, {}, {:?}] and labels [{}, {}, {:?}] are incompatible",
                images.batch(),
                images.channels(),
                images.dims(),
                labels.batch(),
                labels.channels(),
                labels.dims()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Builds a batch from labeled patches followed by unlabeled ones.
    pub fn from_patches(labeled: &[(Grid<f32>, Mask)], unlabeled: &[Grid<f32>]) -> Result<Self> {
        let images = Tensor::from_grids(labeled.iter().map(|(g, _)| g).chain(unlabeled))?;
        let masks: Vec<Grid<f32>> = labeled
            .iter()
            .map(|(_, m)| m.map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        let labels = if masks.is_empty() {
            Tensor::zeros(0, 1, images.dims())
        } else {
            Tensor::from_grids(&masks)?
        };
        Self::new(images, labels)
    }

    pub fn labeled(&self) -> usize {
        self.labels.batch()
    }
}

/// Forward in training mode and the loss, without touching gradients.
pub fn evaluate_loss<F: Real>(
    net: &mut CcNet<F>,
    config: &TrainConfig,
    batch: &Batch<F>,
    iteration: usize,
) -> Result<LossBreakdown> {
    match config.mode {
        TrainMode::CcNet => {
            let maps = net.forward_train(&batch.images, &Role::ALL)?;
            Ok(cc_objective(&maps, &batch.labels, &config.objective(iteration))?.0)
        }
        TrainMode::SupervisedOnly => {
            let x = batch.images.narrow_batch(0, batch.labeled());
            let maps = net.forward_train(&x, &[Role::Main])?;
            Ok(supervised_only_objective(&maps[0], &batch.labels, config.sup_reduction)?.0)
        }
    }
}

/// Zeroes all gradients, then fills them with d(total loss)/d(parameters).
pub fn compute_gradients<F: Real>(
    net: &mut CcNet<F>,
    config: &TrainConfig,
    batch: &Batch<F>,
    iteration: usize,
) -> Result<LossBreakdown> {
    net.zero_grad();
    match config.mode {
        TrainMode::CcNet => {
            let maps = net.forward_train(&batch.images, &Role::ALL)?;
            let (loss, grads) = cc_objective(&maps, &batch.labels, &config.objective(iteration))?;
            let pairs: Vec<(Role, Tensor<F>)> = Role::ALL.into_iter().zip(grads).collect();
            net.backward(&pairs);
            Ok(loss)
        }
        TrainMode::SupervisedOnly => {
            if batch.labeled() == 0 {
                return Err(Error::Usage("supervised-only step without labeled cases".into()));
            }
            let x = batch.images.narrow_batch(0, batch.labeled());
            let maps = net.forward_train(&x, &[Role::Main])?;
            let (loss, g) = supervised_only_objective(&maps[0], &batch.labels, config.sup_reduction)?;
            net.backward(&[(Role::Main, g)]);
            Ok(loss)
        }
    }
}

/// Iteration counter, the three parameter sets, optimizer state and loss history.
#[derive(Clone, Debug)]
pub struct TrainState<F = f32> {
    pub config: TrainConfig,
    pub iteration: usize,
    pub net: CcNet<F>,
    pub optimizer: Sgd<F>,
    pub history: Vec<LossRecord>,
}

impl<F: Real> TrainState<F> {
    pub fn new(config: TrainConfig, arch: &ArchConfig) -> Result<Self> {
        config.validate()?;
        let net = CcNet::new(arch, config.seed)?;
        Ok(Self {
            config,
            iteration: 0,
            net,
            optimizer: Sgd::new(),
            history: Vec::new(),
        })
    }
}

/// One optimizer update on `batch`; fails without updating on a non-finite loss.
pub fn train_step<F: Real>(state: &mut TrainState<F>, batch: &Batch<F>) -> Result<LossRecord> {
    let t = state.iteration;
    if t >= state.config.max_iteration {
        return Err(Error::Usage(format!("training already finished at iteration {t}")));
    }
    let loss = compute_gradients(&mut state.net, &state.config, batch, t)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: t,
            sup: loss.sup,
            unsup: loss.unsup,
            total: loss.total,
        });
    }
    let cfg = &state.config;
    let lr = poly_lr(cfg.lr, t, cfg.max_iteration, cfg.lr_power);
    state.optimizer.step(&mut state.net, lr, cfg.momentum, cfg.weight_decay);
    let record = LossRecord {
        iteration: t,
        l_sup: loss.sup,
        l_unsup: loss.unsup,
        lambda_u: loss.lambda_u,
        l_total: loss.total,
        lr,
    };
    state.history.push(record);
    state.iteration += 1;
    Ok(record)
}

/// Labeled and unlabeled training cases, padded to at least the patch size.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub labeled: Vec<Case>,
    pub unlabeled: Vec<Case>,
}

fn pad_case(case: &Case, patch: &PatchSpec) -> Result<Case> {
    let dims = case.volume.dims();
    if (0..3).all(|a| dims[a] >= patch.size[a]) {
        return Ok(case.clone());
    }
    let (grid, _) = case.volume.grid().pad_to(patch.size, 0.0);
    let label = case.label.as_ref().map(|l| l.pad_to(patch.size, false).0);
    Case::new(case.id.clone(), case.volume.with_grid(grid), label)
}

impl TrainData {
    pub fn new(labeled: Vec<Case>, unlabeled: Vec<Case>, patch: &PatchSpec) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::Config("training set has no labeled case".into()));
        }
        if let Some(c) = labeled.iter().find(|c| !c.is_labeled()) {
            return Err(Error::Config(format!("case {} is in the labeled set without a label", c.id)));
        }
        let labeled = labeled.iter().map(|c| pad_case(c, patch)).collect::<Result<_>>()?;
        let unlabeled = unlabeled
            .iter()
            .map(|c| pad_case(&c.unlabeled(), patch))
            .collect::<Result<_>>()?;
        Ok(Self { labeled, unlabeled })
    }
}

/// Endless walk over shuffled permutations of `0..n`.
#[derive(Clone, Debug)]
struct Cycle {
    order: Vec<usize>,
    pos: usize,
}

impl Cycle {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Draws training batches deterministically from a seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    data: TrainData,
    patch: PatchSpec,
    augment: bool,
    labeled_per_batch: usize,
    unlabeled_per_batch: usize,
    rng: ChaCha8Rng,
    labeled_cycle: Cycle,
    unlabeled_cycle: Cycle,
}

const SAMPLER_STREAM: u64 = 1 << 20;

impl BatchSampler {
    pub fn new(data: TrainData, config: &TrainConfig) -> Result<Self> {
        let unlabeled_per_batch = match config.mode {
            TrainMode::CcNet => config.unlabeled_per_batch,
            TrainMode::SupervisedOnly => 0,
        };
        if unlabeled_per_batch > 0 && data.unlabeled.is_empty() {
            return Err(Error::Config(
                "unlabeled_per_batch > 0 but the training set has no unlabeled case".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            labeled_cycle: Cycle::new(data.labeled.len()),
            unlabeled_cycle: Cycle::new(data.unlabeled.len()),
            data,
            patch: config.patch,
            augment: config.augment,
            labeled_per_batch: config.labeled_per_batch,
            unlabeled_per_batch,
            rng,
        })
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    pub fn next_batch<F: Real>(&mut self) -> Result<Batch<F>> {
        let mut labeled = Vec::with_capacity(self.labeled_per_batch);
        for _ in 0..self.labeled_per_batch {
            let case = &self.data.labeled[self.labeled_cycle.next(&mut self.rng)];
            let (img, lab) = sample_patch(case, &self.patch, &mut self.rng)?;
            let lab = lab.expect("labeled cases carry masks");
            labeled.push(if self.augment {
                let (i, l) = augment(&img, Some(&lab), &mut self.rng);
                (i, l.expect("label passed through"))
            } else {
                (img, lab)
            });
        }
        let mut unlabeled = Vec::with_capacity(self.unlabeled_per_batch);
        for _ in 0..self.unlabeled_per_batch {
            let case = &self.data.unlabeled[self.unlabeled_cycle.next(&mut self.rng)];
            let (img, _) = sample_patch(case, &self.patch, &mut self.rng)?;
            unlabeled.push(if self.augment {
                augment(&img, None, &mut self.rng).0
            } else {
                img
            });
        }
        Batch::from_patches(&labeled, &unlabeled)
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, iteration: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("iter_{iteration:06}.safetensors"))
    }

    /// Checkpoint with the highest iteration, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoint_dir();
        if !dir.exists() {
            return Ok(None);
        }
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        found.sort();
        Ok(found.pop())
    }
}

fn save_state(state: &TrainState<f32>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta::new(state.net.arch().clone(), state.iteration, state.config.clone());
    checkpoint::save(&state.net, &meta, path)
}

/// Runs the configured number of steps, logging every step and writing
/// checkpoints every `checkpoint_every` iterations and at the end.
pub fn train(
    config: &TrainConfig,
    arch: &ArchConfig,
    data: TrainData,
    run_dir: Option<&RunDir>,
) -> Result<TrainState<f32>> {
    let mut state = TrainState::new(config.clone(), arch)?;
    let mut sampler = BatchSampler::new(data, config)?;
    let mut log = match run_dir {
        Some(dir) => {
            fs::create_dir_all(dir.checkpoint_dir())?;
            Some(BufWriter::new(File::create(dir.log_path())?))
        }
        None => None,
    };
    while state.iteration < config.max_iteration {
        let batch = sampler.next_batch::<f32>()?;
        let record = match train_step(&mut state, &batch) {
            Ok(r) => r,
            Err(e) => {
                if let (Some(log), Error::NonFiniteLoss { .. }) = (log.as_mut(), &e) {
                    writeln!(log, "{}", serde_json::json!({ "error": e.to_string() }))?;
                    log.flush()?;
                }
                return Err(e);
            }
        };
        if let Some(log) = log.as_mut() {
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
        }
        if record.iteration % 50 == 0 {
            log::info!(
                "iter {} L_sup {:.4} L_unsup {:.4} lambda_u {:.4} L_total {:.4}",
                record.iteration,
                record.l_sup,
                record.l_unsup,
                record.lambda_u,
                record.l_total
            );
        }
        if let Some(dir) = run_dir {
            let done = state.iteration;
            if done == config.max_iteration || (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
                save_state(&state, &dir.checkpoint_path(done))?;
            }
        }
    }
    if let Some(mut log) = log {
        log.flush()?;
    }
    Ok(state)
}
