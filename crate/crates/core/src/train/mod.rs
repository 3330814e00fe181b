//! Loss, optimizers and the training loop.

mod loss;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{smooth_l1_loss, smooth_l1_with_grad};
pub use optim::{Optimizer, OptimizerKind};

use crate::dataset::{Dataset, FamilyRole};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, load_params, save_checkpoint, save_params};
use crate::nn::{LossAndGrad, ModelConfig, ModelState};
use crate::prompt::{simulate_prompts_with, PromptSpec};
use crate::scalar::Scalar;
use crate::synth::mix_seed;
use crate::volume::{ContextSet, Mask3D, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Inclusive range the context size is drawn from each step.
    #[serde(alias = "L_range")]
    pub context_range: (usize, usize),
    /// Inclusive range the prompts-per-image count is drawn from each step.
    #[serde(alias = "P_range")]
    pub prompts_range: (usize, usize),
    /// Targets supervised against each sampled context set.
    pub targets_per_step: usize,
    pub smooth_l1_beta: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub jitter: bool,
    pub point_radius: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            context_range: (1, 8),
            prompts_range: (1, 5),
            targets_per_step: 1,
            smooth_l1_beta: 0.1,
            seed: 0,
            checkpoint_interval: 100,
            jitter: true,
            point_radius: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (l0, l1) = self.context_range;
        if l0 < 1 || l0 > l1 {
            return Err(Error::config("train.context_range", "needs 1 <= min <= max"));
        }
        let (p0, p1) = self.prompts_range;
        if p0 < 1 || p0 > p1 {
            return Err(Error::config("train.prompts_range", "needs 1 <= min <= max"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::config("train.smooth_l1_beta", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.targets_per_step < 1 {
            return Err(Error::config("train.targets_per_step", "must be at least 1"));
        }
        Ok(())
    }
}

/// One optimization example: a prompted context set and densely labelled
/// targets from the same family.
#[derive(Debug, Clone)]
pub struct TrainBatch<T> {
    pub context: ContextSet<T>,
    pub targets: Vec<(Volume3D<T>, Mask3D)>,
    pub family: usize,
    pub prompts_per_image: usize,
}

/// Draws the batch for `step` from `families`; a pure function of
/// `(config.seed, step)` and the dataset.
pub fn sample_batch(
    data: &Dataset,
    families: &[usize],
    model: &ModelConfig,
    config: &TrainConfig,
    step: u64,
) -> Result<TrainBatch<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, step));
    let family = families[rng.random_range(0..families.len())];
    let n = data.families()[family].family.n_samples;
    let b = config.targets_per_step;
    if n < b + 1 {
        return Err(Error::InsufficientSamples { needed: b + 1, available: n });
    }
    let l = rng.random_range(config.context_range.0..=config.context_range.1).min(n - b);
    let p = rng.random_range(config.prompts_range.0..=config.prompts_range.1);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..l + b {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let spec = PromptSpec {
        prompt_type: model.prompt_type,
        prompts_per_image: p,
        jitter_enabled: config.jitter,
        rng_seed: 0,
        point_radius: config.point_radius,
    };
    let mut pairs = Vec::with_capacity(l);
    for &i in &idx[..l] {
        let (x, y) = data.sample(family, i)?;
        let u = simulate_prompts_with(&y, &spec, &mut rng)?;
        pairs.push((x, u));
    }
    let targets = idx[l..l + b].iter().map(|&i| data.sample(family, i)).collect::<Result<_>>()?;
    Ok(TrainBatch { context: ContextSet::new(pairs, model.prompt_type)?, targets, family, prompts_per_image: p })
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    optimizer: &mut Optimizer<T>,
    batch: &TrainBatch<T>,
    config: &TrainConfig,
) -> Result<f64> {
    let targets: Vec<(&Volume3D<T>, &Mask3D)> = batch.targets.iter().map(|(x, y)| (x, y)).collect();
    let LossAndGrad { loss, grads } = state.loss_and_gradients(&targets, &batch.context, config.smooth_l1_beta)?;
    let finite = grads.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()));
    if !loss.is_finite() || !finite {
        return Err(Error::NonFiniteLoss { step: state.step });
    }
    optimizer.update(&mut state.params, &grads, config.learning_rate);
    state.step += 1;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    #[serde(rename = "L")]
    pub context_size: usize,
    #[serde(rename = "P")]
    pub prompts_per_image: usize,
    pub wall_ms: u64,
}

pub const LOSS_LOG_HEADER: &str = "step,loss,L,P,wall_ms";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub log: Vec<LossRecord>,
}

/// File names used inside a training output directory.
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub adam_m: PathBuf,
    pub adam_v: PathBuf,
    pub loss_log: PathBuf,
}

impl RunFiles {
    pub fn new(dir: &Path) -> Self {
        RunFiles {
            checkpoint: dir.join("checkpoint.json"),
            adam_m: dir.join("optimizer_m.json"),
            adam_v: dir.join("optimizer_v.json"),
            loss_log: dir.join("loss_log.csv"),
        }
    }
}

fn save_run(files: &RunFiles, state: &ModelState<f32>, opt: &Optimizer<f32>) -> Result<()> {
    save_checkpoint(&files.checkpoint, state)?;
    if let Optimizer::Adam { m, v, .. } = opt {
        save_params(&files.adam_m, &state.config, m, state.step, state.seed)?;
        save_params(&files.adam_v, &state.config, v, state.step, state.seed)?;
    }
    Ok(())
}

fn resume(files: &RunFiles, config: &TrainConfig) -> Result<(ModelState<f32>, Optimizer<f32>)> {
    let state: ModelState<f32> = load_checkpoint(&files.checkpoint)?;
    let opt = match config.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd,
        OptimizerKind::Adam if files.adam_m.exists() && files.adam_v.exists() => Optimizer::Adam {
            m: load_params(&files.adam_m)?.1,
            v: load_params(&files.adam_v)?.1,
            t: state.step,
        },
        OptimizerKind::Adam => Optimizer::new(OptimizerKind::Adam, &state.params),
    };
    Ok((state, opt))
}

/// Trains on the dataset's training families.
///
/// With `out`, checkpoints land there every `checkpoint_interval` steps and
/// the loss log is appended to `loss_log.csv`; an existing checkpoint in
/// `out` is resumed from. Batches depend only on `(seed, step)`, so a resumed
/// run follows the same data stream as an uninterrupted one.
pub fn train_loop(
    data: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if data.manifest.config.shape != model.input_shape {
        return Err(Error::ShapeMismatch { expected: model.input_shape, actual: data.manifest.config.shape });
    }
    let families = data.by_role(FamilyRole::Train);
    if families.is_empty() {
        return Err(Error::config("data.train_families", "no training families in manifest"));
    }
    let files = out.map(RunFiles::new);
    let (mut state, mut opt) = match &files {
        Some(f) if f.checkpoint.exists() => resume(f, config)?,
        _ => {
            let s = ModelState::init(model.clone(), config.seed)?;
            let o = Optimizer::new(config.optimizer, &s.params);
            (s, o)
        }
    };
    if state.config != *model {
        return Err(Error::Checkpoint("resumed checkpoint was trained with a different model config".into()));
    }
    let mut log_file = match &files {
        Some(f) => {
            if let Some(dir) = f.loss_log.parent() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let fresh = !f.loss_log.exists();
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&f.loss_log)
                .map_err(|e| Error::io(&f.loss_log, e))?;
            if fresh {
                writeln!(file, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(&f.loss_log, e))?;
            }
            Some(file)
        }
        None => None,
    };
    let mut log = Vec::new();
    while state.step < config.steps {
        let started = Instant::now();
        let batch = sample_batch(data, &families, model, config, state.step)?;
        let step = state.step;
        let loss = train_step(&mut state, &mut opt, &batch, config)?;
        let record = LossRecord {
            step,
            loss,
            context_size: batch.context.len(),
            prompts_per_image: batch.prompts_per_image,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let (Some(file), Some(f)) = (log_file.as_mut(), &files) {
            writeln!(file, "{},{},{},{},{}", record.step, record.loss, record.context_size, record.prompts_per_image, record.wall_ms)
                .map_err(|e| Error::io(&f.loss_log, e))?;
        }
        progress(&record);
        log.push(record);
        if let Some(f) = &files {
            let periodic = config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0;
            if periodic || state.step == config.steps {
                save_run(f, &state, &opt)?;
            }
        }
    }
    if let Some(f) = &files {
        if !f.checkpoint.exists() {
            save_run(f, &state, &opt)?;
        }
    }
    Ok(TrainOutcome { state, log })
}
