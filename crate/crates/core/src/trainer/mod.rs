//! Noise-prediction training with checkpointing.
//!
//! Every random draw of step `s` comes from a generator keyed by
//! `(seed, s)`, and the data order of each epoch from one keyed by
//! `(seed, epoch)`. A run resumed from a checkpoint therefore replays the
//! uninterrupted run exactly.

mod checkpoint;
mod data;
mod loss;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorlab::{AdamConfig, AdamState, Graph, ParamStore, Tensor};

pub use checkpoint::{decode_records, encode_records, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use data::{sample_batch, BatchSpec, TrainBatch, TrainSet};
pub use loss::{clean_tokens, combine, loss_graph, noisy_codes, LossParts, LossWeights};

use crate::denoiser::{init_params, Denoiser, DenoiserConfig, Modality};
use crate::diffusion::{solve_batch, NoiseSchedule, ScheduleParams, SolveOptions};
use crate::error::{Error, Result};
use crate::metrics::{kendall_normalized, piece_accuracy, puzzle_accuracy};
use crate::posenc::PeTable;
use crate::assignment::greedy_match;
use crate::puzzlekit::PuzzleInstance;

pub const CONFIG_VERSION: u32 = 1;
pub const LOSS_HEADER: &str = "step,loss,lr,wallclock_s";
pub const EVAL_HEADER: &str = "step,puzzle_acc,piece_acc,kendall_mean";

/// Flat, versioned training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub version: u32,
    pub layers: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub heads: usize,
    pub time_freq: usize,
    pub batch_size: usize,
    /// Optimizer steps; ignored when `epochs` is set.
    pub steps: u64,
    pub epochs: Option<u64>,
    pub lr: f64,
    pub warmup: u64,
    /// Cosine decay to zero over the run after warmup.
    pub cosine: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip: f64,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub masked: bool,
    pub content_weight: f64,
    pub pe_weight: f64,
    pub aux_weight: f64,
    /// Horizontal flips; defaults to on for grids.
    pub flip: Option<bool>,
    /// Pins the first piece to slot 0; defaults to on for sequences.
    pub anchor: Option<bool>,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_count: usize,
    pub eval_stride: usize,
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            layers: 4,
            hidden: 128,
            mlp: 512,
            heads: 4,
            time_freq: 64,
            batch_size: 32,
            steps: 5000,
            epochs: None,
            lr: 1e-4,
            warmup: 0,
            cosine: false,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 0.0,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            masked: false,
            content_weight: 0.8,
            pe_weight: 0.2,
            aux_weight: 0.05,
            flip: None,
            anchor: None,
            seed: 0,
            eval_every: 0,
            eval_count: 64,
            eval_stride: 10,
            ckpt_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.masked && ((self.content_weight + self.pe_weight) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "content_weight + pe_weight must be 1 in masked mode, got {} + {}",
                self.content_weight, self.pe_weight
            )));
        }
        if self.clip < 0.0 || self.aux_weight < 0.0 {
            return Err(Error::invalid("clip and aux_weight must be non-negative"));
        }
        self.schedule().build()?;
        Ok(())
    }

    /// Parses JSON, reporting the line of any syntax or field error.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)
            .map_err(|e| Error::format(origin, None, format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.timesteps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            content: self.content_weight,
            pe: self.pe_weight,
            aux: self.aux_weight,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model(&self, data: &TrainSet) -> DenoiserConfig {
        DenoiserConfig {
            layers: self.layers,
            hidden: self.hidden,
            mlp: self.mlp,
            heads: self.heads,
            modality: data.modality(),
            piece: data.piece_shape(),
            masked: self.masked,
            time_freq: self.time_freq,
            timesteps: self.timesteps,
        }
    }

    pub fn flip_for(&self, modality: Modality) -> bool {
        self.flip.unwrap_or(modality == Modality::Spatial)
    }

    pub fn anchor_for(&self, modality: Modality) -> bool {
        self.anchor.unwrap_or(modality == Modality::Temporal)
    }

    pub fn total_steps(&self, data_len: usize) -> u64 {
        match self.epochs {
            Some(e) => e * (data_len as u64).div_ceil(self.batch_size as u64),
            None => self.steps,
        }
    }

    /// Learning rate after `step` completed steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        if !self.cosine || total <= self.warmup {
            return self.lr;
        }
        let p = (step - self.warmup) as f64 / (total - self.warmup) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
    }
}

const DATA_DOMAIN: u64 = 0x6a70_6476_7464_6174;
const STEP_DOMAIN: u64 = 0x6a70_6476_7473_7465;

fn keyed_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Steps completed after this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Held-out evaluation at a point in training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub step: u64,
    pub puzzle_acc: f64,
    pub piece_acc: f64,
    pub kendall_mean: f64,
}

pub struct Trainer {
    config: TrainConfig,
    model: DenoiserConfig,
    data: TrainSet,
    params: ParamStore<f32>,
    adam: AdamState<f32>,
    sched: NoiseSchedule,
    table: PeTable,
    spec: BatchSpec,
    step: u64,
    total: u64,
    order: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: TrainSet) -> Result<Self> {
        config.validate()?;
        let model = config.model(&data);
        let mut rng = keyed_rng(config.seed, STEP_DOMAIN, u64::MAX);
        let params = init_params(&model, &mut rng)?;
        let adam = AdamState::new(config.adam(), &params);
        Self::assemble(config, model, data, params, adam, 0)
    }

    /// Continues from a checkpoint; the data must match the stored model.
    pub fn resume(ckpt: Checkpoint, data: TrainSet) -> Result<Self> {
        let config = ckpt.train.clone();
        Self::resume_with(config, ckpt, data)
    }

    /// Continues from a checkpoint under `config`, which may extend the run
    /// but must describe the same model.
    pub fn resume_with(config: TrainConfig, ckpt: Checkpoint, data: TrainSet) -> Result<Self> {
        config.validate()?;
        ckpt.expect_model(&config.model(&data))?;
        if config.seed != ckpt.seed || config.schedule() != ckpt.schedule {
            return Err(Error::invalid("resume config changes the seed or the noise schedule"));
        }
        Self::assemble(config, ckpt.model, data, ckpt.params, ckpt.adam, ckpt.step)
    }

    fn assemble(
        config: TrainConfig,
        model: DenoiserConfig,
        data: TrainSet,
        params: ParamStore<f32>,
        adam: AdamState<f32>,
        step: u64,
    ) -> Result<Self> {
        let sched = config.schedule().build()?;
        let table = PeTable::new(&data.layout())?;
        let modality = data.modality();
        let spec = BatchSpec {
            batch_size: config.batch_size,
            timesteps: config.timesteps,
            flip: config.flip_for(modality),
            anchor: config.anchor_for(modality),
            masked: config.masked,
            content_dim: if config.masked { config.hidden } else { 0 },
        };
        let total = config.total_steps(data.len());
        Ok(Self {
            config,
            model,
            data,
            params,
            adam,
            sched,
            table,
            spec,
            step,
            total,
            order: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model_config(&self) -> &DenoiserConfig {
        &self.model
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    pub fn denoiser(&self) -> Denoiser {
        Denoiser {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.config.clone(),
            model: self.model.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            schedule: self.config.schedule(),
            step: self.step,
            seed: self.config.seed,
        }
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.data.len()).collect();
            order.shuffle(&mut keyed_rng(self.config.seed, DATA_DOMAIN, epoch));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("just set").1
    }

    /// Sources of batch `step`, continuing across epoch boundaries.
    pub fn batch_sources(&mut self, step: u64) -> Vec<usize> {
        let (b, len) = (self.config.batch_size as u64, self.data.len() as u64);
        (step * b..(step + 1) * b)
            .map(|i| {
                let (epoch, pos) = (i / len, (i % len) as usize);
                self.epoch_order(epoch)[pos]
            })
            .collect()
    }

    /// The corrupted batch that step `step` trains on.
    pub fn batch(&mut self, step: u64) -> Result<TrainBatch<f32>> {
        let sources = self.batch_sources(step);
        let mut rng = keyed_rng(self.config.seed, STEP_DOMAIN, step);
        sample_batch(&self.data, &sources, &self.spec, &self.table, &mut rng)
    }

    /// Loss of `batch` under the current weights, without updating.
    pub fn evaluate_loss(&self, batch: &TrainBatch<f32>) -> Result<f64> {
        let mut g = Graph::new();
        let w = self.params.bind_frozen(&mut g);
        let parts = loss_graph(&mut g, &w, &self.model, batch, &self.sched, &self.config.weights(), None)?;
        Ok(f64::from(g.value(parts.total).item()))
    }

    /// One optimizer step. A non-finite loss or gradient leaves the weights
    /// untouched and returns [`Error::Numeric`].
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.batch(self.step)?;
        let mut g = Graph::new();
        let w = self.params.bind(&mut g);
        let parts = loss_graph(&mut g, &w, &self.model, &batch, &self.sched, &self.config.weights(), None)?;
        let loss = f64::from(g.value(parts.total).item());
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", self.step + 1)));
        }
        let grads = g.backward(parts.total)?;
        let mut grads = self.params.collect_grads(&w, &grads);
        if grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step + 1)));
        }
        if self.config.clip > 0.0 {
            let norm = grads
                .iter()
                .flat_map(|t| t.data())
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm > self.config.clip {
                let s = (self.config.clip / norm) as f32;
                grads = grads.iter().map(|t| t.scale(s)).collect();
            }
        }
        let lr = self.config.lr_at(self.step, self.total);
        self.adam.config.lr = lr;
        self.adam.step(&mut self.params, &grads)?;
        self.adam.config.lr = self.config.lr;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            lr,
        })
    }

    /// Solves held-out puzzles with the current weights.
    pub fn evaluate(&self, held_out: &[PuzzleInstance]) -> Result<EvalStats> {
        evaluate_model(&self.denoiser(), &self.sched, held_out, self.config.eval_stride, self.config.seed, self.step)
    }
}

/// Puzzle accuracy, piece accuracy and mean Kendall distance of greedy
/// matching after sampling with the given stride.
pub fn evaluate_model(
    model: &Denoiser,
    sched: &NoiseSchedule,
    puzzles: &[PuzzleInstance],
    stride: usize,
    seed: u64,
    step: u64,
) -> Result<EvalStats> {
    if puzzles.is_empty() {
        return Err(Error::invalid("no puzzles to evaluate"));
    }
    let queries: Vec<_> = puzzles.iter().enumerate().map(|(i, p)| p.solver_view().query(i as u64)).collect();
    let opts = SolveOptions {
        seed,
        stride,
        ..SolveOptions::default()
    };
    let sols = solve_batch(model, sched, &queries, &opts)?;
    let mut perms = Vec::with_capacity(puzzles.len());
    let mut kendall = 0.0;
    for (p, s) in puzzles.iter().zip(&sols) {
        let table = PeTable::new(&p.layout())?;
        let a = greedy_match(&s.pe, &table)?;
        kendall += kendall_normalized(&a.permutation, p.truth())?;
        perms.push(a.permutation);
    }
    let truths: Vec<Vec<usize>> = puzzles.iter().map(|p| p.truth().to_vec()).collect();
    Ok(EvalStats {
        step,
        puzzle_acc: puzzle_accuracy(&perms, &truths)?,
        piece_acc: piece_accuracy(&perms, &truths)?,
        kendall_mean: kendall / puzzles.len() as f64,
    })
}

fn open_csv(path: &Path, header: &str, append: bool) -> Result<std::fs::File> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !(append && exists) {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.bin"))
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Fill the `wallclock_s` column; when off it is written as 0.
    pub record_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_time: true }
    }
}

/// What a finished run left on disk.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub evals: Vec<EvalStats>,
}

/// Runs `trainer` to completion, writing `loss.csv`, `eval.csv` and
/// `ckpt_<step>.bin` files into `out`. The final step is always
/// checkpointed. On a numeric failure the last good state is saved before
/// the error is returned.
pub fn run(
    trainer: &mut Trainer,
    out: &Path,
    held_out: &[PuzzleInstance],
    opts: &RunOptions,
    mut progress: impl FnMut(&StepStats),
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resumed = trainer.steps_done() > 0;
    let loss_path = out.join("loss.csv");
    let mut loss_csv = open_csv(&loss_path, LOSS_HEADER, resumed)?;
    let eval_path = out.join("eval.csv");
    let evaluating = trainer.config.eval_every > 0 && !held_out.is_empty();
    let mut eval_csv = if evaluating {
        Some(open_csv(&eval_path, EVAL_HEADER, resumed)?)
    } else {
        None
    };
    let eval_set = &held_out[..held_out.len().min(trainer.config.eval_count.max(1))];
    let start = Instant::now();
    let mut summary = TrainSummary {
        steps: trainer.steps_done(),
        final_loss: None,
        checkpoints: Vec::new(),
        evals: Vec::new(),
    };
    let save = |trainer: &Trainer, summary: &mut TrainSummary| -> Result<()> {
        let path = checkpoint_path(out, trainer.steps_done());
        trainer.checkpoint().save(&path)?;
        summary.checkpoints.push(path);
        Ok(())
    };
    while !trainer.is_done() {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e @ Error::Numeric(_)) => {
                save(trainer, &mut summary)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(
            loss_csv,
            "{},{},{},{:.3}",
            stats.step,
            stats.loss,
            stats.lr,
            if opts.record_time { start.elapsed().as_secs_f64() } else { 0.0 }
        )
        .map_err(|e| Error::io(&loss_path, e))?;
        progress(&stats);
        summary.steps = stats.step;
        summary.final_loss = Some(stats.loss);
        if let Some(f) = eval_csv.as_mut() {
            if stats.step % trainer.config.eval_every == 0 {
                let ev = trainer.evaluate(eval_set)?;
                writeln!(f, "{},{},{},{}", ev.step, ev.puzzle_acc, ev.piece_acc, ev.kendall_mean)
                    .map_err(|e| Error::io(&eval_path, e))?;
                summary.evals.push(ev);
            }
        }
        let every = trainer.config.ckpt_every;
        if every > 0 && stats.step % every == 0 && !trainer.is_done() {
            save(trainer, &mut summary)?;
        }
    }
    save(trainer, &mut summary)?;
    loss_csv.flush().map_err(|e| Error::io(&loss_path, e))?;
    Ok(summary)
}

/// Loss and parameter gradients of a fixed batch (gradient checks).
/// Pass `clean` to hold the content target fixed while `params` move.
pub fn loss_of<T: tensorlab::Scalar>(
    model: &DenoiserConfig,
    params: &ParamStore<T>,
    batch: &TrainBatch<T>,
    sched: &NoiseSchedule,
    weights: &LossWeights,
    clean: Option<&Tensor<T>>,
) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let w = params.bind(&mut g);
    let parts = loss_graph(&mut g, &w, model, batch, sched, weights, clean)?;
    let grads = g.backward(parts.total)?;
    Ok((g.value(parts.total).item(), params.collect_grads(&w, &grads)))
}
