//! Joint gradient optimization of sources, mixer, branches, and controller.
//!
//! Each step rebuilds the graph, evaluates the full objective with fresh
//! masks, runs one backward pass, optionally clips the global gradient
//! norm, and applies one Adam update to all four parameter groups.

pub mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::match_sources;
use crate::numerics::{clip_global_norm, AdamState, Graph, Tensor};
use crate::objective::{step_masks, total_objective, LossBreakdown, ModelConfig, ModelState, ObjectiveWeights};

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Constant,
    /// Linear warmup then cosine decay to zero at the final iteration.
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub scheduler: Scheduler,
    pub warmup: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub deterministic: bool,
    pub diagnostics_every: usize,
    pub weights: ObjectiveWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 3000,
            learning_rate: 3e-3,
            scheduler: Scheduler::Cosine,
            warmup: 50,
            clip_norm: Some(5.0),
            seed: 42,
            deterministic: true,
            diagnostics_every: 25,
            weights: ObjectiveWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip norm must be positive when set".into()));
            }
        }
        if self.diagnostics_every == 0 {
            return Err(Error::Config("diagnostics_every must be at least 1".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    /// Multiplier on the base learning rate at 1-based iteration `n`.
    pub fn lr_scale(&self, n: usize) -> f64 {
        match self.scheduler {
            Scheduler::Constant => 1.0,
            Scheduler::Cosine => {
                if self.warmup > 0 && n <= self.warmup {
                    n as f64 / self.warmup as f64
                } else if self.max_iterations <= self.warmup {
                    1.0
                } else {
                    let progress = (n - self.warmup) as f64
                        / (self.max_iterations - self.warmup) as f64;
                    0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}

/// Full optimizer state; checkpoints capture all of it.
#[derive(Debug, Clone)]
pub struct TrainingState {
    pub iteration: u64,
    pub model: ModelState,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
}

/// One logged step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub iter: u64,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_str: f64,
    pub loss_sep: f64,
    pub loss_smooth: f64,
    pub loss_ent: f64,
    pub loss_gap: f64,
    pub branch_str: Vec<f64>,
    pub expected_scale: Vec<f64>,
    pub center: Vec<f64>,
    pub alpha: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mac: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_corr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_index: Option<Vec<usize>>,
}

/// Initialize sources, mixer, branches, controller, optimizer, and the rng
/// stream from the seed. Identical seeds give bitwise-identical states.
pub fn init_state(y: &Tensor, cfg: &TrainConfig) -> Result<TrainingState> {
    cfg.validate()?;
    if y.shape().len() != 2 {
        return Err(Error::Config(format!(
            "observations must be 2-D, got shape {:?}",
            y.shape()
        )));
    }
    let (t, m) = (y.shape()[0], y.shape()[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ModelState::init(t, m, &cfg.model, &mut rng)?;
    let sizes: Vec<usize> = model
        .param_names_and_sizes()
        .into_iter()
        .map(|(_, n)| n)
        .collect();
    let adam = AdamState::new(cfg.learning_rate, &sizes);
    Ok(TrainingState {
        iteration: 0,
        model,
        adam,
        rng,
    })
}

/// One full optimization step; always yields a diagnostics record.
/// When `references` are given, matching metrics are included.
pub fn train_step(
    state: &mut TrainingState,
    y: &Tensor,
    cfg: &TrainConfig,
    references: Option<&Tensor>,
) -> Result<DiagnosticsRecord> {
    let step_seed: u64 = state.rng.random();
    let masks = step_masks(&state.model, step_seed)?;
    let graph = Graph::new();
    let eval = total_objective(&graph, y, &state.model, &cfg.weights, &masks)?;

    let iter = state.iteration + 1;
    if let Some(term) = eval.breakdown.first_non_finite() {
        return Err(Error::NumericalAbort(format!(
            "loss term {term} became non-finite at iteration {iter}"
        )));
    }

    let grads_out = eval.total.backward()?;
    let mut grads: Vec<Vec<f64>> = eval
        .binding
        .flat
        .iter()
        .map(|v| grads_out.wrt_or_zeros(v).into_data())
        .collect();
    if let Some(clip) = cfg.clip_norm {
        clip_global_norm(&mut grads, clip);
    }

    let lr_scale = cfg.lr_scale(iter as usize);
    {
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(grads.len());
        state.model.for_each_mut(&mut |_, t| params.push(t.data_mut()));
        state.adam.step(&mut params, &grads, lr_scale)?;
    }
    state.iteration = iter;

    let mut record = DiagnosticsRecord {
        iter,
        loss_total: eval.breakdown.total,
        loss_rec: eval.breakdown.rec,
        loss_str: eval.breakdown.str_,
        loss_sep: eval.breakdown.sep,
        loss_smooth: eval.breakdown.smooth,
        loss_ent: eval.breakdown.ent,
        loss_gap: eval.breakdown.gap,
        branch_str: eval.branch_str,
        expected_scale: eval.controller.expected_patch,
        center: eval.controller.centers,
        alpha: eval.controller.alpha,
        mac: None,
        branch_corr: None,
        matched_index: None,
    };
    if let Some(x) = references {
        let m = match_sources(&state.model.sources, x)?;
        record.branch_corr = Some(
            (0..m.permutation.len())
                .map(|k| m.correlation[k][m.permutation[k]])
                .collect(),
        );
        record.matched_index = Some(m.permutation);
        record.mac = Some(m.mac);
    }
    Ok(record)
}

/// Should iteration `n` be logged?
fn should_log(n: u64, cfg: &TrainConfig) -> bool {
    n % cfg.diagnostics_every as u64 == 0 || n == cfg.max_iterations as u64
}

/// Run from the state's current iteration up to `max_iterations`, invoking
/// `on_record` for every logged record. References never enter the
/// gradient; they only decorate the log.
pub fn train_loop(
    state: &mut TrainingState,
    y: &Tensor,
    cfg: &TrainConfig,
    references: Option<&Tensor>,
    on_record: &mut dyn FnMut(&DiagnosticsRecord) -> Result<()>,
) -> Result<Vec<DiagnosticsRecord>> {
    cfg.validate()?;
    let mut log = Vec::new();
    while state.iteration < cfg.max_iterations as u64 {
        let n = state.iteration + 1;
        let refs = if should_log(n, cfg) { references } else { None };
        let record = train_step(state, y, cfg, refs)?;
        if should_log(n, cfg) {
            log::info!(
                "iter {:>6}  total {:.6e}  rec {:.6e}  str {:.6e}{}",
                record.iter,
                record.loss_total,
                record.loss_rec,
                record.loss_str,
                record
                    .mac
                    .map(|m| format!("  mac {m:.4}"))
                    .unwrap_or_default()
            );
            on_record(&record)?;
            log.push(record);
        }
    }
    Ok(log)
}

/// Fresh training run: init then loop.
pub fn train(
    y: &Tensor,
    cfg: &TrainConfig,
    references: Option<&Tensor>,
) -> Result<(TrainingState, Vec<DiagnosticsRecord>)> {
    let mut state = init_state(y, cfg)?;
    let log = train_loop(&mut state, y, cfg, references, &mut |_| Ok(()))?;
    Ok((state, log))
}

/// Final summary printed by the CLI after training.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mac: Option<f64>,
}
