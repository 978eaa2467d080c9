//! Deterministic multi-seed training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dataset, EvalSummary};
use crate::model::{ModelBundle, ModelConfig, Trajectory};
use crate::noise::NoiseSource;
use crate::objectives::{loss_and_gradients, regularized_loss, CompositeEmbedding, LossComponents, ObjectiveConfig};
use crate::optim::{clip_grad_norm, Adam};
use crate::synthdata::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective_config: ObjectiveConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
    pub eval_every: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective_config: ObjectiveConfig::default(),
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            seeds: (0..5).collect(),
            eval_every: 5,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective_config.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }
}

/// Metric columns after the identifying `run_id, objective, seed, epoch`.
pub const METRIC_COLUMNS: [&str; 8] = [
    "train_loss",
    "action_nll",
    "state_nll",
    "kl",
    "mi_term",
    "eval_mse_sum_embedding",
    "eval_mse_encoded",
    "additivity_error",
];

/// One metrics CSV row. Evaluation columns may be left empty by the `eval`
/// command when only one embedding mode is requested.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub objective: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub action_nll: f64,
    pub state_nll: f64,
    pub kl: f64,
    pub mi_term: f64,
    pub eval_mse_sum_embedding: Option<f64>,
    pub eval_mse_encoded: Option<f64>,
    pub additivity_error: Option<f64>,
}

impl MetricsRow {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "train_loss" => Some(self.train_loss),
            "action_nll" => Some(self.action_nll),
            "state_nll" => Some(self.state_nll),
            "kl" => Some(self.kl),
            "mi_term" => Some(self.mi_term),
            "eval_mse_sum_embedding" => self.eval_mse_sum_embedding,
            "eval_mse_encoded" => self.eval_mse_encoded,
            "additivity_error" => self.additivity_error,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub bundle: ModelBundle,
    pub metrics: RunMetrics,
}

pub fn run_id(cfg: &TrainConfig, seed: u64) -> String {
    format!("{}-seed{seed}", cfg.objective_config.objective)
}

pub fn init_parameters(model_config: &ModelConfig, seed: u64) -> Result<ModelBundle> {
    ModelBundle::init(model_config, seed)
}

/// Demonstrations used for gradient updates. Sum mode trains on subskill
/// demonstrations only; encode mode also sees composites.
pub fn training_set<'d>(dataset: &'d Dataset, cfg: &ObjectiveConfig) -> Vec<&'d Trajectory> {
    dataset
        .trajectories
        .iter()
        .filter(|t| cfg.composite_embedding == CompositeEmbedding::Encode || !dataset.is_composite(&t.skill_id))
        .collect()
}

/// Shuffles each skill's demonstrations, interleaves skills round-robin and
/// cuts the result into batches, so every batch of at least as many items as
/// there are skills holds one demo of each. A trailing batch missing a skill
/// is merged into its predecessor.
fn make_batches(items: &[&Trajectory], batch_size: usize, rng: &mut NoiseSource) -> Vec<Vec<usize>> {
    let mut skills: Vec<&str> = Vec::new();
    for t in items {
        if !skills.contains(&t.skill_id.as_str()) {
            skills.push(&t.skill_id);
        }
    }
    let mut groups: Vec<Vec<usize>> = skills
        .iter()
        .map(|s| (0..items.len()).filter(|&i| items[i].skill_id == *s).collect())
        .collect();
    for g in groups.iter_mut() {
        rng.shuffle(g);
    }
    let longest = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut order = Vec::with_capacity(items.len());
    for k in 0..longest {
        for g in &groups {
            if let Some(&i) = g.get(k) {
                order.push(i);
            }
        }
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 {
        let last = batches.last().unwrap();
        let covered = skills.iter().all(|s| last.iter().any(|&i| items[i].skill_id == *s));
        if !covered {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }
    }
    batches
}

fn accumulate(total: &mut LossComponents, c: &LossComponents) {
    total.loss += c.loss;
    total.action_nll += c.action_nll;
    total.state_nll += c.state_nll;
    total.kl += c.kl;
    total.mi_term += c.mi_term;
}

fn per_item(total: LossComponents, n: usize) -> LossComponents {
    let k = 1.0 / n as f64;
    LossComponents {
        loss: total.loss * k,
        action_nll: total.action_nll * k,
        state_nll: total.state_nll * k,
        kl: total.kl * k,
        mi_term: total.mi_term * k,
    }
}

fn row(run: &str, cfg: &TrainConfig, seed: u64, epoch: usize, l: &LossComponents, e: &EvalSummary) -> MetricsRow {
    MetricsRow {
        run_id: run.to_string(),
        objective: cfg.objective_config.objective.to_string(),
        seed,
        epoch,
        train_loss: l.loss,
        action_nll: l.action_nll,
        state_nll: l.state_nll,
        kl: l.kl,
        mi_term: l.mi_term,
        eval_mse_sum_embedding: Some(e.mse_sum_embedding),
        eval_mse_encoded: Some(e.mse_encoded),
        additivity_error: Some(e.additivity_error),
    }
}

fn check_finite(epoch: usize, batch: usize, c: &LossComponents) -> Result<()> {
    if c.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        epoch,
        batch,
        action_nll: c.action_nll,
        state_nll: c.state_nll,
        kl: c.kl,
        mi_term: c.mi_term,
    })
}

fn check_eval(epoch: usize, e: &EvalSummary) -> Result<()> {
    if e.mse_sum_embedding.is_finite() && e.mse_encoded.is_finite() && e.additivity_error.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        epoch,
        batch: 0,
        action_nll: f64::NAN,
        state_nll: f64::NAN,
        kl: f64::NAN,
        mi_term: f64::NAN,
    })
}

/// Trains one run. Noise streams derive from `seed`: stream 1 shuffles,
/// stream 2 feeds the training loss, streams 3 and 4 the epoch-0 loss pass
/// and its batching.
pub fn train_seed(dataset: &Dataset, cfg: &TrainConfig, model_config: &ModelConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    model_config.validate()?;
    dataset.validate()?;
    let items = training_set(dataset, &cfg.objective_config);
    if items.is_empty() {
        return Err(Error::Validation("dataset has no training demonstrations".into()));
    }
    let run = run_id(cfg, seed);
    let mut bundle = init_parameters(model_config, seed)?;
    let mut shuffle = NoiseSource::derived(seed, 1);
    let mut noise = NoiseSource::derived(seed, 2);
    let mut metrics = RunMetrics::default();

    // Epoch 0: loss of the initial parameters over one shuffled pass.
    let mut init_noise = NoiseSource::derived(seed, 3);
    let mut total = LossComponents::default();
    for (b, idx) in make_batches(&items, cfg.batch_size, &mut NoiseSource::derived(seed, 4))
        .into_iter()
        .enumerate()
    {
        let batch: Vec<Trajectory> = idx.iter().map(|&i| items[i].clone()).collect();
        let c = regularized_loss(&bundle, &batch, &dataset.compositions, &cfg.objective_config, &mut init_noise)?;
        check_finite(0, b, &c)?;
        accumulate(&mut total, &c);
    }
    let eval = evaluate_dataset(&bundle, dataset)?;
    check_eval(0, &eval)?;
    metrics.rows.push(row(&run, cfg, seed, 0, &per_item(total, items.len()), &eval));

    let mut opt = Adam::new(&bundle.params, cfg.learning_rate);
    for epoch in 1..=cfg.epochs {
        let mut total = LossComponents::default();
        for (b, idx) in make_batches(&items, cfg.batch_size, &mut shuffle).into_iter().enumerate() {
            let batch: Vec<&Trajectory> = idx.iter().map(|&i| items[i]).collect();
            let (c, mut grads) = loss_and_gradients(&bundle, &batch, &dataset.compositions, &cfg.objective_config, &mut noise)?;
            check_finite(epoch, b, &c)?;
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.update(&mut bundle.params, &grads);
            accumulate(&mut total, &c);
        }
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let eval = evaluate_dataset(&bundle, dataset)?;
            check_eval(epoch, &eval)?;
            metrics.rows.push(row(&run, cfg, seed, epoch, &per_item(total, items.len()), &eval));
        }
    }
    Ok(RunResult {
        run_id: run,
        seed,
        bundle,
        metrics,
    })
}

/// One run per configured seed, in seed order.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, model_config: &ModelConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .map(|&seed| train_seed(dataset, cfg, model_config, seed))
        .collect()
}
