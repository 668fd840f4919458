//! PPO training of the controller on terminal, episode-level rewards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{score, Candidate, EvalError, Evaluator};
use crate::genotype::SpaceConfig;
use crate::log::{SearchRecord, Source};
use crate::policy::{Controller, ControllerConfig, ControllerSnapshot, PolicyError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub update_epochs: usize,
    /// Architectures per update.
    pub batch_size: usize,
    pub entropy_coef: f64,
    pub baseline_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            clip_epsilon: 0.2,
            update_epochs: 4,
            batch_size: 16,
            entropy_coef: 0.001,
            baseline_decay: 0.95,
            max_grad_norm: 5.0,
        }
    }
}

impl PpoConfig {
    pub fn check(&self) -> Result<(), RlError> {
        let bad = |what: &str| Err(RlError::Config(what.to_string()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.baseline_decay > 0.0 && self.baseline_decay < 1.0) {
            return bad("baseline_decay must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.update_epochs == 0 {
            return bad("batch_size and update_epochs must be positive");
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RlError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("trajectory {0} has no reward")]
    MissingReward(usize),
    #[error("non-finite loss from trajectory {trajectory}")]
    NonFinite { trajectory: usize },
    #[error("invalid PPO config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("candidate preparation failed: {0}")]
    Prepare(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Exponential moving average of batch-mean rewards.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Baseline {
    pub ema_reward: f64,
    pub initialized: bool,
}

/// Attaches `reward - baseline` to every trajectory, then folds the batch
/// mean into the baseline. The first batch initializes the baseline to its
/// own mean before advantages are taken.
pub fn compute_advantages(batch: &mut [Trajectory], baseline: &mut Baseline, decay: f64) -> Result<(), RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let rewards = batch
        .iter()
        .enumerate()
        .map(|(i, t)| t.reward.ok_or(RlError::MissingReward(i)))
        .collect::<Result<Vec<f64>, _>>()?;
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    if !baseline.initialized {
        baseline.ema_reward = mean;
        baseline.initialized = true;
        for (t, r) in batch.iter_mut().zip(&rewards) {
            t.advantage = r - mean;
        }
        return Ok(());
    }
    for (t, r) in batch.iter_mut().zip(&rewards) {
        t.advantage = r - baseline.ema_reward;
    }
    baseline.ema_reward = decay * baseline.ema_reward + (1.0 - decay) * mean;
    Ok(())
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Applies one step; returns the largest absolute parameter change.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut max_delta: f64 = 0.0;
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let delta = self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
            *p -= delta;
            max_delta = max_delta.max(delta.abs());
        }
        max_delta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped-surrogate loss over epochs.
    pub loss: f64,
    pub mean_ratio: f64,
    /// Mean ratio at the first epoch; 1 up to rounding.
    pub first_epoch_ratio: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub max_param_delta: f64,
}

struct EpochPart {
    grad: Vec<f64>,
    loss: f64,
    ratio_sum: f64,
    entropy_sum: f64,
    clipped: usize,
}

/// Runs `update_epochs` clipped-surrogate gradient steps on `batch`.
pub fn ppo_update(
    controller: &mut Controller,
    optimizer: &mut Adam,
    batch: &[Trajectory],
    cfg: &PpoConfig,
) -> Result<UpdateStats, RlError> {
    if batch.is_empty() {
        return Err(RlError::EmptyBatch);
    }
    let total_decisions: usize = batch.iter().map(|t| t.decisions.len()).sum();
    let scale = 1.0 / total_decisions as f64;
    let eps = cfg.clip_epsilon;
    let mut stats = UpdateStats::default();
    for epoch in 0..cfg.update_epochs {
        let model = &*controller;
        let parts: Vec<EpochPart> = batch
            .par_iter()
            .map(|traj| {
                let rollout = model.replay(&traj.choices());
                let a = traj.advantage;
                let n = traj.decisions.len();
                let mut logp_coef = vec![0.0; n];
                let mut part = EpochPart {
                    grad: vec![0.0; model.num_params()],
                    loss: 0.0,
                    ratio_sum: 0.0,
                    entropy_sum: 0.0,
                    clipped: 0,
                };
                for (t, d) in traj.decisions.iter().enumerate() {
                    let ratio = (rollout.log_probs[t] - d.log_prob).exp();
                    let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
                    let surrogate = (ratio * a).min(clipped_ratio * a);
                    part.loss -= surrogate * scale;
                    part.loss -= cfg.entropy_coef * rollout.entropies[t] * scale;
                    part.ratio_sum += ratio;
                    part.entropy_sum += rollout.entropies[t];
                    if (ratio - 1.0).abs() > eps {
                        part.clipped += 1;
                    }
                    // Gradient flows through the unclipped branch only while it is the active minimum.
                    let active = (a >= 0.0 && ratio < 1.0 + eps) || (a < 0.0 && ratio > 1.0 - eps);
                    if active {
                        logp_coef[t] = ratio * a * scale;
                    }
                }
                // descend on the loss, i.e. ascend on surrogate + entropy bonus
                let ent_coef = vec![cfg.entropy_coef * scale; n];
                model.backward(&rollout, &logp_coef, &ent_coef, &mut part.grad);
                part.grad.iter_mut().for_each(|g| *g = -*g);
                part
            })
            .collect();

        if let Some(bad) = parts.iter().position(|p| !p.loss.is_finite() || p.grad.iter().any(|g| !g.is_finite())) {
            return Err(RlError::NonFinite { trajectory: bad });
        }
        let mut grad = vec![0.0; controller.num_params()];
        let (mut loss, mut ratio_sum, mut entropy_sum, mut clipped) = (0.0, 0.0, 0.0, 0);
        for p in &parts {
            for (g, pg) in grad.iter_mut().zip(&p.grad) {
                *g += pg;
            }
            loss += p.loss;
            ratio_sum += p.ratio_sum;
            entropy_sum += p.entropy_sum;
            clipped += p.clipped;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.max_grad_norm {
            let k = cfg.max_grad_norm / norm;
            grad.iter_mut().for_each(|g| *g *= k);
        }
        let delta = optimizer.step(controller.params_mut(), &grad);

        let mean_ratio = ratio_sum * scale;
        if epoch == 0 {
            stats.first_epoch_ratio = mean_ratio;
        }
        let k = 1.0 / cfg.update_epochs as f64;
        stats.loss += loss * k;
        stats.mean_ratio += mean_ratio * k;
        stats.entropy += entropy_sum * scale * k;
        stats.clip_fraction += clipped as f64 * scale * k;
        stats.grad_norm += norm * k;
        stats.max_param_delta = stats.max_param_delta.max(delta);
    }
    Ok(stats)
}

/// Controller, optimizer, baseline and sampling stream of one search.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub controller: Controller,
    pub optimizer: Adam,
    pub baseline: Baseline,
    pub ppo: PpoConfig,
    pub rng: ChaCha8Rng,
    /// Index of the next architecture to sample.
    pub next_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub controller: ControllerSnapshot,
    pub optimizer: Adam,
    pub baseline: Baseline,
    pub ppo: PpoConfig,
    pub rng: ChaCha8Rng,
    pub next_index: usize,
}

/// What one sampled batch produced.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub records: Vec<SearchRecord>,
    pub stats: UpdateStats,
}

impl Trainer {
    pub fn new(space: SpaceConfig, controller: ControllerConfig, ppo: PpoConfig, seed: u64) -> Self {
        let controller = Controller::new(space, controller);
        let optimizer = Adam::new(controller.num_params(), ppo.learning_rate);
        Self {
            controller,
            optimizer,
            baseline: Baseline::default(),
            ppo,
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_index: 0,
        }
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            controller: self.controller.snapshot(),
            optimizer: self.optimizer.clone(),
            baseline: self.baseline,
            ppo: self.ppo,
            rng: self.rng.clone(),
            next_index: self.next_index,
        }
    }

    pub fn restore(state: TrainerState, space: &SpaceConfig) -> Result<Self, RlError> {
        Ok(Self {
            controller: Controller::from_snapshot(state.controller, space)?,
            optimizer: state.optimizer,
            baseline: state.baseline,
            ppo: state.ppo,
            rng: state.rng,
            next_index: state.next_index,
        })
    }

    /// Samples `count` architectures, scores them, and applies one PPO update.
    pub fn train_batch<E: Evaluator + ?Sized>(&mut self, evaluator: &E, count: usize) -> Result<BatchResult, RlError> {
        let space = *self.controller.space();
        let first = self.next_index;
        let mut batch: Vec<Trajectory> = (0..count).map(|_| self.controller.sample(&mut self.rng)).collect();
        let scored = evaluate_batch(evaluator, &space, first, batch.iter().map(|t| &t.genotype))?;
        let mut records = Vec::with_capacity(count);
        for (i, (traj, (candidate, outcome))) in batch.iter_mut().zip(scored).enumerate() {
            traj.reward = Some(outcome.reward);
            let index = first + i;
            records.push(SearchRecord::new(
                index,
                index / self.ppo.batch_size,
                Source::Controller,
                &candidate,
                outcome,
            ));
        }
        compute_advantages(&mut batch, &mut self.baseline, self.ppo.baseline_decay)?;
        let stats = ppo_update(&mut self.controller, &mut self.optimizer, &batch, &self.ppo)?;
        self.next_index += count;
        Ok(BatchResult { records, stats })
    }
}

/// Prepares and scores genotypes in parallel; ids run from `first_id`.
pub fn evaluate_batch<'a, E, I>(
    evaluator: &E,
    space: &SpaceConfig,
    first_id: usize,
    genotypes: I,
) -> Result<Vec<(Candidate, crate::eval::Outcome)>, RlError>
where
    E: Evaluator + ?Sized,
    I: Iterator<Item = &'a crate::genotype::Genotype>,
{
    let genotypes: Vec<_> = genotypes.collect();
    genotypes
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let candidate = Candidate::prepare(g, space).map_err(|e| RlError::Prepare(e.to_string()))?;
            let outcome = score(evaluator, (first_id + i) as u64, &candidate)?;
            Ok((candidate, outcome))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub records: Vec<SearchRecord>,
    pub updates: Vec<UpdateStats>,
}

/// Trains until `budget` architectures have been evaluated in total.
pub fn train_controller<E: Evaluator + ?Sized>(
    trainer: &mut Trainer,
    evaluator: &E,
    budget: usize,
) -> Result<TrainHistory, RlError> {
    let mut history = TrainHistory::default();
    while trainer.next_index < budget {
        let count = trainer.ppo.batch_size.min(budget - trainer.next_index);
        let result = trainer.train_batch(evaluator, count)?;
        history.records.extend(result.records);
        history.updates.push(result.stats);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::Genotype;
    use rand::Rng;

    fn traj(reward: f64) -> Trajectory {
        Trajectory {
            decisions: vec![],
            genotype: Genotype { templates: vec![], blocks: vec![] },
            reward: Some(reward),
            advantage: f64::NAN,
        }
    }

    #[test]
    fn advantages_equal_rewards() {
        let mut b = Baseline { ema_reward: 0.5, initialized: true };
        let mut batch = vec![traj(0.5), traj(0.5)];
        compute_advantages(&mut batch, &mut b, 0.95).unwrap();
        assert_eq!(batch.iter().map(|t| t.advantage).collect::<Vec<_>>(), vec![0.0, 0.0]);
    }

    #[test]
    fn advantage_and_ema_update() {
        let mut b = Baseline { ema_reward: 0.5, initialized: true };
        let mut batch = vec![traj(0.6)];
        compute_advantages(&mut batch, &mut b, 0.95).unwrap();
        assert!((batch[0].advantage - 0.1).abs() < 1e-12);
        assert!((b.ema_reward - 0.505).abs() < 1e-12);
    }

    #[test]
    fn first_batch_initializes() {
        let mut b = Baseline::default();
        let mut batch = vec![traj(0.2), traj(0.6)];
        compute_advantages(&mut batch, &mut b, 0.95).unwrap();
        assert!(b.initialized);
        assert!((b.ema_reward - 0.4).abs() < 1e-12);
        assert!((batch[0].advantage + 0.2).abs() < 1e-12);
        assert!((batch[1].advantage - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_and_unrewarded_batches() {
        let mut b = Baseline::default();
        assert!(matches!(compute_advantages(&mut [], &mut b, 0.95), Err(RlError::EmptyBatch)));
        let mut batch = vec![traj(0.1)];
        batch[0].reward = None;
        assert!(matches!(compute_advantages(&mut batch, &mut b, 0.95), Err(RlError::MissingReward(0))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut adam = Adam::new(3, 1e-4);
        let mut p = vec![0.3, -0.2, 0.1];
        let before = p.clone();
        assert_eq!(adam.step(&mut p, &[0.0; 3]), 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn unchanged_policy_unit_advantage() {
        // old == new and A = 1 for every decision: ratio 1, loss -1
        let space = SpaceConfig { num_blocks: 1, num_templates: 1, ..Default::default() };
        let mut c =
            Controller::new(space, ControllerConfig { hidden_size: 4, embedding_size: 2, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = c.sample(&mut rng);
        t.advantage = 1.0;
        let ppo = PpoConfig { entropy_coef: 0.0, update_epochs: 1, ..Default::default() };
        let mut adam = Adam::new(c.num_params(), ppo.learning_rate);
        let stats = ppo_update(&mut c, &mut adam, &[t], &ppo).unwrap();
        assert!((stats.first_epoch_ratio - 1.0).abs() < 1e-12);
        assert!((stats.loss + 1.0).abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    fn small_space() -> SpaceConfig {
        SpaceConfig { num_blocks: 2, num_templates: 1, ..Default::default() }
    }

    fn small_controller() -> ControllerConfig {
        ControllerConfig { hidden_size: 8, embedding_size: 4, seed: 1, ..Default::default() }
    }

    struct Constant(f64);
    impl Evaluator for Constant {
        fn evaluate(&self, _: u64, _: &crate::eval::Candidate) -> Result<crate::eval::MetricTriple, EvalError> {
            crate::eval::MetricTriple::new(self.0, self.0, self.0)
        }
    }

    #[test]
    fn zero_budget_leaves_controller_untouched() {
        let mut tr = Trainer::new(small_space(), small_controller(), PpoConfig::default(), 0);
        let before = tr.controller.params().to_vec();
        let h = train_controller(&mut tr, &Constant(0.5), 0).unwrap();
        assert!(h.records.is_empty() && h.updates.is_empty());
        assert_eq!(tr.controller.params(), &before[..]);
    }

    #[test]
    fn constant_reward_is_a_fixed_point() {
        let mut tr = Trainer::new(small_space(), small_controller(), PpoConfig::default(), 0);
        let h = train_controller(&mut tr, &Constant(0.5), 160).unwrap();
        assert_eq!(h.records.len(), 160);
        assert!(h.records.iter().all(|r| r.reward == 0.5));
        assert!(h.updates.last().unwrap().max_param_delta < 1e-6);
    }

    #[test]
    fn zero_advantage_without_entropy_is_bitwise_noop() {
        let mut c = Controller::new(small_space(), small_controller());
        // move the heads off zero so the entropy gradient would not vanish
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        c.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.5..0.5));
        let mut batch: Vec<Trajectory> = (0..4).map(|_| c.sample(&mut rng)).collect();
        batch.iter_mut().for_each(|t| t.advantage = 0.0);
        let before = c.params().to_vec();
        let ppo = PpoConfig { entropy_coef: 0.0, ..Default::default() };
        let mut adam = Adam::new(c.num_params(), ppo.learning_rate);
        let stats = ppo_update(&mut c, &mut adam, &batch, &ppo).unwrap();
        assert_eq!(c.params(), &before[..]);
        assert_eq!(stats.grad_norm, 0.0);
    }

    #[test]
    fn update_stats_are_in_range() {
        let mut tr =
            Trainer::new(small_space(), small_controller(), PpoConfig { learning_rate: 0.05, ..Default::default() }, 2);
        let ev = crate::eval::SurrogateEvaluator::new(Default::default());
        let h = train_controller(&mut tr, &ev, 320).unwrap();
        for u in &h.updates {
            assert!((0.0..=1.0).contains(&u.clip_fraction));
            assert!((u.first_epoch_ratio - 1.0).abs() < 1e-6);
        }
        // the large step size makes later epochs clip
        assert!(h.updates.iter().any(|u| u.clip_fraction > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().check().is_ok());
        assert!(PpoConfig { clip_epsilon: 1.0, ..Default::default() }.check().is_err());
        assert!(PpoConfig { baseline_decay: 0.0, ..Default::default() }.check().is_err());
    }
}
