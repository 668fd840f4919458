//! Recurrent controller emitting genotype decisions as masked categorical
//! choices.
//!
//! The controller is a single gated recurrent cell. At each step it reads
//! an embedding of the previous decision, updates its hidden state, and a
//! per-family linear head produces logits over that family's options.
//! Location heads are `2 + N` wide and masked to the current pool size.
//! Gradients are computed by hand (backprop through time) so the crate
//! stays free of a tensor runtime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genotype::{validate, AggKind, BlockDecision, Genotype, OpKind, SpaceConfig, Template, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Op,
    Agg,
    Loc,
    Template,
    Repeats,
    Stride,
}

impl Family {
    pub const ALL: [Family; 6] =
        [Family::Op, Family::Agg, Family::Loc, Family::Template, Family::Repeats, Family::Stride];

    fn index(self) -> usize {
        self as usize
    }

    /// Head width for this family in `space`.
    pub fn width(self, space: &SpaceConfig) -> usize {
        match self {
            Family::Op => OpKind::ALL.len(),
            Family::Agg => AggKind::ALL.len(),
            Family::Loc => 2 + space.num_blocks,
            Family::Template => space.num_templates,
            Family::Repeats => space.k_max,
            Family::Stride => 2,
        }
    }
}

/// One slot in the fixed decision order: family and number of legal options.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub family: Family,
    pub valid: usize,
}

/// The decision order: `M x (op1, op2, agg)`, then per block
/// `(loc1, loc2, template, repeats)` plus `stride` for the first half.
pub fn schedule(space: &SpaceConfig) -> Vec<Step> {
    let mut steps = Vec::new();
    let full = |family: Family| Step { family, valid: family.width(space) };
    for _ in 0..space.num_templates {
        steps.extend([full(Family::Op), full(Family::Op), full(Family::Agg)]);
    }
    for j in 0..space.num_blocks {
        let pool = space.pool_size_at(j);
        steps.push(Step { family: Family::Loc, valid: pool });
        steps.push(Step { family: Family::Loc, valid: pool });
        steps.push(full(Family::Template));
        steps.push(full(Family::Repeats));
        if j < space.stride_blocks() {
            steps.push(full(Family::Stride));
        }
    }
    steps
}

/// Flattens a genotype into choice indices following [`schedule`].
pub fn encode(genotype: &Genotype, space: &SpaceConfig) -> Vec<usize> {
    let mut out = Vec::new();
    for t in &genotype.templates {
        out.extend([t.op1.code(), t.op2.code(), t.agg.code()]);
    }
    for (j, b) in genotype.blocks.iter().enumerate() {
        out.extend([b.loc1, b.loc2, b.template_id, b.repeats - 1]);
        if j < space.stride_blocks() {
            out.push(b.stride - 1);
        }
    }
    out
}

/// Inverse of [`encode`]. `choices` must follow the schedule for `space`.
pub fn decode(choices: &[usize], space: &SpaceConfig) -> Genotype {
    let mut it = choices.iter().copied();
    let mut next = || it.next().expect("choice sequence shorter than schedule");
    let templates = (0..space.num_templates)
        .map(|_| {
            let op1 = OpKind::from_code(next()).expect("op code");
            let op2 = OpKind::from_code(next()).expect("op code");
            let agg = AggKind::from_code(next()).expect("agg code");
            Template::new(op1, op2, agg)
        })
        .collect();
    let blocks = (0..space.num_blocks)
        .map(|j| {
            let loc1 = next();
            let loc2 = next();
            let template_id = next();
            let repeats = next() + 1;
            let stride = if j < space.stride_blocks() { next() + 1 } else { 1 };
            BlockDecision { loc1, loc2, template_id, repeats, stride }
        })
        .collect();
    Genotype { templates, blocks }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub hidden_size: usize,
    pub embedding_size: usize,
    /// Recurrent weights and embeddings start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { hidden_size: 100, embedding_size: 32, init_range: 0.1, seed: 0 }
    }
}

/// Offsets of each parameter group in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    hidden: usize,
    embed: usize,
    start_input: usize,
    start_hidden: usize,
    /// Per family: (embedding table offset, head weight offset, head bias offset, width).
    families: [(usize, usize, usize, usize); 6],
    w_x: usize,
    w_h: usize,
    b_x: usize,
    b_h: usize,
    len: usize,
}

impl Layout {
    fn new(space: &SpaceConfig, cfg: &ControllerConfig) -> Self {
        let (h, e) = (cfg.hidden_size, cfg.embedding_size);
        let mut off = 0;
        let mut take = |n: usize| {
            let at = off;
            off += n;
            at
        };
        let start_input = take(e);
        let start_hidden = take(h);
        let w_x = take(3 * h * e);
        let w_h = take(3 * h * h);
        let b_x = take(3 * h);
        let b_h = take(3 * h);
        let mut families = [(0, 0, 0, 0); 6];
        for f in Family::ALL {
            let width = f.width(space);
            let emb = take(width * e);
            let w = take(width * h);
            let b = take(width);
            families[f.index()] = (emb, w, b, width);
        }
        Self { hidden: h, embed: e, start_input, start_hidden, families, w_x, w_h, b_x, b_h, len: off }
    }

    fn head_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        self.families.iter().map(move |&(_, w, b, width)| {
            debug_assert_eq!(b, w + width * self.hidden);
            w..b + width
        })
    }
}

/// One emitted decision with its probability bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub family: Family,
    pub choice: usize,
    pub log_prob: f64,
    pub entropy: f64,
    /// Options `0..valid` were legal; the rest had probability zero.
    pub valid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub decisions: Vec<Decision>,
    pub genotype: Genotype,
    pub reward: Option<f64>,
    pub advantage: f64,
}

impl Trajectory {
    pub fn log_prob(&self) -> f64 {
        self.decisions.iter().map(|d| d.log_prob).sum()
    }

    pub fn choices(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.choice).collect()
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid genotype: {0}")]
    Invalid(ValidationReport),
    #[error("checkpoint space config {found:?} does not match {expected:?}")]
    SpaceMismatch { expected: Box<SpaceConfig>, found: Box<SpaceConfig> },
    #[error("checkpoint format version {0} is not supported")]
    Version(u32),
    #[error("checkpoint has {found} parameters, expected {expected}")]
    ParamCount { expected: usize, found: usize },
}

/// Cached activations of one recurrent step.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    /// `W_hn h_prev + b_hn`, needed for the reset-gate gradient.
    hn: Vec<f64>,
    probs: Vec<f64>,
}

/// Teacher-forced pass over a fixed choice sequence.
#[derive(Debug, Clone)]
pub struct Rollout {
    steps: Vec<StepCache>,
    hidden: Vec<Vec<f64>>,
    choices: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub entropies: Vec<f64>,
}

impl Rollout {
    pub fn total_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }

    /// Probabilities of every option at `step` (zero beyond the mask).
    pub fn probs(&self, step: usize) -> &[f64] {
        &self.steps[step].probs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    space: SpaceConfig,
    config: ControllerConfig,
    params: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W x + b` for row-major `W` with `out.len()` rows.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for ((o, row), bias) in out.iter_mut().zip(w.chunks_exact(cols)).zip(b) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `dW += g x^T`, `db += g`, `dx += W^T g`.
fn affine_backward(w: &[f64], x: &[f64], g: &[f64], dw: &mut [f64], db: &mut [f64], dx: &mut [f64]) {
    let cols = x.len();
    for (((gi, row), drow), dbi) in g.iter().zip(w.chunks_exact(cols)).zip(dw.chunks_exact_mut(cols)).zip(db) {
        if *gi == 0.0 {
            continue;
        }
        *dbi += gi;
        for ((dwij, xj), (wij, dxj)) in drow.iter_mut().zip(x).zip(row.iter().zip(dx.iter_mut())) {
            *dwij += gi * xj;
            *dxj += gi * wij;
        }
    }
}

/// Softmax restricted to the first `valid` logits; the rest get probability 0.
fn masked_softmax(logits: &[f64], valid: usize) -> Vec<f64> {
    let max = logits[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (pi, &l) in p.iter_mut().zip(logits).take(valid) {
        *pi = (l - max).exp();
        sum += *pi;
    }
    for pi in &mut p[..valid] {
        *pi /= sum;
    }
    p
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

impl Controller {
    /// Seeded initialization. Output heads start at zero so an untrained
    /// controller samples uniformly from the legal options.
    pub fn new(space: SpaceConfig, config: ControllerConfig) -> Self {
        let layout = Layout::new(&space, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let range = config.init_range;
        let mut params: Vec<f64> = (0..layout.len).map(|_| rng.gen_range(-range..=range)).collect();
        for r in layout.head_ranges() {
            params[r].iter_mut().for_each(|p| *p = 0.0);
        }
        Self { space, config, params }
    }

    pub fn space(&self) -> &SpaceConfig {
        &self.space
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.space, &self.config)
    }

    pub fn schedule(&self) -> Vec<Step> {
        schedule(&self.space)
    }

    /// Recurrent step: returns the cache (with masked probabilities) and the new hidden state.
    fn step(&self, layout: &Layout, x: &[f64], h_prev: &[f64], family: Family, valid: usize) -> (StepCache, Vec<f64>) {
        let h = layout.hidden;
        let e = layout.embed;
        let p = &self.params;
        let mut gx = vec![0.0; 3 * h];
        let mut gh = vec![0.0; 3 * h];
        affine(&p[layout.w_x..layout.w_x + 3 * h * e], &p[layout.b_x..layout.b_x + 3 * h], x, &mut gx);
        affine(&p[layout.w_h..layout.w_h + 3 * h * h], &p[layout.b_h..layout.b_h + 3 * h], h_prev, &mut gh);
        let mut r = vec![0.0; h];
        let mut z = vec![0.0; h];
        let mut n = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for i in 0..h {
            r[i] = sigmoid(gx[i] + gh[i]);
            z[i] = sigmoid(gx[h + i] + gh[h + i]);
            n[i] = (gx[2 * h + i] + r[i] * gh[2 * h + i]).tanh();
            h_new[i] = (1.0 - z[i]) * n[i] + z[i] * h_prev[i];
        }
        let (_, w, b, width) = layout.families[family.index()];
        let mut logits = vec![0.0; width];
        affine(&p[w..w + width * h], &p[b..b + width], &h_new, &mut logits);
        let probs = masked_softmax(&logits, valid);
        let cache = StepCache { x: x.to_vec(), h_prev: h_prev.to_vec(), r, z, n, hn: gh[2 * h..].to_vec(), probs };
        (cache, h_new)
    }

    fn embedding(&self, layout: &Layout, family: Family, choice: usize) -> &[f64] {
        let (emb, _, _, _) = layout.families[family.index()];
        let e = layout.embed;
        &self.params[emb + choice * e..emb + (choice + 1) * e]
    }

    fn run<F>(&self, mut choose: F) -> Rollout
    where
        F: FnMut(usize, &[f64]) -> usize,
    {
        let layout = self.layout();
        let steps = self.schedule();
        let mut x = self.params[layout.start_input..layout.start_input + layout.embed].to_vec();
        let mut h = self.params[layout.start_hidden..layout.start_hidden + layout.hidden].to_vec();
        let mut rollout = Rollout {
            steps: Vec::with_capacity(steps.len()),
            hidden: Vec::with_capacity(steps.len()),
            choices: Vec::with_capacity(steps.len()),
            log_probs: Vec::with_capacity(steps.len()),
            entropies: Vec::with_capacity(steps.len()),
        };
        for (t, s) in steps.iter().enumerate() {
            let (cache, h_new) = self.step(&layout, &x, &h, s.family, s.valid);
            let choice = choose(t, &cache.probs);
            assert!(choice < s.valid, "choice {choice} outside mask {} at step {t}", s.valid);
            rollout.log_probs.push(cache.probs[choice].ln());
            rollout.entropies.push(entropy(&cache.probs));
            rollout.choices.push(choice);
            rollout.steps.push(cache);
            rollout.hidden.push(h_new.clone());
            x = self.embedding(&layout, s.family, choice).to_vec();
            h = h_new;
        }
        rollout
    }

    /// Draws one genotype.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Trajectory {
        let rollout = self.run(|_, probs| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    last = i;
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
            }
            last
        });
        self.trajectory(rollout)
    }

    /// Most likely option at every step, lowest index on ties.
    pub fn greedy(&self) -> Trajectory {
        let rollout = self.run(|_, probs| {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        });
        self.trajectory(rollout)
    }

    fn trajectory(&self, rollout: Rollout) -> Trajectory {
        let steps = self.schedule();
        let decisions = steps
            .iter()
            .enumerate()
            .map(|(t, s)| Decision {
                family: s.family,
                choice: rollout.choices[t],
                log_prob: rollout.log_probs[t],
                entropy: rollout.entropies[t],
                valid: s.valid,
            })
            .collect();
        let genotype = decode(&rollout.choices, &self.space);
        Trajectory { decisions, genotype, reward: None, advantage: 0.0 }
    }

    /// Teacher-forced pass over `choices` under the current parameters.
    pub fn replay(&self, choices: &[usize]) -> Rollout {
        assert_eq!(choices.len(), self.schedule().len(), "choice sequence length");
        self.run(|t, _| choices[t])
    }

    /// Total log-probability and per-decision entropies of `genotype`.
    pub fn log_prob_of(&self, genotype: &Genotype) -> Result<(f64, Vec<f64>), PolicyError> {
        let report = validate(genotype, &self.space);
        if !report.is_ok() {
            return Err(PolicyError::Invalid(report));
        }
        let rollout = self.replay(&encode(genotype, &self.space));
        Ok((rollout.total_log_prob(), rollout.entropies))
    }

    /// Accumulates into `grad` the gradient of
    /// `sum_t logp_coef[t] * log_prob[t] + entropy_coef[t] * entropy[t]`.
    pub fn backward(&self, rollout: &Rollout, logp_coef: &[f64], entropy_coef: &[f64], grad: &mut [f64]) {
        let layout = self.layout();
        let (h, e) = (layout.hidden, layout.embed);
        let steps = self.schedule();
        let p = &self.params;
        let mut dh_next = vec![0.0; h];
        let mut dlogits = Vec::new();
        let mut dx = vec![0.0; e];
        let mut dgx = vec![0.0; 3 * h];
        let mut dgh = vec![0.0; 3 * h];
        for t in (0..steps.len()).rev() {
            let s = steps[t];
            let cache = &rollout.steps[t];
            let probs = &cache.probs;
            let choice = rollout.choices[t];
            let ent = rollout.entropies[t];

            // d/dlogit of log p[choice] is onehot - p; of the entropy, -p (ln p + H).
            dlogits.clear();
            dlogits.extend(probs.iter().enumerate().map(|(i, &pi)| {
                if i >= s.valid {
                    return 0.0;
                }
                let onehot = if i == choice { 1.0 } else { 0.0 };
                let d_ent = if pi > 0.0 { -pi * (pi.ln() + ent) } else { 0.0 };
                logp_coef[t] * (onehot - pi) + entropy_coef[t] * d_ent
            }));

            let (_, w, b, width) = layout.families[s.family.index()];
            let mut dh = dh_next.clone();
            {
                let (before, after) = grad.split_at_mut(b);
                affine_backward(
                    &p[w..w + width * h],
                    &rollout.hidden[t],
                    &dlogits,
                    &mut before[w..w + width * h],
                    &mut after[..width],
                    &mut dh,
                );
            }

            // h = (1 - z) n + z h_prev
            let mut dh_prev = vec![0.0; h];
            for i in 0..h {
                let (r, z, n) = (cache.r[i], cache.z[i], cache.n[i]);
                let dn = dh[i] * (1.0 - z);
                let dz = dh[i] * (cache.h_prev[i] - n);
                dh_prev[i] = dh[i] * z;
                let da_n = dn * (1.0 - n * n);
                let dr = da_n * cache.hn[i];
                let da_r = dr * r * (1.0 - r);
                let da_z = dz * z * (1.0 - z);
                dgx[i] = da_r;
                dgx[h + i] = da_z;
                dgx[2 * h + i] = da_n;
                dgh[i] = da_r;
                dgh[h + i] = da_z;
                dgh[2 * h + i] = da_n * r;
            }

            dx.iter_mut().for_each(|v| *v = 0.0);
            {
                let (before, after) = grad.split_at_mut(layout.b_x);
                affine_backward(
                    &p[layout.w_x..layout.w_x + 3 * h * e],
                    &cache.x,
                    &dgx,
                    &mut before[layout.w_x..layout.w_x + 3 * h * e],
                    &mut after[..3 * h],
                    &mut dx,
                );
            }
            {
                let (before, after) = grad.split_at_mut(layout.b_h);
                affine_backward(
                    &p[layout.w_h..layout.w_h + 3 * h * h],
                    &cache.h_prev,
                    &dgh,
                    &mut before[layout.w_h..layout.w_h + 3 * h * h],
                    &mut after[..3 * h],
                    &mut dh_prev,
                );
            }

            let x_offset = if t == 0 {
                layout.start_input
            } else {
                let prev = steps[t - 1];
                layout.families[prev.family.index()].0 + rollout.choices[t - 1] * e
            };
            for (g, d) in grad[x_offset..x_offset + e].iter_mut().zip(&dx) {
                *g += d;
            }
            dh_next = dh_prev;
        }
        for (g, d) in grad[layout.start_hidden..layout.start_hidden + h].iter_mut().zip(&dh_next) {
            *g += d;
        }
    }

    /// Gradient of the total log-probability of `genotype`.
    pub fn grad_log_prob(&self, genotype: &Genotype) -> Result<(f64, Vec<f64>), PolicyError> {
        let report = validate(genotype, &self.space);
        if !report.is_ok() {
            return Err(PolicyError::Invalid(report));
        }
        let rollout = self.replay(&encode(genotype, &self.space));
        let n = rollout.log_probs.len();
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&rollout, &vec![1.0; n], &vec![0.0; n], &mut grad);
        Ok((rollout.total_log_prob(), grad))
    }

    pub fn snapshot(&self) -> ControllerSnapshot {
        ControllerSnapshot {
            version: SNAPSHOT_VERSION,
            space: self.space,
            config: self.config,
            params: self.params.clone(),
        }
    }

    /// Restores a snapshot, refusing one taken for a different space.
    pub fn from_snapshot(snapshot: ControllerSnapshot, space: &SpaceConfig) -> Result<Self, PolicyError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(PolicyError::Version(snapshot.version));
        }
        if snapshot.space != *space {
            return Err(PolicyError::SpaceMismatch { expected: Box::new(*space), found: Box::new(snapshot.space) });
        }
        let expected = Layout::new(space, &snapshot.config).len;
        if snapshot.params.len() != expected {
            return Err(PolicyError::ParamCount { expected, found: snapshot.params.len() });
        }
        Ok(Self { space: snapshot.space, config: snapshot.config, params: snapshot.params })
    }
}

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSnapshot {
    pub version: u32,
    pub space: SpaceConfig,
    pub config: ControllerConfig,
    pub params: Vec<f64>,
}
