//! Search orchestration: controller search with checkpoint/resume, the
//! random-search baseline, and the short/long re-ranking experiment.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `config.json` | the [`RunConfig`] the run was started with |
//! | `search_log.jsonl` | one [`SearchRecord`] per architecture |
//! | `checkpoint.json` | [`TrainerState`] written atomically every `checkpoint_every` architectures |
//! | `summary.json` | the final [`SearchSummary`] |

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::eval::{EvalError, Evaluator, ExternalConfig, ExternalEvaluator, SurrogateConfig, SurrogateEvaluator};
use crate::genotype::{ConfigError, Genotype, SpaceConfig};
use crate::log::{self, LogError, LogWriter, SearchRecord, Source};
use crate::policy::{Controller, ControllerConfig};
use crate::rl::{evaluate_batch, PpoConfig, RlError, Trainer, TrainerState};

pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "search_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Total architectures to evaluate.
    pub budget: usize,
    /// Seeds controller sampling.
    pub seed: u64,
    pub checkpoint_every: usize,
    pub best_k: usize,
    /// Window, in architectures, for the summary time series.
    pub window: usize,
    /// Evaluation threads; 0 uses all cores.
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { budget: 2000, seed: 0, checkpoint_every: 100, best_k: 5, window: 100, workers: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorSpec {
    #[default]
    Surrogate,
    External {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

fn default_timeout() -> f64 {
    ExternalConfig::new(Vec::new()).timeout_secs
}

/// Everything a run depends on; snapshotted into the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub space: SpaceConfig,
    pub controller: ControllerConfig,
    pub ppo: PpoConfig,
    pub surrogate: SurrogateConfig,
    pub search: SearchConfig,
    pub evaluator: EvaluatorSpec,
}

impl RunConfig {
    /// Applies one seed to controller init, sampling and surrogate noise.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.controller.seed = seed;
        self.search.seed = seed;
        self.surrogate.seed = seed;
        self
    }

    pub fn check(&self) -> Result<(), SearchError> {
        self.space.check()?;
        self.ppo.check()?;
        if self.search.checkpoint_every == 0 || self.search.window == 0 || self.search.best_k == 0 {
            return Err(SearchError::Config("checkpoint_every, window and best_k must be positive".into()));
        }
        Ok(())
    }

    pub fn build_evaluator(&self) -> Result<Box<dyn Evaluator>, EvalError> {
        Ok(match &self.evaluator {
            EvaluatorSpec::Surrogate => Box::new(SurrogateEvaluator::new(self.surrogate)),
            EvaluatorSpec::External { command, timeout_secs } => Box::new(ExternalEvaluator::spawn(ExternalConfig {
                command: command.clone(),
                timeout_secs: *timeout_secs,
            })?),
        })
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Space(#[from] ConfigError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("run directory was started with a different configuration")]
    ConfigMismatch,
    #[error("re-ranking needs at least 3 genotypes, got {0}")]
    TooFewGenotypes(usize),
}

impl SearchError {
    /// True when the evaluator itself could not be reached or restarted.
    pub fn is_evaluator_failure(&self) -> bool {
        matches!(self, SearchError::Rl(RlError::Eval(_)))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SearchError + '_ {
    move |source| SearchError::Io { path: path.to_path_buf(), source }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SearchError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| SearchError::Json { path: path.to_path_buf(), source })
}

/// Writes to a sibling temp file, then renames over `path`.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), SearchError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SearchError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub architectures: usize,
    /// Highest-reward records, best first; ties go to the earlier index.
    pub best: Vec<SearchRecord>,
    pub window: usize,
    pub median_reward_per_window: Vec<f64>,
    /// Per window, shares of factors `1, 2, 4, ...`.
    pub downsampling_proportions: Vec<Vec<f64>>,
}

pub fn best_records(records: &[SearchRecord], k: usize) -> Vec<SearchRecord> {
    let mut sorted: Vec<&SearchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.index.cmp(&b.index)));
    sorted.into_iter().take(k).cloned().collect()
}

pub fn summarize_records(records: &[SearchRecord], space: &SpaceConfig, search: &SearchConfig) -> SearchSummary {
    let (medians, proportions) = if records.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (
            analysis::median_per_window(records, search.window).expect("positive window"),
            analysis::downsampling_proportions(records, search.window, space.stride_blocks())
                .expect("compiled graphs have bounded factors"),
        )
    };
    SearchSummary {
        architectures: records.len(),
        best: best_records(records, search.best_k),
        window: search.window,
        median_reward_per_window: medians,
        downsampling_proportions: proportions,
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Loads the checkpoint in `dir` if one exists, dropping log records the
/// checkpoint does not cover.
fn resume_or_start(dir: &Path, cfg: &RunConfig) -> Result<Trainer, SearchError> {
    let config_path = dir.join(CONFIG_FILE);
    let log_path = dir.join(LOG_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    if config_path.exists() {
        let mut previous: RunConfig = read_json(&config_path)?;
        // a resumed run may extend its budget or change parallelism
        previous.search.budget = cfg.search.budget;
        previous.search.workers = cfg.search.workers;
        if previous != *cfg {
            return Err(SearchError::ConfigMismatch);
        }
    }
    write_json(&config_path, cfg)?;
    let trainer = if checkpoint_path.exists() {
        let state: TrainerState = read_json(&checkpoint_path)?;
        Trainer::restore(state, &cfg.space)?
    } else {
        Trainer::new(cfg.space, cfg.controller, cfg.ppo, cfg.search.seed)
    };
    let kept: Vec<SearchRecord> = if log_path.exists() {
        log::read_log(&log_path)?.into_iter().filter(|r| r.index < trainer.next_index).collect()
    } else {
        Vec::new()
    };
    let tmp = log_path.with_extension("tmp");
    log::write_log(&tmp, &kept)?;
    fs::rename(&tmp, &log_path).map_err(io_err(&log_path))?;
    Ok(trainer)
}

/// Trains the controller in `dir` until the budget is spent, resuming from
/// the directory's checkpoint when present. On an evaluator failure the log
/// keeps every completed batch and the error is returned.
pub fn run_search<E: Evaluator + ?Sized>(
    dir: &Path,
    cfg: &RunConfig,
    evaluator: &E,
) -> Result<SearchSummary, SearchError> {
    cfg.check()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut trainer = resume_or_start(dir, cfg)?;
    let log_path = dir.join(LOG_FILE);
    let checkpoint_path = dir.join(CHECKPOINT_FILE);
    let mut writer = LogWriter::append(&log_path)?;
    let every = cfg.search.checkpoint_every;
    let budget = cfg.search.budget;

    with_workers(cfg.search.workers, || -> Result<(), SearchError> {
        while trainer.next_index < budget {
            let before = trainer.next_index;
            let count = trainer.ppo.batch_size.min(budget - before);
            let batch = trainer.train_batch(evaluator, count)?;
            for r in &batch.records {
                writer.write(r)?;
            }
            if trainer.next_index / every > before / every || trainer.next_index >= budget {
                write_json(&checkpoint_path, &trainer.state())?;
            }
        }
        Ok(())
    })?;

    let records = log::read_log(&log_path)?;
    let summary = summarize_records(&records, &cfg.space, &cfg.search);
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Samples `count` architectures from `controller` and scores them with ids
/// `first_id..`.
pub fn sample_records<E: Evaluator + ?Sized>(
    controller: &Controller,
    rng: &mut ChaCha8Rng,
    evaluator: &E,
    first_id: usize,
    count: usize,
    source: Source,
    batch_size: usize,
) -> Result<Vec<SearchRecord>, SearchError> {
    let space = *controller.space();
    let genotypes: Vec<Genotype> = (0..count).map(|_| controller.sample(rng).genotype).collect();
    let scored = evaluate_batch(evaluator, &space, first_id, genotypes.iter())?;
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (candidate, outcome))| {
            let index = first_id + i;
            SearchRecord::new(index, index / batch_size.max(1), source, &candidate, outcome)
        })
        .collect())
}

/// Random-search baseline: `count` draws from the untrained controller,
/// which is the masked-uniform prior over the search space.
pub fn random_records<E: Evaluator + ?Sized>(
    cfg: &RunConfig,
    count: usize,
    evaluator: &E,
) -> Result<Vec<SearchRecord>, SearchError> {
    cfg.check()?;
    let controller = Controller::new(cfg.space, cfg.controller);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.search.seed);
    with_workers(cfg.search.workers, || {
        sample_records(&controller, &mut rng, evaluator, 0, count, Source::Random, cfg.ppo.batch_size)
    })
}

/// [`random_records`] written to a run directory with a log and summary.
pub fn run_random<E: Evaluator + ?Sized>(
    dir: &Path,
    cfg: &RunConfig,
    count: usize,
    evaluator: &E,
) -> Result<Vec<SearchRecord>, SearchError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let records = random_records(cfg, count, evaluator)?;
    log::write_log(&dir.join(LOG_FILE), &records)?;
    write_json(&dir.join(SUMMARY_FILE), &summarize_records(&records, &cfg.space, &cfg.search))?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRewards {
    pub genotypes: Vec<Genotype>,
    pub short: Vec<f64>,
    pub long: Vec<f64>,
}

impl PairedRewards {
    pub fn spearman(&self) -> Result<f64, AnalysisError> {
        analysis::spearman(&self.short, &self.long)
    }
}

/// Scores each genotype under both evaluators. Per-genotype evaluator
/// errors score 0; only fatal errors abort.
pub fn rerank_experiment<S: Evaluator + ?Sized, L: Evaluator + ?Sized>(
    genotypes: &[Genotype],
    space: &SpaceConfig,
    short: &S,
    long: &L,
) -> Result<PairedRewards, SearchError> {
    if genotypes.len() < 3 {
        return Err(SearchError::TooFewGenotypes(genotypes.len()));
    }
    let score_all = |ev: &dyn Fn(usize, &Genotype) -> Result<f64, SearchError>| -> Result<Vec<f64>, SearchError> {
        genotypes.iter().enumerate().map(|(i, g)| ev(i, g)).collect()
    };
    let short = score_all(&|i, g| Ok(evaluate_batch(short, space, i, std::iter::once(g))?[0].1.reward))?;
    let long = score_all(&|i, g| Ok(evaluate_batch(long, space, i, std::iter::once(g))?[0].1.reward))?;
    Ok(PairedRewards { genotypes: genotypes.to_vec(), short, long })
}

/// Distinct genotypes of the `k` best records, best first.
pub fn top_distinct_genotypes(records: &[SearchRecord], k: usize) -> Vec<Genotype> {
    let mut out: Vec<Genotype> = Vec::new();
    for r in best_records(records, records.len()) {
        if out.len() == k {
            break;
        }
        if !out.contains(&r.genotype) {
            out.push(r.genotype);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricTriple;

    fn small_cfg(budget: usize) -> RunConfig {
        let mut cfg = RunConfig::default().with_seed(3);
        cfg.search.budget = budget;
        cfg
    }

    #[test]
    fn budget_bookkeeping() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(200);
        let ev = SurrogateEvaluator::new(cfg.surrogate);
        let summary = run_search(dir.path(), &cfg, &ev).unwrap();
        let log = log::read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(log.len(), 200);
        assert!(log.windows(2).all(|w| w[0].index < w[1].index));
        assert_eq!(summary.architectures, 200);
        assert_eq!(summary.median_reward_per_window.len(), 2);
        for p in &summary.downsampling_proportions {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        assert!(dir.path().join(SUMMARY_FILE).exists());
    }

    #[test]
    fn best_k_are_top_of_log() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(64);
        let summary = run_search(dir.path(), &cfg, &SurrogateEvaluator::new(cfg.surrogate)).unwrap();
        let mut rewards: Vec<f64> =
            log::read_log(&dir.path().join(LOG_FILE)).unwrap().iter().map(|r| r.reward).collect();
        rewards.sort_by(|a, b| b.total_cmp(a));
        let best: Vec<f64> = summary.best.iter().map(|r| r.reward).collect();
        assert_eq!(best, rewards[..5]);
    }

    /// Surrogate that becomes unreachable after `limit` evaluations.
    struct FailAfter {
        inner: SurrogateEvaluator,
        limit: usize,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl Evaluator for FailAfter {
        fn evaluate(&self, id: u64, c: &crate::eval::Candidate) -> Result<MetricTriple, EvalError> {
            if self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst) >= self.limit {
                return Err(EvalError::Spawn("killed".into()));
            }
            self.inner.evaluate(id, c)
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = small_cfg(200);
        let ev = SurrogateEvaluator::new(cfg.surrogate);
        let full = tempfile::tempdir().unwrap();
        run_search(full.path(), &cfg, &ev).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let dying = FailAfter { inner: SurrogateEvaluator::new(cfg.surrogate), limit: 144, calls: Default::default() };
        assert!(run_search(dir.path(), &cfg, &dying).unwrap_err().is_evaluator_failure());
        assert_eq!(log::read_log(&dir.path().join(LOG_FILE)).unwrap().len(), 144);
        let state: TrainerState = read_json(&dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(state.next_index, 112);

        run_search(dir.path(), &cfg, &ev).unwrap();
        let resumed = log::read_log(&dir.path().join(LOG_FILE)).unwrap();
        let reference = log::read_log(&full.path().join(LOG_FILE)).unwrap();
        let indices: Vec<usize> = resumed.iter().map(|r| r.index).collect();
        assert_eq!(indices, (0..200).collect::<Vec<_>>());
        assert_eq!(resumed, reference);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(16);
        let ev = SurrogateEvaluator::new(cfg.surrogate);
        run_search(dir.path(), &cfg, &ev).unwrap();
        let other = small_cfg(16).with_seed(4);
        assert!(matches!(run_search(dir.path(), &other, &ev), Err(SearchError::ConfigMismatch)));
    }

    #[test]
    fn random_is_seeded_and_tagged() {
        let cfg = small_cfg(0);
        let ev = SurrogateEvaluator::new(cfg.surrogate);
        let a = random_records(&cfg, 20, &ev).unwrap();
        let b = random_records(&cfg, 20, &ev).unwrap();
        assert_eq!(a.len(), 20);
        assert!(a.iter().all(|r| r.source == Source::Random));
        assert_eq!(
            a.iter().map(|r| &r.genotype).collect::<Vec<_>>(),
            b.iter().map(|r| &r.genotype).collect::<Vec<_>>()
        );
    }

    struct Fixed(f64);
    impl Evaluator for Fixed {
        fn evaluate(&self, _: u64, _: &crate::eval::Candidate) -> Result<MetricTriple, EvalError> {
            MetricTriple::new(self.0, self.0, self.0)
        }
    }

    struct Fatal;
    impl Evaluator for Fatal {
        fn evaluate(&self, _: u64, _: &crate::eval::Candidate) -> Result<MetricTriple, EvalError> {
            Err(EvalError::Spawn("gone".into()))
        }
    }

    #[test]
    fn rerank_pairs_and_identical_evaluators() {
        let cfg = small_cfg(0);
        let genotypes: Vec<Genotype> =
            random_records(&cfg, 10, &Fixed(0.5)).unwrap().into_iter().map(|r| r.genotype).collect();
        let ev = SurrogateEvaluator::new(SurrogateConfig { noise_sigma: 0.0, ..Default::default() });
        let paired = rerank_experiment(&genotypes, &cfg.space, &ev, &ev).unwrap();
        assert_eq!(paired.short, paired.long);
        assert!(matches!(
            rerank_experiment(&genotypes[..2], &cfg.space, &ev, &ev),
            Err(SearchError::TooFewGenotypes(2))
        ));
    }

    #[test]
    fn fatal_evaluator_aborts_with_partial_log() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(32);
        let err = run_search(dir.path(), &cfg, &Fatal).unwrap_err();
        assert!(err.is_evaluator_failure());
        assert!(log::read_log(&dir.path().join(LOG_FILE)).unwrap().is_empty());
    }

    #[test]
    fn top_distinct_skips_duplicates() {
        let cfg = small_cfg(0);
        let mut recs = random_records(&cfg, 4, &Fixed(0.5)).unwrap();
        recs[1].genotype = recs[0].genotype.clone();
        recs[1].reward = 0.9;
        recs[0].reward = 0.8;
        let top = top_distinct_genotypes(&recs, 2);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0], recs[0].genotype);
        assert_ne!(top[1], recs[0].genotype);
    }
}
