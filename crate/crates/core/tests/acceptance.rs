//! Acceptance suite: one PASS/FAIL line per criterion; exits non-zero if
//! any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segnas::analysis::median;
use segnas::eval::{EvalError, MetricTriple};
use segnas::log::{read_log, Source};
use segnas::policy::{encode, schedule};
use segnas::search::{random_records, rerank_experiment, run_search, sample_records, RunConfig, LOG_FILE};
use segnas::{
    compile, count_params, decision_count, spearman, template_universe, validate, AggKind, Candidate, Controller,
    ControllerConfig, Encoding, Evaluator, Genotype, OpKind, PpoConfig, SpaceConfig, SurrogateConfig,
    SurrogateEvaluator, Trainer,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = f();
    let elapsed = start.elapsed();
    out.detail = format!("{} [{:.2?}]", out.detail, elapsed);
    if let Some(limit) = limit {
        if elapsed > limit {
            out.pass = false;
            out.detail = format!("{} exceeds {:?}", out.detail, limit);
        }
    }
    out
}

fn random_genotypes(space: &SpaceConfig, count: usize, seed: u64) -> Vec<Genotype> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| common::random_genotype(space, &mut rng)).collect()
}

fn template_universe_size() -> Outcome {
    let u = template_universe(6, 2);
    let distinct: std::collections::HashSet<_> = u.iter().collect();
    let canonical = u.iter().all(|t| t.is_canonical());
    outcome(
        u.len() == 42 && distinct.len() == 42 && canonical,
        format!("{} templates, {} distinct", u.len(), distinct.len()),
    )
}

fn decision_counts() -> Outcome {
    let space = SpaceConfig::default();
    let (b, t, f) = (
        decision_count(&space, Encoding::Baseline),
        decision_count(&space, Encoding::Template),
        decision_count(&space, Encoding::TemplateWithRepeatsStrides),
    );
    let controller = Controller::new(space, ControllerConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emitted: Vec<usize> = (0..100).map(|_| controller.sample(&mut rng).decisions.len()).collect();
    let all_forty = emitted.iter().all(|&n| n == 40);
    outcome(
        (b, t, f) == (35, 30, 40) && schedule(&space).len() == 40 && all_forty,
        format!("baseline {b}, template {t}, full {f}; sampler emits 40 decisions in 100/100 episodes: {all_forty}"),
    )
}

fn downsampling_bound() -> Outcome {
    let space = SpaceConfig::default();
    let controller = Controller::new(space, ControllerConfig { seed: 3, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = [0usize; 4];
    let mut outside = 0;
    let n = 10_000;
    for _ in 0..n {
        let g = controller.sample(&mut rng).genotype;
        let factor = compile(&g, &space).unwrap().downsample_factor();
        match factor {
            1 | 2 | 4 | 8 => counts[factor.trailing_zeros() as usize] += 1,
            _ => outside += 1,
        }
    }
    let expected = [1.0, 3.0, 3.0, 1.0].map(|w| w / 8.0 * n as f64);
    let chi2: f64 = counts.iter().zip(expected).map(|(&o, e)| (o as f64 - e).powi(2) / e).sum();
    // chi-square critical value, 3 degrees of freedom, alpha 0.01
    let critical = 11.3449;
    outcome(
        outside == 0 && chi2 < critical,
        format!("counts {counts:?}, {outside} outside {{1,2,4,8}}, chi2 {chi2:.3} < {critical}"),
    )
}

fn graph_invariants() -> Outcome {
    let space = SpaceConfig::default();
    let mut violations = Vec::new();
    for (i, g) in random_genotypes(&space, 1000, 11).iter().enumerate() {
        match compile(g, &space) {
            Ok(graph) => {
                violations.extend(common::graph_violations(g, &space, &graph).into_iter().map(|v| format!("#{i}: {v}")))
            }
            Err(e) => violations.push(format!("#{i}: {e}")),
        }
    }
    outcome(violations.is_empty(), format!("1000 genotypes, {} violations {:?}", violations.len(), violations.first()))
}

fn swap_dilation(g: &Genotype) -> Genotype {
    let mut out = g.clone();
    for t in &mut out.templates {
        for op in [&mut t.op1, &mut t.op2] {
            *op = match *op {
                OpKind::SepConv5x5 => OpKind::SepConv5x5Dil6,
                OpKind::SepConv5x5Dil6 => OpKind::SepConv5x5,
                other => other,
            };
        }
    }
    out
}

fn cost_exactness() -> Outcome {
    let space = SpaceConfig::default();
    let (mut mismatches, mut dilation) = (0, 0);
    for g in random_genotypes(&space, 100, 21) {
        let counted = count_params(&compile(&g, &space).unwrap(), &space).params_generated;
        if counted != common::oracle_params(&g, &space) {
            mismatches += 1;
        }
        let swapped = count_params(&compile(&swap_dilation(&g), &space).unwrap(), &space).params_generated;
        if swapped != counted {
            dilation += 1;
        }
    }
    outcome(
        mismatches == 0 && dilation == 0,
        format!("oracle mismatches {mismatches}/100, dilation-variant {dilation}/100"),
    )
}

fn all_sequences(space: &SpaceConfig) -> Vec<Vec<usize>> {
    schedule(space).iter().fold(vec![Vec::new()], |acc, step| {
        acc.into_iter()
            .flat_map(|prefix| {
                (0..step.valid).map(move |c| {
                    let mut next = prefix.clone();
                    next.push(c);
                    next
                })
            })
            .collect()
    })
}

fn perturb(c: &mut Controller, seed: u64) {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    c.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.5..0.5));
}

fn policy_correctness() -> Outcome {
    let small = SpaceConfig { num_blocks: 1, num_templates: 1, ..Default::default() };
    let mut c = Controller::new(small, ControllerConfig { hidden_size: 8, embedding_size: 4, ..Default::default() });
    perturb(&mut c, 5);
    let sequences = all_sequences(&small);
    let total: f64 = sequences.iter().map(|s| c.replay(s).total_log_prob().exp()).sum();

    let space = SpaceConfig::default();
    let mut c =
        Controller::new(space, ControllerConfig { hidden_size: 8, embedding_size: 4, seed: 2, ..Default::default() });
    perturb(&mut c, 6);
    let g = random_genotypes(&space, 1, 31).remove(0);
    let (_, analytic) = c.grad_log_prob(&g).unwrap();
    let h = 1e-5;
    let mut probe = c.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.log_prob_of(&g).unwrap().0;
        probe.params_mut()[i] = orig - h;
        let down = probe.log_prob_of(&g).unwrap().0;
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6));
    }
    outcome(
        (total - 1.0).abs() < 1e-6 && worst < 1e-4,
        format!(
            "{} sequences sum to {total:.12}; gradient max relative error {worst:.2e} over {} params",
            sequences.len(),
            analytic.len()
        ),
    )
}

/// Rewards only template 0's aggregation: head 0 (sum) pays 1, concat
/// pays almost nothing. Every other decision is irrelevant.
struct AggregationBandit;

impl Evaluator for AggregationBandit {
    fn evaluate(&self, _: u64, c: &Candidate) -> Result<MetricTriple, EvalError> {
        let m = if c.genotype.templates[0].agg == AggKind::Sum { 1.0 } else { 1e-9 };
        MetricTriple::new(m, m, m)
    }
}

/// Marginal probability that template 0 uses `sum`.
fn prob_sum(c: &Controller) -> f64 {
    let base = c.greedy().choices();
    let mut total = 0.0;
    for a in 0..6 {
        for b in 0..6 {
            let mut choices = base.clone();
            choices[0] = a;
            choices[1] = b;
            let r = c.replay(&choices);
            total += r.probs(0)[a] * r.probs(1)[b] * r.probs(2)[0];
        }
    }
    total
}

fn bandit_sanity() -> Outcome {
    let space = SpaceConfig::default();
    let mut trainer = Trainer::new(space, ControllerConfig { seed: 7, ..Default::default() }, PpoConfig::default(), 7);
    let initial = prob_sum(&trainer.controller);
    let mut reached = None;
    for update in 1..=200 {
        trainer.train_batch(&AggregationBandit, 16).unwrap();
        if reached.is_none() && prob_sum(&trainer.controller) >= 0.95 {
            reached = Some(update);
        }
    }
    let last = prob_sum(&trainer.controller);
    outcome(
        reached.is_some() && last >= 0.95,
        format!("p(rewarding arm) {initial:.3} -> {last:.4}; first >= 0.95 at update {reached:?}"),
    )
}

struct SearchRun {
    dir: tempfile::TempDir,
    cfg: RunConfig,
    trained: Controller,
}

fn surrogate_search() -> SearchRun {
    let mut cfg = RunConfig::default().with_seed(7);
    cfg.search.budget = 2000;
    cfg.ppo.batch_size = 16;
    let dir = tempfile::tempdir().unwrap();
    let ev = SurrogateEvaluator::new(cfg.surrogate);
    run_search(dir.path(), &cfg, &ev).unwrap();
    let state: segnas::rl::TrainerState =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(segnas::search::CHECKPOINT_FILE)).unwrap())
            .unwrap();
    let trained = Trainer::restore(state, &cfg.space).unwrap().controller;
    SearchRun { dir, cfg, trained }
}

fn ppo_search_criteria(run: &SearchRun) -> (Outcome, Outcome) {
    let log = read_log(&run.dir.path().join(LOG_FILE)).unwrap();
    let rewards: Vec<f64> = log.iter().map(|r| r.reward).collect();
    let first = median(&rewards[..200]).unwrap();
    let last = median(&rewards[rewards.len() - 200..]).unwrap();
    let a =
        outcome(log.len() == 2000 && last > first, format!("median reward first 200 {first:.4}, last 200 {last:.4}"));

    let ev = SurrogateEvaluator::new(run.cfg.surrogate);
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.search.seed);
    let controller = sample_records(&run.trained, &mut rng, &ev, 2000, 20, Source::Controller, 16).unwrap();
    let random = random_records(&run.cfg, 20, &ev).unwrap();
    let mean = |v: &[segnas::SearchRecord]| v.iter().map(|r| r.reward).sum::<f64>() / v.len() as f64;
    let (mc, mr) = (mean(&controller), mean(&random));
    let b = outcome(
        mc - mr >= 0.05,
        format!("controller mean {mc:.4}, random mean {mr:.4}, gap {:.4} (need >= 0.05)", mc - mr),
    );
    (a, b)
}

fn rank_correlation() -> Outcome {
    let hand = [
        spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(),
        spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap(),
    ];
    let exact = (hand[0] - 1.0).abs() < 1e-12 && (hand[1] + 1.0).abs() < 1e-12 && (hand[2] - 0.8).abs() < 1e-12;
    let cfg = RunConfig::default().with_seed(7);
    let genotypes: Vec<Genotype> = random_records(&cfg, 20, &SurrogateEvaluator::new(cfg.surrogate))
        .unwrap()
        .into_iter()
        .map(|r| r.genotype)
        .collect();
    let short = SurrogateEvaluator::new(cfg.surrogate);
    let long = SurrogateEvaluator::new(SurrogateConfig::longer_training(&cfg.surrogate));
    let rho = rerank_experiment(&genotypes, &cfg.space, &short, &long).unwrap().spearman().unwrap();
    outcome(exact && rho > 0.7, format!("hand cases {hand:?}; rerank of 20 genotypes rho {rho:.4} (need > 0.7)"))
}

fn serialization_integrity(run: &SearchRun) -> Outcome {
    let space = SpaceConfig::default();
    let roundtrip_failures = random_genotypes(&space, 1000, 41)
        .iter()
        .filter(|g| Genotype::load(&g.to_json(), &space).ok().as_ref() != Some(*g) || encode(g, &space).len() != 40)
        .count();
    let log = read_log(&run.dir.path().join(LOG_FILE)).unwrap();
    let mut bad = 0;
    for r in &log {
        let ok = validate(&r.genotype, &run.cfg.space).is_ok()
            && Candidate::prepare(&r.genotype, &run.cfg.space)
                .map(|c| c.summary == r.summary && c.cost.params_generated == r.params_generated)
                .unwrap_or(false);
        if !ok {
            bad += 1;
        }
    }
    outcome(
        roundtrip_failures == 0 && bad == 0 && !log.is_empty(),
        format!(
            "genotype roundtrip failures {roundtrip_failures}/1000; log records failing recompile {bad}/{}",
            log.len()
        ),
    )
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, out: Outcome| {
        println!("{} {name}: {}", if out.pass { "PASS" } else { "FAIL" }, out.detail);
        results.push((name, out));
    };
    report("template universe", timed(Some(Duration::from_secs(1)), template_universe_size));
    report("decision counts", timed(None, decision_counts));
    report("downsampling bound", timed(Some(Duration::from_secs(30)), downsampling_bound));
    report("graph invariants", timed(None, graph_invariants));
    report("cost exactness", timed(None, cost_exactness));
    report("policy correctness", timed(None, policy_correctness));

    let ppo_start = Instant::now();
    let bandit = timed(None, bandit_sanity);
    let run = surrogate_search();
    let (median_rise, sample_gap) = ppo_search_criteria(&run);
    let ppo_elapsed = ppo_start.elapsed();
    report("ppo learning: bandit sanity", bandit);
    report("ppo learning: median reward rises", median_rise);
    report("ppo learning: controller beats random by 0.05", sample_gap);
    let limit = Duration::from_secs(300);
    report("ppo learning: runtime", outcome(ppo_elapsed < limit, format!("{ppo_elapsed:.2?} (limit {limit:?})")));

    report("rank correlation", timed(None, rank_correlation));
    report("serialization and log integrity", timed(None, || serialization_integrity(&run)));

    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
