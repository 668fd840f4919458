use std::fs;
use std::io::Write;
use std::path::Path;

use segnas::analysis::{self, GroupStats, Grouping};
use segnas::cost::{cost_report, REFERENCE_INPUT_HW};
use segnas::log::{read_log, SearchRecord};
use segnas::search::{self, PairedRewards, RunConfig, SearchSummary};
use segnas::{compile, count_params, Candidate, SpaceConfig, SurrogateEvaluator};
use serde::Serialize;

use crate::config::{load_genotype, load_run_config, load_space, parse_evaluator, read};
use crate::error::CliError;
use crate::{Report, RunArgs};

type Out<'a> = &'a mut dyn Write;

fn io(e: std::io::Error) -> CliError {
    CliError::Usage(format!("cannot write output: {e}"))
}

fn json_line<T: Serialize>(out: Out, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(io)
}

/// Config file first, then command-line overrides.
fn run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = load_run_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(spec) = &args.evaluator {
        cfg.evaluator = parse_evaluator(spec)?;
    }
    if let Some(w) = args.workers {
        cfg.search.workers = w;
    }
    cfg.check().map_err(CliError::from)?;
    Ok(cfg)
}

fn print_summary(out: Out, summary: &SearchSummary, dir: &Path) -> Result<(), CliError> {
    writeln!(out, "architectures: {}", summary.architectures).map_err(io)?;
    writeln!(out, "run directory: {}", dir.display()).map_err(io)?;
    writeln!(out, "best:").map_err(io)?;
    writeln!(out, "  {:>6} {:>8} {:>10} {:>6}", "index", "reward", "params", "factor").map_err(io)?;
    for r in &summary.best {
        writeln!(out, "  {:>6} {:>8.4} {:>10} {:>6}", r.index, r.reward, r.params(), r.downsample_factor())
            .map_err(io)?;
    }
    writeln!(out, "median reward per {} architectures:", summary.window).map_err(io)?;
    for (i, m) in summary.median_reward_per_window.iter().enumerate() {
        writeln!(out, "  {:>4} {:.4}", i, m).map_err(io)?;
    }
    Ok(())
}

pub fn search(out: Out, args: &RunArgs, budget: Option<usize>) -> Result<(), CliError> {
    let mut cfg = run_config(args)?;
    if let Some(b) = budget {
        cfg.search.budget = b;
    }
    let evaluator = cfg.build_evaluator()?;
    let summary = search::run_search(&args.out, &cfg, evaluator.as_ref())?;
    print_summary(out, &summary, &args.out)
}

pub fn random(out: Out, args: &RunArgs, count: usize) -> Result<(), CliError> {
    let cfg = run_config(args)?;
    let evaluator = cfg.build_evaluator()?;
    let records = search::run_random(&args.out, &cfg, count, evaluator.as_ref())?;
    let summary = search::summarize_records(&records, &cfg.space, &cfg.search);
    print_summary(out, &summary, &args.out)
}

fn prepare(genotype: &Path, config: Option<&Path>) -> Result<(SpaceConfig, Candidate), CliError> {
    let space = load_space(config)?;
    let g = load_genotype(genotype, &space)?;
    let cand = Candidate::prepare(&g, &space).map_err(|e| CliError::Validation(e.to_string()))?;
    Ok((space, cand))
}

pub fn decode(out: Out, genotype: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let (_, cand) = prepare(genotype, config)?;
    let g = &cand.genotype;
    let used = g.used_template_slots();
    writeln!(out, "templates:").map_err(io)?;
    for (i, t) in g.templates.iter().enumerate() {
        let mark = if used.contains(&i) { "" } else { " (unused)" };
        writeln!(out, "  T{i}: {} + {} -> {}{mark}", t.op1, t.op2, t.agg).map_err(io)?;
    }
    writeln!(out, "blocks:").map_err(io)?;
    for (j, b) in g.blocks.iter().enumerate() {
        writeln!(
            out,
            "  B{j}: inputs ({}, {}) template T{} repeats {} stride {}",
            b.loc1, b.loc2, b.template_id, b.repeats, b.stride
        )
        .map_err(io)?;
    }
    let s = &cand.summary;
    writeln!(out, "strided blocks: {}", g.num_strided_blocks()).map_err(io)?;
    writeln!(out, "downsample factor: {}", s.downsample_factor).map_err(io)?;
    writeln!(out, "output resolution: 1/{}", 1u64 << s.output_down_exp).map_err(io)?;
    writeln!(out, "nodes: {}", s.num_nodes).map_err(io)?;
    writeln!(out, "params: {} ({} generated)", s.params, cand.cost.params_generated).map_err(io)?;
    let (h, w) = REFERENCE_INPUT_HW;
    writeln!(out, "flops @ {h}x{w}: {}", s.flops).map_err(io)
}

pub fn inspect(
    out: Out,
    genotype: &Path,
    hw: Option<(u64, u64)>,
    config: Option<&Path>,
    json: bool,
) -> Result<(), CliError> {
    let space = load_space(config)?;
    let g = load_genotype(genotype, &space)?;
    let graph = compile(&g, &space).map_err(|e| CliError::Validation(e.to_string()))?;
    let report = match hw {
        Some(hw) => cost_report(&graph, &space, hw).map_err(|e| CliError::Validation(e.to_string()))?,
        None => count_params(&graph, &space),
    };
    if json {
        json_line(out, &report)
    } else {
        writeln!(out, "{report}").map_err(io)
    }
}

pub fn export_dot(out: Out, genotype: &Path, dest: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let (_, cand) = prepare(genotype, config)?;
    fs::write(dest, cand.graph.to_dot())
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", dest.display())))?;
    writeln!(out, "wrote {} ({} nodes)", dest.display(), cand.graph.nodes.len()).map_err(io)
}

pub struct AnalyzeOptions {
    pub min_reward: Option<f64>,
    pub window: usize,
    pub bucket: u64,
    pub top: usize,
    pub json: bool,
}

#[derive(Debug, Serialize)]
struct WindowStats {
    window: usize,
    first_index: usize,
    sampled: usize,
    /// Rewards at or above the floor.
    kept: usize,
    min: Option<f64>,
    q1: Option<f64>,
    median: Option<f64>,
    q3: Option<f64>,
    max: Option<f64>,
}

fn window_stats(records: &[SearchRecord], opts: &AnalyzeOptions) -> Vec<WindowStats> {
    records
        .chunks(opts.window)
        .enumerate()
        .map(|(i, chunk)| {
            let kept: Vec<f64> =
                chunk.iter().map(|r| r.reward).filter(|&r| opts.min_reward.is_none_or(|m| r >= m)).collect();
            let q = |p| analysis::quantile(&kept, p);
            WindowStats {
                window: i,
                first_index: chunk[0].index,
                sampled: chunk.len(),
                kept: kept.len(),
                min: q(0.0),
                q1: q(0.25),
                median: q(0.5),
                q3: q(0.75),
                max: q(1.0),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn group_table(out: Out, title: &str, groups: &[GroupStats]) -> Result<(), CliError> {
    writeln!(out, "{title}").map_err(io)?;
    writeln!(
        out,
        "  {:<32} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "group", "count", "mean", "min", "q1", "median", "q3", "max"
    )
    .map_err(io)?;
    for g in groups {
        writeln!(
            out,
            "  {:<32} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            g.key.to_string(),
            g.count,
            g.mean,
            g.min,
            g.q1,
            g.median,
            g.q3,
            g.max
        )
        .map_err(io)?;
    }
    Ok(())
}

fn analysis_err(e: analysis::AnalysisError) -> CliError {
    CliError::Validation(e.to_string())
}

fn load_records(path: &Path) -> Result<Vec<SearchRecord>, CliError> {
    let records = read_log(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(CliError::Validation(format!("{}: empty log", path.display())));
    }
    Ok(records)
}

pub fn analyze(
    out: Out,
    log: &Path,
    report: Report,
    opts: &AnalyzeOptions,
    config: Option<&Path>,
) -> Result<(), CliError> {
    if opts.window == 0 {
        return Err(CliError::Usage("--window must be positive".into()));
    }
    if let Report::Spearman = report {
        let paired: PairedRewards =
            serde_json::from_str(&read(log)?).map_err(|e| CliError::Validation(format!("{}: {e}", log.display())))?;
        let rho = paired.spearman().map_err(analysis_err)?;
        return if opts.json {
            json_line(out, &serde_json::json!({ "n": paired.short.len(), "spearman": rho }))
        } else {
            writeln!(out, "architectures: {}\nspearman: {rho:.4}", paired.short.len()).map_err(io)
        };
    }
    let records = load_records(log)?;
    let floor = opts.min_reward.map_or_else(|| "none".to_string(), |m| format!("{m}"));
    match report {
        Report::Rewards => {
            let rows = window_stats(&records, opts);
            if opts.json {
                return json_line(out, &rows);
            }
            writeln!(out, "reward per {} architectures (floor {floor})", opts.window).map_err(io)?;
            writeln!(
                out,
                "  {:>6} {:>6} {:>7} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
                "window", "first", "sampled", "kept", "min", "q1", "median", "q3", "max"
            )
            .map_err(io)?;
            for r in rows {
                writeln!(
                    out,
                    "  {:>6} {:>6} {:>7} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8}",
                    r.window,
                    r.first_index,
                    r.sampled,
                    r.kept,
                    opt(r.min),
                    opt(r.q1),
                    opt(r.median),
                    opt(r.q3),
                    opt(r.max)
                )
                .map_err(io)?;
            }
            Ok(())
        }
        Report::Strides => {
            let space = load_space(config)?;
            let strides = space.stride_blocks();
            let rows = analysis::downsampling_proportions(&records, opts.window, strides).map_err(analysis_err)?;
            let groups = analysis::reward_by_group(&records, Grouping::DownsampleFactor, opts.min_reward)
                .map_err(analysis_err)?;
            if opts.json {
                let factors: Vec<u64> = (0..=strides).map(|s| 1u64 << s).collect();
                return json_line(
                    out,
                    &serde_json::json!({ "factors": factors, "window": opts.window, "proportions": rows, "reward_by_factor": groups }),
                );
            }
            writeln!(out, "downsampling proportions per {} architectures", opts.window).map_err(io)?;
            let header: String = (0..=strides).map(|s| format!(" {:>7}", format!("x{}", 1u64 << s))).collect();
            writeln!(out, "  {:>6}{header}", "window").map_err(io)?;
            for (i, row) in rows.iter().enumerate() {
                let cells: String = row.iter().map(|p| format!(" {p:>7.4}")).collect();
                writeln!(out, "  {i:>6}{cells}").map_err(io)?;
            }
            group_table(out, &format!("reward by downsampling factor (floor {floor})"), &groups)
        }
        Report::Params => {
            let groups = analysis::reward_by_group(&records, Grouping::ParamBucket(opts.bucket), opts.min_reward)
                .map_err(analysis_err)?;
            if opts.json {
                return json_line(out, &groups);
            }
            group_table(out, &format!("reward by total parameters (floor {floor})"), &groups)
        }
        Report::Templates => {
            let groups =
                analysis::reward_by_group(&records, Grouping::Template, opts.min_reward).map_err(analysis_err)?;
            let top = analysis::top_templates(&records, opts.top, opts.min_reward).map_err(analysis_err)?;
            if opts.json {
                return json_line(out, &serde_json::json!({ "groups": groups, "top": top }));
            }
            group_table(out, &format!("reward by template (floor {floor})"), &groups)?;
            writeln!(out, "top {} templates by mean reward", opts.top).map_err(io)?;
            for t in top {
                writeln!(
                    out,
                    "  #{:<3} {} + {} -> {}  mean {:.4} over {}",
                    t.universe_index, t.template.op1, t.template.op2, t.template.agg, t.mean_reward, t.count
                )
                .map_err(io)?;
            }
            Ok(())
        }
        Report::Spearman => unreachable!("handled above"),
    }
}

/// Scores the best distinct genotypes of a log under the short surrogate
/// and its longer-training variant, and writes the paired rewards.
pub fn rerank(
    out: Out,
    log: &Path,
    count: usize,
    dest: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_run_config(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let records = load_records(log)?;
    let genotypes = search::top_distinct_genotypes(&records, count);
    let short = SurrogateEvaluator::new(cfg.surrogate);
    let long = SurrogateEvaluator::new(cfg.surrogate.longer_training());
    let paired = search::rerank_experiment(&genotypes, &cfg.space, &short, &long)?;
    let rho = paired.spearman().map_err(analysis_err)?;
    let mut doc = serde_json::to_value(&paired).expect("serializable");
    doc["spearman"] = serde_json::json!(rho);
    let text = serde_json::to_string_pretty(&doc).expect("serializable");
    fs::write(dest, text + "\n").map_err(|e| CliError::Usage(format!("cannot write {}: {e}", dest.display())))?;
    writeln!(out, "architectures: {}", paired.short.len()).map_err(io)?;
    writeln!(out, "  {:>4} {:>8} {:>8}", "rank", "short", "long").map_err(io)?;
    for (i, (s, l)) in paired.short.iter().zip(&paired.long).enumerate() {
        writeln!(out, "  {i:>4} {s:>8.4} {l:>8.4}").map_err(io)?;
    }
    writeln!(out, "spearman: {rho:.4}").map_err(io)?;
    writeln!(out, "wrote {}", dest.display()).map_err(io)
}
