//! Diagnostics over search logs: rank correlation, downsampling-factor
//! proportions through time, and reward distributions per group.
//!
//! Every function is a pure function of its input records.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genotype::{universe_index, Template};
use crate::log::SearchRecord;

/// Reward floor applied by default to distribution reports.
pub const DEFAULT_MIN_REWARD: f64 = 0.40;
pub const DEFAULT_PARAM_BUCKET: u64 = 50_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("window must be positive")]
    Window,
    #[error("k must be positive")]
    TopK,
    #[error("empty log")]
    EmptyLog,
    #[error("param bucket width must be positive")]
    BucketWidth,
    #[error("record {index}: downsample factor {factor} outside 1..={max}")]
    Factor { index: usize, factor: u64, max: u64 },
    #[error("unknown grouping {0:?} (expected factor, params or template)")]
    UnknownGrouping(String),
}

/// 1-based ranks; tied values share the average of their positions.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn has_ties(values: &[f64]) -> bool {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.windows(2).any(|w| w[0] == w[1])
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rank correlation. Uses the closed form when neither input has
/// ties and Pearson correlation of average ranks otherwise. A constant input
/// yields 0.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() {
        return Err(AnalysisError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalysisError::TooFew(x.len()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    if has_ties(x) || has_ties(y) {
        return Ok(pearson(&rx, &ry));
    }
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Median reward of each run of `window` consecutive records. The last
/// window may be shorter.
pub fn median_per_window(records: &[SearchRecord], window: usize) -> Result<Vec<f64>, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::Window);
    }
    Ok(records
        .chunks(window)
        .map(|c| median(&c.iter().map(|r| r.reward).collect::<Vec<_>>()).expect("non-empty chunk"))
        .collect())
}

/// Share of each downsampling factor `2^0 ..= 2^max_strides` per window.
/// Each row sums to 1; the last window may be shorter.
pub fn downsampling_proportions(
    records: &[SearchRecord],
    window: usize,
    max_strides: usize,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if window == 0 {
        return Err(AnalysisError::Window);
    }
    if records.is_empty() {
        return Err(AnalysisError::EmptyLog);
    }
    let max = 1u64 << max_strides;
    let mut rows = Vec::new();
    for chunk in records.chunks(window) {
        let mut counts = vec![0usize; max_strides + 1];
        for r in chunk {
            let f = r.downsample_factor();
            if !f.is_power_of_two() || f > max {
                return Err(AnalysisError::Factor { index: r.index, factor: f, max });
            }
            counts[f.trailing_zeros() as usize] += 1;
        }
        rows.push(counts.iter().map(|&c| c as f64 / chunk.len() as f64).collect());
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    DownsampleFactor,
    /// Buckets of `params_total` of the given width.
    ParamBucket(u64),
    Template,
}

impl std::str::FromStr for Grouping {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "factor" | "downsample_factor" => Ok(Self::DownsampleFactor),
            "params" | "param_bucket" => Ok(Self::ParamBucket(DEFAULT_PARAM_BUCKET)),
            "template" | "template_id" => Ok(Self::Template),
            other => Err(AnalysisError::UnknownGrouping(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Factor(u64),
    /// Bucket index; covers `[i * width, (i + 1) * width)`.
    Bucket {
        index: u64,
        width: u64,
    },
    /// Canonical template and its position in the template universe.
    Template {
        universe_index: usize,
        template: Template,
    },
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupKey::Factor(x) => write!(f, "x{x}"),
            GroupKey::Bucket { index, width } => write!(f, "{}-{}", index * width, (index + 1) * width),
            GroupKey::Template { universe_index, template } => {
                write!(f, "#{universe_index} {}+{} {}", template.op1.name(), template.op2.name(), template.agg.name())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub key: GroupKey,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl GroupStats {
    fn from_rewards(key: GroupKey, rewards: &[f64]) -> Self {
        let q = |p| quantile(rewards, p).expect("non-empty group");
        Self {
            key,
            count: rewards.len(),
            mean: rewards.iter().sum::<f64>() / rewards.len() as f64,
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
        }
    }
}

/// Canonical templates an architecture actually uses (referenced by at
/// least one block), deduplicated.
pub fn used_templates(record: &SearchRecord) -> Vec<Template> {
    let mut out: Vec<Template> = record
        .genotype
        .used_template_slots()
        .into_iter()
        .filter_map(|slot| record.genotype.templates.get(slot))
        .map(|t| t.canonical())
        .collect();
    out.sort_by_key(|&t| universe_index(t));
    out.dedup();
    out
}

fn group_keys(record: &SearchRecord, grouping: Grouping) -> Vec<GroupKey> {
    match grouping {
        Grouping::DownsampleFactor => vec![GroupKey::Factor(record.downsample_factor())],
        Grouping::ParamBucket(width) => vec![GroupKey::Bucket { index: record.params() / width, width }],
        Grouping::Template => used_templates(record)
            .into_iter()
            .map(|t| GroupKey::Template { universe_index: universe_index(t), template: t })
            .collect(),
    }
}

/// Reward distribution per group, over records with reward `>= min_reward`.
/// For template grouping one architecture contributes its reward to every
/// distinct template it uses.
pub fn reward_by_group(
    records: &[SearchRecord],
    grouping: Grouping,
    min_reward: Option<f64>,
) -> Result<Vec<GroupStats>, AnalysisError> {
    if let Grouping::ParamBucket(0) = grouping {
        return Err(AnalysisError::BucketWidth);
    }
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| min_reward.is_none_or(|m| r.reward >= m)) {
        for key in group_keys(r, grouping) {
            groups.entry(key).or_default().push(r.reward);
        }
    }
    Ok(groups.into_iter().map(|(k, v)| GroupStats::from_rewards(k, &v)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template: Template,
    pub universe_index: usize,
    pub mean_reward: f64,
    pub count: usize,
}

/// The `k` templates with the highest mean reward; ties go to the larger
/// count, then the lower universe index.
pub fn top_templates(
    records: &[SearchRecord],
    k: usize,
    min_reward: Option<f64>,
) -> Result<Vec<TemplateScore>, AnalysisError> {
    if k == 0 {
        return Err(AnalysisError::TopK);
    }
    let mut scores: Vec<TemplateScore> = reward_by_group(records, Grouping::Template, min_reward)?
        .into_iter()
        .map(|g| match g.key {
            GroupKey::Template { universe_index, template } => {
                TemplateScore { template, universe_index, mean_reward: g.mean, count: g.count }
            }
            _ => unreachable!("template grouping yields template keys"),
        })
        .collect();
    scores.sort_by(|a, b| {
        b.mean_reward
            .total_cmp(&a.mean_reward)
            .then(b.count.cmp(&a.count))
            .then(a.universe_index.cmp(&b.universe_index))
    });
    scores.truncate(k);
    Ok(scores)
}
