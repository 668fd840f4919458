//! Search-space grammar: operations, aggregations, templates and block
//! decisions, plus validation and the JSON genotype format.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single operation applied to one template input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep3x3")]
    SepConv3x3,
    #[serde(rename = "sep5x5")]
    SepConv5x5,
    #[serde(rename = "gap1x1")]
    GapConv1x1,
    #[serde(rename = "maxpool3x3")]
    MaxPool3x3,
    #[serde(rename = "sep5x5d6")]
    SepConv5x5Dil6,
    #[serde(rename = "skip")]
    Skip,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::GapConv1x1,
        OpKind::MaxPool3x3,
        OpKind::SepConv5x5Dil6,
        OpKind::Skip,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep3x3",
            OpKind::SepConv5x5 => "sep5x5",
            OpKind::GapConv1x1 => "gap1x1",
            OpKind::MaxPool3x3 => "maxpool3x3",
            OpKind::SepConv5x5Dil6 => "sep5x5d6",
            OpKind::Skip => "skip",
        }
    }

    /// Whether the operation can change the channel count on its own.
    /// Pooling and identity need a 1x1 projection when channels differ.
    pub fn is_channel_preserving(self) -> bool {
        matches!(self, OpKind::MaxPool3x3 | OpKind::Skip)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a template merges its two intermediate outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Sum,
    Concat,
}

impl AggKind {
    pub const ALL: [AggKind; 2] = [AggKind::Sum, AggKind::Concat];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Concat => "concat",
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two operations and an aggregation. `op1` binds to the block's first
/// input, `op2` to the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Template {
    pub op1: OpKind,
    pub op2: OpKind,
    pub agg: AggKind,
}

impl Template {
    pub fn new(op1: OpKind, op2: OpKind, agg: AggKind) -> Self {
        Self { op1, op2, agg }
    }

    /// Order-insensitive form used when counting unique templates.
    pub fn canonical(self) -> Self {
        if self.op1 <= self.op2 {
            self
        } else {
            Self { op1: self.op2, op2: self.op1, agg: self.agg }
        }
    }

    pub fn is_canonical(self) -> bool {
        self.op1 <= self.op2
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.op1, self.op2, self.agg)
    }
}

/// Structural decisions for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockDecision {
    pub loc1: usize,
    pub loc2: usize,
    #[serde(rename = "template")]
    pub template_id: usize,
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub templates: Vec<Template>,
    pub blocks: Vec<BlockDecision>,
}

/// Size and width parameters of the search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpaceConfig {
    pub num_blocks: usize,
    pub num_templates: usize,
    pub k_max: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub num_classes: usize,
    pub stem_param_count: u64,
    /// Follow each concatenation with a 1x1 conv back to the template width.
    pub concat_reduce: bool,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            num_blocks: 7,
            num_templates: 3,
            k_max: 4,
            base_channels: 48,
            channel_multiplier: 2,
            num_classes: 19,
            stem_param_count: 60_000,
            concat_reduce: true,
        }
    }
}

impl SpaceConfig {
    /// Blocks `0..stride_blocks()` carry a stride decision.
    pub fn stride_blocks(&self) -> usize {
        self.num_blocks / 2
    }

    /// Number of entries in the sampling pool when block `j` is built.
    pub fn pool_size_at(&self, block: usize) -> usize {
        STEM_OUTPUTS + block
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        let fields = [
            ("num_blocks", self.num_blocks),
            ("num_templates", self.num_templates),
            ("k_max", self.k_max),
            ("base_channels", self.base_channels),
            ("channel_multiplier", self.channel_multiplier),
            ("num_classes", self.num_classes),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(ConfigError::NonPositive(name));
            }
        }
        Ok(())
    }
}

/// Two stem tensors seed the pool.
pub const STEM_OUTPUTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
}

/// One broken structural rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    TemplateCount { expected: usize, found: usize },
    BlockCount { expected: usize, found: usize },
    Location { block: usize, slot: u8, loc: usize, pool_size: usize },
    TemplateIndex { block: usize, template_id: usize, num_templates: usize },
    Repeats { block: usize, repeats: usize, k_max: usize },
    StrideValue { block: usize, stride: usize },
    StrideInSecondHalf { block: usize, first_fixed: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::TemplateCount { expected, found } => {
                write!(f, "expected {expected} templates, found {found}")
            }
            Violation::BlockCount { expected, found } => {
                write!(f, "expected {expected} blocks, found {found}")
            }
            Violation::Location { block, slot, loc, pool_size } => {
                write!(f, "loc{slot} ≥ pool size {pool_size} at block {block} (got {loc})")
            }
            Violation::TemplateIndex { block, template_id, num_templates } => {
                write!(f, "template id {template_id} out of range for {num_templates} templates at block {block}")
            }
            Violation::Repeats { block, repeats, k_max } => {
                write!(f, "repeats {repeats} outside 1..={k_max} at block {block}")
            }
            Violation::StrideValue { block, stride } => {
                write!(f, "stride {stride} not in {{1, 2}} at block {block}")
            }
            Violation::StrideInSecondHalf { block, first_fixed } => {
                write!(f, "stride must be 1 for block ≥ {first_fixed} (block {block})")
            }
        }
    }
}

/// Outcome of [`validate`]; an empty list means the genotype is legal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

pub fn validate(genotype: &Genotype, cfg: &SpaceConfig) -> ValidationReport {
    let mut violations = Vec::new();
    if genotype.templates.len() != cfg.num_templates {
        violations.push(Violation::TemplateCount { expected: cfg.num_templates, found: genotype.templates.len() });
    }
    if genotype.blocks.len() != cfg.num_blocks {
        violations.push(Violation::BlockCount { expected: cfg.num_blocks, found: genotype.blocks.len() });
    }
    let num_templates = genotype.templates.len();
    let first_fixed = cfg.stride_blocks();
    for (j, b) in genotype.blocks.iter().enumerate() {
        let pool_size = cfg.pool_size_at(j);
        for (slot, loc) in [(1u8, b.loc1), (2u8, b.loc2)] {
            if loc >= pool_size {
                violations.push(Violation::Location { block: j, slot, loc, pool_size });
            }
        }
        if b.template_id >= num_templates {
            violations.push(Violation::TemplateIndex { block: j, template_id: b.template_id, num_templates });
        }
        if b.repeats == 0 || b.repeats > cfg.k_max {
            violations.push(Violation::Repeats { block: j, repeats: b.repeats, k_max: cfg.k_max });
        }
        if b.stride != 1 && b.stride != 2 {
            violations.push(Violation::StrideValue { block: j, stride: b.stride });
        } else if b.stride == 2 && j >= first_fixed {
            violations.push(Violation::StrideInSecondHalf { block: j, first_fixed });
        }
    }
    ValidationReport { violations }
}

/// Ways of writing an architecture down as a decision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    /// Two locations and three per-block operation choices.
    Baseline,
    /// Locations plus template id per block, three choices per template.
    Template,
    /// [`Encoding::Template`] plus repeats per block and stride for the
    /// first half of the blocks. This is what the controller emits.
    TemplateWithRepeatsStrides,
}

pub fn decision_count(cfg: &SpaceConfig, encoding: Encoding) -> usize {
    let n = cfg.num_blocks;
    let m = cfg.num_templates;
    match encoding {
        Encoding::Baseline => (2 + 3) * n,
        Encoding::Template => (2 + 1) * n + 3 * m,
        Encoding::TemplateWithRepeatsStrides => 3 * m + 4 * n + cfg.stride_blocks(),
    }
}

/// All canonical templates over the first `num_ops` operations and
/// `num_aggs` aggregations, ordered by `(op1, op2, agg)` code.
///
/// Panics if `num_ops` is not in `1..=6` or `num_aggs` not in `1..=2`.
pub fn template_universe(num_ops: usize, num_aggs: usize) -> Vec<Template> {
    assert!((1..=OpKind::ALL.len()).contains(&num_ops), "num_ops out of range: {num_ops}");
    assert!((1..=AggKind::ALL.len()).contains(&num_aggs), "num_aggs out of range: {num_aggs}");
    let ops = &OpKind::ALL[..num_ops];
    let aggs = &AggKind::ALL[..num_aggs];
    let mut out = Vec::with_capacity(num_ops * (num_ops + 1) / 2 * num_aggs);
    for (i, &op1) in ops.iter().enumerate() {
        for &op2 in &ops[i..] {
            for &agg in aggs {
                out.push(Template { op1, op2, agg });
            }
        }
    }
    out
}

/// Position of a template's canonical form in the full 42-entry universe.
pub fn universe_index(template: Template) -> usize {
    let t = template.canonical();
    let n = OpKind::ALL.len();
    let a = t.op1.code();
    let b = t.op2.code();
    // pairs (i, j) with i < a, plus offset of b within row a
    let row_start = a * n - a * (a.saturating_sub(1)) / 2;
    (row_start + (b - a)) * AggKind::ALL.len() + t.agg.code()
}

#[derive(Debug, Error)]
pub enum GenotypeError {
    #[error("genotype parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid genotype: {0}")]
    Invalid(ValidationReport),
}

impl Genotype {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serialization cannot fail")
    }

    /// Parses the genotype format without checking it against a space.
    pub fn from_json(text: &str) -> Result<Self, GenotypeError> {
        serde_json::from_str(text).map_err(|e| GenotypeError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    /// Parses and validates against `cfg`.
    pub fn load(text: &str, cfg: &SpaceConfig) -> Result<Self, GenotypeError> {
        let g = Self::from_json(text)?;
        let report = validate(&g, cfg);
        if report.is_ok() {
            Ok(g)
        } else {
            Err(GenotypeError::Invalid(report))
        }
    }

    pub fn num_strided_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| b.stride == 2).count()
    }

    /// Templates referenced by at least one block, deduplicated by slot.
    pub fn used_template_slots(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.blocks.iter().map(|b| b.template_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
