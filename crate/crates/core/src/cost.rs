//! Parameter counts and a FLOP proxy for compiled graphs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::genotype::{AggKind, OpKind, SpaceConfig};
use crate::graph::{GraphIR, NodeId, NodeKind};

/// Reference input (height, width) for the FLOP figure in graph summaries.
pub const REFERENCE_INPUT_HW: (u64, u64) = (1024, 2048);

/// Learnable terms added per normalized output channel (scale and shift).
const NORM_TERMS: u64 = 2;

fn plain_conv(kernel: u64, c_in: u64, c_out: u64) -> u64 {
    kernel * kernel * c_in * c_out + NORM_TERMS * c_out
}

/// Depthwise k x k (normalized) then pointwise (normalized).
fn separable_conv(kernel: u64, c_in: u64, c_out: u64) -> u64 {
    kernel * kernel * c_in + NORM_TERMS * c_in + c_in * c_out + NORM_TERMS * c_out
}

/// Multiply-accumulate weights of a layer: its parameters minus
/// normalization and bias terms.
fn conv_weights(kind: NodeKind, c_in: u64, c_out: u64, num_classes: u64) -> u64 {
    match kind {
        NodeKind::Transform1x1 | NodeKind::Reduce1x1 | NodeKind::ConcatReduce1x1 => c_in * c_out,
        NodeKind::Op(op) => match op {
            OpKind::SepConv3x3 => 9 * c_in + c_in * c_out,
            OpKind::SepConv5x5 | OpKind::SepConv5x5Dil6 => 25 * c_in + c_in * c_out,
            OpKind::GapConv1x1 => c_in * c_out,
            OpKind::MaxPool3x3 | OpKind::Skip if c_in != c_out => c_in * c_out,
            OpKind::MaxPool3x3 | OpKind::Skip => 0,
        },
        NodeKind::Classifier3x3 => 9 * c_in * num_classes,
        NodeKind::StemSeed | NodeKind::Aggregate(_) | NodeKind::Align(_) | NodeKind::ConcatHead => 0,
    }
}

/// Parameter count of one node given its total input and output widths.
pub fn layer_params(kind: NodeKind, c_in: usize, c_out: usize, cfg: &SpaceConfig) -> u64 {
    let (c_in, c_out) = (c_in as u64, c_out as u64);
    match kind {
        NodeKind::Transform1x1 | NodeKind::Reduce1x1 | NodeKind::ConcatReduce1x1 => plain_conv(1, c_in, c_out),
        NodeKind::Op(op) => match op {
            OpKind::SepConv3x3 => separable_conv(3, c_in, c_out),
            // dilation widens the receptive field without adding weights
            OpKind::SepConv5x5 | OpKind::SepConv5x5Dil6 => separable_conv(5, c_in, c_out),
            OpKind::GapConv1x1 => c_in * c_out + NORM_TERMS * c_out,
            OpKind::MaxPool3x3 | OpKind::Skip if c_in != c_out => plain_conv(1, c_in, c_out),
            OpKind::MaxPool3x3 | OpKind::Skip => 0,
        },
        NodeKind::Classifier3x3 => {
            let classes = cfg.num_classes as u64;
            9 * c_in * classes + classes
        }
        NodeKind::Aggregate(AggKind::Sum | AggKind::Concat)
        | NodeKind::StemSeed
        | NodeKind::Align(_)
        | NodeKind::ConcatHead => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub kind: String,
    pub c_in: usize,
    pub c_out: usize,
    pub down_exp: u32,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_total: u64,
    pub params_generated: u64,
    /// `(height, width, flops)` when a FLOP figure was requested.
    pub flops_at: Option<(u64, u64, u64)>,
    pub per_node: Vec<NodeCost>,
    pub output_down_exp: u32,
    pub downsample_factor: u64,
}

impl CostReport {
    pub fn output_resolution(&self) -> String {
        format!("1/{}", 1u64 << self.output_down_exp)
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>5}  {:<18} {:>6} {:>6} {:>6} {:>10}", "node", "kind", "c_in", "c_out", "res", "params")?;
        for n in self.per_node.iter().filter(|n| n.params > 0) {
            writeln!(
                f,
                "{:>5}  {:<18} {:>6} {:>6} {:>6} {:>10}",
                n.node,
                n.kind,
                n.c_in,
                n.c_out,
                format!("1/{}", 1u64 << n.down_exp),
                n.params
            )?;
        }
        writeln!(f, "generated params: {}", self.params_generated)?;
        writeln!(f, "total params:     {} (incl. stem)", self.params_total)?;
        if let Some((h, w, flops)) = self.flops_at {
            writeln!(f, "flops @ {h}x{w}:  {flops}")?;
        }
        writeln!(f, "output resolution: {}", self.output_resolution())?;
        write!(f, "downsample factor: {}", self.downsample_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("input {height}x{width} is not divisible by 2^{down_exp}")]
    Resolution { height: u64, width: u64, down_exp: u32 },
}

fn input_channels(graph: &GraphIR, id: NodeId) -> usize {
    graph.input_specs(id).map(|s| s.channels).sum()
}

/// Per-node and total parameter counts; the stem constant is added once.
pub fn count_params(graph: &GraphIR, cfg: &SpaceConfig) -> CostReport {
    let per_node: Vec<NodeCost> = graph
        .nodes
        .iter()
        .map(|n| NodeCost {
            node: n.id,
            kind: n.kind.to_string(),
            c_in: input_channels(graph, n.id),
            c_out: n.out.channels,
            down_exp: n.out.down_exp,
            params: n.param_count,
        })
        .collect();
    let params_generated = per_node.iter().map(|n| n.params).sum::<u64>();
    CostReport {
        params_total: params_generated + cfg.stem_param_count,
        params_generated,
        flops_at: None,
        per_node,
        output_down_exp: graph.output_down_exp(),
        downsample_factor: graph.downsample_factor(),
    }
}

/// FLOP proxy: two operations per multiply-accumulate weight per output pixel.
pub fn count_flops(graph: &GraphIR, cfg: &SpaceConfig, input_hw: (u64, u64)) -> Result<u64, CostError> {
    let (height, width) = input_hw;
    let down_exp = graph.max_down_exp();
    let scale = 1u64 << down_exp;
    if height % scale != 0 || width % scale != 0 {
        return Err(CostError::Resolution { height, width, down_exp });
    }
    let classes = cfg.num_classes as u64;
    Ok(graph
        .nodes
        .iter()
        .map(|n| {
            let weights = conv_weights(n.kind, input_channels(graph, n.id) as u64, n.out.channels as u64, classes);
            let pixels = (height >> n.out.down_exp) * (width >> n.out.down_exp);
            2 * weights * pixels
        })
        .sum())
}

/// Parameters plus FLOPs at `input_hw`.
pub fn cost_report(graph: &GraphIR, cfg: &SpaceConfig, input_hw: (u64, u64)) -> Result<CostReport, CostError> {
    let mut report = count_params(graph, cfg);
    let flops = count_flops(graph, cfg, input_hw)?;
    report.flops_at = Some((input_hw.0, input_hw.1, flops));
    Ok(report)
}

/// Compact record handed to evaluators and stored in search logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub params: u64,
    pub flops: u64,
    pub max_down_exp: u32,
    pub output_down_exp: u32,
    pub num_nodes: usize,
    pub downsample_factor: u64,
}

/// Summary at [`REFERENCE_INPUT_HW`]; `params` includes the stem.
pub fn summarize(graph: &GraphIR, cfg: &SpaceConfig) -> Result<GraphSummary, CostError> {
    let report = cost_report(graph, cfg, REFERENCE_INPUT_HW)?;
    Ok(GraphSummary {
        params: report.params_total,
        flops: report.flops_at.map(|(_, _, f)| f).unwrap_or(0),
        max_down_exp: graph.max_down_exp(),
        output_down_exp: graph.output_down_exp(),
        num_nodes: graph.nodes.len(),
        downsample_factor: graph.downsample_factor(),
    })
}
