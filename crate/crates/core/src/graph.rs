//! Compilation of a genotype into a typed dataflow graph.
//!
//! Nodes are emitted in topological order and carry their output shape and
//! parameter count, so downstream passes never need to re-run shape
//! inference.

use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

use crate::cost;
use crate::genotype::{validate, AggKind, Genotype, OpKind, SpaceConfig, ValidationReport};

pub type NodeId = usize;

/// Channel count and resolution; spatial size is `input / 2^down_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TensorSpec {
    pub channels: usize,
    pub down_exp: u32,
}

impl TensorSpec {
    pub fn new(channels: usize, down_exp: u32) -> Self {
        Self { channels, down_exp }
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ch 1/{}", self.channels, 1u64 << self.down_exp)
    }
}

/// Stem seeds: (channels, down_exp) of the 1/4 and 1/8 stem outputs.
pub const STEM_SEEDS: [(usize, u32); 2] = [(24, 2), (32, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum AlignDir {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeKind {
    StemSeed,
    Transform1x1,
    Op(OpKind),
    Aggregate(AggKind),
    /// 1x1 conv after a concatenation, back to the template width.
    ConcatReduce1x1,
    Align(AlignDir),
    ConcatHead,
    Reduce1x1,
    Classifier3x3,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::StemSeed => f.write_str("stem"),
            NodeKind::Transform1x1 => f.write_str("transform1x1"),
            NodeKind::Op(op) => write!(f, "{op}"),
            NodeKind::Aggregate(agg) => write!(f, "agg:{agg}"),
            NodeKind::ConcatReduce1x1 => f.write_str("concat_reduce1x1"),
            NodeKind::Align(AlignDir::Up) => f.write_str("upsample"),
            NodeKind::Align(AlignDir::Down) => f.write_str("downsample"),
            NodeKind::ConcatHead => f.write_str("concat_head"),
            NodeKind::Reduce1x1 => f.write_str("reduce1x1"),
            NodeKind::Classifier3x3 => f.write_str("classifier3x3"),
        }
    }
}

/// Which template instantiation a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Instance {
    pub block: usize,
    pub repeat: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub out: TensorSpec,
    pub stride: usize,
    pub param_count: u64,
    pub instance: Option<Instance>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GraphIR {
    pub nodes: Vec<Node>,
    /// Sampling pool: two transformed stem outputs then one entry per block.
    pub pool: Vec<NodeId>,
    /// How many block inputs referenced each pool entry.
    pub consumed: Vec<usize>,
    pub output: NodeId,
    /// Pool positions concatenated by the head.
    pub head_inputs: Vec<usize>,
    pub strided_blocks: usize,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid genotype: {0}")]
    Invalid(ValidationReport),
    #[error("internal graph defect: {0}")]
    Internal(String),
}

impl GraphIR {
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn input_specs(&self, id: NodeId) -> impl Iterator<Item = TensorSpec> + '_ {
        self.nodes[id].inputs.iter().map(|&i| self.nodes[i].out)
    }

    pub fn max_down_exp(&self) -> u32 {
        self.nodes.iter().map(|n| n.out.down_exp).max().unwrap_or(0)
    }

    pub fn output_down_exp(&self) -> u32 {
        self.nodes[self.output].out.down_exp
    }

    /// Architecture downsampling factor: 2 to the number of strided blocks.
    pub fn downsample_factor(&self) -> u64 {
        1u64 << self.strided_blocks
    }

    /// Structural self-check: topological order, input arity, aggregate
    /// operand agreement.
    pub fn check_structure(&self) -> Result<(), GraphError> {
        let defect = |msg: String| Err(GraphError::Internal(msg));
        for (pos, node) in self.nodes.iter().enumerate() {
            if node.id != pos {
                return defect(format!("node at position {pos} has id {}", node.id));
            }
            if node.out.channels == 0 {
                return defect(format!("node {pos} has zero channels"));
            }
            match node.kind {
                NodeKind::StemSeed if !node.inputs.is_empty() => {
                    return defect(format!("stem node {pos} has inputs"));
                }
                NodeKind::StemSeed => {}
                _ if node.inputs.is_empty() => {
                    return defect(format!("node {pos} ({}) has no inputs", node.kind));
                }
                _ => {}
            }
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= pos) {
                return defect(format!("node {pos} reads later node {bad}"));
            }
            if let NodeKind::Aggregate(_) = node.kind {
                let specs: Vec<_> = self.input_specs(pos).collect();
                if specs.len() != 2 || specs[0] != specs[1] {
                    return defect(format!("aggregate {pos} has mismatched operands {specs:?}"));
                }
            }
        }
        if self.pool.iter().zip(&self.consumed).all(|(_, &c)| c > 0) {
            return defect("every pool entry consumed; head has no inputs".into());
        }
        Ok(())
    }

    /// Graphviz rendering with one cluster per template instantiation.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph architecture {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n");
        let mut clusters: Vec<(Instance, Vec<NodeId>)> = Vec::new();
        for node in &self.nodes {
            match node.instance {
                Some(inst) => match clusters.last_mut() {
                    Some((last, ids)) if *last == inst => ids.push(node.id),
                    _ => clusters.push((inst, vec![node.id])),
                },
                None => {
                    let _ = writeln!(out, "  {};", dot_node(node));
                }
            }
        }
        for (inst, ids) in &clusters {
            let _ = writeln!(out, "  subgraph cluster_b{}_r{} {{", inst.block, inst.repeat);
            let _ = writeln!(out, "    label=\"block {} repeat {}\";", inst.block, inst.repeat);
            for &id in ids {
                let _ = writeln!(out, "    {};", dot_node(&self.nodes[id]));
            }
            out.push_str("  }\n");
        }
        for node in &self.nodes {
            for &src in &node.inputs {
                let _ = writeln!(out, "  n{src} -> n{};", node.id);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn dot_node(node: &Node) -> String {
    let stride = if node.stride == 2 { " s2" } else { "" };
    format!("n{} [label=\"{}{}\\n{}\"]", node.id, node.kind, stride, node.out)
}

struct Builder<'a> {
    cfg: &'a SpaceConfig,
    nodes: Vec<Node>,
}

impl<'a> Builder<'a> {
    fn push(
        &mut self,
        kind: NodeKind,
        inputs: Vec<NodeId>,
        out: TensorSpec,
        stride: usize,
        instance: Option<Instance>,
    ) -> NodeId {
        let c_in: usize = inputs.iter().map(|&i| self.nodes[i].out.channels).sum();
        let id = self.nodes.len();
        let param_count = cost::layer_params(kind, c_in, out.channels, self.cfg);
        self.nodes.push(Node { id, kind, inputs, out, stride, param_count, instance });
        id
    }

    fn spec(&self, id: NodeId) -> TensorSpec {
        self.nodes[id].out
    }

    fn align(&mut self, id: NodeId, target: u32, instance: Option<Instance>) -> NodeId {
        let spec = self.spec(id);
        if spec.down_exp == target {
            return id;
        }
        let dir = if target > spec.down_exp { AlignDir::Down } else { AlignDir::Up };
        self.push(NodeKind::Align(dir), vec![id], TensorSpec::new(spec.channels, target), 1, instance)
    }

    /// One template application on `(first, second)`; returns the output node.
    #[allow(clippy::too_many_arguments)]
    fn instantiate(
        &mut self,
        ops: [OpKind; 2],
        agg: AggKind,
        first: NodeId,
        second: NodeId,
        stride: usize,
        downsample_align: bool,
        instance: Instance,
    ) -> NodeId {
        let inst = Some(instance);
        let widest = self.spec(first).channels.max(self.spec(second).channels);
        let channels = if stride == 2 { widest * self.cfg.channel_multiplier } else { widest };
        let shift = u32::from(stride == 2);
        let mut branch = [0; 2];
        for (slot, (&op, input)) in ops.iter().zip([first, second]).enumerate() {
            let out = TensorSpec::new(channels, self.spec(input).down_exp + shift);
            branch[slot] = self.push(NodeKind::Op(op), vec![input], out, stride, inst);
        }
        let (d0, d1) = (self.spec(branch[0]).down_exp, self.spec(branch[1]).down_exp);
        let target = if downsample_align { d0.max(d1) } else { d0.min(d1) };
        let a = self.align(branch[0], target, inst);
        let b = self.align(branch[1], target, inst);
        let agg_channels = match agg {
            AggKind::Sum => channels,
            AggKind::Concat => 2 * channels,
        };
        let merged = self.push(NodeKind::Aggregate(agg), vec![a, b], TensorSpec::new(agg_channels, target), 1, inst);
        if agg == AggKind::Concat && self.cfg.concat_reduce {
            self.push(NodeKind::ConcatReduce1x1, vec![merged], TensorSpec::new(channels, target), 1, inst)
        } else {
            merged
        }
    }
}

/// Compiles a genotype. The result is a pure function of its arguments.
pub fn compile(genotype: &Genotype, cfg: &SpaceConfig) -> Result<GraphIR, GraphError> {
    let report = validate(genotype, cfg);
    if !report.is_ok() {
        return Err(GraphError::Invalid(report));
    }
    let mut b = Builder { cfg, nodes: Vec::new() };
    let mut pool = Vec::with_capacity(2 + genotype.blocks.len());
    for (channels, down_exp) in STEM_SEEDS {
        let seed = b.push(NodeKind::StemSeed, vec![], TensorSpec::new(channels, down_exp), 1, None);
        let t = b.push(NodeKind::Transform1x1, vec![seed], TensorSpec::new(cfg.base_channels, down_exp), 1, None);
        pool.push(t);
    }
    let mut consumed = vec![0usize; pool.len()];
    let half = cfg.stride_blocks();
    for (j, block) in genotype.blocks.iter().enumerate() {
        let template = genotype.templates[block.template_id];
        consumed[block.loc1] += 1;
        consumed[block.loc2] += 1;
        let second = pool[block.loc2];
        let mut current = pool[block.loc1];
        for repeat in 0..block.repeats {
            let stride = if repeat == 0 { block.stride } else { 1 };
            current = b.instantiate(
                [template.op1, template.op2],
                template.agg,
                current,
                second,
                stride,
                j < half,
                Instance { block: j, repeat },
            );
        }
        pool.push(current);
        consumed.push(0);
    }

    let head_inputs: Vec<usize> = (0..pool.len()).filter(|&p| consumed[p] == 0).collect();
    let target = head_inputs
        .iter()
        .map(|&p| b.spec(pool[p]).down_exp)
        .min()
        .ok_or_else(|| GraphError::Internal("no unused pool entries".into()))?;
    let aligned: Vec<NodeId> = head_inputs.iter().map(|&p| b.align(pool[p], target, None)).collect();
    let concat_channels = aligned.iter().map(|&id| b.spec(id).channels).sum();
    let concat = b.push(NodeKind::ConcatHead, aligned, TensorSpec::new(concat_channels, target), 1, None);
    let reduce = b.push(NodeKind::Reduce1x1, vec![concat], TensorSpec::new(cfg.base_channels, target), 1, None);
    let output = b.push(NodeKind::Classifier3x3, vec![reduce], TensorSpec::new(cfg.num_classes, target), 1, None);

    let graph =
        GraphIR { nodes: b.nodes, pool, consumed, output, head_inputs, strided_blocks: genotype.num_strided_blocks() };
    graph.check_structure()?;
    Ok(graph)
}
