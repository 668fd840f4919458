//! Helpers shared by the integration tests: an independent genotype
//! generator, a brute-force parameter oracle and graph invariant checks.

#![allow(dead_code)]

use rand::Rng;
use segnas::genotype::Template;
use segnas::graph::Instance;
use segnas::{AggKind, BlockDecision, Genotype, GraphIR, NodeKind, OpKind, SpaceConfig};

/// Uniform draw over all valid genotypes of `space`, without the controller.
pub fn random_genotype<R: Rng + ?Sized>(space: &SpaceConfig, rng: &mut R) -> Genotype {
    let templates = (0..space.num_templates)
        .map(|_| {
            Template::new(
                OpKind::ALL[rng.gen_range(0..6)],
                OpKind::ALL[rng.gen_range(0..6)],
                AggKind::ALL[rng.gen_range(0..2)],
            )
        })
        .collect();
    let blocks = (0..space.num_blocks)
        .map(|j| BlockDecision {
            loc1: rng.gen_range(0..2 + j),
            loc2: rng.gen_range(0..2 + j),
            template_id: rng.gen_range(0..space.num_templates),
            repeats: rng.gen_range(1..=space.k_max),
            stride: if j < space.num_blocks / 2 { rng.gen_range(1..=2) } else { 1 },
        })
        .collect();
    Genotype { templates, blocks }
}

fn op_params(op: OpKind, c_in: u64, c_out: u64) -> u64 {
    let sep = |k: u64| k * k * c_in + 2 * c_in + c_in * c_out + 2 * c_out;
    match op {
        OpKind::SepConv3x3 => sep(3),
        OpKind::SepConv5x5 | OpKind::SepConv5x5Dil6 => sep(5),
        OpKind::GapConv1x1 => c_in * c_out + 2 * c_out,
        OpKind::MaxPool3x3 | OpKind::Skip => {
            if c_in == c_out {
                0
            } else {
                c_in * c_out + 2 * c_out
            }
        }
    }
}

/// Generated parameters (stem excluded) computed by walking the genotype
/// with only channel/resolution bookkeeping.
pub fn oracle_params(g: &Genotype, space: &SpaceConfig) -> u64 {
    let base = space.base_channels as u64;
    let mult = space.channel_multiplier as u64;
    let mut params = (24 * base + 2 * base) + (32 * base + 2 * base);
    // (channels, down_exp)
    let mut pool: Vec<(u64, u32)> = vec![(base, 2), (base, 3)];
    let mut used = vec![false; 2 + g.blocks.len()];
    for (j, b) in g.blocks.iter().enumerate() {
        let t = g.templates[b.template_id];
        used[b.loc1] = true;
        used[b.loc2] = true;
        let second = pool[b.loc2];
        let mut cur = pool[b.loc1];
        for r in 0..b.repeats {
            let strided = r == 0 && b.stride == 2;
            let c = cur.0.max(second.0) * if strided { mult } else { 1 };
            params += op_params(t.op1, cur.0, c) + op_params(t.op2, second.0, c);
            let shift = u32::from(strided);
            let (d1, d2) = (cur.1 + shift, second.1 + shift);
            let d = if j < space.num_blocks / 2 { d1.max(d2) } else { d1.min(d2) };
            let out_c = match t.agg {
                AggKind::Sum => c,
                AggKind::Concat if space.concat_reduce => {
                    params += 2 * c * c + 2 * c;
                    c
                }
                AggKind::Concat => 2 * c,
            };
            cur = (out_c, d);
        }
        pool.push(cur);
    }
    let head_in: u64 = pool.iter().zip(&used).filter(|(_, &u)| !u).map(|(p, _)| p.0).sum();
    let classes = space.num_classes as u64;
    params + head_in * base + 2 * base + 9 * base * classes + classes
}

/// Structural rule violations of a compiled graph, checked against the
/// genotype it came from.
pub fn graph_violations(g: &Genotype, space: &SpaceConfig, graph: &GraphIR) -> Vec<String> {
    let mut out = Vec::new();
    let n = g.blocks.len();
    if graph.pool.len() != 2 + n {
        out.push(format!("pool size {} != {}", graph.pool.len(), 2 + n));
    }
    let mut usage = vec![0usize; 2 + n];
    for b in &g.blocks {
        usage[b.loc1] += 1;
        usage[b.loc2] += 1;
    }
    let unused: Vec<usize> = (0..2 + n).filter(|&p| usage[p] == 0).collect();
    if graph.head_inputs != unused {
        out.push(format!("head takes {:?}, unused entries are {:?}", graph.head_inputs, unused));
    }
    let head = graph.nodes.iter().find(|x| x.kind == NodeKind::ConcatHead).expect("head concat");
    if head.inputs.len() != unused.len() {
        out.push("head concat arity differs from unused pool entries".into());
    }

    for (j, b) in g.blocks.iter().enumerate() {
        let in_block = |kind: fn(&NodeKind) -> bool| {
            graph
                .nodes
                .iter()
                .filter(move |x| x.instance.is_some_and(|i| i.block == j) && kind(&x.kind))
                .collect::<Vec<_>>()
        };
        let ops = in_block(|k| matches!(k, NodeKind::Op(_)));
        let aggs = in_block(|k| matches!(k, NodeKind::Aggregate(_)));
        if aggs.len() != b.repeats || ops.len() != 2 * b.repeats {
            out.push(format!("block {j}: {} aggregates, {} ops for k={}", aggs.len(), ops.len(), b.repeats));
        }
        for r in 0..b.repeats {
            let inst = Instance { block: j, repeat: r };
            let rops: Vec<_> = ops.iter().filter(|x| x.instance == Some(inst)).collect();
            if rops.len() != 2 {
                out.push(format!("block {j} repeat {r}: {} ops", rops.len()));
                continue;
            }
            let widest = rops.iter().map(|o| graph.node(o.inputs[0]).out.channels).max().unwrap();
            let strided = r == 0 && b.stride == 2;
            let want = widest * if strided { space.channel_multiplier } else { 1 };
            for o in &rops {
                if o.out.channels != want {
                    out.push(format!("block {j} repeat {r}: op width {} != {want}", o.out.channels));
                }
                if o.stride != if strided { 2 } else { 1 } {
                    out.push(format!("block {j} repeat {r}: wrong op stride"));
                }
            }
            let exps = rops.iter().map(|o| o.out.down_exp);
            let target = if j < space.num_blocks / 2 { exps.clone().max() } else { exps.clone().min() }.unwrap();
            let agg = aggs.iter().find(|x| x.instance == Some(inst)).expect("aggregate per repeat");
            if agg.out.down_exp != target || agg.inputs.iter().any(|&i| graph.node(i).out.down_exp != target) {
                out.push(format!("block {j} repeat {r}: aggregate not at resolution 1/2^{target}"));
            }
        }
    }
    out
}
