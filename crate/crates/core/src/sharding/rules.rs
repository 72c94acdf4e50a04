//! Per-opcode derivation rules, expressed as binary clauses over dim variables.

use thiserror::Error;

use super::{DimStatus, ShardingSpec};
use crate::ir::{HloGraph, InstrId, Opcode};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub(crate) enum Clause {
    /// Both dims carry the same status.
    Same(usize, usize),
    /// The dims are not both partitioned.
    Exclusive(usize, usize),
}

#[derive(Clone, Debug, Default)]
pub(crate) struct NodeRules {
    pub clauses: Vec<Clause>,
    /// Dims forced replicated once any dim in the instruction's scope is decided.
    pub fixed: Vec<usize>,
}

/// Pairwise exclusivity among the dims of one tensor.
pub(crate) fn tensor_exclusivity(vars: &[usize], out: &mut Vec<Clause>) {
    for (i, &a) in vars.iter().enumerate() {
        for &b in &vars[i + 1..] {
            out.push(Clause::Exclusive(a, b));
        }
    }
}

/// Rules for `node`, given the variables of each operand and of the output.
pub(crate) fn node_rules(g: &HloGraph, node: usize, operands: &[&[usize]], output: &[usize]) -> NodeRules {
    let instr = g.node(node);
    let mut r = NodeRules::default();
    match instr.opcode {
        Opcode::Parameter | Opcode::Constant => {}
        op if op.is_elementwise() => {
            for ops in operands {
                for (&a, &c) in ops.iter().zip(output) {
                    r.clauses.push(Clause::Same(a, c));
                }
            }
        }
        Opcode::Dot => {
            let (a, b, c) = (operands[0], operands[1], output);
            r.clauses.extend([
                Clause::Same(a[1], b[0]),
                Clause::Same(a[0], c[0]),
                Clause::Same(b[1], c[1]),
                Clause::Exclusive(a[1], c[0]),
                Clause::Exclusive(a[1], c[1]),
            ]);
        }
        Opcode::Transpose => {
            for (j, &p) in instr.dimensions.iter().enumerate() {
                r.clauses.push(Clause::Same(operands[0][p], output[j]));
            }
        }
        Opcode::Broadcast => {
            for (i, &d) in instr.dimensions.iter().enumerate() {
                r.clauses.push(Clause::Same(operands[0][i], output[d]));
            }
        }
        Opcode::Reduce => {
            let input = operands[0];
            let mut kept = output.iter();
            for (d, &v) in input.iter().enumerate() {
                if instr.dimensions.contains(&d) {
                    for &o in output {
                        r.clauses.push(Clause::Exclusive(v, o));
                    }
                } else if let Some(&o) = kept.next() {
                    r.clauses.push(Clause::Same(v, o));
                }
            }
        }
        Opcode::Reshape => {
            let in_dims = &g.node(g.operand_nodes(node)[0]).shape.dims;
            for group in reshape_groups(in_dims, &instr.shape.dims) {
                if group.inputs.len() == 1 && group.outputs.len() == 1 {
                    r.clauses
                        .push(Clause::Same(operands[0][group.inputs[0]], output[group.outputs[0]]));
                } else {
                    r.fixed.extend(group.inputs.iter().map(|&d| operands[0][d]));
                    r.fixed.extend(group.outputs.iter().map(|&d| output[d]));
                }
            }
        }
        Opcode::Tuple => {
            let mut offset = 0;
            for ops in operands {
                for (k, &v) in ops.iter().enumerate() {
                    r.clauses.push(Clause::Same(v, output[offset + k]));
                }
                offset += ops.len();
            }
        }
        Opcode::GetTupleElement => {
            let tuple = g.operand_nodes(node)[0];
            let index = instr.tuple_index.unwrap_or(0);
            let offset: usize = g.operand_nodes(tuple)[..index]
                .iter()
                .map(|&e| g.sharding_rank(e))
                .sum();
            for (d, &o) in output.iter().enumerate() {
                r.clauses.push(Clause::Same(operands[0][offset + d], o));
            }
        }
        _ => unreachable!("all opcodes handled"),
    }
    r
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) struct ReshapeGroup {
    pub inputs: Vec<usize>,
    pub outputs: Vec<usize>,
}

/// Splits a reshape into minimal groups of dims whose extents multiply to the same value.
pub(crate) fn reshape_groups(input: &[u64], output: &[u64]) -> Vec<ReshapeGroup> {
    let (mut i, mut j) = (0, 0);
    let mut groups = Vec::new();
    while i < input.len() && j < output.len() {
        let mut g = ReshapeGroup {
            inputs: vec![i],
            outputs: vec![j],
        };
        let (mut pi, mut po) = (input[i], output[j]);
        i += 1;
        j += 1;
        while pi != po {
            if pi < po && i < input.len() {
                pi *= input[i];
                g.inputs.push(i);
                i += 1;
            } else if j < output.len() {
                po *= output[j];
                g.outputs.push(j);
                j += 1;
            } else {
                break;
            }
        }
        groups.push(g);
    }
    if i < input.len() || j < output.len() {
        groups.push(ReshapeGroup {
            inputs: (i..input.len()).collect(),
            outputs: (j..output.len()).collect(),
        });
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("derivation rule of instruction {instruction} forces conflicting statuses")]
pub struct RuleConflict {
    pub instruction: InstrId,
}

/// Applies the rule of a single instruction to the given specs and returns the
/// least-committed consistent specs (operands, output).
pub fn rule_for(
    g: &HloGraph,
    id: InstrId,
    operand_specs: &[ShardingSpec],
    output_spec: &ShardingSpec,
) -> Result<(Vec<ShardingSpec>, ShardingSpec), RuleConflict> {
    let node = g.node_of(id).expect("instruction belongs to graph");
    let conflict = RuleConflict { instruction: id };
    let operand_nodes = g.operand_nodes(node);
    assert_eq!(operand_specs.len(), operand_nodes.len(), "operand count mismatch");

    let mut values = Vec::new();
    let mut ranges = Vec::new();
    let mut clauses = Vec::new();
    for (spec, &op) in operand_specs
        .iter()
        .chain([output_spec])
        .zip(operand_nodes.iter().chain([&node]))
    {
        assert_eq!(spec.rank(), g.sharding_rank(op), "spec rank mismatch");
        let vars: Vec<usize> = (values.len()..values.len() + spec.rank()).collect();
        if g.node(op).opcode != Opcode::Tuple {
            tensor_exclusivity(&vars, &mut clauses);
        }
        values.extend(spec.0.iter().copied());
        ranges.push(vars);
    }
    let (out_vars, op_vars) = ranges.split_last().expect("output range");
    let op_refs: Vec<&[usize]> = op_vars.iter().map(Vec::as_slice).collect();
    let rules = node_rules(g, node, &op_refs, out_vars);
    clauses.extend(rules.clauses);

    loop {
        let mut changed = false;
        if values.iter().any(|s| s.is_decided()) {
            for &v in &rules.fixed {
                changed |= force(&mut values, v, DimStatus::Replicated).map_err(|_| conflict.clone())?;
            }
        }
        for c in &clauses {
            match *c {
                Clause::Same(a, b) => {
                    for (x, y) in [(a, b), (b, a)] {
                        let sx = values[x];
                        if sx.is_decided() {
                            changed |= force(&mut values, y, sx).map_err(|_| conflict.clone())?;
                        }
                    }
                }
                Clause::Exclusive(a, b) => {
                    for (x, y) in [(a, b), (b, a)] {
                        if values[x] == DimStatus::Partitioned {
                            changed |= force(&mut values, y, DimStatus::Replicated).map_err(|_| conflict.clone())?;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let specs: Vec<ShardingSpec> = ranges
        .iter()
        .map(|r| ShardingSpec(r.iter().map(|&v| values[v]).collect()))
        .collect();
    let (out, ops) = specs.split_last().expect("output spec");
    Ok((ops.to_vec(), out.clone()))
}

fn force(values: &mut [DimStatus], v: usize, s: DimStatus) -> Result<bool, ()> {
    match values[v] {
        DimStatus::Undecided => {
            values[v] = s;
            Ok(true)
        }
        cur if cur == s => Ok(false),
        _ => Err(()),
    }
}
