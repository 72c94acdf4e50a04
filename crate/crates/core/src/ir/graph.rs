use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::file::{GraphFile, InstructionRecord};
use super::opcode::Opcode;
use super::GraphError;

/// Identifier of an instruction as written in the graph file.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstrId(pub u32);

impl fmt::Display for InstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub dims: Vec<u64>,
    pub element_size: u64,
}

impl TensorShape {
    pub fn new(dims: Vec<u64>, element_size: u64) -> Self {
        Self { dims, element_size }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn byte_size(&self) -> u64 {
        self.elements() * self.element_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub id: InstrId,
    pub name: String,
    pub opcode: Opcode,
    pub operands: Vec<InstrId>,
    pub shape: TensorShape,
    pub is_forward: bool,
    pub op_name: Option<String>,
    pub compute_cost_ms: Option<f64>,
    /// Normalized per-opcode dimension attribute (transpose permutation,
    /// broadcast operand-to-output map, reduce dims); empty otherwise.
    pub dimensions: Vec<usize>,
    pub tuple_index: Option<usize>,
}

/// A validated, immutable computation graph.
///
/// Instructions are stored in ascending id order; a *node* is the position of
/// an instruction in that order and is what the analyses index by.
#[derive(Debug, Clone)]
pub struct HloGraph {
    instructions: Vec<Instruction>,
    index: HashMap<InstrId, usize>,
    by_name: HashMap<String, usize>,
    operand_nodes: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    trainable: BTreeSet<String>,
    sources: Vec<InstrId>,
    sinks: Vec<InstrId>,
    compute: Vec<InstrId>,
}

impl PartialEq for HloGraph {
    fn eq(&self, other: &Self) -> bool {
        self.instructions == other.instructions && self.trainable == other.trainable
    }
}

impl HloGraph {
    pub fn from_file(mut file: GraphFile) -> Result<Self, GraphError> {
        fill_default_dimensions(&mut file);
        let mut instructions = Vec::with_capacity(file.instructions.len());
        for rec in file.instructions {
            instructions.push(instruction_from_record(rec)?);
        }
        Self::new(instructions, file.trainable_variables)
    }

    pub fn from_json_str(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile = serde_json::from_str(text)?;
        Self::from_file(file)
    }

    /// Builds and validates a graph. Instruction order in `instructions` does not matter.
    pub fn new<I, S>(mut instructions: Vec<Instruction>, trainable: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        instructions.sort_by_key(|i| i.id);
        let mut index = HashMap::with_capacity(instructions.len());
        let mut by_name = HashMap::with_capacity(instructions.len());
        for (pos, instr) in instructions.iter().enumerate() {
            if index.insert(instr.id, pos).is_some() {
                return Err(GraphError::DuplicateId(instr.id));
            }
            if by_name.insert(instr.name.clone(), pos).is_some() {
                return Err(GraphError::DuplicateName(instr.name.clone()));
            }
        }

        let mut operand_nodes = Vec::with_capacity(instructions.len());
        let mut consumers = vec![Vec::new(); instructions.len()];
        for (pos, instr) in instructions.iter().enumerate() {
            let mut ops = Vec::with_capacity(instr.operands.len());
            for op in &instr.operands {
                let op_pos = *index.get(op).ok_or_else(|| GraphError::DanglingOperand {
                    instruction: instr.name.clone(),
                    operand: *op,
                })?;
                ops.push(op_pos);
                if !consumers[op_pos].contains(&pos) {
                    consumers[op_pos].push(pos);
                }
            }
            operand_nodes.push(ops);
        }

        let trainable: BTreeSet<String> = trainable.into_iter().map(Into::into).collect();
        let mut graph = HloGraph {
            instructions,
            index,
            by_name,
            operand_nodes,
            consumers,
            trainable,
            sources: Vec::new(),
            sinks: Vec::new(),
            compute: Vec::new(),
        };
        graph.check_acyclic()?;
        for node in 0..graph.len() {
            graph.check_instruction(node)?;
        }
        for name in &graph.trainable {
            let node = graph
                .by_name
                .get(name)
                .ok_or_else(|| GraphError::UnknownTrainable(name.clone()))?;
            if graph.instructions[*node].opcode != Opcode::Parameter {
                return Err(GraphError::TrainableNotParameter(name.clone()));
            }
        }
        graph.classify();
        Ok(graph)
    }

    fn classify(&mut self) {
        for (node, instr) in self.instructions.iter().enumerate() {
            if self.operand_nodes[node].is_empty() {
                self.sources.push(instr.id);
            } else if self.consumers[node].is_empty() {
                self.sinks.push(instr.id);
            } else {
                self.compute.push(instr.id);
            }
        }
    }

    fn check_acyclic(&self) -> Result<(), GraphError> {
        let mut indegree: Vec<usize> = self.operand_nodes.iter().map(|ops| ops.len()).collect();
        // operands may repeat (x * x); count distinct edges
        for (node, ops) in self.operand_nodes.iter().enumerate() {
            let distinct: BTreeSet<_> = ops.iter().collect();
            indegree[node] = distinct.len();
        }
        let mut ready: Vec<usize> = (0..self.len()).filter(|&n| indegree[n] == 0).collect();
        let mut seen = 0;
        while let Some(n) = ready.pop() {
            seen += 1;
            for &c in &self.consumers[n] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if seen == self.len() {
            return Ok(());
        }
        let culprit = (0..self.len()).find(|&n| indegree[n] > 0).expect("cycle member");
        Err(GraphError::Cycle(self.instructions[culprit].name.clone()))
    }

    fn check_instruction(&self, node: usize) -> Result<(), GraphError> {
        let instr = &self.instructions[node];
        let shape_err = |reason: String| GraphError::Shape {
            instruction: instr.name.clone(),
            reason,
        };
        if let Some(expected) = instr.opcode.arity() {
            if instr.operands.len() != expected {
                return Err(GraphError::Arity {
                    instruction: instr.name.clone(),
                    opcode: instr.opcode,
                    expected,
                    found: instr.operands.len(),
                });
            }
        }
        if instr.shape.element_size == 0 {
            return Err(shape_err("element_size must be positive".into()));
        }
        if instr.opcode != Opcode::Tuple && instr.shape.dims.contains(&0) {
            return Err(shape_err("every extent must be >= 1".into()));
        }
        let operand = |i: usize| &self.instructions[self.operand_nodes[node][i]];
        let out = &instr.shape.dims;
        match instr.opcode {
            Opcode::Parameter | Opcode::Constant | Opcode::Tuple => {}
            op if op.is_elementwise() => {
                for i in 0..instr.operands.len() {
                    if &operand(i).shape.dims != out {
                        return Err(shape_err(format!(
                            "elementwise operand {i} has shape {:?}, output {:?}",
                            operand(i).shape.dims,
                            out
                        )));
                    }
                }
            }
            Opcode::Dot => {
                let (a, b) = (&operand(0).shape.dims, &operand(1).shape.dims);
                if a.len() != 2 || b.len() != 2 || out.len() != 2 {
                    return Err(shape_err("dot operands and output must be rank 2".into()));
                }
                if a[1] != b[0] || out[0] != a[0] || out[1] != b[1] {
                    return Err(shape_err(format!("dot shapes {a:?} x {b:?} -> {out:?} mismatch")));
                }
            }
            Opcode::Transpose => {
                let input = &operand(0).shape.dims;
                let perm = &instr.dimensions;
                let mut sorted = perm.clone();
                sorted.sort_unstable();
                if input.len() != out.len() || sorted != (0..input.len()).collect::<Vec<_>>() {
                    return Err(shape_err(format!("invalid transpose permutation {perm:?}")));
                }
                if perm.iter().enumerate().any(|(j, &p)| out[j] != input[p]) {
                    return Err(shape_err("transpose output does not match permutation".into()));
                }
            }
            Opcode::Reshape => {
                let input = &operand(0).shape;
                if input.elements() != instr.shape.elements() {
                    return Err(shape_err(format!(
                        "reshape changes element count {:?} -> {:?}",
                        input.dims, out
                    )));
                }
            }
            Opcode::Broadcast => {
                let input = &operand(0).shape.dims;
                let map = &instr.dimensions;
                if map.len() != input.len()
                    || map.windows(2).any(|w| w[0] >= w[1])
                    || map.iter().any(|&d| d >= out.len())
                {
                    return Err(shape_err(format!("invalid broadcast dimensions {map:?}")));
                }
                if map.iter().enumerate().any(|(i, &d)| out[d] != input[i]) {
                    return Err(shape_err("broadcast does not preserve carried extents".into()));
                }
            }
            Opcode::Reduce => {
                let input = &operand(0).shape.dims;
                let reduced = &instr.dimensions;
                if reduced.windows(2).any(|w| w[0] >= w[1]) || reduced.iter().any(|&d| d >= input.len()) {
                    return Err(shape_err(format!("invalid reduce dimensions {reduced:?}")));
                }
                let kept: Vec<u64> = (0..input.len())
                    .filter(|d| !reduced.contains(d))
                    .map(|d| input[d])
                    .collect();
                if &kept != out {
                    return Err(shape_err(format!("reduce output {out:?} should be {kept:?}")));
                }
            }
            Opcode::GetTupleElement => {
                let tuple = operand(0);
                if tuple.opcode != Opcode::Tuple {
                    return Err(shape_err("get-tuple-element operand must be a tuple".into()));
                }
                let idx = instr.tuple_index.unwrap_or(0);
                let Some(&elem_node) = self.operand_nodes[self.operand_nodes[node][0]].get(idx) else {
                    return Err(shape_err(format!("tuple index {idx} out of range")));
                };
                if &self.instructions[elem_node].shape.dims != out {
                    return Err(shape_err("get-tuple-element shape differs from element".into()));
                }
            }
            _ => unreachable!("all opcodes handled"),
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn instruction(&self, id: InstrId) -> Option<&Instruction> {
        self.index.get(&id).map(|&n| &self.instructions[n])
    }

    pub fn node(&self, node: usize) -> &Instruction {
        &self.instructions[node]
    }

    pub fn node_of(&self, id: InstrId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node_by_name(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Instruction> {
        self.node_by_name(name).map(|n| &self.instructions[n])
    }

    pub fn operand_nodes(&self, node: usize) -> &[usize] {
        &self.operand_nodes[node]
    }

    pub fn consumers(&self, node: usize) -> &[usize] {
        &self.consumers[node]
    }

    pub fn trainable_variables(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn is_trainable(&self, node: usize) -> bool {
        self.trainable.contains(&self.instructions[node].name)
    }

    pub fn source_ids(&self) -> &[InstrId] {
        &self.sources
    }

    pub fn sink_ids(&self) -> &[InstrId] {
        &self.sinks
    }

    pub fn compute_ids(&self) -> &[InstrId] {
        &self.compute
    }

    /// Number of sharding dimensions a node carries. Tuples expose the
    /// concatenation of their elements' dimensions.
    pub fn sharding_rank(&self, node: usize) -> usize {
        let instr = &self.instructions[node];
        if instr.opcode == Opcode::Tuple {
            self.operand_nodes[node].iter().map(|&o| self.sharding_rank(o)).sum()
        } else {
            instr.shape.rank()
        }
    }

    /// Bytes materialized by a node; a tuple counts its elements.
    pub fn byte_size(&self, node: usize) -> u64 {
        let instr = &self.instructions[node];
        if instr.opcode == Opcode::Tuple {
            self.operand_nodes[node].iter().map(|&o| self.byte_size(o)).sum()
        } else {
            instr.shape.byte_size()
        }
    }

    /// Topologically ordered forward instructions; ready ties go to the lowest id.
    pub fn forward_subgraph(&self) -> Vec<InstrId> {
        self.forward_nodes()
            .into_iter()
            .map(|n| self.instructions[n].id)
            .collect()
    }

    pub(crate) fn forward_nodes(&self) -> Vec<usize> {
        let forward: Vec<bool> = self.instructions.iter().map(|i| i.is_forward).collect();
        let mut indegree = vec![0usize; self.len()];
        for n in 0..self.len() {
            if forward[n] {
                let distinct: BTreeSet<usize> = self.operand_nodes[n].iter().copied().filter(|&o| forward[o]).collect();
                indegree[n] = distinct.len();
            }
        }
        let mut heap: BinaryHeap<Reverse<usize>> = (0..self.len())
            .filter(|&n| forward[n] && indegree[n] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::new();
        while let Some(Reverse(n)) = heap.pop() {
            order.push(n);
            for &c in &self.consumers[n] {
                if forward[c] {
                    indegree[c] -= 1;
                    if indegree[c] == 0 {
                        heap.push(Reverse(c));
                    }
                }
            }
        }
        order
    }

    pub fn to_file(&self) -> GraphFile {
        let instructions = self
            .instructions
            .iter()
            .map(|i| {
                let needs_dims = matches!(i.opcode, Opcode::Transpose | Opcode::Broadcast | Opcode::Reduce);
                InstructionRecord {
                    id: i.id.0,
                    name: i.name.clone(),
                    opcode: i.opcode.as_str().to_string(),
                    operands: i.operands.iter().map(|o| o.0).collect(),
                    shape: i.shape.dims.clone(),
                    element_size: i.shape.element_size,
                    is_forward: i.is_forward,
                    compute_cost_ms: i.compute_cost_ms,
                    op_name: i.op_name.clone(),
                    dimensions: needs_dims.then(|| i.dimensions.clone()),
                    index: i.tuple_index,
                }
            })
            .collect();
        GraphFile {
            instructions,
            trainable_variables: self.trainable.iter().cloned().collect(),
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("graph file serializes")
    }
}

fn instruction_from_record(rec: InstructionRecord) -> Result<Instruction, GraphError> {
    let opcode: Opcode = rec.opcode.parse().map_err(|_| GraphError::UnknownOpcode {
        instruction: rec.name.clone(),
        opcode: rec.opcode.clone(),
    })?;
    Ok(Instruction {
        id: InstrId(rec.id),
        name: rec.name,
        opcode,
        operands: rec.operands.into_iter().map(InstrId).collect(),
        shape: TensorShape::new(rec.shape, rec.element_size),
        is_forward: rec.is_forward,
        op_name: rec.op_name,
        compute_cost_ms: rec.compute_cost_ms,
        dimensions: rec.dimensions.unwrap_or_default(),
        tuple_index: rec.index,
    })
}

/// Reads, parses and validates a graph file.
pub fn load_graph(path: impl AsRef<Path>) -> Result<HloGraph, GraphError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    HloGraph::from_json_str(&text)
}

/// Fills omitted `dimensions` attributes: transpose reverses, broadcast maps
/// onto trailing output dims, reduce removes trailing dims.
fn fill_default_dimensions(file: &mut GraphFile) {
    let shapes: HashMap<u32, usize> = file.instructions.iter().map(|r| (r.id, r.shape.len())).collect();
    for rec in &mut file.instructions {
        if rec.dimensions.is_some() {
            continue;
        }
        let out_rank = rec.shape.len();
        let in_rank = rec.operands.first().and_then(|o| shapes.get(o)).copied().unwrap_or(0);
        rec.dimensions = match rec.opcode.as_str() {
            "transpose" => Some((0..out_rank).rev().collect()),
            "broadcast" if out_rank >= in_rank => Some((out_rank - in_rank..out_rank).collect()),
            "reduce" if in_rank >= out_rank => Some((out_rank..in_rank).collect()),
            _ => None,
        };
    }
}
