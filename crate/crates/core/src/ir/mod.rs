//! HLO-like computation graphs: file schema, validation and indexing.

mod file;
mod graph;
mod opcode;

pub use file::{GraphFile, InstructionRecord};
pub use graph::{load_graph, HloGraph, InstrId, Instruction, TensorShape};
pub use opcode::{Opcode, UnknownOpcode};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read graph file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed graph file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("instruction {instruction}: unknown opcode `{opcode}`")]
    UnknownOpcode { instruction: String, opcode: String },
    #[error("duplicate instruction id {0}")]
    DuplicateId(InstrId),
    #[error("duplicate instruction name {0}")]
    DuplicateName(String),
    #[error("instruction {instruction}: operand {operand} does not exist")]
    DanglingOperand { instruction: String, operand: InstrId },
    #[error("instruction {0} is part of a cycle")]
    Cycle(String),
    #[error("instruction {instruction}: {opcode} takes {expected} operand(s), found {found}")]
    Arity {
        instruction: String,
        opcode: Opcode,
        expected: usize,
        found: usize,
    },
    #[error("instruction {instruction}: {reason}")]
    Shape { instruction: String, reason: String },
    #[error("trainable variable {0} is not an instruction")]
    UnknownTrainable(String),
    #[error("trainable variable {0} is not a parameter")]
    TrainableNotParameter(String),
    #[error("unknown candidate {0}")]
    UnknownCandidate(String),
}

/// One entry of the flat decision vector.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DimIndex {
    pub flat_index: usize,
    pub instruction: InstrId,
    pub dim: usize,
}

impl HloGraph {
    /// Concatenates every dimension of the named tensors: ascending id, then ordinal.
    pub fn decision_dims<S: AsRef<str>>(&self, candidates: &[S]) -> Result<Vec<DimIndex>, GraphError> {
        let mut nodes = Vec::with_capacity(candidates.len());
        for name in candidates {
            let node = self
                .node_by_name(name.as_ref())
                .ok_or_else(|| GraphError::UnknownCandidate(name.as_ref().to_string()))?;
            nodes.push(node);
        }
        nodes.sort_unstable();
        nodes.dedup();
        let mut out = Vec::new();
        for node in nodes {
            let id = self.node(node).id;
            for dim in 0..self.sharding_rank(node) {
                out.push(DimIndex {
                    flat_index: out.len(),
                    instruction: id,
                    dim,
                });
            }
        }
        Ok(out)
    }

    /// Decision dims over all trainable variables.
    pub fn trainable_dims(&self) -> Vec<DimIndex> {
        let names: Vec<&String> = self.trainable_variables().iter().collect();
        self.decision_dims(&names).expect("trainables are validated")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_json() -> &'static str {
        r#"{"instructions":[
            {"id":0,"name":"p","opcode":"parameter","shape":[4,8]},
            {"id":1,"name":"e1","opcode":"exp","operands":[0],"shape":[4,8]},
            {"id":2,"name":"e2","opcode":"exp","operands":[1],"shape":[4,8],"is_forward":false}
        ],"trainable_variables":["p"]}"#
    }

    #[test]
    fn lone_parameter_is_only_a_source() {
        let g = HloGraph::from_json_str(r#"{"instructions":[{"id":0,"name":"p","opcode":"parameter","shape":[3]}]}"#)
            .unwrap();
        assert_eq!(g.source_ids(), &[InstrId(0)]);
        assert!(g.compute_ids().is_empty());
        // a node with no inputs is classified as a source even when nothing consumes it
        assert!(g.sink_ids().is_empty());
    }

    #[test]
    fn chain_classification() {
        let g = HloGraph::from_json_str(chain_json()).unwrap();
        assert_eq!(g.source_ids(), &[InstrId(0)]);
        assert_eq!(g.compute_ids(), &[InstrId(1)]);
        assert_eq!(g.sink_ids(), &[InstrId(2)]);
        assert_eq!(g.forward_subgraph(), vec![InstrId(0), InstrId(1)]);
    }

    #[test]
    fn dot_with_one_operand_names_instruction() {
        let err = HloGraph::from_json_str(
            r#"{"instructions":[
                {"id":0,"name":"a","opcode":"parameter","shape":[2,2]},
                {"id":1,"name":"%dot.1","opcode":"dot","operands":[0],"shape":[2,2]}]}"#,
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::Arity { .. }));
        assert!(err.to_string().contains("%dot.1"));
    }

    #[test]
    fn rejects_unknown_opcode_dangling_and_cycles() {
        let unknown =
            HloGraph::from_json_str(r#"{"instructions":[{"id":0,"name":"f","opcode":"fusion","shape":[1]}]}"#);
        assert!(matches!(unknown, Err(GraphError::UnknownOpcode { .. })));
        let dangling = HloGraph::from_json_str(
            r#"{"instructions":[{"id":0,"name":"e","opcode":"exp","operands":[5],"shape":[1]}]}"#,
        );
        assert!(matches!(dangling, Err(GraphError::DanglingOperand { .. })));
        let cycle = HloGraph::from_json_str(
            r#"{"instructions":[
                {"id":0,"name":"a","opcode":"exp","operands":[1],"shape":[1]},
                {"id":1,"name":"b","opcode":"exp","operands":[0],"shape":[1]}]}"#,
        );
        assert!(matches!(cycle, Err(GraphError::Cycle(_))));
    }

    #[test]
    fn diamond_ties_break_by_id() {
        let g = HloGraph::from_json_str(
            r#"{"instructions":[
                {"id":0,"name":"p","opcode":"parameter","shape":[2]},
                {"id":2,"name":"b","opcode":"exp","operands":[0],"shape":[2]},
                {"id":1,"name":"a","opcode":"tanh","operands":[0],"shape":[2]},
                {"id":3,"name":"s","opcode":"add","operands":[1,2],"shape":[2]}]}"#,
        )
        .unwrap();
        assert_eq!(
            g.forward_subgraph(),
            vec![InstrId(0), InstrId(1), InstrId(2), InstrId(3)]
        );
    }

    #[test]
    fn decision_dims_concatenate_in_id_order() {
        let g = HloGraph::from_json_str(
            r#"{"instructions":[
                {"id":0,"name":"w","opcode":"parameter","shape":[4,8]},
                {"id":1,"name":"b","opcode":"parameter","shape":[16]}]}"#,
        )
        .unwrap();
        let dims = g.decision_dims(&["b", "w"]).unwrap();
        assert_eq!(dims.len(), 3);
        assert_eq!((dims[0].instruction, dims[0].dim), (InstrId(0), 0));
        assert_eq!((dims[2].instruction, dims[2].dim), (InstrId(1), 0));
        assert!(g.decision_dims::<&str>(&[]).unwrap().is_empty());
        assert!(matches!(
            g.decision_dims(&["nope"]),
            Err(GraphError::UnknownCandidate(_))
        ));
    }

    #[test]
    fn round_trip_is_identical() {
        let g = HloGraph::from_json_str(chain_json()).unwrap();
        let again = HloGraph::from_json_str(&g.to_json_string()).unwrap();
        assert_eq!(g, again);
    }
}
