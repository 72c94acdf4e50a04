//! JSON graph file schema.

use serde::{Deserialize, Serialize};

fn default_element_size() -> u64 {
    4
}

fn default_true() -> bool {
    true
}

fn is_true(b: &bool) -> bool {
    *b
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphFile {
    pub instructions: Vec<InstructionRecord>,
    #[serde(default)]
    pub trainable_variables: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: u32,
    pub name: String,
    pub opcode: String,
    #[serde(default)]
    pub operands: Vec<u32>,
    #[serde(default)]
    pub shape: Vec<u64>,
    #[serde(default = "default_element_size")]
    pub element_size: u64,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    pub is_forward: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compute_cost_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_name: Option<String>,
    /// transpose: permutation; broadcast: operand-to-output dim map; reduce: reduced dims.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<Vec<usize>>,
    /// get-tuple-element: element index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<usize>,
}
