use std::fmt;
use std::str::FromStr;

/// The bounded opcode vocabulary understood by the propagation rules.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Parameter,
    Constant,
    Dot,
    Add,
    Subtract,
    Multiply,
    Divide,
    Exp,
    Tanh,
    Reshape,
    Transpose,
    Broadcast,
    Reduce,
    Tuple,
    GetTupleElement,
}

impl Opcode {
    pub const ALL: [Opcode; 15] = [
        Opcode::Parameter,
        Opcode::Constant,
        Opcode::Dot,
        Opcode::Add,
        Opcode::Subtract,
        Opcode::Multiply,
        Opcode::Divide,
        Opcode::Exp,
        Opcode::Tanh,
        Opcode::Reshape,
        Opcode::Transpose,
        Opcode::Broadcast,
        Opcode::Reduce,
        Opcode::Tuple,
        Opcode::GetTupleElement,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Opcode::Parameter => "parameter",
            Opcode::Constant => "constant",
            Opcode::Dot => "dot",
            Opcode::Add => "add",
            Opcode::Subtract => "subtract",
            Opcode::Multiply => "multiply",
            Opcode::Divide => "divide",
            Opcode::Exp => "exp",
            Opcode::Tanh => "tanh",
            Opcode::Reshape => "reshape",
            Opcode::Transpose => "transpose",
            Opcode::Broadcast => "broadcast",
            Opcode::Reduce => "reduce",
            Opcode::Tuple => "tuple",
            Opcode::GetTupleElement => "get-tuple-element",
        }
    }

    /// Source opcodes take no operands.
    pub fn is_source(self) -> bool {
        matches!(self, Opcode::Parameter | Opcode::Constant)
    }

    pub fn is_elementwise(self) -> bool {
        matches!(
            self,
            Opcode::Add | Opcode::Subtract | Opcode::Multiply | Opcode::Divide | Opcode::Exp | Opcode::Tanh
        )
    }

    /// Required operand count, `None` for variadic opcodes.
    pub fn arity(self) -> Option<usize> {
        match self {
            Opcode::Parameter | Opcode::Constant => Some(0),
            Opcode::Dot | Opcode::Add | Opcode::Subtract | Opcode::Multiply | Opcode::Divide => Some(2),
            Opcode::Exp
            | Opcode::Tanh
            | Opcode::Reshape
            | Opcode::Transpose
            | Opcode::Broadcast
            | Opcode::Reduce
            | Opcode::GetTupleElement => Some(1),
            Opcode::Tuple => None,
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownOpcode(pub String);

impl FromStr for Opcode {
    type Err = UnknownOpcode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| UnknownOpcode(s.to_string()))
    }
}
