//! Sharding decisions and their propagation through the graph.

mod propagate;
mod rules;

pub use propagate::{propagate, Closure, Propagator};
pub use rules::{rule_for, RuleConflict};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::ir::{DimIndex, InstrId};

/// Sharding status of one tensor dimension, serialized as 1 / 0 / -1.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum DimStatus {
    Partitioned,
    Replicated,
    #[default]
    Undecided,
}

impl DimStatus {
    pub fn as_i8(self) -> i8 {
        match self {
            DimStatus::Partitioned => 1,
            DimStatus::Replicated => 0,
            DimStatus::Undecided => -1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            1 => Some(DimStatus::Partitioned),
            0 => Some(DimStatus::Replicated),
            -1 => Some(DimStatus::Undecided),
            _ => None,
        }
    }

    pub fn is_decided(self) -> bool {
        self != DimStatus::Undecided
    }
}

impl fmt::Display for DimStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_i8())
    }
}

impl Serialize for DimStatus {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for DimStatus {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i8::deserialize(d)?;
        DimStatus::from_i8(v).ok_or_else(|| serde::de::Error::custom(format!("dim status must be 1, 0 or -1, got {v}")))
    }
}

/// Per-dimension statuses of one tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShardingSpec(pub Vec<DimStatus>);

impl ShardingSpec {
    pub fn undecided(rank: usize) -> Self {
        ShardingSpec(vec![DimStatus::Undecided; rank])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    /// The partitioned dim, if any.
    pub fn partitioned_dim(&self) -> Option<usize> {
        self.0.iter().position(|s| *s == DimStatus::Partitioned)
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().filter(|s| **s == DimStatus::Partitioned).count() <= 1
    }

    pub fn is_decided(&self) -> bool {
        self.0.iter().all(|s| s.is_decided())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Complete,
    Incomplete,
    Conflict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropagationResult {
    pub outcome: Outcome,
    pub assignments: BTreeMap<InstrId, ShardingSpec>,
    pub conflict_site: Option<InstrId>,
    /// Candidate dims decided by propagation rather than by a seed.
    pub newly_decided: Vec<(DimIndex, DimStatus)>,
}

impl PropagationResult {
    pub fn is_conflict(&self) -> bool {
        self.outcome == Outcome::Conflict
    }

    pub fn status_of(&self, instruction: InstrId, dim: usize) -> DimStatus {
        self.assignments
            .get(&instruction)
            .and_then(|s| s.0.get(dim).copied())
            .unwrap_or_default()
    }
}

/// Flat decision vector over candidate dims with the current cursor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub statuses: Vec<DimStatus>,
    pub current_position: usize,
}

impl DecisionVector {
    pub fn undecided(len: usize) -> Self {
        DecisionVector {
            statuses: vec![DimStatus::Undecided; len],
            current_position: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.statuses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statuses.is_empty()
    }

    pub fn count(&self, status: DimStatus) -> usize {
        self.statuses.iter().filter(|s| **s == status).count()
    }
}
