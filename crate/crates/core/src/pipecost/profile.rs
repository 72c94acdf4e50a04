use std::collections::HashMap;

use super::{PipeError, StageMetrics};
use crate::ir::{HloGraph, InstrId};

/// Backward cost relative to forward when only forward costs are profiled.
pub const DEFAULT_BACKWARD_MULTIPLIER: f64 = 2.0;

/// Per-position costs of a linearized forward computation.
///
/// A pivot `p` cuts after position `p`, so the valid pivots are `0..len-1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineProfile {
    pub names: Vec<String>,
    /// Forward plus backward time of each position.
    pub compute_ms: Vec<f64>,
    /// Bytes crossing a cut placed after each position.
    pub activation_bytes: Vec<f64>,
    pub param_bytes: Vec<f64>,
    pub variables: Vec<usize>,
    ids: Vec<InstrId>,
    prefix: Prefix,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Prefix {
    compute: Vec<f64>,
    params: Vec<f64>,
    vars: Vec<usize>,
}

impl Prefix {
    fn build(p: &PipelineProfile) -> Self {
        let mut out = Prefix {
            compute: vec![0.0],
            params: vec![0.0],
            vars: vec![0],
        };
        for i in 0..p.len() {
            out.compute.push(out.compute[i] + p.compute_ms[i]);
            out.params.push(out.params[i] + p.param_bytes[i]);
            out.vars.push(out.vars[i] + p.variables[i]);
        }
        out
    }
}

impl PipelineProfile {
    pub fn from_arrays(
        names: Vec<String>,
        compute_ms: Vec<f64>,
        activation_bytes: Vec<f64>,
        param_bytes: Vec<f64>,
        variables: Vec<usize>,
    ) -> Result<Self, PipeError> {
        let n = compute_ms.len();
        if n == 0 {
            return Err(PipeError::EmptyProfile);
        }
        if [names.len(), activation_bytes.len(), param_bytes.len(), variables.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(PipeError::LengthMismatch);
        }
        let finite_nonneg = |v: &f64| v.is_finite() && *v >= 0.0;
        if !compute_ms
            .iter()
            .chain(&activation_bytes)
            .chain(&param_bytes)
            .all(finite_nonneg)
        {
            return Err(PipeError::NegativeCost);
        }
        let ids = (0..n as u32).map(InstrId).collect();
        let mut p = PipelineProfile {
            names,
            compute_ms,
            activation_bytes,
            param_bytes,
            variables,
            ids,
            prefix: Prefix::default(),
        };
        p.prefix = Prefix::build(&p);
        Ok(p)
    }

    /// Profiles the forward subgraph; instructions without a cost count as free.
    pub fn from_graph(g: &HloGraph, backward_multiplier: f64) -> Result<Self, PipeError> {
        let order = g.forward_nodes();
        let n = order.len();
        if n == 0 {
            return Err(PipeError::EmptyProfile);
        }
        let position: HashMap<usize, usize> = order.iter().enumerate().map(|(p, &node)| (node, p)).collect();
        let mut compute = vec![0.0; n];
        let mut params = vec![0.0; n];
        let mut vars = vec![0usize; n];
        // difference array: a tensor is live across cuts in [produced, last consumer)
        let mut live = vec![0.0; n + 1];
        for (p, &node) in order.iter().enumerate() {
            let instr = g.node(node);
            compute[p] = instr.compute_cost_ms.unwrap_or(0.0) * (1.0 + backward_multiplier);
            let consumers: Vec<usize> = g
                .consumers(node)
                .iter()
                .filter_map(|c| position.get(c).copied())
                .collect();
            if g.is_trainable(node) {
                let at = consumers.iter().copied().min().unwrap_or(p);
                params[at] += g.byte_size(node) as f64;
                vars[at] += 1;
            } else if !instr.opcode.is_source() {
                if let Some(&last) = consumers.iter().max() {
                    let bytes = g.byte_size(node) as f64;
                    live[p] += bytes;
                    live[last] -= bytes;
                }
            }
        }
        let mut activation = vec![0.0; n];
        let mut acc = 0.0;
        for p in 0..n {
            acc += live[p];
            activation[p] = acc.max(0.0);
        }
        let names = order.iter().map(|&node| g.node(node).name.clone()).collect();
        let mut profile = Self::from_arrays(names, compute, activation, params, vars)?;
        profile.ids = order.iter().map(|&node| g.node(node).id).collect();
        Ok(profile)
    }

    pub fn len(&self) -> usize {
        self.compute_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compute_ms.is_empty()
    }

    pub fn ids(&self) -> &[InstrId] {
        &self.ids
    }

    pub fn total_compute_ms(&self) -> f64 {
        self.prefix.compute[self.len()]
    }

    pub fn total_param_bytes(&self) -> f64 {
        self.prefix.params[self.len()]
    }

    pub fn position_of(&self, id: InstrId) -> Option<usize> {
        self.ids.iter().position(|&i| i == id)
    }

    /// Compute of positions `[lo, hi)`.
    pub fn compute_between(&self, lo: usize, hi: usize) -> f64 {
        self.prefix.compute[hi] - self.prefix.compute[lo]
    }

    pub fn params_between(&self, lo: usize, hi: usize) -> f64 {
        self.prefix.params[hi] - self.prefix.params[lo]
    }

    pub fn vars_between(&self, lo: usize, hi: usize) -> usize {
        self.prefix.vars[hi] - self.prefix.vars[lo]
    }

    pub fn check_pivots(&self, pivots: &[usize]) -> Result<(), PipeError> {
        if pivots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipeError::PivotOrder);
        }
        if let Some(&p) = pivots.iter().find(|&&p| p + 1 >= self.len()) {
            return Err(PipeError::PivotOutOfRange(p));
        }
        Ok(())
    }

    /// Metrics of the stages delimited by `pivots` (positions).
    pub fn stage_metrics(&self, pivots: &[usize]) -> Result<Vec<StageMetrics>, PipeError> {
        self.check_pivots(pivots)?;
        let mut bounds = Vec::with_capacity(pivots.len() + 2);
        bounds.push(0);
        bounds.extend(pivots.iter().map(|p| p + 1));
        bounds.push(self.len());
        Ok(bounds
            .windows(2)
            .enumerate()
            .map(|(s, w)| StageMetrics {
                compute_ms: self.compute_between(w[0], w[1]),
                activation_bytes: if s < pivots.len() {
                    self.activation_bytes[pivots[s]]
                } else {
                    0.0
                },
                param_bytes: self.params_between(w[0], w[1]),
                num_variables: self.vars_between(w[0], w[1]),
            })
            .collect())
    }
}

/// Stage metrics for pivots given as instruction ids of the forward subgraph.
pub fn stage_metrics(
    g: &HloGraph,
    pivots: &[InstrId],
    backward_multiplier: f64,
) -> Result<Vec<StageMetrics>, PipeError> {
    let profile = PipelineProfile::from_graph(g, backward_multiplier)?;
    let positions = pivots
        .iter()
        .map(|&id| profile.position_of(id).ok_or(PipeError::PivotNotForward(id)))
        .collect::<Result<Vec<_>, _>>()?;
    profile.stage_metrics(&positions)
}
