use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use super::rules::{node_rules, tensor_exclusivity, Clause};
use super::{DimStatus, Outcome, PropagationResult, ShardingSpec};
use crate::ir::{DimIndex, HloGraph, InstrId, Opcode};

const UNDECIDED: i8 = -1;

fn code(s: DimStatus) -> i8 {
    s.as_i8()
}

fn literal(var: usize, s: i8) -> usize {
    var * 2 + usize::from(s == 1)
}

/// Precomputed implication structure of a graph over a fixed candidate set.
///
/// Every dimension of every tensor is a variable; rules become implications
/// between (variable, status) literals, so propagation is a breadth-first
/// closure. The structure owns its data and is cheap to share.
#[derive(Debug)]
pub struct Propagator {
    node_ids: Vec<InstrId>,
    var_offset: Vec<usize>,
    var_node: Vec<usize>,
    /// CSR over literals: implied (literal, site node).
    imp_start: Vec<usize>,
    imp: Vec<(usize, usize)>,
    fixed_groups: Vec<(usize, Vec<usize>)>,
    watch_start: Vec<usize>,
    watch: Vec<usize>,
    candidates: Vec<DimIndex>,
    candidate_var: Vec<usize>,
    var_candidate: Vec<Option<usize>>,
}

impl Propagator {
    pub fn new(g: &HloGraph, candidates: Vec<DimIndex>) -> Self {
        let n = g.len();
        let mut var_offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for node in 0..n {
            var_offset.push(total);
            total += g.sharding_rank(node);
        }
        var_offset.push(total);
        let vars_of = |node: usize| (var_offset[node]..var_offset[node + 1]).collect::<Vec<_>>();
        let mut var_node = vec![0; total];
        for node in 0..n {
            var_node[var_offset[node]..var_offset[node + 1]].fill(node);
        }

        let mut edges: Vec<(usize, usize, usize)> = Vec::new();
        let mut fixed_groups = Vec::new();
        let push = |clauses: &[Clause], site: usize, edges: &mut Vec<(usize, usize, usize)>| {
            for c in clauses {
                match *c {
                    Clause::Same(a, b) => {
                        for s in [0, 1] {
                            edges.push((literal(a, s), literal(b, s), site));
                            edges.push((literal(b, s), literal(a, s), site));
                        }
                    }
                    Clause::Exclusive(a, b) => {
                        edges.push((literal(a, 1), literal(b, 0), site));
                        edges.push((literal(b, 1), literal(a, 0), site));
                    }
                }
            }
        };
        for node in 0..n {
            let out = vars_of(node);
            let mut clauses = Vec::new();
            if g.node(node).opcode != Opcode::Tuple {
                tensor_exclusivity(&out, &mut clauses);
            }
            let ops: Vec<Vec<usize>> = g.operand_nodes(node).iter().map(|&o| vars_of(o)).collect();
            let op_refs: Vec<&[usize]> = ops.iter().map(Vec::as_slice).collect();
            let rules = node_rules(g, node, &op_refs, &out);
            clauses.extend(rules.clauses);
            push(&clauses, node, &mut edges);
            if !rules.fixed.is_empty() {
                fixed_groups.push((node, rules.fixed));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        let mut imp_start = vec![0; 2 * total + 1];
        for &(from, _, _) in &edges {
            imp_start[from + 1] += 1;
        }
        for i in 0..2 * total {
            imp_start[i + 1] += imp_start[i];
        }
        let imp = edges.iter().map(|&(_, to, site)| (to, site)).collect();

        // a fixed group fires once any dim of its instruction or operands is decided
        let mut watchers: Vec<Vec<usize>> = vec![Vec::new(); total];
        for (k, (node, _)) in fixed_groups.iter().enumerate() {
            let scope = g.operand_nodes(*node).iter().copied().chain([*node]);
            for member in scope {
                for w in &mut watchers[var_offset[member]..var_offset[member + 1]] {
                    if !w.contains(&k) {
                        w.push(k);
                    }
                }
            }
        }
        let mut watch_start = Vec::with_capacity(total + 1);
        let mut watch = Vec::new();
        watch_start.push(0);
        for w in watchers {
            watch.extend(w);
            watch_start.push(watch.len());
        }

        let candidate_var: Vec<usize> = candidates
            .iter()
            .map(|d| {
                let node = g.node_of(d.instruction).expect("candidate belongs to graph");
                var_offset[node] + d.dim
            })
            .collect();
        let mut var_candidate = vec![None; total];
        for (i, &v) in candidate_var.iter().enumerate() {
            var_candidate[v] = Some(i);
        }

        Propagator {
            node_ids: g.instructions().iter().map(|i| i.id).collect(),
            var_offset,
            var_node,
            imp_start,
            imp,
            fixed_groups,
            watch_start,
            watch,
            candidates,
            candidate_var,
            var_candidate,
        }
    }

    pub fn shared(g: &HloGraph, candidates: Vec<DimIndex>) -> Arc<Self> {
        Arc::new(Self::new(g, candidates))
    }

    pub fn candidates(&self) -> &[DimIndex] {
        &self.candidates
    }

    pub fn num_vars(&self) -> usize {
        self.var_node.len()
    }

    pub fn candidate_var(&self, flat: usize) -> usize {
        self.candidate_var[flat]
    }

    pub fn candidate_of_var(&self, var: usize) -> Option<usize> {
        self.var_candidate[var]
    }

    pub fn var_of(&self, d: &DimIndex) -> Option<usize> {
        let node = self.node_ids.binary_search(&d.instruction).ok()?;
        let v = self.var_offset[node] + d.dim;
        (v < self.var_offset[node + 1]).then_some(v)
    }

    /// An empty closure to extend decision by decision.
    pub fn closure(&self) -> Closure {
        Closure {
            values: vec![UNDECIDED; self.num_vars()],
            origin: vec![0; self.num_vars()],
            fired: vec![false; self.fixed_groups.len()],
            trail: Vec::new(),
            conflict: None,
        }
    }

    /// One-shot propagation of a seed set; seeds are applied in ascending dim order.
    pub fn propagate(&self, seeds: &[(DimIndex, DimStatus)]) -> PropagationResult {
        let mut seeds: Vec<(usize, DimStatus)> = seeds
            .iter()
            .filter(|(_, s)| s.is_decided())
            .map(|(d, s)| (self.var_of(d).expect("seed dim exists"), *s))
            .collect();
        seeds.sort_unstable();
        let mut c = self.closure();
        for &(v, s) in &seeds {
            if c.decide(self, v, s).is_err() {
                break;
            }
        }
        let seed_vars: Vec<usize> = seeds.iter().map(|(v, _)| *v).collect();
        self.result(&c, &seed_vars)
    }

    pub fn result(&self, c: &Closure, seed_vars: &[usize]) -> PropagationResult {
        let outcome = self.outcome(c);
        let mut assignments = BTreeMap::new();
        for (node, id) in self.node_ids.iter().enumerate() {
            let spec = (self.var_offset[node]..self.var_offset[node + 1])
                .map(|v| c.status(v))
                .collect();
            assignments.insert(*id, ShardingSpec(spec));
        }
        let newly_decided = self
            .candidates
            .iter()
            .zip(&self.candidate_var)
            .filter(|(_, v)| c.values[**v] != UNDECIDED && !seed_vars.contains(v))
            .map(|(d, v)| (*d, c.status(*v)))
            .collect();
        PropagationResult {
            outcome,
            assignments,
            conflict_site: c.conflict.map(|n| self.node_ids[n]),
            newly_decided,
        }
    }

    pub fn outcome(&self, c: &Closure) -> Outcome {
        if c.conflict.is_some() {
            Outcome::Conflict
        } else if self.candidate_var.iter().all(|&v| c.values[v] != UNDECIDED) {
            Outcome::Complete
        } else {
            Outcome::Incomplete
        }
    }
}

/// A propagation closure: the set of statuses derived from the decisions so far.
#[derive(Clone, Debug)]
pub struct Closure {
    values: Vec<i8>,
    /// Node whose rule decided each var (its own node for direct decisions).
    origin: Vec<usize>,
    fired: Vec<bool>,
    trail: Vec<usize>,
    conflict: Option<usize>,
}

impl Closure {
    pub fn status(&self, var: usize) -> DimStatus {
        DimStatus::from_i8(self.values[var]).expect("valid code")
    }

    pub fn candidate_status(&self, prop: &Propagator, flat: usize) -> DimStatus {
        self.status(prop.candidate_var(flat))
    }

    pub fn is_conflict(&self) -> bool {
        self.conflict.is_some()
    }

    pub fn conflict_site(&self) -> Option<usize> {
        self.conflict
    }

    /// Variables in the order they were decided.
    pub fn trail(&self) -> &[usize] {
        &self.trail
    }

    /// Decides `var` and propagates to the fixed point. On conflict the
    /// closure is poisoned and the offending node is returned.
    pub fn decide(&mut self, prop: &Propagator, var: usize, status: DimStatus) -> Result<(), usize> {
        if let Some(site) = self.conflict {
            return Err(site);
        }
        let s = code(status);
        assert!(s != UNDECIDED, "cannot decide Undecided");
        match self.values[var] {
            UNDECIDED => {}
            cur if cur == s => return Ok(()),
            _ => {
                let site = self.origin[var];
                self.conflict = Some(site);
                return Err(site);
            }
        }
        let mut queue = VecDeque::new();
        self.set(var, s, prop.var_node[var], &mut queue);
        while let Some(lit) = queue.pop_front() {
            for &(to, site) in &prop.imp[prop.imp_start[lit]..prop.imp_start[lit + 1]] {
                if let Err(site) = self.imply(to / 2, (to % 2) as i8, site, &mut queue) {
                    self.conflict = Some(site);
                    return Err(site);
                }
            }
            let var = lit / 2;
            for &k in &prop.watch[prop.watch_start[var]..prop.watch_start[var + 1]] {
                if self.fired[k] {
                    continue;
                }
                self.fired[k] = true;
                let (site, ref vars) = prop.fixed_groups[k];
                for &v in vars {
                    if let Err(site) = self.imply(v, 0, site, &mut queue) {
                        self.conflict = Some(site);
                        return Err(site);
                    }
                }
            }
        }
        Ok(())
    }

    fn set(&mut self, var: usize, s: i8, site: usize, queue: &mut VecDeque<usize>) {
        self.values[var] = s;
        self.origin[var] = site;
        self.trail.push(var);
        queue.push_back(literal(var, s));
    }

    fn imply(&mut self, var: usize, s: i8, site: usize, queue: &mut VecDeque<usize>) -> Result<(), usize> {
        match self.values[var] {
            UNDECIDED => {
                self.set(var, s, site, queue);
                Ok(())
            }
            cur if cur == s => Ok(()),
            _ => Err(site),
        }
    }
}

/// One-shot propagation over a graph with the given candidate dims.
pub fn propagate(g: &HloGraph, candidates: Vec<DimIndex>, seeds: &[(DimIndex, DimStatus)]) -> PropagationResult {
    Propagator::new(g, candidates).propagate(seeds)
}
