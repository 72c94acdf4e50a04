//! Linkage groups: the candidate decisions implied by a single seed decision.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ir::{DimIndex, HloGraph};
use crate::sharding::{DimStatus, Propagator};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageGroup {
    pub trigger: (DimIndex, DimStatus),
    pub implied: Vec<(DimIndex, DimStatus)>,
    /// False when the trigger alone already conflicts.
    pub feasible: bool,
}

impl LinkageGroup {
    pub fn size(&self) -> usize {
        self.implied.len()
    }
}

/// Both groups (partitioned, replicated) of every candidate dim, by flat index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkageGroups {
    groups: Vec<[LinkageGroup; 2]>,
}

fn slot(status: DimStatus) -> usize {
    match status {
        DimStatus::Partitioned => 0,
        DimStatus::Replicated => 1,
        DimStatus::Undecided => panic!("undecided is not a trigger"),
    }
}

impl LinkageGroups {
    /// An empty map for tasks without linkage.
    pub fn none(dims: &[DimIndex]) -> Self {
        let empty = |d: DimIndex, s| LinkageGroup {
            trigger: (d, s),
            implied: Vec::new(),
            feasible: true,
        };
        LinkageGroups {
            groups: dims
                .iter()
                .map(|&d| [empty(d, DimStatus::Partitioned), empty(d, DimStatus::Replicated)])
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, flat: usize, status: DimStatus) -> &LinkageGroup {
        &self.groups[flat][slot(status)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkageGroup> {
        self.groups.iter().flatten()
    }

    pub fn max_size(&self, flat: usize) -> usize {
        self.groups[flat].iter().map(LinkageGroup::size).max().unwrap_or(0)
    }
}

fn group_for(prop: &Propagator, flat: usize, status: DimStatus) -> LinkageGroup {
    let dim = prop.candidates()[flat];
    let mut c = prop.closure();
    if c.decide(prop, prop.candidate_var(flat), status).is_err() {
        return LinkageGroup {
            trigger: (dim, status),
            implied: Vec::new(),
            feasible: false,
        };
    }
    let mut implied: Vec<(DimIndex, DimStatus)> = c
        .trail()
        .iter()
        .filter_map(|&v| prop.candidate_of_var(v))
        .filter(|&i| i != flat)
        .map(|i| (prop.candidates()[i], c.candidate_status(prop, i)))
        .collect();
    implied.sort_unstable_by_key(|(d, _)| d.flat_index);
    LinkageGroup {
        trigger: (dim, status),
        implied,
        feasible: true,
    }
}

/// Runs single-seed propagation for every candidate dim and both statuses.
/// `threads` > 1 fans the work out over scoped worker threads.
pub fn extract_linkage_groups(prop: &Propagator, threads: usize) -> LinkageGroups {
    let n = prop.candidates().len();
    let work = |flat: usize| {
        [
            group_for(prop, flat, DimStatus::Partitioned),
            group_for(prop, flat, DimStatus::Replicated),
        ]
    };
    let threads = threads.clamp(1, n.max(1));
    let groups = if threads == 1 {
        (0..n).map(work).collect()
    } else {
        let chunk = n.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let work = &work;
                    s.spawn(move || (t * chunk..((t + 1) * chunk).min(n)).map(work).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("linkage worker panicked"))
                .collect()
        })
    };
    LinkageGroups { groups }
}

/// Decision order: larger linkage first, ties by flat index.
pub fn sorted_decision_order(groups: &LinkageGroups) -> Vec<usize> {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(groups.max_size(i)), i));
    order
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("linkage cache i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("linkage cache format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    groups: LinkageGroups,
}

/// Content hash of a graph together with its candidate dims.
pub fn cache_key(g: &HloGraph, dims: &[DimIndex]) -> String {
    let mut h = Sha256::new();
    h.update(g.to_json_string().as_bytes());
    h.update(serde_json::to_vec(dims).expect("dims serialize"));
    hex::encode(h.finalize())
}

/// Loads groups from `path` if its key matches; otherwise extracts and writes them.
pub fn extract_cached(
    g: &HloGraph,
    prop: &Propagator,
    path: &Path,
    threads: usize,
) -> Result<LinkageGroups, CacheError> {
    let key = cache_key(g, prop.candidates());
    if let Ok(text) = std::fs::read_to_string(path) {
        if let Ok(file) = serde_json::from_str::<CacheFile>(&text) {
            if file.key == key {
                return Ok(file.groups);
            }
        }
    }
    let groups = extract_linkage_groups(prop, threads);
    let file = CacheFile { key, groups };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(file.groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use DimStatus::{Partitioned as P, Replicated as R};

    fn add_graph() -> HloGraph {
        HloGraph::from_json_str(
            r#"{"instructions":[
            {"id":0,"name":"a","opcode":"parameter","shape":[8]},
            {"id":1,"name":"b","opcode":"parameter","shape":[8]},
            {"id":2,"name":"c","opcode":"parameter","shape":[3]},
            {"id":3,"name":"s","opcode":"add","operands":[0,1],"shape":[8]}],
            "trainable_variables":["a","b","c"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn add_links_operands_and_isolated_is_empty() {
        let g = add_graph();
        let prop = Propagator::new(&g, g.trainable_dims());
        let groups = extract_linkage_groups(&prop, 1);
        let a = groups.get(0, P);
        assert_eq!(a.size(), 1);
        assert_eq!(a.implied[0].0.flat_index, 1);
        assert_eq!(a.implied[0].1, P);
        assert_eq!(groups.get(2, R).size(), 0);
        assert_eq!(sorted_decision_order(&groups), vec![0, 1, 2]);
    }

    #[test]
    fn threaded_extraction_matches_serial() {
        let g = add_graph();
        let prop = Propagator::new(&g, g.trainable_dims());
        assert_eq!(extract_linkage_groups(&prop, 1), extract_linkage_groups(&prop, 3));
    }

    #[test]
    fn sort_contract() {
        let dims: Vec<DimIndex> = (0..3)
            .map(|i| DimIndex {
                flat_index: i,
                instruction: crate::ir::InstrId(i as u32),
                dim: 0,
            })
            .collect();
        let mut groups = LinkageGroups::none(&dims);
        assert_eq!(sorted_decision_order(&groups), vec![0, 1, 2]);
        let filler = |n: usize| vec![(dims[0], R); n];
        groups.groups[0][0].implied = filler(3);
        groups.groups[2][1].implied = filler(3);
        assert_eq!(sorted_decision_order(&groups), vec![0, 2, 1]);
    }

    #[test]
    fn cache_round_trip() {
        let g = add_graph();
        let prop = Propagator::new(&g, g.trainable_dims());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("linkage.json");
        let first = extract_cached(&g, &prop, &path, 1).unwrap();
        let second = extract_cached(&g, &prop, &path, 1).unwrap();
        assert_eq!(first, second);
    }
}
