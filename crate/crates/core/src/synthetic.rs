//! Small graphs with known optimal plans, and a random graph generator.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ir::{GraphFile, HloGraph, InstructionRecord};

/// Incremental construction of a graph file.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    file: GraphFile,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, opcode: &str, operands: &[u32], shape: &[u64]) -> u32 {
        let id = self.file.instructions.len() as u32;
        self.file.instructions.push(InstructionRecord {
            id,
            name: name.to_string(),
            opcode: opcode.to_string(),
            operands: operands.to_vec(),
            shape: shape.to_vec(),
            element_size: 4,
            is_forward: true,
            compute_cost_ms: None,
            op_name: None,
            dimensions: None,
            index: None,
        });
        id
    }

    pub fn param(&mut self, name: &str, shape: &[u64]) -> u32 {
        self.push(name, "parameter", &[], shape)
    }

    pub fn weight(&mut self, name: &str, shape: &[u64]) -> u32 {
        self.file.trainable_variables.push(name.to_string());
        self.param(name, shape)
    }

    pub fn op(&mut self, name: &str, opcode: &str, operands: &[u32], shape: &[u64]) -> u32 {
        self.push(name, opcode, operands, shape)
    }

    pub fn op_dims(&mut self, name: &str, opcode: &str, operands: &[u32], shape: &[u64], dims: &[usize]) -> u32 {
        let id = self.push(name, opcode, operands, shape);
        self.file.instructions[id as usize].dimensions = Some(dims.to_vec());
        id
    }

    pub fn shape(&self, id: u32) -> &[u64] {
        &self.file.instructions[id as usize].shape
    }

    pub fn set_cost(&mut self, id: u32, ms: f64) {
        self.file.instructions[id as usize].compute_cost_ms = Some(ms);
    }

    /// Rank-2 product with a cost proportional to its flops.
    pub fn dot(&mut self, name: &str, a: u32, b: u32) -> u32 {
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        let id = self.op(name, "dot", &[a, b], &[m, n]);
        self.set_cost(id, (2 * m * k * n) as f64 / 1e6);
        id
    }

    pub fn file(&self) -> &GraphFile {
        &self.file
    }

    pub fn build(self) -> HloGraph {
        HloGraph::from_file(self.file).expect("builder emits valid graphs")
    }
}

/// Normalizes the last dim of a [T, H] tensor with trainable scale and bias.
fn layer_norm(b: &mut GraphBuilder, prefix: &str, x: u32) -> u32 {
    let s = b.shape(x).to_vec();
    let (t, h) = (s[0], s[1]);
    let mean = b.op_dims(&format!("{prefix}.mean"), "reduce", &[x], &[t], &[1]);
    let mean_b = b.op_dims(&format!("{prefix}.mean_b"), "broadcast", &[mean], &[t, h], &[0]);
    let xc = b.op(&format!("{prefix}.centered"), "subtract", &[x, mean_b], &[t, h]);
    let sq = b.op(&format!("{prefix}.sq"), "multiply", &[xc, xc], &[t, h]);
    let var = b.op_dims(&format!("{prefix}.var"), "reduce", &[sq], &[t], &[1]);
    let var_b = b.op_dims(&format!("{prefix}.var_b"), "broadcast", &[var], &[t, h], &[0]);
    let xn = b.op(&format!("{prefix}.normed"), "divide", &[xc, var_b], &[t, h]);
    let scale = b.weight(&format!("{prefix}.scale"), &[h]);
    let scale_b = b.op_dims(&format!("{prefix}.scale_b"), "broadcast", &[scale], &[t, h], &[1]);
    let y = b.op(&format!("{prefix}.scaled"), "multiply", &[xn, scale_b], &[t, h]);
    let bias = b.weight(&format!("{prefix}.bias"), &[h]);
    let bias_b = b.op_dims(&format!("{prefix}.bias_b"), "broadcast", &[bias], &[t, h], &[1]);
    b.op(&format!("{prefix}.out"), "add", &[y, bias_b], &[t, h])
}

/// Row softmax of a [T, N] tensor.
fn softmax(b: &mut GraphBuilder, prefix: &str, x: u32) -> u32 {
    let s = b.shape(x).to_vec();
    let e = b.op(&format!("{prefix}.exp"), "exp", &[x], &s);
    let sum = b.op_dims(&format!("{prefix}.sum"), "reduce", &[e], &[s[0]], &[1]);
    let sum_b = b.op_dims(&format!("{prefix}.sum_b"), "broadcast", &[sum], &s, &[0]);
    b.op(&format!("{prefix}.probs"), "divide", &[e, sum_b], &s)
}

/// Single-head self attention; returns the projected output.
fn attention(b: &mut GraphBuilder, x: u32) -> u32 {
    let s = b.shape(x).to_vec();
    let (t, h) = (s[0], s[1]);
    let wq = b.weight("attn.q", &[h, h]);
    let wk = b.weight("attn.k", &[h, h]);
    let wv = b.weight("attn.v", &[h, h]);
    let wo = b.weight("attn.o", &[h, h]);
    let q = b.dot("attn.query", x, wq);
    let k = b.dot("attn.key", x, wk);
    let v = b.dot("attn.value", x, wv);
    let kt = b.op_dims("attn.key_t", "transpose", &[k], &[h, t], &[1, 0]);
    let scores = b.dot("attn.scores", q, kt);
    let probs = softmax(b, "attn.softmax", scores);
    let ctx = b.dot("attn.context", probs, v);
    b.dot("attn.proj", ctx, wo)
}

pub const ATTENTION_TOKENS: u64 = 16;
pub const ATTENTION_HIDDEN: u64 = 32;

/// Layer norm, attention and residual over a [16, 32] input, flattened at the end.
pub fn attention_block() -> HloGraph {
    let (t, h) = (ATTENTION_TOKENS, ATTENTION_HIDDEN);
    let mut b = GraphBuilder::new();
    let inp = b.param("input", &[t, h]);
    let x = layer_norm(&mut b, "ln", inp);
    let out = attention(&mut b, x);
    let res = b.op("residual", "add", &[out, inp], &[t, h]);
    b.op("flat", "reshape", &[res], &[t * h]);
    b.build()
}

/// Partitioned (variable name, dim) pairs of the attention block's best strategy.
pub fn attention_block_optimum() -> Vec<(&'static str, usize)> {
    vec![("attn.q", 1), ("attn.k", 1), ("attn.v", 1), ("attn.o", 0)]
}

/// Embedding, attention and a two-layer feed-forward, each with a residual.
pub fn t5_block() -> HloGraph {
    let (t, v, h, f) = (16, 64, 32, 64);
    let mut b = GraphBuilder::new();
    let tok = b.param("tokens", &[t, v]);
    let emb = b.weight("embedding", &[v, h]);
    let h0 = b.dot("embedded", tok, emb);
    let x1 = layer_norm(&mut b, "ln1", h0);
    let attn = attention(&mut b, x1);
    let h1 = b.op("residual1", "add", &[h0, attn], &[t, h]);
    let x2 = layer_norm(&mut b, "ln2", h1);
    let k1 = b.weight("ffn.wi", &[h, f]);
    let b1 = b.weight("ffn.bi", &[f]);
    let k2 = b.weight("ffn.wo", &[f, h]);
    let b2 = b.weight("ffn.bo", &[h]);
    let m1 = b.dot("ffn.inner", x2, k1);
    let b1b = b.op_dims("ffn.bi_b", "broadcast", &[b1], &[t, f], &[1]);
    let m1b = b.op("ffn.inner_biased", "add", &[m1, b1b], &[t, f]);
    let act = b.op("ffn.act", "tanh", &[m1b], &[t, f]);
    let m2 = b.dot("ffn.outer", act, k2);
    let b2b = b.op_dims("ffn.bo_b", "broadcast", &[b2], &[t, h], &[1]);
    let m2b = b.op("ffn.outer_biased", "add", &[m2, b2b], &[t, h]);
    let h2 = b.op("residual2", "add", &[h1, m2b], &[t, h]);
    b.op("flat", "reshape", &[h2], &[t * h]);
    b.build()
}

pub fn t5_block_optimum() -> Vec<(&'static str, usize)> {
    vec![
        ("embedding", 0),
        ("attn.q", 1),
        ("attn.k", 1),
        ("attn.v", 1),
        ("attn.o", 0),
        ("ffn.wi", 1),
        ("ffn.bi", 0),
        ("ffn.wo", 0),
    ]
}

/// Image classifier loss with features, one-hot labels, class weights and a loss scale as inputs.
pub fn vgg_graph() -> HloGraph {
    let (batch, classes, hidden) = (8, 10, 64);
    let mut b = GraphBuilder::new();
    let images = b.param("arg0.1", &[batch, 3, 8, 8]);
    let labels = b.param("arg1.2", &[batch, classes]);
    let class_weights = b.param("arg2.3", &[classes]);
    let loss_scale = b.param("arg3.4", &[1]);
    let x = b.op("flatten", "reshape", &[images], &[batch, 192]);
    let w1 = b.weight("fc1.weight", &[192, hidden]);
    let b1 = b.weight("fc1.bias", &[hidden]);
    let w2 = b.weight("fc2.weight", &[hidden, classes]);
    let b2 = b.weight("fc2.bias", &[classes]);
    let h = b.dot("fc1", x, w1);
    let b1b = b.op_dims("fc1.bias_b", "broadcast", &[b1], &[batch, hidden], &[1]);
    let hb = b.op("fc1.biased", "add", &[h, b1b], &[batch, hidden]);
    let act = b.op("fc1.act", "tanh", &[hb], &[batch, hidden]);
    let logits = b.dot("fc2", act, w2);
    let b2b = b.op_dims("fc2.bias_b", "broadcast", &[b2], &[batch, classes], &[1]);
    let lb = b.op("fc2.biased", "add", &[logits, b2b], &[batch, classes]);
    let probs = softmax(&mut b, "softmax", lb);
    let lp = b.op("picked", "multiply", &[probs, labels], &[batch, classes]);
    let cw = b.op_dims(
        "class_weights_b",
        "broadcast",
        &[class_weights],
        &[batch, classes],
        &[1],
    );
    let wl = b.op("weighted", "multiply", &[lp, cw], &[batch, classes]);
    let total = b.op_dims("total", "reduce", &[wl], &[], &[0, 1]);
    let ls = b.op("loss_scale", "reshape", &[loss_scale], &[]);
    b.op("scaled_loss", "multiply", &[total, ls], &[]);
    b.build()
}

pub fn vgg_optimum() -> Vec<(&'static str, usize)> {
    vec![("arg0.1", 0), ("arg1.2", 0)]
}

/// `layers` identical dense layers; every layer costs one millisecond forward.
pub fn uniform_chain(layers: usize, batch: u64, hidden: u64) -> HloGraph {
    let mut b = GraphBuilder::new();
    let mut h = b.param("input", &[batch, hidden]);
    for i in 0..layers {
        let w = b.weight(&format!("layer{i}.weight"), &[hidden, hidden]);
        let d = b.op(&format!("layer{i}.dot"), "dot", &[h, w], &[batch, hidden]);
        b.set_cost(d, 1.0);
        h = b.op(&format!("layer{i}.act"), "tanh", &[d], &[batch, hidden]);
    }
    b.build()
}

pub const BUNDLED: [&str; 4] = ["attention_block", "t5_block", "vgg", "uniform_chain"];

/// Bundled graph by name; the uniform chain has 32 layers.
pub fn bundled(name: &str) -> Option<HloGraph> {
    match name {
        "attention_block" => Some(attention_block()),
        "t5_block" => Some(t5_block()),
        "vgg" => Some(vgg_graph()),
        "uniform_chain" => Some(uniform_chain(32, 8, 64)),
        _ => None,
    }
}

/// Random DAG whose parameters (all trainable) expose at most `max_dims` dims.
pub fn random_graph(seed: u64, max_dims: usize) -> HloGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extents = [2u64, 3, 4, 6];
    let mut b = GraphBuilder::new();
    let mut pool: Vec<u32> = Vec::new();
    let mut dims = 0;
    let params = rng.random_range(2..=4);
    for p in 0..params {
        let rank = rng.random_range(1..=2usize).min(max_dims - dims);
        if rank == 0 {
            break;
        }
        let shape: Vec<u64> = (0..rank)
            .map(|_| *extents.choose(&mut rng).expect("non-empty"))
            .collect();
        dims += rank;
        pool.push(b.weight(&format!("p{p}"), &shape));
    }
    let ops = rng.random_range(3..=10);
    let mut made = 0;
    let mut attempts = 0;
    while made < ops && attempts < 200 {
        attempts += 1;
        let name = format!("n{}", b.file().instructions.len());
        let x = *pool.choose(&mut rng).expect("pool has parameters");
        let xs = b.shape(x).to_vec();
        let kind = rng.random_range(0..8);
        let id = match kind {
            0 | 1 => {
                // elementwise binary with a same-shaped partner, or itself
                let partners: Vec<u32> = pool.iter().copied().filter(|&y| b.shape(y) == xs.as_slice()).collect();
                let y = *partners.choose(&mut rng).expect("x matches itself");
                let op = ["add", "multiply", "subtract", "divide"][rng.random_range(0..4)];
                Some(b.op(&name, op, &[x, y], &xs))
            }
            2 => Some(b.op(&name, ["exp", "tanh"][rng.random_range(0..2)], &[x], &xs)),
            3 if xs.len() == 2 => Some(b.op_dims(&name, "transpose", &[x], &[xs[1], xs[0]], &[1, 0])),
            4 if xs.len() == 2 => {
                let partners: Vec<u32> = pool
                    .iter()
                    .copied()
                    .filter(|&y| b.shape(y).len() == 2 && b.shape(y)[0] == xs[1])
                    .collect();
                partners.choose(&mut rng).map(|&y| {
                    let n = b.shape(y)[1];
                    b.op(&name, "dot", &[x, y], &[xs[0], n])
                })
            }
            5 if !xs.is_empty() => {
                let d = rng.random_range(0..xs.len());
                let out: Vec<u64> = (0..xs.len()).filter(|&i| i != d).map(|i| xs[i]).collect();
                Some(b.op_dims(&name, "reduce", &[x], &out, &[d]))
            }
            6 if xs.len() == 1 => {
                let e = *extents.choose(&mut rng).expect("non-empty");
                let (out, map) = if rng.random_bool(0.5) {
                    (vec![e, xs[0]], vec![1])
                } else {
                    (vec![xs[0], e], vec![0])
                };
                Some(b.op_dims(&name, "broadcast", &[x], &out, &map))
            }
            7 => {
                let elems: u64 = xs.iter().product();
                let out = match xs.len() {
                    2 => vec![elems],
                    1 => {
                        let splits: Vec<u64> = extents.iter().copied().filter(|e| elems.is_multiple_of(*e)).collect();
                        match splits.choose(&mut rng) {
                            Some(&e) => vec![e, elems / e],
                            None => vec![elems],
                        }
                    }
                    _ => vec![1],
                };
                Some(b.op(&name, "reshape", &[x], &out))
            }
            _ => None,
        };
        if let Some(id) = id {
            pool.push(id);
            made += 1;
        }
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::DimIndex;
    use crate::sharding::{DimStatus, Outcome, Propagator};

    /// Best complete assignment by partition count, with the number of optima found.
    fn brute_force(g: &HloGraph, dims: Vec<DimIndex>, fixed: &[(DimIndex, DimStatus)]) -> (Vec<DimStatus>, usize) {
        let prop = Propagator::new(g, dims.clone());
        let n = dims.len();
        let mut best = (0usize, Vec::new(), 0usize);
        for mask in 0u64..(1 << n) {
            let mut seeds = fixed.to_vec();
            seeds.extend(dims.iter().enumerate().map(|(i, d)| {
                let s = if mask >> i & 1 == 1 {
                    DimStatus::Partitioned
                } else {
                    DimStatus::Replicated
                };
                (*d, s)
            }));
            let r = prop.propagate(&seeds);
            if r.outcome != Outcome::Complete {
                continue;
            }
            let p = mask.count_ones() as usize;
            if p > best.0 || best.1.is_empty() {
                let statuses = dims.iter().map(|d| r.status_of(d.instruction, d.dim)).collect();
                best = (p, statuses, 1);
            } else if p == best.0 {
                best.2 += 1;
            }
        }
        (best.1, best.2)
    }

    fn partitioned(g: &HloGraph, dims: &[DimIndex], statuses: &[DimStatus]) -> Vec<(String, usize)> {
        dims.iter()
            .zip(statuses)
            .filter(|(_, s)| **s == DimStatus::Partitioned)
            .map(|(d, _)| (g.instruction(d.instruction).unwrap().name.clone(), d.dim))
            .collect()
    }

    fn expect(list: Vec<(&str, usize)>) -> Vec<(String, usize)> {
        let mut v: Vec<(String, usize)> = list.into_iter().map(|(n, d)| (n.to_string(), d)).collect();
        v.sort();
        v
    }

    #[test]
    fn attention_optimum_is_unique() {
        let g = attention_block();
        let dims = g.trainable_dims();
        assert_eq!(dims.len(), 10);
        let (best, count) = brute_force(&g, dims.clone(), &[]);
        assert_eq!(count, 1);
        let mut got = partitioned(&g, &dims, &best);
        got.sort();
        assert_eq!(got, expect(attention_block_optimum()));
    }

    #[test]
    fn t5_optimum_is_unique() {
        let g = t5_block();
        let dims = g.trainable_dims();
        assert_eq!(dims.len(), 20);
        let (best, count) = brute_force(&g, dims.clone(), &[]);
        assert_eq!(count, 1);
        let mut got = partitioned(&g, &dims, &best);
        got.sort();
        assert_eq!(got, expect(t5_block_optimum()));
    }

    #[test]
    fn vgg_data_parallel_optimum() {
        let g = vgg_graph();
        let names = ["arg0.1", "arg1.2", "arg2.3", "arg3.4"];
        let dims = g.decision_dims(&names).unwrap();
        assert_eq!(dims.len(), 8);
        let fixed: Vec<_> = g
            .trainable_dims()
            .into_iter()
            .map(|d| (d, DimStatus::Replicated))
            .collect();
        let (best, count) = brute_force(&g, dims.clone(), &fixed);
        assert_eq!(count, 1);
        let mut got = partitioned(&g, &dims, &best);
        got.sort();
        assert_eq!(got, expect(vgg_optimum()));
    }

    #[test]
    fn random_graphs_are_valid_and_small() {
        for seed in 0..200 {
            let g = random_graph(seed, 8);
            let dims = g.trainable_dims();
            assert!(!dims.is_empty() && dims.len() <= 8, "seed {seed}");
            assert_eq!(random_graph(seed, 8), g);
        }
    }

    #[test]
    fn bundled_files_match_builders() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/graphs");
        for name in BUNDLED {
            let g = bundled(name).unwrap();
            let path = dir.join(format!("{name}.json"));
            if std::env::var_os("AUTOPLAN_BLESS").is_some() {
                std::fs::create_dir_all(&dir).unwrap();
                std::fs::write(&path, g.to_json_string() + "\n").unwrap();
            }
            assert_eq!(crate::ir::load_graph(&path).unwrap(), g, "{name} drifted");
        }
    }

    #[test]
    fn chain_has_uniform_layers() {
        let g = uniform_chain(4, 8, 16);
        assert_eq!(g.trainable_variables().len(), 4);
        assert_eq!(g.len(), 13);
    }
}
