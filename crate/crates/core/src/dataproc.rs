//! Profile processing for pipeline inference: prefix sums, coarsening to a
//! fixed granularity, joint normalization, and synthetic generation.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Add, Div};
use std::path::Path;
use std::str::FromStr;

use num_traits::Zero;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution as _, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRANULARITY: usize = 128;

/// Numeric bound for the processing pipeline; satisfied by floats and exact rationals.
pub trait ProfileValue: Clone + PartialOrd + Zero + Add<Output = Self> + Div<Output = Self> {}

impl<T: Clone + PartialOrd + Zero + Add<Output = T> + Div<Output = T>> ProfileValue for T {}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("input of length {len} is shorter than the target {target}")]
    TooShort { len: usize, target: usize },
    #[error("profile arrays differ in length")]
    LengthMismatch,
    #[error("profile values must be nonnegative")]
    Negative,
    #[error("unknown distribution `{0}`")]
    UnknownDistribution(String),
    #[error("profile i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("profile csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Raw per-instruction profile: compute (ms), cut activation (bytes), parameters (bytes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileArrays<T> {
    #[serde(default)]
    pub names: Vec<String>,
    #[serde(rename = "C")]
    pub c: Vec<T>,
    #[serde(rename = "A")]
    pub a: Vec<T>,
    #[serde(rename = "W")]
    pub w: Vec<T>,
}

impl<T: ProfileValue> ProfileArrays<T> {
    pub fn new(c: Vec<T>, a: Vec<T>, w: Vec<T>) -> Result<Self, DataError> {
        let p = ProfileArrays {
            names: Vec::new(),
            c,
            a,
            w,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.c.len();
        if n == 0 || self.a.len() != n || self.w.len() != n || !(self.names.is_empty() || self.names.len() == n) {
            return Err(DataError::LengthMismatch);
        }
        if self.c.iter().chain(&self.a).chain(&self.w).any(|v| *v < T::zero()) {
            return Err(DataError::Negative);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }
}

/// Fixed-granularity, jointly normalized arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarsenedArrays<T> {
    #[serde(rename = "C")]
    pub c: Vec<T>,
    #[serde(rename = "A")]
    pub a: Vec<T>,
    #[serde(rename = "W")]
    pub w: Vec<T>,
}

pub fn prefix_sum<T: ProfileValue>(xs: &[T]) -> Vec<T> {
    let mut acc = T::zero();
    xs.iter()
        .map(|x| {
            acc = acc.clone() + x.clone();
            acc.clone()
        })
        .collect()
}

/// Right-endpoint sampling: `out[i] = xs[floor((i+1)·N/target) − 1]`.
pub fn coarsen<T: Clone>(xs: &[T], target: usize) -> Result<Vec<T>, DataError> {
    let n = xs.len();
    if n < target || target == 0 {
        return Err(DataError::TooShort { len: n, target });
    }
    Ok((0..target).map(|i| xs[(i + 1) * n / target - 1].clone()).collect())
}

/// Like [`coarsen`], but short inputs are right-padded with `fill` first.
pub fn coarsen_padded<T: Clone>(xs: &[T], target: usize, fill: T) -> Vec<T> {
    if xs.len() >= target {
        return coarsen(xs, target).expect("long enough");
    }
    let mut v = xs.to_vec();
    v.resize(target, fill);
    v
}

/// Divides all three arrays by their single joint maximum.
pub fn normalize_joint<T: ProfileValue>(c: &[T], a: &[T], w: &[T]) -> CoarsenedArrays<T> {
    let mut max = T::zero();
    for v in c.iter().chain(a).chain(w) {
        if *v > max {
            max = v.clone();
        }
    }
    let scale = |xs: &[T]| -> Vec<T> {
        if max.is_zero() {
            xs.to_vec()
        } else {
            xs.iter().map(|x| x.clone() / max.clone()).collect()
        }
    };
    CoarsenedArrays {
        c: scale(c),
        a: scale(a),
        w: scale(w),
    }
}

/// Full pipeline: prefix-sum C and W, coarsen all three, normalize jointly.
pub fn process<T: ProfileValue>(p: &ProfileArrays<T>, target: usize) -> CoarsenedArrays<T> {
    let c = prefix_sum(&p.c);
    let w = prefix_sum(&p.w);
    let last = |xs: &[T]| xs.last().cloned().unwrap_or_else(T::zero);
    let c2 = coarsen_padded(&c, target, last(&c));
    let w2 = coarsen_padded(&w, target, last(&w));
    let a2 = coarsen_padded(&p.a, target, T::zero());
    normalize_joint(&c2, &a2, &w2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Uniform,
    /// Clipped to [0, 1].
    Normal {
        mean: f64,
        std: f64,
    },
    /// Draws divided by `n`.
    Binomial {
        n: u64,
        p: f64,
    },
}

impl FromStr for Distribution {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Distribution::Uniform),
            "normal" => Ok(Distribution::Normal { mean: 0.5, std: 0.2 }),
            "binomial" => Ok(Distribution::Binomial { n: 10, p: 0.5 }),
            _ => Err(DataError::UnknownDistribution(s.to_string())),
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distribution::Uniform => "uniform",
            Distribution::Normal { .. } => "normal",
            Distribution::Binomial { .. } => "binomial",
        })
    }
}

impl Distribution {
    fn draw<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            Distribution::Uniform => (0..n).map(|_| rng.random::<f64>()).collect(),
            Distribution::Normal { mean, std } => {
                let d = Normal::new(mean, std).expect("valid normal");
                (0..n).map(|_| d.sample(rng).clamp(0.0, 1.0)).collect()
            }
            Distribution::Binomial { n: trials, p } => {
                let d = Binomial::new(trials, p).expect("valid binomial");
                (0..n).map(|_| d.sample(rng) as f64 / trials as f64).collect()
            }
        }
    }
}

/// Random raw profile of length `n`, drawn in the order C, A, W.
pub fn generate_profile(dist: Distribution, n: usize, seed: u64) -> ProfileArrays<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dist.draw(n, &mut rng);
    let a = dist.draw(n, &mut rng);
    let w = dist.draw(n, &mut rng);
    ProfileArrays {
        names: Vec::new(),
        c,
        a,
        w,
    }
}

pub fn generate_environment(dist: Distribution, n: usize, seed: u64) -> Result<CoarsenedArrays<f64>, DataError> {
    if n < GRANULARITY {
        return Err(DataError::TooShort {
            len: n,
            target: GRANULARITY,
        });
    }
    Ok(process(&generate_profile(dist, n, seed), GRANULARITY))
}

/// One line of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub seed: u64,
    pub distribution: Distribution,
    pub n: usize,
    #[serde(flatten)]
    pub arrays: CoarsenedArrays<f64>,
}

/// Writes `count` environments as JSON lines with seeds `seed, seed+1, ...`.
pub fn write_dataset<W: Write>(
    out: &mut W,
    dist: Distribution,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<(), DataError> {
    for k in 0..count as u64 {
        let s = seed.wrapping_add(k);
        let rec = DatasetRecord {
            seed: s,
            distribution: dist,
            n,
            arrays: generate_environment(dist, n, s)?,
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>, DataError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CsvRow {
    name: String,
    #[serde(rename = "C")]
    c: f64,
    #[serde(rename = "A")]
    a: f64,
    #[serde(rename = "W")]
    w: f64,
}

/// Reads a profile from JSON (`{names, C, A, W}`) or CSV (`name,C,A,W`).
pub fn load_profile(path: &Path) -> Result<ProfileArrays<f64>, DataError> {
    let p = if path.extension().is_some_and(|e| e == "csv") {
        let mut p = ProfileArrays {
            names: Vec::new(),
            c: Vec::new(),
            a: Vec::new(),
            w: Vec::new(),
        };
        for row in csv::Reader::from_path(path)?.deserialize() {
            let row: CsvRow = row?;
            p.names.push(row.name);
            p.c.push(row.c);
            p.a.push(row.a);
            p.w.push(row.w);
        }
        p
    } else {
        serde_json::from_str(&std::fs::read_to_string(path)?)?
    };
    p.validate()?;
    Ok(p)
}
