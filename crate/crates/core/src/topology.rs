//! Hierarchical device clusters and bandwidth-only communication costs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_INTRA_GBPS: f64 = 130.0;
pub const DEFAULT_INTER_GBITS: f64 = 25.0;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("unknown topology preset `{0}`")]
    UnknownPreset(String),
    #[error("cannot read topology file {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed topology file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

/// Contiguous device range `[lo, hi)` of the linearized device list.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceGroup {
    pub lo: usize,
    pub hi: usize,
}

impl DeviceGroup {
    pub fn new(lo: usize, hi: usize) -> Self {
        assert!(lo < hi, "device group must be non-empty");
        DeviceGroup { lo, hi }
    }

    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceTopology {
    pub num_servers: usize,
    pub gpus_per_server: usize,
    /// Bytes per second.
    pub intra_bw: f64,
    pub inter_bw: f64,
    matrix: Vec<Vec<f64>>,
}

/// On-disk topology description.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyConfig {
    Cluster {
        servers: usize,
        gpus_per_server: usize,
        #[serde(rename = "intra_bw_GBps", default = "default_intra")]
        intra_bw_gbps: f64,
        #[serde(rename = "inter_bw_Gbps", default = "default_inter")]
        inter_bw_gbits: f64,
    },
    Matrix {
        /// Bytes per second; `null` on the diagonal.
        matrix: Vec<Vec<Option<f64>>>,
        #[serde(default)]
        gpus_per_server: Option<usize>,
    },
}

fn default_intra() -> f64 {
    DEFAULT_INTRA_GBPS
}

fn default_inter() -> f64 {
    DEFAULT_INTER_GBITS
}

impl DeviceTopology {
    pub fn cluster(servers: usize, gpus_per_server: usize, intra_bw: f64, inter_bw: f64) -> Self {
        assert!(
            servers >= 1 && gpus_per_server >= 1,
            "cluster needs at least one device"
        );
        let d = servers * gpus_per_server;
        let matrix = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        if i == j {
                            f64::INFINITY
                        } else if i / gpus_per_server == j / gpus_per_server {
                            intra_bw
                        } else {
                            inter_bw
                        }
                    })
                    .collect()
            })
            .collect();
        DeviceTopology {
            num_servers: servers,
            gpus_per_server,
            intra_bw,
            inter_bw,
            matrix,
        }
    }

    /// Cluster with the default interconnect (130 GB/s intra, 25 Gbit/s inter).
    pub fn standard(servers: usize, gpus_per_server: usize) -> Self {
        Self::cluster(
            servers,
            gpus_per_server,
            DEFAULT_INTRA_GBPS * 1e9,
            DEFAULT_INTER_GBITS * 1e9 / 8.0,
        )
    }

    pub fn preset(name: &str) -> Result<Self, TopologyError> {
        match name {
            "configA" => Ok(Self::standard(2, 8)),
            "configB" => Ok(Self::standard(3, 8)),
            "configC" => Ok(Self::standard(4, 8)),
            _ => Err(TopologyError::UnknownPreset(name.to_string())),
        }
    }

    pub fn from_matrix(matrix: Vec<Vec<f64>>, gpus_per_server: Option<usize>) -> Result<Self, TopologyError> {
        let d = matrix.len();
        if d == 0 || matrix.iter().any(|r| r.len() != d) {
            return Err(TopologyError::Invalid(
                "bandwidth matrix must be square and non-empty".into(),
            ));
        }
        let gps = gpus_per_server.unwrap_or(d);
        if gps == 0 || !d.is_multiple_of(gps) {
            return Err(TopologyError::Invalid(format!(
                "{d} devices do not split into servers of {gps}"
            )));
        }
        let (mut intra, mut inter) = (f64::INFINITY, f64::INFINITY);
        for (i, row) in matrix.iter().enumerate() {
            for (j, &bw) in row.iter().enumerate() {
                if i == j {
                    continue;
                }
                if bw.is_nan() || bw <= 0.0 || bw != matrix[j][i] {
                    return Err(TopologyError::Invalid(format!(
                        "entry ({i},{j}) must be positive and symmetric"
                    )));
                }
                if i / gps == j / gps {
                    intra = intra.min(bw);
                } else {
                    inter = inter.min(bw);
                }
            }
        }
        let mut matrix = matrix;
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = f64::INFINITY;
        }
        Ok(DeviceTopology {
            num_servers: d / gps,
            gpus_per_server: gps,
            intra_bw: intra,
            inter_bw: inter,
            matrix,
        })
    }

    pub fn from_config(cfg: TopologyConfig) -> Result<Self, TopologyError> {
        match cfg {
            TopologyConfig::Cluster {
                servers,
                gpus_per_server,
                intra_bw_gbps,
                inter_bw_gbits,
            } => {
                if servers == 0 || gpus_per_server == 0 || intra_bw_gbps <= 0.0 || inter_bw_gbits <= 0.0 {
                    return Err(TopologyError::Invalid(
                        "servers, gpus and bandwidths must be positive".into(),
                    ));
                }
                Ok(Self::cluster(
                    servers,
                    gpus_per_server,
                    intra_bw_gbps * 1e9,
                    inter_bw_gbits * 1e9 / 8.0,
                ))
            }
            TopologyConfig::Matrix {
                matrix,
                gpus_per_server,
            } => {
                let dense = matrix
                    .into_iter()
                    .map(|r| r.into_iter().map(|v| v.unwrap_or(f64::INFINITY)).collect())
                    .collect();
                Self::from_matrix(dense, gpus_per_server)
            }
        }
    }

    /// A preset name or a path to a JSON topology file.
    pub fn load(spec: &str) -> Result<Self, TopologyError> {
        if let Ok(t) = Self::preset(spec) {
            return Ok(t);
        }
        let path = Path::new(spec);
        if !path.exists() {
            return Err(TopologyError::UnknownPreset(spec.to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| TopologyError::Io {
            path: spec.to_string(),
            source,
        })?;
        Self::from_config(serde_json::from_str(&text)?)
    }

    /// Cluster form when it reproduces the matrix exactly, else the full matrix.
    pub fn to_config(&self) -> TopologyConfig {
        let cluster = TopologyConfig::Cluster {
            servers: self.num_servers,
            gpus_per_server: self.gpus_per_server,
            intra_bw_gbps: self.intra_bw / 1e9,
            inter_bw_gbits: self.inter_bw * 8.0 / 1e9,
        };
        if Self::from_config(cluster.clone()).is_ok_and(|t| t.matrix == self.matrix) {
            return cluster;
        }
        TopologyConfig::Matrix {
            matrix: self
                .matrix
                .iter()
                .map(|r| r.iter().map(|v| v.is_finite().then_some(*v)).collect())
                .collect(),
            gpus_per_server: Some(self.gpus_per_server),
        }
    }

    pub fn num_devices(&self) -> usize {
        self.matrix.len()
    }

    pub fn bandwidth(&self, from: usize, to: usize) -> f64 {
        self.matrix[from][to]
    }

    pub fn bandwidth_matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    /// Off-diagonal bandwidths divided by the largest one; the diagonal maps to 1.
    pub fn scaled_matrix(&self) -> Vec<f64> {
        let max = self
            .matrix
            .iter()
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        self.matrix
            .iter()
            .flatten()
            .map(|&v| if v.is_finite() && max > 0.0 { v / max } else { 1.0 })
            .collect()
    }

    /// Slowest link on the ring through the group's devices.
    pub fn ring_bandwidth(&self, group: DeviceGroup) -> f64 {
        let n = group.len();
        (0..n)
            .map(|k| {
                let a = group.lo + k;
                let b = group.lo + (k + 1) % n;
                self.bandwidth(a, b)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Ring allreduce: 2(n-1)/n of the payload over the slowest ring link.
    pub fn allreduce_time(&self, bytes: f64, group: DeviceGroup) -> f64 {
        let n = group.len();
        if n <= 1 || bytes == 0.0 {
            return 0.0;
        }
        2.0 * (n as f64 - 1.0) / n as f64 * bytes / self.ring_bandwidth(group)
    }

    pub fn transfer_time(&self, bytes: f64, from: usize, to: usize) -> f64 {
        if from == to || bytes == 0.0 {
            return 0.0;
        }
        bytes / self.bandwidth(from, to)
    }
}
