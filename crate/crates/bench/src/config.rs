//! Sweep configuration and grid expansion.

use std::path::Path;

use clr_core::em::{Algorithm, EmConfig};
use clr_core::rng::hash_seeds;
use clr_core::ProblemSpec;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Cartesian grid of problem classes. Every list is one axis; an empty axis
/// makes an empty grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub k: Vec<usize>,
    pub p: Vec<usize>,
    /// Balanced per-cluster sample sizes.
    pub n_k: Vec<usize>,
    /// Unbalanced cluster proportions, each scaled to `total_n`.
    pub proportions: Vec<Vec<f64>>,
    pub total_n: Option<usize>,
    pub dp: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub corrupt_frac: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            k: Vec::new(),
            p: Vec::new(),
            n_k: Vec::new(),
            proportions: Vec::new(),
            total_n: None,
            dp: Vec::new(),
            eta: Vec::new(),
            delta: vec![0.0],
            corrupt_frac: vec![0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub base_seed: u64,
    pub problems_per_cell: usize,
    pub workers: usize,
    pub algorithms: Vec<Algorithm>,
    /// Restart budgets; every algorithm runs once per entry.
    pub restarts: Vec<usize>,
    pub grid: Grid,
    /// Engine settings shared by every fit. `k`, `seed` and `restarts` are
    /// overwritten per run.
    pub em: EmConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            base_seed: 0,
            problems_per_cell: 1,
            workers: 1,
            algorithms: vec![Algorithm::Em, Algorithm::EmIs],
            restarts: vec![0],
            grid: Grid::default(),
            em: EmConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn from_toml_str(s: &str) -> std::result::Result<Self, String> {
        toml::from_str(s).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| BenchError::parse(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(BenchError::Invalid("workers must be at least 1".into()));
        }
        if !self.grid.proportions.is_empty() && self.grid.total_n.is_none() {
            return Err(BenchError::Invalid("grid.proportions needs grid.total_n".into()));
        }
        Ok(())
    }

    /// All cells in deterministic nesting order k, p, sizes, dp, eta, delta, corrupt_frac.
    pub fn cells(&self) -> Vec<Cell> {
        let g = &self.grid;
        let mut sizes: Vec<SizeSpec> = g.n_k.iter().map(|&n| SizeSpec::PerCluster(n)).collect();
        if let Some(total) = g.total_n {
            sizes.extend(g.proportions.iter().map(|p| SizeSpec::Proportions(p.clone(), total)));
        }
        let mut out = Vec::new();
        for &k in &g.k {
            for &p in &g.p {
                for s in &sizes {
                    for &dp in &g.dp {
                        for &eta in &g.eta {
                            for &delta in &g.delta {
                                for &corrupt_frac in &g.corrupt_frac {
                                    out.push(Cell {
                                        k,
                                        p,
                                        sizes: s.clone(),
                                        dp,
                                        eta,
                                        delta,
                                        corrupt_frac,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SizeSpec {
    PerCluster(usize),
    /// Proportions and total sample size.
    Proportions(Vec<f64>, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub k: usize,
    pub p: usize,
    pub sizes: SizeSpec,
    pub dp: f64,
    pub eta: f64,
    pub delta: f64,
    pub corrupt_frac: f64,
}

impl Cell {
    pub fn cluster_sizes(&self) -> Result<Vec<usize>> {
        match &self.sizes {
            SizeSpec::PerCluster(n) => Ok(vec![*n; self.k]),
            SizeSpec::Proportions(q, total) => {
                if q.len() != self.k {
                    return Err(BenchError::Invalid(format!(
                        "{} proportions given for K={}",
                        q.len(),
                        self.k
                    )));
                }
                if q.iter().any(|v| !(*v > 0.0)) {
                    return Err(BenchError::Invalid("proportions must be positive".into()));
                }
                Ok(ProblemSpec::sizes_from_proportions(q, *total))
            }
        }
    }

    /// Compact size label, e.g. `500x3` or `900/100`.
    pub fn sizes_label(&self) -> String {
        match &self.sizes {
            SizeSpec::PerCluster(n) => format!("{n}x{}", self.k),
            SizeSpec::Proportions(q, total) => match self.cluster_sizes() {
                Ok(s) => s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("/"),
                Err(_) => format!(
                    "{}of{total}",
                    q.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(":")
                ),
            },
        }
    }

    /// File-name safe identifier, unique per cell.
    pub fn id(&self) -> String {
        format!(
            "k{}_p{}_n{}_dp{}_eta{}_d{}_c{}",
            self.k,
            self.p,
            self.sizes_label().replace('/', "-").replace(':', "-"),
            self.dp,
            self.eta,
            self.delta,
            self.corrupt_frac
        )
    }

    /// Identifier without `p`; cells sharing it form one plot panel.
    pub fn panel_id(&self) -> String {
        format!(
            "k{}_n{}_dp{}_eta{}_d{}_c{}",
            self.k,
            self.sizes_label().replace('/', "-").replace(':', "-"),
            self.dp,
            self.eta,
            self.delta,
            self.corrupt_frac
        )
    }

    /// Stable hash of the cell parameters, independent of grid position.
    pub fn key(&self) -> u64 {
        let mut parts = vec![self.k as u64, self.p as u64];
        match &self.sizes {
            SizeSpec::PerCluster(n) => parts.extend([0, *n as u64]),
            SizeSpec::Proportions(q, total) => {
                parts.extend([1, *total as u64]);
                parts.extend(q.iter().map(|v| v.to_bits()));
            }
        }
        parts.extend([self.dp.to_bits(), self.eta.to_bits(), self.delta.to_bits(), self.corrupt_frac.to_bits()]);
        hash_seeds(&parts)
    }

    pub fn problem_seed(&self, base_seed: u64, replicate: usize) -> u64 {
        hash_seeds(&[base_seed, self.key(), replicate as u64])
    }

    pub fn spec(&self, seed: u64) -> Result<ProblemSpec> {
        Ok(ProblemSpec {
            k: self.k,
            p: self.p,
            cluster_sizes: self.cluster_sizes()?,
            dp: self.dp,
            eta: self.eta,
            delta: self.delta,
            corrupt_frac: self.corrupt_frac,
            seed,
        })
    }
}
