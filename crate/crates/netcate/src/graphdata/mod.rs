//! Canonical in-memory dataset model, its on-disk directory format, and
//! synthetic graph/covariate generators for desk-scale experiments.

mod io;
mod synth;

pub use synth::{generate_community_covariates, generate_sbm_graph};

use crate::error::{Error, Result};
use crate::numkernel::{CsrMatrix, Matrix};
use crate::topicsim::SimConfig;

/// Undirected graph over `n_units` nodes. Each edge is stored once with
/// u < v; no self-loops, no duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraph {
    n_units: usize,
    edges: Vec<(usize, usize)>,
}

impl SparseGraph {
    /// Canonicalizes pair order and deduplicates; rejects self-loops and
    /// out-of-range endpoints.
    pub fn new(n_units: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut canon: Vec<(usize, usize)> = Vec::new();
        for (u, v) in edges {
            if u == v {
                return Err(Error::InvalidData(format!("self-loop at node {u}")));
            }
            if u >= n_units || v >= n_units {
                return Err(Error::InvalidData(format!(
                    "edge ({u}, {v}) out of range for {n_units} units"
                )));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(SparseGraph {
            n_units,
            edges: canon,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical (u < v) edge list, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// One-hop neighbor lists, each sorted ascending.
    pub fn neighbor_lists(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_units];
        for &(u, v) in &self.edges {
            out[u].push(v);
            out[v].push(u);
        }
        for l in &mut out {
            l.sort_unstable();
        }
        out
    }

    /// Symmetric zero-diagonal adjacency A.
    pub fn adjacency_csr(&self) -> CsrMatrix {
        let triplets = self
            .edges
            .iter()
            .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)]);
        CsrMatrix::from_triplets(self.n_units, self.n_units, triplets)
            .expect("edge indices validated at construction")
    }

    /// Propagation operator for graph convolutions: Â = D^{−1/2}(A+I)D^{−1/2}
    /// when `normalized`, the literal (A+I) otherwise. D is the degree matrix
    /// of (A+I), so every diagonal entry is ≥ 1 and the inverse root exists.
    pub fn propagation_csr(&self, normalized: bool) -> CsrMatrix {
        let mut triplets: Vec<(usize, usize, f64)> = self
            .edges
            .iter()
            .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)])
            .collect();
        triplets.extend((0..self.n_units).map(|i| (i, i, 1.0)));
        if normalized {
            let mut degree = vec![0.0f64; self.n_units];
            for &(r, _, w) in &triplets {
                degree[r] += w;
            }
            for (r, c, w) in &mut triplets {
                *w /= (degree[*r] * degree[*c]).sqrt();
            }
        }
        CsrMatrix::from_triplets(self.n_units, self.n_units, triplets)
            .expect("edge indices validated at construction")
    }
}

/// Sparse n_units × p matrix of non-negative covariate counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    csr: CsrMatrix,
}

impl CovariateMatrix {
    pub fn from_triplets(
        n_units: usize,
        p: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let csr = CsrMatrix::from_triplets(n_units, p, triplets)?;
        for (r, c, v) in csr.triplets() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidData(format!(
                    "covariate ({r}, {c}) = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(CovariateMatrix { csr })
    }

    pub fn n_units(&self) -> usize {
        self.csr.n_rows()
    }

    pub fn p(&self) -> usize {
        self.csr.n_cols()
    }

    pub fn nnz(&self) -> usize {
        self.csr.nnz()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.csr.row(i)
    }

    pub fn as_csr(&self) -> &CsrMatrix {
        &self.csr
    }
}

/// Where a dataset's treatments and outcomes came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Simulated(SimConfig),
    External,
}

impl Provenance {
    pub fn sim_config(&self) -> Option<&SimConfig> {
        match self {
            Provenance::Simulated(cfg) => Some(cfg),
            Provenance::External => None,
        }
    }
}

/// A networked observational dataset: graph, covariates, assigned treatments,
/// factual (noisy) outcomes, and noiseless expected potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkedDataset {
    pub graph: SparseGraph,
    pub covariates: CovariateMatrix,
    /// treatments[i] ∈ {0..K−1}.
    pub treatments: Vec<usize>,
    /// Observed outcome under the assigned treatment, noise included.
    pub factual_outcomes: Vec<f64>,
    /// N×K noiseless μ[i][t].
    pub expected_outcomes: Matrix,
    pub provenance: Provenance,
    /// Per-unit noise draws. Populated by the simulator; not persisted, so
    /// loaded datasets carry `None`.
    pub noise: Option<Vec<f64>>,
    pub seed: u64,
}

impl NetworkedDataset {
    pub fn n_units(&self) -> usize {
        self.graph.n_units()
    }

    pub fn k(&self) -> usize {
        self.expected_outcomes.ncols()
    }

    /// Checks every type invariant; call after construction or load.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_units();
        let k = self.k();
        if k < 2 {
            return Err(Error::InvalidData(format!("K = {k}, need at least 2")));
        }
        if self.covariates.n_units() != n {
            return Err(Error::Shape(format!(
                "covariate rows {} != n_units {n}",
                self.covariates.n_units()
            )));
        }
        if self.treatments.len() != n || self.factual_outcomes.len() != n {
            return Err(Error::Shape(format!(
                "treatments/outcomes length != n_units {n}"
            )));
        }
        if self.expected_outcomes.nrows() != n {
            return Err(Error::Shape(format!(
                "expected_outcomes rows {} != n_units {n}",
                self.expected_outcomes.nrows()
            )));
        }
        for (i, &t) in self.treatments.iter().enumerate() {
            if t >= k {
                return Err(Error::InvalidData(format!(
                    "treatment {t} of unit {i} out of range for K = {k}"
                )));
            }
        }
        if self
            .factual_outcomes
            .iter()
            .chain(self.expected_outcomes.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("dataset outcomes".into()));
        }
        if let Some(noise) = &self.noise {
            if noise.len() != n {
                return Err(Error::Shape("noise length != n_units".into()));
            }
            for (i, &eps) in noise.iter().enumerate() {
                let expect = self.expected_outcomes[[i, self.treatments[i]]] + eps;
                if self.factual_outcomes[i] != expect {
                    return Err(Error::InvalidData(format!(
                        "factual outcome of unit {i} is not mu + noise"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads a dataset directory (edges.tsv, features.txt, units.csv,
/// ground_truth.csv, meta.json).
pub fn load_dataset(dir: impl AsRef<std::path::Path>) -> Result<NetworkedDataset> {
    io::load_dataset(dir.as_ref())
}

/// Writes the directory format read by [`load_dataset`]. Numeric fields
/// round-trip bit-exactly.
pub fn save_dataset(ds: &NetworkedDataset, dir: impl AsRef<std::path::Path>) -> Result<()> {
    io::save_dataset(ds, dir.as_ref())
}

/// Loads only the graph and covariates (edges.tsv + features.txt), the input
/// half of a dataset directory; used to drive the simulator on external
/// corpora such as a BlogCatalog export.
pub fn load_inputs(dir: impl AsRef<std::path::Path>) -> Result<(SparseGraph, CovariateMatrix)> {
    let dir = dir.as_ref();
    let graph_raw = io::read_edges(&dir.join("edges.tsv"))?;
    let (n, p, triplets) = io::read_features(&dir.join("features.txt"))?;
    let graph = SparseGraph::new(n, graph_raw)?;
    let covariates = CovariateMatrix::from_triplets(n, p, triplets)?;
    Ok((graph, covariates))
}
