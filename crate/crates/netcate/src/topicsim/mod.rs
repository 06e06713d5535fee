//! Semi-synthetic treatment and outcome generation: an LDA topic model is
//! fitted on the covariates, K topic centroids are chosen, and treatments
//! plus potential outcomes are derived from each unit's own and one-hop
//! neighbors' topic distributions.

mod lda;

pub use lda::{fit_lda, TopicModelState, DIRICHLET_BETA, GIBBS_SWEEPS};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphdata::{CovariateMatrix, NetworkedDataset, Provenance, SparseGraph};
use crate::numkernel::Matrix;
use crate::rng::{rng_for, stream};

/// All knobs of the generator pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Number of treatments K (≥ 2).
    pub k: usize,
    /// Number of LDA topics.
    pub topics: usize,
    /// Weight of a unit's own topic affinity in treatment/outcome scores.
    pub k1: f64,
    /// Weight of the summed one-hop neighbor affinities.
    pub k2: f64,
    /// Outcome scale C.
    pub outcome_scale: f64,
    /// Standard deviation of the per-unit outcome noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            k: 4,
            topics: 50,
            k1: 10.0,
            k2: 0.5,
            outcome_scale: 5.0,
            noise_std: 1.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 treatments, got {}",
                self.k
            )));
        }
        if self.topics < 1 {
            return Err(Error::InvalidConfig("need at least 1 topic".into()));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "confounding weights must be non-negative, got k1={}, k2={}",
                self.k1, self.k2
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "noise_std must be non-negative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// A point on the topic simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicDistribution(Vec<f64>);

impl TopicDistribution {
    /// Validates non-negativity and unit sum (within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err(Error::InvalidData(
                "topic distribution must be non-empty and non-negative".into(),
            ));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidData(format!(
                "topic distribution sums to {sum}, expected 1"
            )));
        }
        Ok(TopicDistribution(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &TopicDistribution) -> f64 {
        assert_eq!(self.len(), other.len(), "topic dimension mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// The K treatment centroids on the topic simplex. Centroid 0 is the mean of
/// all unit distributions (control); centroids 1..K are the distributions of
/// the sampled units recorded in `provenance`.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<TopicDistribution>,
    pub provenance: Vec<usize>,
}

/// Smoothed topic distribution of one unit:
/// z[τ] = (count_{i,τ} + α_dir) / (tokens_i + T·α_dir).
pub fn topic_distribution(state: &TopicModelState, unit: usize) -> TopicDistribution {
    assert!(unit < state.n_docs(), "unit {unit} out of range");
    let t = state.topics;
    let denom = state.doc_totals[unit] as f64 + t as f64 * state.dirichlet_alpha;
    let values = state.doc_topic_counts[unit]
        .iter()
        .map(|&c| (c as f64 + state.dirichlet_alpha) / denom)
        .collect();
    TopicDistribution::new(values).expect("smoothed counts form a distribution")
}

fn all_topic_distributions(state: &TopicModelState) -> Vec<TopicDistribution> {
    (0..state.n_docs())
        .map(|i| topic_distribution(state, i))
        .collect()
}

/// Chooses K−1 distinct units uniformly (seeded) whose topic distributions
/// become centroids 1..K−1; centroid 0 is the mean distribution.
pub fn select_centroids(state: &TopicModelState, cfg: &SimConfig) -> Result<CentroidSet> {
    let n = state.n_docs();
    if n < cfg.k - 1 {
        return Err(Error::InvalidData(format!(
            "cannot pick {} centroid units from {n} units",
            cfg.k - 1
        )));
    }
    let z = all_topic_distributions(state);
    let t = state.topics;
    let mut mean = vec![0.0f64; t];
    for zi in &z {
        for (m, v) in mean.iter_mut().zip(zi.values()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // Renormalize away accumulated rounding so the simplex invariant holds.
    let s: f64 = mean.iter().sum();
    for m in &mut mean {
        *m /= s;
    }

    let mut rng = rng_for(cfg.seed, stream::CENTROIDS);
    let provenance: Vec<usize> = rand::seq::index::sample(&mut rng, n, cfg.k - 1).into_vec();

    let mut centroids = Vec::with_capacity(cfg.k);
    centroids.push(TopicDistribution::new(mean)?);
    for &u in &provenance {
        centroids.push(z[u].clone());
    }
    Ok(CentroidSet {
        centroids,
        provenance,
    })
}

/// Unscaled treatment scores:
/// p[i][a] = k1·⟨z(x_i), z_a⟩ + k2·Σ_{j∈N(i)} ⟨z(x_j), z_a⟩.
pub fn unscaled_outcomes(
    z: &[TopicDistribution],
    centroids: &CentroidSet,
    graph: &SparseGraph,
    cfg: &SimConfig,
) -> Matrix {
    let n = graph.n_units();
    assert_eq!(z.len(), n, "one topic distribution per unit");
    let k = centroids.centroids.len();
    let dots = Matrix::from_shape_fn((n, k), |(i, a)| z[i].dot(&centroids.centroids[a]));
    let neighbors = graph.neighbor_lists();
    Matrix::from_shape_fn((n, k), |(i, a)| {
        let hood: f64 = neighbors[i].iter().map(|&j| dots[[j, a]]).sum();
        cfg.k1 * dots[[i, a]] + cfg.k2 * hood
    })
}

/// Softmax rows of p (max-subtracted) and a seeded categorical draw per unit.
pub fn assign_treatments(p: &Matrix, cfg: &SimConfig) -> Result<(Vec<usize>, Matrix)> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("treatment scores".into()));
    }
    let (n, k) = p.dim();
    let mut probs = Matrix::zeros((n, k));
    for i in 0..n {
        let row = p.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in 0..k {
            let e = (row[a] - max).exp();
            probs[[i, a]] = e;
            total += e;
        }
        for a in 0..k {
            probs[[i, a]] /= total;
        }
    }
    let mut rng = rng_for(cfg.seed, stream::TREATMENTS);
    let mut treatments = Vec::with_capacity(n);
    for i in 0..n {
        let mut u = rng.random::<f64>();
        let mut chosen = k - 1;
        for a in 0..k {
            if u < probs[[i, a]] {
                chosen = a;
                break;
            }
            u -= probs[[i, a]];
        }
        treatments.push(chosen);
    }
    Ok((treatments, probs))
}

/// Noiseless expected outcomes μ and one seeded noise draw per unit:
/// μ[i][0] = C·p[i][0], and μ[i][t] = C·(p[i][0] + p[i][t]) for t ≥ 1.
pub fn potential_outcomes(p: &Matrix, cfg: &SimConfig) -> Result<(Matrix, Vec<f64>)> {
    let (n, k) = p.dim();
    let c = cfg.outcome_scale;
    let expected = Matrix::from_shape_fn((n, k), |(i, t)| {
        if t == 0 {
            c * p[[i, 0]]
        } else {
            c * (p[[i, 0]] + p[[i, t]])
        }
    });
    let normal = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::InvalidConfig(format!("bad noise_std: {e}")))?;
    let mut rng = rng_for(cfg.seed, stream::NOISE);
    let noise: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    Ok((expected, noise))
}

/// End-to-end generator: LDA fit, centroid selection, scores, treatment
/// assignment, potential outcomes. Deterministic per `cfg.seed`.
pub fn simulate(
    x: &CovariateMatrix,
    graph: &SparseGraph,
    cfg: &SimConfig,
) -> Result<NetworkedDataset> {
    cfg.validate()?;
    if x.n_units() != graph.n_units() {
        return Err(Error::Shape(format!(
            "covariate rows {} != graph units {}",
            x.n_units(),
            graph.n_units()
        )));
    }
    let state = fit_lda(x, cfg)?;
    let z = all_topic_distributions(&state);
    let centroids = select_centroids(&state, cfg)?;
    let p = unscaled_outcomes(&z, &centroids, graph, cfg);
    let (treatments, _probs) = assign_treatments(&p, cfg)?;
    let (expected, noise) = potential_outcomes(&p, cfg)?;
    let factual: Vec<f64> = (0..graph.n_units())
        .map(|i| expected[[i, treatments[i]]] + noise[i])
        .collect();
    let ds = NetworkedDataset {
        graph: graph.clone(),
        covariates: x.clone(),
        treatments,
        factual_outcomes: factual,
        expected_outcomes: expected,
        provenance: Provenance::Simulated(cfg.clone()),
        noise: Some(noise),
        seed: cfg.seed,
    };
    ds.validate()?;
    Ok(ds)
}

/// Dataset summary: sizes plus the mean over all treatment pairs of the
/// absolute ground-truth average effect.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub n_units: usize,
    pub n_edges: usize,
    pub p: usize,
    pub k: usize,
    pub avg_pairwise_ate: f64,
}

impl std::fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "N={} edges={} p={} K={} avg-pairwise-ate={:.4}",
            self.n_units, self.n_edges, self.p, self.k, self.avg_pairwise_ate
        )
    }
}

pub fn summarize(ds: &NetworkedDataset) -> DatasetSummary {
    let n = ds.n_units();
    let k = ds.k();
    let mu = &ds.expected_outcomes;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in 0..a {
            let mean_effect: f64 =
                (0..n).map(|i| mu[[i, a]] - mu[[i, b]]).sum::<f64>() / n as f64;
            total += mean_effect.abs();
            pairs += 1;
        }
    }
    DatasetSummary {
        n_units: n,
        n_edges: ds.graph.n_edges(),
        p: ds.covariates.p(),
        k,
        avg_pairwise_ate: total / pairs as f64,
    }
}

#[cfg(test)]
mod tests;
