use rand::Rng;
use rand_distr::{Distribution, Poisson};

use super::{CovariateMatrix, SparseGraph};
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

fn community_of(i: usize, n: usize, communities: usize) -> usize {
    // Contiguous equal-width blocks; the last block absorbs the remainder.
    (i * communities / n).min(communities - 1)
}

/// Stochastic-block-model graph: nodes split into contiguous equal blocks,
/// each unordered pair drawn independently with p_in (same block) or p_out.
pub fn generate_sbm_graph(
    n: usize,
    communities: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<SparseGraph> {
    if communities < 1 {
        return Err(Error::InvalidConfig("communities must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    let mut rng = rng_for(seed, stream::SBM);
    let mut edges = Vec::new();
    for u in 0..n {
        let cu = community_of(u, n, communities);
        for v in u + 1..n {
            let p = if cu == community_of(v, n, communities) {
                p_in
            } else {
                p_out
            };
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    SparseGraph::new(n, edges)
}

/// Bag-of-words covariates aligned with the SBM blocks: the vocabulary is
/// split into one slice per community, each unit draws Poisson(mean_tokens)
/// tokens, and each token lands in the unit's own slice with probability
/// in_block_prob (uniform within it) or anywhere in the vocabulary otherwise.
pub fn generate_community_covariates(
    n: usize,
    communities: usize,
    vocab: usize,
    mean_tokens: f64,
    in_block_prob: f64,
    seed: u64,
) -> Result<CovariateMatrix> {
    if communities < 1 || vocab < communities {
        return Err(Error::InvalidConfig(format!(
            "need vocab >= communities >= 1, got vocab={vocab}, communities={communities}"
        )));
    }
    if !(0.0..=1.0).contains(&in_block_prob) || mean_tokens <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "need mean_tokens > 0 and 0 <= in_block_prob <= 1, got {mean_tokens}, {in_block_prob}"
        )));
    }
    let mut rng = rng_for(seed, stream::COVARIATES);
    let poisson = Poisson::new(mean_tokens)
        .map_err(|e| Error::InvalidConfig(format!("bad token mean: {e}")))?;
    let block = |c: usize| {
        let lo = c * vocab / communities;
        let hi = ((c + 1) * vocab / communities).max(lo + 1);
        (lo, hi.min(vocab))
    };
    let mut counts = vec![0.0f64; 0];
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        let c = community_of(i, n, communities);
        let (lo, hi) = block(c);
        let tokens = poisson.sample(&mut rng) as usize;
        counts.clear();
        counts.resize(vocab, 0.0);
        for _ in 0..tokens {
            let w = if rng.random::<f64>() < in_block_prob {
                rng.random_range(lo..hi)
            } else {
                rng.random_range(0..vocab)
            };
            counts[w] += 1.0;
        }
        for (w, &cnt) in counts.iter().enumerate() {
            if cnt > 0.0 {
                triplets.push((i, w, cnt));
            }
        }
    }
    CovariateMatrix::from_triplets(n, vocab, triplets)
}
