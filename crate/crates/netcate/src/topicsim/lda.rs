use rand::Rng;

use super::SimConfig;
use crate::error::{Error, Result};
use crate::graphdata::CovariateMatrix;
use crate::rng::{rng_for, stream};

/// Collapsed Gibbs sweeps performed by [`fit_lda`].
pub const GIBBS_SWEEPS: usize = 200;

/// Topic smoothing. α_dir follows the common 50/T rule; β_dir is fixed.
pub const DIRICHLET_BETA: f64 = 0.01;

/// State of a collapsed-Gibbs-fitted LDA model.
///
/// Counts are redundant with `assignments` and kept in lockstep; see
/// [`TopicModelState::check_consistency`].
#[derive(Debug, Clone, PartialEq)]
pub struct TopicModelState {
    pub topics: usize,
    pub vocab: usize,
    /// doc_topic_counts[i][t]: tokens of document i assigned to topic t.
    pub doc_topic_counts: Vec<Vec<usize>>,
    /// topic_word_counts[t][w]: corpus-wide tokens of word w in topic t.
    pub topic_word_counts: Vec<Vec<usize>>,
    /// topic_totals[t] = Σ_w topic_word_counts[t][w].
    pub topic_totals: Vec<usize>,
    /// doc_totals[i]: token count of document i.
    pub doc_totals: Vec<usize>,
    /// tokens[i]: word id of each token of document i, expansion order.
    pub tokens: Vec<Vec<usize>>,
    /// assignments[i]: topic label of each token of document i.
    pub assignments: Vec<Vec<usize>>,
    pub dirichlet_alpha: f64,
    pub dirichlet_beta: f64,
}

impl TopicModelState {
    pub fn n_docs(&self) -> usize {
        self.doc_topic_counts.len()
    }

    /// Verifies that all count tables agree with the token assignments.
    pub fn check_consistency(&self) -> Result<()> {
        let t = self.topics;
        let mut doc_topic = vec![vec![0usize; t]; self.n_docs()];
        let mut topic_word = vec![vec![0usize; self.vocab]; t];
        let mut topic_totals = vec![0usize; t];
        for (i, (words, labels)) in self.tokens.iter().zip(&self.assignments).enumerate() {
            if words.len() != labels.len() || words.len() != self.doc_totals[i] {
                return Err(Error::InvalidData(format!(
                    "token bookkeeping of document {i} is inconsistent"
                )));
            }
            for (&w, &z) in words.iter().zip(labels) {
                doc_topic[i][z] += 1;
                topic_word[z][w] += 1;
                topic_totals[z] += 1;
            }
        }
        if doc_topic != self.doc_topic_counts
            || topic_word != self.topic_word_counts
            || topic_totals != self.topic_totals
        {
            return Err(Error::InvalidData("LDA counts disagree with assignments".into()));
        }
        Ok(())
    }
}

/// Fits LDA by collapsed Gibbs sampling, [`GIBBS_SWEEPS`] full sweeps with
/// α_dir = 50/T and β_dir = 0.01. Deterministic per `cfg.seed`.
///
/// Covariate values are treated as token counts, rounded to the nearest
/// integer; rows summing to zero contribute no tokens.
pub fn fit_lda(x: &CovariateMatrix, cfg: &SimConfig) -> Result<TopicModelState> {
    if cfg.topics < 1 {
        return Err(Error::InvalidConfig("topic count must be >= 1".into()));
    }
    let t = cfg.topics;
    let vocab = x.p();
    let n = x.n_units();

    let mut tokens: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut total_tokens = 0usize;
    for i in 0..n {
        let mut doc = Vec::new();
        for (w, v) in x.row(i) {
            let reps = v.round() as usize;
            doc.extend(std::iter::repeat_n(w, reps));
        }
        total_tokens += doc.len();
        tokens.push(doc);
    }
    if total_tokens == 0 {
        return Err(Error::InvalidData(
            "empty corpus: no covariate tokens to fit LDA on".into(),
        ));
    }

    let alpha = 50.0 / t as f64;
    let beta = DIRICHLET_BETA;
    let v_beta = vocab as f64 * beta;
    let mut rng = rng_for(cfg.seed, stream::LDA);

    let mut doc_topic = vec![vec![0usize; t]; n];
    let mut topic_word = vec![vec![0usize; vocab]; t];
    let mut topic_totals = vec![0usize; t];
    let mut assignments: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (i, doc) in tokens.iter().enumerate() {
        let mut labels = Vec::with_capacity(doc.len());
        for &w in doc {
            let z = rng.random_range(0..t);
            doc_topic[i][z] += 1;
            topic_word[z][w] += 1;
            topic_totals[z] += 1;
            labels.push(z);
        }
        assignments.push(labels);
    }

    let mut weights = vec![0.0f64; t];
    for _sweep in 0..GIBBS_SWEEPS {
        for i in 0..n {
            for ti in 0..tokens[i].len() {
                let w = tokens[i][ti];
                let old = assignments[i][ti];
                doc_topic[i][old] -= 1;
                topic_word[old][w] -= 1;
                topic_totals[old] -= 1;

                let mut total = 0.0;
                for z in 0..t {
                    let wgt = (doc_topic[i][z] as f64 + alpha)
                        * (topic_word[z][w] as f64 + beta)
                        / (topic_totals[z] as f64 + v_beta);
                    weights[z] = wgt;
                    total += wgt;
                }
                let mut u = rng.random::<f64>() * total;
                let mut new = t - 1;
                for (z, &wgt) in weights.iter().enumerate() {
                    if u < wgt {
                        new = z;
                        break;
                    }
                    u -= wgt;
                }

                doc_topic[i][new] += 1;
                topic_word[new][w] += 1;
                topic_totals[new] += 1;
                assignments[i][ti] = new;
            }
        }
    }

    let doc_totals = tokens.iter().map(Vec::len).collect();
    Ok(TopicModelState {
        topics: t,
        vocab,
        doc_topic_counts: doc_topic,
        topic_word_counts: topic_word,
        topic_totals,
        doc_totals,
        tokens,
        assignments,
        dirichlet_alpha: alpha,
        dirichlet_beta: beta,
    })
}
