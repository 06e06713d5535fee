use approx::{assert_abs_diff_eq, assert_relative_eq};
use ndarray::array;

use super::*;
use crate::graphdata::{generate_community_covariates, generate_sbm_graph};

fn cfg(k: usize, topics: usize, seed: u64) -> SimConfig {
    SimConfig {
        k,
        topics,
        seed,
        ..SimConfig::default()
    }
}

fn small_corpus() -> CovariateMatrix {
    CovariateMatrix::from_triplets(
        3,
        4,
        vec![
            (0, 0, 3.0),
            (0, 1, 2.0),
            (1, 1, 1.0),
            (1, 2, 4.0),
            (2, 3, 2.0),
        ],
    )
    .unwrap()
}

#[test]
fn single_topic_forces_degenerate_distributions() {
    let state = fit_lda(&small_corpus(), &cfg(2, 1, 1)).unwrap();
    state.check_consistency().unwrap();
    for labels in &state.assignments {
        assert!(labels.iter().all(|&z| z == 0));
    }
    for i in 0..3 {
        assert_eq!(topic_distribution(&state, i).values(), &[1.0]);
    }
}

#[test]
fn disjoint_vocabularies_get_different_dominant_topics() {
    let x = CovariateMatrix::from_triplets(
        2,
        4,
        vec![(0, 0, 15.0), (0, 1, 15.0), (1, 2, 15.0), (1, 3, 15.0)],
    )
    .unwrap();
    let state = fit_lda(&x, &cfg(2, 2, 1)).unwrap();
    state.check_consistency().unwrap();
    let dominant = |i: usize| {
        let counts = &state.doc_topic_counts[i];
        (0..state.topics).max_by_key(|&z| counts[z]).unwrap()
    };
    assert_ne!(dominant(0), dominant(1), "documents should separate");
}

#[test]
fn fit_rejects_empty_corpus_and_bad_topic_count() {
    let empty = CovariateMatrix::from_triplets(2, 3, Vec::new()).unwrap();
    assert!(fit_lda(&empty, &cfg(2, 2, 1)).is_err());
    assert!(fit_lda(&small_corpus(), &cfg(2, 0, 1)).is_err());
}

fn hand_state(doc_topic: Vec<Vec<usize>>, alpha: f64) -> TopicModelState {
    let topics = doc_topic[0].len();
    let doc_totals: Vec<usize> = doc_topic.iter().map(|c| c.iter().sum()).collect();
    TopicModelState {
        topics,
        vocab: 1,
        doc_topic_counts: doc_topic.clone(),
        topic_word_counts: vec![vec![0; 1]; topics],
        topic_totals: vec![0; topics],
        doc_totals,
        tokens: vec![Vec::new(); doc_topic.len()],
        assignments: vec![Vec::new(); doc_topic.len()],
        dirichlet_alpha: alpha,
        dirichlet_beta: DIRICHLET_BETA,
    }
}

#[test]
fn smoothed_distribution_formula_cases() {
    // counts (2,2) with alpha 0.5: (2.5/5, 2.5/5).
    let state = hand_state(vec![vec![2, 2]], 0.5);
    assert_eq!(topic_distribution(&state, 0).values(), &[0.5, 0.5]);

    // Zero tokens: smoothing only, uniform.
    let state = hand_state(vec![vec![0, 0, 0]], 0.5);
    let z = topic_distribution(&state, 0);
    for &v in z.values() {
        assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
    }

    // Concentration limit: alpha near zero, all mass on topic 2.
    let state = hand_state(vec![vec![0, 0, 7]], 1e-12);
    let z = topic_distribution(&state, 0);
    assert_abs_diff_eq!(z.values()[2], 1.0, epsilon = 1e-9);
    assert!(z.values()[0] < 1e-9 && z.values()[1] < 1e-9);
}

#[test]
fn fitted_distributions_live_on_the_simplex() {
    let x = generate_community_covariates(25, 3, 12, 20.0, 0.7, 2).unwrap();
    let state = fit_lda(&x, &cfg(3, 4, 2)).unwrap();
    state.check_consistency().unwrap();
    for i in 0..25 {
        let z = topic_distribution(&state, i);
        let sum: f64 = z.values().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-9);
        assert!(z.values().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn centroid_zero_is_the_mean_distribution() {
    let state = fit_lda(&small_corpus(), &cfg(2, 3, 4)).unwrap();
    let set = select_centroids(&state, &cfg(2, 3, 4)).unwrap();
    assert_eq!(set.centroids.len(), 2);
    assert_eq!(set.provenance.len(), 1);

    let mut mean = vec![0.0; 3];
    for i in 0..3 {
        for (m, v) in mean.iter_mut().zip(topic_distribution(&state, i).values()) {
            *m += v / 3.0;
        }
    }
    for (got, want) in set.centroids[0].values().iter().zip(&mean) {
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }
    let picked = set.provenance[0];
    assert_eq!(set.centroids[1], topic_distribution(&state, picked));
}

#[test]
fn centroid_selection_is_deterministic_per_seed() {
    let x = generate_community_covariates(8, 2, 10, 15.0, 0.7, 3).unwrap();
    let state = fit_lda(&x, &cfg(3, 2, 9)).unwrap();
    let a = select_centroids(&state, &cfg(3, 2, 9)).unwrap();
    let b = select_centroids(&state, &cfg(3, 2, 9)).unwrap();
    assert_eq!(a.provenance, b.provenance);
    assert_eq!(a.centroids, b.centroids);
    assert!(select_centroids(&state, &cfg(10, 2, 9)).is_err());
}

#[test]
fn identical_units_make_all_centroids_equal() {
    let state = hand_state(vec![vec![1, 1], vec![1, 1], vec![1, 1]], 0.5);
    let set = select_centroids(&state, &cfg(3, 2, 5)).unwrap();
    for c in &set.centroids {
        for (got, want) in c.values().iter().zip(topic_distribution(&state, 0).values()) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }
}

fn td(values: &[f64]) -> TopicDistribution {
    TopicDistribution::new(values.to_vec()).unwrap()
}

#[test]
fn unscaled_outcomes_hand_case() {
    let graph = SparseGraph::new(2, vec![(0, 1)]).unwrap();
    let z = vec![td(&[1.0, 0.0]), td(&[0.0, 1.0])];
    let centroids = CentroidSet {
        centroids: vec![td(&[1.0, 0.0]), td(&[0.0, 1.0])],
        provenance: vec![1],
    };
    let mut c = cfg(2, 2, 1);
    c.k1 = 1.0;
    c.k2 = 0.5;
    let p = unscaled_outcomes(&z, &centroids, &graph, &c);
    assert_eq!(p[[0, 0]], 1.0);
    assert_eq!(p[[1, 0]], 0.5);
    assert_eq!(p[[0, 1]], 0.5);
    assert_eq!(p[[1, 1]], 1.0);

    c.k1 = 0.0;
    c.k2 = 0.0;
    let zero = unscaled_outcomes(&z, &centroids, &graph, &c);
    assert_eq!(zero, Matrix::zeros((2, 2)));

    // Isolated nodes keep only the self term.
    let lonely = SparseGraph::new(2, Vec::new()).unwrap();
    c.k1 = 2.0;
    c.k2 = 5.0;
    let p = unscaled_outcomes(&z, &centroids, &lonely, &c);
    assert_eq!(p, array![[2.0, 0.0], [0.0, 2.0]]);
}

#[test]
fn unscaled_outcomes_matches_brute_force_loops() {
    let n = 20;
    let graph = generate_sbm_graph(n, 3, 0.3, 0.05, 13).unwrap();
    let x = generate_community_covariates(n, 3, 15, 25.0, 0.7, 13).unwrap();
    let c = cfg(4, 5, 13);
    let state = fit_lda(&x, &c).unwrap();
    let z: Vec<_> = (0..n).map(|i| topic_distribution(&state, i)).collect();
    let centroids = select_centroids(&state, &c).unwrap();
    let fast = unscaled_outcomes(&z, &centroids, &graph, &c);

    let mut adjacency = vec![vec![false; n]; n];
    for &(u, v) in graph.edges() {
        adjacency[u][v] = true;
        adjacency[v][u] = true;
    }
    for i in 0..n {
        for a in 0..c.k {
            let mut value = 0.0;
            for (t, &zv) in z[i].values().iter().enumerate() {
                value += c.k1 * zv * centroids.centroids[a].values()[t];
            }
            for j in 0..n {
                if adjacency[i][j] {
                    for (t, &zv) in z[j].values().iter().enumerate() {
                        value += c.k2 * zv * centroids.centroids[a].values()[t];
                    }
                }
            }
            assert_abs_diff_eq!(fast[[i, a]], value, epsilon = 1e-12);
        }
    }
}

#[test]
fn softmax_rows_are_valid_and_shift_invariant() {
    let c = cfg(3, 2, 7);
    let p = array![[2.0, 2.0, 2.0], [0.1, -3.0, 700.0], [0.0, 3.0f64.ln(), 0.0]];
    let (_, probs) = assign_treatments(&p, &c).unwrap();
    for i in 0..3 {
        let sum: f64 = probs.row(i).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
    }
    for v in probs.row(0) {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
    }

    let shifted = p.mapv(|v| v + 123.5);
    let (_, probs2) = assign_treatments(&shifted, &c).unwrap();
    for (a, b) in probs.iter().zip(probs2.iter()) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    let two = array![[0.0, 3.0f64.ln()]];
    let (_, q) = assign_treatments(&two, &c).unwrap();
    assert_abs_diff_eq!(q[[0, 0]], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(q[[0, 1]], 0.75, epsilon = 1e-12);

    let bad = array![[f64::NAN, 0.0]];
    assert!(assign_treatments(&bad, &c).is_err());
}

#[test]
fn treatment_draws_are_deterministic_per_seed() {
    let p = Matrix::from_shape_fn((50, 4), |(i, a)| ((i * 31 + a * 17) % 7) as f64 * 0.3);
    let (t1, _) = assign_treatments(&p, &cfg(4, 2, 11)).unwrap();
    let (t2, _) = assign_treatments(&p, &cfg(4, 2, 11)).unwrap();
    assert_eq!(t1, t2);
    let (t3, _) = assign_treatments(&p, &cfg(4, 2, 12)).unwrap();
    assert_ne!(t1, t3);
}

#[test]
fn potential_outcomes_follow_the_scale_formula() {
    let mut c = cfg(4, 2, 1);
    c.outcome_scale = 5.0;
    let p = array![[1.0, 2.0, 0.0, 0.0]];
    let (mu, _) = potential_outcomes(&p, &c).unwrap();
    assert_eq!(mu, array![[5.0, 15.0, 5.0, 5.0]]);

    c.noise_std = 0.0;
    let (_, noise) = potential_outcomes(&p, &c).unwrap();
    assert!(noise.iter().all(|&e| e == 0.0));

    c.outcome_scale = 0.0;
    let (mu, _) = potential_outcomes(&p, &c).unwrap();
    assert_eq!(mu, Matrix::zeros((1, 4)));
}

#[test]
fn simulate_is_deterministic_and_noise_consistent() {
    let graph = generate_sbm_graph(30, 3, 0.25, 0.03, 21).unwrap();
    let x = generate_community_covariates(30, 3, 18, 20.0, 0.7, 21).unwrap();
    let c = cfg(3, 4, 21);
    let a = simulate(&x, &graph, &c).unwrap();
    let b = simulate(&x, &graph, &c).unwrap();
    assert_eq!(a, b);
    a.validate().unwrap();
    assert!(a.noise.is_some());

    let mut c2 = c.clone();
    c2.seed = 22;
    let other = simulate(&x, &graph, &c2).unwrap();
    assert_ne!(a.treatments, other.treatments);
}

#[test]
fn neighbor_weight_moves_outcomes_through_the_network_term_only() {
    let graph = generate_sbm_graph(25, 2, 0.3, 0.05, 8).unwrap();
    let x = generate_community_covariates(25, 2, 14, 20.0, 0.7, 8).unwrap();
    let mut lo = cfg(3, 4, 8);
    lo.k2 = 0.0;
    let mut hi = lo.clone();
    hi.k2 = 2.0;

    let ds_lo = simulate(&x, &graph, &lo).unwrap();
    let ds_hi = simulate(&x, &graph, &hi).unwrap();

    // Same seed, so LDA and centroids coincide; reconstruct the neighbor sums.
    let state = fit_lda(&x, &lo).unwrap();
    let z: Vec<_> = (0..25).map(|i| topic_distribution(&state, i)).collect();
    let centroids = select_centroids(&state, &lo).unwrap();
    let neighbors = graph.neighbor_lists();
    let c = lo.outcome_scale;
    for (i, hood_ids) in neighbors.iter().enumerate() {
        let hood: Vec<f64> = (0..3)
            .map(|a| {
                hood_ids
                    .iter()
                    .map(|&j| z[j].dot(&centroids.centroids[a]))
                    .sum::<f64>()
            })
            .collect();
        for t in 0..3 {
            let gap = ds_hi.expected_outcomes[[i, t]] - ds_lo.expected_outcomes[[i, t]];
            let want = if t == 0 {
                c * 2.0 * hood[0]
            } else {
                c * 2.0 * (hood[0] + hood[t])
            };
            assert_relative_eq!(gap, want, epsilon = 1e-9, max_relative = 1e-9);
        }
    }
}

#[test]
fn summary_reports_average_absolute_pairwise_effect() {
    let mut ds = simulate(
        &generate_community_covariates(10, 2, 8, 15.0, 0.7, 4).unwrap(),
        &generate_sbm_graph(10, 2, 0.4, 0.1, 4).unwrap(),
        &cfg(2, 3, 4),
    )
    .unwrap();

    ds.expected_outcomes = Matrix::from_elem((10, 2), 1.25);
    let s = summarize(&ds);
    assert_eq!(s.avg_pairwise_ate, 0.0);
    assert_eq!((s.n_units, s.p, s.k), (10, 8, 2));

    ds.expected_outcomes = Matrix::from_shape_fn((10, 2), |(i, t)| {
        i as f64 * 0.1 + if t == 1 { 3.0 } else { 0.0 }
    });
    let s = summarize(&ds);
    assert_abs_diff_eq!(s.avg_pairwise_ate, 3.0, epsilon = 1e-12);
    assert!(s.to_string().contains("avg-pairwise-ate=3.0000"));
}

#[test]
fn config_validation_catches_bad_fields() {
    assert!(cfg(1, 5, 1).validate().is_err());
    assert!(cfg(4, 0, 1).validate().is_err());
    let mut c = cfg(4, 5, 1);
    c.k1 = -1.0;
    assert!(c.validate().is_err());
    c = cfg(4, 5, 1);
    c.noise_std = -0.1;
    assert!(c.validate().is_err());
    assert!(cfg(4, 5, 1).validate().is_ok());
}
