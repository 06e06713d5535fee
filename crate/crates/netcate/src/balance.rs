//! Distribution-balance losses between treatment-group representations and
//! the total training objective: factual mean-squared error plus a weighted
//! pairwise integral probability metric averaged over all treatment pairs.
//!
//! Everything here records onto a [`Tape`], so gradients flow through the
//! losses, including the median-heuristic bandwidth, the median-relative
//! Sinkhorn regularization, and the Sinkhorn iterations themselves.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, NodeId, Tape};

/// Degenerate-scale cutoff: a median at or below this is treated as zero.
const MEDIAN_FLOOR: f64 = 1e-12;

/// Additive floor on the Gibbs kernel so scaling vectors stay finite even
/// when every cost is huge relative to ε.
const KERNEL_FLOOR: f64 = 1e-100;

/// Which integral probability metric balances the representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IpmKind {
    Wasserstein,
    Mmd,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MmdKernel {
    Rbf,
    Linear,
}

/// RBF bandwidth: the median heuristic (σ² = median squared pairwise
/// distance of the pooled sample) or a fixed σ².
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RbfBandwidth {
    MedianHeuristic,
    Fixed(f64),
}

/// Sinkhorn ε: fixed, or a factor of the median cost entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SinkhornEpsilon {
    Fixed(f64),
    RelativeToMedianCost(f64),
}

impl Serialize for RbfBandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            RbfBandwidth::MedianHeuristic => s.serialize_str("median-heuristic"),
            RbfBandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for RbfBandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(RbfBandwidth::Fixed(v)),
            Repr::Name(s) if s == "median-heuristic" => Ok(RbfBandwidth::MedianHeuristic),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "unknown bandwidth '{s}', expected a number or \"median-heuristic\""
            ))),
        }
    }
}

impl Serialize for SinkhornEpsilon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        match self {
            SinkhornEpsilon::Fixed(v) => s.serialize_f64(*v),
            SinkhornEpsilon::RelativeToMedianCost(f) => {
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("relative_to_median_cost", f)?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for SinkhornEpsilon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Relative { relative_to_median_cost: f64 },
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Number(v) => SinkhornEpsilon::Fixed(v),
            Repr::Relative {
                relative_to_median_cost,
            } => SinkhornEpsilon::RelativeToMedianCost(relative_to_median_cost),
        })
    }
}

/// Numeric configuration of the balance term and the objective weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceConfig {
    pub kind: IpmKind,
    pub mmd_kernel: MmdKernel,
    pub rbf_bandwidth: RbfBandwidth,
    pub sinkhorn_epsilon: SinkhornEpsilon,
    pub sinkhorn_iters: usize,
    /// Weight of the factual regression loss.
    pub alpha: f64,
    /// Weight of the pairwise balance loss.
    pub beta: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        BalanceConfig {
            kind: IpmKind::Wasserstein,
            mmd_kernel: MmdKernel::Rbf,
            rbf_bandwidth: RbfBandwidth::MedianHeuristic,
            sinkhorn_epsilon: SinkhornEpsilon::RelativeToMedianCost(0.1),
            sinkhorn_iters: 10,
            alpha: 1.0,
            beta: 0.5,
        }
    }
}

/// Positivity check that fails closed on NaN.
pub(crate) fn is_positive(v: f64) -> bool {
    v > 0.0
}

impl BalanceConfig {
    /// α must be positive; β must be positive whenever a balance metric is
    /// active, and may be zero only with `kind = none` (the plain-regression
    /// objective).
    pub fn validate(&self) -> Result<()> {
        if self.sinkhorn_iters < 1 {
            return Err(Error::InvalidConfig("sinkhorn_iters must be >= 1".into()));
        }
        if !is_positive(self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        match (self.kind, self.beta) {
            (IpmKind::None, b) if b >= 0.0 => {}
            (_, b) if b > 0.0 => {}
            (kind, b) => {
                return Err(Error::InvalidConfig(format!(
                    "beta must be positive with kind {kind:?}, got {b}"
                )))
            }
        }
        if let RbfBandwidth::Fixed(v) = self.rbf_bandwidth {
            if !is_positive(v) {
                return Err(Error::InvalidConfig(format!(
                    "fixed RBF bandwidth must be positive, got {v}"
                )));
            }
        }
        match self.sinkhorn_epsilon {
            SinkhornEpsilon::Fixed(e) if !is_positive(e) => Err(Error::InvalidConfig(format!(
                "sinkhorn epsilon must be positive, got {e}"
            ))),
            SinkhornEpsilon::RelativeToMedianCost(f) if !is_positive(f) => {
                Err(Error::InvalidConfig(format!(
                    "sinkhorn epsilon factor must be positive, got {f}"
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Squared Euclidean distances between the rows of a and the rows of b,
/// clamped at zero against rounding. The arrangement (outer sum of row norms
/// minus twice the cross Gram matrix) keeps swapped arguments transposes of
/// each other.
fn pairwise_sq_dists(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let aa = tape.mul_elem(a, a);
    let ra = tape.row_sums(aa);
    let bb = tape.mul_elem(b, b);
    let rb = tape.row_sums(bb);
    let rb_row = tape.transpose(rb);
    let norms = tape.outer_sum(ra, rb_row);
    let bt = tape.transpose(b);
    let cross = tape.matmul(a, bt);
    let twice = tape.scale(cross, 2.0);
    let d = tape.sub(norms, twice);
    tape.max_zero(d)
}

fn euclidean_costs(tape: &mut Tape, a: NodeId, b: NodeId) -> NodeId {
    let sq = pairwise_sq_dists(tape, a, b);
    tape.sqrt(sq)
}

/// exp(−sq / (2σ²)) with σ² a 1×1 node.
fn rbf_from_sq(tape: &mut Tape, sq: NodeId, sigma2: NodeId) -> NodeId {
    let two_sigma2 = tape.scale(sigma2, 2.0);
    let inv = tape.recip(two_sigma2);
    let scaled = tape.scale_by_scalar(sq, inv);
    let neg = tape.scale(scaled, -1.0);
    tape.exp(neg)
}

/// σ² node for the RBF kernel: fixed, or the median squared pairwise
/// distance over the pooled sample (unit bandwidth when that median is
/// degenerate).
fn bandwidth_node(tape: &mut Tape, sa: NodeId, sb: NodeId, cfg: &BalanceConfig) -> NodeId {
    match cfg.rbf_bandwidth {
        RbfBandwidth::Fixed(v) => tape.leaf(Matrix::from_elem((1, 1), v)),
        RbfBandwidth::MedianHeuristic => {
            let pooled = tape.concat_rows(&[sa, sb]);
            let sq = pairwise_sq_dists(tape, pooled, pooled);
            let upper = tape.strict_upper(sq);
            let med = tape.median(upper);
            if tape.scalar_value(med) <= MEDIAN_FLOOR {
                tape.leaf(Matrix::from_elem((1, 1), 1.0))
            } else {
                med
            }
        }
    }
}

/// Mean squared error (1/N)·Σ (pred − target)².
pub fn mse_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> NodeId {
    assert!(
        tape.value(pred).nrows() >= 1,
        "mse_loss needs a non-empty prediction vector"
    );
    let diff = tape.sub(pred, target);
    let sq = tape.mul_elem(diff, diff);
    tape.mean(sq)
}

/// Biased V-statistic estimate of squared MMD between the row sets of sa and
/// sb: mean k(sa,sa) + mean k(sb,sb) − 2·mean k(sa,sb).
pub fn mmd(tape: &mut Tape, sa: NodeId, sb: NodeId, cfg: &BalanceConfig) -> NodeId {
    assert!(
        tape.value(sa).nrows() >= 1 && tape.value(sb).nrows() >= 1,
        "mmd needs non-empty groups"
    );
    let (kaa, kbb, kab) = match cfg.mmd_kernel {
        MmdKernel::Linear => {
            let sat = tape.transpose(sa);
            let sbt = tape.transpose(sb);
            (
                tape.matmul(sa, sat),
                tape.matmul(sb, sbt),
                tape.matmul(sa, sbt),
            )
        }
        MmdKernel::Rbf => {
            let sigma2 = bandwidth_node(tape, sa, sb, cfg);
            let daa = pairwise_sq_dists(tape, sa, sa);
            let dbb = pairwise_sq_dists(tape, sb, sb);
            let dab = pairwise_sq_dists(tape, sa, sb);
            (
                rbf_from_sq(tape, daa, sigma2),
                rbf_from_sq(tape, dbb, sigma2),
                rbf_from_sq(tape, dab, sigma2),
            )
        }
    };
    let maa = tape.mean(kaa);
    let mbb = tape.mean(kbb);
    let mab = tape.mean(kab);
    let within = tape.add(maa, mbb);
    let cross = tape.scale(mab, -2.0);
    tape.add(within, cross)
}

/// Entropic optimal transport cost between uniform measures on the rows of
/// sa and sb under Euclidean costs, via a fixed number of symmetrized
/// (simultaneously updated, geometric-mean damped) Sinkhorn iterations.
pub fn wasserstein(tape: &mut Tape, sa: NodeId, sb: NodeId, cfg: &BalanceConfig) -> NodeId {
    let na = tape.value(sa).nrows();
    let nb = tape.value(sb).nrows();
    assert!(na >= 1 && nb >= 1, "wasserstein needs non-empty groups");

    let costs = euclidean_costs(tape, sa, sb);
    let eps = match cfg.sinkhorn_epsilon {
        SinkhornEpsilon::Fixed(e) => tape.leaf(Matrix::from_elem((1, 1), e)),
        SinkhornEpsilon::RelativeToMedianCost(f) => {
            let med = tape.median(costs);
            if tape.scalar_value(med) < MEDIAN_FLOOR {
                tape.leaf(Matrix::from_elem((1, 1), MEDIAN_FLOOR))
            } else {
                tape.scale(med, f)
            }
        }
    };

    let inv_eps = tape.recip(eps);
    let scaled = tape.scale_by_scalar(costs, inv_eps);
    let neg = tape.scale(scaled, -1.0);
    let gibbs = tape.exp(neg);
    let kernel = tape.add_const(gibbs, KERNEL_FLOOR);
    let kernel_t = tape.transpose(kernel);

    let a_w = tape.leaf(Matrix::from_elem((na, 1), 1.0 / na as f64));
    let b_w = tape.leaf(Matrix::from_elem((nb, 1), 1.0 / nb as f64));
    let mut u = tape.leaf(Matrix::from_elem((na, 1), 1.0));
    let mut v = tape.leaf(Matrix::from_elem((nb, 1), 1.0));

    // Jacobi updates with geometric-mean damping: u and v step together from
    // the same previous iterate, so swapping the arguments swaps u and v.
    for _ in 0..cfg.sinkhorn_iters {
        let kv = tape.matmul(kernel, v);
        let ratio_u = tape.recip(kv);
        let target_u = tape.mul_elem(a_w, ratio_u);
        let damped_u = tape.mul_elem(u, target_u);
        let next_u = tape.sqrt(damped_u);

        let ku = tape.matmul(kernel_t, u);
        let ratio_v = tape.recip(ku);
        let target_v = tape.mul_elem(b_w, ratio_v);
        let damped_v = tape.mul_elem(v, target_v);
        let next_v = tape.sqrt(damped_v);

        u = next_u;
        v = next_v;
    }

    let vt = tape.transpose(v);
    let outer = tape.matmul(u, vt);
    let plan = tape.mul_elem(kernel, outer);
    let weighted = tape.mul_elem(plan, costs);
    tape.sum(weighted)
}

/// Π dispatch on the configured metric kind.
pub fn ipm(tape: &mut Tape, sa: NodeId, sb: NodeId, cfg: &BalanceConfig) -> NodeId {
    match cfg.kind {
        IpmKind::Wasserstein => wasserstein(tape, sa, sb, cfg),
        IpmKind::Mmd => mmd(tape, sa, sb, cfg),
        IpmKind::None => tape.leaf(Matrix::zeros((1, 1))),
    }
}

/// Unit indices of each treatment group, indexed by treatment.
pub fn treatment_groups(treatments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &t) in treatments.iter().enumerate() {
        assert!(t < k, "treatment {t} of unit {i} out of range for K = {k}");
        groups[t].push(i);
    }
    groups
}

/// Average of Π over all treatment pairs with two non-empty groups. With
/// fewer than two non-empty groups there is nothing to balance: returns a
/// constant zero and logs a warning.
pub fn pairwise_representation_loss(
    tape: &mut Tape,
    phi: NodeId,
    treatments: &[usize],
    k: usize,
    cfg: &BalanceConfig,
) -> NodeId {
    assert_eq!(
        tape.value(phi).nrows(),
        treatments.len(),
        "one representation row per treated unit"
    );
    if cfg.kind == IpmKind::None {
        return tape.leaf(Matrix::zeros((1, 1)));
    }
    let groups = treatment_groups(treatments, k);
    let nodes: Vec<Option<NodeId>> = groups
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                None
            } else {
                Some(tape.gather_rows(phi, Rc::new(idx.clone())))
            }
        })
        .collect();

    let mut acc: Option<NodeId> = None;
    let mut pairs = 0usize;
    for a in 0..k {
        for b in 0..a {
            let (Some(ga), Some(gb)) = (nodes[a], nodes[b]) else {
                continue;
            };
            let pi = ipm(tape, ga, gb, cfg);
            acc = Some(match acc {
                Some(prev) => tape.add(prev, pi),
                None => pi,
            });
            pairs += 1;
        }
    }
    match acc {
        Some(total) => tape.scale(total, 1.0 / pairs as f64),
        None => {
            log::warn!("fewer than two non-empty treatment groups; balance loss is 0");
            tape.leaf(Matrix::zeros((1, 1)))
        }
    }
}

/// α·MSE + β·pairwise balance. With β = 0 or kind = none the balance
/// subgraph is not recorded at all, so the objective and its gradients are
/// bit-identical to the plain regression loss.
pub fn total_loss(
    tape: &mut Tape,
    pred_factual: NodeId,
    y: NodeId,
    phi: NodeId,
    treatments: &[usize],
    k: usize,
    cfg: &BalanceConfig,
) -> NodeId {
    let l1 = mse_loss(tape, pred_factual, y);
    let weighted_l1 = tape.scale(l1, cfg.alpha);
    if cfg.beta == 0.0 || cfg.kind == IpmKind::None {
        return weighted_l1;
    }
    let l2 = pairwise_representation_loss(tape, phi, treatments, k, cfg);
    let weighted_l2 = tape.scale(l2, cfg.beta);
    tape.add(weighted_l1, weighted_l2)
}

/// Forward-only MMD between two row sets.
pub fn mmd_value(sa: &Matrix, sb: &Matrix, cfg: &BalanceConfig) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(sa.clone());
    let b = tape.leaf(sb.clone());
    let out = mmd(&mut tape, a, b, cfg);
    tape.scalar_value(out)
}

/// Forward-only Wasserstein between two row sets.
pub fn wasserstein_value(sa: &Matrix, sb: &Matrix, cfg: &BalanceConfig) -> f64 {
    let mut tape = Tape::new();
    let a = tape.leaf(sa.clone());
    let b = tape.leaf(sb.clone());
    let out = wasserstein(&mut tape, a, b, cfg);
    tape.scalar_value(out)
}
