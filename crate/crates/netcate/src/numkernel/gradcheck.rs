//! Central finite-difference harness used to validate every differentiable
//! path in the crate.

use super::Matrix;

/// Relative step factor: each coordinate is displaced by 1e-4·max(1, |θ|).
pub const STEP_FACTOR: f64 = 1e-4;

/// Denominator floor so near-zero gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Worst-offending coordinate of a gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoord {
    pub param: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<WorstCoord>,
    pub n_coords: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Central-difference gradient of `f` at `params`, one objective evaluation
/// pair per coordinate. The closure sees a perturbed copy; `params` itself is
/// never mutated.
pub fn finite_difference_gradients<F>(params: &[Matrix], mut f: F) -> Vec<Matrix>
where
    F: FnMut(&[Matrix]) -> f64,
{
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.dim())).collect();
    for pi in 0..params.len() {
        let (rows, cols) = params[pi].dim();
        for r in 0..rows {
            for c in 0..cols {
                let orig = params[pi][[r, c]];
                let h = STEP_FACTOR * orig.abs().max(1.0);
                work[pi][[r, c]] = orig + h;
                let up = f(&work);
                work[pi][[r, c]] = orig - h;
                let down = f(&work);
                work[pi][[r, c]] = orig;
                grads[pi][[r, c]] = (up - down) / (2.0 * h);
            }
        }
    }
    grads
}

/// Per-coordinate relative error |ga − gn| / max(|ga|, |gn|, floor), maximized
/// over all coordinates of all parameters.
pub fn compare_gradients(analytic: &[Matrix], numeric: &[Matrix]) -> GradCheckReport {
    assert_eq!(
        analytic.len(),
        numeric.len(),
        "gradient lists differ in length"
    );
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        n_coords: 0,
    };
    for (pi, (ga, gn)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(ga.dim(), gn.dim(), "gradient shapes differ for param {pi}");
        let (rows, cols) = ga.dim();
        for r in 0..rows {
            for c in 0..cols {
                let a = ga[[r, c]];
                let n = gn[[r, c]];
                let denom = a.abs().max(n.abs()).max(REL_ERR_FLOOR);
                let rel = (a - n).abs() / denom;
                report.n_coords += 1;
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = rel;
                    report.worst = Some(WorstCoord {
                        param: pi,
                        row: r,
                        col: c,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
        }
    }
    report
}

/// Convenience wrapper: finite-difference `f` at `params` and compare against
/// the supplied analytic gradients.
pub fn check<F>(params: &[Matrix], analytic: &[Matrix], f: F) -> GradCheckReport
where
    F: FnMut(&[Matrix]) -> f64,
{
    let numeric = finite_difference_gradients(params, f);
    compare_gradients(analytic, &numeric)
}
