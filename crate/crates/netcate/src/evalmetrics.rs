//! Multi-treatment evaluation. Effects are pairwise differences of outcome
//! columns; the headline numbers average the squared (PEHE) or absolute-mean
//! (ATE) errors over all C(K,2) treatment pairs, with the square root taken
//! after pair-averaging. Ground truth comes from the noiseless expected
//! outcomes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Error of one treatment pair (a, b), a > b: `pehe_pair` is the mean
/// squared effect error before the root, `ate_pair` the absolute error of
/// the mean effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pehe_pair: f64,
    pub ate_pair: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sqrt_pehe: f64,
    pub ate_error: f64,
    /// Alternative aggregation: average of per-pair roots instead of the
    /// root of the pair average.
    pub mean_pair_sqrt_pehe: f64,
    pub per_pair: BTreeMap<(usize, usize), PairMetrics>,
    pub n_units: usize,
    pub k: usize,
    pub seed: u64,
}

fn pair_metrics(yhat: &Matrix, mu: &Matrix) -> BTreeMap<(usize, usize), PairMetrics> {
    assert_eq!(yhat.dim(), mu.dim(), "prediction and truth shapes differ");
    let (n, k) = yhat.dim();
    assert!(k >= 2, "need at least two treatments");
    assert!(n >= 1, "need at least one unit");
    let mut pairs = BTreeMap::new();
    for a in 0..k {
        for b in 0..a {
            let mut sq_sum = 0.0;
            let mut est_sum = 0.0;
            let mut true_sum = 0.0;
            for i in 0..n {
                let est = yhat[[i, a]] - yhat[[i, b]];
                let truth = mu[[i, a]] - mu[[i, b]];
                let err = est - truth;
                sq_sum += err * err;
                est_sum += est;
                true_sum += truth;
            }
            let nf = n as f64;
            pairs.insert(
                (a, b),
                PairMetrics {
                    pehe_pair: sq_sum / nf,
                    ate_pair: (est_sum / nf - true_sum / nf).abs(),
                },
            );
        }
    }
    pairs
}

/// Rooted precision in heterogeneous-effect estimation: the square root of
/// the squared effect errors averaged over units and then over pairs.
pub fn pehe(yhat: &Matrix, mu: &Matrix) -> f64 {
    let pairs = pair_metrics(yhat, mu);
    let mean: f64 = pairs.values().map(|p| p.pehe_pair).sum::<f64>() / pairs.len() as f64;
    mean.sqrt()
}

/// Mean absolute error of the average effect, averaged over pairs.
pub fn ate_error(yhat: &Matrix, mu: &Matrix) -> f64 {
    let pairs = pair_metrics(yhat, mu);
    pairs.values().map(|p| p.ate_pair).sum::<f64>() / pairs.len() as f64
}

/// Full evaluation of one prediction matrix against the expected outcomes.
pub fn evaluate(yhat: &Matrix, mu: &Matrix, seed: u64) -> Result<EvaluationReport> {
    if yhat.dim() != mu.dim() {
        return Err(Error::Shape(format!(
            "predictions are {}x{} but ground truth is {}x{}",
            yhat.nrows(),
            yhat.ncols(),
            mu.nrows(),
            mu.ncols()
        )));
    }
    if yhat.ncols() < 2 {
        return Err(Error::InvalidData(format!(
            "evaluation needs K >= 2 treatments, got {}",
            yhat.ncols()
        )));
    }
    if yhat.nrows() == 0 {
        return Err(Error::InvalidData("evaluation needs at least one unit".into()));
    }
    let per_pair = pair_metrics(yhat, mu);
    let c = per_pair.len() as f64;
    let pehe_mean: f64 = per_pair.values().map(|p| p.pehe_pair).sum::<f64>() / c;
    let ate: f64 = per_pair.values().map(|p| p.ate_pair).sum::<f64>() / c;
    let mean_roots: f64 = per_pair.values().map(|p| p.pehe_pair.sqrt()).sum::<f64>() / c;
    Ok(EvaluationReport {
        sqrt_pehe: pehe_mean.sqrt(),
        ate_error: ate,
        mean_pair_sqrt_pehe: mean_roots,
        n_units: yhat.nrows(),
        k: yhat.ncols(),
        seed,
        per_pair,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation (ddof = 0).
    pub std: f64,
}

/// Mean and population standard deviation of a non-empty sample.
pub fn mean_std(values: &[f64]) -> MeanStd {
    assert!(!values.is_empty(), "mean of an empty sample");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub sqrt_pehe: MeanStd,
    pub ate_error: MeanStd,
    pub n_reports: usize,
    pub k: usize,
}

/// Mean and population standard deviation of each metric over repeated runs.
pub fn aggregate(reports: &[EvaluationReport]) -> Result<AggregateSummary> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidData("no evaluation reports to aggregate".into()))?;
    if reports.iter().any(|r| r.k != first.k) {
        return Err(Error::InvalidData(
            "evaluation reports disagree on the number of treatments".into(),
        ));
    }
    let pehes: Vec<f64> = reports.iter().map(|r| r.sqrt_pehe).collect();
    let ates: Vec<f64> = reports.iter().map(|r| r.ate_error).collect();
    Ok(AggregateSummary {
        sqrt_pehe: mean_std(&pehes),
        ate_error: mean_std(&ates),
        n_reports: reports.len(),
        k: first.k,
    })
}

/// One aggregated line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub model: String,
    pub dataset: String,
    pub k: usize,
    /// Exposure scale of the generating process, when the dataset records
    /// one; empty in the CSV otherwise.
    pub k2: Option<f64>,
    pub sqrt_pehe_mean: f64,
    pub sqrt_pehe_std: f64,
    pub ate_mean: f64,
    pub ate_std: f64,
}

pub const RESULTS_HEADER: &str = "model,dataset,K,k2,sqrt_pehe_mean,sqrt_pehe_std,ate_mean,ate_std";

pub fn results_csv_string(rows: &[ResultsRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        let k2 = r.k2.map(|v| format!("{v}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.model, r.dataset, r.k, k2, r.sqrt_pehe_mean, r.sqrt_pehe_std, r.ate_mean, r.ate_std
        ));
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[ResultsRow]) -> Result<()> {
    std::fs::write(path, results_csv_string(rows)).map_err(|e| Error::io(path, e))
}

/// Reads rows previously produced by [`results_csv_string`].
///
/// An empty k2 field maps back to `None`. Field values must not contain commas.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == RESULTS_HEADER => {}
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("expected header {RESULTS_HEADER:?}"),
            })
        }
    }
    let field_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(field_err(lineno, format!("expected 8 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| field_err(lineno, format!("field {}: {e}", i + 1)))
        };
        let k2 = if fields[3].is_empty() {
            None
        } else {
            Some(num(3)?)
        };
        rows.push(ResultsRow {
            model: fields[0].to_string(),
            dataset: fields[1].to_string(),
            k: fields[2]
                .parse::<usize>()
                .map_err(|e| field_err(lineno, format!("field 3: {e}")))?,
            k2,
            sqrt_pehe_mean: num(4)?,
            sqrt_pehe_std: num(5)?,
            ate_mean: num(6)?,
            ate_std: num(7)?,
        });
    }
    Ok(rows)
}

/// Markdown tables of mean ± std per model, one section per distinct k2.
pub fn render_markdown_table(rows: &[ResultsRow]) -> String {
    let mut sections: BTreeMap<String, Vec<&ResultsRow>> = BTreeMap::new();
    for r in rows {
        let key = match r.k2 {
            Some(v) => format!("k2 = {v}"),
            None => "externally generated".to_string(),
        };
        sections.entry(key).or_default().push(r);
    }
    let mut out = String::new();
    for (caption, group) in sections {
        out.push_str(&format!("#### {caption}\n\n"));
        out.push_str("| model | dataset | K | sqrt PEHE | ATE error |\n");
        out.push_str("|---|---|---|---|---|\n");
        for r in group {
            out.push_str(&format!(
                "| {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.model, r.dataset, r.k, r.sqrt_pehe_mean, r.sqrt_pehe_std, r.ate_mean, r.ate_std
            ));
        }
        out.push('\n');
    }
    out
}
