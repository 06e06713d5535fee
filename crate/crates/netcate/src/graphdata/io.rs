use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CovariateMatrix, NetworkedDataset, Provenance, SparseGraph};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::topicsim::SimConfig;

#[derive(Serialize, Deserialize)]
struct Meta {
    n_units: usize,
    p: usize,
    #[serde(rename = "K")]
    k: usize,
    sim: Option<SimConfig>,
    seed: u64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line_no: usize,
    field: &str,
    what: &str,
) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::parse(path, line_no, format!("invalid {what}: '{field}'")))
}

/// Raw (possibly duplicated, either orientation) edge pairs.
pub(super) fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let reader = open(path)?;
    let mut edges = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (u, v) = match (it.next(), it.next(), it.next()) {
            (Some(u), Some(v), None) => (u, v),
            _ => {
                return Err(Error::parse(
                    path,
                    idx + 1,
                    "expected two whitespace-separated node indices",
                ))
            }
        };
        edges.push((
            parse_field(path, idx + 1, u, "node index")?,
            parse_field(path, idx + 1, v, "node index")?,
        ));
    }
    Ok(edges)
}

/// Dimensions plus sparse triplets of features.txt: (N, p, entries).
pub(super) type FeatureTable = (usize, usize, Vec<(usize, usize, f64)>);

pub(super) fn read_features(path: &Path) -> Result<FeatureTable> {
    let reader = open(path)?;
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing 'N p NNZ' header"))?;
    let header = header.map_err(|e| Error::io(path, e))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(Error::parse(path, 1, "header must be 'N p NNZ'"));
    }
    let n: usize = parse_field(path, 1, head[0], "unit count")?;
    let p: usize = parse_field(path, 1, head[1], "feature count")?;
    let nnz: usize = parse_field(path, 1, head[2], "non-zero count")?;

    let mut triplets = Vec::with_capacity(nnz);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, idx + 1, "expected 'row col value'"));
        }
        triplets.push((
            parse_field(path, idx + 1, parts[0], "row index")?,
            parse_field(path, idx + 1, parts[1], "column index")?,
            parse_field(path, idx + 1, parts[2], "value")?,
        ));
    }
    if triplets.len() != nnz {
        return Err(Error::InvalidData(format!(
            "{} declares {nnz} non-zeros but contains {}",
            path.display(),
            triplets.len()
        )));
    }
    Ok((n, p, triplets))
}

fn read_units(path: &Path, n: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let reader = open(path)?;
    let mut lines = reader.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == "unit,treatment,y_factual" => {}
        Some((_, Ok(h))) => {
            return Err(Error::parse(path, 1, format!("unexpected header '{h}'")));
        }
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let mut treatments = vec![usize::MAX; n];
    let mut outcomes = vec![0.0; n];
    let mut seen = vec![false; n];
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, idx + 1, "expected 'unit,treatment,y'"));
        }
        let unit: usize = parse_field(path, idx + 1, parts[0].trim(), "unit index")?;
        if unit >= n {
            return Err(Error::InvalidData(format!(
                "unit {unit} out of range for {n} units"
            )));
        }
        if seen[unit] {
            return Err(Error::InvalidData(format!("duplicate row for unit {unit}")));
        }
        seen[unit] = true;
        treatments[unit] = parse_field(path, idx + 1, parts[1].trim(), "treatment")?;
        outcomes[unit] = parse_field(path, idx + 1, parts[2].trim(), "outcome")?;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidData(format!(
            "unit {missing} missing from {}",
            path.display()
        )));
    }
    Ok((treatments, outcomes))
}

fn ground_truth_header(k: usize) -> String {
    let mut h = String::from("unit");
    for t in 0..k {
        h.push_str(&format!(",mu_{t}"));
    }
    h
}

fn read_ground_truth(path: &Path, n: usize, k: usize) -> Result<Matrix> {
    let reader = open(path)?;
    let mut lines = reader.lines().enumerate();
    let expected_header = ground_truth_header(k);
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == expected_header => {}
        Some((_, Ok(h))) => {
            return Err(Error::parse(
                path,
                1,
                format!("unexpected header '{h}', expected '{expected_header}'"),
            ));
        }
        Some((_, Err(e))) => return Err(Error::io(path, e)),
        None => return Err(Error::parse(path, 1, "empty file")),
    }
    let mut mu = Matrix::zeros((n, k));
    let mut seen = vec![false; n];
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != k + 1 {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected {} comma-separated fields", k + 1),
            ));
        }
        let unit: usize = parse_field(path, idx + 1, parts[0].trim(), "unit index")?;
        if unit >= n {
            return Err(Error::InvalidData(format!(
                "unit {unit} out of range for {n} units"
            )));
        }
        if seen[unit] {
            return Err(Error::InvalidData(format!("duplicate row for unit {unit}")));
        }
        seen[unit] = true;
        for t in 0..k {
            mu[[unit, t]] = parse_field(path, idx + 1, parts[t + 1].trim(), "outcome")?;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidData(format!(
            "unit {missing} missing from {}",
            path.display()
        )));
    }
    Ok(mu)
}

pub(super) fn load_dataset(dir: &Path) -> Result<NetworkedDataset> {
    let meta_path = dir.join("meta.json");
    let meta_text = match fs::read_to_string(&meta_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(meta_path))
        }
        Err(e) => return Err(Error::io(&meta_path, e)),
    };
    let meta: Meta = serde_json::from_str(&meta_text)?;

    let edges = read_edges(&dir.join("edges.tsv"))?;
    let graph = SparseGraph::new(meta.n_units, edges)?;

    let features_path = dir.join("features.txt");
    let (fn_units, fp, triplets) = read_features(&features_path)?;
    if fn_units != meta.n_units || fp != meta.p {
        return Err(Error::InvalidData(format!(
            "features.txt header ({fn_units}, {fp}) disagrees with meta.json ({}, {})",
            meta.n_units, meta.p
        )));
    }
    let covariates = CovariateMatrix::from_triplets(meta.n_units, meta.p, triplets)?;

    let (treatments, factual_outcomes) = read_units(&dir.join("units.csv"), meta.n_units)?;
    let expected_outcomes = read_ground_truth(&dir.join("ground_truth.csv"), meta.n_units, meta.k)?;

    let ds = NetworkedDataset {
        graph,
        covariates,
        treatments,
        factual_outcomes,
        expected_outcomes,
        provenance: match meta.sim {
            Some(cfg) => Provenance::Simulated(cfg),
            None => Provenance::External,
        },
        noise: None,
        seed: meta.seed,
    };
    ds.validate()?;
    Ok(ds)
}

pub(super) fn save_dataset(ds: &NetworkedDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let edges_path = dir.join("edges.tsv");
    let mut w = create(&edges_path)?;
    for &(u, v) in ds.graph.edges() {
        writeln!(w, "{u}\t{v}").map_err(|e| Error::io(&edges_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&edges_path, e))?;

    let features_path = dir.join("features.txt");
    let mut w = create(&features_path)?;
    writeln!(
        w,
        "{} {} {}",
        ds.covariates.n_units(),
        ds.covariates.p(),
        ds.covariates.nnz()
    )
    .map_err(|e| Error::io(&features_path, e))?;
    for (r, c, v) in ds.covariates.as_csr().triplets() {
        writeln!(w, "{r} {c} {v}").map_err(|e| Error::io(&features_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&features_path, e))?;

    let units_path = dir.join("units.csv");
    let mut w = create(&units_path)?;
    writeln!(w, "unit,treatment,y_factual").map_err(|e| Error::io(&units_path, e))?;
    for i in 0..ds.n_units() {
        writeln!(w, "{i},{},{}", ds.treatments[i], ds.factual_outcomes[i])
            .map_err(|e| Error::io(&units_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&units_path, e))?;

    let gt_path = dir.join("ground_truth.csv");
    let mut w = create(&gt_path)?;
    writeln!(w, "{}", ground_truth_header(ds.k())).map_err(|e| Error::io(&gt_path, e))?;
    for i in 0..ds.n_units() {
        let mut line = i.to_string();
        for t in 0..ds.k() {
            line.push_str(&format!(",{}", ds.expected_outcomes[[i, t]]));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(&gt_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&gt_path, e))?;

    let meta = Meta {
        n_units: ds.n_units(),
        p: ds.covariates.p(),
        k: ds.k(),
        sim: ds.provenance.sim_config().cloned(),
        seed: ds.seed,
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}
