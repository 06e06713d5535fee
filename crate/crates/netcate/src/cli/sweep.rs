//! Config-file driven experiment grids.
//!
//! A sweep expands dataset x model x seed into independent cells, runs the
//! missing ones (optionally in parallel), and appends each finished cell to
//! `cells.csv` so an interrupted run resumes where it stopped. The final
//! `results.csv` is regenerated from the cell log on every run, which makes
//! it invariant to cell execution order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::BalanceConfig;
use crate::error::{Error, Result};
use crate::evalmetrics::{
    evaluate, mean_std, render_markdown_table, write_results_csv, ResultsRow,
};
use crate::graphdata::{load_dataset, save_dataset, NetworkedDataset};
use crate::model::{predict_mu, save_checkpoint, AdjacencyMode, ModelConfig, ModelInputs, ModelKind};
use crate::topicsim::{simulate, summarize, SimConfig};
use crate::trainer::{train, TrainConfig};

use super::{build_sbm_inputs, checkpoint_file_name, default_out, ensure_dir, report_file_name};

/// Stochastic block model sampling parameters for synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SbmSpec {
    pub n: usize,
    pub communities: usize,
    /// Edge probability within a community.
    pub p_in: f64,
    /// Edge probability across communities.
    pub p_out: f64,
    /// Covariate vocabulary size.
    pub vocab: usize,
    /// Mean token count per unit.
    pub mean_tokens: f64,
    /// Probability mass a unit puts on its own community's vocabulary block.
    pub in_block: f64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            n: 400,
            communities: 4,
            p_in: 0.05,
            p_out: 0.005,
            vocab: 50,
            mean_tokens: 20.0,
            in_block: 0.7,
        }
    }
}

impl FromStr for SbmSpec {
    type Err = Error;

    /// Compact form, e.g. "n=400,c=4,p_in=0.05". Missing keys keep their
    /// defaults; an empty string keeps all of them.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = SbmSpec::default();
        for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("bad SBM spec entry '{pair}' (expected key=value)"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::InvalidConfig(format!("bad SBM value for '{key}': '{value}'"));
            match key {
                "n" => spec.n = value.parse().map_err(|_| bad())?,
                "c" | "communities" => spec.communities = value.parse().map_err(|_| bad())?,
                "p_in" => spec.p_in = value.parse().map_err(|_| bad())?,
                "p_out" => spec.p_out = value.parse().map_err(|_| bad())?,
                "vocab" => spec.vocab = value.parse().map_err(|_| bad())?,
                "mean_tokens" => spec.mean_tokens = value.parse().map_err(|_| bad())?,
                "in_block" => spec.in_block = value.parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown SBM key '{other}' (expected n, c, p_in, p_out, vocab, \
                         mean_tokens, in_block)"
                    )))
                }
            }
        }
        Ok(spec)
    }
}

impl<'de> Deserialize<'de> for SbmSpec {
    fn deserialize<D>(deserializer: D) -> std::result::Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct Fields {
            n: usize,
            communities: usize,
            p_in: f64,
            p_out: f64,
            vocab: usize,
            mean_tokens: f64,
            in_block: f64,
        }
        impl Default for Fields {
            fn default() -> Self {
                let d = SbmSpec::default();
                Fields {
                    n: d.n,
                    communities: d.communities,
                    p_in: d.p_in,
                    p_out: d.p_out,
                    vocab: d.vocab,
                    mean_tokens: d.mean_tokens,
                    in_block: d.in_block,
                }
            }
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Fields(Fields),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Fields(f) => Ok(SbmSpec {
                n: f.n,
                communities: f.communities,
                p_in: f.p_in,
                p_out: f.p_out,
                vocab: f.vocab,
                mean_tokens: f.mean_tokens,
                in_block: f.in_block,
            }),
        }
    }
}

/// Where the sweep's covariates and graph come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// An existing dataset directory; the k/k2 grids do not apply.
    Dir(PathBuf),
    /// A block model sampled fresh for every grid point.
    SyntheticSbm(SbmSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::SyntheticSbm(SbmSpec::default())
    }
}

/// Architecture knobs shared by every model in the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    /// `None` keeps each model kind's default representation stack.
    pub rep_layers: Option<Vec<usize>>,
    /// `None` keeps the default head stack.
    pub head_layers: Option<Vec<usize>>,
    pub adjacency: AdjacencyMode,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            rep_layers: None,
            head_layers: None,
            adjacency: AdjacencyMode::SymmetricNormalized,
        }
    }
}

/// Full description of one sweep: data source, simulator and trainer
/// settings, and the grid axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub sim: SimConfig,
    pub model: ModelSettings,
    pub balance: BalanceConfig,
    pub train: TrainConfig,
    /// Model names to run; defaults to all five.
    pub models: Vec<String>,
    pub seeds: Vec<u64>,
    /// Treatment-count grid; empty means the single `sim.k` value.
    pub k_values: Vec<usize>,
    /// Interference-weight grid; empty means the single `sim.k2` value.
    pub k2_values: Vec<f64>,
    /// Empty resolves to `<output root>/sweep` at run time.
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            sim: SimConfig::default(),
            model: ModelSettings::default(),
            balance: BalanceConfig::default(),
            train: TrainConfig::default(),
            models: ModelKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            seeds: vec![1, 2, 3, 4, 5],
            k_values: Vec::new(),
            k2_values: Vec::new(),
            output: PathBuf::new(),
        }
    }
}

/// Loads a config file and applies it over the defaults.
///
/// Two formats are accepted: a JSON object (first non-space byte `{`), or
/// lines of `dotted.path = value` where the value is JSON (bare words count
/// as strings) and `#` starts a comment.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value = if text.trim_start().starts_with('{') {
        serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?
    } else {
        parse_key_value(&text, path)?
    };
    serde_json::from_value(value)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn parse_key_value(text: &str, path: &Path) -> Result<serde_json::Value> {
    let mut root = serde_json::to_value(ExperimentConfig::default())?;
    // Selecting a dataset source must replace the default variant, not merge
    // with it, or the externally tagged enum would see two variant keys.
    let mut dataset_reset = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno, "expected key = value"))?;
        let keys: Vec<&str> = key.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(Error::parse(path, lineno, "empty key segment"));
        }
        let parsed: serde_json::Value = serde_json::from_str(value.trim())
            .unwrap_or_else(|_| serde_json::Value::String(value.trim().to_string()));
        if keys[0] == "dataset" && keys.len() > 1 && !dataset_reset {
            root["dataset"] = serde_json::Value::Object(Default::default());
            dataset_reset = true;
        }
        set_path(&mut root, &keys, parsed).map_err(|msg| Error::parse(path, lineno, msg))?;
    }
    Ok(root)
}

fn set_path(
    root: &mut serde_json::Value,
    keys: &[&str],
    value: serde_json::Value,
) -> std::result::Result<(), String> {
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("'{k}' has a non-object parent"))?;
        node = obj
            .entry(k.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
        if !node.is_object() {
            // A scalar default (e.g. a bandwidth string) being replaced by a
            // structured value.
            *node = serde_json::Value::Object(Default::default());
        }
    }
    let last = *keys.last().expect("non-empty key path");
    node.as_object_mut()
        .ok_or_else(|| format!("'{last}' has a non-object parent"))?
        .insert(last.to_string(), value);
    Ok(())
}

// ---------------------------------------------------------------------------
// cell log

const CELLS_HEADER: &str = "dataset,model,seed,sqrt_pehe,ate_error";

/// FNV-1a, used to stamp the cell log with its schema.
fn fnv64(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn schema_line() -> String {
    format!("# schema {:016x}", fnv64(CELLS_HEADER))
}

#[derive(Debug, Clone, PartialEq)]
struct CellRow {
    dataset: String,
    model: String,
    seed: u64,
    sqrt_pehe: f64,
    ate_error: f64,
}

fn cell_line(row: &CellRow) -> String {
    format!(
        "{},{},{},{},{}\n",
        row.dataset, row.model, row.seed, row.sqrt_pehe, row.ate_error
    )
}

fn read_cells(path: &Path) -> Result<Vec<CellRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CELLS_HEADER => {}
        _ => {
            return Err(Error::parse(
                path,
                1,
                format!("expected header {CELLS_HEADER:?}; refusing to resume"),
            ))
        }
    }
    match lines.next() {
        Some((_, line)) if line == schema_line() => {}
        _ => {
            return Err(Error::parse(
                path,
                2,
                "schema hash mismatch; refusing to resume".to_string(),
            ))
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::parse(path, lineno, format!("field {}: {e}", i + 1)))
        };
        rows.push(CellRow {
            dataset: fields[0].to_string(),
            model: fields[1].to_string(),
            seed: fields[2]
                .parse::<u64>()
                .map_err(|e| Error::parse(path, lineno, format!("field 3: {e}")))?,
            sqrt_pehe: num(3)?,
            ate_error: num(4)?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// execution

struct DatasetEntry {
    id: String,
    k2: Option<f64>,
    ds: NetworkedDataset,
}

/// Builds or reloads every dataset of the grid, serially.
fn prepare_datasets(cfg: &ExperimentConfig, datasets_dir: &Path) -> Result<Vec<DatasetEntry>> {
    let mut entries = Vec::new();
    match &cfg.dataset {
        DatasetSource::Dir(path) => {
            if !cfg.k_values.is_empty() || !cfg.k2_values.is_empty() {
                log::warn!("k_values/k2_values are ignored for a directory dataset source");
            }
            let ds = load_dataset(path)?;
            let id = path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".to_string());
            let k2 = ds.provenance.sim_config().map(|c| c.k2);
            entries.push(DatasetEntry { id, k2, ds });
        }
        DatasetSource::SyntheticSbm(spec) => {
            let ks = if cfg.k_values.is_empty() {
                vec![cfg.sim.k]
            } else {
                cfg.k_values.clone()
            };
            let k2s = if cfg.k2_values.is_empty() {
                vec![cfg.sim.k2]
            } else {
                cfg.k2_values.clone()
            };
            for &k in &ks {
                for &k2 in &k2s {
                    let id = format!("sbm-n{}-k{}-k2{}", spec.n, k, k2);
                    let dir = datasets_dir.join(&id);
                    let ds = if dir.join("meta.json").exists() {
                        let ds = load_dataset(&dir)?;
                        println!("dataset {id}: reusing {}", dir.display());
                        ds
                    } else {
                        let sim = SimConfig {
                            k,
                            k2,
                            ..cfg.sim.clone()
                        };
                        let (graph, covariates) = build_sbm_inputs(spec, sim.seed)?;
                        let ds = simulate(&covariates, &graph, &sim)?;
                        save_dataset(&ds, &dir)?;
                        println!("dataset {id}: {}", summarize(&ds));
                        ds
                    };
                    entries.push(DatasetEntry {
                        id,
                        k2: Some(k2),
                        ds,
                    });
                }
            }
        }
    }
    Ok(entries)
}

fn execute_cell(
    cfg: &ExperimentConfig,
    entry: &DatasetEntry,
    kind: ModelKind,
    seed: u64,
    checkpoints_dir: &Path,
    reports_dir: &Path,
) -> Result<CellRow> {
    let ds = &entry.ds;
    let mut mcfg = ModelConfig::for_kind(kind, ds.k(), ds.covariates.p(), seed);
    if let Some(v) = &cfg.model.rep_layers {
        mcfg.rep_layers = v.clone();
    }
    if let Some(v) = &cfg.model.head_layers {
        mcfg.head_layers = v.clone();
    }
    mcfg.adjacency = cfg.model.adjacency;
    let bcfg = kind.configure_balance(&cfg.balance);
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };

    let (params, report) = train(ds, &mcfg, &bcfg, &tcfg)?;
    let inputs = ModelInputs::from_dataset(ds, &mcfg);
    let yhat = predict_mu(&mcfg, &params, &inputs);
    let ev = evaluate(&yhat, &ds.expected_outcomes, seed)?;

    let ckpt = checkpoints_dir.join(format!("{}-{}", entry.id, checkpoint_file_name(kind, seed)));
    save_checkpoint(&ckpt, &mcfg, &params)?;
    let report_path = reports_dir.join(format!("{}-{}", entry.id, report_file_name(kind, seed)));
    report.write_csv(&report_path)?;

    Ok(CellRow {
        dataset: entry.id.clone(),
        model: kind.name().to_string(),
        seed,
        sqrt_pehe: ev.sqrt_pehe,
        ate_error: ev.ate_error,
    })
}

/// Runs the whole grid: prepares datasets, executes missing cells (in
/// parallel when `jobs` allows), and regenerates the aggregated results CSV.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<()> {
    let kinds: Vec<ModelKind> = cfg
        .models
        .iter()
        .map(|n| n.parse())
        .collect::<Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("model list must be non-empty".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list must be non-empty".into()));
    }
    cfg.train.validate()?;
    cfg.sim.validate()?;

    let output = if cfg.output.as_os_str().is_empty() {
        default_out().join("sweep")
    } else {
        cfg.output.clone()
    };
    let datasets_dir = output.join("datasets");
    let checkpoints_dir = output.join("checkpoints");
    let reports_dir = output.join("reports");
    for dir in [&output, &datasets_dir, &checkpoints_dir, &reports_dir] {
        ensure_dir(dir)?;
    }

    let entries = prepare_datasets(cfg, &datasets_dir)?;

    let cells_path = output.join("cells.csv");
    let existing = read_cells(&cells_path)?;
    let done: BTreeSet<(&str, &str, u64)> = existing
        .iter()
        .map(|r| (r.dataset.as_str(), r.model.as_str(), r.seed))
        .collect();

    let mut pending: Vec<(usize, ModelKind, u64)> = Vec::new();
    for (ei, entry) in entries.iter().enumerate() {
        for &kind in &kinds {
            for &seed in &cfg.seeds {
                if !done.contains(&(entry.id.as_str(), kind.name(), seed)) {
                    pending.push((ei, kind, seed));
                }
            }
        }
    }
    let total = entries.len() * kinds.len() * cfg.seeds.len();
    println!(
        "sweep: {} cells total, {} already recorded, {} to run",
        total,
        total - pending.len(),
        pending.len()
    );

    if !pending.is_empty() {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&cells_path)
            .map_err(|e| Error::io(&cells_path, e))?;
        let empty = file
            .metadata()
            .map_err(|e| Error::io(&cells_path, e))?
            .len()
            == 0;
        if empty {
            file.write_all(format!("{CELLS_HEADER}\n{}\n", schema_line()).as_bytes())
                .map_err(|e| Error::io(&cells_path, e))?;
        }
        let writer = Mutex::new(file);

        let run_cell = |&(ei, kind, seed): &(usize, ModelKind, u64)| -> Result<()> {
            let entry = &entries[ei];
            let row = execute_cell(cfg, entry, kind, seed, &checkpoints_dir, &reports_dir)?;
            let mut w = writer.lock().expect("cell log writer poisoned");
            w.write_all(cell_line(&row).as_bytes())
                .map_err(|e| Error::io(&cells_path, e))?;
            w.flush().map_err(|e| Error::io(&cells_path, e))?;
            println!(
                "cell {} {} seed {}: sqrt_pehe {:.4}, ate_error {:.4}",
                entry.id, kind, seed, row.sqrt_pehe, row.ate_error
            );
            Ok(())
        };

        match jobs {
            Some(1) => pending.iter().try_for_each(run_cell)?,
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("jobs: {e}")))?
                .install(|| pending.par_iter().try_for_each(run_cell))?,
            None => pending.par_iter().try_for_each(run_cell)?,
        }
    }

    // Aggregate from the log rather than this run's in-memory rows so the
    // output covers resumed cells too.
    let cells = read_cells(&cells_path)?;
    let meta: BTreeMap<&str, (usize, Option<f64>)> = entries
        .iter()
        .map(|e| (e.id.as_str(), (e.ds.k(), e.k2)))
        .collect();
    let mut grouped: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for row in &cells {
        if !meta.contains_key(row.dataset.as_str()) {
            log::warn!(
                "cells.csv row for dataset '{}' outside the current grid; ignored",
                row.dataset
            );
            continue;
        }
        let slot = grouped
            .entry((row.dataset.clone(), row.model.clone()))
            .or_default();
        slot.0.push(row.sqrt_pehe);
        slot.1.push(row.ate_error);
    }
    let mut rows = Vec::with_capacity(grouped.len());
    for ((dataset, model), (pehes, ates)) in grouped {
        let (k, k2) = meta[dataset.as_str()];
        let sp = mean_std(&pehes);
        let ate = mean_std(&ates);
        rows.push(ResultsRow {
            model,
            dataset,
            k,
            k2,
            sqrt_pehe_mean: sp.mean,
            sqrt_pehe_std: sp.std,
            ate_mean: ate.mean,
            ate_std: ate.std,
        });
    }
    let results_path = output.join("results.csv");
    write_results_csv(&results_path, &rows)?;
    print!("{}", render_markdown_table(&rows));
    println!("results: {}", results_path.display());
    Ok(())
}
