//! Operator-facing command line.
//!
//! Five subcommands cover the experiment lifecycle: `generate` builds a
//! dataset directory, `train` fits one (model, seed) cell, `evaluate`
//! aggregates trained seeds into results rows, `gradcheck` compares analytic
//! gradients against finite differences, and `sweep` drives a full
//! dataset x model x seed grid from a config file.
//!
//! Exit codes: 0 on success, 2 for usage errors (bad flags, bad config,
//! unknown model names), 1 for everything else.

mod sweep;

pub use sweep::{
    load_experiment_config, run_sweep, DatasetSource, ExperimentConfig, ModelSettings, SbmSpec,
};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::balance::{BalanceConfig, MmdKernel, RbfBandwidth, SinkhornEpsilon};
use crate::error::{Error, Result};
use crate::evalmetrics::{
    aggregate, evaluate, read_results_csv, render_markdown_table, results_csv_string, ResultsRow,
    RESULTS_HEADER,
};
use crate::graphdata::{
    generate_community_covariates, generate_sbm_graph, load_dataset, load_inputs, save_dataset,
    CovariateMatrix, NetworkedDataset, Provenance, SparseGraph,
};
use crate::model::{
    load_checkpoint, predict_mu, save_checkpoint, tensor_specs, AdjacencyMode, ModelConfig,
    ModelInputs, ModelKind,
};
use crate::numkernel::gradcheck;
use crate::rng::{rng_for, stream};
use crate::topicsim::{simulate, summarize, SimConfig};
use crate::trainer::{train, ObjectiveSpec, OptimizerKind, TrainConfig};

use rand::Rng;

#[derive(Parser, Debug)]
#[command(
    name = "netcate",
    version,
    about = "Networked multi-treatment counterfactual estimation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

// One Command is parsed per process; the size spread between variants is
// irrelevant here.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a semi-synthetic networked dataset directory.
    Generate(GenerateArgs),
    /// Train one model on a dataset; writes a checkpoint and an epoch report.
    Train(TrainArgs),
    /// Evaluate trained checkpoints across seeds and append a results row.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences on a small instance.
    Gradcheck(GradcheckArgs),
    /// Run a dataset x model x seed grid from a config file, resumably.
    Sweep(SweepArgs),
}

/// Entry point for `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; help/version exit 0, misuse 2.
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::UnknownModel(_) => 2,
        _ => 1,
    }
}

/// Output directory resolution order: `--out` flag, `NETCATE_OUT`, `netcate-out`.
fn default_out() -> PathBuf {
    std::env::var_os("NETCATE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("netcate-out"))
}

fn ensure_dir(dir: &PathBuf) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn checkpoint_file_name(kind: ModelKind, seed: u64) -> String {
    format!("{}-seed{}.ckpt", kind.name(), seed)
}

pub(crate) fn report_file_name(kind: ModelKind, seed: u64) -> String {
    format!("{}-seed{}-train.csv", kind.name(), seed)
}

// ---------------------------------------------------------------------------
// generate

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Stochastic block model spec as comma-separated key=value pairs.
    /// Keys: n, c, p_in, p_out, vocab, mean_tokens, in_block. Empty value
    /// uses all defaults (n=400, c=4).
    #[arg(long, conflicts_with = "from_dir")]
    synthetic_sbm: Option<String>,

    /// Read edges.tsv and features.txt from an existing directory instead
    /// of sampling a block model.
    #[arg(long)]
    from_dir: Option<PathBuf>,

    /// Number of treatments.
    #[arg(long, default_value_t = 4)]
    k: usize,

    /// Weight of each unit's own topic profile in assignment and outcomes.
    #[arg(long, default_value_t = 10.0)]
    k1: f64,

    /// Weight of neighbouring units' topic profiles; 0 removes interference.
    #[arg(long, default_value_t = 0.5)]
    k2: f64,

    /// Topic count fitted on the covariate corpus.
    #[arg(long, default_value_t = 50)]
    topics: usize,

    /// Multiplier applied to raw scores when forming potential outcomes.
    #[arg(long, default_value_t = 5.0)]
    outcome_scale: f64,

    /// Standard deviation of the additive outcome noise.
    #[arg(long, default_value_t = 1.0)]
    noise_std: f64,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Target directory; defaults to a named subdirectory of the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_generate(a: &GenerateArgs) -> Result<i32> {
    let sim = SimConfig {
        k: a.k,
        topics: a.topics,
        k1: a.k1,
        k2: a.k2,
        outcome_scale: a.outcome_scale,
        noise_std: a.noise_std,
        seed: a.seed,
    };
    let (graph, covariates) = match &a.from_dir {
        Some(dir) => load_inputs(dir)?,
        None => {
            let spec = match &a.synthetic_sbm {
                Some(text) => text.parse::<SbmSpec>()?,
                None => SbmSpec::default(),
            };
            build_sbm_inputs(&spec, a.seed)?
        }
    };
    let ds = simulate(&covariates, &graph, &sim)?;
    let out = a.out.clone().unwrap_or_else(|| {
        default_out().join(format!("dataset-k{}-k2{}-seed{}", a.k, a.k2, a.seed))
    });
    save_dataset(&ds, &out)?;
    println!("{}", summarize(&ds));
    println!("dataset: {}", out.display());
    Ok(0)
}

/// Samples the graph and covariates for a synthetic block-model dataset.
pub(crate) fn build_sbm_inputs(spec: &SbmSpec, seed: u64) -> Result<(SparseGraph, CovariateMatrix)> {
    let graph = generate_sbm_graph(spec.n, spec.communities, spec.p_in, spec.p_out, seed)?;
    let covariates = generate_community_covariates(
        spec.n,
        spec.communities,
        spec.vocab,
        spec.mean_tokens,
        spec.in_block,
        seed,
    )?;
    Ok((graph, covariates))
}

// ---------------------------------------------------------------------------
// train

/// Architecture overrides shared by `train` and config files.
#[derive(Args, Debug, Default, Clone)]
struct ArchFlags {
    /// Representation layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    rep_layers: Option<Vec<usize>>,

    /// Hidden head layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    head_layers: Option<Vec<usize>>,

    /// Propagation operator: symmetric-normalized | raw-self-loops.
    #[arg(long)]
    adjacency: Option<String>,
}

#[derive(Args, Debug, Default, Clone)]
struct BalanceFlags {
    /// Kernel for the MMD penalty: rbf | linear.
    #[arg(long)]
    mmd_kernel: Option<String>,

    /// RBF bandwidth: "median-heuristic" or a fixed positive value.
    #[arg(long)]
    rbf_bandwidth: Option<String>,

    /// Sinkhorn regulariser: a fixed value or "median:<factor>".
    #[arg(long)]
    sinkhorn_epsilon: Option<String>,

    #[arg(long)]
    sinkhorn_iters: Option<usize>,
}

#[derive(Args, Debug, Default, Clone)]
struct TrainFlags {
    /// Weight on the outcome regression loss.
    #[arg(long)]
    alpha: Option<f64>,

    /// Weight on the representation balance penalty.
    #[arg(long)]
    beta: Option<f64>,

    #[arg(long)]
    learning_rate: Option<f64>,

    #[arg(long)]
    batch_size: Option<usize>,

    #[arg(long)]
    l2_weight: Option<f64>,

    #[arg(long)]
    max_epochs: Option<usize>,

    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[arg(long)]
    patience: Option<usize>,

    #[arg(long)]
    val_fraction: Option<f64>,

    /// adam | sgd-momentum.
    #[arg(long)]
    optimizer: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// One of: gcn-wass, gcn-mmd, tarnet, cfrnet-wass, cfrnet-mmd.
    #[arg(long)]
    model: String,

    /// Dataset directory produced by `generate`.
    #[arg(long)]
    dataset: PathBuf,

    /// Seeds parameter initialisation, batch order and the validation split.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    arch: ArchFlags,

    #[command(flatten)]
    balance: BalanceFlags,

    #[command(flatten)]
    train: TrainFlags,

    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_adjacency(s: &str) -> Result<AdjacencyMode> {
    match s {
        "symmetric-normalized" => Ok(AdjacencyMode::SymmetricNormalized),
        "raw-self-loops" => Ok(AdjacencyMode::RawSelfLoops),
        other => Err(Error::InvalidConfig(format!(
            "unknown adjacency mode '{other}' (expected symmetric-normalized or raw-self-loops)"
        ))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
        other => Err(Error::InvalidConfig(format!(
            "unknown optimizer '{other}' (expected adam or sgd-momentum)"
        ))),
    }
}

fn parse_mmd_kernel(s: &str) -> Result<MmdKernel> {
    match s {
        "rbf" => Ok(MmdKernel::Rbf),
        "linear" => Ok(MmdKernel::Linear),
        other => Err(Error::InvalidConfig(format!(
            "unknown MMD kernel '{other}' (expected rbf or linear)"
        ))),
    }
}

fn parse_bandwidth(s: &str) -> Result<RbfBandwidth> {
    if s == "median-heuristic" {
        return Ok(RbfBandwidth::MedianHeuristic);
    }
    s.parse::<f64>().map(RbfBandwidth::Fixed).map_err(|_| {
        Error::InvalidConfig(format!(
            "bad RBF bandwidth '{s}' (expected median-heuristic or a number)"
        ))
    })
}

fn parse_epsilon(s: &str) -> Result<SinkhornEpsilon> {
    if let Some(factor) = s.strip_prefix("median:") {
        return factor
            .parse::<f64>()
            .map(SinkhornEpsilon::RelativeToMedianCost)
            .map_err(|_| Error::InvalidConfig(format!("bad Sinkhorn epsilon factor '{factor}'")));
    }
    s.parse::<f64>().map(SinkhornEpsilon::Fixed).map_err(|_| {
        Error::InvalidConfig(format!(
            "bad Sinkhorn epsilon '{s}' (expected a number or median:<factor>)"
        ))
    })
}

fn apply_arch(mcfg: &mut ModelConfig, f: &ArchFlags) -> Result<()> {
    if let Some(v) = &f.rep_layers {
        mcfg.rep_layers = v.clone();
    }
    if let Some(v) = &f.head_layers {
        mcfg.head_layers = v.clone();
    }
    if let Some(s) = &f.adjacency {
        mcfg.adjacency = parse_adjacency(s)?;
    }
    Ok(())
}

fn apply_balance(b: &mut BalanceConfig, f: &BalanceFlags) -> Result<()> {
    if let Some(s) = &f.mmd_kernel {
        b.mmd_kernel = parse_mmd_kernel(s)?;
    }
    if let Some(s) = &f.rbf_bandwidth {
        b.rbf_bandwidth = parse_bandwidth(s)?;
    }
    if let Some(s) = &f.sinkhorn_epsilon {
        b.sinkhorn_epsilon = parse_epsilon(s)?;
    }
    if let Some(n) = f.sinkhorn_iters {
        b.sinkhorn_iters = n;
    }
    Ok(())
}

fn apply_train(t: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.alpha {
        t.alpha = v;
    }
    if let Some(v) = f.beta {
        t.beta = v;
    }
    if let Some(v) = f.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.l2_weight {
        t.l2_weight = v;
    }
    if let Some(v) = f.max_epochs {
        t.max_epochs = v;
    }
    if let Some(v) = f.patience {
        t.patience = v;
    }
    if let Some(v) = f.val_fraction {
        t.val_fraction = v;
    }
    if let Some(s) = &f.optimizer {
        t.optimizer = parse_optimizer(s)?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let kind: ModelKind = a.model.parse()?;
    let ds = load_dataset(&a.dataset)?;
    let mut mcfg = ModelConfig::for_kind(kind, ds.k(), ds.covariates.p(), a.seed);
    apply_arch(&mut mcfg, &a.arch)?;
    let mut base = BalanceConfig::default();
    apply_balance(&mut base, &a.balance)?;
    let bcfg = kind.configure_balance(&base);
    let mut tcfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    apply_train(&mut tcfg, &a.train)?;

    let (params, report) = train(&ds, &mcfg, &bcfg, &tcfg)?;

    let out = a.out.clone().unwrap_or_else(default_out);
    ensure_dir(&out)?;
    let ckpt_path = out.join(checkpoint_file_name(kind, a.seed));
    save_checkpoint(&ckpt_path, &mcfg, &params)?;
    let report_path = out.join(report_file_name(kind, a.seed));
    report.write_csv(&report_path)?;

    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "trained {} seed {}: {} epochs (best {}), final total loss {:.6}, wall {:.2}s",
        kind,
        a.seed,
        report.epochs.len(),
        report.best_epoch,
        last.total_train,
        report.wall_time_seconds
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("report: {}", report_path.display());
    Ok(0)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// One of: gcn-wass, gcn-mmd, tarnet, cfrnet-wass, cfrnet-mmd.
    #[arg(long)]
    model: String,

    /// Dataset directory holding the ground truth.
    #[arg(long)]
    dataset: PathBuf,

    /// Trained seeds to aggregate, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,

    /// Directory holding checkpoints written by `train` (default: output dir).
    #[arg(long)]
    checkpoints: Option<PathBuf>,

    /// Results CSV to append to (default: <out>/results.csv).
    #[arg(long)]
    results: Option<PathBuf>,

    /// Print all accumulated results as markdown tables afterwards.
    #[arg(long)]
    table: bool,

    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let kind: ModelKind = a.model.parse()?;
    let ds = load_dataset(&a.dataset)?;
    let out = a.out.clone().unwrap_or_else(default_out);
    let ckpt_dir = a.checkpoints.clone().unwrap_or_else(|| out.clone());

    let mut reports = Vec::with_capacity(a.seeds.len());
    for &seed in &a.seeds {
        let path = ckpt_dir.join(checkpoint_file_name(kind, seed));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let (mcfg, params) = load_checkpoint(&path)?;
        let inputs = ModelInputs::from_dataset(&ds, &mcfg);
        let yhat = predict_mu(&mcfg, &params, &inputs);
        reports.push(evaluate(&yhat, &ds.expected_outcomes, seed)?);
    }
    let summary = aggregate(&reports)?;

    let dataset_name = a
        .dataset
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.dataset.display().to_string());
    let row = ResultsRow {
        model: kind.name().to_string(),
        dataset: dataset_name,
        k: summary.k,
        k2: ds.provenance.sim_config().map(|c| c.k2),
        sqrt_pehe_mean: summary.sqrt_pehe.mean,
        sqrt_pehe_std: summary.sqrt_pehe.std,
        ate_mean: summary.ate_error.mean,
        ate_std: summary.ate_error.std,
    };

    ensure_dir(&out)?;
    let results_path = a.results.clone().unwrap_or_else(|| out.join("results.csv"));
    append_results_row(&results_path, &row)?;

    println!(
        "{} on {} ({} seeds): sqrt_pehe = {:.4} ± {:.4}, ate_error = {:.4} ± {:.4}",
        row.model,
        row.dataset,
        summary.n_reports,
        row.sqrt_pehe_mean,
        row.sqrt_pehe_std,
        row.ate_mean,
        row.ate_std
    );
    println!("results: {}", results_path.display());

    if a.table {
        let rows = read_results_csv(&results_path)?;
        print!("{}", render_markdown_table(&rows));
    }
    Ok(0)
}

/// Appends one row, creating the file with its header on first use and
/// refusing to extend a file whose header has drifted.
fn append_results_row(path: &PathBuf, row: &ResultsRow) -> Result<()> {
    use std::io::Write;

    let fresh = !path.exists();
    if !fresh {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match text.lines().next() {
            Some(header) if header == RESULTS_HEADER => {}
            _ => {
                return Err(Error::InvalidData(format!(
                    "{} exists with a different header; refusing to append",
                    path.display()
                )))
            }
        }
    }
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let body = results_csv_string(std::slice::from_ref(row));
    let line = if fresh {
        body
    } else {
        // Strip the header; the file already has one.
        body.split_once('\n').map(|x| x.1).unwrap_or_default().to_string()
    };
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// gradcheck

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Maximum allowed relative error between analytic and numeric gradients.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Subset of models to check, comma separated (default: all five).
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
}

/// Small random instance shared by every gradcheck run: 20 units in two
/// blocks, 5 covariate dimensions, 3 treatments.
pub(crate) fn gradcheck_dataset(seed: u64) -> Result<NetworkedDataset> {
    let n = 20;
    let k = 3;
    let graph = generate_sbm_graph(n, 2, 0.3, 0.1, seed)?;
    let covariates = generate_community_covariates(n, 2, 5, 6.0, 0.7, seed)?;
    let mut rng = rng_for(seed, stream::TREATMENTS);
    let treatments: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut expected = crate::numkernel::Matrix::zeros((n, k));
    for i in 0..n {
        let total: f64 = covariates.row(i).map(|(_, v)| v).sum();
        for t in 0..k {
            expected[[i, t]] = 0.5 * total + 1.5 * t as f64 + 0.05 * total * t as f64;
        }
    }
    let factual: Vec<f64> = (0..n).map(|i| expected[[i, treatments[i]]]).collect();
    Ok(NetworkedDataset {
        graph,
        covariates,
        treatments,
        factual_outcomes: factual,
        expected_outcomes: expected,
        provenance: Provenance::External,
        noise: None,
        seed,
    })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let kinds: Vec<ModelKind> = match &a.models {
        Some(names) => names
            .iter()
            .map(|n| n.parse())
            .collect::<Result<Vec<_>>>()?,
        None => ModelKind::ALL.to_vec(),
    };
    let ds = gradcheck_dataset(a.seed)?;
    let batch: Vec<usize> = (0..ds.n_units()).collect();

    let mut all_pass = true;
    let mut worst: Option<(ModelKind, String, f64)> = None;
    for &kind in &kinds {
        let mcfg = ModelConfig::for_kind(kind, ds.k(), ds.covariates.p(), a.seed);
        let bcfg = kind.configure_balance(&BalanceConfig::default());
        let inputs = ModelInputs::from_dataset(&ds, &mcfg);
        let spec = ObjectiveSpec {
            mcfg: &mcfg,
            balance: bcfg,
            l2_weight: 0.01,
            inputs: &inputs,
            y: &ds.factual_outcomes,
            treatments: &ds.treatments,
        };
        let params = crate::model::init_params(&mcfg);
        let eval = spec.gradients(&params, &batch)?;
        let report = gradcheck::check(params.tensors(), &eval.grads, |tensors| {
            let probe = crate::model::ModelParams::from_tensors(&mcfg, tensors.to_vec())
                .expect("probe tensors match config");
            spec.value(&probe, &batch)
        });
        let specs = tensor_specs(&mcfg);
        let location = report
            .worst
            .map(|w| format!("{}[{},{}]", specs[w.param].name, w.row, w.col))
            .unwrap_or_else(|| "none".to_string());
        let pass = report.passes(a.tolerance);
        all_pass &= pass;
        println!(
            "{}: max rel err {:.3e} at {} over {} coords {}",
            kind,
            report.max_rel_err,
            location,
            report.n_coords,
            if pass { "PASS" } else { "FAIL" }
        );
        if worst.as_ref().is_none_or(|(_, _, e)| report.max_rel_err > *e) {
            worst = Some((kind, location, report.max_rel_err));
        }
    }
    if all_pass {
        println!("gradcheck PASS at tolerance {:e}", a.tolerance);
        Ok(0)
    } else {
        let (kind, location, err) = worst.expect("at least one model checked");
        println!(
            "gradcheck FAIL at tolerance {:e}: worst offender {} at {} with rel err {:.3e}",
            a.tolerance, kind, location, err
        );
        Ok(1)
    }
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Args, Debug)]
struct SweepArgs {
    /// Experiment config file: JSON, or dotted key=value lines.
    #[arg(long)]
    config: PathBuf,

    /// Worker threads for parallel cells (default: one per CPU core).
    #[arg(long)]
    jobs: Option<usize>,

    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Override the config's seed list, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Override the config's model list, comma separated.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
}

fn cmd_sweep(a: &SweepArgs) -> Result<i32> {
    let mut cfg = load_experiment_config(&a.config)?;
    if let Some(out) = &a.out {
        cfg.output = out.clone();
    }
    if let Some(seeds) = &a.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(models) = &a.models {
        cfg.models = models.clone();
    }
    run_sweep(&cfg, a.jobs)?;
    Ok(0)
}
