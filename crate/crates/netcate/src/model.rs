//! Counterfactual regression models: a shared representation tower (graph
//! convolutional or fully connected) feeding one outcome head per treatment.
//!
//! Every head is evaluated on every forward pass, so the same recorded graph
//! yields factual predictions for training and the full outcome surface for
//! effect estimation.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{BalanceConfig, IpmKind};
use crate::error::{Error, Result};
use crate::graphdata::NetworkedDataset;
use crate::numkernel::{CsrMatrix, Matrix, NodeId, Tape};
use crate::rng::{rng_for, stream};

/// The five model variants exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    GcnWass,
    GcnMmd,
    Tarnet,
    CfrnetWass,
    CfrnetMmd,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::GcnWass,
        ModelKind::GcnMmd,
        ModelKind::Tarnet,
        ModelKind::CfrnetWass,
        ModelKind::CfrnetMmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::GcnWass => "gcn-wass",
            ModelKind::GcnMmd => "gcn-mmd",
            ModelKind::Tarnet => "tarnet",
            ModelKind::CfrnetWass => "cfrnet-wass",
            ModelKind::CfrnetMmd => "cfrnet-mmd",
        }
    }

    pub fn representation(self) -> RepresentationKind {
        match self {
            ModelKind::GcnWass | ModelKind::GcnMmd => RepresentationKind::GraphConv,
            _ => RepresentationKind::FullyConnected,
        }
    }

    /// Overlays this variant's balance metric on a base numeric config.
    /// TARNet trains without a balance term.
    pub fn configure_balance(self, base: &BalanceConfig) -> BalanceConfig {
        let kind = match self {
            ModelKind::GcnWass | ModelKind::CfrnetWass => IpmKind::Wasserstein,
            ModelKind::GcnMmd | ModelKind::CfrnetMmd => IpmKind::Mmd,
            ModelKind::Tarnet => IpmKind::None,
        };
        BalanceConfig {
            kind,
            ..base.clone()
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownModel(s.to_string()))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationKind {
    GraphConv,
    FullyConnected,
}

/// How the graph propagation operator is formed from the adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyMode {
    /// D^(-1/2) (A + I) D^(-1/2), the numerically safe default.
    SymmetricNormalized,
    /// Literal A + I.
    RawSelfLoops,
}

/// Architecture of one model instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub representation: RepresentationKind,
    /// Widths of the representation layers.
    pub rep_layers: Vec<usize>,
    /// Widths of the hidden head layers; each head ends in a linear unit.
    pub head_layers: Vec<usize>,
    pub k: usize,
    pub input_dim: usize,
    pub adjacency: AdjacencyMode,
    pub seed: u64,
}

impl ModelConfig {
    /// Default tower sizes: three graph-convolution layers or two
    /// fully-connected layers of width 25, heads of two width-10 layers.
    pub fn for_kind(kind: ModelKind, k: usize, input_dim: usize, seed: u64) -> Self {
        let representation = kind.representation();
        let rep_layers = match representation {
            RepresentationKind::GraphConv => vec![25, 25, 25],
            RepresentationKind::FullyConnected => vec![25, 25],
        };
        ModelConfig {
            representation,
            rep_layers,
            head_layers: vec![10, 10],
            k,
            input_dim,
            adjacency: AdjacencyMode::SymmetricNormalized,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 treatments, got {}",
                self.k
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if self.rep_layers.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one representation layer is required".into(),
            ));
        }
        if self.rep_layers.iter().chain(&self.head_layers).any(|&d| d == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn rep_dim(&self) -> usize {
        *self.rep_layers.last().expect("validated non-empty")
    }
}

/// Name, shape, and decay eligibility of one tensor. The order of
/// [`tensor_specs`] is the canonical parameter order everywhere: init,
/// flattening, checkpoints, and the forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub is_weight: bool,
}

pub fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut d_prev = cfg.input_dim;
    for (l, &d) in cfg.rep_layers.iter().enumerate() {
        specs.push(TensorSpec {
            name: format!("rep.{l}.weight"),
            rows: d_prev,
            cols: d,
            is_weight: true,
        });
        if cfg.representation == RepresentationKind::FullyConnected {
            specs.push(TensorSpec {
                name: format!("rep.{l}.bias"),
                rows: 1,
                cols: d,
                is_weight: false,
            });
        }
        d_prev = d;
    }
    let rep_dim = d_prev;
    for t in 0..cfg.k {
        let mut d_prev = rep_dim;
        for (l, &d) in cfg.head_layers.iter().chain(std::iter::once(&1)).enumerate() {
            specs.push(TensorSpec {
                name: format!("head.{t}.{l}.weight"),
                rows: d_prev,
                cols: d,
                is_weight: true,
            });
            specs.push(TensorSpec {
                name: format!("head.{t}.{l}.bias"),
                rows: 1,
                cols: d,
                is_weight: false,
            });
            d_prev = d;
        }
    }
    specs
}

/// All tensors of one model, in [`tensor_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Matrix>,
}

impl ModelParams {
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let specs = tensor_specs(cfg);
        if tensors.len() != specs.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in specs.iter().zip(&tensors) {
            if t.dim() != (spec.rows, spec.cols) {
                return Err(Error::Shape(format!(
                    "{} must be {}x{}, got {}x{}",
                    spec.name,
                    spec.rows,
                    spec.cols,
                    t.nrows(),
                    t.ncols()
                )));
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }
}

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))) and zero
/// biases, drawn in [`tensor_specs`] order from the parameter-init stream of
/// the model seed. Entries fill row by row.
pub fn init_params(cfg: &ModelConfig) -> ModelParams {
    let mut rng = rng_for(cfg.seed, stream::PARAM_INIT);
    let tensors = tensor_specs(cfg)
        .into_iter()
        .map(|spec| {
            if spec.is_weight {
                let bound = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                Matrix::from_shape_fn((spec.rows, spec.cols), |_| {
                    rng.random_range(-bound..bound)
                })
            } else {
                Matrix::zeros((spec.rows, spec.cols))
            }
        })
        .collect();
    ModelParams { tensors }
}

/// Constant inputs of a forward pass: the sparse covariates and, for
/// graph-convolutional towers, the propagation operator.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub x: Rc<CsrMatrix>,
    pub propagation: Option<Rc<CsrMatrix>>,
}

impl ModelInputs {
    pub fn from_dataset(ds: &NetworkedDataset, cfg: &ModelConfig) -> Self {
        let propagation = match cfg.representation {
            RepresentationKind::GraphConv => Some(Rc::new(
                ds.graph
                    .propagation_csr(cfg.adjacency == AdjacencyMode::SymmetricNormalized),
            )),
            RepresentationKind::FullyConnected => None,
        };
        ModelInputs {
            x: Rc::new(ds.covariates.as_csr().clone()),
            propagation,
        }
    }
}

/// Tape handles produced by [`build_forward`].
pub struct ForwardPass {
    /// N x rep_dim representations.
    pub phi: NodeId,
    /// One N x 1 outcome column per treatment.
    pub head_outputs: Vec<NodeId>,
    /// Parameter nodes, aligned with [`ModelParams::tensors`].
    pub param_ids: Vec<NodeId>,
}

/// Records the full model onto the tape and returns the representation, all
/// K outcome columns, and the registered parameter nodes.
pub fn build_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    params: &ModelParams,
    inputs: &ModelInputs,
) -> ForwardPass {
    let specs = tensor_specs(cfg);
    assert_eq!(specs.len(), params.tensors.len(), "params match the config");
    let param_ids: Vec<NodeId> = params
        .tensors
        .iter()
        .map(|m| tape.param(m.clone()))
        .collect();
    let mut next = 0usize;
    let mut take = || {
        let id = param_ids[next];
        next += 1;
        id
    };

    let phi = match cfg.representation {
        RepresentationKind::GraphConv => {
            let prop = inputs
                .propagation
                .clone()
                .expect("graph-conv forward needs a propagation operator");
            let mut h: Option<NodeId> = None;
            for _ in 0..cfg.rep_layers.len() {
                let w = take();
                let transformed = match h {
                    None => tape.spmm(inputs.x.clone(), w),
                    Some(prev) => tape.matmul(prev, w),
                };
                let propagated = tape.spmm(prop.clone(), transformed);
                h = Some(tape.elu(propagated));
            }
            h.expect("validated non-empty representation tower")
        }
        RepresentationKind::FullyConnected => {
            let mut h: Option<NodeId> = None;
            for _ in 0..cfg.rep_layers.len() {
                let w = take();
                let b = take();
                let pre = match h {
                    None => tape.spmm(inputs.x.clone(), w),
                    Some(prev) => tape.matmul(prev, w),
                };
                let biased = tape.add_row_broadcast(pre, b);
                h = Some(tape.elu(biased));
            }
            h.expect("validated non-empty representation tower")
        }
    };

    let head_outputs = (0..cfg.k)
        .map(|_| {
            let mut h = phi;
            for _ in 0..cfg.head_layers.len() {
                let w = take();
                let b = take();
                let a = tape.affine(h, w, b);
                h = tape.elu(a);
            }
            let w = take();
            let b = take();
            tape.affine(h, w, b)
        })
        .collect();
    assert_eq!(next, param_ids.len(), "every tensor is consumed exactly once");

    ForwardPass {
        phi,
        head_outputs,
        param_ids,
    }
}

/// Forward-only evaluation of all K outcome columns as an N x K matrix.
pub fn predict_mu(cfg: &ModelConfig, params: &ModelParams, inputs: &ModelInputs) -> Matrix {
    let mut tape = Tape::new();
    let pass = build_forward(&mut tape, cfg, params, inputs);
    let n = tape.value(pass.phi).nrows();
    let mut mu = Matrix::zeros((n, cfg.k));
    for (t, &col) in pass.head_outputs.iter().enumerate() {
        mu.column_mut(t).assign(&tape.value(col).column(0));
    }
    mu
}

/// Estimated effect of treatment a over treatment b for every unit.
pub fn predict_ite(mu: &Matrix, a: usize, b: usize) -> Vec<f64> {
    assert!(a < mu.ncols() && b < mu.ncols(), "treatment out of range");
    (0..mu.nrows()).map(|i| mu[[i, a]] - mu[[i, b]]).collect()
}

const CHECKPOINT_HEADER: &str = "netcate-checkpoint v1";

/// Writes a checkpoint: the header line, the architecture as one JSON line,
/// then each tensor as `matrix <name> <rows> <cols>` followed by one
/// space-separated line per row. Values round-trip bit-exactly through the
/// shortest-representation float format.
pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        writeln!(w, "{s}").map_err(|e| Error::io(path, e))
    };
    write(&mut w, CHECKPOINT_HEADER.to_string())?;
    write(&mut w, serde_json::to_string(cfg)?)?;
    for (spec, m) in tensor_specs(cfg).iter().zip(params.tensors()) {
        write(
            &mut w,
            format!("matrix {} {} {}", spec.name, spec.rows, spec.cols),
        )?;
        for row in m.rows() {
            let line = row
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(" ");
            write(&mut w, line)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next_line = || -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((_, Err(e))) => Err(Error::io(path, e)),
            None => Err(Error::parse(path, 0, "unexpected end of checkpoint")),
        }
    };

    let (ln, header) = next_line()?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::parse(path, ln, format!("bad header '{header}'")));
    }
    let (ln, cfg_line) = next_line()?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_line)
        .map_err(|e| Error::parse(path, ln, format!("bad architecture line: {e}")))?;
    cfg.validate()?;

    let mut tensors = Vec::new();
    for spec in tensor_specs(&cfg) {
        let (ln, head) = next_line()?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        let expected = format!("matrix {} {} {}", spec.name, spec.rows, spec.cols);
        if fields.len() != 4
            || fields[0] != "matrix"
            || fields[1] != spec.name
            || fields[2] != spec.rows.to_string()
            || fields[3] != spec.cols.to_string()
        {
            return Err(Error::parse(
                path,
                ln,
                format!("expected '{expected}', got '{head}'"),
            ));
        }
        let mut m = Matrix::zeros((spec.rows, spec.cols));
        for r in 0..spec.rows {
            let (ln, row) = next_line()?;
            let vals: Vec<&str> = row.split_whitespace().collect();
            if vals.len() != spec.cols {
                return Err(Error::parse(
                    path,
                    ln,
                    format!("expected {} values, got {}", spec.cols, vals.len()),
                ));
            }
            for (c, v) in vals.iter().enumerate() {
                m[[r, c]] = v.parse().map_err(|e| {
                    Error::parse(path, ln, format!("bad float '{v}': {e}"))
                })?;
            }
        }
        tensors.push(m);
    }
    let params = ModelParams::from_tensors(&cfg, tensors)?;
    Ok((cfg, params))
}
