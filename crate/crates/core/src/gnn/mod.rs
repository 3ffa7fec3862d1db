//! GCN and GIN encoders with a linear prediction head.

mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{SparseMatrix, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Subgraph;

pub use checkpoint::{read_checkpoint, write_checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Gcn,
    Gin,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Gcn => "gcn",
            Architecture::Gin => "gin",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Architecture::Gcn),
            "gin" => Ok(Architecture::Gin),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Shape and regularization of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Number of message-passing layers, which is also the receptive-field depth.
    pub layers: usize,
    pub dropout: f64,
    pub gin_eps: f64,
}

impl ModelSpec {
    pub fn new(arch: Architecture, in_dim: usize, num_classes: usize) -> Self {
        Self {
            arch,
            in_dim,
            hidden_dim: 64,
            embed_dim: 64,
            num_classes,
            layers: 2,
            dropout: 0.5,
            gin_eps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be 1..=3, got {}", self.layers)));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !self.gin_eps.is_finite() {
            return Err(Error::Config("gin_eps must be finite".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let d_in = if l == 0 { self.in_dim } else { self.hidden_dim };
                let d_out = if l + 1 == self.layers { self.embed_dim } else { self.hidden_dim };
                (d_in, d_out)
            })
            .collect()
    }

    /// Parameter names and shapes in storage order.
    pub fn param_layout(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for (l, (d_in, d_out)) in self.layer_dims().into_iter().enumerate() {
            match self.arch {
                Architecture::Gcn => out.push((format!("layer{l}.weight"), (d_in, d_out))),
                Architecture::Gin => {
                    out.push((format!("layer{l}.mlp0.weight"), (d_in, d_out)));
                    out.push((format!("layer{l}.mlp0.bias"), (1, d_out)));
                    out.push((format!("layer{l}.mlp1.weight"), (d_out, d_out)));
                    out.push((format!("layer{l}.mlp1.bias"), (1, d_out)));
                }
            }
        }
        out.push(("head.weight".into(), (self.embed_dim, self.num_classes)));
        out.push(("head.bias".into(), (1, self.num_classes)));
        out
    }
}

/// Message-passing encoder plus linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct GnnModel {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Tensor>,
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

impl GnnModel {
    /// Glorot-uniform weights and zero biases, drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_layout()
            .into_iter()
            .map(|(name, (r, c))| {
                if name.ends_with(".bias") {
                    Tensor::zeros(r, c)
                } else {
                    glorot(r, c, &mut rng)
                }
            })
            .collect();
        Ok(Self { spec, seed, params })
    }

    /// Builds a model from explicit parameters, checked against `ModelSpec::param_layout`.
    pub fn from_params(spec: ModelSpec, seed: u64, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.param_layout();
        if layout.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if p.shape() != *shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { spec, seed, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Final-layer embeddings for every node of `sub`.
    ///
    /// With `dropout` set, hidden activations are dropped at `ModelSpec::dropout`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        sub: &Subgraph,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let spec = &self.spec;
        let adjacency = match spec.arch {
            Architecture::Gcn => sub.gcn_adjacency(),
            Architecture::Gin => sub.sum_adjacency(1.0 + spec.gin_eps),
        };
        let mut h: Option<Var> = None;
        let per_layer = match spec.arch {
            Architecture::Gcn => 1,
            Architecture::Gin => 4,
        };
        for l in 0..spec.layers {
            let p = &vars[l * per_layer..(l + 1) * per_layer];
            let last = l + 1 == spec.layers;
            let out = match spec.arch {
                Architecture::Gcn => gcn_layer_input(tape, h, sub.features(), &adjacency, p[0], !last)?,
                Architecture::Gin => {
                    gin_layer_input(tape, h, sub.features(), &adjacency, [p[0], p[1], p[2], p[3]], !last)?
                }
            };
            h = Some(match (last, dropout.as_deref_mut()) {
                (false, Some(rng)) if spec.dropout > 0.0 => apply_dropout(tape, out, spec.dropout, rng)?,
                _ => out,
            });
        }
        Ok(h.expect("at least one layer"))
    }

    /// Linear head on embedding rows.
    pub fn head(&self, tape: &mut Tape, vars: &[Var], embeddings: Var) -> Result<Var> {
        let n = vars.len();
        let z = tape.matmul(embeddings, vars[n - 2])?;
        tape.add_row_bias(z, vars[n - 1])
    }

    /// Embeddings of `node_locals` (local indices of `sub`), in request order.
    pub fn embed(&self, sub: &Subgraph, node_locals: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape)?;
        let all = self.encode(&mut tape, &vars, sub, None)?;
        let rows = tape.gather_rows(all, Arc::new(node_locals.to_vec()))?;
        Ok(tape.value(rows)?.clone())
    }

    /// Logits of `node_locals`, in request order.
    pub fn predict(&self, sub: &Subgraph, node_locals: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape)?;
        let all = self.encode(&mut tape, &vars, sub, None)?;
        let rows = tape.gather_rows(all, Arc::new(node_locals.to_vec()))?;
        let logits = self.head(&mut tape, &vars, rows)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Logits for every node of `sub`.
    pub fn predict_all(&self, sub: &Subgraph) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind_frozen(&mut tape)?;
        let all = self.encode(&mut tape, &vars, sub, None)?;
        let logits = self.head(&mut tape, &vars, all)?;
        Ok(tape.value(logits)?.clone())
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let (r, c) = tape.value(x)?.shape();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, Arc::new(Tensor::from_vec(r, c, mask)?))
}

/// `relu(Â · H · W)`, relu optional.
pub fn gcn_layer(tape: &mut Tape, h: Var, adjacency: &Arc<SparseMatrix>, w: Var, apply_relu: bool) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let out = tape.spmm(adjacency, hw)?;
    if apply_relu {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

/// `MLP(A_ε · H)` with `A_ε = A + (1 + ε) I` and a two-layer MLP; the final relu is optional.
pub fn gin_layer(
    tape: &mut Tape,
    h: Var,
    adjacency: &Arc<SparseMatrix>,
    mlp: [Var; 4],
    apply_relu: bool,
) -> Result<Var> {
    let agg = tape.spmm(adjacency, h)?;
    let z = tape.matmul(agg, mlp[0])?;
    gin_mlp_tail(tape, z, mlp, apply_relu)
}

fn gin_mlp_tail(tape: &mut Tape, z: Var, mlp: [Var; 4], apply_relu: bool) -> Result<Var> {
    let z = tape.add_row_bias(z, mlp[1])?;
    let z = tape.relu(z)?;
    let z = tape.matmul(z, mlp[2])?;
    let z = tape.add_row_bias(z, mlp[3])?;
    if apply_relu {
        tape.relu(z)
    } else {
        Ok(z)
    }
}

// First layers multiply the sparse features by the weight before aggregating,
// which is the same product reordered.
fn gcn_layer_input(
    tape: &mut Tape,
    h: Option<Var>,
    features: &Arc<SparseMatrix>,
    adjacency: &Arc<SparseMatrix>,
    w: Var,
    apply_relu: bool,
) -> Result<Var> {
    match h {
        Some(h) => gcn_layer(tape, h, adjacency, w, apply_relu),
        None => {
            let xw = tape.spmm(features, w)?;
            let out = tape.spmm(adjacency, xw)?;
            if apply_relu {
                tape.relu(out)
            } else {
                Ok(out)
            }
        }
    }
}

fn gin_layer_input(
    tape: &mut Tape,
    h: Option<Var>,
    features: &Arc<SparseMatrix>,
    adjacency: &Arc<SparseMatrix>,
    mlp: [Var; 4],
    apply_relu: bool,
) -> Result<Var> {
    match h {
        Some(h) => gin_layer(tape, h, adjacency, mlp, apply_relu),
        None => {
            let xw = tape.spmm(features, mlp[0])?;
            let z = tape.spmm(adjacency, xw)?;
            gin_mlp_tail(tape, z, mlp, apply_relu)
        }
    }
}
