//! Graph batches, MLPs, the convolution operators and readouts.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParameterStore};
use super::tape::{Tape, Tensor, Var};
use crate::embed::NodeFeatureMatrix;
use crate::tree::TreeTopology;
use crate::{Error, Result};

/// Disjoint union of trees as one graph.
///
/// Directed edge `2k` runs from the first to the second endpoint of
/// undirected edge `k`, and `2k + 1` the other way.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub n_nodes: usize,
    pub n_graphs: usize,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub end_a: Arc<Vec<usize>>,
    pub end_b: Arc<Vec<usize>>,
    pub graph_of: Arc<Vec<usize>>,
    /// `1/√(1 + d_v)` and `1/d_v` per node.
    pub gcn_norm: Arc<Array1<f64>>,
    pub inv_degree: Arc<Array1<f64>>,
    /// First node id and first undirected edge id of every graph.
    pub node_offset: Vec<usize>,
    pub edge_offset: Vec<usize>,
}

impl GraphBatch {
    pub fn from_trees<T: AsRef<TreeTopology>>(trees: &[T]) -> Self {
        let mut b = GraphBatchBuilder::default();
        for t in trees {
            b.push(t.as_ref());
        }
        b.finish()
    }

    /// Single graph given by an undirected edge list.
    pub fn from_edge_list(n_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut b = GraphBatchBuilder::default();
        b.push_edges(n_nodes, edges);
        b.finish()
    }

    pub fn n_edges(&self) -> usize {
        self.end_a.len()
    }

    /// Stacks per-tree node features in batch order.
    pub fn stack_features(feats: &[&NodeFeatureMatrix]) -> Result<Tensor> {
        let views: Vec<_> = feats.iter().map(|f| f.0.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Dimension(format!("feature stacking: {e}")))
    }
}

impl AsRef<TreeTopology> for TreeTopology {
    fn as_ref(&self) -> &TreeTopology {
        self
    }
}

#[derive(Default)]
struct GraphBatchBuilder {
    n_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    end_a: Vec<usize>,
    end_b: Vec<usize>,
    graph_of: Vec<usize>,
    degree: Vec<f64>,
    node_offset: Vec<usize>,
    edge_offset: Vec<usize>,
}

impl GraphBatchBuilder {
    fn push(&mut self, tree: &TreeTopology) {
        self.push_edges(tree.n_nodes(), tree.edges());
    }

    fn push_edges(&mut self, n_nodes: usize, edges: &[(usize, usize)]) {
        let off = self.n_nodes;
        let g = self.node_offset.len();
        self.node_offset.push(off);
        self.edge_offset.push(self.end_a.len());
        let mut degree = vec![0.0; n_nodes];
        for &(x, y) in edges {
            degree[x] += 1.0;
            degree[y] += 1.0;
            let (x, y) = (x + off, y + off);
            self.end_a.push(x);
            self.end_b.push(y);
            self.src.extend([x, y]);
            self.dst.extend([y, x]);
        }
        self.graph_of.extend(std::iter::repeat_n(g, n_nodes));
        self.degree.extend(degree);
        self.n_nodes += n_nodes;
    }

    fn finish(self) -> GraphBatch {
        GraphBatch {
            n_nodes: self.n_nodes,
            n_graphs: self.node_offset.len(),
            src: Arc::new(self.src),
            dst: Arc::new(self.dst),
            end_a: Arc::new(self.end_a),
            end_b: Arc::new(self.end_b),
            graph_of: Arc::new(self.graph_of),
            gcn_norm: Arc::new(self.degree.iter().map(|d| 1.0 / (1.0 + d).sqrt()).collect()),
            inv_degree: Arc::new(self.degree.iter().map(|d| 1.0 / d).collect()),
            node_offset: self.node_offset,
            edge_offset: self.edge_offset,
        }
    }
}

/// Convolution family; `Mlp` runs no message passing at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Mlp,
    Gcn,
    Gin,
    Sage,
    Ggnn,
    Edge,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Mlp, Variant::Gcn, Variant::Gin, Variant::Sage, Variant::Ggnn, Variant::Edge];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Mlp => "mlp",
            Variant::Gcn => "gcn",
            Variant::Gin => "gin",
            Variant::Sage => "sage",
            Variant::Ggnn => "ggnn",
            Variant::Edge => "edge",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown GNN variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub variant: Variant,
    /// Message-passing steps; ignored (treated as 0) for `Variant::Mlp`.
    pub layers: usize,
    pub hidden_dim: usize,
    pub mlp_layers: usize,
    pub learnable_eps: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self { variant: Variant::Ggnn, layers: 2, hidden_dim: 100, mlp_layers: 2, learnable_eps: false }
    }
}

impl GnnConfig {
    pub fn new(variant: Variant, hidden_dim: usize) -> Self {
        Self { variant, hidden_dim, ..Self::default() }
    }

    pub fn steps(&self) -> usize {
        if self.variant == Variant::Mlp {
            0
        } else {
            self.layers
        }
    }
}

/// Affine layers with ELU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParameterStore, prefix: &str, dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                Ok((store.add_glorot(&format!("{prefix}.{k}.w"), w[0], w[1], rng)?, store.add_zeros(&format!("{prefix}.{k}.b"), 1, w[1])?))
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn in_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.layers[0].0).nrows()
    }

    pub fn out_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.layers.last().expect("non-empty").0).ncols()
    }

    /// Parameter ids in order (weight, bias) per layer.
    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let cols = tape.value(x).ncols();
        if cols != self.in_dim(store) {
            return Err(Error::Dimension(format!("MLP expects width {}, got {cols}", self.in_dim(store))));
        }
        let mut h = x;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            if k > 0 {
                h = tape.elu(h);
            }
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.matmul(h, w);
            h = tape.add_row(h, b);
        }
        Ok(h)
    }
}

fn mlp_dims(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
    d.push(output);
    d
}

/// Weights of one GRU cell, gates in (reset, update, new) order.
#[derive(Debug, Clone)]
struct Gru {
    w_in: [ParamId; 3],
    w_hid: [ParamId; 3],
    b_in: [ParamId; 3],
    b_hid: [ParamId; 3],
}

/// One message-passing step.
#[derive(Debug, Clone)]
pub enum Conv {
    Gcn { w: ParamId },
    Gin { mlp: Mlp, eps: Option<ParamId>, fixed_eps: f64 },
    Sage { w_self: ParamId, w_neigh: ParamId },
    Ggnn { w: ParamId, gru: Box<GruParams> },
    Edge { mlp: Mlp },
}

/// Opaque GRU parameter block.
#[derive(Debug, Clone)]
pub struct GruParams(Gru);

impl Conv {
    pub fn new<R: Rng + ?Sized>(cfg: &GnnConfig, in_dim: usize, store: &mut ParameterStore, prefix: &str, rng: &mut R) -> Result<Self> {
        let h = cfg.hidden_dim;
        Ok(match cfg.variant {
            Variant::Mlp => return Err(Error::Config("the MLP variant has no convolution".into())),
            Variant::Gcn => Conv::Gcn { w: store.add_glorot(&format!("{prefix}.w"), in_dim, h, rng)? },
            Variant::Gin => Conv::Gin {
                mlp: Mlp::new(store, &format!("{prefix}.mlp"), &mlp_dims(in_dim, h, h, cfg.mlp_layers), rng)?,
                eps: if cfg.learnable_eps { Some(store.add_zeros(&format!("{prefix}.eps"), 1, 1)?) } else { None },
                fixed_eps: 0.0,
            },
            Variant::Sage => Conv::Sage {
                w_self: store.add_glorot(&format!("{prefix}.w_self"), in_dim, h, rng)?,
                w_neigh: store.add_glorot(&format!("{prefix}.w_neigh"), in_dim, h, rng)?,
            },
            Variant::Ggnn => {
                if in_dim > h {
                    return Err(Error::Config(format!("GGNN needs hidden_dim ≥ input width ({h} < {in_dim})")));
                }
                let mut p = |s: &str, r, c, rng: &mut R| store.add_glorot(&format!("{prefix}.{s}"), r, c, rng);
                let w = p("w", h, h, rng)?;
                let w_in = [p("gru.w_ir", h, h, rng)?, p("gru.w_iz", h, h, rng)?, p("gru.w_in", h, h, rng)?];
                let w_hid = [p("gru.w_hr", h, h, rng)?, p("gru.w_hz", h, h, rng)?, p("gru.w_hn", h, h, rng)?];
                let mut z = |s: &str| store.add_zeros(&format!("{prefix}.gru.{s}"), 1, h);
                let b_in = [z("b_ir")?, z("b_iz")?, z("b_in")?];
                let b_hid = [z("b_hr")?, z("b_hz")?, z("b_hn")?];
                Conv::Ggnn { w, gru: Box::new(GruParams(Gru { w_in, w_hid, b_in, b_hid })) }
            }
            Variant::Edge => Conv::Edge { mlp: Mlp::new(store, &format!("{prefix}.mlp"), &mlp_dims(2 * in_dim, h, h, cfg.mlp_layers), rng)? },
        })
    }

    /// Applies the operator to node features `h` (one row per batch node).
    /// Returns new node features and, for EDGE, per-directed-edge features.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, h: Var) -> Result<(Var, Option<Var>)> {
        let (rows, cols) = tape.value(h).dim();
        if rows != batch.n_nodes {
            return Err(Error::Dimension(format!("{rows} feature rows for {} nodes", batch.n_nodes)));
        }
        let neighbor_sum = |tape: &mut Tape, x: Var| {
            let g = tape.gather(x, batch.src.clone());
            tape.scatter_add(g, batch.dst.clone(), batch.n_nodes)
        };
        let expect = |w: ParamId, tape: &Tape| -> Result<()> {
            let need = store.value(w).nrows();
            if need == cols {
                Ok(())
            } else {
                Err(Error::Dimension(format!("convolution expects width {need}, got {}", tape.value(h).ncols())))
            }
        };
        match self {
            Conv::Gcn { w } => {
                expect(*w, tape)?;
                let scaled = tape.scale_rows(h, batch.gcn_norm.clone());
                let nb = neighbor_sum(tape, scaled);
                let m = tape.add(scaled, nb);
                let m = tape.scale_rows(m, batch.gcn_norm.clone());
                let w = tape.param(store, *w);
                Ok((tape.matmul(m, w), None))
            }
            Conv::Gin { mlp, eps, fixed_eps } => {
                let m = neighbor_sum(tape, h);
                let own = match eps {
                    Some(e) => {
                        let e = tape.param(store, *e);
                        let eh = tape.mul_scalar(h, e);
                        tape.add(h, eh)
                    }
                    None => tape.scale(h, 1.0 + fixed_eps),
                };
                let z = tape.add(own, m);
                Ok((mlp.forward(tape, store, z)?, None))
            }
            Conv::Sage { w_self, w_neigh } => {
                expect(*w_self, tape)?;
                let m = neighbor_sum(tape, h);
                let m = tape.scale_rows(m, batch.inv_degree.clone());
                let (a, b) = (tape.param(store, *w_self), tape.param(store, *w_neigh));
                let x = tape.matmul(h, a);
                let y = tape.matmul(m, b);
                Ok((tape.add(x, y), None))
            }
            Conv::Ggnn { w, gru } => {
                let hid = store.value(*w).nrows();
                let h = if cols < hid { tape.concat_zeros(h, hid - cols) } else { h };
                let w = tape.param(store, *w);
                let wh = tape.matmul(h, w);
                let m = neighbor_sum(tape, wh);
                Ok((gru.0.forward(tape, store, m, h), None))
            }
            Conv::Edge { mlp } => {
                let hv = tape.gather(h, batch.dst.clone());
                let hu = tape.gather(h, batch.src.clone());
                let diff = tape.sub(hu, hv);
                let x = tape.concat(hv, diff);
                let e = mlp.forward(tape, store, x)?;
                Ok((tape.scatter_add(e, batch.dst.clone(), batch.n_nodes), Some(e)))
            }
        }
    }
}

impl Gru {
    fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, h: Var) -> Var {
        let affine = |k: usize, tape: &mut Tape| {
            let (wi, bi) = (tape.param(store, self.w_in[k]), tape.param(store, self.b_in[k]));
            let (wh, bh) = (tape.param(store, self.w_hid[k]), tape.param(store, self.b_hid[k]));
            let xi = tape.matmul(x, wi);
            let xi = tape.add_row(xi, bi);
            let hh = tape.matmul(h, wh);
            let hh = tape.add_row(hh, bh);
            (xi, hh)
        };
        let (xr, hr) = affine(0, tape);
        let pre_r = tape.add(xr, hr);
        let r = tape.sigmoid(pre_r);
        let (xz, hz) = affine(1, tape);
        let pre_z = tape.add(xz, hz);
        let z = tape.sigmoid(pre_z);
        let (xn, hn) = affine(2, tape);
        let gated = tape.mul(r, hn);
        let pre_n = tape.add(xn, gated);
        let n = tape.tanh(pre_n);
        // (1 − z) ⊙ n + z ⊙ h
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }
}

impl Tape {
    /// Appends `k` zero columns.
    pub fn concat_zeros(&mut self, a: Var, k: usize) -> Var {
        let z = self.constant(Tensor::zeros((self.value(a).nrows(), k)));
        self.concat(a, z)
    }
}

/// Node features after message passing and the per-node MLP.
#[derive(Debug, Clone, Copy)]
pub struct GnnOutput {
    pub nodes: Var,
    /// EDGE only: features of directed edges from the final convolution.
    pub edge_messages: Option<Var>,
}

/// Convolutions, each followed by ELU (except GGNN), then a per-node MLP.
#[derive(Debug, Clone)]
pub struct Gnn {
    pub config: GnnConfig,
    pub in_dim: usize,
    convs: Vec<Conv>,
    head: Mlp,
}

impl Gnn {
    pub fn new<R: Rng + ?Sized>(config: GnnConfig, in_dim: usize, store: &mut ParameterStore, prefix: &str, rng: &mut R) -> Result<Self> {
        if config.hidden_dim == 0 || config.mlp_layers == 0 || in_dim == 0 {
            return Err(Error::Config("widths and MLP depth must be positive".into()));
        }
        let h = config.hidden_dim;
        let mut convs = Vec::new();
        let mut width = in_dim;
        for t in 0..config.steps() {
            convs.push(Conv::new(&config, width, store, &format!("{prefix}.conv{t}"), rng)?);
            width = h;
        }
        let head = Mlp::new(store, &format!("{prefix}.mlp0"), &mlp_dims(width, h, h, config.mlp_layers), rng)?;
        Ok(Self { config, in_dim, convs, head })
    }

    pub fn out_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch, x: Var) -> Result<GnnOutput> {
        if tape.value(x).ncols() != self.in_dim {
            return Err(Error::Dimension(format!("GNN expects width {}, got {}", self.in_dim, tape.value(x).ncols())));
        }
        let mut h = x;
        let mut edge_messages = None;
        for conv in &self.convs {
            let (out, e) = conv.forward(tape, store, batch, h)?;
            h = if matches!(conv, Conv::Ggnn { .. }) { out } else { tape.elu(out) };
            edge_messages = e;
        }
        Ok(GnnOutput { nodes: self.head.forward(tape, store, h)?, edge_messages })
    }
}

/// Per-graph sums of node features (`n_graphs × d`).
pub fn readout_graph(tape: &mut Tape, nodes: Var, batch: &GraphBatch) -> Var {
    tape.scatter_add(nodes, batch.graph_of.clone(), batch.n_graphs)
}

/// Elementwise maximum of two feature rows.
pub fn readout_edge(tape: &mut Tape, hu: Var, hv: Var) -> Var {
    tape.max(hu, hv)
}

/// Features of every undirected batch edge: the max of its endpoint features
/// and, when present, of both directed EDGE messages.
pub fn edge_features(tape: &mut Tape, out: &GnnOutput, batch: &GraphBatch) -> Var {
    let hu = tape.gather(out.nodes, batch.end_a.clone());
    let hv = tape.gather(out.nodes, batch.end_b.clone());
    let mut he = readout_edge(tape, hu, hv);
    if let Some(msgs) = out.edge_messages {
        let n = batch.n_edges();
        let fwd = tape.gather(msgs, Arc::new((0..n).map(|k| 2 * k).collect()));
        let bwd = tape.gather(msgs, Arc::new((0..n).map(|k| 2 * k + 1).collect()));
        let m = tape.max(fwd, bwd);
        he = tape.max(he, m);
    }
    he
}
