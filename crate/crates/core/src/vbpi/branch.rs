//! Branch-length parameterizations: split tables, PSP tables and GNN features.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ebm::tree_features;
use crate::neural::{edge_features, Gnn, GnnConfig, GraphBatch, Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::sbn::{EdgeKeys, SbnSupport};
use crate::tree::TreeTopology;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    Split,
    Psp,
    Gnn,
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BranchKind::Split => "split",
            BranchKind::Psp => "psp",
            BranchKind::Gnn => "gnn",
        })
    }
}

impl FromStr for BranchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "split" => Ok(BranchKind::Split),
            "psp" => Ok(BranchKind::Psp),
            "gnn" => Ok(BranchKind::Gnn),
            _ => Err(Error::Config(format!("unknown branch parameterization `{s}`"))),
        }
    }
}

/// Initial `μ` and `log σ` of every edge.
pub const INIT_MU: f64 = -2.3;
pub const INIT_LOG_SIGMA: f64 = -2.0;

/// Lognormal location and log-scale of each edge, indexed by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum BranchParamModel {
    Split { mu: ParamId, log_sigma: ParamId },
    Psp { mu: ParamId, log_sigma: ParamId, psp_mu: ParamId, psp_log_sigma: ParamId },
    Gnn { gnn: Gnn, mu: Mlp, log_sigma: Mlp },
}

impl BranchParamModel {
    pub fn new<R: Rng + ?Sized>(
        kind: BranchKind,
        support: &SbnSupport,
        gnn: GnnConfig,
        store: &mut ParameterStore,
        rng: &mut R,
    ) -> Result<Self> {
        let ns = support.splits().len();
        let table = |store: &mut ParameterStore, name: &str, v: f64| store.add(name, Tensor::from_elem((1, ns), v));
        Ok(match kind {
            BranchKind::Split => {
                BranchParamModel::Split { mu: table(store, "split.mu", INIT_MU)?, log_sigma: table(store, "split.log_sigma", INIT_LOG_SIGMA)? }
            }
            BranchKind::Psp => {
                let np = support.psps().len();
                BranchParamModel::Psp {
                    mu: table(store, "split.mu", INIT_MU)?,
                    log_sigma: table(store, "split.log_sigma", INIT_LOG_SIGMA)?,
                    psp_mu: store.add_zeros("psp.mu", 1, np)?,
                    psp_log_sigma: store.add_zeros("psp.log_sigma", 1, np)?,
                }
            }
            BranchKind::Gnn => {
                let n = support.taxa().len();
                let g = Gnn::new(gnn, n, store, "gnn", rng)?;
                let h = gnn.hidden_dim;
                let mut dims = vec![h; gnn.mlp_layers.max(1)];
                dims.push(1);
                let mu = Mlp::new(store, "mlp_mu", &dims, rng)?;
                let log_sigma = Mlp::new(store, "mlp_log_sigma", &dims, rng)?;
                // Every edge starts at the table initialization.
                for (mlp, v) in [(&mu, INIT_MU), (&log_sigma, INIT_LOG_SIGMA)] {
                    let ids: Vec<ParamId> = mlp.params().collect();
                    let [.., w, bias] = ids[..] else { unreachable!("an MLP has at least one layer") };
                    store.value_mut(w).fill(0.0);
                    store.value_mut(bias).fill(v);
                }
                BranchParamModel::Gnn { gnn: g, mu, log_sigma }
            }
        })
    }

    pub fn kind(&self) -> BranchKind {
        match self {
            BranchParamModel::Split { .. } => BranchKind::Split,
            BranchParamModel::Psp { .. } => BranchKind::Psp,
            BranchParamModel::Gnn { .. } => BranchKind::Gnn,
        }
    }

    /// Per-edge parameters of a batch of trees, retaining what is needed to
    /// backpropagate edge-level gradients.
    pub fn evaluate(&self, store: &ParameterStore, support: &SbnSupport, trees: &[&TreeTopology]) -> Result<BranchEval> {
        match self {
            BranchParamModel::Split { mu, log_sigma } | BranchParamModel::Psp { mu, log_sigma, .. } => {
                let psp = match self {
                    BranchParamModel::Psp { psp_mu, psp_log_sigma, .. } => Some((*psp_mu, *psp_log_sigma)),
                    _ => None,
                };
                let keys = trees.iter().map(|t| support.edge_keys(t)).collect::<Result<Vec<_>>>()?;
                let (m, s) = (store.value(*mu), store.value(*log_sigma));
                let params = keys
                    .iter()
                    .map(|ks| {
                        let mut p = BranchParams {
                            mu: ks.iter().map(|k| m[[0, k.split]]).collect(),
                            log_sigma: ks.iter().map(|k| s[[0, k.split]]).collect(),
                        };
                        if let Some((pm, ps)) = psp {
                            let (pm, ps) = (store.value(pm), store.value(ps));
                            for (e, k) in ks.iter().enumerate() {
                                p.mu[e] += k.psps.iter().map(|&j| pm[[0, j]]).sum::<f64>();
                                p.log_sigma[e] += k.psps.iter().map(|&j| ps[[0, j]]).sum::<f64>();
                            }
                        }
                        p
                    })
                    .collect();
                Ok(BranchEval { params, inner: EvalInner::Tables { keys, mu: *mu, log_sigma: *log_sigma, psp } })
            }
            BranchParamModel::Gnn { gnn, mu, log_sigma } => {
                let feats = trees.iter().map(|t| tree_features(t)).collect::<Result<Vec<_>>>()?;
                let batch = GraphBatch::from_trees(trees);
                let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
                let x = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
                let mut tape = Tape::new();
                let x = tape.constant(x);
                let out = gnn.forward(&mut tape, store, &batch, x)?;
                let he = edge_features(&mut tape, &out, &batch);
                let mu_v = mu.forward(&mut tape, store, he)?;
                let ls_v = log_sigma.forward(&mut tape, store, he)?;
                let (mv, sv) = (tape.value(mu_v).column(0).to_vec(), tape.value(ls_v).column(0).to_vec());
                let params = trees
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let r = batch.edge_offset[i]..batch.edge_offset[i] + t.n_edges();
                        BranchParams { mu: mv[r.clone()].to_vec(), log_sigma: sv[r].to_vec() }
                    })
                    .collect();
                Ok(BranchEval { params, inner: EvalInner::Gnn { tape, mu: mu_v, log_sigma: ls_v } })
            }
        }
    }
}

enum EvalInner {
    Tables { keys: Vec<Vec<EdgeKeys>>, mu: ParamId, log_sigma: ParamId, psp: Option<(ParamId, ParamId)> },
    Gnn { tape: Tape, mu: Var, log_sigma: Var },
}

/// Branch parameters of a batch plus the state needed for backpropagation.
pub struct BranchEval {
    pub params: Vec<BranchParams>,
    inner: EvalInner,
}

impl BranchEval {
    /// Accumulates parameter gradients given `∂L/∂μ` and `∂L/∂log σ` per tree and edge.
    pub fn backward(&self, store: &mut ParameterStore, d_mu: &[Vec<f64>], d_log_sigma: &[Vec<f64>]) {
        match &self.inner {
            EvalInner::Tables { keys, mu, log_sigma, psp } => {
                let mut gm = Tensor::zeros(store.value(*mu).dim());
                let mut gs = gm.clone();
                let (mut pm, mut ps) = match psp {
                    Some((a, _)) => (Tensor::zeros(store.value(*a).dim()), Tensor::zeros(store.value(*a).dim())),
                    None => (Tensor::zeros((1, 0)), Tensor::zeros((1, 0))),
                };
                for (i, ks) in keys.iter().enumerate() {
                    for (e, k) in ks.iter().enumerate() {
                        gm[[0, k.split]] += d_mu[i][e];
                        gs[[0, k.split]] += d_log_sigma[i][e];
                        if psp.is_some() {
                            for &j in &k.psps {
                                pm[[0, j]] += d_mu[i][e];
                                ps[[0, j]] += d_log_sigma[i][e];
                            }
                        }
                    }
                }
                store.accumulate_grad(*mu, &gm);
                store.accumulate_grad(*log_sigma, &gs);
                if let Some((a, b)) = psp {
                    store.accumulate_grad(*a, &pm);
                    store.accumulate_grad(*b, &ps);
                }
            }
            EvalInner::Gnn { tape, mu, log_sigma } => {
                let flat = |d: &[Vec<f64>]| {
                    let v: Vec<f64> = d.iter().flatten().copied().collect();
                    Tensor::from_shape_vec((v.len(), 1), v).expect("column")
                };
                tape.backward_with_seed(&[(*mu, flat(d_mu)), (*log_sigma, flat(d_log_sigma))], store);
            }
        }
    }
}
