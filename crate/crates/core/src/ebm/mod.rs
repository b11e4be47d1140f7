//! Energy-based models over an enumerated tree space, trained by noise
//! contrastive estimation against a uniform noise distribution.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{embed_two_pass, one_hot_tips};
use crate::math::{log_sigmoid, logsumexp};
use crate::neural::{readout_graph, Adam, Gnn, GnnConfig, GraphBatch, Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::tree::{enumerate_unrooted, TaxaSet, TreeTopology};
use crate::{Error, Result};

/// Every unrooted topology on a taxon set with a target probability each.
#[derive(Debug, Clone)]
pub struct TreeSpaceTable {
    pub trees: Vec<TreeTopology>,
    pub probs: Vec<f64>,
}

impl TreeSpaceTable {
    pub fn new(trees: Vec<TreeTopology>, probs: Vec<f64>) -> Result<Self> {
        if trees.is_empty() || trees.len() != probs.len() {
            return Err(Error::Dimension(format!("{} trees with {} probabilities", trees.len(), probs.len())));
        }
        let total: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("probabilities must be non-negative and sum to 1 (sum {total})")));
        }
        Ok(Self { trees, probs })
    }

    pub fn uniform(taxa: Arc<TaxaSet>) -> Result<Self> {
        let trees = enumerate_unrooted(taxa)?;
        let p = 1.0 / trees.len() as f64;
        let probs = vec![p; trees.len()];
        Ok(Self { trees, probs })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }
}

/// Draws tree probabilities from a symmetric Dirichlet, in enumeration order.
pub fn sample_dirichlet_target(n_taxa: usize, beta: f64, seed: u64) -> Result<TreeSpaceTable> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    let trees = enumerate_unrooted(Arc::new(TaxaSet::letters(n_taxa)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Gamma(β) = Gamma(β + 1) · U^{1/β}, taken in log space so tiny β does not underflow.
    let gamma = Gamma::new(beta + 1.0, 1.0).expect("valid shape");
    let logs: Vec<f64> = (0..trees.len())
        .map(|_| {
            let g: f64 = gamma.sample(&mut rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / beta
        })
        .collect();
    let z = logsumexp(&logs);
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - z).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    TreeSpaceTable::new(trees, probs)
}

/// `F(τ) = MLP(Σ_v h_v)` on a GNN over raw embeddings, plus a free `log Z`.
#[derive(Debug, Clone)]
pub struct EbmModel {
    pub store: ParameterStore,
    pub gnn: Gnn,
    pub head: Mlp,
    pub log_z: ParamId,
    n_taxa: usize,
}

/// Raw node embeddings of a tree (one-hot tips).
pub fn tree_features(tree: &TreeTopology) -> Result<Tensor> {
    Ok(embed_two_pass(tree, &one_hot_tips(tree))?.0)
}

impl EbmModel {
    /// New model with `log Z = log n_trees`.
    pub fn new(config: GnnConfig, n_taxa: usize, n_trees: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let gnn = Gnn::new(config, n_taxa, &mut store, "gnn", &mut rng)?;
        let h = config.hidden_dim;
        let mut dims = vec![h; config.mlp_layers.max(1)];
        dims.push(1);
        let head = Mlp::new(&mut store, "energy", &dims, &mut rng)?;
        let log_z = store.add("log_z", Tensor::from_elem((1, 1), n_trees.ln()))?;
        Ok(Self { store, gnn, head, log_z, n_taxa })
    }

    pub fn log_z(&self) -> f64 {
        self.store.value(self.log_z)[[0, 0]]
    }

    /// Energies (`n × 1`) of a batch of trees with precomputed features.
    pub fn energy_on_tape(&self, tape: &mut Tape, trees: &[&TreeTopology], feats: &[&Tensor]) -> Result<Var> {
        if let Some(t) = trees.iter().find(|t| t.n_taxa() != self.n_taxa) {
            return Err(Error::TaxaMismatch(format!("model has {} taxa, tree has {}", self.n_taxa, t.n_taxa())));
        }
        let batch = GraphBatch::from_trees(trees);
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Dimension(e.to_string()))?;
        let x = tape.constant(x);
        let out = self.gnn.forward(tape, &self.store, &batch, x)?;
        let g = readout_graph(tape, out.nodes, &batch);
        self.head.forward(tape, &self.store, g)
    }

    pub fn energy(&self, tree: &TreeTopology) -> Result<f64> {
        let f = tree_features(tree)?;
        let mut tape = Tape::new();
        let e = self.energy_on_tape(&mut tape, &[tree], &[&f])?;
        Ok(tape.value(e)[[0, 0]])
    }

    /// Unnormalized model log-probability `−F(τ) − log Z`.
    pub fn log_q(&self, tree: &TreeTopology) -> Result<f64> {
        Ok(-self.energy(tree)? - self.log_z())
    }

    /// Energies of many trees, evaluated in parallel chunks.
    pub fn energies(&self, trees: &[TreeTopology], feats: &[Tensor]) -> Result<Vec<f64>> {
        const CHUNK: usize = 1024;
        let parts: Vec<Result<Vec<f64>>> = trees
            .par_chunks(CHUNK)
            .zip(feats.par_chunks(CHUNK))
            .map(|(ts, fs)| {
                let mut tape = Tape::new();
                let tr: Vec<_> = ts.iter().collect();
                let fr: Vec<_> = fs.iter().collect();
                let e = self.energy_on_tape(&mut tape, &tr, &fr)?;
                Ok(tape.value(e).column(0).to_vec())
            })
            .collect();
        let mut out = Vec::with_capacity(trees.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

/// NCE objective on a data batch and a noise batch under uniform noise over
/// `n_trees` topologies; accumulates gradients into the model's store.
pub fn nce_loss(
    model: &mut EbmModel,
    data: (&[&TreeTopology], &[&Tensor]),
    noise: (&[&TreeTopology], &[&Tensor]),
    n_trees: f64,
) -> Result<f64> {
    let (nd, nn) = (data.0.len(), noise.0.len());
    if nd == 0 || nn == 0 {
        return Err(Error::Config("NCE needs non-empty data and noise batches".into()));
    }
    let trees: Vec<_> = data.0.iter().chain(noise.0).copied().collect();
    let feats: Vec<_> = data.1.iter().chain(noise.1).copied().collect();
    let a: Vec<f64> = (0..nd + nn).map(|i| if i < nd { 1.0 / nd as f64 } else { 0.0 }).collect();
    let b: Vec<f64> = (0..nd + nn).map(|i| if i < nd { 0.0 } else { 1.0 / nn as f64 }).collect();
    weighted_nce_loss(model, &trees, &feats, &a, &b, n_trees)
}

/// `−Σ_i (a_i log S(D_i) + b_i log S(−D_i))` over distinct trees, where `a`
/// and `b` are the data and noise batch frequencies of each tree.
pub fn weighted_nce_loss(
    model: &mut EbmModel,
    trees: &[&TreeTopology],
    feats: &[&Tensor],
    a: &[f64],
    b: &[f64],
    n_trees: f64,
) -> Result<f64> {
    let n = trees.len();
    if n == 0 || a.len() != n || b.len() != n || feats.len() != n {
        return Err(Error::Config("NCE needs a non-empty batch with one weight pair per tree".into()));
    }
    let mut tape = Tape::new();
    let f = model.energy_on_tape(&mut tape, trees, feats)?;
    // D = −F − log Z − log p_n
    let lz = tape.param(&model.store, model.log_z);
    let neg_lz = tape.scale(lz, -1.0);
    let neg_f = tape.scale(f, -1.0);
    let d = tape.add_row(neg_f, neg_lz);
    let d = tape.add_const(d, n_trees.ln());
    let ls_data = tape.log_sigmoid(d);
    let neg_d = tape.scale(d, -1.0);
    let ls_noise = tape.log_sigmoid(neg_d);
    let wa = Tensor::from_shape_fn((n, 1), |(i, _)| -a[i]);
    let wb = Tensor::from_shape_fn((n, 1), |(i, _)| -b[i]);
    let la = tape.dot_const(ls_data, Arc::new(wa));
    let lb = tape.dot_const(ls_noise, Arc::new(wb));
    let loss = tape.add(la, lb);
    tape.backward(loss, &mut model.store);
    Ok(tape.scalar(loss))
}

/// Population NCE loss and KL from exact energies over the whole space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics {
    pub nce_loss: f64,
    pub kl: f64,
}

/// Exact metrics from per-tree energies, target probabilities and `log Z`.
pub fn exact_metrics(energies: &[f64], probs: &[f64], log_z: f64) -> ExactMetrics {
    let n = probs.len() as f64;
    let log_pn = -n.ln();
    let mut nce = 0.0;
    for (&f, &p) in energies.iter().zip(probs) {
        let d = -f - log_z - log_pn;
        if p > 0.0 {
            nce -= p * log_sigmoid(d);
        }
        nce -= log_sigmoid(-d) / n;
    }
    let neg: Vec<f64> = energies.iter().map(|f| -f).collect();
    let lz = logsumexp(&neg);
    let kl = energies
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&f, &p)| p * (p.ln() - (-f - lz)))
        .sum::<f64>()
        .max(0.0);
    ExactMetrics { nce_loss: nce, kl }
}

/// KL(p₀ ∥ q̄) with the model normalized exactly over the table.
pub fn kl_to_target(model: &EbmModel, table: &TreeSpaceTable) -> Result<f64> {
    let feats = table.trees.iter().map(tree_features).collect::<Result<Vec<_>>>()?;
    let e = model.energies(&table.trees, &feats)?;
    Ok(exact_metrics(&e, &table.probs, model.log_z()).kl)
}

/// Jensen–Shannon divergence in nats.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let half_kl = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).filter(|(&x, _)| x > 0.0).map(|(&x, &y)| x * (2.0 * x / (x + y)).ln()).sum::<f64>() / 2.0
    };
    half_kl(p, q) + half_kl(q, p)
}

/// Optimal NCE loss `−2·JSD(p₀ ∥ p_n) + 2 log 2` for uniform noise.
pub fn optimal_nce_loss(probs: &[f64]) -> f64 {
    let u = vec![1.0 / probs.len() as f64; probs.len()];
    -2.0 * jsd(probs, &u) + 2.0 * std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NceTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate multiplier reached at the last step, approached
    /// geometrically; 1 keeps it constant.
    pub lr_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for NceTrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, batch: 128, lr: 1e-3, lr_decay: 1.0, seed: 0, eval_every: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    /// Mean minibatch loss since the previous record.
    pub batch_loss: Option<f64>,
    pub nce_loss: f64,
    pub kl: f64,
    pub log_z: f64,
}

/// Trains by NCE with inverse-CDF data draws and uniform noise draws; the
/// exact metrics are recorded at step 0, every `eval_every` steps and at the end.
pub fn train_nce(model: &mut EbmModel, table: &TreeSpaceTable, cfg: &NceTrainConfig) -> Result<Vec<TraceRecord>> {
    train_nce_with(model, table, cfg, |_| {})
}

/// As [`train_nce`], calling `on_record` as each trace record is produced.
pub fn train_nce_with<F: FnMut(&TraceRecord)>(
    model: &mut EbmModel,
    table: &TreeSpaceTable,
    cfg: &NceTrainConfig,
    mut on_record: F,
) -> Result<Vec<TraceRecord>> {
    if cfg.batch == 0 || cfg.eval_every == 0 || !(cfg.lr > 0.0) || !(cfg.lr_decay > 0.0) {
        return Err(Error::Config("batch, eval interval, learning rate and decay must be positive".into()));
    }
    let feats = table.trees.iter().map(tree_features).collect::<Result<Vec<_>>>()?;
    let n = table.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &table.probs {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let mut trace = Vec::new();
    let mut running = (0.0, 0usize);
    let mut record = |model: &EbmModel, step: usize, running: &mut (f64, usize)| -> Result<()> {
        let e = model.energies(&table.trees, &feats)?;
        let m = exact_metrics(&e, &table.probs, model.log_z());
        let batch_loss = (running.1 > 0).then(|| running.0 / running.1 as f64);
        *running = (0.0, 0);
        let r = TraceRecord { step, batch_loss, nce_loss: m.nce_loss, kl: m.kl, log_z: model.log_z() };
        on_record(&r);
        trace.push(r);
        Ok(())
    };
    record(model, 0, &mut running)?;
    for step in 1..=cfg.steps {
        let data: Vec<usize> = (0..cfg.batch)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                cdf.partition_point(|&c| c <= u).min(n - 1)
            })
            .collect();
        let noise: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..n)).collect();
        // Repeated draws share one energy evaluation.
        let mut weights: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        let unit = 1.0 / cfg.batch as f64;
        data.iter().for_each(|&i| weights.entry(i).or_default().0 += unit);
        noise.iter().for_each(|&i| weights.entry(i).or_default().1 += unit);
        let trees: Vec<_> = weights.keys().map(|&i| &table.trees[i]).collect();
        let fs: Vec<_> = weights.keys().map(|&i| &feats[i]).collect();
        let (a, b): (Vec<f64>, Vec<f64>) = weights.values().copied().unzip();
        let loss = weighted_nce_loss(model, &trees, &fs, &a, &b, n as f64)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("non-finite NCE loss at step {step}")));
        }
        adam.lr = cfg.lr * cfg.lr_decay.powf((step - 1) as f64 / cfg.steps.max(1) as f64);
        model.store.adam_step(&adam);
        running.0 += loss;
        running.1 += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            record(model, step, &mut running)?;
        }
    }
    Ok(trace)
}
