//! Variational Bayesian phylogenetic inference with an SBN over topologies
//! and diagonal Lognormal branch lengths.

mod branch;

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::math::{logmeanexp, logsumexp, mean_std};
use crate::neural::{Adam, GnnConfig, ParamId, ParameterStore, Tensor};
use crate::phylo::{log_likelihood, log_likelihood_grad, log_prior, log_prior_grad, Alignment};
use crate::sbn::{SbnCheckpoint, SbnModel, SbnSupport};
use crate::tree::{BranchLengths, TreeTopology};
use crate::{Error, Result};

pub use branch::{BranchEval, BranchKind, BranchParamModel, BranchParams, INIT_LOG_SIGMA, INIT_MU};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Log-density of `Lognormal(μ, σ)` at `q`.
pub fn lognormal_log_density(q: f64, mu: f64, log_sigma: f64) -> f64 {
    let z = (q.ln() - mu) / log_sigma.exp();
    -q.ln() - log_sigma - HALF_LN_2PI - 0.5 * z * z
}

/// Differential entropy of `Lognormal(μ, σ)`.
pub fn lognormal_entropy(mu: f64, log_sigma: f64) -> f64 {
    mu + log_sigma + 0.5 + HALF_LN_2PI
}

/// Branch lengths `q_e = exp(μ_e + σ_e ε_e)` and their joint log-density.
pub fn branches_from_noise(params: &BranchParams, eps: &[f64]) -> (BranchLengths, f64) {
    let mut log_q = 0.0;
    let q = params
        .mu
        .iter()
        .zip(&params.log_sigma)
        .zip(eps)
        .map(|((&m, &ls), &e)| {
            let lq = m + ls.exp() * e;
            log_q += -lq - ls - HALF_LN_2PI - 0.5 * e * e;
            lq.exp()
        })
        .collect();
    (BranchLengths(q), log_q)
}

/// Draws branch lengths; returns them, their log-density and the noise used.
pub fn sample_branches<R: Rng + ?Sized>(params: &BranchParams, rng: &mut R) -> (BranchLengths, f64, Vec<f64>) {
    let eps: Vec<f64> = (0..params.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    let (q, lq) = branches_from_noise(params, &eps);
    (q, lq, eps)
}

/// `∂ log w / ∂μ_e` and `∂ log w / ∂ log σ_e` for one reparameterized draw,
/// given `g_e = ∂(log joint)/∂q_e`. The `+1` terms come from `−log Q_ψ`.
pub fn reparam_edge_gradients(params: &BranchParams, eps: &[f64], q: &BranchLengths, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mu = Vec::with_capacity(g.len());
    let mut d_ls = Vec::with_capacity(g.len());
    for e in 0..g.len() {
        let se = params.log_sigma[e].exp() * eps[e];
        let gq = g[e] * q.0[e];
        d_mu.push(gq + 1.0);
        d_ls.push(gq * se + se + 1.0);
    }
    (d_mu, d_ls)
}

/// Likelihood tempering `λ_n = min(1, initial + n / steps)`; `steps = 0` disables it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annealing {
    pub initial: f64,
    pub steps: usize,
}

impl Annealing {
    pub const NONE: Annealing = Annealing { initial: 1.0, steps: 0 };

    pub fn standard() -> Self {
        Self { initial: 0.001, steps: 100_000 }
    }

    pub fn lambda(&self, n: usize) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            (self.initial + n as f64 / self.steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VbpiConfig {
    pub k: usize,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub annealing: Annealing,
    pub branch: BranchKind,
    pub gnn: GnnConfig,
    pub seed: u64,
}

impl Default for VbpiConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lr_phi: 1e-3,
            lr_psi: 1e-3,
            annealing: Annealing::standard(),
            branch: BranchKind::Split,
            gnn: GnnConfig { variant: crate::neural::Variant::Edge, ..GnnConfig::default() },
            seed: 0,
        }
    }
}

/// SBN parameters `φ`, branch parameters `ψ` and optimizer state.
#[derive(Debug, Clone)]
pub struct VbpiState {
    pub support: Arc<SbnSupport>,
    pub phi: ParameterStore,
    phi_id: ParamId,
    pub psi: ParameterStore,
    pub branch: BranchParamModel,
    pub config: VbpiConfig,
    pub step: usize,
}

/// One importance sample: a topology, its branch lengths and the terms of its log-weight.
#[derive(Debug, Clone)]
pub struct Particle {
    pub tree: TreeTopology,
    pub params: BranchParams,
    pub eps: Vec<f64>,
    pub q: BranchLengths,
    pub log_q_tree: f64,
    pub log_q_branch: f64,
    pub log_lik: f64,
    pub log_prior: f64,
}

impl Particle {
    /// `λ log p(Y|τ,q) + log p(τ,q) − log Q_φ(τ) − log Q_ψ(q|τ)`.
    pub fn log_weight(&self, lambda: f64) -> f64 {
        lambda * self.log_lik + self.log_prior - self.log_q_tree - self.log_q_branch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowerBoundEstimate {
    pub value: f64,
    pub log_weights: Vec<f64>,
}

impl LowerBoundEstimate {
    pub fn from_log_weights(log_weights: Vec<f64>) -> Self {
        Self { value: logmeanexp(&log_weights), log_weights }
    }
}

/// Leave-one-out learning signals `L̂ − L̂_{−i}`, where `L̂_{−i}` replaces
/// `log w_i` by the mean of the other log-weights.
pub fn vimco_signals(log_weights: &[f64]) -> Result<Vec<f64>> {
    let k = log_weights.len();
    if k < 2 {
        return Err(Error::Config("VIMCO needs at least two samples".into()));
    }
    let total = logmeanexp(log_weights);
    let sum: f64 = log_weights.iter().sum();
    let mut buf = log_weights.to_vec();
    Ok((0..k)
        .map(|i| {
            buf[i] = (sum - log_weights[i]) / (k - 1) as f64;
            let loo = logmeanexp(&buf);
            buf[i] = log_weights[i];
            total - loo
        })
        .collect())
}

/// VIMCO estimate of `∇_φ L^K` given `∇_φ log Q_φ(τ_i)` for each sample.
///
/// Besides the score-function term, `log w_i` depends on `φ` through
/// `−log Q_φ(τ_i)`, which contributes `−w̃_i ∇ log Q_φ(τ_i)`.
pub fn vimco_gradients(log_weights: &[f64], scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let signals = vimco_signals(log_weights)?;
    let z = logsumexp(log_weights);
    let dim = scores.first().map_or(0, Vec::len);
    let mut g = vec![0.0; dim];
    for ((s, lw), score) in signals.iter().zip(log_weights).zip(scores) {
        let coef = s - (lw - z).exp();
        g.iter_mut().zip(score).for_each(|(gi, si)| *gi += coef * si);
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lambda: f64,
    /// Tempered bound from the training samples.
    pub bound: f64,
    /// Untempered bound from the same samples.
    pub elbo: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalLikelihood {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    pub opt_steps: usize,
    pub lr: f64,
    pub opt_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { opt_steps: 2000, lr: 1e-2, opt_samples: 8, eval_samples: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    /// Set when per-tree optimization ended below the amortized ELBO and the gap was clipped to 0.
    pub clipped: bool,
    pub amortized_elbo: f64,
    pub optimized_elbo: f64,
}

impl VbpiState {
    pub fn new(support: Arc<SbnSupport>, config: VbpiConfig) -> Result<Self> {
        if config.k == 0 || !(config.lr_phi > 0.0) || !(config.lr_psi > 0.0) {
            return Err(Error::Config("K and learning rates must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut phi = ParameterStore::new();
        let phi_id = phi.add_zeros("phi", 1, support.n_params())?;
        let mut psi = ParameterStore::new();
        let branch = BranchParamModel::new(config.branch, &support, config.gnn, &mut psi, &mut rng)?;
        Ok(Self { support, phi, phi_id, psi, branch, config, step: 0 })
    }

    pub fn sbn(&self) -> SbnModel {
        SbnModel { support: self.support.clone(), phi: self.phi.value(self.phi_id).row(0).to_vec() }
    }

    pub fn set_phi(&mut self, phi: &[f64]) -> Result<()> {
        let v = self.phi.value_mut(self.phi_id);
        if v.len() != phi.len() {
            return Err(Error::Dimension(format!("{} φ values for {} parameters", phi.len(), v.len())));
        }
        v.iter_mut().zip(phi).for_each(|(a, b)| *a = *b);
        Ok(())
    }

    pub fn branch_params(&self, tree: &TreeTopology) -> Result<BranchParams> {
        let mut eval = self.branch.evaluate(&self.psi, &self.support, &[tree])?;
        Ok(eval.params.swap_remove(0))
    }

    /// Draws `k` particles (topologies from the SBN, then branch lengths).
    pub fn draw_particles<R: Rng + ?Sized>(&self, aln: &Alignment, k: usize, rng: &mut R) -> Result<Vec<Particle>> {
        Ok(self.draw_with_eval(aln, k, rng, false)?.0)
    }

    fn draw_with_eval<R: Rng + ?Sized>(
        &self,
        aln: &Alignment,
        k: usize,
        rng: &mut R,
        keep_eval: bool,
    ) -> Result<(Vec<Particle>, Option<BranchEval>)> {
        let sbn = self.sbn();
        let log_cpt = sbn.log_cpts();
        let trees = (0..k).map(|_| sbn.sample_tree_with(&log_cpt, rng)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = trees.iter().collect();
        let eval = self.branch.evaluate(&self.psi, &self.support, &refs)?;
        let mut particles = Vec::with_capacity(k);
        for (tree, params) in trees.into_iter().zip(eval.params.iter()) {
            let (q, log_q_branch, eps) = sample_branches(params, rng);
            let log_q_tree = sbn.log_prob_with(&tree, &log_cpt)?;
            let log_lik = log_likelihood(&tree, &q, aln)?;
            let log_prior = log_prior(&tree, &q)?;
            particles.push(Particle { tree, params: params.clone(), eps, q, log_q_tree, log_q_branch, log_lik, log_prior });
        }
        Ok((particles, keep_eval.then_some(eval)))
    }

    /// Monte Carlo estimate of `L^K` with the likelihood tempered by `lambda`.
    pub fn lower_bound<R: Rng + ?Sized>(&self, aln: &Alignment, k: usize, lambda: f64, rng: &mut R) -> Result<LowerBoundEstimate> {
        let ps = self.draw_particles(aln, k, rng)?;
        Ok(LowerBoundEstimate::from_log_weights(ps.iter().map(|p| p.log_weight(lambda)).collect()))
    }

    /// Mean and standard error of `reps` independent untempered `L^K` estimates.
    pub fn evaluate_bound<R: Rng + ?Sized>(&self, aln: &Alignment, k: usize, reps: usize, rng: &mut R) -> Result<(f64, f64)> {
        let vals = (0..reps).map(|_| Ok(self.lower_bound(aln, k, 1.0, rng)?.value)).collect::<Result<Vec<f64>>>()?;
        let (m, s) = mean_std(&vals);
        Ok((m, s / (reps as f64).sqrt()))
    }

    /// Gradients of `L^K` (VIMCO for `φ`, reparameterization for `ψ`),
    /// accumulated with flipped sign into the stores so that Adam ascends.
    pub fn accumulate_gradients<R: Rng + ?Sized>(&mut self, aln: &Alignment, lambda: f64, rng: &mut R) -> Result<(Vec<Particle>, f64)> {
        let (particles, eval) = self.draw_with_eval(aln, self.config.k, rng, true)?;
        let eval = eval.expect("kept");
        let lw: Vec<f64> = particles.iter().map(|p| p.log_weight(lambda)).collect();
        let sbn = self.sbn();
        let scores = particles.iter().map(|p| Ok(sbn.log_prob_grad_phi(&p.tree)?.1)).collect::<Result<Vec<_>>>()?;
        let g_phi = vimco_gradients(&lw, &scores)?;
        let neg = Tensor::from_shape_vec((1, g_phi.len()), g_phi.iter().map(|g| -g).collect()).expect("row");
        self.phi.accumulate_grad(self.phi_id, &neg);

        let z = logsumexp(&lw);
        let mut d_mu = Vec::with_capacity(particles.len());
        let mut d_ls = Vec::with_capacity(particles.len());
        for (p, l) in particles.iter().zip(&lw) {
            let w = (l - z).exp();
            let (_, gll) = log_likelihood_grad(&p.tree, &p.q, aln)?;
            let gp = log_prior_grad(&p.q);
            let g: Vec<f64> = gll.iter().zip(&gp).map(|(a, b)| lambda * a + b).collect();
            let (m, s) = reparam_edge_gradients(&p.params, &p.eps, &p.q, &g);
            d_mu.push(m.iter().map(|x| -w * x).collect());
            d_ls.push(s.iter().map(|x| -w * x).collect());
        }
        eval.backward(&mut self.psi, &d_mu, &d_ls);
        Ok((particles, logmeanexp(&lw)))
    }

    /// One optimization step on `L^K` at the current annealing weight.
    pub fn train_step<R: Rng + ?Sized>(&mut self, aln: &Alignment, rng: &mut R) -> Result<StepStats> {
        let lambda = self.config.annealing.lambda(self.step);
        let (particles, bound) = self.accumulate_gradients(aln, lambda, rng)?;
        if !bound.is_finite() {
            return Err(Error::Config(format!("non-finite bound at step {}", self.step)));
        }
        self.phi.adam_step(&Adam::new(self.config.lr_phi));
        self.psi.adam_step(&Adam::new(self.config.lr_psi));
        self.step += 1;
        let elbo = logmeanexp(&particles.iter().map(|p| p.log_weight(1.0)).collect::<Vec<_>>());
        Ok(StepStats { step: self.step, lambda, bound, elbo })
    }

    /// Runs `steps` updates; `on_window` receives window-averaged stats every `window` steps.
    pub fn train<R: Rng + ?Sized, F: FnMut(&StepStats)>(
        &mut self,
        aln: &Alignment,
        steps: usize,
        window: usize,
        rng: &mut R,
        mut on_window: F,
    ) -> Result<Vec<StepStats>> {
        let window = window.max(1);
        let mut out = Vec::new();
        let (mut sb, mut se, mut n) = (0.0, 0.0, 0usize);
        for i in 1..=steps {
            let s = self.train_step(aln, rng)?;
            sb += s.bound;
            se += s.elbo;
            n += 1;
            if i % window == 0 || i == steps {
                let r = StepStats { step: s.step, lambda: s.lambda, bound: sb / n as f64, elbo: se / n as f64 };
                on_window(&r);
                out.push(r);
                (sb, se, n) = (0.0, 0.0, 0);
            }
        }
        Ok(out)
    }

    /// Importance-sampling estimates of `log p(Y)` from `runs` independent
    /// batches of `n_samples` untempered weights.
    pub fn estimate_marginal_likelihood<R: Rng + ?Sized>(
        &self,
        aln: &Alignment,
        n_samples: usize,
        runs: usize,
        rng: &mut R,
    ) -> Result<MarginalLikelihood> {
        if n_samples == 0 || runs == 0 {
            return Err(Error::Config("sample and run counts must be positive".into()));
        }
        const CHUNK: usize = 500;
        let mut estimates = Vec::with_capacity(runs);
        for _ in 0..runs {
            let mut lw = Vec::with_capacity(n_samples);
            while lw.len() < n_samples {
                let k = CHUNK.min(n_samples - lw.len());
                lw.extend(self.draw_particles(aln, k, rng)?.iter().map(|p| p.log_weight(1.0)));
            }
            estimates.push(logmeanexp(&lw));
        }
        let (mean, std) = mean_std(&estimates);
        Ok(MarginalLikelihood { mean, std })
    }

    /// Per-tree ELBO gain from optimizing free Lognormal parameters, started
    /// at the amortized values, over the amortized ones.
    pub fn amortization_gap(&self, tree: &TreeTopology, aln: &Alignment, cfg: &GapConfig) -> Result<GapEstimate> {
        let amortized = self.branch_params(tree)?;
        let e = amortized.mu.len();
        let mut store = ParameterStore::new();
        let row = |v: &[f64]| Tensor::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        let mu = store.add("mu", row(&amortized.mu))?;
        let ls = store.add("log_sigma", row(&amortized.log_sigma))?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let adam = Adam::new(cfg.lr);
        let current = |store: &ParameterStore| BranchParams {
            mu: store.value(mu).row(0).to_vec(),
            log_sigma: store.value(ls).row(0).to_vec(),
        };
        let s = cfg.opt_samples.max(1) as f64;
        for _ in 0..cfg.opt_steps {
            let p = current(&store);
            let (mut gm, mut gs) = (vec![0.0; e], vec![0.0; e]);
            for _ in 0..cfg.opt_samples.max(1) {
                let (q, _, eps) = sample_branches(&p, &mut rng);
                let (_, gll) = log_likelihood_grad(tree, &q, aln)?;
                let g: Vec<f64> = gll.iter().zip(log_prior_grad(&q)).map(|(a, b)| a + b).collect();
                let (dm, ds) = reparam_edge_gradients(&p, &eps, &q, &g);
                gm.iter_mut().zip(dm).for_each(|(a, b)| *a -= b / s);
                gs.iter_mut().zip(ds).for_each(|(a, b)| *a -= b / s);
            }
            store.accumulate_grad(mu, &row(&gm));
            store.accumulate_grad(ls, &row(&gs));
            store.adam_step(&adam);
        }
        let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let noise: Vec<Vec<f64>> = (0..cfg.eval_samples.max(1)).map(|_| (0..e).map(|_| eval_rng.sample(StandardNormal)).collect()).collect();
        let elbo = |p: &BranchParams| -> Result<f64> {
            let mut total = 0.0;
            for eps in &noise {
                let (q, lq) = branches_from_noise(p, eps);
                total += log_likelihood(tree, &q, aln)? + log_prior(tree, &q)? - lq;
            }
            Ok(total / noise.len() as f64)
        };
        let amortized_elbo = elbo(&amortized)?;
        let optimized_elbo = if cfg.opt_steps == 0 { amortized_elbo } else { elbo(&current(&store))? };
        let raw = optimized_elbo - amortized_elbo;
        Ok(GapEstimate { gap: raw.max(0.0), clipped: raw < 0.0, amortized_elbo, optimized_elbo })
    }

    /// Writes `sbn.json`, `branch.bin`/`branch.json` and `vbpi.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        SbnCheckpoint::from_model(&self.sbn()).save(&dir.join("sbn.json"))?;
        self.psi.save(&dir.join("branch"))?;
        let meta = StateMeta { config: self.config, step: self.step };
        std::fs::write(dir.join("vbpi.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StateMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("vbpi.json"))?)?;
        let sbn = SbnCheckpoint::load(&dir.join("sbn.json"))?.into_model()?;
        let mut state = Self::new(sbn.support.clone(), meta.config)?;
        state.set_phi(&sbn.phi)?;
        state.psi.load_values(&dir.join("branch"))?;
        state.step = meta.step;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: VbpiConfig,
    step: usize,
}
