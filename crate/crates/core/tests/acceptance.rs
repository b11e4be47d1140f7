//! End-to-end acceptance checks. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts. The criteria run one at a time so
//! the timing checks are not disturbed by the long training runs.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treefeat::ebm::{optimal_nce_loss, sample_dirichlet_target, train_nce, EbmModel, NceTrainConfig};
use treefeat::embed::{embed_dense, embed_two_pass, one_hot_tips, reconstruct_topology, two_pass_coefficients, TipFeatures};
use treefeat::math::logsumexp;
use treefeat::neural::{edge_features, GnnConfig, GraphBatch, Gnn, Mlp, ParameterStore, Tape, Tensor, Var, Variant};
use treefeat::phylo::{log_likelihood, log_likelihood_grad, Alignment};
use treefeat::sbn::{build_support, SbnModel};
use treefeat::tree::{enumerate_unrooted, random_unrooted, split_set, TaxaSet, TreeTopology};
use treefeat::vbpi::{
    branches_from_noise, reparam_edge_gradients, Annealing, BranchKind, BranchParams, GapConfig, GapEstimate, VbpiConfig, VbpiState,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, title: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] criterion {id:>2}: {title}: {detail}");
    assert!(pass, "criterion {id} failed: {detail}");
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn eight_leaf_trees() -> Vec<TreeTopology> {
    enumerate_unrooted(Arc::new(TaxaSet::letters(8))).unwrap()
}

#[test]
fn criterion_01_two_pass_matches_dense_solve() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=64);
        let tree = random_unrooted(Arc::new(TaxaSet::numbered(n)), &mut rng).unwrap();
        let tips = one_hot_tips(&tree);
        let a = embed_two_pass(&tree, &tips).unwrap();
        let b = embed_dense(&tree, &tips).unwrap();
        worst = worst.max(max_abs(&a.0, &b.0));
    }
    let secs = start.elapsed().as_secs_f64();
    report(1, "two-pass vs dense", worst <= 1e-8 && secs < 5.0, format!("max |Δ| = {worst:.2e}, {secs:.2} s"));
}

#[test]
fn criterion_02_simplex_and_coefficient_bound() {
    let _g = serial();
    let trees = eight_leaf_trees();
    let start = Instant::now();
    let mut violations = 0usize;
    let mut worst_sum = 0.0f64;
    for tree in &trees {
        let tips = one_hot_tips(tree);
        let x = embed_two_pass(tree, &tips).unwrap();
        for row in x.interior_rows(tree).axis_iter(Axis(0)) {
            violations += row.iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
        }
        let c = two_pass_coefficients(tree, &tips).unwrap().c;
        let root = tree.order().root;
        violations += tree.interior_nodes().filter(|&u| u != root && !(0.0..=0.5).contains(&c[u])).count();
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = violations == 0 && worst_sum <= 1e-9 && secs < 30.0;
    report(
        2,
        "simplex and coefficient bound on all 8-leaf trees",
        pass,
        format!("{} trees, {violations} violations, max |Σ−1| = {worst_sum:.1e}, {secs:.2} s", trees.len()),
    );
}

#[test]
fn criterion_03_embedding_identifies_topology() {
    let _g = serial();
    let mut failures = 0usize;
    let round_trip = |tree: &TreeTopology| {
        let tips = one_hot_tips(tree);
        let x = embed_two_pass(tree, &tips).unwrap();
        match reconstruct_topology(x.interior_rows(tree).view(), &tips, tree.taxa().clone()) {
            Ok(back) => split_set(&back).unwrap() == split_set(tree).unwrap(),
            Err(_) => false,
        }
    };
    let trees = eight_leaf_trees();
    failures += trees.iter().filter(|t| !round_trip(t)).count();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let n = rng.random_range(4..=20);
        let tree = random_unrooted(Arc::new(TaxaSet::numbered(n)), &mut rng).unwrap();
        failures += usize::from(!round_trip(&tree));
    }
    report(3, "embed → reconstruct round trip", failures == 0, format!("{} trees, {failures} failures", trees.len() + 500));
}

#[test]
fn criterion_04_two_pass_scales_linearly() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut median_time = |n: usize| {
        let tree = random_unrooted(Arc::new(TaxaSet::numbered(n)), &mut rng).unwrap();
        let tips = TipFeatures(Array2::from_shape_fn((n, 8), |_| rng.random::<f64>()));
        let _ = embed_two_pass(&tree, &tips).unwrap();
        let mut times: Vec<f64> = (0..20)
            .map(|_| {
                let t = Instant::now();
                std::hint::black_box(embed_two_pass(&tree, &tips).unwrap());
                t.elapsed().as_secs_f64()
            })
            .collect();
        times.sort_by(f64::total_cmp);
        (times[9] + times[10]) / 2.0
    };
    let small = median_time(500);
    let large = median_time(2000);
    let ratio = large / small;
    report(
        4,
        "two-pass wall time N=2000 vs N=500",
        ratio <= 4.0,
        format!("{:.1} µs vs {:.1} µs, ratio {ratio:.2}", large * 1e6, small * 1e6),
    );
}

#[test]
fn criterion_05_pruning_matches_brute_force() {
    let _g = serial();
    let taxa = Arc::new(TaxaSet::letters(5));
    let trees = enumerate_unrooted(taxa.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for tree in &trees {
        for _ in 0..20 {
            let q = common::random_lengths(tree.n_edges(), &mut rng);
            let rows = (0..5).map(|_| vec![1u8 << rng.random_range(0..4)]).collect();
            let aln = Alignment::new(taxa.clone(), rows).unwrap();
            let a = log_likelihood(tree, &q, &aln).unwrap();
            let b = common::brute_force_log_likelihood(tree, &q, &aln);
            worst = worst.max(((a - b) / b).abs());
        }
    }
    report(5, "pruning vs brute-force enumeration", worst <= 1e-10, format!("300 cases, max rel err {worst:.1e}"));
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3)
}

/// Largest relative error between the tape gradient of `f` and central
/// differences over every parameter entry.
fn tape_audit<F>(store: &mut ParameterStore, f: F) -> f64
where
    F: Fn(&mut Tape, &ParameterStore) -> Var,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store);
    store.zero_grad();
    tape.backward(loss, store);
    let eval = |s: &ParameterStore| {
        let mut t = Tape::new();
        let l = f(&mut t, s);
        t.scalar(l)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        let grad = store.grad(id).clone();
        for (idx, &a) in grad.indexed_iter() {
            let orig = store.value(id)[idx];
            store.value_mut(id)[idx] = orig + h;
            let up = eval(store);
            store.value_mut(id)[idx] = orig - h;
            let down = eval(store);
            store.value_mut(id)[idx] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * h), a));
        }
    }
    worst
}

#[test]
fn criterion_06_gradient_audit() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut lines = Vec::new();
    let mut pass = true;
    let mut check = |name: &str, err: f64, tol: f64| {
        pass &= err < tol;
        lines.push(format!("{name} {err:.1e}"));
    };

    let tree = random_unrooted(Arc::new(TaxaSet::numbered(6)), &mut rng).unwrap();
    let x = embed_two_pass(&tree, &one_hot_tips(&tree)).unwrap().0;
    let batch = GraphBatch::from_trees(&[&tree]);
    for variant in [Variant::Gcn, Variant::Gin, Variant::Sage, Variant::Ggnn, Variant::Edge] {
        let mut store = ParameterStore::new();
        let cfg = GnnConfig { variant, hidden_dim: 6, learnable_eps: true, ..GnnConfig::default() };
        let gnn = Gnn::new(cfg, x.ncols(), &mut store, "g", &mut rng).unwrap();
        let w_nodes = Arc::new(Tensor::from_shape_fn((x.nrows(), 6), |_| rng.sample(StandardNormal)));
        let w_edges = Arc::new(Tensor::from_shape_fn((batch.n_edges(), 6), |_| rng.sample(StandardNormal)));
        let err = tape_audit(&mut store, |tape, s| {
            let input = tape.constant(x.clone());
            let out = gnn.forward(tape, s, &batch, input).unwrap();
            let e = edge_features(tape, &out, &batch);
            let a = tape.dot_const(out.nodes, w_nodes.clone());
            let b = tape.dot_const(e, w_edges.clone());
            tape.add(a, b)
        });
        check(&variant.to_string(), err, 1e-4);
    }

    let mut store = ParameterStore::new();
    let mlp = Mlp::new(&mut store, "m", &[4, 7, 3], &mut rng).unwrap();
    let input = Tensor::from_shape_fn((5, 4), |_| rng.sample(StandardNormal));
    let w = Arc::new(Tensor::from_shape_fn((5, 3), |_| rng.sample(StandardNormal)));
    let err = tape_audit(&mut store, |tape, s| {
        let i = tape.constant(input.clone());
        let o = mlp.forward(tape, s, i).unwrap();
        tape.dot_const(o, w.clone())
    });
    check("mlp", err, 1e-4);

    let taxa = Arc::new(TaxaSet::letters(5));
    let five = enumerate_unrooted(taxa.clone()).unwrap();
    let mut worst = 0.0f64;
    for t in &five {
        let q = common::random_lengths(t.n_edges(), &mut rng);
        let aln = treefeat::phylo::simulate_alignment(t, &q, 40, &mut rng).unwrap();
        let (_, g) = log_likelihood_grad(t, &q, &aln).unwrap();
        for e in 0..t.n_edges() {
            let h = 1e-5;
            let mut up = q.clone();
            let mut down = q.clone();
            up.0[e] += h;
            down.0[e] -= h;
            let fd = (log_likelihood(t, &up, &aln).unwrap() - log_likelihood(t, &down, &aln).unwrap()) / (2.0 * h);
            worst = worst.max(rel_err(fd, g[e]));
        }
    }
    check("pruning", worst, 1e-4);

    let support = Arc::new(build_support(&five).unwrap());
    let phi: Vec<f64> = (0..support.n_params()).map(|_| rng.sample(StandardNormal)).collect();
    let mut model = SbnModel { support, phi };
    let mut worst = 0.0f64;
    for t in five.iter().take(5) {
        let (_, g) = model.log_prob_grad_phi(t).unwrap();
        for i in 0..g.len() {
            let orig = model.phi[i];
            model.phi[i] = orig + 1e-5;
            let up = model.log_prob_unrooted(t).unwrap();
            model.phi[i] = orig - 1e-5;
            let down = model.log_prob_unrooted(t).unwrap();
            model.phi[i] = orig;
            worst = worst.max(rel_err((up - down) / 2e-5, g[i]));
        }
    }
    check("sbn", worst, 1e-4);

    let (tree4, _, aln4) = common::four_taxon_problem();
    let params = BranchParams {
        mu: (0..5).map(|_| rng.random_range(-3.0..-1.0)).collect(),
        log_sigma: (0..5).map(|_| rng.random_range(-2.0..0.0)).collect(),
    };
    let eps: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let log_w = |p: &BranchParams| {
        let (q, lq) = branches_from_noise(p, &eps);
        log_likelihood(&tree4, &q, &aln4).unwrap() + treefeat::phylo::log_prior(&tree4, &q).unwrap() - lq
    };
    let (q, _) = branches_from_noise(&params, &eps);
    let gll = log_likelihood_grad(&tree4, &q, &aln4).unwrap().1;
    let g: Vec<f64> = gll.iter().zip(treefeat::phylo::log_prior_grad(&q)).map(|(a, b)| a + b).collect();
    let (d_mu, d_ls) = reparam_edge_gradients(&params, &eps, &q, &g);
    let mut worst = 0.0f64;
    for e in 0..5 {
        for (which, analytic) in [(0, d_mu[e]), (1, d_ls[e])] {
            let mut up = params.clone();
            let mut down = params.clone();
            let (u, d) = if which == 0 { (&mut up.mu, &mut down.mu) } else { (&mut up.log_sigma, &mut down.log_sigma) };
            u[e] += 1e-5;
            d[e] -= 1e-5;
            worst = worst.max(rel_err((log_w(&up) - log_w(&down)) / 2e-5, analytic));
        }
    }
    check("lognormal", worst, 1e-4);

    let trees4 = enumerate_unrooted(Arc::new(TaxaSet::letters(4))).unwrap();
    let support4 = Arc::new(build_support(&trees4).unwrap());
    for kind in [BranchKind::Split, BranchKind::Psp, BranchKind::Gnn] {
        let cfg = VbpiConfig {
            branch: kind,
            gnn: GnnConfig { variant: Variant::Edge, hidden_dim: 6, ..GnnConfig::default() },
            seed: 6,
            ..VbpiConfig::default()
        };
        let mut s = VbpiState::new(support4.clone(), cfg).unwrap();
        for id in s.psi.ids().collect::<Vec<_>>() {
            s.psi.value_mut(id).mapv_inplace(|v| v + 0.05 * rng.sample::<f64, _>(StandardNormal));
        }
        let bound = |s: &VbpiState| s.lower_bound(&aln4, 10, 1.0, &mut ChaCha8Rng::seed_from_u64(66)).unwrap().value;
        s.psi.zero_grad();
        s.accumulate_gradients(&aln4, 1.0, &mut ChaCha8Rng::seed_from_u64(66)).unwrap();
        let mut worst = 0.0f64;
        for id in s.psi.ids().collect::<Vec<_>>() {
            let grad = s.psi.grad(id).clone();
            for (idx, &a) in grad.indexed_iter().step_by(2) {
                let orig = s.psi.value(id)[idx];
                s.psi.value_mut(id)[idx] = orig + 1e-5;
                let up = bound(&s);
                s.psi.value_mut(id)[idx] = orig - 1e-5;
                let down = bound(&s);
                s.psi.value_mut(id)[idx] = orig;
                // Stored gradients are negated for descent.
                worst = worst.max(rel_err(-(up - down) / 2e-5, a));
            }
        }
        check(&format!("bound/{kind}"), worst, 1e-3);
    }
    report(6, "finite-difference gradient audit", pass, lines.join(", "));
}

#[test]
fn criterion_07_sbn_normalization_and_sampling() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let five = enumerate_unrooted(Arc::new(TaxaSet::letters(5))).unwrap();
    let support = Arc::new(build_support(&five).unwrap());
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let phi = (0..support.n_params()).map(|_| rng.sample(StandardNormal)).collect();
        let model = SbnModel { support: support.clone(), phi };
        let lp: Vec<f64> = five.iter().map(|t| model.log_prob_unrooted(t).unwrap()).collect();
        worst = worst.max((logsumexp(&lp).exp() - 1.0).abs());
    }

    let four = enumerate_unrooted(Arc::new(TaxaSet::letters(4))).unwrap();
    let support = Arc::new(build_support(&four).unwrap());
    let phi = (0..support.n_params()).map(|_| rng.sample(StandardNormal)).collect();
    let model = SbnModel { support, phi };
    let exact: HashMap<_, f64> =
        four.iter().map(|t| (split_set(t).unwrap(), model.log_prob_unrooted(t).unwrap().exp())).collect();
    let draws = 30_000;
    let mut counts: HashMap<_, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(split_set(&model.sample_tree(&mut rng).unwrap()).unwrap()).or_default() += 1;
    }
    let kl: f64 = counts
        .iter()
        .map(|(k, &c)| {
            let p = c as f64 / draws as f64;
            p * (p / exact[k]).ln()
        })
        .sum();
    report(
        7,
        "SBN normalization and sampler",
        worst <= 1e-10 && kl < 0.01,
        format!("max |Σp−1| = {worst:.1e} over 20 φ draws, sampler KL {kl:.1e} ({draws} draws)"),
    );
}

const EBM_STEPS: usize = 50_000;
const EBM_HIDDEN: usize = 32;
const EBM_LR: f64 = 3e-3;
const EBM_LR_DECAY: f64 = 0.01;

#[test]
fn criterion_08_ebm_reaches_the_nce_optimum() {
    let _g = serial();
    let table = sample_dirichlet_target(8, 0.008, 42).unwrap();
    let j_star = optimal_nce_loss(&table.probs);
    let cfg = NceTrainConfig { steps: EBM_STEPS, batch: 128, lr: EBM_LR, lr_decay: EBM_LR_DECAY, seed: 2, eval_every: 5000 };
    let start = Instant::now();
    let run = |variant| {
        let mut model = EbmModel::new(GnnConfig::new(variant, EBM_HIDDEN), 8, table.len() as f64, 1).unwrap();
        *train_nce(&mut model, &table, &cfg).unwrap().last().unwrap()
    };
    let ggnn = run(Variant::Ggnn);
    let mlp = run(Variant::Mlp);
    let secs = start.elapsed().as_secs_f64();
    let gap = (ggnn.nce_loss - j_star).abs();
    let pass = gap <= 0.05 && ggnn.kl <= 0.05 && ggnn.kl < mlp.kl;
    report(
        8,
        "EBM on the 8-leaf Dirichlet target",
        pass,
        format!(
            "GGNN loss {:.4} (J* {j_star:.4}, gap {gap:.4}), KL {:.4}; MLP KL {:.4}; {:.0} s",
            ggnn.nce_loss, ggnn.kl, mlp.kl, secs
        ),
    );
}

const VBPI_STEPS: usize = 10_000;
const WINDOW: usize = 1_000;

fn vbpi_config(kind: BranchKind) -> VbpiConfig {
    VbpiConfig {
        branch: kind,
        annealing: Annealing { initial: 0.001, steps: WINDOW },
        gnn: GnnConfig { variant: Variant::Edge, ..GnnConfig::default() },
        seed: 9,
        ..VbpiConfig::default()
    }
}

/// Trains for `VBPI_STEPS` updates and returns per-window means and standard
/// errors of the untempered training bound.
fn train_windows(state: &mut VbpiState, aln: &Alignment, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut window = Vec::with_capacity(WINDOW);
    for _ in 0..VBPI_STEPS {
        window.push(state.train_step(aln, &mut rng).unwrap().elbo);
        if window.len() == WINDOW {
            let (m, s) = treefeat::math::mean_std(&window);
            out.push((m, s / (WINDOW as f64).sqrt()));
            window.clear();
        }
    }
    out
}

/// Every window is no worse than its predecessor beyond three combined
/// standard errors, and the last window beats the first.
fn improves_monotonically(windows: &[(f64, f64)]) -> bool {
    let steady = windows.windows(2).all(|w| w[1].0 >= w[0].0 - 3.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt());
    steady && windows.last().unwrap().0 > windows[0].0
}

fn elbo(state: &VbpiState, aln: &Alignment, reps: usize) -> (f64, f64) {
    state.evaluate_bound(aln, 1, reps, &mut ChaCha8Rng::seed_from_u64(99)).unwrap()
}

fn gaps(state: &VbpiState, trees: &[TreeTopology], aln: &Alignment) -> Vec<GapEstimate> {
    let cfg = GapConfig { opt_steps: 2000, lr: 1e-2, opt_samples: 8, eval_samples: 4000, seed: 5 };
    trees.iter().map(|t| state.amortization_gap(t, aln, &cfg).unwrap()).collect()
}

struct Trained {
    state: VbpiState,
    windows: Vec<(f64, f64)>,
}

fn train_kind(kind: BranchKind, support: &Arc<treefeat::sbn::SbnSupport>, aln: &Alignment) -> Trained {
    let mut state = VbpiState::new(support.clone(), vbpi_config(kind)).unwrap();
    let windows = train_windows(&mut state, aln, 10);
    Trained { state, windows }
}

#[test]
fn criterion_09_vbpi_matches_the_quadrature_oracle() {
    let _g = serial();
    let (_, _, aln) = common::four_taxon_problem();
    let trees = enumerate_unrooted(aln.taxa().clone()).unwrap();
    let oracle = common::log_evidence(&trees, &aln, 12);
    let support = Arc::new(build_support(&trees).unwrap());
    let mut pass = true;
    let mut parts = vec![format!("log p(Y) = {oracle:.4}")];
    for kind in [BranchKind::Split, BranchKind::Psp, BranchKind::Gnn] {
        let t = train_kind(kind, &support, &aln);
        let (e, se) = elbo(&t.state, &aln, 20_000);
        let ml = t.state.estimate_marginal_likelihood(&aln, 10_000, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let monotone = improves_monotonically(&t.windows);
        let ok = e <= oracle + 0.02 && monotone && (ml.mean - oracle).abs() <= 0.1;
        pass &= ok;
        parts.push(format!(
            "{kind}: ELBO {e:.4}±{se:.4}, IS {:.4}, windows {}",
            ml.mean,
            if monotone { "rising" } else { "NOT rising" }
        ));
    }
    report(9, "VBPI against the quadrature oracle", pass, parts.join("; "));
}

/// Indices of the smallest set of trees holding 95% of the posterior mass,
/// with `log p(Y, τ)` estimated by the best optimized per-tree bound.
fn credible_set(log_joint: &[f64]) -> Vec<usize> {
    let z = logsumexp(log_joint);
    let mut order: Vec<usize> = (0..log_joint.len()).collect();
    order.sort_by(|&a, &b| log_joint[b].total_cmp(&log_joint[a]));
    let mut mass = 0.0;
    order
        .into_iter()
        .take_while(|&i| {
            let before = mass;
            mass += (log_joint[i] - z).exp();
            before < 0.95
        })
        .collect()
}

/// Trains both kinds under the same budget and compares their ELBOs and their
/// mean amortization gaps over the posterior 95% credible set.
fn compare_kinds(support: Arc<treefeat::sbn::SbnSupport>, aln: &Alignment, candidates: &[TreeTopology]) -> (bool, String) {
    let split = train_kind(BranchKind::Split, &support, aln);
    let gnn = train_kind(BranchKind::Gnn, &support, aln);
    let (e_split, se_split) = elbo(&split.state, aln, 20_000);
    let (e_gnn, se_gnn) = elbo(&gnn.state, aln, 20_000);
    let gs = gaps(&split.state, candidates, aln);
    let gg = gaps(&gnn.state, candidates, aln);
    let best: Vec<f64> = gs.iter().zip(&gg).map(|(a, b)| a.optimized_elbo.max(b.optimized_elbo)).collect();
    let set = credible_set(&best);
    let mean = |g: &[GapEstimate]| set.iter().map(|&i| g[i].gap).sum::<f64>() / set.len() as f64;
    let (g_split, g_gnn) = (mean(&gs), mean(&gg));
    let ok = e_gnn >= e_split && g_gnn <= g_split;
    let detail = format!(
        "ELBO gnn {e_gnn:.3}±{se_gnn:.3} vs split {e_split:.3}±{se_split:.3}, gap gnn {g_gnn:.3} vs split {g_split:.3} over {} credible trees",
        set.len()
    );
    (ok, detail)
}

#[test]
fn criterion_10_gnn_branches_beat_split_tables() {
    let _g = serial();
    let (_, _, aln4) = common::four_taxon_problem();
    let trees4 = enumerate_unrooted(aln4.taxa().clone()).unwrap();
    let (ok4, d4) = compare_kinds(Arc::new(build_support(&trees4).unwrap()), &aln4, &trees4);

    let (truth, _, aln10) = common::ten_taxon_problem(500, 10);
    let mut trees10 = vec![truth.clone()];
    trees10.extend(common::nni_neighbors(&truth));
    let (ok10, d10) = compare_kinds(Arc::new(build_support(&trees10).unwrap()), &aln10, &trees10);
    report(10, "GNN vs Split branch parameterization", ok4 && ok10, format!("4 taxa: {d4}; 10 taxa: {d10}"));
}
