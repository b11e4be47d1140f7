//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use treefeat::math::logsumexp;
use treefeat::phylo::{log_likelihood_grad, log_prior, simulate_alignment, Alignment};
use treefeat::tree::{parse_newick, random_unrooted, BranchLengths, TaxaSet, TreeTopology};

/// `exp(t Q)` for the Jukes–Cantor rate matrix by scaling and squaring a
/// Taylor series. Deliberately ignores the closed form.
pub fn jc_expm(t: f64) -> [[f64; 4]; 4] {
    let mut q = DMatrix::from_element(4, 4, 1.0 / 3.0);
    for i in 0..4 {
        q[(i, i)] = -1.0;
    }
    let mut squarings = 0;
    let mut s = t;
    while s > 0.125 {
        s *= 0.5;
        squarings += 1;
    }
    let a = q * s;
    let mut term = DMatrix::<f64>::identity(4, 4);
    let mut sum = term.clone();
    for k in 1..30 {
        term = &term * &a / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = sum[(i, j)];
        }
    }
    out
}

/// Log likelihood by summing over every joint assignment of interior states,
/// one site pattern at a time.
pub fn brute_force_log_likelihood(tree: &TreeTopology, q: &BranchLengths, aln: &Alignment) -> f64 {
    let interior: Vec<usize> = tree.interior_nodes().collect();
    let mut slot = vec![usize::MAX; tree.n_nodes()];
    for (k, &u) in interior.iter().enumerate() {
        slot[u] = k;
    }
    let mats: Vec<[[f64; 4]; 4]> = q.0.iter().map(|&t| jc_expm(t)).collect();
    let n_assign = 4usize.pow(interior.len() as u32);
    let mut total = 0.0;
    for (pattern, &w) in aln.patterns().iter().zip(aln.weights()) {
        let mut site = 0.0;
        let mut states = vec![0usize; interior.len()];
        for code in 0..n_assign {
            let mut c = code;
            for s in states.iter_mut() {
                *s = c % 4;
                c /= 4;
            }
            let mut p = 0.25;
            for (e, &(a, b)) in tree.edges().iter().enumerate() {
                let m = &mats[e];
                p *= match (tree.taxon(a), tree.taxon(b)) {
                    (None, None) => m[states[slot[a]]][states[slot[b]]],
                    (Some(t), None) => leaf_term(m, states[slot[b]], pattern[t]),
                    (None, Some(t)) => leaf_term(m, states[slot[a]], pattern[t]),
                    (Some(_), Some(_)) => unreachable!("two-leaf trees are not supported"),
                };
            }
            site += p;
        }
        total += w * site.ln();
    }
    total
}

fn leaf_term(m: &[[f64; 4]; 4], from: usize, mask: u8) -> f64 {
    (0..4).filter(|s| mask & (1 << s) != 0).map(|s| m[from][s]).sum()
}

/// Gauss–Hermite nodes and weights for the weight `exp(−x²)` (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i, i - 1)] = b;
        j[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mu0 = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Unnormalized log posterior over log branch lengths `x`, with its gradient.
fn log_joint_in_logspace(tree: &TreeTopology, aln: &Alignment, x: &[f64]) -> (f64, Vec<f64>) {
    let q = BranchLengths(x.iter().map(|v| v.exp()).collect());
    let (ll, g) = log_likelihood_grad(tree, &q, aln).unwrap();
    let lp = log_prior(tree, &q).unwrap();
    let value = ll + lp + x.iter().sum::<f64>();
    let grad = g.iter().zip(&q.0).map(|(gi, qi)| (gi - 10.0) * qi + 1.0).collect();
    (value, grad)
}

/// `log ∫ p(Y|τ,q) p(τ,q) dq` by Newton search for the mode in log space,
/// whitening by the Hessian and an `n`-point Gauss–Hermite tensor product.
pub fn log_evidence_for_topology(tree: &TreeTopology, aln: &Alignment, n: usize) -> f64 {
    log_evidence_stretched(tree, aln, n, STRETCH)
}

pub const STRETCH: f64 = 0.3;

/// As [`log_evidence_for_topology`] with each whitened axis mapped through
/// `sinh(c z) / c`, which pushes the nodes into the skewed tails.
pub fn log_evidence_stretched(tree: &TreeTopology, aln: &Alignment, n: usize, c: f64) -> f64 {
    let d = tree.n_edges();
    let mut x = vec![(0.1f64).ln(); d];
    let hessian = |x: &[f64]| {
        let mut h = DMatrix::zeros(d, d);
        let step = 1e-5;
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let gp = log_joint_in_logspace(tree, aln, &xp).1;
            let gm = log_joint_in_logspace(tree, aln, &xm).1;
            for i in 0..d {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        (&h + h.transpose()) * 0.5
    };
    for _ in 0..200 {
        let (f0, g) = log_joint_in_logspace(tree, aln, &x);
        let neg_h = -hessian(&x);
        let dir = match neg_h.clone().cholesky() {
            Some(c) => c.solve(&DVector::from_vec(g.clone())),
            None => DVector::from_vec(g.clone()) * 0.1,
        };
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            if log_joint_in_logspace(tree, aln, &cand).0 >= f0 || t < 1e-8 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
        if dir.norm() * t < 1e-10 {
            break;
        }
    }
    let eig = SymmetricEigen::new(-hessian(&x));
    assert!(eig.eigenvalues.iter().all(|&l| l > 0.0), "mode is not a maximum");
    let mut l = eig.eigenvectors.clone();
    for j in 0..d {
        let s = eig.eigenvalues[j].sqrt().recip();
        for i in 0..d {
            l[(i, j)] *= s;
        }
    }
    let log_det: f64 = eig.eigenvalues.iter().map(|v| -0.5 * v.ln()).sum();
    let (nodes, weights) = gauss_hermite(n);
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let total = n.pow(d as u32);
    let mut terms = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    let mut z = vec![0.0; d];
    let mut point = vec![0.0; d];
    for _ in 0..total {
        let mut lw = 0.0;
        let mut u2 = 0.0;
        for k in 0..d {
            let u = nodes[idx[k]];
            let r = std::f64::consts::SQRT_2 * u;
            (z[k], lw) = if c > 0.0 { ((c * r).sinh() / c, lw + (c * r).cosh().ln()) } else { (r, lw) };
            lw += log_w[idx[k]];
            u2 += u * u;
        }
        for i in 0..d {
            point[i] = x[i] + (0..d).map(|j| l[(i, j)] * z[j]).sum::<f64>();
        }
        let q = BranchLengths(point.iter().map(|v| v.exp()).collect());
        let f = treefeat::phylo::log_likelihood(tree, &q, aln).unwrap() + log_prior(tree, &q).unwrap() + point.iter().sum::<f64>();
        terms.push(lw + u2 + f);
        for k in 0..d {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    log_det + 0.5 * d as f64 * 2f64.ln() + logsumexp(&terms)
}

/// Exact log marginal likelihood summed over the given topologies.
pub fn log_evidence(trees: &[TreeTopology], aln: &Alignment, n: usize) -> f64 {
    let per: Vec<f64> = trees.iter().map(|t| log_evidence_for_topology(t, aln, n)).collect();
    logsumexp(&per)
}

/// The fixed 4-taxon problem: `((A,B),(C,D))` with unequal branches, 100 sites.
pub fn four_taxon_problem() -> (TreeTopology, BranchLengths, Alignment) {
    let taxa = Arc::new(TaxaSet::letters(4));
    let tree = parse_newick("((A,B),(C,D));", Some(taxa)).unwrap().to_unrooted().unwrap();
    let q = BranchLengths(vec![0.1, 0.05, 0.2, 0.08, 0.12]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let aln = simulate_alignment(&tree, &q, 100, &mut rng).unwrap();
    (tree, q, aln)
}

/// Every unrooted tree reachable by one nearest-neighbor interchange.
pub fn nni_neighbors(tree: &TreeTopology) -> Vec<TreeTopology> {
    let mut out = Vec::new();
    for &(u, v) in tree.edges() {
        if tree.is_leaf(u) || tree.is_leaf(v) {
            continue;
        }
        let b = tree.neighbors(u).iter().map(|p| p.0).find(|&w| w != v).unwrap();
        for &c in tree.neighbors(v).iter().map(|p| &p.0).filter(|&&w| w != u) {
            let edges: Vec<(usize, usize)> = tree
                .edges()
                .iter()
                .map(|&(x, y)| match (x, y) {
                    _ if (x, y) == (u, b) || (x, y) == (b, u) => (v, b),
                    _ if (x, y) == (v, c) || (x, y) == (c, v) => (u, c),
                    _ => (x, y),
                })
                .collect();
            let t = TreeTopology::new(tree.taxa().clone(), tree.taxon_assignment(), edges, false, u).unwrap();
            out.push(t);
        }
    }
    out
}

/// A simulated 10-taxon problem: random topology, Exp(10) branches, `m` sites.
pub fn ten_taxon_problem(m: usize, seed: u64) -> (TreeTopology, BranchLengths, Alignment) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taxa = Arc::new(TaxaSet::letters(10));
    let tree = random_unrooted(taxa, &mut rng).unwrap();
    let exp = Exp::new(10.0f64).unwrap();
    let q = BranchLengths((0..tree.n_edges()).map(|_| exp.sample(&mut rng).max(0.01)).collect());
    let aln = simulate_alignment(&tree, &q, m, &mut rng).unwrap();
    (tree, q, aln)
}

pub fn random_lengths<R: Rng>(n: usize, rng: &mut R) -> BranchLengths {
    BranchLengths((0..n).map(|_| rng.random_range(0.005..0.6)).collect())
}
