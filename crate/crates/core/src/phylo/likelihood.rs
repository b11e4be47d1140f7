//! Felsenstein pruning over compressed site patterns.
//!
//! Partials are kept in linear space with a per-node rescaling by the
//! per-pattern maximum; the log scale factors are accumulated separately.

use super::{jc_probs, jc_probs_dt, Alignment, STATIONARY};
use crate::math::ln_unrooted_tree_count;
use crate::tree::{BranchLengths, TreeTopology};
use crate::{Error, Result};

/// Rate of the i.i.d. exponential branch-length prior.
pub const PRIOR_RATE: f64 = 10.0;

fn check_inputs(tree: &TreeTopology, q: &BranchLengths, aln: &Alignment) -> Result<()> {
    if tree.taxa().names() != aln.taxa().names() {
        return Err(Error::TaxaMismatch("tree and alignment taxa differ".into()));
    }
    if q.len() < tree.n_edges() {
        return Err(Error::MissingBranchLength(q.len()));
    }
    if q.len() > tree.n_edges() {
        return Err(Error::Dimension(format!("{} branch lengths for {} edges", q.len(), tree.n_edges())));
    }
    q.validate()
}

/// `out[s] = Σ_b P_sb(t) x[b]` for Jukes-Cantor.
#[inline]
fn propagate(x: &[f64], same: f64, diff: f64, out: &mut [f64]) {
    let total = x[0] + x[1] + x[2] + x[3];
    for s in 0..4 {
        out[s] = diff * total + (same - diff) * x[s];
    }
}

struct Pruning {
    n_patterns: usize,
    /// `below[u]`: scaled conditional likelihood of the subtree under `u`.
    below: Vec<f64>,
    /// `up[u]`: message sent from `u` to its parent (`below[u]` pushed
    /// through the parent edge).
    up: Vec<f64>,
    log_scale: Vec<f64>,
}

impl Pruning {
    fn at(&self, buf: &[f64], u: usize, p: usize) -> [f64; 4] {
        let i = (u * self.n_patterns + p) * 4;
        [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]
    }
}

fn prune(tree: &TreeTopology, q: &BranchLengths, aln: &Alignment) -> Pruning {
    let n_patterns = aln.patterns().len();
    let n = tree.n_nodes();
    let ord = tree.order();
    let mut below = vec![0.0; n * n_patterns * 4];
    let mut up = vec![0.0; n * n_patterns * 4];
    let mut log_scale = vec![0.0; n_patterns];
    for &u in &ord.postorder {
        let base = u * n_patterns * 4;
        match tree.taxon(u) {
            Some(t) => {
                for (p, pat) in aln.patterns().iter().enumerate() {
                    let mask = pat[t];
                    for s in 0..4 {
                        below[base + p * 4 + s] = f64::from(mask >> s & 1);
                    }
                }
            }
            None => {
                below[base..base + n_patterns * 4].fill(1.0);
                for v in tree.children(u) {
                    let vb = v * n_patterns * 4;
                    for p in 0..n_patterns {
                        for s in 0..4 {
                            below[base + p * 4 + s] *= up[vb + p * 4 + s];
                        }
                    }
                }
                for p in 0..n_patterns {
                    let cell = &mut below[base + p * 4..base + p * 4 + 4];
                    let m = cell.iter().copied().fold(0.0, f64::max);
                    if m > 0.0 {
                        for x in cell.iter_mut() {
                            *x /= m;
                        }
                        log_scale[p] += m.ln();
                    } else {
                        log_scale[p] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        if let Some(e) = ord.parent_edge[u] {
            let (same, diff) = jc_probs(q[e]);
            for p in 0..n_patterns {
                let i = base + p * 4;
                let (src, dst) = (&below[i..i + 4], &mut up[i..i + 4]);
                propagate(src, same, diff, dst);
            }
        }
    }
    Pruning { n_patterns, below, up, log_scale }
}

fn root_site_logs(tree: &TreeTopology, pr: &Pruning) -> Result<Vec<f64>> {
    let r = tree.root();
    (0..pr.n_patterns)
        .map(|p| {
            let x = pr.at(&pr.below, r, p);
            let lik: f64 = (0..4).map(|s| STATIONARY[s] * x[s]).sum();
            if lik > 0.0 && pr.log_scale[p].is_finite() {
                Ok(lik.ln() + pr.log_scale[p])
            } else {
                Err(Error::ZeroLikelihood(p))
            }
        })
        .collect()
}

/// `Σ_i log p(Y_i | τ, q)` under Jukes-Cantor, rooted at the tree's designated
/// root (any interior node gives the same value by reversibility).
pub fn log_likelihood(tree: &TreeTopology, q: &BranchLengths, aln: &Alignment) -> Result<f64> {
    check_inputs(tree, q, aln)?;
    let pr = prune(tree, q, aln);
    let logs = root_site_logs(tree, &pr)?;
    Ok(logs.iter().zip(aln.weights()).map(|(l, w)| l * w).sum())
}

/// Log-likelihood and its gradient with respect to every branch length.
///
/// After the postorder pass, a preorder pass builds for every non-root node
/// `v` the scaled "outside" vector `O_v(a)` over the state of its parent,
/// so that per pattern `L = Σ_a O_v(a) Σ_b P_ab(t) B_v(b)` and
/// `∂ log L/∂t = Σ_a O_v(a) Σ_b P'_ab(t) B_v(b) / L` (scales cancel).
pub fn log_likelihood_grad(tree: &TreeTopology, q: &BranchLengths, aln: &Alignment) -> Result<(f64, Vec<f64>)> {
    check_inputs(tree, q, aln)?;
    let pr = prune(tree, q, aln);
    let logs = root_site_logs(tree, &pr)?;
    let value = logs.iter().zip(aln.weights()).map(|(l, w)| l * w).sum();

    let np = pr.n_patterns;
    let ord = tree.order();
    let mut grad = vec![0.0; tree.n_edges()];
    // top[u](a): scaled probability of everything outside subtree(u), as a
    // function of u's state (includes the stationary distribution at the root).
    let mut top = vec![0.0; tree.n_nodes() * np * 4];
    let r = tree.root();
    top[r * np * 4..(r + 1) * np * 4].fill(0.25);
    let mut dmsg = [0.0; 4];
    for &p_node in &ord.preorder {
        if tree.is_leaf(p_node) {
            continue;
        }
        let children: Vec<usize> = tree.children(p_node).collect();
        for &v in &children {
            let e = ord.parent_edge[v].expect("child has a parent edge");
            let (same, diff) = jc_probs(q[e]);
            let (dsame, ddiff) = jc_probs_dt(q[e]);
            for pat in 0..np {
                let t = pr.at(&top, p_node, pat);
                let mut outside = t;
                for &w in &children {
                    if w != v {
                        let m = pr.at(&pr.up, w, pat);
                        for a in 0..4 {
                            outside[a] *= m[a];
                        }
                    }
                }
                let b = pr.at(&pr.below, v, pat);
                let m = pr.at(&pr.up, v, pat);
                propagate(&b, dsame, ddiff, &mut dmsg);
                let lik: f64 = (0..4).map(|a| outside[a] * m[a]).sum();
                let dlik: f64 = (0..4).map(|a| outside[a] * dmsg[a]).sum();
                grad[e] += aln.weights()[pat] * dlik / lik;
                if !tree.is_leaf(v) {
                    // top[v](c) = Σ_a outside(a) P_ac, rescaled.
                    let mut tv = [0.0; 4];
                    propagate(&outside, same, diff, &mut tv);
                    let mx = tv.iter().copied().fold(0.0, f64::max);
                    let i = (v * np + pat) * 4;
                    for c in 0..4 {
                        top[i + c] = tv[c] / mx;
                    }
                }
            }
        }
    }
    Ok((value, grad))
}

fn check_prior_input(q: &BranchLengths) -> Result<()> {
    q.validate()
}

/// Uniform topology prior times i.i.d. `Exp(10)` branch lengths:
/// `−log((2N−5)!!) + Σ_e (log 10 − 10 q_e)`.
pub fn log_prior(tree: &TreeTopology, q: &BranchLengths) -> Result<f64> {
    check_prior_input(q)?;
    Ok(-ln_unrooted_tree_count(tree.n_taxa()) + q.0.iter().map(|&x| PRIOR_RATE.ln() - PRIOR_RATE * x).sum::<f64>())
}

/// Gradient of [`log_prior`] in each branch length (constant `−10`).
pub fn log_prior_grad(q: &BranchLengths) -> Vec<f64> {
    vec![-PRIOR_RATE; q.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phylo::{parse_fasta, simulate_alignment};
    use crate::tree::{enumerate_unrooted, parse_newick, random_unrooted, TaxaSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn zero_branches_on_star() {
        let t = parse_newick("(A,B,C);", None).unwrap();
        let q = BranchLengths::constant(3, 0.0);
        let aln = parse_fasta(">A\nA\n>B\nA\n>C\nA\n").unwrap();
        let ll = log_likelihood(&t, &q, &aln).unwrap();
        assert!((ll + 4f64.ln()).abs() < 1e-15);
        let aln = parse_fasta(">A\nA\n>B\nA\n>C\nC\n").unwrap();
        assert!(matches!(log_likelihood(&t, &q, &aln), Err(Error::ZeroLikelihood(0))));
    }

    #[test]
    fn input_errors() {
        let t = parse_newick("(A,B,C);", None).unwrap();
        let aln = parse_fasta(">A\nA\n>B\nA\n>D\nA\n").unwrap();
        assert!(matches!(log_likelihood(&t, &BranchLengths::constant(3, 0.1), &aln), Err(Error::TaxaMismatch(_))));
        let aln = parse_fasta(">A\nA\n>B\nA\n>C\nA\n").unwrap();
        assert!(matches!(log_likelihood(&t, &BranchLengths::constant(2, 0.1), &aln), Err(Error::MissingBranchLength(_))));
        assert!(log_likelihood(&t, &BranchLengths(vec![0.1, -0.1, 0.1]), &aln).is_err());
    }

    #[test]
    fn root_invariance_and_grad_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let taxa = Arc::new(TaxaSet::numbered(9));
            let t = random_unrooted(taxa, &mut rng).unwrap();
            let q = BranchLengths((0..t.n_edges()).map(|_| rng.random_range(0.01..0.5)).collect());
            let aln = simulate_alignment(&t, &q, 50, &mut rng).unwrap();
            let base = log_likelihood(&t, &q, &aln).unwrap();
            let (v, _) = log_likelihood_grad(&t, &q, &aln).unwrap();
            assert!((v - base).abs() < 1e-10);
            for r in t.interior_nodes() {
                let edges = t.edges().to_vec();
                let rt = TreeTopology::new(t.taxa().clone(), t.taxon_assignment(), edges, false, r).unwrap();
                assert!((log_likelihood(&rt, &q, &aln).unwrap() - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trees = enumerate_unrooted(Arc::new(TaxaSet::numbered(5))).unwrap();
        for t in &trees {
            let q = BranchLengths((0..t.n_edges()).map(|_| rng.random_range(0.02..0.6)).collect());
            let aln = simulate_alignment(t, &q, 30, &mut rng).unwrap();
            let (_, g) = log_likelihood_grad(t, &q, &aln).unwrap();
            let h = 1e-5;
            for e in 0..t.n_edges() {
                let mut qp = q.clone();
                qp.0[e] += h;
                let mut qm = q.clone();
                qm.0[e] -= h;
                let fd = (log_likelihood(t, &qp, &aln).unwrap() - log_likelihood(t, &qm, &aln).unwrap()) / (2.0 * h);
                assert!((fd - g[e]).abs() <= 1e-4 * fd.abs().max(1e-3), "edge {e}: fd {fd} vs {}", g[e]);
            }
        }
    }

    #[test]
    fn duplicated_sites_scale_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_unrooted(Arc::new(TaxaSet::numbered(6)), &mut rng).unwrap();
        let q = BranchLengths((0..t.n_edges()).map(|_| rng.random_range(0.05..0.3)).collect());
        let one = simulate_alignment(&t, &q, 1, &mut rng).unwrap();
        let many = one.repeated(7);
        let (v1, g1) = log_likelihood_grad(&t, &q, &one).unwrap();
        let (v7, g7) = log_likelihood_grad(&t, &q, &many).unwrap();
        assert!((v7 - 7.0 * v1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g7) {
            assert!((7.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_edges_get_equal_gradients() {
        let t = parse_newick("((A,B),(C,D));", None).unwrap().to_unrooted().unwrap();
        let aln = parse_fasta(">A\nACGTA\n>B\nACGTC\n>C\nACGTA\n>D\nACGTC\n").unwrap();
        let q = BranchLengths::constant(5, 0.1);
        let (_, g) = log_likelihood_grad(&t, &q, &aln).unwrap();
        let pendant = |taxon: usize| t.neighbors(t.leaf_of(taxon))[0].1;
        assert!((g[pendant(0)] - g[pendant(2)]).abs() < 1e-12);
        assert!((g[pendant(1)] - g[pendant(3)]).abs() < 1e-12);
    }

    #[test]
    fn prior_values() {
        let trees = enumerate_unrooted(Arc::new(TaxaSet::numbered(8))).unwrap();
        let t = &trees[0];
        let q = BranchLengths::constant(t.n_edges(), 0.0);
        let lp = log_prior(t, &q).unwrap();
        assert!((lp - (-(10395f64).ln() + 13.0 * 10f64.ln())).abs() < 1e-12);
        let mut q2 = BranchLengths::constant(t.n_edges(), 0.2);
        let base = log_prior(t, &q2).unwrap();
        q2.0[3] = 0.4;
        assert!((log_prior(t, &q2).unwrap() - base + 10.0 * 0.2).abs() < 1e-12);
        let star = parse_newick("(A,B,C);", None).unwrap();
        assert!((log_prior(&star, &BranchLengths::constant(3, 0.0)).unwrap() - 3.0 * 10f64.ln()).abs() < 1e-12);
        assert!(log_prior(&star, &BranchLengths(vec![0.0, -1.0, 0.0])).is_err());
    }
}
