//! Interior node embeddings by Dirichlet energy minimization.
//!
//! Given fixed tip features, the interior features minimizing
//! `Σ_{(u,v)∈E} ‖x_u − x_v‖²` satisfy the balance equations: every interior
//! feature is the mean of its neighbors' features. [`embed_two_pass`] solves
//! them in linear time by postorder elimination (each node written as an
//! affine function of its parent, `x_u = c_u x_parent + d_u`) followed by
//! preorder back-substitution. [`embed_dense`] solves the same system by a
//! direct factorization and is kept as an oracle.
//!
//! With linearly independent tips the embedding identifies the topology;
//! [`reconstruct_topology`] recovers it by repeatedly merging cherries.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::tree::{TaxaSet, TreeTopology};
use crate::{Error, Result};

/// Features of the tips, one row per taxon index.
#[derive(Debug, Clone, PartialEq)]
pub struct TipFeatures(pub Array2<f64>);

impl TipFeatures {
    /// Standard basis vectors: taxon `k` gets `e_k`.
    pub fn one_hot(n_taxa: usize) -> Self {
        TipFeatures(Array2::eye(n_taxa))
    }

    pub fn n_taxa(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// One-hot tip features for the taxa of `tree`.
pub fn one_hot_tips(tree: &TreeTopology) -> TipFeatures {
    TipFeatures::one_hot(tree.n_taxa())
}

/// Per-node feature vectors, one row per node id.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureMatrix(pub Array2<f64>);

impl NodeFeatureMatrix {
    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, u: usize) -> ArrayView1<'_, f64> {
        self.0.row(u)
    }

    /// Rows of the interior nodes, in increasing node id order.
    pub fn interior_rows(&self, tree: &TreeTopology) -> Array2<f64> {
        let ids: Vec<usize> = tree.interior_nodes().collect();
        self.0.select(Axis(0), &ids)
    }
}

/// Coefficients of the postorder elimination `x_u = c_u x_parent + d_u`.
///
/// Entries for the root are unused (zero); leaves have `c = 0`, `d = x`.
#[derive(Debug, Clone)]
pub struct TwoPassCoefficients {
    pub c: Vec<f64>,
    pub d: Array2<f64>,
}

fn check_tips(tree: &TreeTopology, tips: &TipFeatures) -> Result<()> {
    if tips.n_taxa() != tree.n_taxa() {
        return Err(Error::Dimension(format!("{} tip vectors for {} taxa", tips.n_taxa(), tree.n_taxa())));
    }
    if tips.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dimension("non-finite tip feature".into()));
    }
    Ok(())
}

/// Postorder elimination. Returns `c` and a matrix whose rows hold `d`,
/// except the root row, which already holds `x_root`.
fn eliminate(tree: &TreeTopology, tips: &TipFeatures) -> Result<(Vec<f64>, Array2<f64>)> {
    check_tips(tree, tips)?;
    let ord = tree.order();
    let dim = tips.dim();
    // `c[u]` collects Σ c over the children of `u` until `u` is reached; rows of
    // `d` likewise collect Σ d.
    let mut c = vec![0.0; tree.n_nodes()];
    let mut d = Array2::<f64>::zeros((tree.n_nodes(), dim));
    let buf = d.as_slice_mut().expect("standard layout");
    for &u in &ord.postorder {
        let row = u * dim..(u + 1) * dim;
        match tree.taxon(u) {
            Some(t) => buf[row.clone()].iter_mut().zip(tips.0.row(t)).for_each(|(x, &v)| *x = v),
            None => {
                let inv = 1.0 / (tree.degree(u) as f64 - c[u]);
                buf[row.clone()].iter_mut().for_each(|x| *x *= inv);
                c[u] = inv;
            }
        }
        if let Some(p) = ord.parent[u] {
            c[p] += c[u];
            let (xp, xu) = two_rows(buf, p, u, dim);
            xp.iter_mut().zip(xu.iter()).for_each(|(a, &b)| *a += b);
        }
    }
    c[ord.root] = 0.0;
    Ok((c, d))
}

/// Disjoint mutable views of rows `a` and `b` (`a ≠ b`).
fn two_rows(buf: &mut [f64], a: usize, b: usize, dim: usize) -> (&mut [f64], &mut [f64]) {
    if a < b {
        let (lo, hi) = buf.split_at_mut(b * dim);
        (&mut lo[a * dim..(a + 1) * dim], &mut hi[..dim])
    } else {
        let (lo, hi) = buf.split_at_mut(a * dim);
        (&mut hi[..dim], &mut lo[b * dim..(b + 1) * dim])
    }
}

/// First (postorder) pass.
pub fn two_pass_coefficients(tree: &TreeTopology, tips: &TipFeatures) -> Result<TwoPassCoefficients> {
    let (c, mut d) = eliminate(tree, tips)?;
    d.row_mut(tree.order().root).fill(0.0);
    Ok(TwoPassCoefficients { c, d })
}

/// Linear-time Dirichlet energy minimizer. Leaf rows equal their tip features.
pub fn embed_two_pass(tree: &TreeTopology, tips: &TipFeatures) -> Result<NodeFeatureMatrix> {
    let (c, mut d) = eliminate(tree, tips)?;
    let ord = tree.order();
    let dim = d.ncols();
    let buf = d.as_slice_mut().expect("standard layout");
    // Second pass: `x_u = d_u + c_u x_parent`, in place. Leaves have `c = 0`.
    for &u in &ord.preorder[1..] {
        let p = ord.parent[u].expect("non-root node has a parent");
        let cu = c[u];
        if cu != 0.0 {
            let (xp, xu) = two_rows(buf, p, u, dim);
            xu.iter_mut().zip(xp.iter()).for_each(|(a, &b)| *a += cu * b);
        }
    }
    Ok(NodeFeatureMatrix(d))
}

/// Largest interior node count accepted by [`embed_dense`].
pub const DENSE_MAX_INTERIOR: usize = 2000;

/// Direct solve of the interior-restricted Laplacian system `L_oo X_o = B`,
/// where `B` sums the tip features adjacent to each interior node.
pub fn embed_dense(tree: &TreeTopology, tips: &TipFeatures) -> Result<NodeFeatureMatrix> {
    check_tips(tree, tips)?;
    let interior: Vec<usize> = tree.interior_nodes().collect();
    let m = interior.len();
    if m > DENSE_MAX_INTERIOR {
        return Err(Error::Dimension(format!("{m} interior nodes exceed the dense solver limit")));
    }
    let mut slot = vec![usize::MAX; tree.n_nodes()];
    for (i, &u) in interior.iter().enumerate() {
        slot[u] = i;
    }
    let dim = tips.dim();
    let mut lap = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, dim);
    for (i, &u) in interior.iter().enumerate() {
        lap[(i, i)] = tree.degree(u) as f64;
        for &(v, _) in tree.neighbors(u) {
            match tree.taxon(v) {
                Some(t) => {
                    for k in 0..dim {
                        rhs[(i, k)] += tips.0[(t, k)];
                    }
                }
                None => lap[(i, slot[v])] -= 1.0,
            }
        }
    }
    let chol = lap.cholesky().ok_or_else(|| Error::InvalidTree("singular interior Laplacian".into()))?;
    let sol = chol.solve(&rhs);
    let mut out = Array2::<f64>::zeros((tree.n_nodes(), dim));
    for u in 0..tree.n_nodes() {
        match tree.taxon(u) {
            Some(t) => out.row_mut(u).assign(&tips.0.row(t)),
            None => {
                for k in 0..dim {
                    out[(u, k)] = sol[(slot[u], k)];
                }
            }
        }
    }
    Ok(NodeFeatureMatrix(out))
}

fn check_cover(tree: &TreeTopology, feats: &NodeFeatureMatrix) -> Result<()> {
    if feats.n_nodes() != tree.n_nodes() {
        return Err(Error::Dimension(format!("features for {} nodes, tree has {}", feats.n_nodes(), tree.n_nodes())));
    }
    Ok(())
}

/// `Σ_{(u,v)∈E} ‖f(u) − f(v)‖²`.
pub fn dirichlet_energy(tree: &TreeTopology, feats: &NodeFeatureMatrix) -> Result<f64> {
    check_cover(tree, feats)?;
    Ok(tree
        .edges()
        .iter()
        .map(|&(a, b)| feats.row(a).iter().zip(feats.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum())
}

/// Max over interior nodes of `‖x_u − mean of neighbors‖_∞`.
pub fn balance_residual(tree: &TreeTopology, feats: &NodeFeatureMatrix) -> Result<f64> {
    check_cover(tree, feats)?;
    let mut worst = 0.0f64;
    for u in tree.interior_nodes() {
        let deg = tree.degree(u) as f64;
        for k in 0..feats.dim() {
            let mean = tree.neighbors(u).iter().map(|&(v, _)| feats.0[(v, k)]).sum::<f64>() / deg;
            worst = worst.max((feats.0[(u, k)] - mean).abs());
        }
    }
    Ok(worst)
}

/// Relative gap under which two argmax candidates count as tied.
pub const ARGMAX_TIE_TOLERANCE: f64 = 1e-6;

/// Convex-combination coefficients of each row of `points` in terms of the
/// tip features: row `i` of the result is `a` with `points[i] = Σ_t a_t tips[t]`.
pub fn convex_coefficients(points: ArrayView2<'_, f64>, tips: &TipFeatures) -> Result<Array2<f64>> {
    if points.ncols() != tips.dim() {
        return Err(Error::Dimension(format!("features of dim {} vs tips of dim {}", points.ncols(), tips.dim())));
    }
    let n = tips.n_taxa();
    let t = DMatrix::from_fn(n, tips.dim(), |i, k| tips.0[(i, k)]);
    let gram = &t * t.transpose();
    let chol = gram.cholesky().ok_or_else(|| Error::NotAnEmbedding("tip features are not linearly independent".into()))?;
    let mut out = Array2::<f64>::zeros((points.nrows(), n));
    for (i, row) in points.outer_iter().enumerate() {
        let x = DVector::from_iterator(row.len(), row.iter().copied());
        let a = chol.solve(&(&t * x));
        for k in 0..n {
            out[(i, k)] = a[k];
        }
    }
    Ok(out)
}

/// Recovers the unrooted topology whose Dirichlet embedding has the given
/// interior features (rows in any order).
///
/// Each round expresses every remaining interior feature as a combination of
/// the current tip features, maps each tip to the interior node with the
/// largest coefficient on it (its neighbor), merges the first pair of tips
/// sharing a neighbor into that neighbor, and continues until three tips
/// remain around the last interior node. The merged neighbor keeps its
/// already-computed feature as the new tip feature.
pub fn reconstruct_topology(interior: ArrayView2<'_, f64>, tips: &TipFeatures, taxa: Arc<TaxaSet>) -> Result<TreeTopology> {
    let n = taxa.len();
    if tips.n_taxa() != n {
        return Err(Error::Dimension(format!("{} tip vectors for {} taxa", tips.n_taxa(), n)));
    }
    if n < 3 {
        return Err(Error::TaxaOutOfRange { n, reason: "trees need at least 3 taxa" });
    }
    if interior.nrows() != n - 2 {
        return Err(Error::NotAnEmbedding(format!("{} interior features for {} taxa", interior.nrows(), n)));
    }
    // Coefficients of interior features over the original tips.
    let coef = convex_coefficients(interior, tips)?;
    // Node ids of the rebuilt tree: taxon t -> t, interior row i -> n + i.
    let mut tip_ids: Vec<usize> = (0..n).collect();
    let mut tip_basis: Vec<Vec<f64>> = (0..n).map(|t| (0..n).map(|k| if k == t { 1.0 } else { 0.0 }).collect()).collect();
    let mut remaining: Vec<usize> = (0..n - 2).collect();
    let mut edges = Vec::with_capacity(2 * n - 3);

    while tip_ids.len() > 3 {
        let k = tip_ids.len();
        let basis = DMatrix::from_fn(n, k, |r, c| tip_basis[c][r]);
        let gram = basis.transpose() * &basis;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::NotAnEmbedding("current tip features became linearly dependent".into()))?;
        // b[w] = coefficients of interior w over the current tips.
        let b: Vec<DVector<f64>> = remaining
            .iter()
            .map(|&w| {
                let a = DVector::from_iterator(n, coef.row(w).iter().copied());
                chol.solve(&(basis.transpose() * a))
            })
            .collect();
        let mut neighbor = Vec::with_capacity(k);
        for i in 0..k {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            let mut second = f64::NEG_INFINITY;
            for (j, bj) in b.iter().enumerate() {
                let v = bj[i];
                if v > best.0 {
                    second = best.0;
                    best = (v, j);
                } else if v > second {
                    second = v;
                }
            }
            if best.0 - second <= ARGMAX_TIE_TOLERANCE * best.0.abs() {
                return Err(Error::NotAnEmbedding(format!("ambiguous neighbor for tip node {}", tip_ids[i])));
            }
            neighbor.push(best.1);
        }
        let cherry = (0..k).find_map(|i| ((i + 1)..k).find(|&j| neighbor[j] == neighbor[i]).map(|j| (i, j)));
        let (i, j) = cherry.ok_or_else(|| Error::NotAnEmbedding("no cherry found".into()))?;
        let slot = neighbor[i];
        let w = remaining[slot];
        let w_id = n + w;
        edges.push((tip_ids[i], w_id));
        edges.push((tip_ids[j], w_id));
        // j > i: remove j first.
        tip_ids.remove(j);
        tip_basis.remove(j);
        tip_ids[i] = w_id;
        tip_basis[i] = coef.row(w).to_vec();
        remaining.remove(slot);
    }
    let center = n + remaining[0];
    for &t in &tip_ids {
        edges.push((t, center));
    }
    let taxon_of = (0..2 * n - 2).map(|u| (u < n).then_some(u)).collect();
    TreeTopology::new(taxa, taxon_of, edges, false, center)
}
