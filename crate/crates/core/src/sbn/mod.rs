//! Subsplit Bayesian networks over tree topologies.
//!
//! Only the simplest SBN structure is supported: every clade with more than
//! one taxon is split by a subsplit drawn from a CPT conditioned on its
//! parent subsplit. Unrooted trees are scored by summing the rooted
//! probability over the `2N − 3` edge rootings.

mod checkpoint;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::math::logsumexp;
use crate::tree::{splits_of, Clade, Split, TaxaSet, TreeTopology, MAX_CLADE_TAXA};
use crate::{Error, Result};

pub use checkpoint::SbnCheckpoint;

/// Unordered pair of disjoint non-empty clades, stored with the smaller
/// bitmask first.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Subsplit {
    pub first: Clade,
    pub second: Clade,
}

impl Subsplit {
    pub fn new(x: Clade, y: Clade) -> Self {
        debug_assert!(!x.intersects(y) && !x.is_empty() && !y.is_empty());
        if x <= y {
            Subsplit { first: x, second: y }
        } else {
            Subsplit { first: y, second: x }
        }
    }

    /// The clade this subsplit partitions.
    pub fn clade(self) -> Clade {
        self.first.union(self.second)
    }
}

/// Conditioning context of a CPT: the clade being split and its sibling in
/// the parent subsplit.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ParentKey {
    pub clade: Clade,
    pub sibling: Clade,
}

impl ParentKey {
    pub fn parent_subsplit(self) -> Subsplit {
        Subsplit::new(self.clade, self.sibling)
    }
}

/// Primary subsplit pair: an edge's split (as a root subsplit) together with
/// the subsplit of one of its sides.
pub type Psp = (ParentKey, Subsplit);

/// One factor of a rooted decomposition: `None` marks the root subsplit.
pub type Factor = (Option<ParentKey>, Subsplit);

/// Directed clades: `clade(u | v)` is the set of taxa on `u`'s side of edge `uv`.
struct DirectedClades<'a> {
    tree: &'a TreeTopology,
    down: Vec<Clade>,
    n: usize,
}

impl<'a> DirectedClades<'a> {
    fn new(tree: &'a TreeTopology) -> Result<Self> {
        if tree.n_taxa() > MAX_CLADE_TAXA {
            return Err(Error::TaxaOutOfRange { n: tree.n_taxa(), reason: "SBNs hold at most 128 taxa" });
        }
        Ok(Self { tree, down: crate::tree::subtree_clades(tree), n: tree.n_taxa() })
    }

    fn get(&self, u: usize, v: usize) -> Clade {
        if self.tree.order().parent[u] == Some(v) {
            self.down[u]
        } else {
            self.down[v].complement(self.n)
        }
    }

    fn others(&self, u: usize, from: usize) -> (usize, usize) {
        let mut it = self.tree.neighbors(u).iter().map(|&(w, _)| w).filter(|&w| w != from);
        (it.next().expect("interior node"), it.next().expect("bifurcating node"))
    }

    /// Decomposition of the tree rooted on edge `(x, y)`.
    fn rooted_at(&self, x: usize, y: usize, out: &mut Vec<Factor>) {
        out.clear();
        let (cx, cy) = (self.get(x, y), self.get(y, x));
        out.push((None, Subsplit::new(cx, cy)));
        let mut stack = vec![(x, y, cy), (y, x, cx)];
        while let Some((u, from, sibling)) = stack.pop() {
            if self.tree.is_leaf(u) {
                continue;
            }
            let (w1, w2) = self.others(u, from);
            let (c1, c2) = (self.get(w1, u), self.get(w2, u));
            out.push((Some(ParentKey { clade: self.get(u, from), sibling }), Subsplit::new(c1, c2)));
            stack.push((w1, u, c2));
            stack.push((w2, u, c1));
        }
    }
}

fn check_unrooted(tree: &TreeTopology) -> Result<()> {
    if tree.is_rooted() {
        return Err(Error::InvalidTree("expected an unrooted tree".into()));
    }
    Ok(())
}

/// Subsplit decomposition of a rooted bifurcating tree, top-down.
pub fn rooted_decomposition(tree: &TreeTopology) -> Result<Vec<Factor>> {
    if !tree.is_rooted() {
        return Err(Error::InvalidTree("expected a rooted tree".into()));
    }
    let dc = DirectedClades::new(tree)?;
    let r = tree.root();
    let [(x, _), (y, _)] = [tree.neighbors(r)[0], tree.neighbors(r)[1]];
    let down = &dc.down;
    let mut out = vec![(None, Subsplit::new(down[x], down[y]))];
    for &u in &tree.order().preorder {
        if u == r || tree.is_leaf(u) {
            continue;
        }
        let p = tree.order().parent[u].expect("non-root");
        let sibling = tree.children(p).find(|&w| w != u).expect("bifurcating parent");
        let mut kids = tree.children(u);
        let (a, b) = (kids.next().unwrap(), kids.next().unwrap());
        out.push((Some(ParentKey { clade: down[u], sibling: down[sibling] }), Subsplit::new(down[a], down[b])));
    }
    Ok(out)
}

/// Inverse of [`rooted_decomposition`].
pub fn rebuild_rooted(factors: &[Factor], taxa: Arc<TaxaSet>) -> Result<TreeTopology> {
    let root = factors
        .iter()
        .find_map(|&(k, s)| k.is_none().then_some(s))
        .ok_or_else(|| Error::InvalidTree("decomposition has no root subsplit".into()))?;
    let by_key: HashMap<ParentKey, Subsplit> = factors.iter().filter_map(|&(k, s)| k.map(|k| (k, s))).collect();
    build_from(root, taxa, |key| by_key.get(&key).copied().ok_or(Error::InvalidTree("incomplete decomposition".into())), true)
}

/// Builds a tree from a root subsplit and a child-lookup function.
fn build_from<F>(root: Subsplit, taxa: Arc<TaxaSet>, mut child_of: F, rooted: bool) -> Result<TreeTopology>
where
    F: FnMut(ParentKey) -> Result<Subsplit>,
{
    let mut taxon_of = vec![None];
    let mut edges = Vec::new();
    let mut stack = vec![(root.first, root.second, 0usize), (root.second, root.first, 0usize)];
    while let Some((clade, sibling, parent)) = stack.pop() {
        let id = taxon_of.len();
        edges.push((id, parent));
        if clade.is_singleton() {
            taxon_of.push(clade.min_taxon());
        } else {
            taxon_of.push(None);
            let s = child_of(ParentKey { clade, sibling })?;
            stack.push((s.first, s.second, id));
            stack.push((s.second, s.first, id));
        }
    }
    let tree = TreeTopology::new(taxa, taxon_of, edges, true, 0)?;
    if rooted {
        Ok(tree)
    } else {
        tree.to_unrooted()
    }
}

/// CPT supports and the split/PSP index maps used for branch parameterization.
#[derive(Debug, Clone)]
pub struct SbnSupport {
    taxa: Arc<TaxaSet>,
    root_subsplits: Vec<Subsplit>,
    root_index: HashMap<Subsplit, usize>,
    parents: Vec<ParentKey>,
    parent_index: HashMap<ParentKey, usize>,
    /// Children of each parent, and the φ index of the first one.
    children: Vec<Vec<Subsplit>>,
    offsets: Vec<usize>,
    child_index: HashMap<(ParentKey, Subsplit), usize>,
    splits: Vec<Split>,
    split_index: HashMap<Split, usize>,
    psps: Vec<Psp>,
    psp_index: HashMap<Psp, usize>,
}

/// Per-edge lookup keys for split- and PSP-based branch parameterizations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeKeys {
    pub split: usize,
    pub psps: Vec<usize>,
}

impl SbnSupport {
    fn empty(taxa: Arc<TaxaSet>) -> Self {
        Self {
            taxa,
            root_subsplits: Vec::new(),
            root_index: HashMap::new(),
            parents: Vec::new(),
            parent_index: HashMap::new(),
            children: Vec::new(),
            offsets: Vec::new(),
            child_index: HashMap::new(),
            splits: Vec::new(),
            split_index: HashMap::new(),
            psps: Vec::new(),
            psp_index: HashMap::new(),
        }
    }

    pub fn taxa(&self) -> &Arc<TaxaSet> {
        &self.taxa
    }

    pub fn root_subsplits(&self) -> &[Subsplit] {
        &self.root_subsplits
    }

    pub fn parents(&self) -> &[ParentKey] {
        &self.parents
    }

    pub fn children_of(&self, parent: usize) -> &[Subsplit] {
        &self.children[parent]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn psps(&self) -> &[Psp] {
        &self.psps
    }

    /// Number of φ parameters: root subsplits then each parent's children.
    pub fn n_params(&self) -> usize {
        self.root_subsplits.len() + self.children.iter().map(Vec::len).sum::<usize>()
    }

    pub fn n_parent_child_pairs(&self) -> usize {
        self.child_index.len()
    }

    pub fn split_id(&self, s: &Split) -> Option<usize> {
        self.split_index.get(s).copied()
    }

    pub fn psp_id(&self, p: &Psp) -> Option<usize> {
        self.psp_index.get(p).copied()
    }

    fn add_root(&mut self, s: Subsplit) {
        if !self.root_index.contains_key(&s) {
            self.root_index.insert(s, self.root_subsplits.len());
            self.root_subsplits.push(s);
        }
    }

    fn add_pair(&mut self, key: ParentKey, child: Subsplit) {
        let p = *self.parent_index.entry(key).or_insert_with(|| {
            self.parents.push(key);
            self.children.push(Vec::new());
            self.parents.len() - 1
        });
        if !self.child_index.contains_key(&(key, child)) {
            self.child_index.insert((key, child), usize::MAX);
            self.children[p].push(child);
        }
    }

    fn finalize(&mut self) {
        let mut next = self.root_subsplits.len();
        self.offsets.clear();
        for (p, kids) in self.children.iter().enumerate() {
            self.offsets.push(next);
            for (j, &c) in kids.iter().enumerate() {
                self.child_index.insert((self.parents[p], c), next + j);
            }
            next += kids.len();
        }
    }

    /// φ index of a root subsplit or parent-child pair.
    fn phi_index(&self, f: &Factor) -> Option<usize> {
        match f.0 {
            None => self.root_index.get(&f.1).copied(),
            Some(k) => self.child_index.get(&(k, f.1)).copied(),
        }
    }

    /// φ index range of the CPT that `f` is drawn from.
    fn group_of(&self, f: &Factor) -> std::ops::Range<usize> {
        match f.0 {
            None => 0..self.root_subsplits.len(),
            Some(k) => {
                let p = self.parent_index[&k];
                self.offsets[p]..self.offsets[p] + self.children[p].len()
            }
        }
    }

    /// Split id and PSP ids of every edge (indexed by edge id).
    pub fn edge_keys(&self, tree: &TreeTopology) -> Result<Vec<EdgeKeys>> {
        let local = local_edge_keys(tree)?;
        local
            .into_iter()
            .map(|(split, psps)| {
                let split = self.split_id(&split).ok_or(Error::OutOfSupport)?;
                let psps = psps.iter().map(|p| self.psp_id(p).ok_or(Error::OutOfSupport)).collect::<Result<_>>()?;
                Ok(EdgeKeys { split, psps })
            })
            .collect()
    }
}

/// Split and PSPs of every edge of an unrooted tree.
fn local_edge_keys(tree: &TreeTopology) -> Result<Vec<(Split, Vec<Psp>)>> {
    let dc = DirectedClades::new(tree)?;
    let splits = splits_of(tree)?;
    Ok(tree
        .edges()
        .iter()
        .zip(splits)
        .map(|(&(x, y), split)| {
            let mut psps = Vec::with_capacity(2);
            for (u, v) in [(x, y), (y, x)] {
                if !tree.is_leaf(u) {
                    let (w1, w2) = dc.others(u, v);
                    let key = ParentKey { clade: dc.get(u, v), sibling: dc.get(v, u) };
                    psps.push((key, Subsplit::new(dc.get(w1, u), dc.get(w2, u))));
                }
            }
            (split, psps)
        })
        .collect())
}

/// All rooted decompositions of an unrooted tree, one per edge id.
pub fn rootings(tree: &TreeTopology) -> Result<Vec<Vec<Factor>>> {
    check_unrooted(tree)?;
    let dc = DirectedClades::new(tree)?;
    Ok(tree
        .edges()
        .iter()
        .map(|&(x, y)| {
            let mut f = Vec::with_capacity(tree.n_taxa());
            dc.rooted_at(x, y, &mut f);
            f
        })
        .collect())
}

/// Support covering every rooting of every tree in the sample.
pub fn build_support(trees: &[TreeTopology]) -> Result<SbnSupport> {
    let first = trees.first().ok_or_else(|| Error::Config("empty tree sample".into()))?;
    let mut sup = SbnSupport::empty(first.taxa().clone());
    for tree in trees {
        if tree.taxa().names() != sup.taxa.names() {
            return Err(Error::TaxaMismatch("tree sample uses different taxa".into()));
        }
        let tree = tree.to_unrooted()?;
        for factors in rootings(&tree)? {
            for &(k, s) in &factors {
                match k {
                    None => sup.add_root(s),
                    Some(k) => sup.add_pair(k, s),
                }
            }
        }
        for (split, psps) in local_edge_keys(&tree)? {
            if !sup.split_index.contains_key(&split) {
                sup.split_index.insert(split, sup.splits.len());
                sup.splits.push(split);
            }
            for p in psps {
                if !sup.psp_index.contains_key(&p) {
                    sup.psp_index.insert(p, sup.psps.len());
                    sup.psps.push(p);
                }
            }
        }
    }
    sup.finalize();
    Ok(sup)
}

/// SBN distribution: softmax CPTs over a support.
#[derive(Debug, Clone)]
pub struct SbnModel {
    pub support: Arc<SbnSupport>,
    pub phi: Vec<f64>,
}

impl SbnModel {
    /// All-zero φ, i.e. uniform CPTs.
    pub fn uniform(support: Arc<SbnSupport>) -> Self {
        let phi = vec![0.0; support.n_params()];
        Self { support, phi }
    }

    /// Log-softmax of φ within every CPT.
    pub fn log_cpts(&self) -> Vec<f64> {
        let s = &self.support;
        let mut out = self.phi.clone();
        let mut normalize = |r: std::ops::Range<usize>| {
            let z = logsumexp(&self.phi[r.clone()]);
            for i in r {
                out[i] -= z;
            }
        };
        normalize(0..s.root_subsplits.len());
        for p in 0..s.parents.len() {
            normalize(s.offsets[p]..s.offsets[p] + s.children[p].len());
        }
        out
    }

    fn rooting_log_probs(&self, tree: &TreeTopology, log_cpt: &[f64]) -> Result<(Vec<Vec<Factor>>, Vec<f64>)> {
        if tree.taxa().names() != self.support.taxa.names() {
            return Err(Error::TaxaMismatch("tree and SBN taxa differ".into()));
        }
        let roots = rootings(tree)?;
        let logs = roots
            .iter()
            .map(|factors| {
                factors
                    .iter()
                    .map(|f| self.support.phi_index(f).map_or(f64::NEG_INFINITY, |i| log_cpt[i]))
                    .sum::<f64>()
            })
            .collect();
        Ok((roots, logs))
    }

    /// `log Σ_{rootings} p(rooted tree)`; errors if no rooting lies in the support.
    pub fn log_prob_unrooted(&self, tree: &TreeTopology) -> Result<f64> {
        self.log_prob_with(tree, &self.log_cpts())
    }

    /// As [`Self::log_prob_unrooted`] with precomputed [`Self::log_cpts`].
    pub fn log_prob_with(&self, tree: &TreeTopology, log_cpt: &[f64]) -> Result<f64> {
        let (_, logs) = self.rooting_log_probs(tree, log_cpt)?;
        let lp = logsumexp(&logs);
        if lp == f64::NEG_INFINITY {
            return Err(Error::OutOfSupport);
        }
        Ok(lp)
    }

    /// Log-probability and its gradient over φ.
    pub fn log_prob_grad_phi(&self, tree: &TreeTopology) -> Result<(f64, Vec<f64>)> {
        let log_cpt = self.log_cpts();
        let (roots, logs) = self.rooting_log_probs(tree, &log_cpt)?;
        let lp = logsumexp(&logs);
        if lp == f64::NEG_INFINITY {
            return Err(Error::OutOfSupport);
        }
        let mut grad = vec![0.0; self.phi.len()];
        for (factors, &l) in roots.iter().zip(&logs) {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let weight = (l - lp).exp();
            for f in factors {
                let i = self.support.phi_index(f).expect("in-support rooting");
                grad[i] += weight;
                for j in self.support.group_of(f) {
                    grad[j] -= weight * log_cpt[j].exp();
                }
            }
        }
        Ok((lp, grad))
    }

    /// Ancestral sampling of an unrooted topology.
    pub fn sample_tree<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TreeTopology> {
        self.sample_tree_with(&self.log_cpts(), rng)
    }

    pub fn sample_tree_with<R: Rng + ?Sized>(&self, log_cpt: &[f64], rng: &mut R) -> Result<TreeTopology> {
        let s = &self.support;
        let draw = |range: std::ops::Range<usize>, rng: &mut R| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let last = range.end - 1;
            for i in range {
                acc += log_cpt[i].exp();
                if u < acc {
                    return i;
                }
            }
            last
        };
        let root = s.root_subsplits[draw(0..s.root_subsplits.len(), rng)];
        build_from(
            root,
            s.taxa.clone(),
            |key| {
                let p = *s.parent_index.get(&key).ok_or(Error::OutOfSupport)?;
                let i = draw(s.offsets[p]..s.offsets[p] + s.children[p].len(), rng);
                Ok(s.children[p][i - s.offsets[p]])
            },
            false,
        )
    }
}

#[cfg(test)]
mod tests;
