//! Tree topologies over a fixed taxon set.
//!
//! A [`TreeTopology`] is an immutable arena of nodes. Leaves carry a taxon
//! index; interior nodes carry none. Every tree has a designated interior
//! `root` (the real root for rooted trees, an arbitrary fixed interior node
//! for unrooted ones) from which the cached [`TraversalOrder`] is derived.
//! Branch lengths never live inside the topology: they are a separate
//! [`BranchLengths`] vector indexed by edge id.

mod enumerate;
mod newick;
mod split;

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::{Error, Result};

pub use enumerate::{enumerate_unrooted, for_each_unrooted, MAX_ENUMERATION_TAXA};
pub use newick::{parse_newick, parse_newick_with_lengths, serialize_newick, serialize_newick_with_lengths};
pub(crate) use split::subtree_clades;
pub use split::{split_set, splits_of, Clade, Split, MAX_CLADE_TAXA};

const NEWICK_METACHARS: &[char] = &['(', ')', ',', ':', ';'];

/// Ordered set of unique taxon names with a name ↔ index bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxaSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TaxaSet {
    /// Builds a taxon set preserving the given order.
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::InvalidTaxa("empty taxon name".into()));
            }
            if name.contains(NEWICK_METACHARS) || name.trim() != name {
                return Err(Error::InvalidTaxa(format!("taxon name `{name}` contains newick metacharacters or padding")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::DuplicateTaxon(name.clone()));
            }
        }
        Ok(Self { names, index })
    }

    /// Builds a taxon set with names sorted lexicographically.
    pub fn sorted<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        names.sort();
        Self::new(names)
    }

    /// `t0, t1, ...` zero-padded so that lexicographic and numeric order agree.
    pub fn numbered(n: usize) -> Self {
        let width = n.saturating_sub(1).to_string().len();
        Self::new((0..n).map(|i| format!("t{i:0width$}"))).expect("generated names are valid")
    }

    /// Single capital letters `A, B, C, ...` (at most 26 taxa).
    pub fn letters(n: usize) -> Self {
        assert!(n <= 26, "at most 26 letter taxa");
        Self::new((0..n).map(|i| ((b'A' + i as u8) as char).to_string())).expect("letters are valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

/// Non-negative branch lengths indexed by edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchLengths(pub Vec<f64>);

impl BranchLengths {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        let bl = Self(q);
        bl.validate()?;
        Ok(bl)
    }

    pub fn constant(n_edges: usize, value: f64) -> Self {
        Self(vec![value; n_edges])
    }

    pub fn validate(&self) -> Result<()> {
        for (edge, &value) in self.0.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidBranchLength { edge, value });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for BranchLengths {
    type Output = f64;
    fn index(&self, e: usize) -> &f64 {
        &self.0[e]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    /// `(neighbor node id, edge id)` pairs.
    neighbors: Vec<(usize, usize)>,
    taxon: Option<usize>,
}

impl Node {
    pub fn neighbors(&self) -> &[(usize, usize)] {
        &self.neighbors
    }

    pub fn taxon(&self) -> Option<usize> {
        self.taxon
    }

    pub fn degree(&self) -> usize {
        self.neighbors.len()
    }
}

/// Postorder/preorder sequences and parent links relative to a chosen root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraversalOrder {
    pub root: usize,
    pub postorder: Vec<usize>,
    pub preorder: Vec<usize>,
    pub parent: Vec<Option<usize>>,
    /// Edge connecting a node to its parent.
    pub parent_edge: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct TreeTopology {
    taxa: Arc<TaxaSet>,
    nodes: Vec<Node>,
    edges: Vec<(usize, usize)>,
    rooted: bool,
    root: usize,
    leaf_of_taxon: Vec<usize>,
    order: TraversalOrder,
}

/// How strictly [`TreeTopology::build`] checks node degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Bifurcating,
    General,
}

impl TreeTopology {
    /// Builds a bifurcating tree from an edge list.
    ///
    /// `taxon_of[u]` is the taxon carried by node `u` (leaves only). For
    /// rooted trees `root` must have degree 2; for unrooted trees it is any
    /// interior node.
    pub fn new(
        taxa: Arc<TaxaSet>,
        taxon_of: Vec<Option<usize>>,
        edges: Vec<(usize, usize)>,
        rooted: bool,
        root: usize,
    ) -> Result<Self> {
        Self::build(taxa, taxon_of, edges, rooted, root, Shape::Bifurcating)
    }

    /// Builds an arbitrary tree-shaped graph (interior degrees ≥ 2) with taxa on
    /// the leaves. Only the embedding solver accepts such trees.
    pub fn new_general(taxa: Arc<TaxaSet>, taxon_of: Vec<Option<usize>>, edges: Vec<(usize, usize)>, root: usize) -> Result<Self> {
        Self::build(taxa, taxon_of, edges, false, root, Shape::General)
    }

    fn build(
        taxa: Arc<TaxaSet>,
        taxon_of: Vec<Option<usize>>,
        edges: Vec<(usize, usize)>,
        rooted: bool,
        root: usize,
        shape: Shape,
    ) -> Result<Self> {
        let n_nodes = taxon_of.len();
        let n_taxa = taxa.len();
        let min_taxa = if shape == Shape::Bifurcating { 3 } else { 2 };
        if n_taxa < min_taxa {
            return Err(Error::TaxaOutOfRange { n: n_taxa, reason: "trees need at least 3 taxa" });
        }
        if edges.len() + 1 != n_nodes {
            return Err(Error::InvalidTree(format!("{} nodes but {} edges", n_nodes, edges.len())));
        }
        let mut nodes: Vec<Node> = taxon_of.iter().map(|&taxon| Node { neighbors: Vec::with_capacity(3), taxon }).collect();
        for (e, &(a, b)) in edges.iter().enumerate() {
            if a >= n_nodes || b >= n_nodes || a == b {
                return Err(Error::InvalidTree(format!("bad edge ({a}, {b})")));
            }
            nodes[a].neighbors.push((b, e));
            nodes[b].neighbors.push((a, e));
        }
        if root >= n_nodes {
            return Err(Error::InvalidTree(format!("root {root} out of range")));
        }
        let mut leaf_of_taxon = vec![usize::MAX; n_taxa];
        for (u, node) in nodes.iter().enumerate() {
            let deg = node.degree();
            match node.taxon {
                Some(t) => {
                    if deg != 1 {
                        return Err(Error::InvalidTree(format!("leaf {u} has degree {deg}")));
                    }
                    if t >= n_taxa {
                        return Err(Error::InvalidTree(format!("taxon index {t} out of range")));
                    }
                    if leaf_of_taxon[t] != usize::MAX {
                        return Err(Error::DuplicateTaxon(taxa.name(t).to_string()));
                    }
                    leaf_of_taxon[t] = u;
                }
                None => {
                    let ok = match shape {
                        Shape::General => deg >= 2,
                        Shape::Bifurcating if rooted && u == root => deg == 2,
                        Shape::Bifurcating => deg == 3,
                    };
                    if !ok {
                        return Err(Error::NotBifurcating(format!("interior node {u} has degree {deg}")));
                    }
                }
            }
        }
        if let Some(t) = leaf_of_taxon.iter().position(|&u| u == usize::MAX) {
            return Err(Error::InvalidTree(format!("taxon `{}` missing from tree", taxa.name(t))));
        }
        if nodes[root].taxon.is_some() {
            return Err(Error::InvalidTree("root must be an interior node".into()));
        }
        let order = compute_traversal(&nodes, root);
        if order.postorder.len() != n_nodes {
            return Err(Error::InvalidTree("graph is not connected".into()));
        }
        Ok(Self { taxa, nodes, edges, rooted, root, leaf_of_taxon, order })
    }

    pub fn taxa(&self) -> &Arc<TaxaSet> {
        &self.taxa
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, u: usize) -> &Node {
        &self.nodes[u]
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, usize)] {
        &self.nodes[u].neighbors
    }

    pub fn degree(&self, u: usize) -> usize {
        self.nodes[u].degree()
    }

    pub fn is_leaf(&self, u: usize) -> bool {
        self.nodes[u].taxon.is_some()
    }

    pub fn taxon(&self, u: usize) -> Option<usize> {
        self.nodes[u].taxon
    }

    /// Node id of the leaf carrying taxon `t`.
    pub fn leaf_of(&self, t: usize) -> usize {
        self.leaf_of_taxon[t]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn is_rooted(&self) -> bool {
        self.rooted
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Traversal from the designated root, computed at construction.
    pub fn order(&self) -> &TraversalOrder {
        &self.order
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&u| self.nodes[u].taxon.is_none())
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&u| self.nodes[u].taxon.is_some())
    }

    /// Children of `u` relative to the designated root.
    pub fn children(&self, u: usize) -> impl Iterator<Item = usize> + '_ {
        let parent = self.order.parent[u];
        self.nodes[u].neighbors.iter().map(|&(v, _)| v).filter(move |&v| Some(v) != parent)
    }

    /// Per-node taxon assignment, as accepted by [`TreeTopology::new`].
    pub fn taxon_assignment(&self) -> Vec<Option<usize>> {
        self.nodes.iter().map(|n| n.taxon).collect()
    }

    /// Isomorphic copy with node `u` renamed to `perm[u]`. Edge ids are kept.
    pub fn relabeled(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(Error::Dimension(format!("permutation of length {} for {} nodes", perm.len(), n)));
        }
        let mut taxon_of = vec![None; n];
        let mut seen = vec![false; n];
        for (u, &p) in perm.iter().enumerate() {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidTree("not a permutation".into()));
            }
            taxon_of[p] = self.nodes[u].taxon;
        }
        let edges = self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let shape = if self.is_bifurcating() { Shape::Bifurcating } else { Shape::General };
        Self::build(self.taxa.clone(), taxon_of, edges, self.rooted, perm[self.root], shape)
    }

    fn is_bifurcating(&self) -> bool {
        self.interior_nodes().all(|u| {
            let d = self.degree(u);
            d == 3 || (self.rooted && u == self.root && d == 2)
        })
    }

    /// Unrooted version of a rooted tree: the root's two edges are fused.
    ///
    /// Returns the new tree and, for every old edge id, the new edge id it maps
    /// to (both root edges map to the fused edge). Unrooted trees are returned
    /// unchanged with the identity map.
    pub fn unrooted_with_map(&self) -> Result<(Self, Vec<usize>)> {
        if !self.rooted {
            return Ok((self.clone(), (0..self.n_edges()).collect()));
        }
        let r = self.root;
        let [(a, ea), (b, eb)] = [self.nodes[r].neighbors[0], self.nodes[r].neighbors[1]];
        // Drop node r, renumber the ones above it.
        let remap = |u: usize| if u > r { u - 1 } else { u };
        let mut taxon_of = self.taxon_assignment();
        taxon_of.remove(r);
        let mut edges = Vec::with_capacity(self.n_edges() - 1);
        let mut edge_map = vec![0; self.n_edges()];
        let fused = ea.min(eb);
        for (e, &(x, y)) in self.edges.iter().enumerate() {
            if e == eb.max(ea) {
                continue;
            }
            edge_map[e] = edges.len();
            if e == fused {
                edges.push((remap(a), remap(b)));
            } else {
                edges.push((remap(x), remap(y)));
            }
        }
        edge_map[ea.max(eb)] = edge_map[fused];
        let new_root = if self.nodes[a].taxon.is_none() { remap(a) } else { remap(b) };
        let tree = Self::new(self.taxa.clone(), taxon_of, edges, false, new_root)?;
        Ok((tree, edge_map))
    }

    pub fn to_unrooted(&self) -> Result<Self> {
        Ok(self.unrooted_with_map()?.0)
    }

    /// Traversal from an arbitrary interior node.
    pub fn traversal(&self, root: usize) -> Result<TraversalOrder> {
        if root >= self.n_nodes() {
            return Err(Error::InvalidTree(format!("root {root} absent")));
        }
        if self.is_leaf(root) {
            return Err(Error::InvalidTree(format!("root {root} is a leaf")));
        }
        Ok(compute_traversal(&self.nodes, root))
    }
}

fn compute_traversal(nodes: &[Node], root: usize) -> TraversalOrder {
    let n = nodes.len();
    let mut parent = vec![None; n];
    let mut parent_edge = vec![None; n];
    let mut preorder = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    let mut stack = vec![root];
    visited[root] = true;
    while let Some(u) = stack.pop() {
        preorder.push(u);
        // Reverse so that the first neighbor is visited first.
        for &(v, e) in nodes[u].neighbors.iter().rev() {
            if !visited[v] {
                visited[v] = true;
                parent[v] = Some(u);
                parent_edge[v] = Some(e);
                stack.push(v);
            }
        }
    }
    // Reversed preorder visits every child before its parent.
    let postorder = postorder_from(nodes, root, &parent);
    TraversalOrder { root, postorder, preorder, parent, parent_edge }
}

fn postorder_from(nodes: &[Node], root: usize, parent: &[Option<usize>]) -> Vec<usize> {
    let mut out = Vec::with_capacity(nodes.len());
    let mut stack = vec![(root, 0usize)];
    while let Some((u, i)) = stack.pop() {
        let nb = &nodes[u].neighbors;
        let mut j = i;
        while j < nb.len() && Some(nb[j].0) == parent[u] {
            j += 1;
        }
        if j < nb.len() {
            stack.push((u, j + 1));
            stack.push((nb[j].0, 0));
        } else {
            out.push(u);
        }
    }
    out
}

/// Uniformly random unrooted bifurcating topology by random stepwise insertion.
pub fn random_unrooted<R: Rng + ?Sized>(taxa: Arc<TaxaSet>, rng: &mut R) -> Result<TreeTopology> {
    let n = taxa.len();
    if n < 3 {
        return Err(Error::TaxaOutOfRange { n, reason: "trees need at least 3 taxa" });
    }
    // Leaves are nodes 0..n (taxon = id); interior nodes are n.. in creation order.
    let center = n;
    let mut edges = vec![(0, center), (1, center), (2, center)];
    for k in 3..n {
        let e = rng.random_range(0..edges.len());
        let w = n + k - 2;
        let (a, b) = edges[e];
        edges[e] = (a, w);
        edges.push((w, b));
        edges.push((w, k));
    }
    let taxon_of = (0..2 * n - 2).map(|u| (u < n).then_some(u)).collect();
    TreeTopology::new(taxa, taxon_of, edges, false, center)
}

/// Random relabeling of node ids, keeping the topology.
pub fn random_relabel<R: Rng + ?Sized>(tree: &TreeTopology, rng: &mut R) -> TreeTopology {
    let mut perm: Vec<usize> = (0..tree.n_nodes()).collect();
    for i in (1..perm.len()).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    tree.relabeled(&perm).expect("a permutation of a valid tree is valid")
}

/// Picks a random interior node (useful for re-rooting tests).
pub fn random_interior<R: Rng + ?Sized>(tree: &TreeTopology, rng: &mut R) -> usize {
    let interior: Vec<usize> = tree.interior_nodes().collect();
    *interior.choose(rng).expect("trees have interior nodes")
}
