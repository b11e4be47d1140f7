//! Newick reading and canonical writing.

use std::fmt::Write;
use std::sync::Arc;

use super::{BranchLengths, TaxaSet, TreeTopology};
use crate::{Error, Result};

struct RawNode {
    children: Vec<usize>,
    label: Option<String>,
    length: Option<f64>,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    nodes: Vec<RawNode>,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::NewickSyntax { pos: self.pos, msg: msg.into() })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn label(&mut self) -> Option<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && !b"(),:;".contains(&self.src[self.pos]) {
            self.pos += 1;
        }
        let text = String::from_utf8_lossy(&self.src[start..self.pos]).trim().to_string();
        (!text.is_empty()).then_some(text)
    }

    fn length(&mut self) -> Result<Option<f64>> {
        if self.peek() != Some(b':') {
            return Ok(None);
        }
        self.pos += 1;
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && !b"(),:;".contains(&self.src[self.pos]) && !self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) => Ok(Some(v)),
            Err(_) => {
                self.pos = start;
                self.err(format!("invalid branch length `{text}`"))
            }
        }
    }

    fn subtree(&mut self) -> Result<usize> {
        let id = self.nodes.len();
        self.nodes.push(RawNode { children: Vec::new(), label: None, length: None });
        if self.peek() == Some(b'(') {
            self.pos += 1;
            loop {
                let child = self.subtree()?;
                self.nodes[id].children.push(child);
                match self.peek() {
                    Some(b',') => self.pos += 1,
                    Some(b')') => {
                        self.pos += 1;
                        break;
                    }
                    Some(c) => return self.err(format!("expected `,` or `)`, found `{}`", c as char)),
                    None => return self.err("unexpected end of input"),
                }
            }
            // Interior labels (e.g. support values) are accepted and dropped.
            let _ = self.label();
        } else {
            match self.label() {
                Some(l) => self.nodes[id].label = Some(l),
                None => return self.err("expected a taxon label or `(`"),
            }
        }
        self.nodes[id].length = self.length()?;
        Ok(id)
    }
}

/// Parses a semicolon-terminated Newick string.
///
/// A top-level node with two children yields a rooted tree; three children
/// yield an unrooted tree rooted (for traversal purposes) at that node. Any
/// other arity is rejected. Branch lengths are ignored; see
/// [`parse_newick_with_lengths`].
pub fn parse_newick(text: &str, taxa: Option<Arc<TaxaSet>>) -> Result<TreeTopology> {
    Ok(parse_newick_with_lengths(text, taxa)?.0)
}

/// Like [`parse_newick`], also returning branch lengths when every edge has one.
pub fn parse_newick_with_lengths(text: &str, taxa: Option<Arc<TaxaSet>>) -> Result<(TreeTopology, Option<BranchLengths>)> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, nodes: Vec::new() };
    let top = p.subtree()?;
    if p.peek() != Some(b';') {
        return p.err("expected `;`");
    }
    p.pos += 1;
    if p.peek().is_some() {
        return p.err("trailing characters after `;`");
    }
    let nodes = p.nodes;
    match nodes[top].children.len() {
        0 => return Err(Error::InvalidTree("a single label is not a tree".into())),
        2 | 3 => {}
        k => return Err(Error::NotBifurcating(format!("top-level node has {k} children"))),
    }
    for (i, n) in nodes.iter().enumerate() {
        if i != top && !n.children.is_empty() && n.children.len() != 2 {
            return Err(Error::NotBifurcating(format!("interior node with {} children", n.children.len())));
        }
    }
    let labels: Vec<&str> = nodes.iter().filter_map(|n| n.label.as_deref()).collect();
    let taxa = match taxa {
        Some(t) => t,
        None => Arc::new(TaxaSet::sorted(labels.iter().copied())?),
    };
    let mut taxon_of = Vec::with_capacity(nodes.len());
    let mut seen = vec![false; taxa.len()];
    for n in &nodes {
        match &n.label {
            Some(l) if n.children.is_empty() => {
                let t = taxa.index_of(l).ok_or_else(|| Error::UnknownTaxon(l.clone()))?;
                if std::mem::replace(&mut seen[t], true) {
                    return Err(Error::DuplicateTaxon(l.clone()));
                }
                taxon_of.push(Some(t));
            }
            _ => taxon_of.push(None),
        }
    }
    let mut edges = Vec::with_capacity(nodes.len() - 1);
    let mut lengths = Vec::with_capacity(nodes.len() - 1);
    for (u, n) in nodes.iter().enumerate() {
        for &c in &n.children {
            edges.push((c, u));
            lengths.push(nodes[c].length);
        }
    }
    let rooted = nodes[top].children.len() == 2;
    let tree = TreeTopology::new(taxa, taxon_of, edges, rooted, top)?;
    let lengths = lengths.into_iter().collect::<Option<Vec<f64>>>().map(BranchLengths::new).transpose()?;
    Ok((tree, lengths))
}

/// Canonical Newick string: rooted trees are written from their root,
/// unrooted trees from the interior neighbor of taxon 0, with children
/// ordered by the smallest taxon index in their subtree.
pub fn serialize_newick(tree: &TreeTopology) -> String {
    write_newick(tree, None)
}

pub fn serialize_newick_with_lengths(tree: &TreeTopology, q: &BranchLengths) -> String {
    write_newick(tree, Some(q))
}

fn write_newick(tree: &TreeTopology, q: Option<&BranchLengths>) -> String {
    let start = if tree.is_rooted() { tree.root() } else { tree.neighbors(tree.leaf_of(0))[0].0 };
    let ord = if start == tree.root() { tree.order().clone() } else { tree.traversal(start).expect("start is interior") };
    let mut min_taxon = vec![usize::MAX; tree.n_nodes()];
    for &u in &ord.postorder {
        min_taxon[u] = match tree.taxon(u) {
            Some(t) => t,
            None => tree.neighbors(u).iter().filter(|&&(v, _)| Some(v) != ord.parent[u]).map(|&(v, _)| min_taxon[v]).min().unwrap(),
        };
    }
    let mut out = String::new();
    // Explicit stack: (node, entering?)
    enum Step {
        Enter(usize),
        Sep,
        Close(usize),
    }
    let mut stack = vec![Step::Enter(start)];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(u) => {
                if let Some(t) = tree.taxon(u) {
                    out.push_str(tree.taxa().name(t));
                    push_length(&mut out, u, &ord, q);
                } else {
                    let mut kids: Vec<usize> =
                        tree.neighbors(u).iter().map(|&(v, _)| v).filter(|&v| Some(v) != ord.parent[u]).collect();
                    kids.sort_by_key(|&v| min_taxon[v]);
                    out.push('(');
                    stack.push(Step::Close(u));
                    for (i, &v) in kids.iter().enumerate().rev() {
                        stack.push(Step::Enter(v));
                        if i > 0 {
                            stack.push(Step::Sep);
                        }
                    }
                }
            }
            Step::Sep => out.push(','),
            Step::Close(u) => {
                out.push(')');
                push_length(&mut out, u, &ord, q);
            }
        }
    }
    out.push(';');
    out
}

fn push_length(out: &mut String, u: usize, ord: &super::TraversalOrder, q: Option<&BranchLengths>) {
    if let (Some(q), Some(e)) = (q, ord.parent_edge[u]) {
        let _ = write!(out, ":{}", q[e]);
    }
}
