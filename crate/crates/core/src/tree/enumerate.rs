use std::sync::Arc;

use super::{TaxaSet, TreeTopology};
use crate::{Error, Result};

/// Enumeration is refused beyond this many taxa ((2·10−5)!! ≈ 2·10⁶ trees).
pub const MAX_ENUMERATION_TAXA: usize = 10;

/// Visits every unrooted bifurcating topology on `n` taxa exactly once, as an
/// edge list over nodes `0..n` (leaf `i` carries taxon `i`) and interior
/// nodes `n..2n-2` (node `n` is the initial star center).
///
/// Trees are produced by stepwise insertion of taxon `k` into every edge of
/// each `k`-taxon tree, depth first, so the visiting order is fixed.
pub fn for_each_unrooted<F: FnMut(&[(usize, usize)])>(n: usize, mut f: F) -> Result<()> {
    if !(3..=MAX_ENUMERATION_TAXA).contains(&n) {
        return Err(Error::TaxaOutOfRange { n, reason: "enumeration supports 3..=10 taxa" });
    }
    let mut edges = Vec::with_capacity(2 * n - 3);
    edges.extend([(0, n), (1, n), (2, n)]);
    insert_from(&mut edges, 3, n, &mut f);
    Ok(())
}

fn insert_from<F: FnMut(&[(usize, usize)])>(edges: &mut Vec<(usize, usize)>, k: usize, n: usize, f: &mut F) {
    if k == n {
        f(edges);
        return;
    }
    let w = n + k - 2;
    for e in 0..edges.len() {
        let (a, b) = edges[e];
        edges[e] = (a, w);
        edges.push((w, b));
        edges.push((w, k));
        insert_from(edges, k + 1, n, f);
        edges.pop();
        edges.pop();
        edges[e] = (a, b);
    }
}

/// All unrooted bifurcating topologies on `taxa`, in the fixed insertion order.
pub fn enumerate_unrooted(taxa: Arc<TaxaSet>) -> Result<Vec<TreeTopology>> {
    let n = taxa.len();
    let taxon_of: Vec<Option<usize>> = (0..2 * n - 2).map(|u| (u < n).then_some(u)).collect();
    let mut out = Vec::new();
    let mut err = None;
    for_each_unrooted(n, |edges| {
        if err.is_some() {
            return;
        }
        match TreeTopology::new(taxa.clone(), taxon_of.clone(), edges.to_vec(), false, n) {
            Ok(t) => out.push(t),
            Err(e) => err = Some(e),
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
