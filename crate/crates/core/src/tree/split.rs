use std::collections::BTreeSet;
use std::fmt;

use super::TreeTopology;
use crate::{Error, Result};

/// Largest taxon count representable by a [`Clade`] bitmask.
pub const MAX_CLADE_TAXA: usize = 128;

/// Subset of taxa as a fixed-width bitmask (bit `i` = taxon `i`).
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Clade(pub u128);

impl Clade {
    pub const EMPTY: Clade = Clade(0);

    pub fn singleton(i: usize) -> Self {
        Clade(1u128 << i)
    }

    pub fn full(n: usize) -> Self {
        if n == MAX_CLADE_TAXA {
            Clade(u128::MAX)
        } else {
            Clade((1u128 << n) - 1)
        }
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_singleton(self) -> bool {
        self.0.count_ones() == 1
    }

    pub fn union(self, other: Clade) -> Clade {
        Clade(self.0 | other.0)
    }

    pub fn intersects(self, other: Clade) -> bool {
        self.0 & other.0 != 0
    }

    pub fn is_subset_of(self, other: Clade) -> bool {
        self.0 & !other.0 == 0
    }

    /// Complement within the first `n` taxa.
    pub fn complement(self, n: usize) -> Clade {
        Clade(Clade::full(n).0 & !self.0)
    }

    pub fn min_taxon(self) -> Option<usize> {
        (self.0 != 0).then(|| self.0.trailing_zeros() as usize)
    }

    pub fn taxa(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let i = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(i)
            }
        })
    }

    pub fn to_hex(self) -> String {
        format!("{:x}", self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        u128::from_str_radix(s, 16).map(Clade).map_err(|e| Error::Checkpoint(format!("bad clade `{s}`: {e}")))
    }
}

impl fmt::Debug for Clade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Clade{{")?;
        for (k, t) in self.taxa().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "}}")
    }
}

/// Bipartition of the taxon set, stored as the side not containing taxon 0.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Split(Clade);

impl Split {
    /// Canonical split induced by `side` (either side of the bipartition).
    pub fn new(side: Clade, n: usize) -> Self {
        if side.contains(0) {
            Split(side.complement(n))
        } else {
            Split(side)
        }
    }

    /// The side without taxon 0.
    pub fn clade(self) -> Clade {
        self.0
    }

    pub fn is_trivial(self, n: usize) -> bool {
        let k = self.0.len();
        k == 1 || k == n - 1
    }
}

/// Per-node clades below each node relative to the tree's designated root.
pub(crate) fn subtree_clades(tree: &TreeTopology) -> Vec<Clade> {
    let mut clade = vec![Clade::EMPTY; tree.n_nodes()];
    for &u in &tree.order().postorder {
        clade[u] = match tree.taxon(u) {
            Some(t) => Clade::singleton(t),
            None => tree.children(u).fold(Clade::EMPTY, |acc, v| acc.union(clade[v])),
        };
    }
    clade
}

fn check_width(tree: &TreeTopology) -> Result<()> {
    if tree.n_taxa() > MAX_CLADE_TAXA {
        return Err(Error::TaxaOutOfRange { n: tree.n_taxa(), reason: "clade bitmasks hold at most 128 taxa" });
    }
    Ok(())
}

/// Split induced by each edge, indexed by edge id.
pub fn splits_of(tree: &TreeTopology) -> Result<Vec<Split>> {
    check_width(tree)?;
    let n = tree.n_taxa();
    let clade = subtree_clades(tree);
    let ord = tree.order();
    Ok(tree
        .edges()
        .iter()
        .map(|&(a, b)| {
            let child = if ord.parent[a] == Some(b) { a } else { b };
            Split::new(clade[child], n)
        })
        .collect())
}

/// The set of splits; identifies an unrooted topology.
pub fn split_set(tree: &TreeTopology) -> Result<BTreeSet<Split>> {
    Ok(splits_of(tree)?.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::parse_newick;

    #[test]
    fn star_has_only_trivial_splits() {
        let t = parse_newick("(A,B,C);", None).unwrap();
        let s = split_set(&t).unwrap();
        let expect: BTreeSet<_> = [Split::new(Clade::singleton(0), 3), Split::new(Clade::singleton(1), 3), Split::new(Clade::singleton(2), 3)]
            .into_iter()
            .collect();
        assert_eq!(s, expect);
        assert!(s.iter().all(|sp| sp.is_trivial(3)));
    }

    #[test]
    fn quartet_has_cd_split() {
        let t = parse_newick("((A,B),(C,D));", None).unwrap().to_unrooted().unwrap();
        let cd = Split::new(Clade::singleton(2).union(Clade::singleton(3)), 4);
        assert!(split_set(&t).unwrap().contains(&cd));
        assert_eq!(splits_of(&t).unwrap().len(), 5);
    }

    #[test]
    fn clade_ops() {
        let c = Clade::singleton(1).union(Clade::singleton(5));
        assert_eq!(c.taxa().collect::<Vec<_>>(), vec![1, 5]);
        assert_eq!(c.min_taxon(), Some(1));
        assert_eq!(c.complement(6).len(), 4);
        assert_eq!(Clade::from_hex(&c.to_hex()).unwrap(), c);
        assert_eq!(Clade::full(128).len(), 128);
    }
}
