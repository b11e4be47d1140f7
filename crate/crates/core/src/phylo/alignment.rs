use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tree::{BranchLengths, TaxaSet, TreeTopology};
use crate::{Error, Result};

/// Nucleotide codes are 4-bit masks of possible states (A, C, G, T).
pub const STATE_A: u8 = 1;
pub const STATE_C: u8 = 2;
pub const STATE_G: u8 = 4;
pub const STATE_T: u8 = 8;
pub const STATE_ANY: u8 = 15;

fn encode(c: u8) -> Option<u8> {
    Some(match c.to_ascii_uppercase() {
        b'A' => STATE_A,
        b'C' => STATE_C,
        b'G' => STATE_G,
        b'T' | b'U' => STATE_T,
        b'R' => STATE_A | STATE_G,
        b'Y' => STATE_C | STATE_T,
        b'S' => STATE_C | STATE_G,
        b'W' => STATE_A | STATE_T,
        b'K' => STATE_G | STATE_T,
        b'M' => STATE_A | STATE_C,
        b'B' => STATE_C | STATE_G | STATE_T,
        b'D' => STATE_A | STATE_G | STATE_T,
        b'H' => STATE_A | STATE_C | STATE_T,
        b'V' => STATE_A | STATE_C | STATE_G,
        b'N' | b'-' | b'?' | b'.' | b'X' => STATE_ANY,
        _ => return None,
    })
}

/// N×M character matrix with rows in taxon-index order, plus its
/// compressed site patterns.
#[derive(Debug, Clone)]
pub struct Alignment {
    taxa: Arc<TaxaSet>,
    rows: Vec<Vec<u8>>,
    /// Pattern-major: `patterns[p][taxon]`.
    patterns: Vec<Vec<u8>>,
    weights: Vec<f64>,
}

impl Alignment {
    /// `rows[t]` holds the state masks of taxon `t`.
    pub fn new(taxa: Arc<TaxaSet>, rows: Vec<Vec<u8>>) -> Result<Self> {
        if rows.len() != taxa.len() {
            return Err(Error::Fasta(format!("{} rows for {} taxa", rows.len(), taxa.len())));
        }
        let m = rows.first().map_or(0, Vec::len);
        if m == 0 {
            return Err(Error::Fasta("empty alignment".into()));
        }
        for (t, r) in rows.iter().enumerate() {
            if r.len() != m {
                return Err(Error::Fasta(format!("sequence `{}` has length {} (expected {m})", taxa.name(t), r.len())));
            }
            if r.iter().any(|&c| c == 0 || c > STATE_ANY) {
                return Err(Error::Fasta(format!("invalid state code in `{}`", taxa.name(t))));
            }
        }
        let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut patterns = Vec::new();
        let mut weights = Vec::new();
        for site in 0..m {
            let col: Vec<u8> = rows.iter().map(|r| r[site]).collect();
            match index.get(&col) {
                Some(&p) => weights[p] += 1.0,
                None => {
                    index.insert(col.clone(), patterns.len());
                    patterns.push(col);
                    weights.push(1.0);
                }
            }
        }
        Ok(Self { taxa, rows, patterns, weights })
    }

    pub fn taxa(&self) -> &Arc<TaxaSet> {
        &self.taxa
    }

    pub fn n_taxa(&self) -> usize {
        self.rows.len()
    }

    pub fn n_sites(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.rows[t]
    }

    pub fn patterns(&self) -> &[Vec<u8>] {
        &self.patterns
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same data with sites listed `k` times each.
    pub fn repeated(&self, k: usize) -> Self {
        let rows = self.rows.iter().map(|r| r.iter().copied().cycle().take(r.len() * k).collect()).collect();
        Self::new(self.taxa.clone(), rows).expect("repeating a valid alignment")
    }

    pub fn to_fasta(&self) -> String {
        let mut out = String::new();
        for (t, r) in self.rows.iter().enumerate() {
            out.push('>');
            out.push_str(self.taxa.name(t));
            out.push('\n');
            out.extend(r.iter().map(|&c| decode(c)));
            out.push('\n');
        }
        out
    }
}

fn decode(c: u8) -> char {
    match c {
        STATE_A => 'A',
        STATE_C => 'C',
        STATE_G => 'G',
        STATE_T => 'T',
        STATE_ANY => 'N',
        _ => "?ACMGRSVTWYHKDBN".as_bytes()[c as usize] as char,
    }
}

/// Parses FASTA; taxa are sorted by header, residues upper-cased, and IUPAC
/// ambiguity codes (including `N` and gaps) become sets of possible states.
pub fn parse_fasta(text: &str) -> Result<Alignment> {
    let mut records: Vec<(String, Vec<u8>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix('>') {
            let name = h.trim();
            if name.is_empty() {
                return Err(Error::Fasta(format!("empty header on line {}", lineno + 1)));
            }
            records.push((name.to_string(), Vec::new()));
        } else {
            let (_, seq) = records.last_mut().ok_or_else(|| Error::Fasta("sequence data before first header".into()))?;
            for c in line.bytes().filter(|c| !c.is_ascii_whitespace()) {
                let code = encode(c).ok_or_else(|| Error::Fasta(format!("invalid character `{}` on line {}", c as char, lineno + 1)))?;
                seq.push(code);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Fasta("no records".into()));
    }
    let taxa = Arc::new(TaxaSet::sorted(records.iter().map(|(n, _)| n.clone()))?);
    let mut rows = vec![Vec::new(); taxa.len()];
    for (name, seq) in records {
        rows[taxa.index_of(&name).expect("taxon just inserted")] = seq;
    }
    Alignment::new(taxa, rows)
}

/// Simulates `m` sites down `tree` under Jukes-Cantor.
pub fn simulate_alignment<R: Rng + ?Sized>(tree: &TreeTopology, q: &BranchLengths, m: usize, rng: &mut R) -> Result<Alignment> {
    q.validate()?;
    if q.len() != tree.n_edges() {
        return Err(Error::MissingBranchLength(q.len()));
    }
    let ord = tree.order();
    let unif = Uniform::new(0.0f64, 1.0).expect("valid range");
    let mut rows = vec![vec![0u8; m]; tree.n_taxa()];
    let mut state = vec![0usize; tree.n_nodes()];
    for site in 0..m {
        for &u in &ord.preorder {
            state[u] = match ord.parent_edge[u] {
                None => rng.random_range(0..4),
                Some(e) => {
                    let (same, _) = super::jc_probs(q[e]);
                    let parent_state = state[ord.parent[u].unwrap()];
                    if unif.sample(rng) < same {
                        parent_state
                    } else {
                        // Uniform over the three other states.
                        (parent_state + 1 + rng.random_range(0..3)) % 4
                    }
                }
            };
            if let Some(t) = tree.taxon(u) {
                rows[t][site] = 1 << state[u];
            }
        }
    }
    Alignment::new(tree.taxa().clone(), rows)
}
