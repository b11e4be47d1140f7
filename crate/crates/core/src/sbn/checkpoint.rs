//! JSON persistence for SBN supports and parameters.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{SbnModel, SbnSupport, Subsplit};
use crate::tree::{Clade, Split, TaxaSet};
use crate::{Error, Result};

type HexPair = (String, String);

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ParentEntry {
    pub clade: String,
    pub sibling: String,
    pub children: Vec<HexPair>,
    pub phi: Vec<f64>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct PspEntry {
    pub clade: String,
    pub sibling: String,
    pub child: HexPair,
}

/// Serialized form of an [`SbnModel`]; clades are hex bitmasks over taxon indices.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct SbnCheckpoint {
    pub taxa: Vec<String>,
    pub root_subsplits: Vec<HexPair>,
    pub root_phi: Vec<f64>,
    pub parents: Vec<ParentEntry>,
    pub splits: Vec<String>,
    pub psps: Vec<PspEntry>,
}

fn hex_pair(s: Subsplit) -> HexPair {
    (s.first.to_hex(), s.second.to_hex())
}

fn parse_pair(p: &HexPair) -> Result<Subsplit> {
    let (a, b) = (Clade::from_hex(&p.0)?, Clade::from_hex(&p.1)?);
    if a.is_empty() || b.is_empty() || a.intersects(b) {
        return Err(Error::Checkpoint(format!("invalid subsplit {}|{}", p.0, p.1)));
    }
    Ok(Subsplit::new(a, b))
}

impl SbnCheckpoint {
    pub fn from_model(model: &SbnModel) -> Self {
        let s = &model.support;
        let n_root = s.root_subsplits.len();
        Self {
            taxa: s.taxa.names().to_vec(),
            root_subsplits: s.root_subsplits.iter().map(|&r| hex_pair(r)).collect(),
            root_phi: model.phi[..n_root].to_vec(),
            parents: s
                .parents
                .iter()
                .enumerate()
                .map(|(p, k)| ParentEntry {
                    clade: k.clade.to_hex(),
                    sibling: k.sibling.to_hex(),
                    children: s.children[p].iter().map(|&c| hex_pair(c)).collect(),
                    phi: model.phi[s.offsets[p]..s.offsets[p] + s.children[p].len()].to_vec(),
                })
                .collect(),
            splits: s.splits.iter().map(|sp| sp.clade().to_hex()).collect(),
            psps: s
                .psps
                .iter()
                .map(|(k, c)| PspEntry { clade: k.clade.to_hex(), sibling: k.sibling.to_hex(), child: hex_pair(*c) })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<SbnModel> {
        let taxa = Arc::new(TaxaSet::new(self.taxa)?);
        let n = taxa.len();
        let full = Clade::full(n);
        let mut sup = SbnSupport::empty(taxa);
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if self.root_phi.len() != self.root_subsplits.len() {
            return Err(bad("root_phi length mismatch"));
        }
        let mut phi = self.root_phi;
        for r in &self.root_subsplits {
            let s = parse_pair(r)?;
            if s.clade() != full {
                return Err(bad("root subsplit does not cover all taxa"));
            }
            sup.add_root(s);
        }
        for entry in &self.parents {
            let key = super::ParentKey { clade: Clade::from_hex(&entry.clade)?, sibling: Clade::from_hex(&entry.sibling)? };
            if entry.phi.len() != entry.children.len() || entry.children.is_empty() {
                return Err(bad("parent entry phi/children mismatch"));
            }
            for c in &entry.children {
                let c = parse_pair(c)?;
                if c.clade() != key.clade {
                    return Err(bad("child subsplit does not partition its clade"));
                }
                sup.add_pair(key, c);
            }
            phi.extend_from_slice(&entry.phi);
        }
        for sp in &self.splits {
            let split = Split::new(Clade::from_hex(sp)?, n);
            sup.split_index.insert(split, sup.splits.len());
            sup.splits.push(split);
        }
        for p in &self.psps {
            let key = super::ParentKey { clade: Clade::from_hex(&p.clade)?, sibling: Clade::from_hex(&p.sibling)? };
            let psp = (key, parse_pair(&p.child)?);
            sup.psp_index.insert(psp, sup.psps.len());
            sup.psps.push(psp);
        }
        sup.finalize();
        if sup.n_params() != phi.len() {
            return Err(bad("duplicate entries in checkpoint"));
        }
        Ok(SbnModel { support: Arc::new(sup), phi })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
