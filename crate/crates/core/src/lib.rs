//! Learnable topological features for phylogenetic inference.
//!
//! The crate is organized bottom-up:
//!
//! - [`tree`]: taxa, arena-based tree topologies, Newick I/O, enumeration and splits.
//! - [`embed`]: interior node embeddings minimizing the Dirichlet energy, plus
//!   topology reconstruction from those embeddings.
//! - [`phylo`]: alignments, the Jukes-Cantor model, pruning likelihood and prior.
//! - [`sbn`]: subsplit Bayesian networks over tree topologies.
//! - [`neural`]: a small reverse-mode tape, GNN convolutions, MLPs and Adam.
//! - [`ebm`]: energy-based tree probability estimation trained with NCE.
//! - [`vbpi`]: variational Bayesian phylogenetic inference.

pub mod ebm;
pub mod embed;
pub mod error;
pub mod math;
pub mod neural;
pub mod phylo;
pub mod sbn;
pub mod tree;
pub mod vbpi;

pub use error::{Error, Result};
