//! Multivariate Brownian trait evolution on phylogenies with missing data.
//!
//! The observed-data likelihood is computed in one post-order pass over the
//! tree using pseudo-precision messages; a matching pre-order pass draws all
//! latent node values and missing cells jointly for Gibbs sampling.

pub mod augmentation;
pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod gibbs;
pub mod heritability;
mod kernel;
pub mod likelihood;
pub mod linalg;
pub mod oracle;
pub mod runner;
pub mod simulation;
pub mod traits;
pub mod tree;

pub use error::{Error, Result};
pub use likelihood::{log_likelihood, post_order, DiffusionModel, LinkKind, TipLink};
pub use traits::{read_trait_csv, read_trait_csv_file, TraitMatrix, Transform};
pub use tree::{parse_newick, Phylogeny};
