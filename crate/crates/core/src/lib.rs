//! Hierarchical spectral contrastive learning for text-attributed graphs.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: the graph data model, file format and Laplacian matrices.
//! - [`spectral`]: eigendecomposition, graph Fourier analysis and the
//!   high-frequency-aware kernel with its low-rank factorization.
//! - [`ppr`]: personalized PageRank scores and context subgraphs.
//! - [`tape`] and [`encoder`]: a reverse-mode tape and the GNN-nested text
//!   encoder built on it.
//! - [`objectives`]: the spectral contrastive losses at token, node and
//!   subgraph granularity.
//! - [`trainer`]: batching, Adam, early stopping, gradient and factorization
//!   checks.
//! - [`eval`]: ranking metrics and the node-classification probe.
//! - [`datagen`]: planted-partition graphs with community vocabularies.
//! - [`config`] and [`experiment`]: key=value run configuration and the
//!   train/evaluate/sweep workflows used by the command-line tool.

pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod graph;
pub mod objectives;
pub mod ppr;
pub mod spectral;
pub mod tape;
pub mod trainer;
pub mod verify;

pub use error::{Error, ErrorKind, Result};
