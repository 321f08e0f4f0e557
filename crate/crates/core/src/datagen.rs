//! Planted-partition text-attributed graphs.
//!
//! Nodes are split into balanced communities. Edges follow a stochastic
//! block model with probabilities `p_in` within and `p_out` across
//! communities. Each token is drawn from the node's community vocabulary, or
//! from a shared pool with probability `shared_fraction`. Labels are
//! community ids.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub nodes: usize,
    pub communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub tokens_per_node: usize,
    pub vocab_per_community: usize,
    pub shared_vocab_size: usize,
    /// Probability that a token comes from the shared pool.
    pub shared_fraction: f64,
    /// Edge resamples allowed before giving up on a graph with an isolated
    /// node.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            nodes: 200,
            communities: 2,
            p_in: 0.1,
            p_out: 0.01,
            tokens_per_node: 12,
            vocab_per_community: 40,
            shared_vocab_size: 40,
            shared_fraction: 0.0,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.communities == 0 {
            return Err(Error::out_of_range("communities", self.communities, ">= 1"));
        }
        if self.nodes < 2 * self.communities {
            return Err(Error::out_of_range(
                "nodes",
                self.nodes,
                format!(">= 2 * communities = {}", 2 * self.communities),
            ));
        }
        for (name, p) in [
            ("p_in", self.p_in),
            ("p_out", self.p_out),
            ("shared_fraction", self.shared_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::out_of_range(name, p, "[0, 1]"));
            }
        }
        if self.tokens_per_node == 0 {
            return Err(Error::out_of_range("tokens_per_node", 0, ">= 1"));
        }
        if self.vocab_per_community == 0 && self.shared_fraction < 1.0 {
            return Err(Error::out_of_range("vocab_per_community", 0, ">= 1"));
        }
        if self.shared_vocab_size == 0 && self.shared_fraction > 0.0 {
            return Err(Error::out_of_range("shared_vocab_size", 0, ">= 1"));
        }
        Ok(())
    }

    /// Community of node `v`: contiguous blocks whose sizes differ by at
    /// most one.
    pub fn community(&self, v: usize) -> usize {
        v * self.communities / self.nodes
    }

    /// `key=value` lines for the metadata sidecar.
    pub fn to_meta(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "nodes={}", self.nodes);
        let _ = writeln!(out, "communities={}", self.communities);
        let _ = writeln!(out, "p_in={}", self.p_in);
        let _ = writeln!(out, "p_out={}", self.p_out);
        let _ = writeln!(out, "tokens_per_node={}", self.tokens_per_node);
        let _ = writeln!(out, "vocab_per_community={}", self.vocab_per_community);
        let _ = writeln!(out, "shared_vocab_size={}", self.shared_vocab_size);
        let _ = writeln!(out, "shared_fraction={}", self.shared_fraction);
        let _ = writeln!(out, "max_retries={}", self.max_retries);
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }
}

pub fn generate_planted_tag(cfg: &GenConfig) -> Result<TextAttributedGraph> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.nodes;

    let tokens: Vec<Vec<String>> = (0..n)
        .map(|v| {
            let c = cfg.community(v);
            (0..cfg.tokens_per_node)
                .map(|_| {
                    if rng.random_bool(cfg.shared_fraction) {
                        format!("s{}", rng.random_range(0..cfg.shared_vocab_size))
                    } else {
                        format!("c{c}w{}", rng.random_range(0..cfg.vocab_per_community))
                    }
                })
                .collect()
        })
        .collect();

    let mut attempt = 0;
    let edges = loop {
        let mut degree = vec![0usize; n];
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                let p = if cfg.community(u) == cfg.community(v) {
                    cfg.p_in
                } else {
                    cfg.p_out
                };
                if rng.random_bool(p) {
                    edges.push((u, v));
                    degree[u] += 1;
                    degree[v] += 1;
                }
            }
        }
        if degree.iter().all(|&d| d > 0) {
            break edges;
        }
        attempt += 1;
        if attempt > cfg.max_retries {
            return Err(Error::GenerationFailed(cfg.max_retries));
        }
    };

    TextAttributedGraph::new(
        (0..n).map(|v| format!("n{v}")).collect(),
        tokens,
        Some((0..n).map(|v| format!("c{}", cfg.community(v))).collect()),
        &edges,
    )
}

/// Path of the metadata sidecar written next to `graph_path`.
pub fn meta_path(graph_path: &Path) -> std::path::PathBuf {
    let mut name = graph_path.as_os_str().to_owned();
    name.push(".meta");
    name.into()
}

/// Writes the graph file and its `.meta` sidecar.
pub fn write_dataset(g: &TextAttributedGraph, cfg: &GenConfig, path: &Path) -> Result<()> {
    g.save(path)?;
    std::fs::write(meta_path(path), cfg.to_meta())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_matrices;
    use crate::spectral::{eigendecompose, hfc_kernel};

    #[test]
    fn extreme_block_model_gives_cliques() {
        let cfg = GenConfig {
            nodes: 10,
            p_in: 1.0,
            p_out: 0.0,
            ..Default::default()
        };
        let g = generate_planted_tag(&cfg).unwrap();
        assert_eq!(g.edge_count(), 2 * 10);
        let labels = g.labels().unwrap();
        for (u, v) in g.edges() {
            assert_eq!(labels[u], labels[v]);
        }
        assert_eq!(labels, &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn same_seed_same_file() {
        let cfg = GenConfig {
            seed: 9,
            shared_fraction: 0.3,
            ..Default::default()
        };
        let a = generate_planted_tag(&cfg).unwrap().to_tag_string();
        let b = generate_planted_tag(&cfg).unwrap().to_tag_string();
        assert_eq!(a, b);
        let other = generate_planted_tag(&GenConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a, other.to_tag_string());
    }

    #[test]
    fn labels_are_balanced() {
        for (n, c) in [(200, 2), (101, 3), (50, 7)] {
            let cfg = GenConfig {
                nodes: n,
                communities: c,
                p_in: 0.5,
                p_out: 0.1,
                ..Default::default()
            };
            let g = generate_planted_tag(&cfg).unwrap();
            let mut counts = vec![0usize; c];
            g.labels().unwrap().iter().for_each(|&l| counts[l] += 1);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }

    #[test]
    fn edge_densities_within_binomial_bounds() {
        for seed in 0..5 {
            let cfg = GenConfig {
                seed,
                p_in: 0.1,
                p_out: 0.03,
                ..Default::default()
            };
            let g = generate_planted_tag(&cfg).unwrap();
            let labels = g.labels().unwrap();
            let intra = g
                .edges()
                .iter()
                .filter(|&&(u, v)| labels[u] == labels[v])
                .count();
            let inter = g.edge_count() - intra;
            let pairs_in = 2 * (100 * 99 / 2);
            let pairs_out = 100 * 100;
            for (count, pairs, p) in [(intra, pairs_in, 0.1), (inter, pairs_out, 0.03)] {
                let mean = pairs as f64 * p;
                let sd = (pairs as f64 * p * (1.0 - p)).sqrt();
                assert!((count as f64 - mean).abs() <= 3.0 * sd, "{count} vs {mean}");
            }
        }
    }

    #[test]
    fn disjoint_vocabularies_without_shared_pool() {
        let g = generate_planted_tag(&GenConfig::default()).unwrap();
        let labels = g.labels().unwrap();
        for v in 0..g.node_count() {
            for &t in g.tokens(v) {
                assert!(g.vocab()[t].starts_with(&format!("c{}w", labels[v])));
            }
        }
    }

    #[test]
    fn validation_and_retry_limit() {
        let bad = GenConfig {
            communities: 0,
            ..Default::default()
        };
        assert!(matches!(
            generate_planted_tag(&bad),
            Err(Error::OutOfRange { .. })
        ));
        let sparse = GenConfig {
            p_in: 0.0,
            p_out: 0.0,
            max_retries: 3,
            ..Default::default()
        };
        assert!(matches!(
            generate_planted_tag(&sparse),
            Err(Error::GenerationFailed(3))
        ));
    }

    #[test]
    fn second_kernel_eigenvector_splits_communities() {
        for seed in 0..10 {
            let cfg = GenConfig {
                seed,
                ..Default::default()
            };
            let g = generate_planted_tag(&cfg).unwrap();
            let kernel = hfc_kernel(&build_matrices(&g), 0.5).unwrap();
            let d = eigendecompose(&kernel.kernel).unwrap();
            // Ascending order: the second largest is second from the end.
            let second = d.eigenvectors.column(g.node_count() - 2);
            let labels = g.labels().unwrap();
            let agree = (0..g.node_count())
                .filter(|&v| (second[v] > 0.0) == (labels[v] == 0))
                .count();
            let best = agree.max(g.node_count() - agree);
            assert!(
                best as f64 >= 0.95 * g.node_count() as f64,
                "seed {seed}: {best}"
            );
        }
    }
}
