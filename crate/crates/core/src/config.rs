//! Run configuration: every tunable in one flat `key=value` file.
//!
//! One setting per line, `#` starts a comment, unknown or repeated keys are
//! errors. [`RunConfig::to_text`] writes every key, so a saved file fully
//! determines a run together with its seed.

use std::fmt::Write as _;
use std::path::Path;

use crate::datagen::GenConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{LinkEvalConfig, ProbeConfig, ProbeMode};
use crate::graph::TextAttributedGraph;
use crate::objectives::{SelectKeep, Term};
use crate::ppr::PprForm;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    /// Seeds generation, splits, initialization, sampling and probing.
    pub seed: u64,
    pub gen: GenConfig,
    pub dim: usize,
    pub layers: usize,
    pub max_seq_len: usize,
    pub train: TrainConfig,
    /// Fraction of training edges kept.
    pub train_fraction: f64,
    pub ndcg_cutoff: Option<usize>,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gen: GenConfig::default(),
            dim: 32,
            layers: 1,
            max_seq_len: 16,
            train: TrainConfig::default(),
            train_fraction: 1.0,
            ndcg_cutoff: None,
            probe_hidden: 32,
            probe_epochs: 200,
            probe_learning_rate: 1e-2,
        }
    }
}

/// Every key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "nodes",
    "communities",
    "p_in",
    "p_out",
    "tokens_per_node",
    "vocab_per_community",
    "shared_vocab_size",
    "shared_fraction",
    "gen_max_retries",
    "dim",
    "layers",
    "max_seq_len",
    "alpha",
    "lambda_tc",
    "lambda_nc",
    "lambda_sc",
    "lambda_tnc",
    "lambda_nsc",
    "select_ratio",
    "select_keep",
    "tau_epsilon",
    "mix_beta_min",
    "mix_beta_max",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "subgraph_k",
    "alpha_ppr",
    "ppr_form",
    "span_min",
    "span_max",
    "neighbor_cap",
    "train_fraction",
    "negatives_per_query",
    "ndcg_cutoff",
    "probe_hidden",
    "probe_epochs",
    "probe_learning_rate",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Sets `key` from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let l = &mut self.train.loss;
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "nodes" => self.gen.nodes = parse_num(key, v)?,
            "communities" => self.gen.communities = parse_num(key, v)?,
            "p_in" => self.gen.p_in = parse_num(key, v)?,
            "p_out" => self.gen.p_out = parse_num(key, v)?,
            "tokens_per_node" => self.gen.tokens_per_node = parse_num(key, v)?,
            "vocab_per_community" => self.gen.vocab_per_community = parse_num(key, v)?,
            "shared_vocab_size" => self.gen.shared_vocab_size = parse_num(key, v)?,
            "shared_fraction" => self.gen.shared_fraction = parse_num(key, v)?,
            "gen_max_retries" => self.gen.max_retries = parse_num(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "max_seq_len" => self.max_seq_len = parse_num(key, v)?,
            "alpha" => l.alpha = parse_num(key, v)?,
            "lambda_tc" => l.lambdas.tc = parse_num(key, v)?,
            "lambda_nc" => l.lambdas.nc = parse_num(key, v)?,
            "lambda_sc" => l.lambdas.sc = parse_num(key, v)?,
            "lambda_tnc" => l.lambdas.tnc = parse_num(key, v)?,
            "lambda_nsc" => l.lambdas.nsc = parse_num(key, v)?,
            "select_ratio" => l.select_ratio = parse_num(key, v)?,
            "select_keep" => {
                l.select_keep = match v {
                    "lowest" => SelectKeep::Lowest,
                    "highest" => SelectKeep::Highest,
                    _ => {
                        return Err(Error::Config(format!(
                            "select_keep must be lowest or highest, got `{v}`"
                        )))
                    }
                }
            }
            "tau_epsilon" => l.tau_epsilon = parse_num(key, v)?,
            "mix_beta_min" => l.mix_beta_range.0 = parse_num(key, v)?,
            "mix_beta_max" => l.mix_beta_range.1 = parse_num(key, v)?,
            "learning_rate" => self.train.learning_rate = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "max_epochs" | "epochs" => self.train.max_epochs = parse_num(key, v)?,
            "patience" => self.train.patience = parse_num(key, v)?,
            "subgraph_k" => self.train.subgraph_k = parse_num(key, v)?,
            "alpha_ppr" => self.train.alpha_ppr = parse_num(key, v)?,
            "ppr_form" => {
                self.train.ppr_form = match v {
                    "inverse" => PprForm::Inverse,
                    "literal" => PprForm::Literal,
                    _ => {
                        return Err(Error::Config(format!(
                            "ppr_form must be inverse or literal, got `{v}`"
                        )))
                    }
                }
            }
            "span_min" => self.train.span_length_range.0 = parse_num(key, v)?,
            "span_max" => self.train.span_length_range.1 = parse_num(key, v)?,
            "neighbor_cap" => self.train.neighbor_cap = parse_num(key, v)?,
            "train_fraction" => self.train_fraction = parse_num(key, v)?,
            "negatives_per_query" => self.train.negatives_per_query = parse_num(key, v)?,
            "ndcg_cutoff" => {
                self.ndcg_cutoff = match v {
                    "none" => None,
                    _ => Some(parse_num(key, v)?),
                }
            }
            "probe_hidden" => self.probe_hidden = parse_num(key, v)?,
            "probe_epochs" => self.probe_epochs = parse_num(key, v)?,
            "probe_learning_rate" => self.probe_learning_rate = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Text form of `key`.
    pub fn get(&self, key: &str) -> Result<String> {
        let l = &self.train.loss;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "nodes" => self.gen.nodes.to_string(),
            "communities" => self.gen.communities.to_string(),
            "p_in" => self.gen.p_in.to_string(),
            "p_out" => self.gen.p_out.to_string(),
            "tokens_per_node" => self.gen.tokens_per_node.to_string(),
            "vocab_per_community" => self.gen.vocab_per_community.to_string(),
            "shared_vocab_size" => self.gen.shared_vocab_size.to_string(),
            "shared_fraction" => self.gen.shared_fraction.to_string(),
            "gen_max_retries" => self.gen.max_retries.to_string(),
            "dim" => self.dim.to_string(),
            "layers" => self.layers.to_string(),
            "max_seq_len" => self.max_seq_len.to_string(),
            "alpha" => l.alpha.to_string(),
            "lambda_tc" => l.lambdas.tc.to_string(),
            "lambda_nc" => l.lambdas.nc.to_string(),
            "lambda_sc" => l.lambdas.sc.to_string(),
            "lambda_tnc" => l.lambdas.tnc.to_string(),
            "lambda_nsc" => l.lambdas.nsc.to_string(),
            "select_ratio" => l.select_ratio.to_string(),
            "select_keep" => match l.select_keep {
                SelectKeep::Lowest => "lowest".into(),
                SelectKeep::Highest => "highest".into(),
            },
            "tau_epsilon" => l.tau_epsilon.to_string(),
            "mix_beta_min" => l.mix_beta_range.0.to_string(),
            "mix_beta_max" => l.mix_beta_range.1.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "max_epochs" | "epochs" => self.train.max_epochs.to_string(),
            "patience" => self.train.patience.to_string(),
            "subgraph_k" => self.train.subgraph_k.to_string(),
            "alpha_ppr" => self.train.alpha_ppr.to_string(),
            "ppr_form" => match self.train.ppr_form {
                PprForm::Inverse => "inverse".into(),
                PprForm::Literal => "literal".into(),
            },
            "span_min" => self.train.span_length_range.0.to_string(),
            "span_max" => self.train.span_length_range.1.to_string(),
            "neighbor_cap" => self.train.neighbor_cap.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "negatives_per_query" => self.train.negatives_per_query.to_string(),
            "ndcg_cutoff" => self.ndcg_cutoff.map_or("none".into(), |c| c.to_string()),
            "probe_hidden" => self.probe_hidden.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_learning_rate" => self.probe_learning_rate.to_string(),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        })
    }

    /// Applies `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    i + 1
                )));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: key `{k}` repeated", i + 1)));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its value, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.train_config().validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::out_of_range(
                "train_fraction",
                self.train_fraction,
                "(0, 1]",
            ));
        }
        if self.dim < 2 || self.layers < 1 || self.max_seq_len < 2 {
            return Err(Error::out_of_range(
                "encoder shape",
                format!(
                    "dim {} layers {} max_seq_len {}",
                    self.dim, self.layers, self.max_seq_len
                ),
                "dim >= 2, layers >= 1, max_seq_len >= 2",
            ));
        }
        if self.probe_hidden == 0 || self.probe_epochs == 0 || !(self.probe_learning_rate > 0.0) {
            return Err(Error::out_of_range(
                "probe",
                format!(
                    "hidden {} epochs {} lr {}",
                    self.probe_hidden, self.probe_epochs, self.probe_learning_rate
                ),
                "positive",
            ));
        }
        if self.ndcg_cutoff == Some(0) {
            return Err(Error::out_of_range("ndcg_cutoff", 0, ">= 1 or none"));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.gen
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn encoder_config(&self, g: &TextAttributedGraph) -> EncoderConfig {
        EncoderConfig::for_graph(g, self.dim, self.layers, self.max_seq_len, self.seed)
    }

    pub fn link_config(&self) -> LinkEvalConfig {
        LinkEvalConfig {
            negatives_per_query: self.train.negatives_per_query,
            ndcg_cutoff: self.ndcg_cutoff,
            seed: self.seed,
        }
    }

    pub fn probe_config(&self, mode: ProbeMode) -> ProbeConfig {
        ProbeConfig {
            hidden: self.probe_hidden,
            epochs: self.probe_epochs,
            learning_rate: self.probe_learning_rate,
            mode,
            seed: self.seed,
        }
    }

    /// Lambda key of an objective.
    pub fn lambda_key(term: Term) -> &'static str {
        match term {
            Term::Tc => "lambda_tc",
            Term::Nc => "lambda_nc",
            Term::Sc => "lambda_sc",
            Term::Tnc => "lambda_tnc",
            Term::Nsc => "lambda_nsc",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.set("alpha", "0.25").unwrap();
        cfg.set("ndcg_cutoff", "10").unwrap();
        cfg.set("select_keep", "highest").unwrap();
        cfg.set("ppr_form", "literal").unwrap();
        cfg.set("learning_rate", "0.003").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_reads_back() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let mut other = RunConfig::default();
            other.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
    }

    #[test]
    fn comments_blank_lines_and_errors() {
        let cfg = RunConfig::parse("# header\n\nalpha = 1.0  # forced\nseed=3\n").unwrap();
        assert_eq!(cfg.train.loss.alpha, 1.0);
        assert_eq!(cfg.seed, 3);
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("alpha"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("alpha=x"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("seed=1\nseed=2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut cfg = RunConfig::default();
        cfg.set("communities", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("train_fraction", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = RunConfig::parse("seed=42").unwrap();
        assert_eq!(cfg.gen_config().seed, 42);
        assert_eq!(cfg.train_config().seed, 42);
        assert_eq!(cfg.link_config().seed, 42);
        assert_eq!(cfg.probe_config(ProbeMode::Inductive).seed, 42);
    }
}
