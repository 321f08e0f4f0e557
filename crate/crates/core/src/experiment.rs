//! Train, evaluate, ablate and sweep workflows over run directories.
//!
//! A run directory holds:
//!
//! - `config.txt`: the resolved [`RunConfig`];
//! - `graph.tag`: a copy of the input graph;
//! - `splits.csv`: the edge splits;
//! - `checkpoint.bin` and `history.csv`: the trained encoder and its epochs;
//! - `run.txt`: the ablation, stopping epochs and validation protocol.
//!
//! Directories are append-only. Training refuses a non-empty directory and
//! evaluation only adds files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::datagen::generate_planted_tag;
use crate::encoder::{embed_all, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{
    link_prediction_from_embeddings, probe_with_split, stratified_split, LinkReport, ProbeMode,
    ProbeReport,
};
use crate::graph::TextAttributedGraph;
use crate::objectives::Term;
use crate::trainer::{
    split_edges, thin_train_edges, train_excluding, EdgeSplits, TrainHistory, TrainOutcome,
};

/// Objective variants: the full model, one objective removed, or the HFC
/// rate forced to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    None,
    Drop(Term),
    /// Plain spectral contrastive loss everywhere.
    Hfc,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::None,
        Ablation::Drop(Term::Tc),
        Ablation::Drop(Term::Nc),
        Ablation::Drop(Term::Sc),
        Ablation::Drop(Term::Tnc),
        Ablation::Drop(Term::Nsc),
        Ablation::Hfc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::Drop(t) => t.name(),
            Ablation::Hfc => "hfc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "hfc" => Ok(Ablation::Hfc),
            _ => Term::parse(s).map(Ablation::Drop).ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}`; expected none, tc, nc, sc, tnc, nsc or hfc"
                ))
            }),
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Ablation::None => {}
            Ablation::Drop(t) => *cfg.train.loss.lambdas.get_mut(t) = 0.0,
            Ablation::Hfc => cfg.train.loss.alpha = 1.0,
        }
    }
}

/// Splits, thins and trains. Nodes in `holdout` are excluded from training.
pub fn train_model(
    g: &TextAttributedGraph,
    cfg: &RunConfig,
    holdout: &[usize],
) -> Result<(EdgeSplits, TrainOutcome)> {
    cfg.validate()?;
    let full = split_edges(g, cfg.seed)?;
    let splits = if cfg.train_fraction < 1.0 {
        thin_train_edges(&full, g.node_count(), cfg.train_fraction, cfg.seed)?
    } else {
        full
    };
    let outcome = train_excluding(
        g,
        &splits,
        cfg.encoder_config(g),
        &cfg.train_config(),
        holdout,
    )?;
    Ok((splits, outcome))
}

/// Embeddings of every node under the training-edge graph.
pub fn train_graph_embeddings(
    g: &TextAttributedGraph,
    splits: &EdgeSplits,
    params: &EncoderParams,
) -> Result<(TextAttributedGraph, nalgebra::DMatrix<f64>)> {
    let train_graph = g.with_edges(&splits.train)?;
    let emb = embed_all(params, &train_graph)?;
    Ok((train_graph, emb))
}

pub fn link_eval(
    g: &TextAttributedGraph,
    splits: &EdgeSplits,
    params: &EncoderParams,
    cfg: &RunConfig,
) -> Result<LinkReport> {
    let (train_graph, emb) = train_graph_embeddings(g, splits, params)?;
    link_prediction_from_embeddings(&emb, &train_graph, &splits.test, &cfg.link_config())
}

fn labels_of(g: &TextAttributedGraph) -> Result<&[usize]> {
    g.labels()
        .ok_or_else(|| Error::InvalidGraph("node classification needs a labelled graph".into()))
}

/// Probe accuracy. In inductive mode `params` must come from an encoder
/// trained without the probe's test nodes.
pub fn node_eval(
    g: &TextAttributedGraph,
    splits: &EdgeSplits,
    params: &EncoderParams,
    cfg: &RunConfig,
    mode: ProbeMode,
) -> Result<ProbeReport> {
    let labels = labels_of(g)?;
    let (_, emb) = train_graph_embeddings(g, splits, params)?;
    let split = stratified_split(labels, cfg.seed)?;
    probe_with_split(&emb, labels, &split, &cfg.probe_config(mode))
}

/// Trains an encoder with the probe's test nodes held out.
pub fn train_inductive(
    g: &TextAttributedGraph,
    cfg: &RunConfig,
) -> Result<(EdgeSplits, TrainOutcome)> {
    let split = stratified_split(labels_of(g)?, cfg.seed)?;
    train_model(g, cfg, &split.test)
}

/// Files of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.path("config.txt"))
    }

    pub fn graph(&self) -> Result<TextAttributedGraph> {
        TextAttributedGraph::load(self.path("graph.tag"))
    }

    pub fn splits(&self) -> Result<EdgeSplits> {
        EdgeSplits::from_csv(&std::fs::read_to_string(self.path("splits.csv"))?)
    }

    pub fn checkpoint(&self) -> Result<EncoderParams> {
        let p = self.path("checkpoint.bin");
        if !p.exists() {
            return Err(Error::Checkpoint(format!(
                "no checkpoint in {}",
                self.root.display()
            )));
        }
        EncoderParams::load(p)
    }

    pub fn history(&self) -> Result<TrainHistory> {
        TrainHistory::from_csv(&std::fs::read_to_string(self.path("history.csv"))?)
    }

    /// Writes `name` unless it exists. An existing file must already hold
    /// `content`.
    pub fn add_file(&self, name: &str, content: &[u8]) -> Result<()> {
        let p = self.path(name);
        if p.exists() {
            if std::fs::read(&p)? == content {
                return Ok(());
            }
            return Err(Error::Config(format!(
                "{} already exists with different content; use a fresh run directory",
                p.display()
            )));
        }
        std::fs::write(p, content)?;
        Ok(())
    }
}

/// What `train` wrote.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run: RunDir,
    pub outcome: TrainOutcome,
    pub splits: EdgeSplits,
}

fn run_metadata(ablation: Ablation, outcome: &TrainOutcome, mode: ProbeMode) -> String {
    let h = &outcome.history;
    let mut out = String::new();
    let _ = writeln!(out, "ablation={}", ablation.name());
    let _ = writeln!(out, "mode={}", mode.name());
    let _ = writeln!(out, "best_epoch={}", h.best_epoch);
    let _ = writeln!(out, "stopped_epoch={}", h.stopped_epoch);
    let _ = writeln!(out, "best_val_p1={}", h.best_p1());
    let _ = writeln!(out, "validation_negatives={}", outcome.validation_negatives);
    let _ = writeln!(
        out,
        "validation_protocol=uniform negatives excluding both endpoints and the query's training neighbors; same scheme as test"
    );
    out
}

/// Fails unless `dir` is missing or empty.
fn check_fresh(dir: &Path) -> Result<()> {
    if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(Error::Config(format!(
            "run directory {} is not empty; runs are append-only, use a fresh directory",
            dir.display()
        )));
    }
    Ok(())
}

/// Trains on `graph_path` and writes a run directory. Nothing is written
/// unless training succeeds.
pub fn train_run(
    graph_path: &Path,
    cfg: &RunConfig,
    ablation: Ablation,
    out: &Path,
) -> Result<TrainSummary> {
    let g = TextAttributedGraph::load(graph_path)?;
    let mut resolved = *cfg;
    ablation.apply(&mut resolved);
    check_fresh(out)?;
    let (splits, outcome) = train_model(&g, &resolved, &[])?;
    check_fresh(out)?;
    std::fs::create_dir_all(out)?;
    let run = RunDir::new(out);
    std::fs::write(run.path("config.txt"), resolved.to_text())?;
    g.save(run.path("graph.tag"))?;
    std::fs::write(run.path("splits.csv"), splits.to_csv())?;
    outcome.params.save(run.path("checkpoint.bin"))?;
    std::fs::write(run.path("history.csv"), outcome.history.to_csv())?;
    std::fs::write(
        run.path("run.txt"),
        run_metadata(ablation, &outcome, ProbeMode::Transductive),
    )?;
    Ok(TrainSummary {
        run,
        outcome,
        splits,
    })
}

/// `key=value` lines of a link-prediction report.
pub fn link_report_text(r: &LinkReport) -> String {
    format!(
        "task=link\nqueries={}\np_at_1={}\nndcg={}\nmrr={}\n",
        r.metrics.queries, r.metrics.p_at_1, r.metrics.ndcg, r.metrics.mrr
    )
}

/// `key=value` lines of a probe report.
pub fn probe_report_text(r: &ProbeReport) -> String {
    let mut out = format!(
        "task=node\nmode={}\naccuracy={}\nval_accuracy={}\nbest_probe_epoch={}\n",
        r.mode.name(),
        r.accuracy,
        r.val_accuracy,
        r.best_epoch
    );
    for c in &r.per_class {
        let _ = writeln!(
            out,
            "class_{}_accuracy={} (support {})",
            c.class,
            c.accuracy(),
            c.support
        );
    }
    out
}

/// Link prediction on the run's test edges. Writes `eval_link.txt` and
/// `ranks_link.csv`.
pub fn eval_link_run(run: &RunDir) -> Result<LinkReport> {
    let params = run.checkpoint()?;
    let cfg = run.config()?;
    let g = run.graph()?;
    let splits = run.splits()?;
    let r = link_eval(&g, &splits, &params, &cfg)?;
    run.add_file("eval_link.txt", link_report_text(&r).as_bytes())?;
    run.add_file("ranks_link.csv", r.ranks_csv().as_bytes())?;
    Ok(r)
}

/// Node classification. Inductive mode trains (once) an encoder without the
/// probe's test nodes and stores it as `checkpoint_inductive.bin`.
pub fn eval_node_run(run: &RunDir, mode: ProbeMode) -> Result<ProbeReport> {
    let transductive = run.checkpoint()?;
    let cfg = run.config()?;
    let g = run.graph()?;
    let splits = run.splits()?;
    let params = match mode {
        ProbeMode::Transductive => transductive,
        ProbeMode::Inductive => {
            let p = run.path("checkpoint_inductive.bin");
            if p.exists() {
                EncoderParams::load(&p)?
            } else {
                let (_, outcome) = train_inductive(&g, &cfg)?;
                run.add_file("history_inductive.csv", outcome.history.to_csv().as_bytes())?;
                outcome.params.save(&p)?;
                outcome.params
            }
        }
    };
    let r = node_eval(&g, &splits, &params, &cfg, mode)?;
    run.add_file(
        &format!("eval_node_{}.txt", mode.name()),
        probe_report_text(&r).as_bytes(),
    )?;
    Ok(r)
}

/// One trained-and-evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_p1: f64,
    pub p_at_1: f64,
    pub ndcg: f64,
    pub mrr: f64,
    /// Transductive probe accuracy, when the graph is labelled.
    pub probe_accuracy: Option<f64>,
}

pub const SWEEP_HEADER: &str =
    "param,value,seed,epochs,best_epoch,best_val_p1,p_at_1,ndcg,mrr,probe_accuracy";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let probe = r.probe_accuracy.map_or("na".to_string(), |a| a.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.param,
            r.value,
            r.seed,
            r.epochs,
            r.best_epoch,
            r.best_val_p1,
            r.p_at_1,
            r.ndcg,
            r.mrr,
            probe
        );
    }
    out
}

/// Where a sweep or ablation gets its graph.
#[derive(Debug, Clone, Copy)]
pub enum GraphSource<'a> {
    /// The same graph for every run.
    Fixed(&'a TextAttributedGraph),
    /// A planted graph generated from each run's config and seed.
    Generated,
}

impl GraphSource<'_> {
    fn graph(&self, cfg: &RunConfig) -> Result<TextAttributedGraph> {
        match self {
            GraphSource::Fixed(g) => Ok((*g).clone()),
            GraphSource::Generated => generate_planted_tag(&cfg.gen_config()),
        }
    }
}

/// Trains and evaluates one configuration.
pub fn run_row(
    source: GraphSource<'_>,
    cfg: &RunConfig,
    param: &str,
    value: &str,
) -> Result<SweepRow> {
    let g = source.graph(cfg)?;
    let (splits, outcome) = train_model(&g, cfg, &[])?;
    let link = link_eval(&g, &splits, &outcome.params, cfg)?;
    let probe_accuracy = match g.labels() {
        Some(_) => {
            Some(node_eval(&g, &splits, &outcome.params, cfg, ProbeMode::Transductive)?.accuracy)
        }
        None => None,
    };
    let h = &outcome.history;
    Ok(SweepRow {
        param: param.to_string(),
        value: value.to_string(),
        seed: cfg.seed,
        epochs: h.stopped_epoch,
        best_epoch: h.best_epoch,
        best_val_p1: h.best_p1(),
        p_at_1: link.metrics.p_at_1,
        ndcg: link.metrics.ndcg,
        mrr: link.metrics.mrr,
        probe_accuracy,
    })
}

/// Varies `param` over `values`, `seeds` runs each with seeds
/// `base.seed, base.seed + 1, ...`. The parameter `ablate` takes ablation
/// names; any other parameter is a config key.
pub fn sweep(
    source: GraphSource<'_>,
    base: &RunConfig,
    param: &str,
    values: &[String],
    seeds: usize,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || seeds == 0 {
        return Err(Error::Config(
            "a sweep needs at least one value and one seed".into(),
        ));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = *base;
        if param == "ablate" {
            Ablation::parse(v)?.apply(&mut cfg);
        } else {
            cfg.set(param, v)?;
        }
        cfg.validate()?;
        configs.push(cfg);
    }
    let mut rows = Vec::with_capacity(values.len() * seeds);
    for (v, cfg) in values.iter().zip(configs) {
        for s in 0..seeds as u64 {
            let run_cfg = RunConfig {
                seed: base.seed + s,
                ..cfg
            };
            let row = run_row(source, &run_cfg, param, v)?;
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("nodes", "40"),
            ("p_in", "0.3"),
            ("p_out", "0.03"),
            ("tokens_per_node", "6"),
            ("vocab_per_community", "10"),
            ("dim", "8"),
            ("max_seq_len", "8"),
            ("max_epochs", "2"),
            ("batch_size", "16"),
            ("negatives_per_query", "10"),
            ("probe_epochs", "20"),
        ] {
            cfg.set(k, v).unwrap();
        }
        cfg
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::parse(a.name()).unwrap(), a);
        }
        assert!(Ablation::parse("xx").is_err());
        let mut cfg = RunConfig::default();
        Ablation::Drop(Term::Nc).apply(&mut cfg);
        assert_eq!(cfg.train.loss.lambdas.nc, 0.0);
        Ablation::Hfc.apply(&mut cfg);
        assert_eq!(cfg.train.loss.alpha, 1.0);
    }

    #[test]
    fn train_then_evaluate_a_run_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick();
        let graph = tmp.path().join("g.tag");
        generate_planted_tag(&cfg.gen_config())
            .unwrap()
            .save(&graph)
            .unwrap();
        let out = tmp.path().join("run");
        let s = train_run(&graph, &cfg, Ablation::None, &out).unwrap();
        for f in [
            "config.txt",
            "graph.tag",
            "splits.csv",
            "checkpoint.bin",
            "history.csv",
            "run.txt",
        ] {
            assert!(out.join(f).exists(), "{f}");
        }
        assert_eq!(s.run.config().unwrap(), cfg);
        let link = eval_link_run(&s.run).unwrap();
        assert_eq!(link, eval_link_run(&s.run).unwrap());
        let node = eval_node_run(&s.run, ProbeMode::Inductive).unwrap();
        assert!(out.join("checkpoint_inductive.bin").exists());
        assert_eq!(node, eval_node_run(&s.run, ProbeMode::Inductive).unwrap());
        // Append-only: a second training run into the same directory fails.
        assert!(matches!(
            train_run(&graph, &cfg, Ablation::None, &out),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_graph_leaves_no_output() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        assert!(train_run(&tmp.path().join("none.tag"), &quick(), Ablation::None, &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn sweep_emits_one_row_per_value_and_seed() {
        let values: Vec<String> = ["0.5", "1.0"].iter().map(|s| s.to_string()).collect();
        let rows = sweep(
            GraphSource::Generated,
            &quick(),
            "train_fraction",
            &values,
            2,
            |_| {},
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].seed, 1);
        assert_eq!(rows[2].value, "1.0");
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(sweep(GraphSource::Generated, &quick(), "nope", &values, 1, |_| {}).is_err());
    }
}
