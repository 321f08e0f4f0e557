//! Training loop, edge splits, Adam, early stopping, and the two numerical
//! checks: finite-difference gradients and low-rank factorization descent.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{embed_all, init_encoder, EncoderConfig, EncoderParams, GraphEncoder};
use crate::error::{Error, Result};
use crate::eval::{link_prediction_from_embeddings, LinkEvalConfig, DEFAULT_NEGATIVES};
use crate::graph::{build_matrices, GraphMatrices, TextAttributedGraph};
use crate::objectives::{
    encode_batch, hierarchical_losses, total_loss, Decisions, LossConfig, LossTerms, NodeSample,
    Term,
};
use crate::ppr::{
    most_important_neighbor, ppr_importance_with, sample_subgraph, ContextSubgraph, PprForm,
    DEFAULT_ALPHA_PPR,
};
use crate::spectral::{
    best_rank_k, eigendecompose, factorization_residual, hfc_kernel, largest_principal_angle,
    top_eigenvectors,
};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Context-subgraph size, center included.
    pub subgraph_k: usize,
    pub alpha_ppr: f64,
    pub ppr_form: PprForm,
    /// Inclusive range of masked-span lengths.
    pub span_length_range: (usize, usize),
    /// Most neighbors mixed into one node's pass.
    pub neighbor_cap: usize,
    /// Negatives per validation query.
    pub negatives_per_query: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 1e-2,
            batch_size: 64,
            max_epochs: 100,
            patience: 2,
            subgraph_k: 4,
            alpha_ppr: DEFAULT_ALPHA_PPR,
            ppr_form: PprForm::Inverse,
            span_length_range: (1, 3),
            neighbor_cap: 8,
            negatives_per_query: DEFAULT_NEGATIVES,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::out_of_range(
                "learning_rate",
                self.learning_rate,
                ">= 0",
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("subgraph_k", self.subgraph_k),
            ("neighbor_cap", self.neighbor_cap),
            ("negatives_per_query", self.negatives_per_query),
        ] {
            if v == 0 {
                return Err(Error::out_of_range(name, v, ">= 1"));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::out_of_range("batch_size", self.batch_size, ">= 2"));
        }
        if !(self.alpha_ppr > 0.0 && self.alpha_ppr <= 1.0) {
            return Err(Error::out_of_range("alpha_ppr", self.alpha_ppr, "(0, 1]"));
        }
        let (lo, hi) = self.span_length_range;
        if lo == 0 || lo > hi {
            return Err(Error::out_of_range(
                "span_length_range",
                format!("{lo}..={hi}"),
                "1 <= min <= max",
            ));
        }
        Ok(())
    }
}

/// The random stream for `(seed, epoch, batch)`.
pub fn stream(seed: u64, epoch: usize, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | (batch as u64 & 0xffff_ffff));
    rng
}

const EPOCH_STREAM: usize = 0xffff_ffff;

/// Train, validation and test edges, each as sorted `(u, v)` with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSplits {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
}

impl EdgeSplits {
    /// `split,u,v` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,u,v\n");
        for (name, part) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for &(u, v) in part {
                let _ = writeln!(out, "{name},{u},{v}");
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut s = EdgeSplits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::MalformedLine {
                line: i + 1,
                reason: format!("expected split,u,v: `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad());
            }
            let e = (
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
            );
            match f[0] {
                "train" => s.train.push(e),
                "val" => s.val.push(e),
                "test" => s.test.push(e),
                _ => return Err(bad()),
            }
        }
        Ok(s)
    }
}

/// Edges chosen in `order` so that every node touched by `order` keeps at
/// least one chosen edge.
fn covering_edges(order: &[(usize, usize)], n: usize) -> Vec<bool> {
    let mut covered = vec![false; n];
    order
        .iter()
        .map(|&(u, v)| {
            let needed = !covered[u] || !covered[v];
            covered[u] = true;
            covered[v] = true;
            needed
        })
        .collect()
}

/// Shuffles the edges of `g` and splits them 7:1:2. Before the split, a set
/// of edges covering every non-isolated node is reserved for training, so
/// no node loses all of its training edges.
pub fn split_edges(g: &TextAttributedGraph, seed: u64) -> Result<EdgeSplits> {
    let mut edges = g.edges();
    if edges.is_empty() {
        return Err(Error::InvalidGraph("graph has no edges to split".into()));
    }
    edges.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let forced = covering_edges(&edges, g.node_count());
    let total = edges.len();
    let train_target = (0.7 * total as f64).round() as usize;
    let val_target = (0.1 * total as f64).round() as usize;
    let forced_count = forced.iter().filter(|&&f| f).count();
    let mut free_train = train_target.saturating_sub(forced_count);
    let mut s = EdgeSplits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (e, f) in edges.into_iter().zip(forced) {
        if f {
            s.train.push(e);
        } else if free_train > 0 {
            s.train.push(e);
            free_train -= 1;
        } else if s.val.len() < val_target {
            s.val.push(e);
        } else {
            s.test.push(e);
        }
    }
    s.train.sort_unstable();
    s.val.sort_unstable();
    s.test.sort_unstable();
    Ok(s)
}

/// Keeps `round(fraction * |train|)` training edges (at least the covering
/// set), chosen by `seed`. Validation and test edges are unchanged.
pub fn thin_train_edges(s: &EdgeSplits, n: usize, fraction: f64, seed: u64) -> Result<EdgeSplits> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::out_of_range("train_fraction", fraction, "(0, 1]"));
    }
    let mut order = s.train.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let forced = covering_edges(&order, n);
    let target = (fraction * order.len() as f64).round() as usize;
    let mut free = target.saturating_sub(forced.iter().filter(|&&f| f).count());
    let mut train: Vec<(usize, usize)> = order
        .into_iter()
        .zip(forced)
        .filter(|&(_, f)| {
            f || (free > 0 && {
                free -= 1;
                true
            })
        })
        .map(|(e, _)| e)
        .collect();
    train.sort_unstable();
    Ok(EdgeSplits { train, ..s.clone() })
}

/// The graph a model is trained on, with context subgraphs precomputed.
#[derive(Debug, Clone)]
pub struct TrainingGraph {
    /// Training edges among the kept nodes, renumbered.
    pub graph: TextAttributedGraph,
    /// Original index of each kept node.
    pub original: Vec<usize>,
    pub subgraphs: Vec<ContextSubgraph>,
    pub partners: Vec<usize>,
}

impl TrainingGraph {
    /// Keeps the nodes not in `holdout` that still have a training edge to
    /// another kept node.
    pub fn new(
        g: &TextAttributedGraph,
        train_edges: &[(usize, usize)],
        holdout: &[usize],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let n = g.node_count();
        let mut held = vec![false; n];
        for &v in holdout {
            if v >= n {
                return Err(Error::out_of_range("holdout node", v, format!("< {n}")));
            }
            held[v] = true;
        }
        let edges: Vec<(usize, usize)> = train_edges
            .iter()
            .copied()
            .filter(|&(u, v)| !held[u] && !held[v])
            .collect();
        let reduced = g.with_edges(&edges)?;
        let original: Vec<usize> = (0..n)
            .filter(|&v| !held[v] && reduced.degree(v) > 0)
            .collect();
        if original.len() < 2 {
            return Err(Error::InsufficientCandidates(format!(
                "only {} nodes keep a training edge",
                original.len()
            )));
        }
        let graph = reduced.induced(&original)?;
        let importance = ppr_importance_with(&build_matrices(&graph), cfg.alpha_ppr, cfg.ppr_form)?;
        let k = cfg.subgraph_k.min(graph.node_count());
        let subgraphs = (0..graph.node_count())
            .map(|v| sample_subgraph(&graph, &importance, v, k))
            .collect::<Result<Vec<_>>>()?;
        let partners = (0..graph.node_count())
            .map(|v| most_important_neighbor(&importance, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graph,
            original,
            subgraphs,
            partners,
        })
    }

    /// Position of original node `v`, if kept.
    pub fn position(&self, v: usize) -> Option<usize> {
        self.original.binary_search(&v).ok()
    }

    /// Edges with both endpoints kept, renumbered.
    pub fn map_edges(&self, edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
        edges
            .iter()
            .filter_map(|&(u, v)| Some((self.position(u)?, self.position(v)?)))
            .collect()
    }

    /// Draws the masked span and neighbor list of node `v`.
    pub fn sample_node(
        &self,
        v: usize,
        cfg: &TrainConfig,
        token_budget: usize,
        rng: &mut impl Rng,
    ) -> NodeSample {
        let len = self.graph.tokens(v).len().min(token_budget);
        let (lo, hi) = cfg.span_length_range;
        let span_len = rng.random_range(lo..=hi).min(len);
        let start = rng.random_range(1..=len - span_len + 1);
        let all = self.graph.neighbors(v);
        let neighbors = if all.len() <= cfg.neighbor_cap {
            all.to_vec()
        } else {
            let mut picked: Vec<usize> = index::sample(rng, all.len(), cfg.neighbor_cap)
                .into_iter()
                .map(|i| all[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        let partner = self.partners[v];
        NodeSample {
            node: v,
            span: (start, start + span_len - 1),
            neighbors,
            subgraph: self.subgraphs[v].clone(),
            partner,
            partner_subgraph: self.subgraphs[partner].clone(),
        }
    }
}

/// Shuffled node batches. A final batch smaller than two joins the previous
/// one.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if n < 2 {
        return Err(Error::InsufficientCandidates(format!(
            "need at least 2 nodes per batch, graph has {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size.max(2))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap_or_default();
        if let Some(prev) = batches.last_mut() {
            prev.extend(tail);
        }
    }
    Ok(batches)
}

/// Loss values and the gradient of the weighted total for one batch.
#[derive(Debug, Clone)]
pub struct BatchResult {
    pub terms: LossTerms,
    pub total: f64,
    pub gradient: EncoderParams,
    pub decisions: Decisions,
}

/// Forward and backward pass over one batch. With `replay`, `decisions`
/// is reused instead of drawn.
pub fn batch_gradient(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    samples: &[NodeSample],
    cfg: &LossConfig,
    mut decisions: Decisions,
    replay: bool,
    rng: &mut impl Rng,
) -> Result<BatchResult> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let mut enc = GraphEncoder::new(graph, pv);
    let reps = encode_batch(&mut tape, &mut enc, samples, cfg.tau_epsilon)?;
    let lv = hierarchical_losses(&mut tape, &reps, cfg, &mut decisions, replay, rng)?;
    let grads = tape.backward(lv.total);
    Ok(BatchResult {
        terms: lv.values(&tape),
        total: tape.scalar(lv.total),
        gradient: enc.params().collect(&grads),
        decisions,
    })
}

/// Loss values only, replaying `decisions`.
pub fn batch_terms(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    samples: &[NodeSample],
    cfg: &LossConfig,
    decisions: &Decisions,
) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let mut enc = GraphEncoder::new(graph, pv);
    let reps = encode_batch(&mut tape, &mut enc, samples, cfg.tau_epsilon)?;
    let mut d = decisions.clone();
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let lv = hierarchical_losses(&mut tape, &reps, cfg, &mut d, true, &mut unused)?;
    Ok(lv.values(&tape))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, parameter_count: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut p = params.flatten();
        let g = grad.flatten();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            p[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        params.set_flat(&p);
    }
}

/// Stops after `patience` consecutive epochs without a new best.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
    pub val_p1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

pub const HISTORY_HEADER: &str = "epoch,l_tc,l_nc,l_sc,l_tnc,l_nsc,total,val_p1";

impl TrainHistory {
    pub fn best_p1(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.val_p1)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            let t = r.terms;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.epoch, t.tc, t.nc, t.sc, t.tnc, t.nsc, r.total, r.val_p1
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HISTORY_HEADER) {
            return Err(Error::MalformedLine {
                line: 1,
                reason: format!("expected header `{HISTORY_HEADER}`"),
            });
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::MalformedLine {
                line: i + 2,
                reason: format!("bad history row `{line}`"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad());
            }
            let x = |k: usize| f[k].parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                terms: LossTerms {
                    tc: x(1)?,
                    nc: x(2)?,
                    sc: x(3)?,
                    tnc: x(4)?,
                    nsc: x(5)?,
                },
                total: x(6)?,
                val_p1: x(7)?,
            });
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for r in &records {
            if r.val_p1 > best.0 {
                best = (r.val_p1, r.epoch);
            }
        }
        Ok(Self {
            stopped_epoch: records.last().map_or(0, |r| r.epoch),
            best_epoch: best.1,
            records,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub history: TrainHistory,
    /// Negatives per validation query actually used.
    pub validation_negatives: usize,
}

/// Trains on every node.
pub fn train(
    g: &TextAttributedGraph,
    splits: &EdgeSplits,
    encoder: EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_excluding(g, splits, encoder, cfg, &[])
}

/// Trains with `holdout` nodes removed from batches, neighbor lists and
/// context subgraphs.
pub fn train_excluding(
    g: &TextAttributedGraph,
    splits: &EdgeSplits,
    encoder: EncoderConfig,
    cfg: &TrainConfig,
    holdout: &[usize],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::InvalidGraph("no training edges".into()));
    }
    let tg = TrainingGraph::new(g, &splits.train, holdout, cfg)?;
    let val = tg.map_edges(&splits.val);
    if val.is_empty() {
        return Err(Error::InsufficientCandidates(
            "no validation edges between training nodes".into(),
        ));
    }
    let val_negatives = validation_negatives(&tg.graph, &val, cfg.negatives_per_query)?;
    let val_cfg = LinkEvalConfig {
        negatives_per_query: val_negatives,
        ndcg_cutoff: None,
        seed: cfg.seed,
    };

    let mut params = init_encoder(encoder)?;
    let mut adam = Adam::new(cfg.learning_rate, params.parameter_count());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = params.clone();
    let mut records = Vec::new();
    let budget = encoder.token_budget();

    for epoch in 1..=cfg.max_epochs {
        let mut erng = stream(cfg.seed, epoch, EPOCH_STREAM);
        let batches = epoch_batches(tg.graph.node_count(), cfg.batch_size, &mut erng)?;
        let mut sums = [0.0; 5];
        for (b, nodes) in batches.iter().enumerate() {
            let samples: Vec<NodeSample> = nodes
                .iter()
                .map(|&v| tg.sample_node(v, cfg, budget, &mut erng))
                .collect();
            let mut brng = stream(cfg.seed, epoch, b);
            let r = batch_gradient(
                &params,
                &tg.graph,
                &samples,
                &cfg.loss,
                Decisions::default(),
                false,
                &mut brng,
            )?;
            for t in Term::ALL {
                if !r.terms.get(t).is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: t.name(),
                        epoch,
                        batch: b,
                    });
                }
            }
            if !r.total.is_finite() || !r.gradient.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: "total",
                    epoch,
                    batch: b,
                });
            }
            adam.step(&mut params, &r.gradient);
            for (s, v) in sums.iter_mut().zip(r.terms.as_array()) {
                *s += v;
            }
        }
        let k = batches.len() as f64;
        let terms = LossTerms {
            tc: sums[0] / k,
            nc: sums[1] / k,
            sc: sums[2] / k,
            tnc: sums[3] / k,
            nsc: sums[4] / k,
        };
        let emb = embed_all(&params, &tg.graph)?;
        let val_p1 = link_prediction_from_embeddings(&emb, &tg.graph, &val, &val_cfg)?
            .metrics
            .p_at_1;
        records.push(EpochRecord {
            epoch,
            terms,
            total: total_loss(&terms, &cfg.loss.lambdas),
            val_p1,
        });
        let (improved, stop) = stopper.observe(epoch, val_p1);
        if improved {
            best_params = params.clone();
        }
        if stop {
            break;
        }
    }
    let stopped_epoch = records.last().map_or(0, |r| r.epoch);
    Ok(TrainOutcome {
        params: best_params,
        history: TrainHistory {
            records,
            best_epoch: stopper.best_epoch,
            stopped_epoch,
        },
        validation_negatives: val_negatives,
    })
}

/// `wanted`, reduced to the smallest candidate pool among `edges`.
fn validation_negatives(
    g: &TextAttributedGraph,
    edges: &[(usize, usize)],
    wanted: usize,
) -> Result<usize> {
    let smallest = edges
        .iter()
        .map(|&(u, v)| {
            let excluded = 2 + g.neighbors(u).iter().filter(|&&x| x != v).count();
            g.node_count().saturating_sub(excluded)
        })
        .min()
        .unwrap_or(0);
    let k = wanted.min(smallest);
    if k == 0 {
        return Err(Error::InsufficientCandidates(
            "validation queries have no negative candidates".into(),
        ));
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub trials: usize,
    pub dim: usize,
    pub layers: usize,
    /// Batch size, at most the graph's node count.
    pub batch: usize,
    pub nodes: usize,
    pub step: f64,
    pub tolerance: f64,
    pub zero_params: bool,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            trials: 50,
            dim: 4,
            layers: 1,
            batch: 4,
            nodes: 6,
            step: 1e-5,
            tolerance: 1e-4,
            zero_params: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per term over all trials.
    pub max_relative_error: LossTerms,
    pub trials: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error
            .as_array()
            .iter()
            .all(|&e| e < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.max_relative_error
            .as_array()
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// `||a - n|| / max(||a||, ||n||, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Compares the analytic gradient of every term with central differences
/// on random small graphs and batches.
pub fn check_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    check_gradients_with(cfg, &|_: Term, _: &mut EncoderParams| {})
}

/// [`check_gradients`] with `corrupt` applied to each analytic gradient
/// before comparison.
pub fn check_gradients_with(
    cfg: &GradCheckConfig,
    corrupt: &dyn Fn(Term, &mut EncoderParams),
) -> Result<GradCheckReport> {
    if cfg.batch < 2 || cfg.batch > cfg.nodes || cfg.nodes < 3 {
        return Err(Error::out_of_range(
            "gradient check size",
            format!("batch {} of {} nodes", cfg.batch, cfg.nodes),
            "2 <= batch <= nodes, nodes >= 3",
        ));
    }
    let mut worst = [0.0f64; 5];
    for trial in 0..cfg.trials {
        let mut rng = stream(cfg.seed, trial, 0);
        let g = random_check_graph(cfg.nodes, &mut rng)?;
        let train_cfg = TrainConfig {
            subgraph_k: 3,
            neighbor_cap: 3,
            ..TrainConfig::default()
        };
        let all_edges = g.edges();
        let tg = TrainingGraph::new(&g, &all_edges, &[], &train_cfg)?;
        let enc_cfg = EncoderConfig::for_graph(&g, cfg.dim, cfg.layers, 6, rng.random());
        let params = if cfg.zero_params {
            EncoderParams::zeros(enc_cfg)
        } else {
            init_encoder(enc_cfg)?
        };
        let mut nodes: Vec<usize> = index::sample(&mut rng, cfg.nodes, cfg.batch).into_vec();
        nodes.sort_unstable();
        let samples: Vec<NodeSample> = nodes
            .iter()
            .map(|&v| tg.sample_node(v, &train_cfg, enc_cfg.token_budget(), &mut rng))
            .collect();
        let loss_cfg = LossConfig {
            alpha: rng.random_range(0.0..=1.0),
            ..LossConfig::default()
        };

        // Analytic gradients per term, with the discrete choices recorded.
        let mut analytic = Vec::with_capacity(5);
        let mut decisions = Decisions::default();
        for (i, term) in Term::ALL.into_iter().enumerate() {
            let single = LossConfig {
                lambdas: crate::objectives::Lambdas::only(term),
                ..loss_cfg
            };
            let replay = i > 0;
            let mut drng = stream(cfg.seed, trial, 1);
            let r = batch_gradient(
                &params, &tg.graph, &samples, &single, decisions, replay, &mut drng,
            )?;
            decisions = r.decisions;
            let mut grad = r.gradient;
            corrupt(term, &mut grad);
            analytic.push(grad.flatten());
        }

        let base = params.flatten();
        let mut numeric = vec![vec![0.0; base.len()]; 5];
        let mut probe = params.clone();
        for i in 0..base.len() {
            let mut at = |delta: f64| -> Result<LossTerms> {
                let mut x = base.clone();
                x[i] += delta;
                probe.set_flat(&x);
                batch_terms(&probe, &tg.graph, &samples, &loss_cfg, &decisions)
            };
            let plus = at(cfg.step)?.as_array();
            let minus = at(-cfg.step)?.as_array();
            for t in 0..5 {
                numeric[t][i] = (plus[t] - minus[t]) / (2.0 * cfg.step);
            }
        }
        for t in 0..5 {
            worst[t] = worst[t].max(relative_error(&analytic[t], &numeric[t]));
        }
    }
    Ok(GradCheckReport {
        max_relative_error: LossTerms {
            tc: worst[0],
            nc: worst[1],
            sc: worst[2],
            tnc: worst[3],
            nsc: worst[4],
        },
        trials: cfg.trials,
        tolerance: cfg.tolerance,
    })
}

/// A ring over `n` nodes plus random chords, with short random texts.
fn random_check_graph(n: usize, rng: &mut impl Rng) -> Result<TextAttributedGraph> {
    let mut edges: Vec<(usize, usize)> = (0..n)
        .map(|i| (i.min((i + 1) % n), i.max((i + 1) % n)))
        .collect();
    for u in 0..n {
        for v in u + 2..n {
            if !(u == 0 && v == n - 1) && rng.random_bool(0.3) {
                edges.push((u, v));
            }
        }
    }
    let words = ["a", "b", "c", "d", "e"];
    let tokens = (0..n)
        .map(|_| {
            (0..rng.random_range(2..=5))
                .map(|_| words[rng.random_range(0..words.len())].to_string())
                .collect()
        })
        .collect();
    TextAttributedGraph::new(
        (0..n).map(|i| format!("v{i}")).collect(),
        tokens,
        None,
        &edges,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1Config {
    pub alpha: f64,
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Entries of the initial factor are uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for Lemma1Config {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            k: 3,
            steps: 5000,
            learning_rate: 1e-2,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    /// `||K - F F^T||_F^2` after the last step.
    pub residual: f64,
    /// The same quantity for the best rank-K factor.
    pub oracle: f64,
    /// Largest principal angle between `span(F)` and the top-K eigenspace.
    pub angle: f64,
    /// `mu_K - mu_{K+1}` of the kernel spectrum, descending, negative
    /// eigenvalues clamped to zero.
    pub eigengap: f64,
    /// Largest single-step increase of the residual.
    pub max_increase: f64,
}

pub const LEMMA1_RESIDUAL_FACTOR: f64 = 1.05;
pub const LEMMA1_ANGLE: f64 = 0.05;
pub const LEMMA1_MIN_GAP: f64 = 0.1;
/// Absolute slack for oracles that are exactly zero.
pub const LEMMA1_SLACK: f64 = 1e-9;

impl Lemma1Report {
    pub fn ratio(&self) -> f64 {
        if self.oracle > 0.0 {
            self.residual / self.oracle
        } else if self.residual <= LEMMA1_SLACK {
            1.0
        } else {
            f64::INFINITY
        }
    }

    pub fn residual_ok(&self) -> bool {
        self.residual <= LEMMA1_RESIDUAL_FACTOR * self.oracle + LEMMA1_SLACK
    }

    /// Whether the angle bound applies.
    pub fn gap_ok(&self) -> bool {
        self.eigengap >= LEMMA1_MIN_GAP
    }

    pub fn passed(&self) -> bool {
        self.residual_ok() && (!self.gap_ok() || self.angle < LEMMA1_ANGLE)
    }
}

/// Minimizes `||(I - alpha L_sym) - F F^T||_F^2` over `N x K` matrices `F`
/// by plain gradient descent and compares the result with the best rank-K
/// factorization.
pub fn verify_lemma1(gm: &GraphMatrices, cfg: &Lemma1Config) -> Result<Lemma1Report> {
    let kernel = hfc_kernel(gm, cfg.alpha)?;
    let n = gm.node_count();
    let oracle = best_rank_k(&kernel, cfg.k)?;
    let d = eigendecompose(&kernel.kernel)?;
    let clamped: Vec<f64> = (0..n).map(|i| d.eigenvalues[n - 1 - i].max(0.0)).collect();
    let eigengap = clamped[cfg.k - 1] - clamped.get(cfg.k).copied().unwrap_or(0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.init_scale;
    let mut f = DMatrix::from_fn(n, cfg.k, |_, _| rng.random_range(-s..s));
    let k = &kernel.kernel;
    let mut last = factorization_residual(k, &f);
    let mut max_increase = 0.0f64;
    for _ in 0..cfg.steps {
        let r = k - &f * f.transpose();
        f += (&r * &f) * (4.0 * cfg.learning_rate);
        let now = factorization_residual(k, &f);
        max_increase = max_increase.max(now - last);
        last = now;
    }
    Ok(Lemma1Report {
        residual: last,
        oracle: oracle.residual,
        angle: largest_principal_angle(&f, &top_eigenvectors(&d, cfg.k)),
        eigengap,
        max_increase,
    })
}
