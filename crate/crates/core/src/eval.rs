//! Link-prediction ranking metrics and the node-classification probe.

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{embed_all, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;

pub const DEFAULT_NEGATIVES: usize = 50;

/// Rank of a target scoring `target` among candidates scoring `negatives`.
/// Ties count against the target.
pub fn pessimistic_rank(target: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= target).count()
}

/// One link-prediction query under dot-product scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub query: DVector<f64>,
    pub target: DVector<f64>,
    pub negatives: Vec<DVector<f64>>,
}

impl RankedQuery {
    pub fn rank(&self) -> usize {
        let scores: Vec<f64> = self.negatives.iter().map(|n| self.query.dot(n)).collect();
        pessimistic_rank(self.query.dot(&self.target), &scores)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub p_at_1: f64,
    pub ndcg: f64,
    pub mrr: f64,
    pub queries: usize,
}

/// P@1, NDCG and MRR of 1-based ranks. NDCG treats the target as the single
/// relevant item; with a cutoff, ranks beyond it contribute 0.
pub fn rank_metrics(ranks: &[usize], ndcg_cutoff: Option<usize>) -> Result<RankMetrics> {
    if ranks.is_empty() {
        return Err(Error::InsufficientCandidates("no queries to score".into()));
    }
    if let Some(&bad) = ranks.iter().find(|&&r| r == 0) {
        return Err(Error::out_of_range("rank", bad, ">= 1"));
    }
    let n = ranks.len() as f64;
    let hits = ranks.iter().filter(|&&r| r == 1).count() as f64;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    let ndcg = ranks
        .iter()
        .map(|&r| match ndcg_cutoff {
            Some(c) if r > c => 0.0,
            _ => 1.0 / (1.0 + r as f64).log2(),
        })
        .sum::<f64>()
        / n;
    Ok(RankMetrics {
        p_at_1: hits / n,
        ndcg,
        mrr,
        queries: ranks.len(),
    })
}

pub fn query_metrics(queries: &[RankedQuery], ndcg_cutoff: Option<usize>) -> Result<RankMetrics> {
    let ranks: Vec<usize> = queries.iter().map(RankedQuery::rank).collect();
    rank_metrics(&ranks, ndcg_cutoff)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkEvalConfig {
    pub negatives_per_query: usize,
    pub ndcg_cutoff: Option<usize>,
    pub seed: u64,
}

impl Default for LinkEvalConfig {
    fn default() -> Self {
        Self {
            negatives_per_query: DEFAULT_NEGATIVES,
            ndcg_cutoff: None,
            seed: 0,
        }
    }
}

/// Rank of one test edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRank {
    pub u: usize,
    pub v: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkReport {
    pub metrics: RankMetrics,
    pub ranks: Vec<EdgeRank>,
}

impl LinkReport {
    /// Comma-separated `u,v,rank` table with a header row.
    pub fn ranks_csv(&self) -> String {
        let mut out = String::from("u,v,rank\n");
        for r in &self.ranks {
            out.push_str(&format!("{},{},{}\n", r.u, r.v, r.rank));
        }
        out
    }
}

/// Scores each test edge `(u, v)` with `f(u)` as query and `f(v)` as target
/// against negatives drawn uniformly from nodes other than `u`, `v` and
/// `u`'s neighbors in `train_graph`. Row `x` of `embeddings` is `f(x)`.
pub fn link_prediction_from_embeddings(
    embeddings: &DMatrix<f64>,
    train_graph: &TextAttributedGraph,
    test_edges: &[(usize, usize)],
    cfg: &LinkEvalConfig,
) -> Result<LinkReport> {
    let n = train_graph.node_count();
    if embeddings.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings for {n} nodes",
            embeddings.nrows()
        )));
    }
    if test_edges.is_empty() {
        return Err(Error::InsufficientCandidates("no test edges".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ranks = Vec::with_capacity(test_edges.len());
    for &(u, v) in test_edges {
        if u >= n || v >= n || u == v {
            return Err(Error::InvalidGraph(format!("invalid test edge ({u}, {v})")));
        }
        if train_graph.has_edge(u, v) {
            return Err(Error::InvalidGraph(format!(
                "test edge ({u}, {v}) is also a training edge"
            )));
        }
        let pool: Vec<usize> = (0..n)
            .filter(|&x| x != u && x != v && !train_graph.has_edge(u, x))
            .collect();
        if pool.len() < cfg.negatives_per_query {
            return Err(Error::InsufficientCandidates(format!(
                "query ({u}, {v}) has {} candidate negatives, needs {}",
                pool.len(),
                cfg.negatives_per_query
            )));
        }
        let picked = index::sample(&mut rng, pool.len(), cfg.negatives_per_query);
        let q = embeddings.row(u);
        let target = q.dot(&embeddings.row(v));
        let scores: Vec<f64> = picked
            .iter()
            .map(|i| q.dot(&embeddings.row(pool[i])))
            .collect();
        ranks.push(EdgeRank {
            u,
            v,
            rank: pessimistic_rank(target, &scores),
        });
    }
    let plain: Vec<usize> = ranks.iter().map(|r| r.rank).collect();
    Ok(LinkReport {
        metrics: rank_metrics(&plain, cfg.ndcg_cutoff)?,
        ranks,
    })
}

/// Encodes every node of `train_graph` with `params`, then scores
/// `test_edges`.
pub fn link_prediction_eval(
    params: &EncoderParams,
    train_graph: &TextAttributedGraph,
    test_edges: &[(usize, usize)],
    cfg: &LinkEvalConfig,
) -> Result<LinkReport> {
    let emb = embed_all(params, train_graph)?;
    link_prediction_from_embeddings(&emb, train_graph, test_edges, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProbeMode {
    #[default]
    Transductive,
    /// Test-split nodes were excluded while the encoder was trained.
    Inductive,
}

impl ProbeMode {
    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Transductive => "transductive",
            ProbeMode::Inductive => "inductive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "transductive" => Some(ProbeMode::Transductive),
            "inductive" => Some(ProbeMode::Inductive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mode: ProbeMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            epochs: 200,
            learning_rate: 1e-2,
            mode: ProbeMode::Transductive,
            seed: 0,
        }
    }
}

/// Node indices of the 7:1:2 probe split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Splits nodes 7:1:2 within every class. Each class keeps at least one
/// training node; classes of three or more also keep one test node.
pub fn stratified_split(labels: &[usize], seed: u64) -> Result<ProbeSplit> {
    if labels.is_empty() {
        return Err(Error::InsufficientCandidates("no labelled nodes".into()));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = ProbeSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let mut test = ((0.2 * n as f64).round() as usize).min(n - 1);
        if test == 0 && n >= 3 {
            test = 1;
        }
        let val = ((0.1 * n as f64).round() as usize).min(n - 1 - test);
        split.test.extend_from_slice(&members[..test]);
        split.val.extend_from_slice(&members[test..test + val]);
        split.train.extend_from_slice(&members[test + val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub support: usize,
    pub correct: usize,
}

impl ClassReport {
    pub fn accuracy(&self) -> f64 {
        if self.support == 0 {
            0.0
        } else {
            self.correct as f64 / self.support as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub accuracy: f64,
    pub val_accuracy: f64,
    /// Probe epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub per_class: Vec<ClassReport>,
}

/// Trains a 2-layer perceptron on frozen embeddings with a fresh
/// stratified split and reports test accuracy.
pub fn node_classification_probe(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let split = stratified_split(labels, cfg.seed)?;
    probe_with_split(embeddings, labels, &split, cfg)
}

/// [`node_classification_probe`] on a given split. Features are
/// standardized with training-split statistics. The weights with the best
/// validation accuracy are evaluated on the test split; ties go to the lower
/// validation cross-entropy, then to the earlier epoch.
pub fn probe_with_split(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    split: &ProbeSplit,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings for {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if cfg.hidden == 0 || cfg.epochs == 0 {
        return Err(Error::out_of_range(
            "probe size",
            format!("{cfg:?}"),
            "hidden, epochs >= 1",
        ));
    }
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::InsufficientCandidates(
            "probe split has an empty part".into(),
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    for c in 0..classes {
        if labels.iter().any(|&l| l == c) && !split.train.iter().any(|&v| labels[v] == c) {
            return Err(Error::InsufficientCandidates(format!(
                "class {c} is absent from the probe training split"
            )));
        }
    }

    let x = standardize(embeddings, &split.train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut mlp = Mlp::new(x.ncols(), cfg.hidden, classes, &mut rng);
    let mut opt = MlpAdam::new(&mlp, cfg.learning_rate);
    let select_on = if split.val.is_empty() {
        &split.train
    } else {
        &split.val
    };

    let score = |m: &Mlp| {
        (
            m.accuracy(&x, labels, select_on),
            -m.loss(&x, labels, select_on),
        )
    };
    let mut best = (score(&mlp), 0, mlp.clone());
    for epoch in 1..=cfg.epochs {
        let grad = mlp.gradient(&x, labels, &split.train);
        opt.step(&mut mlp, &grad);
        let s = score(&mlp);
        if s > best.0 {
            best = (s, epoch, mlp.clone());
        }
    }
    let ((val_accuracy, _), best_epoch, mlp) = best;
    let pred = mlp.predict(&x);
    let mut per_class: Vec<ClassReport> = (0..classes)
        .map(|class| ClassReport {
            class,
            support: 0,
            correct: 0,
        })
        .collect();
    for &v in &split.test {
        let r = &mut per_class[labels[v]];
        r.support += 1;
        r.correct += usize::from(pred[v] == labels[v]);
    }
    let correct: usize = per_class.iter().map(|r| r.correct).sum();
    Ok(ProbeReport {
        mode: cfg.mode,
        accuracy: correct as f64 / split.test.len() as f64,
        val_accuracy,
        best_epoch,
        per_class,
    })
}

fn standardize(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = x.clone();
    let n = rows.len() as f64;
    for c in 0..x.ncols() {
        let mean = rows.iter().map(|&r| x[(r, c)]).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|&r| (x[(r, c)] - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = if var > 1e-24 { var.sqrt() } else { 1.0 };
        for r in 0..x.nrows() {
            out[(r, c)] = (x[(r, c)] - mean) / sd;
        }
    }
    out
}

/// `x -> relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
struct Mlp {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Mlp {
    fn new(d: usize, h: usize, c: usize, rng: &mut impl Rng) -> Self {
        let (s1, s2) = (1.0 / (d as f64).sqrt(), 1.0 / (h as f64).sqrt());
        Self {
            w1: DMatrix::from_fn(d, h, |_, _| rng.random_range(-s1..s1)),
            b1: DVector::zeros(h),
            w2: DMatrix::from_fn(h, c, |_, _| rng.random_range(-s2..s2)),
            b2: DVector::zeros(c),
        }
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x * &self.w1;
        for mut row in h.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b1.iter()) {
                *v = (*v + b).max(0.0);
            }
        }
        h
    }

    fn logits(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = h * &self.w2;
        for mut row in z.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.b2.iter()) {
                *v += b;
            }
        }
        z
    }

    fn predict(&self, x: &DMatrix<f64>) -> Vec<usize> {
        let z = self.logits(&self.hidden(x));
        z.row_iter()
            .map(|r| {
                // First maximum wins.
                let mut best = 0;
                for j in 1..r.len() {
                    if r[j] > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean softmax cross-entropy over `rows`.
    fn loss(&self, x: &DMatrix<f64>, labels: &[usize], rows: &[usize]) -> f64 {
        let z = self.logits(&self.hidden(&x.select_rows(rows)));
        z.row_iter()
            .zip(rows)
            .map(|(r, &v)| {
                let max = r.max();
                max + r.iter().map(|a| (a - max).exp()).sum::<f64>().ln() - r[labels[v]]
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    fn accuracy(&self, x: &DMatrix<f64>, labels: &[usize], rows: &[usize]) -> f64 {
        let pred = self.predict(x);
        rows.iter().filter(|&&v| pred[v] == labels[v]).count() as f64 / rows.len() as f64
    }

    /// Gradient of mean softmax cross-entropy over `rows`.
    fn gradient(&self, x: &DMatrix<f64>, labels: &[usize], rows: &[usize]) -> Mlp {
        let xs = x.select_rows(rows);
        let h = self.hidden(&xs);
        let mut dz = self.logits(&h);
        let n = rows.len() as f64;
        for (i, mut row) in dz.row_iter_mut().enumerate() {
            let max = row.max();
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum = row.sum();
            row.iter_mut().for_each(|v| *v /= sum);
            row[labels[rows[i]]] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n);
        }
        let w2 = h.transpose() * &dz;
        let b2 = dz.row_sum().transpose();
        let mut dh = &dz * self.w2.transpose();
        dh.zip_apply(&h, |g, a| {
            if a <= 0.0 {
                *g = 0.0
            }
        });
        Mlp {
            w1: xs.transpose() * &dh,
            b1: dh.row_sum().transpose(),
            w2,
            b2,
        }
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
        ]
    }
}

struct MlpAdam {
    lr: f64,
    t: i32,
    m: Mlp,
    v: Mlp,
}

impl MlpAdam {
    fn new(like: &Mlp, lr: f64) -> Self {
        let mut zero = like.clone();
        zero.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        Self {
            lr,
            t: 0,
            m: zero.clone(),
            v: zero,
        }
    }

    fn step(&mut self, p: &mut Mlp, g: &Mlp) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        let mut g = g.clone();
        for (((p, g), m), v) in p
            .slices_mut()
            .into_iter()
            .zip(g.slices_mut())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}
