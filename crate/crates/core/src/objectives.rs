//! Spectral contrastive losses and the five hierarchical objectives built on
//! them.
//!
//! Every objective reduces to the same estimator: for anchors `a_m`,
//! positives `p_m` and per-anchor negative lists `N_m`,
//!
//! ```text
//! L = mean_m [ -2 alpha <a_m, p_m> + mean_{n in N_m} <a_m, n>^2 ]
//! ```
//!
//! With `alpha = 1` this is the plain spectral contrastive loss. The
//! objectives differ only in how they pick anchors, positives and negatives
//! from a batch of encoded nodes.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::{span_on_tape, GraphEncoder, Pass, TokenSource};
use crate::error::{Error, Result};
use crate::ppr::ContextSubgraph;
use crate::tape::{Tape, Var};

/// Temperatures below this are raised to it before scoring candidates.
pub const TAU_FLOOR: f64 = 1e-12;

/// Anchors, positives and per-anchor negatives as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<DVector<f64>>,
    pub positives: Vec<DVector<f64>>,
    pub negatives: Vec<Vec<DVector<f64>>>,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let m = self.anchors.len();
        if m == 0 {
            return Err(Error::InsufficientCandidates("empty batch".into()));
        }
        if self.positives.len() != m || self.negatives.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{m} anchors, {} positives, {} negative lists",
                self.positives.len(),
                self.negatives.len()
            )));
        }
        let d = self.anchors[0].len();
        let all = self
            .anchors
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        if let Some(bad) = all.clone().find(|v| v.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} in a batch of width {d}",
                bad.len()
            )));
        }
        if let Some(i) = self.negatives.iter().position(Vec::is_empty) {
            return Err(Error::InsufficientCandidates(format!(
                "anchor {i} has no negatives"
            )));
        }
        Ok(())
    }
}

/// High-frequency-aware spectral contrastive loss with rate `alpha`.
pub fn hfc_loss(b: &ContrastiveBatch, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    b.validate()?;
    Ok(estimator(b, -2.0 * alpha))
}

/// Spectral contrastive loss.
pub fn spectral_loss(b: &ContrastiveBatch) -> Result<f64> {
    b.validate()?;
    Ok(estimator(b, -2.0))
}

fn estimator(b: &ContrastiveBatch, positive_weight: f64) -> f64 {
    let mut total = 0.0;
    for ((a, p), negs) in b.anchors.iter().zip(&b.positives).zip(&b.negatives) {
        let neg: f64 = negs.iter().map(|n| a.dot(n).powi(2)).sum::<f64>() / negs.len() as f64;
        total += positive_weight * a.dot(p) + neg;
    }
    total / b.anchors.len() as f64
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::out_of_range("alpha", alpha, "[0, 1]"));
    }
    Ok(())
}

/// Node-specific temperature: mean token distance to the node state over
/// `ln(|H_v| + eps)`.
pub fn node_temperature(
    token_hiddens: &[DVector<f64>],
    h_v: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    if token_hiddens.is_empty() {
        return Err(Error::InsufficientCandidates("no token hiddens".into()));
    }
    if eps <= 0.0 {
        return Err(Error::out_of_range("tau_epsilon", eps, "> 0"));
    }
    let count = token_hiddens.len() as f64;
    let spread: f64 = token_hiddens.iter().map(|h| (h - h_v).norm()).sum();
    Ok(spread / (count * (count + eps).ln()))
}

pub fn scaled_similarity(h_span: &DVector<f64>, h_v: &DVector<f64>, tau: f64) -> Result<f64> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::out_of_range("tau", tau, "> 0"));
    }
    Ok(h_span.dot(h_v) / tau)
}

/// Which end of the similarity ranking [`select_negatives`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectKeep {
    /// Keep the candidates least similar to the query node.
    #[default]
    Lowest,
    Highest,
}

/// A negative candidate: its representation and its owner's temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionCandidate {
    pub rep: DVector<f64>,
    pub owner_tau: f64,
}

/// Indices (ascending) of the `ceil(ratio * count)` candidates kept after
/// ranking by `<rep, query_node_rep> / owner_tau`. Equal scores favor the
/// earlier candidate.
pub fn select_negatives(
    query_node_rep: &DVector<f64>,
    candidates: &[SelectionCandidate],
    ratio: f64,
    keep: SelectKeep,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::out_of_range("select_ratio", ratio, "(0, 1]"));
    }
    if candidates.is_empty() {
        return Err(Error::InsufficientCandidates(
            "no negative candidates".into(),
        ));
    }
    let scores = candidates
        .iter()
        .map(|c| scaled_similarity(&c.rep, query_node_rep, c.owner_tau))
        .collect::<Result<Vec<f64>>>()?;
    let count = selected_count(candidates.len(), ratio);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match keep {
            SelectKeep::Lowest => scores[a].total_cmp(&scores[b]),
            SelectKeep::Highest => scores[b].total_cmp(&scores[a]),
        };
        by_score.then(a.cmp(&b))
    });
    let mut kept = order[..count].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// `ceil(ratio * count)`, clamped to `1..=count`.
pub fn selected_count(count: usize, ratio: f64) -> usize {
    // The epsilon keeps ratios like 0.3 * 10 from rounding up to 4.
    (((ratio * count as f64) - 1e-9).ceil() as usize).clamp(1, count)
}

/// Mixing weight per negative: `Some(beta)` for negatives replaced by
/// `beta * n + (1 - beta) * anchor`, `None` for untouched ones.
pub type MixPlan = Vec<Option<f64>>;

/// Ranks negatives by `<anchor, n>` and draws a mixing weight for each of
/// the top `max(1, len / 2)`.
pub fn plan_mixup(
    anchor: &DVector<f64>,
    negatives: &[DVector<f64>],
    beta_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<MixPlan> {
    check_beta_range(beta_range)?;
    if negatives.is_empty() {
        return Err(Error::InsufficientCandidates("no negatives to mix".into()));
    }
    let scores: Vec<f64> = negatives.iter().map(|n| anchor.dot(n)).collect();
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hard = (negatives.len() / 2).max(1);
    let mut plan = vec![None; negatives.len()];
    for &i in &order[..hard] {
        plan[i] = Some(draw_beta(beta_range, rng));
    }
    Ok(plan)
}

fn draw_beta(range: (f64, f64), rng: &mut impl Rng) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        rng.random_range(range.0..range.1)
    }
}

fn check_beta_range(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::out_of_range(
            "mix_beta_range",
            format!("[{lo}, {hi}]"),
            "0 <= lo <= hi <= 1",
        ));
    }
    Ok(())
}

/// Replaces the hardest half of `negatives` (by similarity to `anchor`) with
/// mixtures of themselves and the anchor. Order is preserved.
pub fn mix_hard_negatives(
    anchor: &DVector<f64>,
    negatives: &[DVector<f64>],
    beta_range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<Vec<DVector<f64>>> {
    let plan = plan_mixup(anchor, negatives, beta_range, rng)?;
    Ok(negatives
        .iter()
        .zip(plan)
        .map(|(n, beta)| match beta {
            Some(b) => n * b + anchor * (1.0 - b),
            None => n.clone(),
        })
        .collect())
}

/// A uniformly random non-identity permutation of `0..m`.
pub fn shuffle_permutation(m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m < 2 {
        return Err(Error::InsufficientCandidates(format!(
            "shuffle corruption needs at least 2 items, got {m}"
        )));
    }
    let mut perm: Vec<usize> = (0..m).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Shuffles `reps` with a non-identity permutation.
pub fn shuffle_corrupt<T: Clone>(reps: &[T], rng: &mut impl Rng) -> Result<Vec<T>> {
    let perm = shuffle_permutation(reps.len(), rng)?;
    Ok(perm.iter().map(|&i| reps[i].clone()).collect())
}

/// Weights of the five objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub tc: f64,
    pub nc: f64,
    pub sc: f64,
    pub tnc: f64,
    pub nsc: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            tc: 1.0,
            nc: 1.0,
            sc: 1.0,
            tnc: 1.0,
            nsc: 1.0,
        }
    }
}

impl Lambdas {
    pub fn as_array(&self) -> [f64; 5] {
        [self.tc, self.nc, self.sc, self.tnc, self.nsc]
    }

    pub fn only(term: Term) -> Self {
        let mut l = Self {
            tc: 0.0,
            nc: 0.0,
            sc: 0.0,
            tnc: 0.0,
            nsc: 0.0,
        };
        *l.get_mut(term) = 1.0;
        l
    }

    pub fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Tc => &mut self.tc,
            Term::Nc => &mut self.nc,
            Term::Sc => &mut self.sc,
            Term::Tnc => &mut self.tnc,
            Term::Nsc => &mut self.nsc,
        }
    }
}

/// The five objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    /// Token level: a span against its masked reconstruction.
    Tc,
    /// Node level: text view against the neighborhood view.
    Nc,
    /// Subgraph level: a context subgraph against its partner's.
    Sc,
    /// Token-node: sequence representation against the node embedding.
    Tnc,
    /// Node-subgraph: node embedding against its context subgraph.
    Nsc,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Tc, Term::Nc, Term::Sc, Term::Tnc, Term::Nsc];

    pub fn name(self) -> &'static str {
        match self {
            Term::Tc => "tc",
            Term::Nc => "nc",
            Term::Sc => "sc",
            Term::Tnc => "tnc",
            Term::Nsc => "nsc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub lambdas: Lambdas,
    pub select_ratio: f64,
    pub select_keep: SelectKeep,
    pub tau_epsilon: f64,
    pub mix_beta_range: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambdas: Lambdas::default(),
            select_ratio: 0.5,
            select_keep: SelectKeep::Lowest,
            tau_epsilon: 1.0,
            mix_beta_range: (0.5, 0.9),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self
            .lambdas
            .as_array()
            .iter()
            .any(|&l| !(l >= 0.0) || !l.is_finite())
        {
            return Err(Error::out_of_range(
                "lambda",
                format!("{:?}", self.lambdas),
                "non-negative",
            ));
        }
        if !(self.select_ratio > 0.0 && self.select_ratio <= 1.0) {
            return Err(Error::out_of_range(
                "select_ratio",
                self.select_ratio,
                "(0, 1]",
            ));
        }
        if !(self.tau_epsilon > 0.0) {
            return Err(Error::out_of_range("tau_epsilon", self.tau_epsilon, "> 0"));
        }
        check_beta_range(self.mix_beta_range)
    }
}

/// Values of the five objectives.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub tc: f64,
    pub nc: f64,
    pub sc: f64,
    pub tnc: f64,
    pub nsc: f64,
}

impl LossTerms {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Tc => self.tc,
            Term::Nc => self.nc,
            Term::Sc => self.sc,
            Term::Tnc => self.tnc,
            Term::Nsc => self.nsc,
        }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.tc, self.nc, self.sc, self.tnc, self.nsc]
    }
}

/// `sum_term lambda_term * L_term`.
pub fn total_loss(terms: &LossTerms, lambdas: &Lambdas) -> f64 {
    terms
        .as_array()
        .iter()
        .zip(lambdas.as_array())
        .map(|(t, l)| if l == 0.0 { 0.0 } else { t * l })
        .sum()
}

/// Everything sampled for one batch position.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSample {
    pub node: usize,
    /// Masked span as 1-based token positions, inclusive.
    pub span: (usize, usize),
    /// Neighbors mixed into the node's own pass.
    pub neighbors: Vec<usize>,
    pub subgraph: ContextSubgraph,
    /// The node's most important neighbor.
    pub partner: usize,
    pub partner_subgraph: ContextSubgraph,
}

/// Parameter-dependent and random choices made while building the losses.
/// Recording them lets a second evaluation at perturbed parameters make the
/// same discrete choices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Decisions {
    /// Per anchor, batch positions of the selected token-level negatives.
    pub tc_selected: Vec<Vec<usize>>,
    /// Per anchor, mixing plan over the other positions in batch order.
    pub nc_mix: Vec<MixPlan>,
    pub tnc_perm: Vec<usize>,
    pub nsc_perm: Vec<usize>,
}

/// Anchors, positives and negatives recorded on a tape.
#[derive(Debug, Clone)]
pub struct VarBatch {
    pub anchors: Vec<Var>,
    pub positives: Vec<Var>,
    pub negatives: Vec<Vec<Var>>,
}

impl VarBatch {
    pub fn values(&self, tape: &Tape) -> ContrastiveBatch {
        let v = |x: &Var| DVector::from_column_slice(tape.value(*x).as_slice());
        ContrastiveBatch {
            anchors: self.anchors.iter().map(v).collect(),
            positives: self.positives.iter().map(v).collect(),
            negatives: self
                .negatives
                .iter()
                .map(|l| l.iter().map(v).collect())
                .collect(),
        }
    }
}

/// Differentiable form of [`hfc_loss`].
pub fn hfc_loss_on_tape(tape: &mut Tape, b: &VarBatch, alpha: f64) -> Var {
    let mut per_anchor = Vec::with_capacity(b.anchors.len());
    for ((&a, &p), negs) in b.anchors.iter().zip(&b.positives).zip(&b.negatives) {
        let pos = tape.dot(a, p);
        let pos = tape.scale(pos, -2.0 * alpha);
        let sq: Vec<Var> = negs
            .iter()
            .map(|&n| {
                let d = tape.dot(a, n);
                tape.square(d)
            })
            .collect();
        let neg = tape.mean(&sq);
        per_anchor.push(tape.add(pos, neg));
    }
    tape.mean(&per_anchor)
}

/// Encoded views of every batch position.
#[derive(Debug, Clone)]
pub struct BatchReps {
    pub nodes: Vec<usize>,
    pub full: Vec<Pass>,
    pub masked: Vec<Pass>,
    pub text_only: Vec<Var>,
    pub neighbor_text: Vec<Vec<Var>>,
    pub subgraph: Vec<Var>,
    pub partner_subgraph: Vec<Var>,
    /// Masked span representation from the unmasked pass.
    pub span_full: Vec<Var>,
    /// The same span from the masked pass.
    pub span_masked: Vec<Var>,
    /// Mean of all token states of the unmasked pass.
    pub sequence: Vec<Var>,
    /// Node temperature from the unmasked pass.
    pub tau: Vec<f64>,
}

impl BatchReps {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Encodes every view the five objectives need.
pub fn encode_batch<S: TokenSource + ?Sized>(
    tape: &mut Tape,
    enc: &mut GraphEncoder<'_, S>,
    samples: &[NodeSample],
    tau_epsilon: f64,
) -> Result<BatchReps> {
    let mut reps = BatchReps {
        nodes: Vec::new(),
        full: Vec::new(),
        masked: Vec::new(),
        text_only: Vec::new(),
        neighbor_text: Vec::new(),
        subgraph: Vec::new(),
        partner_subgraph: Vec::new(),
        span_full: Vec::new(),
        span_masked: Vec::new(),
        sequence: Vec::new(),
        tau: Vec::new(),
    };
    for s in samples {
        let full = enc.full(tape, s.node, &s.neighbors)?;
        let masked = enc.masked(tape, s.node, &s.neighbors, s.span)?;
        let text = enc.text_only(tape, s.node)?.embedding;
        let mut neighbor_text = Vec::with_capacity(s.neighbors.len());
        for &u in &s.neighbors {
            neighbor_text.push(enc.text_only(tape, u)?.embedding);
        }
        let sub = enc.subgraph(tape, &s.subgraph)?;
        let partner_sub = enc.subgraph(tape, &s.partner_subgraph)?;
        let span_full = span_on_tape(tape, &full, s.span.0, s.span.1)?;
        let span_masked = span_on_tape(tape, &masked, s.span.0, s.span.1)?;
        let sequence = span_on_tape(tape, &full, 1, full.tokens)?;

        let hv = row_value(tape, full.embedding);
        let hidden = tape.value(full.hiddens);
        let token_rows: Vec<DVector<f64>> = (1..=full.tokens)
            .map(|r| DVector::from_iterator(hidden.ncols(), hidden.row(r).iter().copied()))
            .collect();
        let tau = node_temperature(&token_rows, &hv, tau_epsilon)?;

        reps.nodes.push(s.node);
        reps.full.push(full);
        reps.masked.push(masked);
        reps.text_only.push(text);
        reps.neighbor_text.push(neighbor_text);
        reps.subgraph.push(sub);
        reps.partner_subgraph.push(partner_sub);
        reps.span_full.push(span_full);
        reps.span_masked.push(span_masked);
        reps.sequence.push(sequence);
        reps.tau.push(tau);
    }
    Ok(reps)
}

fn row_value(tape: &Tape, v: Var) -> DVector<f64> {
    DVector::from_column_slice(tape.value(v).as_slice())
}

fn others(m: usize, len: usize) -> impl Iterator<Item = usize> {
    (0..len).filter(move |&j| j != m)
}

fn need_pairs(reps: &BatchReps) -> Result<()> {
    if reps.len() < 2 {
        return Err(Error::InsufficientCandidates(format!(
            "contrastive batch needs at least 2 nodes, got {}",
            reps.len()
        )));
    }
    Ok(())
}

/// Token level: each masked span is pulled toward its unmasked counterpart
/// and pushed from selected spans of other batch positions.
pub fn tc_batch(
    tape: &Tape,
    reps: &BatchReps,
    cfg: &LossConfig,
    decisions: &mut Decisions,
    replay: bool,
) -> Result<VarBatch> {
    need_pairs(reps)?;
    let m = reps.len();
    if !replay {
        decisions.tc_selected = (0..m)
            .map(|a| {
                let pool: Vec<usize> = others(a, m).collect();
                let candidates: Vec<SelectionCandidate> = pool
                    .iter()
                    .map(|&j| SelectionCandidate {
                        rep: row_value(tape, reps.span_full[j]),
                        owner_tau: reps.tau[j].max(TAU_FLOOR),
                    })
                    .collect();
                let query = row_value(tape, reps.full[a].embedding);
                let kept =
                    select_negatives(&query, &candidates, cfg.select_ratio, cfg.select_keep)?;
                Ok(kept.into_iter().map(|i| pool[i]).collect())
            })
            .collect::<Result<_>>()?;
    }
    Ok(VarBatch {
        anchors: reps.span_full.clone(),
        positives: reps.span_masked.clone(),
        negatives: decisions
            .tc_selected
            .iter()
            .map(|sel| sel.iter().map(|&j| reps.span_full[j]).collect())
            .collect(),
    })
}

/// Node level: the text-only view against the mean of its neighbors'
/// text-only embeddings, with mixup-hardened negatives.
pub fn nc_batch(
    tape: &mut Tape,
    reps: &BatchReps,
    cfg: &LossConfig,
    decisions: &mut Decisions,
    replay: bool,
    rng: &mut impl Rng,
) -> Result<VarBatch> {
    need_pairs(reps)?;
    let m = reps.len();
    if !replay {
        decisions.nc_mix = (0..m)
            .map(|a| {
                let anchor = row_value(tape, reps.text_only[a]);
                let negs: Vec<DVector<f64>> = others(a, m)
                    .map(|j| row_value(tape, reps.text_only[j]))
                    .collect();
                plan_mixup(&anchor, &negs, cfg.mix_beta_range, rng)
            })
            .collect::<Result<_>>()?;
    }
    let mut positives = Vec::with_capacity(m);
    let mut negatives = Vec::with_capacity(m);
    for a in 0..m {
        if reps.neighbor_text[a].is_empty() {
            return Err(Error::IsolatedNode(reps.nodes[a]));
        }
        positives.push(tape.mean(&reps.neighbor_text[a]));
        let anchor = reps.text_only[a];
        let mixed = others(a, m)
            .zip(&decisions.nc_mix[a])
            .map(|(j, beta)| match beta {
                Some(b) => tape.lerp(reps.text_only[j], anchor, *b),
                None => reps.text_only[j],
            })
            .collect();
        negatives.push(mixed);
    }
    Ok(VarBatch {
        anchors: reps.text_only.clone(),
        positives,
        negatives,
    })
}

/// Subgraph level: a context subgraph against the subgraph of its most
/// important neighbor; the other positions' subgraphs are negatives.
pub fn sc_batch(reps: &BatchReps) -> Result<VarBatch> {
    need_pairs(reps)?;
    let m = reps.len();
    Ok(VarBatch {
        anchors: reps.subgraph.clone(),
        positives: reps.partner_subgraph.clone(),
        negatives: (0..m)
            .map(|a| others(a, m).map(|j| reps.subgraph[j]).collect())
            .collect(),
    })
}

/// Negatives from a shuffled list, skipping the slot holding the anchor's
/// own item.
fn corrupted_negatives(items: &[Var], perm: &[usize]) -> Vec<Vec<Var>> {
    (0..items.len())
        .map(|a| {
            perm.iter()
                .filter(|&&src| src != a)
                .map(|&src| items[src])
                .collect()
        })
        .collect()
}

/// Token-node: the sequence representation against the node embedding, with
/// shuffled node embeddings as negatives.
pub fn tnc_batch(
    reps: &BatchReps,
    decisions: &mut Decisions,
    replay: bool,
    rng: &mut impl Rng,
) -> Result<VarBatch> {
    need_pairs(reps)?;
    if !replay {
        decisions.tnc_perm = shuffle_permutation(reps.len(), rng)?;
    }
    let embeddings: Vec<Var> = reps.full.iter().map(|p| p.embedding).collect();
    Ok(VarBatch {
        anchors: reps.sequence.clone(),
        positives: embeddings.clone(),
        negatives: corrupted_negatives(&embeddings, &decisions.tnc_perm),
    })
}

/// Node-subgraph: the node embedding against its context subgraph, with
/// shuffled subgraph representations as negatives.
pub fn nsc_batch(
    reps: &BatchReps,
    decisions: &mut Decisions,
    replay: bool,
    rng: &mut impl Rng,
) -> Result<VarBatch> {
    need_pairs(reps)?;
    if !replay {
        decisions.nsc_perm = shuffle_permutation(reps.len(), rng)?;
    }
    Ok(VarBatch {
        anchors: reps.full.iter().map(|p| p.embedding).collect(),
        positives: reps.subgraph.clone(),
        negatives: corrupted_negatives(&reps.subgraph, &decisions.nsc_perm),
    })
}

/// The five objectives and their weighted total, on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub batches: [VarBatch; 5],
    pub terms: [Var; 5],
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossTerms {
        let v = |t: Term| tape.scalar(self.terms[t as usize]);
        LossTerms {
            tc: v(Term::Tc),
            nc: v(Term::Nc),
            sc: v(Term::Sc),
            tnc: v(Term::Tnc),
            nsc: v(Term::Nsc),
        }
    }
}

/// Builds all five objectives. With `replay`, `decisions` must come from an
/// earlier call on the same samples and is reused; otherwise it is filled
/// from the current values and `rng`.
pub fn hierarchical_losses(
    tape: &mut Tape,
    reps: &BatchReps,
    cfg: &LossConfig,
    decisions: &mut Decisions,
    replay: bool,
    rng: &mut impl Rng,
) -> Result<LossVars> {
    let tc = tc_batch(tape, reps, cfg, decisions, replay)?;
    let nc = nc_batch(tape, reps, cfg, decisions, replay, rng)?;
    let sc = sc_batch(reps)?;
    let tnc = tnc_batch(reps, decisions, replay, rng)?;
    let nsc = nsc_batch(reps, decisions, replay, rng)?;
    let batches = [tc, nc, sc, tnc, nsc];
    let terms = [0, 1, 2, 3, 4].map(|i| hfc_loss_on_tape(tape, &batches[i], cfg.alpha));
    let weighted: Vec<Var> = terms
        .iter()
        .zip(cfg.lambdas.as_array())
        .filter(|(_, l)| *l != 0.0)
        .map(|(&t, l)| tape.scale(t, l))
        .collect();
    let total = if weighted.is_empty() {
        tape.scale(terms[0], 0.0)
    } else {
        tape.sum(&weighted)
    };
    Ok(LossVars {
        batches,
        terms,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn random_batch(rng: &mut ChaCha8Rng) -> ContrastiveBatch {
        let m = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let vec = |rng: &mut ChaCha8Rng| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let anchors = (0..m).map(|_| vec(rng)).collect();
        let positives = (0..m).map(|_| vec(rng)).collect();
        let negatives = (0..m)
            .map(|_| {
                let k = rng.random_range(1..=6);
                (0..k).map(|_| vec(rng)).collect()
            })
            .collect();
        ContrastiveBatch {
            anchors,
            positives,
            negatives,
        }
    }

    #[test]
    fn hfc_loss_by_hand() {
        let b = ContrastiveBatch {
            anchors: vec![v(&[1., 0.])],
            positives: vec![v(&[1., 0.])],
            negatives: vec![vec![v(&[0., 1.])]],
        };
        assert_eq!(hfc_loss(&b, 0.5).unwrap(), -1.0);
        let b = ContrastiveBatch {
            negatives: vec![vec![v(&[1., 0.])]],
            ..b
        };
        assert_eq!(hfc_loss(&b, 0.5).unwrap(), 0.0);
        assert!(hfc_loss(&b, 1.5).is_err());
    }

    #[test]
    fn hfc_loss_rejects_malformed_batches() {
        let b = ContrastiveBatch {
            anchors: vec![v(&[1., 0.])],
            positives: vec![v(&[1., 0., 0.])],
            negatives: vec![vec![v(&[0., 1.])]],
        };
        assert!(matches!(
            hfc_loss(&b, 0.5),
            Err(Error::DimensionMismatch(_))
        ));
        let b = ContrastiveBatch {
            anchors: vec![v(&[1., 0.])],
            positives: vec![v(&[1., 0.])],
            negatives: vec![vec![]],
        };
        assert!(matches!(
            hfc_loss(&b, 0.5),
            Err(Error::InsufficientCandidates(_))
        ));
    }

    #[test]
    fn alpha_one_is_spectral_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let b = random_batch(&mut rng);
            assert_eq!(hfc_loss(&b, 1.0).unwrap(), spectral_loss(&b).unwrap());
        }
    }

    #[test]
    fn negative_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let b = random_batch(&mut rng);
            let mut r = b.clone();
            for list in &mut r.negatives {
                list.reverse();
            }
            let (x, y) = (hfc_loss(&b, 0.3).unwrap(), hfc_loss(&r, 0.3).unwrap());
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let b = random_batch(&mut rng);
            let mut tape = Tape::new();
            let mut leaf = |x: &DVector<f64>| tape.constant_row(x.as_slice());
            let vb = VarBatch {
                anchors: b.anchors.iter().map(&mut leaf).collect(),
                positives: b.positives.iter().map(&mut leaf).collect(),
                negatives: b
                    .negatives
                    .iter()
                    .map(|l| l.iter().map(&mut leaf).collect())
                    .collect(),
            };
            let out = hfc_loss_on_tape(&mut tape, &vb, 0.7);
            assert!((tape.scalar(out) - hfc_loss(&b, 0.7).unwrap()).abs() < 1e-12);
            assert_eq!(vb.values(&tape), b);
        }
    }

    #[test]
    fn temperature_examples() {
        let hv = v(&[0., 0.]);
        let tau = node_temperature(&[v(&[1., 0.]), v(&[0., 3.])], &hv, 1.0).unwrap();
        assert!((tau - 4.0 / (2.0 * 3f64.ln())).abs() < 1e-12);
        assert!((tau - 1.82048).abs() < 1e-5);
        let tau = node_temperature(&[v(&[2., 0.])], &hv, 1.0).unwrap();
        assert!((tau - 2.88539).abs() < 1e-5);
        assert_eq!(
            node_temperature(&[hv.clone(), hv.clone()], &hv, 1.0).unwrap(),
            0.0
        );
        assert!(node_temperature(&[], &hv, 1.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(
            scaled_similarity(&v(&[1., 0.]), &v(&[1., 0.]), 2.0).unwrap(),
            0.5
        );
        assert_eq!(
            scaled_similarity(&v(&[0., 1.]), &v(&[1., 0.]), 2.0).unwrap(),
            0.0
        );
        let a = scaled_similarity(&v(&[0.3, 0.4]), &v(&[1., 2.]), 1.5).unwrap();
        let b = scaled_similarity(&v(&[-0.3, -0.4]), &v(&[1., 2.]), 1.5).unwrap();
        assert_eq!(a, -b);
        assert!(scaled_similarity(&v(&[1.]), &v(&[1.]), 0.0).is_err());
    }

    fn cands(sims: &[f64]) -> Vec<SelectionCandidate> {
        sims.iter()
            .map(|&s| SelectionCandidate {
                rep: v(&[s, 0.]),
                owner_tau: 1.0,
            })
            .collect()
    }

    #[test]
    fn selection_examples() {
        let q = v(&[1., 0.]);
        let c = cands(&[0.9, 0.1, 0.5]);
        assert_eq!(
            select_negatives(&q, &c, 1.0, SelectKeep::Lowest).unwrap(),
            vec![0, 1, 2]
        );
        assert_eq!(
            select_negatives(&q, &c, 1.0 / 3.0, SelectKeep::Lowest).unwrap(),
            vec![1]
        );
        assert_eq!(
            select_negatives(&q, &c, 1.0 / 3.0, SelectKeep::Highest).unwrap(),
            vec![0]
        );
        let tied = cands(&[0.2, 0.2, 0.9]);
        assert_eq!(
            select_negatives(&q, &tied, 1.0 / 3.0, SelectKeep::Lowest).unwrap(),
            vec![0]
        );
        assert!(select_negatives(&q, &c, 0.0, SelectKeep::Lowest).is_err());
        assert!(select_negatives(&q, &[], 0.5, SelectKeep::Lowest).is_err());
    }

    #[test]
    fn owner_temperature_rescales_scores() {
        let q = v(&[1., 0.]);
        let c = vec![
            SelectionCandidate {
                rep: v(&[0.4, 0.]),
                owner_tau: 0.1,
            },
            SelectionCandidate {
                rep: v(&[0.9, 0.]),
                owner_tau: 10.0,
            },
        ];
        assert_eq!(
            select_negatives(&q, &c, 0.5, SelectKeep::Lowest).unwrap(),
            vec![1]
        );
    }

    #[test]
    fn selection_size_is_ceiling() {
        let q = v(&[1., 0.]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..20);
            let ratio: f64 = rng.random_range(0.01..=1.0);
            let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kept = select_negatives(&q, &cands(&sims), ratio, SelectKeep::Lowest).unwrap();
            assert_eq!(
                kept.len(),
                ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize
            );
        }
    }

    #[test]
    fn mixup_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let anchor = v(&[1., 0.]);
        let negs = vec![v(&[0., 1.]), v(&[0.5, 0.5]), v(&[-1., 0.])];
        let same = mix_hard_negatives(&anchor, &negs, (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(same, negs);

        let mid = mix_hard_negatives(&anchor, &[v(&[0., 1.])], (0.5, 0.5), &mut rng).unwrap();
        assert_eq!(mid, vec![v(&[0.5, 0.5])]);

        let a = mix_hard_negatives(
            &anchor,
            &negs,
            (0.2, 0.8),
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        let b = mix_hard_negatives(
            &anchor,
            &negs,
            (0.2, 0.8),
            &mut ChaCha8Rng::seed_from_u64(6),
        );
        assert_eq!(a.unwrap(), b.unwrap());

        // Only the most similar negative (index 1) is mixed when len = 3.
        let plan = plan_mixup(&anchor, &negs, (0.2, 0.8), &mut rng).unwrap();
        assert!(plan[0].is_none() && plan[1].is_some() && plan[2].is_none());
    }

    #[test]
    fn shuffle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            assert_eq!(shuffle_corrupt(&[1, 2], &mut rng).unwrap(), vec![2, 1]);
        }
        for m in 2..8 {
            let items: Vec<usize> = (0..m).collect();
            let out = shuffle_corrupt(&items, &mut rng).unwrap();
            assert_ne!(out, items);
            let mut sorted = out.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, items);
        }
        let a = shuffle_corrupt(&[1, 2, 3, 4], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = shuffle_corrupt(&[1, 2, 3, 4], &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(shuffle_corrupt(&[1], &mut rng).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let terms = LossTerms {
            tc: -1.0,
            nc: 0.0,
            sc: 2.0,
            tnc: 0.5,
            nsc: -0.5,
        };
        assert_eq!(total_loss(&terms, &Lambdas::default()), 1.0);
        assert_eq!(total_loss(&terms, &Lambdas::only(Term::Sc)), 2.0);
        let zero = Lambdas {
            tc: 0.0,
            nc: 0.0,
            sc: 0.0,
            tnc: 0.0,
            nsc: 0.0,
        };
        assert_eq!(total_loss(&terms, &zero), 0.0);
    }

    #[test]
    fn corrupted_negatives_skip_own_item() {
        let mut tape = Tape::new();
        let items: Vec<Var> = (0..3).map(|i| tape.constant_row(&[i as f64])).collect();
        let negs = corrupted_negatives(&items, &[2, 0, 1]);
        assert_eq!(negs[0], vec![items[2], items[1]]);
        assert_eq!(negs[1], vec![items[2], items[0]]);
        assert_eq!(negs[2], vec![items[0], items[1]]);
    }
}
