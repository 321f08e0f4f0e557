//! A miniature GNN-nested text encoder.
//!
//! Each node's token sequence is prefixed with a summary slot and run through
//! single-head attention blocks without normalization layers. After every
//! block the summary slot receives `gate * mean(neighbor embeddings)`, so
//! neighborhood information enters between text layers rather than after
//! them. The node embedding is the final summary slot.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::ppr::ContextSubgraph;
use crate::tape::{Gradients, Tape, Var};

/// Token-table row of the summary slot.
pub const SUMMARY_TOKEN: usize = 0;
/// Token-table row substituted at masked positions.
pub const MASK_TOKEN: usize = 1;
/// Graph token `t` occupies token-table row `t + RESERVED_TOKENS`.
pub const RESERVED_TOKENS: usize = 2;

const FFN_MULTIPLIER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Rows of the token table, reserved rows included.
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    /// Summary slot plus at most `max_seq_len - 1` tokens.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn for_graph(
        g: &TextAttributedGraph,
        dim: usize,
        layers: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> Self {
        Self {
            vocab_size: g.vocab_size() + RESERVED_TOKENS,
            dim,
            layers,
            max_seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::out_of_range("dim", self.dim, ">= 2"));
        }
        if self.layers < 1 {
            return Err(Error::out_of_range("layers", self.layers, ">= 1"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::out_of_range("max_seq_len", self.max_seq_len, ">= 2"));
        }
        if self.vocab_size <= RESERVED_TOKENS {
            return Err(Error::out_of_range(
                "vocab_size",
                self.vocab_size,
                format!("> {RESERVED_TOKENS}"),
            ));
        }
        Ok(())
    }

    /// Number of real tokens a node contributes to a pass.
    pub fn token_budget(&self) -> usize {
        self.max_seq_len - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    /// `1 x 1` neighbor-mixing gate.
    pub gate: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: DMatrix<f64>,
    pub position_embedding: DMatrix<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// All tensors filled by `fill(rows, cols)`, in declaration order.
    fn build(config: EncoderConfig, mut fill: impl FnMut(usize, usize) -> DMatrix<f64>) -> Self {
        let d = config.dim;
        let h = FFN_MULTIPLIER * d;
        let token_embedding = fill(config.vocab_size, d);
        let position_embedding = fill(config.max_seq_len, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: fill(d, d),
                wk: fill(d, d),
                wv: fill(d, d),
                w1: fill(d, h),
                b1: fill(1, h),
                w2: fill(h, d),
                b2: fill(1, d),
                gate: fill(1, 1),
            })
            .collect();
        Self {
            config,
            token_embedding,
            position_embedding,
            layers,
        }
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        Self::build(config, DMatrix::zeros)
    }

    pub fn tensors(&self) -> Vec<&DMatrix<f64>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.w1, &l.b1, &l.w2, &l.b2, &l.gate]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
                &mut l.gate,
            ]);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Every parameter in declaration order, each tensor column-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.parameter_count());
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[at..at + n]);
            at += n;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Records every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            token: tape.leaf(self.token_embedding.clone()),
            position: tape.leaf(self.position_embedding.clone()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    wq: tape.leaf(l.wq.clone()),
                    wk: tape.leaf(l.wk.clone()),
                    wv: tape.leaf(l.wv.clone()),
                    w1: tape.leaf(l.w1.clone()),
                    b1: tape.leaf(l.b1.clone()),
                    w2: tape.leaf(l.w2.clone()),
                    b2: tape.leaf(l.b2.clone()),
                    gate: tape.leaf(l.gate.clone()),
                })
                .collect(),
            config: self.config,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Binary checkpoint: magic, version, config, then each tensor as
    /// `rows, cols` followed by column-major little-endian `f64`s.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let c = &self.config;
        for x in [c.vocab_size, c.dim, c.layers, c.max_seq_len] {
            w.write_all(&(x as u64).to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u64).to_le_bytes())?;
        for t in tensors {
            w.write_all(&(t.nrows() as u64).to_le_bytes())?;
            w.write_all(&(t.ncols() as u64).to_le_bytes())?;
            for x in t.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = EncoderConfig {
            vocab_size: read_u64(r)? as usize,
            dim: read_u64(r)? as usize,
            layers: read_u64(r)? as usize,
            max_seq_len: read_u64(r)? as usize,
            seed: read_u64(r)?,
        };
        config.validate()?;
        let mut params = Self::zeros(config);
        let count = read_u64(r)? as usize;
        if count != params.tensors().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                params.tensors().len()
            )));
        }
        for t in params.tensors_mut() {
            let (rows, cols) = (read_u64(r)? as usize, read_u64(r)? as usize);
            if (rows, cols) != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor shape {rows}x{cols}, expected {}x{}",
                    t.nrows(),
                    t.ncols()
                )));
            }
            for x in t.iter_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                *x = f64::from_le_bytes(b);
            }
        }
        Ok(params)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TAGCLCKP";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Uniform parameters in `[-1/sqrt(d), 1/sqrt(d))` from the config seed.
pub fn init_encoder(config: EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = 1.0 / (config.dim as f64).sqrt();
    Ok(EncoderParams::build(config, |r, c| {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-half..half))
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    gate: Var,
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    token: Var,
    position: Var,
    layers: Vec<LayerVars>,
    config: EncoderConfig,
}

impl ParamVars {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token, self.position];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.w1, l.b1, l.w2, l.b2, l.gate]);
        }
        out
    }

    /// Gradients shaped like the parameters; untouched tensors are zero.
    pub fn collect(&self, grads: &Gradients) -> EncoderParams {
        let mut out = EncoderParams::zeros(self.config);
        for (dst, v) in out.tensors_mut().into_iter().zip(self.vars()) {
            if let Some(g) = grads.get(v) {
                dst.copy_from(g);
            }
        }
        out
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Pass {
    /// `(1 + L) x d` final hidden states; row 0 is the summary slot.
    pub hiddens: Var,
    /// `1 x d` summary-slot state, the node embedding.
    pub embedding: Var,
    /// Number of real tokens `L` in the pass.
    pub tokens: usize,
}

fn check_mask(mask: Option<(usize, usize)>, len: usize) -> Result<()> {
    if let Some((i, j)) = mask {
        if i < 1 || i > j || j > len {
            return Err(Error::InvalidSpan {
                start: i,
                end: j,
                len,
            });
        }
    }
    Ok(())
}

/// One forward pass over a token sequence.
///
/// `mask = Some((i, j))` replaces hidden-row positions `i..=j` (1-based over
/// tokens) with the mask embedding. `neighbors` are `1 x d` embeddings mixed
/// into the summary slot after every block; `None` or an empty slice
/// disables mixing.
pub fn forward(
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: &[usize],
    mask: Option<(usize, usize)>,
    neighbors: Option<&[Var]>,
) -> Result<Pass> {
    forward_traced(tape, pv, tokens, mask, neighbors, None)
}

fn forward_traced(
    tape: &mut Tape,
    pv: &ParamVars,
    tokens: &[usize],
    mask: Option<(usize, usize)>,
    neighbors: Option<&[Var]>,
    mut attention_trace: Option<&mut Vec<Var>>,
) -> Result<Pass> {
    let cfg = &pv.config;
    let len = tokens.len().min(cfg.token_budget());
    if len == 0 {
        return Err(Error::InvalidGraph("empty token sequence".into()));
    }
    check_mask(mask, len)?;
    let mut ids = Vec::with_capacity(len + 1);
    ids.push(SUMMARY_TOKEN);
    for (p, &t) in tokens[..len].iter().enumerate() {
        let row = t + RESERVED_TOKENS;
        if row >= cfg.vocab_size {
            return Err(Error::out_of_range(
                "token id",
                t,
                format!("< {}", cfg.vocab_size - RESERVED_TOKENS),
            ));
        }
        let masked = mask.is_some_and(|(i, j)| (i..=j).contains(&(p + 1)));
        ids.push(if masked { MASK_TOKEN } else { row });
    }
    let tok = tape.gather_rows(pv.token, ids);
    let pos = tape.gather_rows(pv.position, (0..=len).collect());
    let mut x = tape.add(tok, pos);

    let neighbor_mean = match neighbors {
        Some(list) if !list.is_empty() => Some(tape.mean(list)),
        _ => None,
    };
    let inv_sqrt_d = 1.0 / (cfg.dim as f64).sqrt();
    for l in &pv.layers {
        let q = tape.matmul(x, l.wq);
        let k = tape.matmul(x, l.wk);
        let v = tape.matmul(x, l.wv);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, inv_sqrt_d);
        let attn = tape.softmax_rows(scores);
        if let Some(trace) = attention_trace.as_deref_mut() {
            trace.push(attn);
        }
        let ctx = tape.matmul(attn, v);
        x = tape.add(x, ctx);

        let h = tape.matmul(x, l.w1);
        let h = tape.add_row(h, l.b1);
        let h = tape.tanh(h);
        let f = tape.matmul(h, l.w2);
        let f = tape.add_row(f, l.b2);
        x = tape.add(x, f);

        if let Some(m) = neighbor_mean {
            let mix = tape.mul_scalar(m, l.gate);
            x = tape.add_to_row(x, 0, mix);
        }
    }
    let embedding = tape.row(x, 0);
    Ok(Pass {
        hiddens: x,
        embedding,
        tokens: len,
    })
}

/// Mean of hidden rows `i..=j` as a `1 x d` value.
pub fn span_on_tape(tape: &mut Tape, pass: &Pass, i: usize, j: usize) -> Result<Var> {
    check_mask(Some((i, j)), pass.tokens)?;
    let rows = tape.slice_rows(pass.hiddens, i, j - i + 1);
    Ok(tape.mean_rows(rows))
}

/// Token sequences by graph node id.
pub trait TokenSource {
    fn node_tokens(&self, node: usize) -> Option<&[usize]>;
}

impl TokenSource for TextAttributedGraph {
    fn node_tokens(&self, node: usize) -> Option<&[usize]> {
        (node < self.node_count()).then(|| self.tokens(node))
    }
}

impl TokenSource for ContextSubgraph {
    fn node_tokens(&self, node: usize) -> Option<&[usize]> {
        let pos = self.member_ids.iter().position(|&m| m == node)?;
        Some(&self.tokens[pos])
    }
}

/// Memoizing encoder over one tape: each node's text-only pass and each
/// `(node, neighbor set)` full pass is recorded once.
pub struct GraphEncoder<'a, S: TokenSource + ?Sized> {
    source: &'a S,
    pv: ParamVars,
    text_only: BTreeMap<usize, Pass>,
    full: BTreeMap<(usize, Vec<usize>), Pass>,
}

impl<'a, S: TokenSource + ?Sized> GraphEncoder<'a, S> {
    pub fn new(source: &'a S, pv: ParamVars) -> Self {
        Self {
            source,
            pv,
            text_only: BTreeMap::new(),
            full: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ParamVars {
        &self.pv
    }

    fn tokens(&self, node: usize) -> Result<&'a [usize]> {
        self.source
            .node_tokens(node)
            .ok_or_else(|| Error::out_of_range("node", node, "a known node"))
    }

    /// Pass with neighbor mixing disabled.
    pub fn text_only(&mut self, tape: &mut Tape, node: usize) -> Result<Pass> {
        if let Some(p) = self.text_only.get(&node) {
            return Ok(*p);
        }
        let p = forward(tape, &self.pv, self.tokens(node)?, None, None)?;
        self.text_only.insert(node, p);
        Ok(p)
    }

    /// Pass mixing in the text-only embeddings of `neighbors`.
    pub fn full(&mut self, tape: &mut Tape, node: usize, neighbors: &[usize]) -> Result<Pass> {
        let mut key = neighbors.to_vec();
        key.sort_unstable();
        if let Some(p) = self.full.get(&(node, key.clone())) {
            return Ok(*p);
        }
        let p = self.pass_with(tape, node, &key, None)?;
        self.full.insert((node, key), p);
        Ok(p)
    }

    /// Uncached full pass with a masked span.
    pub fn masked(
        &mut self,
        tape: &mut Tape,
        node: usize,
        neighbors: &[usize],
        span: (usize, usize),
    ) -> Result<Pass> {
        let mut key = neighbors.to_vec();
        key.sort_unstable();
        self.pass_with(tape, node, &key, Some(span))
    }

    fn pass_with(
        &mut self,
        tape: &mut Tape,
        node: usize,
        neighbors: &[usize],
        mask: Option<(usize, usize)>,
    ) -> Result<Pass> {
        let mut embs = Vec::with_capacity(neighbors.len());
        for &u in neighbors {
            embs.push(self.text_only(tape, u)?.embedding);
        }
        forward(tape, &self.pv, self.tokens(node)?, mask, Some(&embs))
    }

    /// Mean readout over member embeddings, each member mixing its
    /// within-subgraph neighbors.
    pub fn subgraph(&mut self, tape: &mut Tape, sub: &ContextSubgraph) -> Result<Var> {
        if sub.is_empty() {
            return Err(Error::InvalidGraph("empty context subgraph".into()));
        }
        let mut rows = Vec::with_capacity(sub.len());
        for pos in 0..sub.len() {
            let local: Vec<usize> = sub
                .local_neighbors(pos)
                .into_iter()
                .map(|q| sub.member_ids[q])
                .collect();
            rows.push(self.full(tape, sub.member_ids[pos], &local)?.embedding);
        }
        let h = tape.stack_rows(&rows);
        Ok(tape.mean_rows(h))
    }
}

/// Values of one node's passes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEncoding {
    /// `(1 + L) x d`; row 0 is the summary slot.
    pub token_hiddens: DMatrix<f64>,
    pub node_embedding: DVector<f64>,
    pub text_only_embedding: DVector<f64>,
}

fn row_vector(tape: &Tape, v: Var) -> DVector<f64> {
    DVector::from_iterator(tape.value(v).len(), tape.value(v).iter().copied())
}

/// Encodes node `v` of `g`, mixing the given neighbor embeddings.
pub fn encode_node(
    p: &EncoderParams,
    g: &TextAttributedGraph,
    v: usize,
    neighbor_embeddings: &[DVector<f64>],
    mask: Option<(usize, usize)>,
) -> Result<NodeEncoding> {
    if v >= g.node_count() {
        return Err(Error::out_of_range(
            "node",
            v,
            format!("< {}", g.node_count()),
        ));
    }
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape);
    let neighbors: Vec<Var> = neighbor_embeddings
        .iter()
        .map(|e| {
            if e.len() != p.config.dim {
                return Err(Error::DimensionMismatch(format!(
                    "neighbor embedding of length {}, expected {}",
                    e.len(),
                    p.config.dim
                )));
            }
            Ok(tape.constant_row(e.as_slice()))
        })
        .collect::<Result<_>>()?;
    let full = forward(&mut tape, &pv, g.tokens(v), mask, Some(&neighbors))?;
    let text = forward(&mut tape, &pv, g.tokens(v), mask, None)?;
    Ok(NodeEncoding {
        token_hiddens: tape.value(full.hiddens).clone(),
        node_embedding: row_vector(&tape, full.embedding),
        text_only_embedding: row_vector(&tape, text.embedding),
    })
}

/// Attention matrices of a text-only pass over `tokens`, one per layer.
pub fn attention_maps(p: &EncoderParams, tokens: &[usize]) -> Result<Vec<DMatrix<f64>>> {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape);
    let mut trace = Vec::new();
    forward_traced(&mut tape, &pv, tokens, None, None, Some(&mut trace))?;
    Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
}

/// Mean of `token_hiddens` rows `i..=j`.
pub fn span_representation(enc: &NodeEncoding, i: usize, j: usize) -> Result<DVector<f64>> {
    let len = enc.token_hiddens.nrows() - 1;
    check_mask(Some((i, j)), len)?;
    let rows = enc.token_hiddens.rows(i, j - i + 1);
    Ok(DVector::from_iterator(
        rows.ncols(),
        rows.row_mean().iter().copied(),
    ))
}

/// Subgraph embedding: members encoded with one round of within-subgraph
/// aggregation, then mean readout.
pub fn encode_subgraph(p: &EncoderParams, sub: &ContextSubgraph) -> Result<DVector<f64>> {
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape);
    let mut enc = GraphEncoder::new(sub, pv);
    let s = enc.subgraph(&mut tape, sub)?;
    Ok(row_vector(&tape, s))
}

/// Embeddings of every node, each mixing all of its neighbors in `g`.
/// Row `v` is the embedding of node `v`.
pub fn embed_all(p: &EncoderParams, g: &TextAttributedGraph) -> Result<DMatrix<f64>> {
    let n = g.node_count();
    let d = p.config.dim;
    let mut tape = Tape::new();
    let pv = p.bind(&mut tape);
    let mut text = Vec::with_capacity(n);
    for v in 0..n {
        let pass = forward(&mut tape, &pv, g.tokens(v), None, None)?;
        text.push(tape.value(pass.embedding).clone());
    }
    // Fresh tapes keep memory flat for large graphs.
    let mut out = DMatrix::zeros(n, d);
    for v in 0..n {
        let mut t = Tape::new();
        let pv = p.bind(&mut t);
        let neighbors: Vec<Var> = g
            .neighbors(v)
            .iter()
            .map(|&u| t.leaf(text[u].clone()))
            .collect();
        let pass = forward(&mut t, &pv, g.tokens(v), None, Some(&neighbors))?;
        out.row_mut(v).copy_from(t.value(pass.embedding));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_matrices;
    use crate::ppr::{ppr_importance, sample_subgraph};

    fn small_graph() -> TextAttributedGraph {
        TextAttributedGraph::new(
            (0..4).map(|i| i.to_string()).collect(),
            vec![
                vec!["a".into(), "b".into(), "c".into()],
                vec!["b".into(), "d".into()],
                vec!["e".into(), "a".into(), "a".into(), "f".into()],
                vec!["c".into()],
            ],
            None,
            &[(0, 1), (1, 2), (2, 3), (0, 2)],
        )
        .unwrap()
    }

    fn cfg(g: &TextAttributedGraph, seed: u64) -> EncoderConfig {
        EncoderConfig::for_graph(g, 4, 2, 6, seed)
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let g = small_graph();
        let a = init_encoder(cfg(&g, 1)).unwrap();
        let b = init_encoder(cfg(&g, 1)).unwrap();
        let c = init_encoder(cfg(&g, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
        let half = 0.5;
        assert!(a.flatten().iter().all(|x| x.abs() <= half));
    }

    #[test]
    fn parameter_count_by_shape() {
        let cfg = EncoderConfig {
            vocab_size: 3,
            dim: 2,
            layers: 1,
            max_seq_len: 5,
            seed: 0,
        };
        let p = init_encoder(cfg).unwrap();
        let t = 5;
        assert_eq!(
            p.parameter_count(),
            3 * 2 + t * 2 + 3 * 4 + (2 * 8 + 8) + (8 * 2 + 2) + 1
        );
    }

    #[test]
    fn invalid_configs() {
        let base = EncoderConfig {
            vocab_size: 5,
            dim: 4,
            layers: 1,
            max_seq_len: 4,
            seed: 0,
        };
        assert!(init_encoder(EncoderConfig { dim: 1, ..base }).is_err());
        assert!(init_encoder(EncoderConfig { layers: 0, ..base }).is_err());
        assert!(init_encoder(EncoderConfig {
            max_seq_len: 1,
            ..base
        })
        .is_err());
    }

    #[test]
    fn zero_parameters_give_zero_embedding() {
        let g = small_graph();
        let p = EncoderParams::zeros(cfg(&g, 0));
        let enc = encode_node(&p, &g, 0, &[DVector::from_element(4, 3.0)], Some((1, 2))).unwrap();
        assert_eq!(enc.node_embedding, DVector::zeros(4));
    }

    #[test]
    fn empty_neighbors_match_disabled_mixing() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 4)).unwrap();
        let enc = encode_node(&p, &g, 2, &[], None).unwrap();
        assert_eq!(enc.node_embedding, enc.text_only_embedding);
        let again = encode_node(&p, &g, 2, &[], None).unwrap();
        assert_eq!(enc, again);
    }

    #[test]
    fn embedding_is_summary_row_and_truncates() {
        let g = small_graph();
        let p = init_encoder(EncoderConfig::for_graph(&g, 4, 1, 3, 7)).unwrap();
        let n = DVector::from_element(4, 0.3);
        let enc = encode_node(&p, &g, 2, &[n], None).unwrap();
        assert_eq!(enc.token_hiddens.nrows(), 3);
        assert_eq!(enc.token_hiddens.row(0).transpose(), enc.node_embedding);
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 5)).unwrap();
        let a = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let b = DVector::from_vec(vec![-0.5, 0.6, 0.0, 0.2]);
        let c = DVector::from_vec(vec![0.9, 0.1, -0.3, 0.0]);
        let x = encode_node(&p, &g, 0, &[a.clone(), b.clone(), c.clone()], None).unwrap();
        let y = encode_node(&p, &g, 0, &[c, a, b], None).unwrap();
        assert!((x.node_embedding - y.node_embedding).amax() < 1e-12);
    }

    #[test]
    fn masking_changes_only_masked_inputs() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 5)).unwrap();
        let plain = encode_node(&p, &g, 0, &[], None).unwrap();
        let masked = encode_node(&p, &g, 0, &[], Some((2, 3))).unwrap();
        assert_ne!(plain.token_hiddens, masked.token_hiddens);
        assert!(encode_node(&p, &g, 0, &[], Some((0, 1))).is_err());
        assert!(encode_node(&p, &g, 0, &[], Some((2, 4))).is_err());
        assert!(encode_node(&p, &g, 0, &[], Some((3, 2))).is_err());
    }

    #[test]
    fn span_examples() {
        let enc = NodeEncoding {
            token_hiddens: DMatrix::from_row_slice(3, 2, &[9., 9., 1., 0., 0., 1.]),
            node_embedding: DVector::from_vec(vec![9., 9.]),
            text_only_embedding: DVector::from_vec(vec![9., 9.]),
        };
        assert_eq!(
            span_representation(&enc, 1, 1).unwrap().as_slice(),
            &[1.0, 0.0]
        );
        assert_eq!(
            span_representation(&enc, 1, 2).unwrap().as_slice(),
            &[0.5, 0.5]
        );
        assert!(span_representation(&enc, 0, 1).is_err());
        assert!(span_representation(&enc, 2, 3).is_err());
    }

    #[test]
    fn subgraph_readout() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 6)).unwrap();
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();

        let single = sample_subgraph(&g, &s, 3, 1).unwrap();
        let emb = encode_subgraph(&p, &single).unwrap();
        let own = encode_node(&p, &g, 3, &[], None).unwrap();
        assert_eq!(emb, own.node_embedding);

        let sub = sample_subgraph(&g, &s, 0, 3).unwrap();
        let mut shuffled = sub.clone();
        let order = [2, 0, 1];
        shuffled.member_ids = order.iter().map(|&i| sub.member_ids[i]).collect();
        shuffled.tokens = order.iter().map(|&i| sub.tokens[i].clone()).collect();
        shuffled.adjacency = DMatrix::from_fn(3, 3, |a, b| sub.adjacency[(order[a], order[b])]);
        let x = encode_subgraph(&p, &sub).unwrap();
        let y = encode_subgraph(&p, &shuffled).unwrap();
        assert!((x - y).amax() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 8)).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        let q = EncoderParams::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(
            p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            q.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(p.config, q.config);
        buf[0] = b'X';
        assert!(EncoderParams::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let g = small_graph();
        let p = init_encoder(cfg(&g, 9)).unwrap();
        let maps = attention_maps(&p, g.tokens(2)).unwrap();
        assert_eq!(maps.len(), 2);
        for m in maps {
            assert_eq!(m.shape(), (5, 5));
            for r in m.row_iter() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
