//! Personalized PageRank importance scores and context-subgraph sampling.
//!
//! Row `i` of the importance matrix is the PageRank distribution of a walk
//! that teleports back to node `i` with probability `alpha_ppr`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{GraphMatrices, TextAttributedGraph};

pub const DEFAULT_ALPHA_PPR: f64 = 0.15;

/// How the score matrix is formed from the column-normalized adjacency `Ā`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PprForm {
    /// `alpha (I - (1 - alpha) Ā)^{-1}`, the stationary personalized walk.
    #[default]
    Inverse,
    /// `alpha (I - (1 - alpha) Ā)` without the inverse. Only for comparison
    /// runs; rows are not distributions.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMatrix {
    /// Row `i` holds the scores personalized at node `i`.
    pub scores: DMatrix<f64>,
    pub alpha_ppr: f64,
    pub form: PprForm,
}

impl ImportanceMatrix {
    pub fn node_count(&self) -> usize {
        self.scores.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.scores.row(i).iter().copied().collect()
    }
}

pub fn ppr_importance(gm: &GraphMatrices, alpha_ppr: f64) -> Result<ImportanceMatrix> {
    ppr_importance_with(gm, alpha_ppr, PprForm::Inverse)
}

pub fn ppr_importance_with(
    gm: &GraphMatrices,
    alpha_ppr: f64,
    form: PprForm,
) -> Result<ImportanceMatrix> {
    check_alpha(alpha_ppr)?;
    if let Some(i) = gm.degree.iter().position(|&d| d == 0.0) {
        return Err(Error::IsolatedNode(i));
    }
    let n = gm.node_count();
    let system = DMatrix::<f64>::identity(n, n) - &gm.col_norm_adjacency * (1.0 - alpha_ppr);
    let columns = match form {
        PprForm::Literal => system * alpha_ppr,
        PprForm::Inverse => {
            // Column i of the solution is the walk personalized at i.
            let rhs = DMatrix::<f64>::identity(n, n) * alpha_ppr;
            system
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Singular("I - (1 - alpha_ppr) * A D^-1".into()))?
        }
    };
    Ok(ImportanceMatrix {
        scores: columns.transpose(),
        alpha_ppr,
        form,
    })
}

/// Importance matrix by fixed-step power iteration of
/// `pi <- alpha e_i + (1 - alpha) Ā pi`, starting from `e_i`.
pub fn ppr_power_iteration(
    gm: &GraphMatrices,
    alpha_ppr: f64,
    steps: usize,
) -> Result<ImportanceMatrix> {
    check_alpha(alpha_ppr)?;
    if let Some(i) = gm.degree.iter().position(|&d| d == 0.0) {
        return Err(Error::IsolatedNode(i));
    }
    let n = gm.node_count();
    let teleport = DMatrix::<f64>::identity(n, n) * alpha_ppr;
    let walk = &gm.col_norm_adjacency * (1.0 - alpha_ppr);
    let mut pi = DMatrix::<f64>::identity(n, n);
    for _ in 0..steps {
        pi = &teleport + &walk * &pi;
    }
    Ok(ImportanceMatrix {
        scores: pi.transpose(),
        alpha_ppr,
        form: PprForm::Inverse,
    })
}

fn check_alpha(alpha_ppr: f64) -> Result<()> {
    if !(alpha_ppr > 0.0 && alpha_ppr <= 1.0) {
        return Err(Error::out_of_range("alpha_ppr", alpha_ppr, "(0, 1]"));
    }
    Ok(())
}

/// Indices of the `k` largest scores, largest first; equal scores keep the
/// smaller index first.
pub fn top_rank(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::out_of_range("k", k, format!("<= {}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// Induced subgraph around a center node.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSubgraph {
    pub center: usize,
    /// Graph node indices, center first.
    pub member_ids: Vec<usize>,
    /// `A` restricted to `member_ids` rows and columns.
    pub adjacency: DMatrix<f64>,
    pub tokens: Vec<Vec<usize>>,
}

impl ContextSubgraph {
    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }

    /// Positions (within `member_ids`) adjacent to member `pos`.
    pub fn local_neighbors(&self, pos: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&q| self.adjacency[(pos, q)] != 0.0)
            .collect()
    }
}

/// The center plus its `k - 1` highest-scoring other nodes.
pub fn sample_subgraph(
    g: &TextAttributedGraph,
    s: &ImportanceMatrix,
    i: usize,
    k: usize,
) -> Result<ContextSubgraph> {
    sample_subgraph_among(g, s, i, k, |_| true)
}

/// Like [`sample_subgraph`], but only nodes accepted by `allowed` may join
/// the center. The subgraph is smaller than `k` when too few are allowed.
pub fn sample_subgraph_among(
    g: &TextAttributedGraph,
    s: &ImportanceMatrix,
    i: usize,
    k: usize,
    allowed: impl Fn(usize) -> bool,
) -> Result<ContextSubgraph> {
    let n = g.node_count();
    if i >= n {
        return Err(Error::out_of_range("center", i, format!("< {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::out_of_range("k", k, format!("1..={n}")));
    }
    let mut row = s.row(i);
    row[i] = f64::NEG_INFINITY;
    let mut members = vec![i];
    members.extend(
        top_rank(&row, n)?
            .into_iter()
            .filter(|&j| j != i && allowed(j))
            .take(k - 1),
    );
    Ok(induce(g, i, members))
}

fn induce(g: &TextAttributedGraph, center: usize, member_ids: Vec<usize>) -> ContextSubgraph {
    let k = member_ids.len();
    let adjacency = DMatrix::from_fn(k, k, |a, b| {
        if g.has_edge(member_ids[a], member_ids[b]) {
            1.0
        } else {
            0.0
        }
    });
    let tokens = member_ids.iter().map(|&m| g.tokens(m).to_vec()).collect();
    ContextSubgraph {
        center,
        member_ids,
        adjacency,
        tokens,
    }
}

/// `argmax_{j != i} S[i][j]`, smaller index on ties.
pub fn most_important_neighbor(s: &ImportanceMatrix, i: usize) -> Result<usize> {
    most_important_neighbor_among(s, i, |_| true)
}

pub fn most_important_neighbor_among(
    s: &ImportanceMatrix,
    i: usize,
    allowed: impl Fn(usize) -> bool,
) -> Result<usize> {
    let n = s.node_count();
    if n < 2 {
        return Err(Error::InvalidGraph(
            "most important neighbor needs at least two nodes".into(),
        ));
    }
    let mut best: Option<usize> = None;
    for j in (0..n).filter(|&j| j != i && allowed(j)) {
        if best.is_none_or(|b| s.scores[(i, j)] > s.scores[(i, b)]) {
            best = Some(j);
        }
    }
    best.ok_or_else(|| Error::InsufficientCandidates(format!("no eligible partner for node {i}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_matrices, matrices_from_adjacency};

    fn graph(n: usize, edges: &[(usize, usize)]) -> TextAttributedGraph {
        TextAttributedGraph::new(
            (0..n).map(|i| i.to_string()).collect(),
            (0..n).map(|i| vec![format!("t{i}")]).collect(),
            None,
            edges,
        )
        .unwrap()
    }

    fn star() -> TextAttributedGraph {
        graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)])
    }

    #[test]
    fn k2_by_hand() {
        let gm = build_matrices(&graph(2, &[(0, 1)]));
        let s = ppr_importance(&gm, 0.5).unwrap();
        assert!((s.scores[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.scores[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pure_teleport_is_identity() {
        let gm = build_matrices(&star());
        let s = ppr_importance(&gm, 1.0).unwrap();
        assert!((s.scores - DMatrix::<f64>::identity(5, 5)).amax() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        let gm = build_matrices(&graph(3, &[(0, 1)]));
        assert!(matches!(
            ppr_importance(&gm, 0.5),
            Err(Error::IsolatedNode(2))
        ));
        let gm = build_matrices(&star());
        assert!(ppr_importance(&gm, 0.0).is_err());
        assert!(ppr_importance(&gm, 1.2).is_err());
    }

    #[test]
    fn power_iteration_agrees_with_solve() {
        let gm = build_matrices(&star());
        let direct = ppr_importance(&gm, 0.15).unwrap();
        let power = ppr_power_iteration(&gm, 0.15, 200).unwrap();
        assert!((direct.scores - power.scores).amax() < 1e-8);
    }

    #[test]
    fn literal_form_has_no_inverse() {
        let gm = build_matrices(&graph(2, &[(0, 1)]));
        let s = ppr_importance_with(&gm, 0.5, PprForm::Literal).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.25, -0.25, 0.5]);
        assert!((s.scores - expected).amax() < 1e-15);
    }

    #[test]
    fn top_rank_examples() {
        assert_eq!(top_rank(&[0.1, 0.9, 0.5], 2).unwrap(), vec![1, 2]);
        assert_eq!(top_rank(&[0.4, 0.4, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(top_rank(&[0.2, 0.7, 0.5], 3).unwrap(), vec![1, 2, 0]);
        assert!(top_rank(&[0.2], 2).is_err());
    }

    #[test]
    fn subgraph_examples() {
        let g = graph(2, &[(0, 1)]);
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        let sub = sample_subgraph(&g, &s, 0, 2).unwrap();
        assert_eq!(sub.member_ids, vec![0, 1]);
        assert_eq!(
            sub.adjacency,
            DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.])
        );

        let g = star();
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        let sub = sample_subgraph(&g, &s, 1, 2).unwrap();
        assert_eq!(sub.member_ids, vec![1, 0]);
        let single = sample_subgraph(&g, &s, 3, 1).unwrap();
        assert_eq!(single.member_ids, vec![3]);
        assert_eq!(single.adjacency, DMatrix::zeros(1, 1));
        assert_eq!(single.tokens, vec![g.tokens(3).to_vec()]);
        assert!(sample_subgraph(&g, &s, 0, 6).is_err());
        assert!(sample_subgraph(&g, &s, 0, 0).is_err());
    }

    #[test]
    fn subgraph_is_exact_restriction_and_nested() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)]);
        let gm = build_matrices(&g);
        let s = ppr_importance(&gm, 0.2).unwrap();
        for i in 0..6 {
            let mut prev: Vec<usize> = Vec::new();
            for k in 1..=6 {
                let sub = sample_subgraph(&g, &s, i, k).unwrap();
                assert_eq!(sub.member_ids[0], i);
                for (a, &u) in sub.member_ids.iter().enumerate() {
                    for (b, &v) in sub.member_ids.iter().enumerate() {
                        assert_eq!(sub.adjacency[(a, b)], gm.adjacency[(u, v)]);
                    }
                }
                assert!(prev.iter().all(|m| sub.member_ids.contains(m)));
                prev = sub.member_ids;
            }
        }
    }

    #[test]
    fn most_important_neighbor_examples() {
        let g = graph(2, &[(0, 1)]);
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        assert_eq!(most_important_neighbor(&s, 0).unwrap(), 1);

        let g = star();
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        for leaf in 1..5 {
            assert_eq!(most_important_neighbor(&s, leaf).unwrap(), 0);
        }

        let tri = matrices_from_adjacency(DMatrix::from_row_slice(
            3,
            3,
            &[0., 1., 1., 1., 0., 1., 1., 1., 0.],
        ));
        let s = ppr_importance(&tri, 0.15).unwrap();
        // Exact symmetry is not guaranteed by the solver; compare against
        // the tie-broken argmax of the computed row.
        let pick = most_important_neighbor(&s, 2).unwrap();
        assert!(pick == 0 || (s.scores[(2, 1)] > s.scores[(2, 0)]));
        assert!((s.scores[(2, 0)] - s.scores[(2, 1)]).abs() < 1e-14);

        let one = ImportanceMatrix {
            scores: DMatrix::identity(1, 1),
            alpha_ppr: 0.15,
            form: PprForm::Inverse,
        };
        assert!(most_important_neighbor(&one, 0).is_err());
    }

    #[test]
    fn rows_are_distributions() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (2, 5)]);
        let s = ppr_importance(&build_matrices(&g), 0.15).unwrap();
        for r in s.scores.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-8);
            assert!(r.iter().all(|&x| x >= 0.0));
        }
    }
}
