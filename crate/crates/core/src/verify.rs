//! Numerical self-checks against independent oracles.
//!
//! Each suite returns a [`SuiteReport`] of `key=value` measurements and a
//! pass flag.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{pessimistic_rank, rank_metrics};
use crate::graph::{matrices_from_adjacency, GraphMatrices};
use crate::objectives::Term;
use crate::ppr::{ppr_importance, ppr_power_iteration, DEFAULT_ALPHA_PPR};
use crate::spectral::eigendecompose;
use crate::trainer::{
    check_gradients, verify_lemma1, GradCheckConfig, Lemma1Config, LEMMA1_ANGLE,
    LEMMA1_RESIDUAL_FACTOR, LEMMA1_SLACK,
};

pub const SPECTRAL_TOLERANCE: f64 = 1e-8;
pub const P3_TOLERANCE: f64 = 1e-9;
pub const PPR_TOLERANCE: f64 = 1e-8;
pub const PPR_POWER_STEPS: usize = 200;
/// Oracle residuals below this are reported as excess only; their ratio is
/// dominated by rounding.
pub const NONDEGENERATE_ORACLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Spectral,
    Ppr,
    Gradients,
    Lemma1,
    Metrics,
    All,
}

impl Suite {
    pub const EACH: [Suite; 5] = [
        Suite::Spectral,
        Suite::Ppr,
        Suite::Gradients,
        Suite::Lemma1,
        Suite::Metrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Spectral => "spectral",
            Suite::Ppr => "ppr",
            Suite::Gradients => "gradients",
            Suite::Lemma1 => "lemma1",
            Suite::Metrics => "metrics",
            Suite::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// HFC rates for the lemma1 suite.
    pub alphas: Vec<f64>,
    pub k: usize,
    /// Random instances per suite (graphs, matrices or query sets).
    pub spectral_matrices: usize,
    pub ppr_graphs: usize,
    pub lemma1_graphs: usize,
    pub metric_sets: usize,
    pub gradients: GradCheckConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            alphas: vec![0.25, 0.5, 0.75],
            k: 3,
            spectral_matrices: 100,
            ppr_graphs: 20,
            lemma1_graphs: 20,
            metric_sets: 100,
            gradients: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub entries: Vec<(String, String)>,
    pub passed: bool,
}

impl SuiteReport {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            entries: Vec::new(),
            passed: true,
        }
    }

    fn put(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    fn put_f64(&mut self, key: impl Into<String>, value: f64) {
        self.put(key, format!("{value:e}"));
    }

    /// Keys are prefixed with the suite name.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{}.{k}={v}", self.suite);
        }
        let _ = writeln!(out, "{}.passed={}", self.suite, self.passed);
        out
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    let one = |s: Suite| -> Result<SuiteReport> {
        match s {
            Suite::Spectral => verify_spectral(opts.seed, opts.spectral_matrices),
            Suite::Ppr => verify_ppr(opts.seed, opts.ppr_graphs),
            Suite::Gradients => verify_gradients(&GradCheckConfig {
                seed: opts.seed,
                ..opts.gradients
            }),
            Suite::Lemma1 => {
                verify_lemma1_suite(opts.seed, opts.lemma1_graphs, &opts.alphas, opts.k)
            }
            Suite::Metrics => verify_metrics(opts.seed, opts.metric_sets),
            Suite::All => unreachable!(),
        }
    };
    match suite {
        Suite::All => Suite::EACH.into_iter().map(one).collect(),
        s => Ok(vec![one(s)?]),
    }
}

/// Concatenated text of several reports followed by the overall verdict.
pub fn report_text(reports: &[SuiteReport]) -> String {
    let mut out: String = reports.iter().map(SuiteReport::to_text).collect();
    let _ = writeln!(out, "passed={}", reports.iter().all(|r| r.passed));
    out
}

/// Random symmetric matrix with entries uniform in `(-1, 1)`.
pub fn random_symmetric(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let x = rng.random_range(-1.0..1.0);
            m[(i, j)] = x;
            m[(j, i)] = x;
        }
    }
    m
}

/// Connected random graph: a random spanning tree plus chords with
/// probability `p`.
pub fn random_connected_graph(n: usize, p: f64, rng: &mut impl Rng) -> GraphMatrices {
    let mut a = DMatrix::zeros(n, n);
    for v in 1..n {
        let u = rng.random_range(0..v);
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    for u in 0..n {
        for v in u + 1..n {
            if a[(u, v)] == 0.0 && rng.random_bool(p) {
                a[(u, v)] = 1.0;
                a[(v, u)] = 1.0;
            }
        }
    }
    matrices_from_adjacency(a)
}

/// Eigendecomposition of random symmetric matrices (N <= 30) and the path
/// on three nodes.
pub fn verify_spectral(seed: u64, matrices: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut recon, mut ortho) = (0.0f64, 0.0f64);
    for _ in 0..matrices {
        let n = rng.random_range(1..=30);
        let m = random_symmetric(n, &mut rng);
        let d = eigendecompose(&m)?;
        recon = recon.max((d.reconstruct() - &m).amax());
        ortho = ortho.max(d.orthonormality_error());
    }
    let mut p3 = DMatrix::zeros(3, 3);
    for (u, v) in [(0, 1), (1, 2)] {
        p3[(u, v)] = 1.0;
        p3[(v, u)] = 1.0;
    }
    let d = eigendecompose(&matrices_from_adjacency(p3).sym_laplacian)?;
    let p3_err = d
        .eigenvalues
        .iter()
        .zip([0.0, 1.0, 2.0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut r = SuiteReport::new("spectral");
    r.put("matrices", matrices);
    r.put_f64("max_reconstruction_error", recon);
    r.put_f64("max_orthonormality_error", ortho);
    r.put_f64("tolerance", SPECTRAL_TOLERANCE);
    r.put("p3_spectrum", format!("{:?}", d.eigenvalues.as_slice()));
    r.put_f64("p3_spectrum_error", p3_err);
    r.put_f64("p3_tolerance", P3_TOLERANCE);
    r.passed = recon < SPECTRAL_TOLERANCE && ortho < SPECTRAL_TOLERANCE && p3_err < P3_TOLERANCE;
    Ok(r)
}

/// Direct-solve PPR against fixed-step power iteration on random connected
/// graphs (N <= 50).
pub fn verify_ppr(seed: u64, graphs: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut diff, mut row_err, mut min_entry) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..graphs {
        let n = rng.random_range(2..=50);
        let gm = random_connected_graph(n, rng.random_range(0.0..0.3), &mut rng);
        let direct = ppr_importance(&gm, DEFAULT_ALPHA_PPR)?;
        let power = ppr_power_iteration(&gm, DEFAULT_ALPHA_PPR, PPR_POWER_STEPS)?;
        diff = diff.max((&direct.scores - &power.scores).amax());
        for row in direct.scores.row_iter() {
            row_err = row_err.max((row.sum() - 1.0).abs());
        }
        min_entry = min_entry.min(direct.scores.min());
    }
    let mut r = SuiteReport::new("ppr");
    r.put("graphs", graphs);
    r.put("alpha_ppr", DEFAULT_ALPHA_PPR);
    r.put("power_steps", PPR_POWER_STEPS);
    r.put_f64("max_abs_diff", diff);
    r.put_f64("max_row_sum_error", row_err);
    r.put_f64("min_entry", min_entry);
    r.put_f64("tolerance", PPR_TOLERANCE);
    r.passed = diff < PPR_TOLERANCE && row_err < PPR_TOLERANCE && min_entry >= 0.0;
    Ok(r)
}

pub fn verify_gradients(cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let report = check_gradients(cfg)?;
    let mut r = SuiteReport::new("gradients");
    r.put("trials", report.trials);
    r.put_f64("step", cfg.step);
    for t in Term::ALL {
        r.put_f64(
            format!("max_relative_error_{}", t.name()),
            report.max_relative_error.get(t),
        );
    }
    r.put_f64("tolerance", report.tolerance);
    r.passed = report.passed();
    Ok(r)
}

/// Gradient descent on the factorization objective against the best
/// rank-K oracle, over random connected graphs with `k < N <= 12`.
pub fn verify_lemma1_suite(
    seed: u64,
    graphs: usize,
    alphas: &[f64],
    k: usize,
) -> Result<SuiteReport> {
    if k == 0 || k >= 12 {
        return Err(Error::out_of_range("k", k, "1..=11"));
    }
    if alphas.is_empty() {
        return Err(Error::Config("lemma1 needs at least one alpha".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = SuiteReport::new("lemma1");
    let (mut worst_ratio, mut worst_excess) = (0.0f64, f64::NEG_INFINITY);
    let (mut worst_angle, mut worst_increase) = (0.0f64, 0.0f64);
    let (mut runs, mut gapped, mut failures) = (0usize, 0usize, 0usize);
    for gi in 0..graphs {
        let n = rng.random_range(k + 1..=12);
        let gm = random_connected_graph(n, rng.random_range(0.1..0.5), &mut rng);
        for &alpha in alphas {
            let cfg = Lemma1Config {
                alpha,
                k,
                seed: seed.wrapping_add(gi as u64),
                ..Lemma1Config::default()
            };
            let rep = verify_lemma1(&gm, &cfg)?;
            runs += 1;
            if rep.oracle >= NONDEGENERATE_ORACLE {
                worst_ratio = worst_ratio.max(rep.ratio());
            }
            worst_excess = worst_excess.max(rep.residual - LEMMA1_RESIDUAL_FACTOR * rep.oracle);
            worst_increase = worst_increase.max(rep.max_increase);
            if rep.gap_ok() {
                gapped += 1;
                worst_angle = worst_angle.max(rep.angle);
            }
            if !rep.passed() {
                failures += 1;
                r.put(
                    format!("failure_{gi}_{alpha}"),
                    format!(
                        "n={n} residual={} oracle={} angle={} eigengap={}",
                        rep.residual, rep.oracle, rep.angle, rep.eigengap
                    ),
                );
            }
        }
    }
    r.put("graphs", graphs);
    r.put("alphas", format!("{alphas:?}"));
    r.put("k", k);
    r.put("runs", runs);
    r.put("max_residual_ratio", worst_ratio);
    r.put("residual_factor", LEMMA1_RESIDUAL_FACTOR);
    r.put_f64("max_residual_excess", worst_excess);
    r.put_f64("residual_slack", LEMMA1_SLACK);
    r.put("runs_with_eigengap", gapped);
    r.put_f64("max_principal_angle", worst_angle);
    r.put("angle_tolerance", LEMMA1_ANGLE);
    r.put_f64("max_residual_increase", worst_increase);
    r.put("failures", failures);
    r.passed = failures == 0;
    Ok(r)
}

/// Rank by sorting every candidate, target placed after equal-scored
/// negatives, and locating the target.
pub fn sort_and_locate(target: f64, negatives: &[f64]) -> usize {
    let mut all: Vec<(f64, bool)> = negatives.iter().map(|&s| (s, false)).collect();
    all.push((target, true));
    // Stable sort keeps the target behind its ties.
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    1 + all.iter().position(|&(_, t)| t).expect("target present")
}

/// Library metrics against the sort-and-locate oracle on random query sets
/// with frequent ties.
pub fn verify_metrics(seed: u64, sets: usize) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..sets {
        let queries = rng.random_range(1..=20);
        let cutoff = rng.random_bool(0.5).then(|| rng.random_range(1..=10));
        let mut ranks = Vec::with_capacity(queries);
        let mut oracle_ranks = Vec::with_capacity(queries);
        for _ in 0..queries {
            let m = rng.random_range(1..=60);
            let score = |rng: &mut ChaCha8Rng| rng.random_range(0..8) as f64;
            let target = score(&mut rng);
            let negatives: Vec<f64> = (0..m).map(|_| score(&mut rng)).collect();
            ranks.push(pessimistic_rank(target, &negatives));
            oracle_ranks.push(sort_and_locate(target, &negatives));
        }
        let got = rank_metrics(&ranks, cutoff)?;
        let n = queries as f64;
        let p1 = oracle_ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
        let mrr = oracle_ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        let ndcg = oracle_ranks
            .iter()
            .map(|&r| {
                if cutoff.is_some_and(|c| r > c) {
                    0.0
                } else {
                    1.0 / (r as f64 + 1.0).log2()
                }
            })
            .sum::<f64>()
            / n;
        if ranks != oracle_ranks || got.p_at_1 != p1 || got.mrr != mrr || got.ndcg != ndcg {
            mismatches += 1;
        }
    }
    let mut r = SuiteReport::new("metrics");
    r.put("query_sets", sets);
    r.put("mismatches", mismatches);
    r.passed = mismatches == 0;
    Ok(r)
}
