//! Plane correspondence estimation.
//!
//! Scores combine descriptor affinity with geometric affinity under an
//! initial pose; a log-domain Sinkhorn with dustbins turns the scores into a
//! partial soft assignment, and mutual maxima above a threshold become
//! matches.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::MatchError;
use crate::geom::{geometric_affinity, warp_plane, AffinityWeights, Plane, Pose};

pub const DEFAULT_SINKHORN_ITERS: usize = 100;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.2;
pub const DEFAULT_BIN_SCORE: f64 = 1.0;

/// `S = S_e + S_g` with both components kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub appearance: DMatrix<f64>,
    pub geometric: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

/// `S_e = E1 E2ᵀ` over descriptor rows.
pub fn appearance_affinity(e1: &[Vec<f64>], e2: &[Vec<f64>]) -> Result<DMatrix<f64>, MatchError> {
    let dim = e1.first().or(e2.first()).map_or(0, Vec::len);
    for e in e1.iter().chain(e2) {
        if e.len() != dim {
            return Err(MatchError::DimensionMismatch(dim, e.len()));
        }
    }
    let a = DMatrix::from_fn(e1.len(), dim, |r, c| e1[r][c]);
    let b = DMatrix::from_fn(e2.len(), dim, |r, c| e2[r][c]);
    Ok(a * b.transpose())
}

/// Geometric affinity of every frame-1 plane (warped by `init`) against every
/// frame-2 plane.
pub fn geometric_affinity_matrix(planes1: &[Plane], planes2: &[Plane], init: &Pose, w: AffinityWeights) -> DMatrix<f64> {
    let warped: Vec<Plane> = planes1.iter().map(|p| warp_plane(p, init)).collect();
    DMatrix::from_fn(planes1.len(), planes2.len(), |i, j| geometric_affinity(&warped[i], &planes2[j], w))
}

pub fn full_score(appearance: DMatrix<f64>, geometric: DMatrix<f64>) -> Result<ScoreMatrix, MatchError> {
    if appearance.shape() != geometric.shape() {
        return Err(MatchError::ShapeMismatch(appearance.shape(), geometric.shape()));
    }
    let total = &appearance + &geometric;
    Ok(ScoreMatrix { appearance, geometric, total })
}

/// Dustbin-augmented soft assignment, stored in the log domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(K1 + 1) x (K2 + 1)` log-probabilities; last row/column are dustbins.
    pub log: DMatrix<f64>,
}

impl Assignment {
    pub fn rows(&self) -> usize {
        self.log.nrows() - 1
    }

    pub fn cols(&self) -> usize {
        self.log.ncols() - 1
    }

    /// Augmented probabilities `Ā`.
    pub fn augmented(&self) -> DMatrix<f64> {
        self.log.map(f64::exp)
    }

    /// Probabilities of real pairs, `A = Ā[..K1, ..K2]`.
    pub fn inner(&self) -> DMatrix<f64> {
        self.log.view((0, 0), (self.rows(), self.cols())).map(f64::exp)
    }
}

/// Intermediate potentials saved for [`sinkhorn_backward`].
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    couplings: DMatrix<f64>,
    us: Vec<DVector<f64>>,
    vs: Vec<DVector<f64>>,
}

fn logsumexp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn marginals(m: usize, n: usize) -> (f64, DVector<f64>, DVector<f64>) {
    let norm = -((m + n) as f64).ln();
    let log_mu = DVector::from_fn(m + 1, |i, _| if i < m { norm } else { (n as f64).ln() + norm });
    let log_nu = DVector::from_fn(n + 1, |j, _| if j < n { norm } else { (m as f64).ln() + norm });
    (norm, log_mu, log_nu)
}

/// Log-domain Sinkhorn on the dustbin-augmented score matrix.
///
/// The dustbin row and column are filled with `bin_score`; the dustbin
/// marginals are `K2` (row) and `K1` (column), so every real plane carries
/// unit mass.
pub fn sinkhorn_dustbin(scores: &DMatrix<f64>, bin_score: f64, iters: usize) -> Assignment {
    sinkhorn_with_trace(scores, bin_score, iters).0
}

pub fn sinkhorn_with_trace(scores: &DMatrix<f64>, bin_score: f64, iters: usize) -> (Assignment, SinkhornTrace) {
    let (m, n) = scores.shape();
    assert!(m > 0 && n > 0, "empty score matrix");
    let iters = iters.max(1);
    let z = DMatrix::from_fn(m + 1, n + 1, |i, j| if i < m && j < n { scores[(i, j)] } else { bin_score });
    let (norm, log_mu, log_nu) = marginals(m, n);
    let mut u = DVector::zeros(m + 1);
    let mut v = DVector::zeros(n + 1);
    let mut us = Vec::with_capacity(iters);
    let mut vs = Vec::with_capacity(iters);
    for _ in 0..iters {
        u = DVector::from_fn(m + 1, |i, _| log_mu[i] - logsumexp((0..=n).map(|j| z[(i, j)] + v[j])));
        v = DVector::from_fn(n + 1, |j, _| log_nu[j] - logsumexp((0..=m).map(|i| z[(i, j)] + u[i])));
        us.push(u.clone());
        vs.push(v.clone());
    }
    let log = DMatrix::from_fn(m + 1, n + 1, |i, j| z[(i, j)] + u[i] + v[j] - norm);
    (Assignment { log }, SinkhornTrace { couplings: z, us, vs })
}

/// Reverse pass through every Sinkhorn iteration.
///
/// Takes `dL/d log Ā` and returns `(dL/dS, dL/d bin_score)`.
pub fn sinkhorn_backward(trace: &SinkhornTrace, grad_log: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let z = &trace.couplings;
    let (rows, cols) = z.shape();
    let mut gz = grad_log.clone();
    let mut gu = DVector::from_fn(rows, |i, _| grad_log.row(i).sum());
    let mut gv = DVector::from_fn(cols, |j, _| grad_log.column(j).sum());
    let zero_v = DVector::zeros(cols);
    for k in (0..trace.us.len()).rev() {
        let u = &trace.us[k];
        // v_j = log_nu_j - lse_i(z_ij + u_i)
        for j in 0..cols {
            if gv[j] == 0.0 {
                continue;
            }
            let col_lse = trace_lse_col(z, u, j);
            for i in 0..rows {
                let s = (z[(i, j)] + u[i] - col_lse).exp();
                gz[(i, j)] -= gv[j] * s;
                gu[i] -= gv[j] * s;
            }
        }
        // u_i = log_mu_i - lse_j(z_ij + v_prev_j)
        let v_prev = if k == 0 { &zero_v } else { &trace.vs[k - 1] };
        let mut gv_prev = DVector::zeros(cols);
        for i in 0..rows {
            if gu[i] == 0.0 {
                continue;
            }
            let row_lse = logsumexp((0..cols).map(|j| z[(i, j)] + v_prev[j]));
            for j in 0..cols {
                let r = (z[(i, j)] + v_prev[j] - row_lse).exp();
                gz[(i, j)] -= gu[i] * r;
                gv_prev[j] -= gu[i] * r;
            }
        }
        gu.fill(0.0);
        gv = gv_prev;
    }
    let (m, n) = (rows - 1, cols - 1);
    let g_scores = gz.view((0, 0), (m, n)).into_owned();
    let g_bin = gz.row(m).sum() + gz.column(n).sum() - gz[(m, n)];
    (g_scores, g_bin)
}

fn trace_lse_col(z: &DMatrix<f64>, u: &DVector<f64>, j: usize) -> f64 {
    logsumexp((0..z.nrows()).map(|i| z[(i, j)] + u[i]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

/// Mutual-max extraction: `(i, j)` is kept when `A(i, j)` is the maximum of
/// row `i` and of column `j` and exceeds `threshold`. Ties resolve to the
/// lowest index.
pub fn extract_matches(a: &Assignment, threshold: f64) -> Vec<Match> {
    let inner = a.inner();
    let (m, n) = inner.shape();
    let argmax = |vals: &mut dyn Iterator<Item = f64>| {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, v) in vals.enumerate() {
            if v > best.1 {
                best = (k, v);
            }
        }
        best.0
    };
    let col_best: Vec<usize> = (0..n).map(|j| argmax(&mut (0..m).map(|i| inner[(i, j)]))).collect();
    (0..m)
        .filter_map(|i| {
            let j = argmax(&mut (0..n).map(|j| inner[(i, j)]));
            let score = inner[(i, j)];
            (col_best[j] == i && score > threshold).then_some(Match { i, j, score })
        })
        .collect()
}

/// Ground-truth supervision for the matching loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSupervision {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_first: Vec<usize>,
    pub unmatched_second: Vec<usize>,
}

impl MatchSupervision {
    /// Derives unmatched sets from the match list.
    pub fn from_matches(matches: Vec<(usize, usize)>, k1: usize, k2: usize) -> Self {
        let unmatched_first = (0..k1).filter(|i| !matches.iter().any(|m| m.0 == *i)).collect();
        let unmatched_second = (0..k2).filter(|j| !matches.iter().any(|m| m.1 == *j)).collect();
        Self { matches, unmatched_first, unmatched_second }
    }

    fn cells(&self, k1: usize, k2: usize) -> Result<Vec<(usize, usize)>, MatchError> {
        let mut cells = Vec::new();
        for &(i, j) in &self.matches {
            if i >= k1 || j >= k2 {
                return Err(MatchError::IndexOutOfRange(i, j, k1, k2));
            }
            cells.push((i, j));
        }
        for &i in &self.unmatched_first {
            if i >= k1 {
                return Err(MatchError::IndexOutOfRange(i, k2, k1, k2));
            }
            cells.push((i, k2));
        }
        for &j in &self.unmatched_second {
            if j >= k2 {
                return Err(MatchError::IndexOutOfRange(k1, j, k1, k2));
            }
            cells.push((k1, j));
        }
        Ok(cells)
    }
}

/// Negative log-likelihood of the supervised cells of `Ā`, including both
/// dustbin terms. Returns the loss and `dL / d log Ā`.
pub fn matching_loss(a: &Assignment, sup: &MatchSupervision) -> Result<(f64, DMatrix<f64>), MatchError> {
    let (k1, k2) = (a.rows(), a.cols());
    let mut grad = DMatrix::zeros(k1 + 1, k2 + 1);
    let mut loss = 0.0;
    for (i, j) in sup.cells(k1, k2)? {
        loss -= a.log[(i, j)];
        grad[(i, j)] -= 1.0;
    }
    Ok((loss, grad))
}

/// Precision / recall / F-score of a predicted match set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
}

/// Counts of true positives, predictions and ground-truth pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub true_positives: usize,
    pub predicted: usize,
    pub ground_truth: usize,
}

impl MatchCounts {
    pub fn of(pred: &[(usize, usize)], gt: &[(usize, usize)]) -> Self {
        let tp = pred.iter().filter(|p| gt.contains(p)).count();
        Self { true_positives: tp, predicted: pred.len(), ground_truth: gt.len() }
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            true_positives: self.true_positives + o.true_positives,
            predicted: self.predicted + o.predicted,
            ground_truth: self.ground_truth + o.ground_truth,
        }
    }

    /// Undefined ratios are reported as 0.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positives, self.predicted);
        let recall = ratio(self.true_positives, self.ground_truth);
        let f_score = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f_score }
    }
}

pub fn match_prf(pred: &[(usize, usize)], gt: &[(usize, usize)]) -> Prf {
    MatchCounts::of(pred, gt).prf()
}

/// Matching parameters. `bin_score` is the learnable dustbin score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneMatcher {
    pub bin_score: f64,
    pub iters: usize,
    pub threshold: f64,
    pub weights: AffinityWeights,
}

impl Default for PlaneMatcher {
    fn default() -> Self {
        Self {
            bin_score: DEFAULT_BIN_SCORE,
            iters: DEFAULT_SINKHORN_ITERS,
            threshold: DEFAULT_MATCH_THRESHOLD,
            weights: AffinityWeights::default(),
        }
    }
}

/// One side of a matching problem: plane parameters plus descriptors.
#[derive(Debug, Clone, Copy)]
pub struct PlaneSet<'a> {
    pub planes: &'a [Plane],
    pub descriptors: &'a [Vec<f64>],
}

/// Appearance encoder slot. Descriptors currently pass through unchanged.
pub fn encode_descriptors(d: &[Vec<f64>]) -> &[Vec<f64>] {
    d
}

#[derive(Debug, Clone)]
pub struct MatchOutcome {
    pub scores: ScoreMatrix,
    pub assignment: Assignment,
    pub matches: Vec<Match>,
}

impl PlaneMatcher {
    pub fn scores(&self, first: PlaneSet<'_>, second: PlaneSet<'_>, init: &Pose) -> Result<ScoreMatrix, MatchError> {
        let se = appearance_affinity(encode_descriptors(first.descriptors), encode_descriptors(second.descriptors))?;
        let sg = geometric_affinity_matrix(first.planes, second.planes, init, self.weights);
        full_score(se, sg)
    }

    /// Runs scoring, Sinkhorn and extraction. Returns `None` when either
    /// side is empty.
    pub fn run(&self, first: PlaneSet<'_>, second: PlaneSet<'_>, init: &Pose) -> Result<Option<MatchOutcome>, MatchError> {
        if first.planes.is_empty() || second.planes.is_empty() {
            return Ok(None);
        }
        let scores = self.scores(first, second, init)?;
        let assignment = sinkhorn_dustbin(&scores.total, self.bin_score, self.iters);
        let matches = extract_matches(&assignment, self.threshold);
        Ok(Some(MatchOutcome { scores, assignment, matches }))
    }
}
