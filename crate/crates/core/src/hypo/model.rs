use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::params::NopeSacParams;
use crate::error::HypoError;
use crate::geom::{quat_to_matrix, quat_to_matrix_vjp, rotation_geodesic_rad, warp_plane_signed, Mat3, PlanePair, Pose, UnitQuaternion, Vec3};
use crate::tinynn::{softmax, softmax_vjp, Mlp, MlpCache, Tensor};

/// Minimum norm of a raw quaternion before normalization.
pub const MIN_QUATERNION_NORM: f64 = 1e-8;
/// Weight of the scoring loss inside the refinement loss.
pub const SCORE_LOSS_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Soft,
    Avg,
    MinCost,
    MaxScore,
}

/// Rotation and translation embeddings of one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEmbedding {
    pub rot: Vec<f64>,
    pub trans: Vec<f64>,
}

/// The initial pose and the `M` one-plane hypotheses with their costs and
/// scores. Row 0 of every matrix and entry 0 of every vector is the
/// initial pose.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub poses: Vec<Pose>,
    pub embeddings: Vec<PoseEmbedding>,
    pub cost_r: DMatrix<f64>,
    pub cost_t: DMatrix<f64>,
    pub w_r: Vec<f64>,
    pub w_t: Vec<f64>,
}

impl HypothesisSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Options that change the forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    /// Warp frame-1 planes by the initial pose before embedding them.
    pub warp: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { warp: true }
    }
}

/// Loss terms of one refinement pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub soft: f64,
    pub avg: f64,
    pub score: f64,
    pub total: f64,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.soft += o.soft;
        self.avg += o.avg;
        self.score += o.score;
        self.total += o.total;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        self.soft *= s;
        self.avg *= s;
        self.score *= s;
        self.total *= s;
        self
    }
}

fn quat_row(q: UnitQuaternion) -> Vec<f64> {
    q.to_array().to_vec()
}

/// Unit quaternion of a raw head output, plus the raw norm.
fn normalize_raw(raw: &[f64]) -> Result<([f64; 4], f64), HypoError> {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= MIN_QUATERNION_NORM) {
        return Err(HypoError::DegenerateQuaternion(n));
    }
    Ok(([raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n], n))
}

/// `d L / d raw` for `q = raw / |raw|`.
fn normalize_vjp(q: &[f64; 4], norm: f64, g: &[f64; 4]) -> [f64; 4] {
    let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (g[k] - q[k] * dot) / norm)
}

fn as_quat(q: &[f64; 4]) -> UnitQuaternion {
    UnitQuaternion { w: q[0], x: q[1], y: q[2], z: q[3] }
}

/// Squared pose error with the target quaternion flipped into the
/// prediction's half-space. Returns the value and gradients for `q`, `t`.
pub fn pose_loss(q: &[f64; 4], t: &Vec3, gt: &Pose) -> (f64, [f64; 4], Vec3) {
    let mut target = gt.rotation.to_array();
    if q.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
        target = target.map(|v| -v);
    }
    let dq = [0, 1, 2, 3].map(|k| q[k] - target[k]);
    let dt = t - gt.translation;
    let value = dq.iter().map(|v| v * v).sum::<f64>() + dt.norm_squared();
    (value, dq.map(|v| 2.0 * v), dt * 2.0)
}

/// Decoded head outputs for a batch of embeddings.
struct Decoded {
    raw_cache: MlpCache,
    trans_cache: MlpCache,
    quats: Vec<[f64; 4]>,
    norms: Vec<f64>,
    trans: Vec<Vec3>,
}

impl Decoded {
    fn pose(&self, k: usize) -> Pose {
        Pose::new(as_quat(&self.quats[k]).canonicalize(), self.trans[k])
    }
}

fn decode_batch(p: &NopeSacParams, fr: &Tensor, ft: &Tensor) -> Result<Decoded, HypoError> {
    let (raw, raw_cache) = p.linear_rot.forward(fr)?;
    let (t, trans_cache) = p.linear_trans.forward(ft)?;
    let mut quats = Vec::with_capacity(raw.rows());
    let mut norms = Vec::with_capacity(raw.rows());
    for r in 0..raw.rows() {
        let (q, n) = normalize_raw(raw.row_slice(r))?;
        quats.push(q);
        norms.push(n);
    }
    let trans = (0..t.rows()).map(|r| Vec3::from_column_slice(t.row_slice(r))).collect();
    Ok(Decoded { raw_cache, trans_cache, quats, norms, trans })
}

/// Backward through the heads; returns gradients for the two embedding batches.
fn decode_backward(
    p: &NopeSacParams,
    d: &Decoded,
    g_q: &[[f64; 4]],
    g_t: &[Vec3],
    grads: &mut NopeSacParams,
) -> Result<(Tensor, Tensor), HypoError> {
    let rows = d.quats.len();
    let mut g_raw = Tensor::zeros(vec![rows, 4]);
    let mut g_tr = Tensor::zeros(vec![rows, 3]);
    for r in 0..rows {
        g_raw.row_slice_mut(r).copy_from_slice(&normalize_vjp(&d.quats[r], d.norms[r], &g_q[r]));
        g_tr.row_slice_mut(r).copy_from_slice(g_t[r].as_slice());
    }
    let g_fr = p.linear_rot.backward(&d.raw_cache, &g_raw, &mut grads.linear_rot)?;
    let g_ft = p.linear_trans.backward(&d.trans_cache, &g_tr, &mut grads.linear_trans)?;
    Ok((g_fr, g_ft))
}

struct AimTrace {
    rot: Tensor,
    trans: Tensor,
    rot_cache: MlpCache,
    trans_cache: MlpCache,
}

fn aim_input(poses: &[Pose]) -> (Tensor, Tensor) {
    let q: Vec<Vec<f64>> = poses.iter().map(|p| quat_row(p.rotation.canonicalize())).collect();
    let t: Vec<Vec<f64>> = poses.iter().map(|p| p.translation.as_slice().to_vec()).collect();
    (Tensor::from_rows(&q).expect("rows of 4"), Tensor::from_rows(&t).expect("rows of 3"))
}

fn aim_forward(p: &NopeSacParams, poses: &[Pose]) -> Result<AimTrace, HypoError> {
    let (q, t) = aim_input(poses);
    let (rot, rot_cache) = p.rot_enc.forward(&q)?;
    let (trans, trans_cache) = p.trans_enc.forward(&t)?;
    Ok(AimTrace { rot, trans, rot_cache, trans_cache })
}

/// Reconstruction loss of the auto-encoder on a batch, averaged, with
/// gradients accumulated into `grads` when given.
pub fn aim_loss(p: &NopeSacParams, poses: &[Pose], grads: Option<&mut NopeSacParams>) -> Result<f64, HypoError> {
    let aim = aim_forward(p, poses)?;
    let dec = decode_batch(p, &aim.rot, &aim.trans)?;
    let n = poses.len() as f64;
    let mut total = 0.0;
    let mut g_q = Vec::with_capacity(poses.len());
    let mut g_t = Vec::with_capacity(poses.len());
    for (k, gt) in poses.iter().enumerate() {
        let (v, gq, gt_) = pose_loss(&dec.quats[k], &dec.trans[k], gt);
        total += v;
        g_q.push(gq.map(|x| x / n));
        g_t.push(gt_ / n);
    }
    if let Some(grads) = grads {
        let (g_fr, g_ft) = decode_backward(p, &dec, &g_q, &g_t, grads)?;
        p.rot_enc.backward(&aim.rot_cache, &g_fr, &mut grads.rot_enc)?;
        p.trans_enc.backward(&aim.trans_cache, &g_ft, &mut grads.trans_enc)?;
    }
    Ok(total / n)
}

/// Cost of one hypothesis on one correspondence (signed warp).
struct CostTerms {
    n: Vec3,
    d: f64,
    c_r: f64,
    c_t: f64,
    u: Vec3,
}

fn cost_terms(rot: &Mat3, t: &Vec3, c: &PlanePair) -> CostTerms {
    let n = rot * c.first.normal;
    let d = c.first.offset + n.dot(t);
    let c_r = (n - c.second.normal).norm();
    let u = n * d - c.second.foot();
    CostTerms { n, d, c_r, c_t: u.norm(), u }
}

/// Accumulates `d cost / d (R, t)` weighted by upstream gradients.
fn cost_vjp(terms: &CostTerms, c: &PlanePair, t: &Vec3, g_cr: f64, g_ct: f64, g_rot: &mut Mat3, g_t: &mut Vec3) {
    let mut g_n = Vec3::zeros();
    if g_cr != 0.0 && terms.c_r > 1e-15 {
        g_n += (terms.n - c.second.normal) * (g_cr / terms.c_r);
    }
    if g_ct != 0.0 && terms.c_t > 1e-15 {
        let g_u = terms.u * (g_ct / terms.c_t);
        g_n += g_u * terms.d;
        let g_d = terms.n.dot(&g_u);
        g_n += t * g_d;
        *g_t += terms.n * g_d;
    }
    *g_rot += g_n * c.first.normal.transpose();
}

/// Scoring-MLP input: each row's costs sorted ascending and zero-padded to
/// `width`, followed by a validity mask of the same width. Sorting makes the
/// scores independent of correspondence order.
fn score_input(cost: &DMatrix<f64>, width: usize) -> (Tensor, Vec<Vec<usize>>) {
    let (rows, m) = cost.shape();
    let mut x = Tensor::zeros(vec![rows, 2 * width]);
    let mut perms = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut perm: Vec<usize> = (0..m).collect();
        perm.sort_by(|&a, &b| cost[(r, a)].total_cmp(&cost[(r, b)]).then(a.cmp(&b)));
        for (slot, &col) in perm.iter().enumerate() {
            x.row_slice_mut(r)[slot] = cost[(r, col)];
            x.row_slice_mut(r)[width + slot] = 1.0;
        }
        perms.push(perm);
    }
    (x, perms)
}

fn embed_rows(f0: &Tensor, rows: &Tensor) -> Tensor {
    let mut out = f0.clone();
    let mut data = out.data().to_vec();
    data.extend_from_slice(rows.data());
    out = Tensor::matrix(rows.rows() + 1, f0.cols(), data).expect("consistent widths");
    out
}

fn weighted_sum(h: &Tensor, w: &[f64]) -> Tensor {
    let mut out = vec![0.0; h.cols()];
    for (r, wr) in w.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(h.row_slice(r)) {
            *o += wr * v;
        }
    }
    Tensor::row(out)
}

/// Everything the backward pass needs from one refinement forward pass.
struct Trace {
    m: usize,
    aim: AimTrace,
    g_cache: MlpCache,
    er_cache: MlpCache,
    et_cache: MlpCache,
    dr_cache: MlpCache,
    dt_cache: MlpCache,
    h_r: Tensor,
    h_t: Tensor,
    hyp: Decoded,
    rots: Vec<Mat3>,
    cost_r: DMatrix<f64>,
    cost_t: DMatrix<f64>,
    score_perm: Vec<Vec<usize>>,
    sr_cache: MlpCache,
    st_cache: MlpCache,
    w_r: Vec<f64>,
    w_t: Vec<f64>,
}

/// Correspondence input rows `(n₁₀, d₁₀, n₂, d₂)`.
fn correspondence_rows(init: &Pose, corrs: &[PlanePair], opts: ForwardOptions) -> Tensor {
    let rows: Vec<Vec<f64>> = corrs
        .iter()
        .map(|c| {
            let (n1, d1) = if opts.warp { warp_plane_signed(&c.first, init) } else { (c.first.normal, c.first.offset) };
            vec![n1.x, n1.y, n1.z, d1, c.second.normal.x, c.second.normal.y, c.second.normal.z, c.second.offset]
        })
        .collect();
    Tensor::from_rows(&rows).expect("rows of 8")
}

fn forward(p: &NopeSacParams, init: &Pose, corrs: &[PlanePair], opts: ForwardOptions) -> Result<Trace, HypoError> {
    let m = corrs.len();
    if m == 0 {
        return Err(HypoError::EmptyCorrespondences);
    }
    if m > p.arch.max_correspondences {
        return Err(HypoError::TooManyCorrespondences(m, p.arch.max_correspondences));
    }
    let aim = aim_forward(p, std::slice::from_ref(init))?;
    let x = correspondence_rows(init, corrs, opts);
    let (g, g_cache) = p.g.forward(&x)?;
    let (e_r, er_cache) = p.e_r.forward(&g)?;
    let (e_t, et_cache) = p.e_t.forward(&g.hcat(&e_r)?)?;
    let (f_r, dr_cache) = p.d_r.forward(&aim.rot.broadcast_rows(m).hcat(&e_r)?)?;
    let (f_t, dt_cache) = p.d_t.forward(&aim.trans.broadcast_rows(m).hcat(&e_t)?)?;
    let h_r = embed_rows(&aim.rot, &f_r);
    let h_t = embed_rows(&aim.trans, &f_t);
    let hyp = decode_batch(p, &h_r, &h_t)?;
    let rots: Vec<Mat3> = hyp.quats.iter().map(|q| quat_to_matrix(as_quat(q))).collect();
    let mut cost_r = DMatrix::zeros(m + 1, m);
    let mut cost_t = DMatrix::zeros(m + 1, m);
    for k in 0..=m {
        for (i, c) in corrs.iter().enumerate() {
            let terms = cost_terms(&rots[k], &hyp.trans[k], c);
            cost_r[(k, i)] = terms.c_r;
            cost_t[(k, i)] = terms.c_t;
        }
    }
    let width = p.arch.max_correspondences;
    let (xr, perm_r) = score_input(&cost_r, width);
    let (xt, perm_t) = score_input(&cost_t, width);
    let (lr, sr_cache) = p.score_r.forward(&xr)?;
    let (lt, st_cache) = p.score_t.forward(&xt)?;
    // both score networks see the same sort order only when costs agree, so keep both perms
    let score_perm = perm_r.into_iter().chain(perm_t).collect();
    let w_r = softmax(lr.data());
    let w_t = softmax(lt.data());
    Ok(Trace {
        m,
        aim,
        g_cache,
        er_cache,
        et_cache,
        dr_cache,
        dt_cache,
        h_r,
        h_t,
        hyp,
        rots,
        cost_r,
        cost_t,
        score_perm,
        sr_cache,
        st_cache,
        w_r,
        w_t,
    })
}

fn hypothesis_set(tr: &Trace) -> HypothesisSet {
    HypothesisSet {
        poses: (0..=tr.m).map(|k| tr.hyp.pose(k)).collect(),
        embeddings: (0..=tr.m)
            .map(|k| PoseEmbedding { rot: tr.h_r.row_slice(k).to_vec(), trans: tr.h_t.row_slice(k).to_vec() })
            .collect(),
        cost_r: tr.cost_r.clone(),
        cost_t: tr.cost_t.clone(),
        w_r: tr.w_r.clone(),
        w_t: tr.w_t.clone(),
    }
}

/// Index of the smallest row sum; ties go to the lowest row.
pub fn min_cost_row(cost: &DMatrix<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for r in 0..cost.nrows() {
        let s = cost.row(r).sum();
        if s < best.1 {
            best = (r, s);
        }
    }
    best.0
}

fn argmax(v: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, x) in v.iter().enumerate() {
        if *x > best.1 {
            best = (k, *x);
        }
    }
    best.0
}

impl NopeSacParams {
    /// Pose embedding of an arbitrary pose.
    pub fn aim_encode(&self, pose: &Pose) -> Result<PoseEmbedding, HypoError> {
        let (q, t) = aim_input(std::slice::from_ref(pose));
        Ok(PoseEmbedding { rot: self.rot_enc.predict(&q)?.into_data(), trans: self.trans_enc.predict(&t)?.into_data() })
    }

    /// Shared decoding heads: normalized, canonical quaternion and raw translation.
    pub fn decode_pose(&self, e: &PoseEmbedding) -> Result<Pose, HypoError> {
        let raw = self.linear_rot.predict(&Tensor::row(e.rot.clone()))?;
        let t = self.linear_trans.predict(&Tensor::row(e.trans.clone()))?;
        let (q, _) = normalize_raw(raw.data())?;
        Ok(Pose::new(as_quat(&q).canonicalize(), Vec3::from_column_slice(t.data())))
    }

    /// Correspondence embedding `g` for every pair.
    pub fn correspondence_embed(&self, init: &Pose, corrs: &[PlanePair], opts: ForwardOptions) -> Result<Tensor, HypoError> {
        Ok(self.g.predict(&correspondence_rows(init, corrs, opts))?)
    }

    /// Rotation and translation features `(e_r, e_t)` of correspondence embeddings.
    pub fn pose_features(&self, g: &Tensor) -> Result<(Tensor, Tensor), HypoError> {
        let e_r = self.e_r.predict(g)?;
        let e_t = self.e_t.predict(&g.hcat(&e_r)?)?;
        Ok((e_r, e_t))
    }

    /// One-plane embeddings from the initial embedding and pose features.
    pub fn one_plane_embedding(&self, init: &PoseEmbedding, e_r: &Tensor, e_t: &Tensor) -> Result<(Tensor, Tensor), HypoError> {
        let m = e_r.rows();
        let f_r = self.d_r.predict(&Tensor::row(init.rot.clone()).broadcast_rows(m).hcat(e_r)?)?;
        let f_t = self.d_t.predict(&Tensor::row(init.trans.clone()).broadcast_rows(m).hcat(e_t)?)?;
        Ok((f_r, f_t))
    }

    /// Rotation and translation scores of cost matrices, each summing to 1.
    pub fn score_hypotheses(&self, cost_r: &DMatrix<f64>, cost_t: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>), HypoError> {
        let width = self.arch.max_correspondences;
        if cost_r.ncols() > width {
            return Err(HypoError::TooManyCorrespondences(cost_r.ncols(), width));
        }
        let lr = self.score_r.predict(&score_input(cost_r, width).0)?;
        let lt = self.score_t.predict(&score_input(cost_t, width).0)?;
        Ok((softmax(lr.data()), softmax(lt.data())))
    }

    /// Full hypothesis generation, costing and scoring.
    pub fn generate_hypotheses(&self, init: &Pose, corrs: &[PlanePair], opts: ForwardOptions) -> Result<HypothesisSet, HypoError> {
        Ok(hypothesis_set(&forward(self, init, corrs, opts)?))
    }

    /// Final pose from a hypothesis set.
    pub fn fuse(&self, set: &HypothesisSet, strategy: Fusion) -> Result<Pose, HypoError> {
        let n = set.len();
        if n == 0 {
            return Err(HypoError::EmptyCorrespondences);
        }
        let rows_r: Vec<Vec<f64>> = set.embeddings.iter().map(|e| e.rot.clone()).collect();
        let rows_t: Vec<Vec<f64>> = set.embeddings.iter().map(|e| e.trans.clone()).collect();
        let (hr, ht) = (Tensor::from_rows(&rows_r)?, Tensor::from_rows(&rows_t)?);
        let pick = |kr: usize, kt: usize| PoseEmbedding { rot: rows_r[kr].clone(), trans: rows_t[kt].clone() };
        let check_scores = || {
            if set.w_r.len() == n && set.w_t.len() == n {
                Ok(())
            } else {
                Err(HypoError::MissingScores)
            }
        };
        let emb = match strategy {
            Fusion::Soft => {
                check_scores()?;
                PoseEmbedding { rot: weighted_sum(&hr, &set.w_r).into_data(), trans: weighted_sum(&ht, &set.w_t).into_data() }
            }
            Fusion::Avg => {
                let w = vec![1.0 / n as f64; n];
                PoseEmbedding { rot: weighted_sum(&hr, &w).into_data(), trans: weighted_sum(&ht, &w).into_data() }
            }
            Fusion::MinCost => {
                if set.cost_r.nrows() != n || set.cost_t.nrows() != n {
                    return Err(HypoError::MissingCosts);
                }
                pick(min_cost_row(&set.cost_r), min_cost_row(&set.cost_t))
            }
            Fusion::MaxScore => {
                check_scores()?;
                pick(argmax(&set.w_r), argmax(&set.w_t))
            }
        };
        self.decode_pose(&emb)
    }

    /// Refined pose for an initial pose and a correspondence set.
    pub fn refine(&self, init: &Pose, corrs: &[PlanePair], strategy: Fusion, opts: ForwardOptions) -> Result<(Pose, HypothesisSet), HypoError> {
        let set = self.generate_hypotheses(init, corrs, opts)?;
        Ok((self.fuse(&set, strategy)?, set))
    }
}

/// Heuristic scoring loss and its gradients with respect to the scores and
/// the translation cost matrix.
pub fn scoring_loss(set: &HypothesisSet, gt: &Pose) -> (f64, Vec<f64>, Vec<f64>, DMatrix<f64>) {
    let n = set.len();
    let m = n - 1;
    let i = (0..n)
        .map(|k| rotation_geodesic_rad(set.poses[k].rotation, gt.rotation))
        .enumerate()
        .fold((0, f64::INFINITY), |b, (k, v)| if v < b.1 { (k, v) } else { b })
        .0;
    let j = (0..n)
        .map(|k| (set.poses[k].translation - gt.translation).norm())
        .enumerate()
        .fold((0, f64::INFINITY), |b, (k, v)| if v < b.1 { (k, v) } else { b })
        .0;
    let mut g_wr = vec![0.0; n];
    let mut g_wt = vec![0.0; n];
    let mut g_ct = DMatrix::zeros(n, m);
    let self_weight = 10.0 / m as f64;
    let mut value = (1.0 - set.w_r[i]).abs() + 2.0 * (1.0 - set.w_t[j]).abs();
    g_wr[i] = -(1.0 - set.w_r[i]).signum();
    g_wt[j] = -2.0 * (1.0 - set.w_t[j]).signum();
    for k in 1..=m {
        value += self_weight * set.cost_t[(k, k - 1)];
        g_ct[(k, k - 1)] = self_weight;
    }
    (value, g_wr, g_wt, g_ct)
}

/// One refinement pass: Soft and Avg pose losses plus the weighted scoring
/// loss. Gradients are accumulated into `grads` (scaled by `weight`) when given.
pub fn refinement_loss(
    p: &NopeSacParams,
    init: &Pose,
    corrs: &[PlanePair],
    gt: &Pose,
    opts: ForwardOptions,
    weight: f64,
    grads: Option<&mut NopeSacParams>,
) -> Result<LossParts, HypoError> {
    let tr = forward(p, init, corrs, opts)?;
    let m = tr.m;
    let n = m + 1;
    let avg_w = vec![1.0 / n as f64; n];
    let soft_r = weighted_sum(&tr.h_r, &tr.w_r);
    let soft_t = weighted_sum(&tr.h_t, &tr.w_t);
    let avg_r = weighted_sum(&tr.h_r, &avg_w);
    let avg_t = weighted_sum(&tr.h_t, &avg_w);
    let soft = decode_batch(p, &soft_r, &soft_t)?;
    let avg = decode_batch(p, &avg_r, &avg_t)?;
    let (l_soft, gq_soft, gt_soft) = pose_loss(&soft.quats[0], &soft.trans[0], gt);
    let (l_avg, gq_avg, gt_avg) = pose_loss(&avg.quats[0], &avg.trans[0], gt);
    let set = hypothesis_set(&tr);
    let (l_score, g_wr_s, g_wt_s, g_ct_s) = scoring_loss(&set, gt);
    let parts = LossParts {
        soft: l_soft,
        avg: l_avg,
        score: l_score,
        total: l_soft + l_avg + SCORE_LOSS_WEIGHT * l_score,
    };
    let Some(grads) = grads else {
        return Ok(parts);
    };
    let s = weight;
    let emb = p.arch.embedding;

    // fused poses back to the fused embeddings
    let (g_soft_r, g_soft_t) = decode_backward(p, &soft, &[gq_soft.map(|v| v * s)], &[gt_soft * s], grads)?;
    let (g_avg_r, g_avg_t) = decode_backward(p, &avg, &[gq_avg.map(|v| v * s)], &[gt_avg * s], grads)?;
    let mut g_hr = Tensor::zeros(vec![n, emb]);
    let mut g_ht = Tensor::zeros(vec![n, emb]);
    let mut g_wr: Vec<f64> = g_wr_s.iter().map(|v| v * s * SCORE_LOSS_WEIGHT).collect();
    let mut g_wt: Vec<f64> = g_wt_s.iter().map(|v| v * s * SCORE_LOSS_WEIGHT).collect();
    for k in 0..n {
        let (hr, ht) = (tr.h_r.row_slice(k), tr.h_t.row_slice(k));
        g_wr[k] += hr.iter().zip(g_soft_r.data()).map(|(a, b)| a * b).sum::<f64>();
        g_wt[k] += ht.iter().zip(g_soft_t.data()).map(|(a, b)| a * b).sum::<f64>();
        for c in 0..emb {
            g_hr.row_slice_mut(k)[c] += tr.w_r[k] * g_soft_r.data()[c] + avg_w[k] * g_avg_r.data()[c];
            g_ht.row_slice_mut(k)[c] += tr.w_t[k] * g_soft_t.data()[c] + avg_w[k] * g_avg_t.data()[c];
        }
    }

    // scores back to the cost matrices
    let mut g_cr = DMatrix::zeros(n, m);
    let mut g_ct = g_ct_s * (s * SCORE_LOSS_WEIGHT);
    let score_nets = [(&p.score_r, &tr.sr_cache, &tr.w_r, &g_wr, 0usize), (&p.score_t, &tr.st_cache, &tr.w_t, &g_wt, 1usize)];
    for (net, cache, w, g_w, which) in score_nets {
        let g_logit = Tensor::matrix(n, 1, softmax_vjp(w, g_w))?;
        let grads_net: &mut Mlp = if which == 0 { &mut grads.score_r } else { &mut grads.score_t };
        let g_in = net.backward(cache, &g_logit, grads_net)?;
        let target = if which == 0 { &mut g_cr } else { &mut g_ct };
        for k in 0..n {
            let perm = &tr.score_perm[which * n + k];
            for (slot, &col) in perm.iter().enumerate() {
                target[(k, col)] += g_in.row_slice(k)[slot];
            }
        }
    }

    // costs back to every hypothesis pose
    let mut g_q = vec![[0.0; 4]; n];
    let mut g_tv = vec![Vec3::zeros(); n];
    for k in 0..n {
        let mut g_rot = Mat3::zeros();
        for (i, c) in corrs.iter().enumerate() {
            let (gr, gt_) = (g_cr[(k, i)], g_ct[(k, i)]);
            if gr == 0.0 && gt_ == 0.0 {
                continue;
            }
            let terms = cost_terms(&tr.rots[k], &tr.hyp.trans[k], c);
            cost_vjp(&terms, c, &tr.hyp.trans[k], gr, gt_, &mut g_rot, &mut g_tv[k]);
        }
        g_q[k] = quat_to_matrix_vjp(as_quat(&tr.hyp.quats[k]), &g_rot);
    }
    let (g_hr_dec, g_ht_dec) = decode_backward(p, &tr.hyp, &g_q, &g_tv, grads)?;
    g_hr.add_assign(&g_hr_dec);
    g_ht.add_assign(&g_ht_dec);

    // hypothesis embeddings back through the one-plane, feature and correspondence networks
    let (g_f0r_direct, g_fr) = split_first_row(&g_hr);
    let (g_f0t_direct, g_ft) = split_first_row(&g_ht);
    let g_dr_in = p.d_r.backward(&tr.dr_cache, &g_fr, &mut grads.d_r)?;
    let g_dt_in = p.d_t.backward(&tr.dt_cache, &g_ft, &mut grads.d_t)?;
    let (g_f0r_b, mut g_er) = g_dr_in.hsplit(emb);
    let (g_f0t_b, g_et) = g_dt_in.hsplit(emb);
    let g_et_in = p.e_t.backward(&tr.et_cache, &g_et, &mut grads.e_t)?;
    let (mut g_g, g_er_from_t) = g_et_in.hsplit(p.arch.corr_width);
    g_er.add_assign(&g_er_from_t);
    g_g.add_assign(&p.e_r.backward(&tr.er_cache, &g_er, &mut grads.e_r)?);
    p.g.backward(&tr.g_cache, &g_g, &mut grads.g)?;

    let mut g_f0r = g_f0r_b.sum_rows();
    g_f0r.add_assign(&g_f0r_direct);
    let mut g_f0t = g_f0t_b.sum_rows();
    g_f0t.add_assign(&g_f0t_direct);
    p.rot_enc.backward(&tr.aim.rot_cache, &g_f0r, &mut grads.rot_enc)?;
    p.trans_enc.backward(&tr.aim.trans_cache, &g_f0t, &mut grads.trans_enc)?;
    Ok(parts)
}

fn split_first_row(t: &Tensor) -> (Tensor, Tensor) {
    let cols = t.cols();
    let first = Tensor::row(t.row_slice(0).to_vec());
    let rest = Tensor::matrix(t.rows() - 1, cols, t.data()[cols..].to_vec()).expect("consistent shape");
    (first, rest)
}
