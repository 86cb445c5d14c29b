//! Classical refinement baselines: homography decomposition with plane
//! residual selection, and Levenberg–Marquardt over plane (and optionally
//! point reprojection) residuals.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::BaselineError;
use crate::geom::{
    matrix_to_quat, quat_to_matrix, rotation_geodesic_rad, skew, Mat3, PlanePair, Pose, UnitQuaternion, Vec3,
};
use crate::tinynn::huber;

/// Matched normalized image points `[x1, y1, x2, y2]` on one plane.
pub type PointTrack = [f64; 4];

/// Squared singular-value gap below which a homography is treated as a pure rotation.
const PURE_ROTATION_GAP: f64 = 1e-10;

/// Plane-parameter residual `(n₁′ - n₂, d₁′ - d₂)` of the signed warp.
pub fn d_par_residual(c: &PlanePair, pose: &Pose) -> SVector<f64, 4> {
    let n = pose.rotation_matrix() * c.first.normal;
    let d = c.first.offset + n.dot(&pose.translation);
    let dn = n - c.second.normal;
    SVector::<f64, 4>::new(dn.x, dn.y, dn.z, d - c.second.offset)
}

/// Euclidean distance between warped and observed plane parameters.
pub fn d_par(c: &PlanePair, pose: &Pose) -> f64 {
    d_par_residual(c, pose).norm()
}

fn normalization(pts: &[Vector2<f64>]) -> Mat3 {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Direct linear transform with isotropic normalization. The result has
/// unit Frobenius norm and `H[2,2] >= 0`.
pub fn fit_homography(tracks: &[PointTrack]) -> Result<Mat3, BaselineError> {
    if tracks.len() < 4 {
        return Err(BaselineError::NotEnoughPoints(tracks.len()));
    }
    let p1: Vec<Vector2<f64>> = tracks.iter().map(|t| Vector2::new(t[0], t[1])).collect();
    let p2: Vec<Vector2<f64>> = tracks.iter().map(|t| Vector2::new(t[2], t[3])).collect();
    let (t1, t2) = (normalization(&p1), normalization(&p2));
    let mut a = DMatrix::zeros(2 * tracks.len(), 9);
    for (k, (x, y)) in p1.iter().zip(&p2).enumerate() {
        let u = t1 * Vec3::new(x.x, x.y, 1.0);
        let v = t2 * Vec3::new(y.x, y.y, 1.0);
        let (u, v) = (u / u.z, v / v.z);
        let rows = [
            [0.0, 0.0, 0.0, -u.x, -u.y, -1.0, v.y * u.x, v.y * u.y, v.y],
            [u.x, u.y, 1.0, 0.0, 0.0, 0.0, -v.x * u.x, -v.x * u.y, -v.x],
        ];
        for (r, row) in rows.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                a[(2 * k + r, c)] = *val;
            }
        }
    }
    // the null vector of A is the eigenvector of AᵀA with the smallest eigenvalue
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let scale = eig.eigenvalues[order[8]].abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues[order[1]].abs() / scale < 1e-14 {
        return Err(BaselineError::DegenerateConfiguration);
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::from_row_slice(h.as_slice());
    let t2_inv = t2.try_inverse().ok_or(BaselineError::DegenerateConfiguration)?;
    let mut hm = t2_inv * hn * t1;
    hm /= hm.norm();
    if hm[(2, 2)] < 0.0 {
        hm = -hm;
    }
    Ok(hm)
}

/// One physically plausible decomposition `H ∝ R + (t/d) nᵀ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomographyCandidate {
    pub rotation: UnitQuaternion,
    /// Translation divided by the frame-1 plane offset.
    pub t_over_d: Vec3,
    pub normal: Vec3,
}

fn orthonormal(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

/// SVD decomposition of a calibrated homography into the up to four
/// `(R, t/d, n)` solutions, keeping those with the plane in front of the
/// first camera (`n_z > 0`).
pub fn decompose_homography(h: &Mat3) -> Result<Vec<HomographyCandidate>, BaselineError> {
    if !h.iter().all(|v| v.is_finite()) {
        return Err(BaselineError::NumericalFailure("non-finite homography"));
    }
    let sv = h.singular_values();
    if !(sv[2] > 1e-12 * sv[0]) {
        return Err(BaselineError::NumericalFailure("singular homography"));
    }
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut hn = h / sorted[1];
    // det(H) = d₂ / d₁ > 0 when both cameras see the same side of the plane
    if hn.determinant() < 0.0 {
        hn = -hn;
    }
    let eig = (hn.transpose() * hn).symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let (s1, s3) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[2]]);
    if s1 - s3 < PURE_ROTATION_GAP {
        let r = orthonormal(&hn);
        return Ok(vec![HomographyCandidate { rotation: matrix_to_quat(&r), t_over_d: Vec3::zeros(), normal: Vec3::z() }]);
    }
    let v1: Vec3 = eig.eigenvectors.column(order[0]).into();
    let v2: Vec3 = eig.eigenvectors.column(order[1]).into();
    let mut v3: Vec3 = eig.eigenvectors.column(order[2]).into();
    if v1.cross(&v2).dot(&v3) < 0.0 {
        v3 = -v3;
    }
    let (a, b) = ((1.0 - s3).max(0.0).sqrt(), (s1 - 1.0).max(0.0).sqrt());
    let norm = (s1 - s3).sqrt();
    let u1 = (v1 * a + v3 * b) / norm;
    let u2 = (v1 * a - v3 * b) / norm;
    let mut out = Vec::with_capacity(4);
    for u in [u1, u2] {
        let uu = Mat3::from_columns(&[v2, u, v2.cross(&u)]);
        let (hv2, hu) = (hn * v2, hn * u);
        let ww = Mat3::from_columns(&[hv2, hu, hv2.cross(&hu)]);
        let r = orthonormal(&(ww * uu.transpose()));
        let n = v2.cross(&u);
        let t = (hn - r) * n;
        for (n, t) in [(n, t), (-n, -t)] {
            if n.z > 0.0 {
                out.push(HomographyCandidate { rotation: matrix_to_quat(&r), t_over_d: t, normal: n });
            }
        }
    }
    if out.is_empty() {
        return Err(BaselineError::NumericalFailure("no candidate faces the camera"));
    }
    Ok(out)
}

/// Result of [`homo_ref`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomoRefOutcome {
    pub pose: Pose,
    pub candidates: usize,
    /// `Σ d_par` of the selected pose; `None` when the initial pose was returned.
    pub cost: Option<f64>,
}

/// Homography refinement: every plane with point support contributes its
/// decomposition candidates, translations are rescaled to `‖t_init‖`, and
/// the candidate with the smallest summed plane distance wins.
pub fn homo_ref(corrs: &[PlanePair], init: &Pose, tracks: &[Vec<PointTrack>]) -> HomoRefOutcome {
    let scale = init.translation.norm();
    let mut best: Option<(f64, Pose)> = None;
    let mut count = 0;
    for pts in tracks {
        let Ok(h) = fit_homography(pts) else { continue };
        let Ok(cands) = decompose_homography(&h) else { continue };
        for c in cands {
            count += 1;
            let dir = c.t_over_d.try_normalize(1e-15).unwrap_or_else(Vec3::zeros);
            let pose = Pose::new(c.rotation, dir * scale);
            let cost: f64 = corrs.iter().map(|p| d_par(p, &pose)).sum();
            // ties keep the earlier candidate; the ordering is fixed by rotation bits so plane order does not matter
            let better = match &best {
                None => true,
                Some((b, bp)) => cost < *b || (cost == *b && pose_key(&pose) < pose_key(bp)),
            };
            if better {
                best = Some((cost, pose));
            }
        }
    }
    match best {
        Some((cost, pose)) => HomoRefOutcome { pose, candidates: count, cost: Some(cost) },
        None => HomoRefOutcome { pose: *init, candidates: 0, cost: None },
    }
}

fn pose_key(p: &Pose) -> [u64; 7] {
    let q = p.rotation.to_array();
    let t = p.translation;
    [q[0], q[1], q[2], q[3], t.x, t.y, t.z].map(f64::to_bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumeRefOptions {
    /// Include point reprojection residuals (variant I); plane terms only otherwise (variant II).
    pub use_pix: bool,
    pub huber_delta: f64,
    pub lambda_cam: f64,
    /// Geodesic distance from the initial rotation tolerated before the
    /// rotation regularizer engages.
    pub max_rotation_deg: f64,
    pub initial_damping: f64,
    pub max_iterations: usize,
}

impl Default for NumeRefOptions {
    fn default() -> Self {
        Self { use_pix: false, huber_delta: 0.1, lambda_cam: 0.1, max_rotation_deg: 60.0, initial_damping: 1e-3, max_iterations: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NumeRefStatus {
    Converged,
    MaxIterations,
    SingularNormalEquations,
    NoCorrespondences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumeRefOutcome {
    pub pose: Pose,
    pub status: NumeRefStatus,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

struct Problem<'a> {
    corrs: &'a [PlanePair],
    tracks: &'a [Vec<PointTrack>],
    init_rotation: UnitQuaternion,
    opts: NumeRefOptions,
}

/// Left-multiplied rotation-vector increment followed by a translation increment.
fn retract(pose: &Pose, x: &SVector<f64, 6>) -> Pose {
    let dq = UnitQuaternion::from_rotation_vector(&Vec3::new(x[0], x[1], x[2]));
    Pose::new(dq.mul(pose.rotation).canonicalize(), pose.translation + Vec3::new(x[3], x[4], x[5]))
}

fn reprojection(c: &PlanePair, pose: &Pose, p: &PointTrack) -> Vector2<f64> {
    let r = quat_to_matrix(pose.rotation);
    let h = r + pose.translation * c.first.normal.transpose() / c.first.offset;
    let x = h * Vec3::new(p[0], p[1], 1.0);
    if x.z.abs() < 1e-12 {
        return Vector2::new(1e6, 1e6);
    }
    Vector2::new(x.x / x.z - p[2], x.y / x.z - p[3])
}

impl Problem<'_> {
    fn rotation_excess(&self, pose: &Pose) -> f64 {
        (rotation_geodesic_rad(pose.rotation, self.init_rotation) - self.opts.max_rotation_deg.to_radians()).max(0.0)
    }

    fn cost(&self, pose: &Pose) -> f64 {
        let mut c: f64 = self.corrs.iter().map(|p| huber(d_par(p, pose), self.opts.huber_delta).0).sum();
        if self.opts.use_pix {
            for (corr, pts) in self.corrs.iter().zip(self.tracks) {
                c += pts.iter().map(|p| 0.5 * reprojection(corr, pose, p).norm_squared()).sum::<f64>();
            }
        }
        c + 0.5 * self.opts.lambda_cam * self.rotation_excess(pose).powi(2)
    }

    /// Normal equations `(JᵀWJ, JᵀWr)` of the IRLS-weighted residuals at `pose`.
    fn normal_equations(&self, pose: &Pose) -> (SMatrix<f64, 6, 6>, SVector<f64, 6>) {
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        let rot = pose.rotation_matrix();
        for c in self.corrs {
            let r = d_par_residual(c, pose);
            let norm = r.norm();
            let w = if norm <= self.opts.huber_delta { 1.0 } else { self.opts.huber_delta / norm };
            let n = rot * c.first.normal;
            // d(R n)/dδ = -[n]ₓ, d(d')/dδ = tᵀ d(R n)/dδ, d(d')/dt = nᵀ
            let dn = -skew(&n);
            let dd = pose.translation.transpose() * dn;
            let mut j = SMatrix::<f64, 4, 6>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&dn);
            j.fixed_view_mut::<1, 3>(3, 0).copy_from(&dd);
            j.fixed_view_mut::<1, 3>(3, 3).copy_from(&n.transpose());
            jtj += j.transpose() * j * w;
            jtr += j.transpose() * r * w;
        }
        let h = 1e-6;
        let numeric = |f: &dyn Fn(&Pose) -> Vec<f64>, jtj: &mut SMatrix<f64, 6, 6>, jtr: &mut SVector<f64, 6>| {
            let r0 = f(pose);
            if r0.is_empty() {
                return;
            }
            let mut j = DMatrix::zeros(r0.len(), 6);
            for k in 0..6 {
                let mut dx = SVector::<f64, 6>::zeros();
                dx[k] = h;
                let plus = f(&retract(pose, &dx));
                dx[k] = -h;
                let minus = f(&retract(pose, &dx));
                for i in 0..r0.len() {
                    j[(i, k)] = (plus[i] - minus[i]) / (2.0 * h);
                }
            }
            let r = DVector::from_vec(r0);
            let jt = j.transpose();
            *jtj += SMatrix::<f64, 6, 6>::from_iterator((&jt * &j).iter().copied());
            *jtr += SVector::<f64, 6>::from_iterator((&jt * &r).iter().copied());
        };
        if self.opts.use_pix {
            let pix = |p: &Pose| {
                let mut out = Vec::new();
                for (c, pts) in self.corrs.iter().zip(self.tracks) {
                    for t in pts {
                        let e = reprojection(c, p, t);
                        out.extend([e.x, e.y]);
                    }
                }
                out
            };
            numeric(&pix, &mut jtj, &mut jtr);
        }
        if self.rotation_excess(pose) > 0.0 {
            let s = self.opts.lambda_cam.sqrt();
            let cam = |p: &Pose| vec![s * self.rotation_excess(p)];
            numeric(&cam, &mut jtj, &mut jtr);
        }
        (jtj, jtr)
    }
}

/// Levenberg–Marquardt refinement of `init` over Huber plane residuals,
/// optional point reprojection residuals and a rotation regularizer.
/// `tracks[k]` holds the points of `corrs[k]`; it is ignored unless
/// `opts.use_pix` is set.
pub fn nume_ref(corrs: &[PlanePair], init: &Pose, tracks: &[Vec<PointTrack>], opts: &NumeRefOptions) -> NumeRefOutcome {
    let empty = vec![Vec::new(); corrs.len()];
    let tracks = if opts.use_pix && tracks.len() == corrs.len() { tracks } else { &empty };
    let problem = Problem { corrs, tracks, init_rotation: init.rotation, opts: *opts };
    let initial_cost = problem.cost(init);
    if corrs.is_empty() {
        return NumeRefOutcome { pose: *init, status: NumeRefStatus::NoCorrespondences, iterations: 0, initial_cost, final_cost: initial_cost };
    }
    let mut pose = *init;
    let mut cost = initial_cost;
    let mut lambda = opts.initial_damping;
    let mut status = NumeRefStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let (jtj, jtr) = problem.normal_equations(&pose);
        let mut accepted = false;
        let mut step_norm = f64::INFINITY;
        while lambda < 1e16 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = retract(&pose, &step);
            let c = problem.cost(&candidate);
            if c <= cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                pose = candidate;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                step_norm = step.norm().min(if rel < 1e-12 { 0.0 } else { f64::INFINITY });
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // no damping level decreases the cost: either converged or stuck
            status = if cost <= 1e-24 || jtr.norm() < 1e-12 { NumeRefStatus::Converged } else { NumeRefStatus::SingularNormalEquations };
            break;
        }
        if step_norm < 1e-10 || cost == 0.0 {
            status = NumeRefStatus::Converged;
            break;
        }
    }
    NumeRefOutcome { pose, status, iterations, initial_cost, final_cost: cost }
}
