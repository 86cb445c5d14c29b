//! Pose error summaries, polygon IoU, detection-style plane AP, plane
//! merging across views and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::geom::{project, rotation_geodesic_deg, unit_angle, warp_plane, Plane, Polygon, Pose, Vec3};
use crate::hypo::lower_median;
use crate::matcher::Prf;

/// IoU a prediction needs to count as overlapping a ground-truth plane.
pub const IOU_THRESHOLD: f64 = 0.5;
/// Confidence of planes that were not matched across views.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;
const MIN_POLYGON_AREA: f64 = 1e-12;

/// Rotation error in degrees and translation error in metres.
pub fn pose_error(pred: &Pose, gt: &Pose) -> (f64, f64) {
    (rotation_geodesic_deg(pred.rotation, gt.rotation), (pred.translation - gt.translation).norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseErrorSummary {
    pub rot_median: f64,
    pub rot_mean: f64,
    pub rot_le30: f64,
    pub rot_le15: f64,
    pub rot_le10: f64,
    pub trans_median: f64,
    pub trans_mean: f64,
    pub trans_le1: f64,
    pub trans_le05: f64,
    pub trans_le02: f64,
}

pub fn summarize(errors: &[(f64, f64)]) -> Result<PoseErrorSummary, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = errors.len() as f64;
    let (rot, trans): (Vec<f64>, Vec<f64>) = errors.iter().copied().unzip();
    let frac = |v: &[f64], th: f64| v.iter().filter(|x| **x <= th).count() as f64 / n;
    Ok(PoseErrorSummary {
        rot_median: lower_median(&rot),
        rot_mean: rot.iter().sum::<f64>() / n,
        rot_le30: frac(&rot, 30.0),
        rot_le15: frac(&rot, 15.0),
        rot_le10: frac(&rot, 10.0),
        trans_median: lower_median(&trans),
        trans_mean: trans.iter().sum::<f64>() / n,
        trans_le1: frac(&trans, 1.0),
        trans_le05: frac(&trans, 0.5),
        trans_le02: frac(&trans, 0.2),
    })
}

/// Shoelace area, positive for counter-clockwise polygons.
pub fn signed_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>() / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman clip of `subject` by the convex CCW polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (cross(a, b, p), cross(a, b, q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two convex counter-clockwise polygons.
pub fn polygon_iou(a: &[[f64; 2]], b: &[[f64; 2]]) -> Result<f64, EvalError> {
    let (area_a, area_b) = (signed_area(a), signed_area(b));
    for area in [area_a, area_b] {
        if !(area >= MIN_POLYGON_AREA) {
            return Err(EvalError::DegeneratePolygon(area));
        }
    }
    let inter = signed_area(&clip_polygon(a, b)).max(0.0);
    let union = area_a + area_b - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// A plane with its image footprint and a detection confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneDetection {
    pub plane: Plane,
    /// Empty when the footprint could not be projected.
    pub polygon: Polygon,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    All,
    /// Offset condition ignored.
    NoOffset,
    /// Normal condition ignored.
    NoNormal,
}

impl ApMode {
    pub const ALL: [ApMode; 3] = [ApMode::All, ApMode::NoOffset, ApMode::NoNormal];

    pub fn name(self) -> &'static str {
        match self {
            ApMode::All => "all",
            ApMode::NoOffset => "nooffset",
            ApMode::NoNormal => "nonormal",
        }
    }
}

/// `(normal degrees, offset metres)` condition sets, loosest first.
pub const AP_CONDITIONS: [(f64, f64); 3] = [(30.0, 1.0), (15.0, 0.5), (5.0, 0.2)];

fn iou_or_zero(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    polygon_iou(a, b).unwrap_or(0.0)
}

/// Assignment of predictions to ground truth, shared by every mode: in
/// descending confidence, each prediction takes the unassigned ground-truth
/// plane of highest IoU (at least [`IOU_THRESHOLD`]). Returns per scene and
/// prediction the assigned ground-truth index.
fn assign(scenes: &[(Vec<PlaneDetection>, Vec<PlaneDetection>)], order: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|(_, g)| vec![false; g.len()]).collect();
    let mut out: Vec<Vec<Option<usize>>> = scenes.iter().map(|(p, _)| vec![None; p.len()]).collect();
    for &(s, k) in order {
        let (preds, gts) = &scenes[s];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[s][g] {
                continue;
            }
            let iou = iou_or_zero(&preds[k].polygon, &gt.polygon);
            if iou >= IOU_THRESHOLD && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[s][g] = true;
            out[s][k] = Some(g);
        }
    }
    out
}

fn passes(pred: &Plane, gt: &Plane, alpha_deg: f64, beta_m: f64, mode: ApMode) -> bool {
    let normal_ok = mode == ApMode::NoNormal || unit_angle(&pred.normal, &gt.normal).to_degrees() <= alpha_deg;
    let offset_ok = mode == ApMode::NoOffset || (pred.offset - gt.offset).abs() <= beta_m;
    normal_ok && offset_ok
}

/// All-points interpolated area under the precision-recall curve.
pub fn average_precision(tp: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, t) in tp.iter().enumerate() {
        hits += usize::from(*t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / total_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Detection order: descending confidence, ties by scene then index.
fn detection_order(scenes: &[(Vec<PlaneDetection>, Vec<PlaneDetection>)]) -> Vec<(usize, usize)> {
    let mut order: Vec<(usize, usize)> =
        scenes.iter().enumerate().flat_map(|(s, (p, _))| (0..p.len()).map(move |k| (s, k))).collect();
    order.sort_by(|a, b| scenes[b.0].0[b.1].confidence.total_cmp(&scenes[a.0].0[a.1].confidence).then(a.cmp(b)));
    order
}

/// Plane AP over scenes of `(predictions, ground truth)`.
pub fn plane_ap(scenes: &[(Vec<PlaneDetection>, Vec<PlaneDetection>)], alpha_deg: f64, beta_m: f64, mode: ApMode) -> f64 {
    let order = detection_order(scenes);
    let assigned = assign(scenes, &order);
    let tp: Vec<bool> = order
        .iter()
        .map(|&(s, k)| assigned[s][k].is_some_and(|g| passes(&scenes[s].0[k].plane, &scenes[s].1[g].plane, alpha_deg, beta_m, mode)))
        .collect();
    average_precision(&tp, scenes.iter().map(|(_, g)| g.len()).sum())
}

/// AP for every condition set and mode, keyed `ap_{mode}_{alpha}_{beta}`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ApTable {
    /// `values[condition][mode]` in [`AP_CONDITIONS`] and [`ApMode::ALL`] order.
    pub values: [[f64; 3]; 3],
}

impl ApTable {
    pub fn compute(scenes: &[(Vec<PlaneDetection>, Vec<PlaneDetection>)]) -> Self {
        let order = detection_order(scenes);
        let assigned = assign(scenes, &order);
        let total = scenes.iter().map(|(_, g)| g.len()).sum();
        let mut values = [[0.0; 3]; 3];
        for (c, &(alpha, beta)) in AP_CONDITIONS.iter().enumerate() {
            for (m, &mode) in ApMode::ALL.iter().enumerate() {
                let tp: Vec<bool> = order
                    .iter()
                    .map(|&(s, k)| assigned[s][k].is_some_and(|g| passes(&scenes[s].0[k].plane, &scenes[s].1[g].plane, alpha, beta, mode)))
                    .collect();
                values[c][m] = average_precision(&tp, total);
            }
        }
        Self { values }
    }

    /// `All <= -Offset` and `All <= -Normal` for every condition set.
    pub fn is_monotone(&self) -> bool {
        self.values.iter().all(|v| v[0] <= v[1] && v[0] <= v[2])
    }
}

/// Projects a frame-1 footprint through `plane` into frame 2. Returns an
/// empty polygon when a corner leaves the front of either camera.
pub fn transfer_polygon(polygon: &[[f64; 2]], plane: &Plane, pose: &Pose) -> Polygon {
    let mut out = Vec::with_capacity(polygon.len());
    for p in polygon {
        let ray = Vec3::new(p[0], p[1], 1.0);
        let denom = plane.normal.dot(&ray);
        if denom.abs() < 1e-12 || plane.offset / denom <= 0.0 {
            return Vec::new();
        }
        match project(&pose.transform_point(&(ray * (plane.offset / denom)))) {
            Some(q) => out.push([q.x, q.y]),
            None => return Vec::new(),
        }
    }
    if signed_area(&out) < 0.0 {
        out.reverse();
    }
    out
}

/// Merges two views' detections in frame 2. Frame-1 planes are warped by
/// `pose`; each match `(i, j, score)` becomes one plane whose parameters are
/// the confidence-weighted average of the pair, with the frame-2 footprint
/// and the match score as confidence. Unmatched planes are kept.
pub fn merge_scene(first: &[PlaneDetection], second: &[PlaneDetection], matches: &[(usize, usize, f64)], pose: &Pose) -> Vec<PlaneDetection> {
    let warped: Vec<PlaneDetection> = first
        .iter()
        .map(|d| PlaneDetection {
            plane: warp_plane(&d.plane, pose),
            polygon: transfer_polygon(&d.polygon, &d.plane, pose),
            confidence: d.confidence,
        })
        .collect();
    let mut used1 = vec![false; first.len()];
    let mut used2 = vec![false; second.len()];
    let mut out = Vec::with_capacity(first.len() + second.len());
    for &(i, j, score) in matches {
        let (a, b) = (&warped[i], &second[j]);
        let (wa, wb) = (a.confidence.max(0.0), b.confidence.max(0.0));
        let (wa, wb) = if wa + wb > 0.0 { (wa, wb) } else { (1.0, 1.0) };
        let n = a.plane.normal * wa + b.plane.normal * wb;
        let d = (a.plane.offset * wa + b.plane.offset * wb) / (wa + wb);
        let normal = n.try_normalize(1e-12).unwrap_or(b.plane.normal);
        out.push(PlaneDetection { plane: Plane::from_signed(normal, d), polygon: b.polygon.clone(), confidence: score });
        used1[i] = true;
        used2[j] = true;
    }
    out.extend(warped.into_iter().zip(&used1).filter(|(_, u)| !**u).map(|(d, _)| d));
    out.extend(second.iter().zip(&used2).filter(|(_, u)| !**u).map(|(d, _)| d.clone()));
    out
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Sweep cell or experiment label; empty for plain runs.
    pub cell: String,
    pub scenes: usize,
    pub pose: PoseErrorSummary,
    pub ap: ApTable,
    pub matching: Prf,
}

pub const REPORT_COLUMNS: [&str; 25] = [
    "method",
    "cell",
    "scenes",
    "rot_med",
    "rot_mean",
    "rot_le30",
    "rot_le15",
    "rot_le10",
    "tr_med",
    "tr_mean",
    "tr_le1",
    "tr_le05",
    "tr_le02",
    "ap_all_30_1",
    "ap_nooffset_30_1",
    "ap_nonormal_30_1",
    "ap_all_15_05",
    "ap_nooffset_15_05",
    "ap_nonormal_15_05",
    "ap_all_5_02",
    "ap_nooffset_5_02",
    "ap_nonormal_5_02",
    "match_p",
    "match_r",
    "match_f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with a fixed column order; floats use the shortest round-trip form.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let p = &r.pose;
        let mut nums = vec![
            p.rot_median,
            p.rot_mean,
            p.rot_le30,
            p.rot_le15,
            p.rot_le10,
            p.trans_median,
            p.trans_mean,
            p.trans_le1,
            p.trans_le05,
            p.trans_le02,
        ];
        for cond in r.ap.values {
            nums.extend(cond);
        }
        nums.extend([r.matching.precision, r.matching.recall, r.matching.f_score]);
        let _ = write!(out, "{},{},{}", csv_field(&r.method), csv_field(&r.cell), r.scenes);
        for v in nums {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

pub fn report_json(rows: &[ReportRow]) -> Result<String, EvalError> {
    Ok(serde_json::to_string_pretty(rows)?)
}

pub fn emit_report(rows: &[ReportRow], path: &Path, format: ReportFormat) -> Result<(), EvalError> {
    let text = match format {
        ReportFormat::Csv => report_csv(rows),
        ReportFormat::Json => report_json(rows)? + "\n",
    };
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report_json(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
