//! Oracles and generators shared by the property and acceptance suites.
#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;

use planesac_core::eval::{polygon_iou, ApMode, PlaneDetection, IOU_THRESHOLD};
use planesac_core::geom::{unit_angle, Plane, Polygon, Vec3};

/// Convex counter-clockwise polygon with `n` vertices on a random ellipse.
pub fn random_convex(rng: &mut impl Rng, n: usize) -> Polygon {
    let (cx, cy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let (rx, ry) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
    let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    angles.iter().map(|a| [cx + rx * a.cos(), cy + ry * a.sin()]).collect()
}

pub fn square(x: f64, y: f64, s: f64) -> Polygon {
    vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]
}

/// Index of the row with the smallest sum, first on ties.
pub fn brute_min_row(c: &DMatrix<f64>) -> usize {
    let sums: Vec<f64> = (0..c.nrows()).map(|i| (0..c.ncols()).map(|j| c[(i, j)]).sum()).collect();
    let mut best = 0;
    for (i, s) in sums.iter().enumerate() {
        if *s < sums[best] {
            best = i;
        }
    }
    best
}

/// Every injective map from rows to columns, maximizing the summed score.
pub fn brute_assignment(s: &DMatrix<f64>) -> Vec<usize> {
    fn rec(s: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        if row == s.nrows() {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| s[(i, j)]).sum();
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for j in 0..s.ncols() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(s, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    rec(s, 0, &mut vec![false; s.ncols()], &mut Vec::new(), &mut best);
    best.1
}

type ApScene = (Vec<PlaneDetection>, Vec<PlaneDetection>);

fn condition(pred: &Plane, gt: &Plane, alpha: f64, beta: f64, mode: ApMode) -> bool {
    let n = mode == ApMode::NoNormal || unit_angle(&pred.normal, &gt.normal).to_degrees() <= alpha;
    let o = mode == ApMode::NoOffset || (pred.offset - gt.offset).abs() <= beta;
    n && o
}

/// Exhaustive plane AP. Enumerates every injective assignment of
/// predictions to overlapping ground truth within each scene and keeps the
/// one the greedy confidence rule would produce: the lexicographically best
/// sequence, in confidence order, of (IoU, lowest ground-truth index).
/// Precision is then interpolated by a direct maximum over later ranks.
pub fn exhaustive_ap(scenes: &[ApScene], alpha: f64, beta: f64, mode: ApMode) -> f64 {
    let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
    for (s, (preds, _)) in scenes.iter().enumerate() {
        for (k, p) in preds.iter().enumerate() {
            ranked.push((p.confidence, s, k));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut assigned: Vec<Vec<Option<usize>>> = scenes.iter().map(|(p, _)| vec![None; p.len()]).collect();
    for (s, (preds, gts)) in scenes.iter().enumerate() {
        let order: Vec<usize> = ranked.iter().filter(|r| r.1 == s).map(|r| r.2).collect();
        let iou = |k: usize, g: usize| polygon_iou(&preds[k].polygon, &gts[g].polygon).unwrap_or(0.0);
        let mut best: Option<(Vec<(f64, i64)>, Vec<Option<usize>>)> = None;
        let mut choice = vec![None; preds.len()];
        enumerate(0, &order, gts.len(), &mut vec![false; gts.len()], &mut choice, &iou, &mut best);
        assigned[s] = best.expect("the empty assignment always exists").1;
    }
    let total: usize = scenes.iter().map(|(_, g)| g.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let tp: Vec<bool> = ranked
        .iter()
        .map(|&(_, s, k)| assigned[s][k].is_some_and(|g| condition(&scenes[s].0[k].plane, &scenes[s].1[g].plane, alpha, beta, mode)))
        .collect();
    let mut hits = 0;
    let points: Vec<(f64, f64)> = tp
        .iter()
        .enumerate()
        .map(|(k, t)| {
            hits += usize::from(*t);
            (hits as f64 / total as f64, hits as f64 / (k + 1) as f64)
        })
        .collect();
    let mut ap = 0.0;
    for (k, t) in tp.iter().enumerate() {
        if *t {
            let r = points[k].0;
            let p = points.iter().filter(|(rr, _)| *rr >= r).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += p / total as f64;
        }
    }
    ap
}

fn enumerate(
    pos: usize,
    order: &[usize],
    n_gt: usize,
    used: &mut Vec<bool>,
    choice: &mut Vec<Option<usize>>,
    iou: &dyn Fn(usize, usize) -> f64,
    best: &mut Option<(Vec<(f64, i64)>, Vec<Option<usize>>)>,
) {
    if pos == order.len() {
        let key: Vec<(f64, i64)> = order
            .iter()
            .map(|&k| choice[k].map_or((-1.0, 0), |g| (iou(k, g), -(g as i64))))
            .collect();
        let better = match best {
            None => true,
            Some((b, _)) => key.iter().zip(b.iter()).find(|(x, y)| x != y).is_some_and(|(x, y)| x.partial_cmp(y) == Some(std::cmp::Ordering::Greater)),
        };
        if better {
            *best = Some((key, choice.clone()));
        }
        return;
    }
    let k = order[pos];
    choice[k] = None;
    enumerate(pos + 1, order, n_gt, used, choice, iou, best);
    for g in 0..n_gt {
        if !used[g] && iou(k, g) >= IOU_THRESHOLD {
            used[g] = true;
            choice[k] = Some(g);
            enumerate(pos + 1, order, n_gt, used, choice, iou, best);
            choice[k] = None;
            used[g] = false;
        }
    }
}

/// Small AP instance: squares on a coarse grid so that overlaps, ties in IoU
/// and ties in confidence all occur.
pub fn random_ap_instance(rng: &mut impl Rng, scenes: usize) -> Vec<ApScene> {
    let normal = |rng: &mut dyn rand::RngCore| {
        let v = Vec3::z() + Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), 0.0);
        v.normalize()
    };
    let cell = |rng: &mut dyn rand::RngCore| square(0.25 * rng.random_range(0..4) as f64, 0.25 * rng.random_range(0..2) as f64, 1.0);
    (0..scenes)
        .map(|_| {
            let n_gt = rng.random_range(0..=3);
            let n_pred = rng.random_range(0..=4);
            let gts = (0..n_gt)
                .map(|_| PlaneDetection { plane: Plane::new(normal(rng), rng.random_range(1.0..3.0)), polygon: cell(rng), confidence: 1.0 })
                .collect();
            let preds = (0..n_pred)
                .map(|_| PlaneDetection {
                    plane: Plane::new(normal(rng), rng.random_range(1.0..3.0)),
                    polygon: cell(rng),
                    confidence: [0.3, 0.5, 0.7, 0.9][rng.random_range(0..4)],
                })
                .collect();
            (preds, gts)
        })
        .collect()
}
