//! Per-scene estimation for every method and aggregation into report rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{homo_ref, nume_ref, NumeRefOptions, PointTrack};
use crate::error::HypoError;
use crate::eval::{merge_scene, pose_error, summarize, ApTable, PlaneDetection, ReportRow, DEFAULT_CONFIDENCE};
use crate::geom::{PlanePair, Pose};
use crate::hypo::{predicted_matches, ForwardOptions, Fusion, NopeSacParams};
use crate::matcher::{Match, MatchCounts, PlaneMatcher};
use crate::synth::ScenePair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NopeSac,
    HomoRef,
    #[serde(rename = "nume-ref1")]
    NumeRef1,
    #[serde(rename = "nume-ref2")]
    NumeRef2,
    InitOnly,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::NopeSac, Method::HomoRef, Method::NumeRef1, Method::NumeRef2, Method::InitOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::NopeSac => "nope-sac",
            Method::HomoRef => "homo-ref",
            Method::NumeRef1 => "nume-ref1",
            Method::NumeRef2 => "nume-ref2",
            Method::InitOnly => "init-only",
        }
    }

    pub fn needs_model(self) -> bool {
        self == Method::NopeSac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub method: Method,
    pub fusion: Fusion,
    pub matcher: PlaneMatcher,
    pub warp: bool,
    pub nume_ref: NumeRefOptions,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            method: Method::NopeSac,
            fusion: Fusion::Soft,
            matcher: PlaneMatcher::default(),
            warp: true,
            nume_ref: NumeRefOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEstimate {
    pub scene: usize,
    pub pose: Pose,
    pub rot_error_deg: f64,
    pub trans_error_m: f64,
    /// Predicted matches as `(i, j, score)`, most confident first.
    pub matches: Vec<(usize, usize, f64)>,
    /// Mean rotation and translation cost of the fused pose over the
    /// correspondences; only set for the learned method.
    pub mean_costs: Option<(f64, f64)>,
}

/// Point tracks inside each matched plane pair. Only pairs whose two
/// observations come from the same physical plane have consistent points.
pub fn match_tracks(scene: &ScenePair, matches: &[Match]) -> Vec<Vec<PointTrack>> {
    matches
        .iter()
        .map(|m| match (scene.views[0][m.i].plane_id, scene.views[1][m.j].plane_id) {
            (Some(a), Some(b)) if a == b => scene.points[a].clone(),
            _ => Vec::new(),
        })
        .collect()
}

pub fn estimate_scene(index: usize, scene: &ScenePair, params: Option<&NopeSacParams>, opts: &EstimateOptions) -> Result<SceneEstimate, HypoError> {
    let mut matches = predicted_matches(scene, &opts.matcher, &scene.init)?;
    let mut mean_costs = None;
    let pose = match opts.method {
        Method::InitOnly => scene.init,
        Method::NopeSac => {
            let params = params.ok_or(HypoError::Config("nope-sac needs a trained checkpoint".into()))?;
            matches.truncate(params.arch.max_correspondences);
            let corrs = pairs(scene, &matches);
            if corrs.is_empty() {
                scene.init
            } else {
                let (pose, _) = params.refine(&scene.init, &corrs, opts.fusion, ForwardOptions { warp: opts.warp })?;
                let (cr, ct) = crate::geom::one_plane_costs(&pose, &corrs);
                let n = corrs.len() as f64;
                mean_costs = Some((cr.iter().sum::<f64>() / n, ct.iter().sum::<f64>() / n));
                pose
            }
        }
        Method::HomoRef => homo_ref(&pairs(scene, &matches), &scene.init, &match_tracks(scene, &matches)).pose,
        Method::NumeRef1 | Method::NumeRef2 => {
            let o = NumeRefOptions { use_pix: opts.method == Method::NumeRef1, ..opts.nume_ref };
            nume_ref(&pairs(scene, &matches), &scene.init, &match_tracks(scene, &matches), &o).pose
        }
    };
    let (rot_error_deg, trans_error_m) = pose_error(&pose, &scene.pose);
    Ok(SceneEstimate {
        scene: index,
        pose,
        rot_error_deg,
        trans_error_m,
        matches: matches.iter().map(|m| (m.i, m.j, m.score)).collect(),
        mean_costs,
    })
}

fn pairs(scene: &ScenePair, matches: &[Match]) -> Vec<PlanePair> {
    matches.iter().map(|m| PlanePair::new(scene.views[0][m.i].plane, scene.views[1][m.j].plane)).collect()
}

/// Estimates every scene in parallel; results are in scene order.
pub fn estimate_all(scenes: &[ScenePair], params: Option<&NopeSacParams>, opts: &EstimateOptions) -> Result<Vec<SceneEstimate>, HypoError> {
    scenes.par_iter().enumerate().map(|(k, s)| estimate_scene(k, s, params, opts)).collect()
}

fn detections(scene: &ScenePair, view: usize) -> Vec<PlaneDetection> {
    scene.views[view]
        .iter()
        .map(|o| PlaneDetection { plane: o.plane, polygon: o.polygon.clone(), confidence: DEFAULT_CONFIDENCE })
        .collect()
}

/// Merged frame-2 predictions and ground truth of one scene for plane AP.
pub fn ap_instance(scene: &ScenePair, est: &SceneEstimate) -> (Vec<PlaneDetection>, Vec<PlaneDetection>) {
    let merged = merge_scene(&detections(scene, 0), &detections(scene, 1), &est.matches, &est.pose);
    let gt = scene
        .planes_in_second()
        .into_iter()
        .zip(scene.polygons_in_second())
        .map(|(plane, polygon)| PlaneDetection { plane, polygon, confidence: 1.0 })
        .collect();
    (merged, gt)
}

/// Summary row over `scenes` and their estimates (paired by position).
pub fn report_row(method: &str, cell: &str, scenes: &[ScenePair], estimates: &[SceneEstimate]) -> Result<ReportRow, crate::error::EvalError> {
    let errors: Vec<(f64, f64)> = estimates.iter().map(|e| (e.rot_error_deg, e.trans_error_m)).collect();
    let pose = summarize(&errors)?;
    let instances: Vec<_> = scenes.par_iter().zip(estimates).map(|(s, e)| ap_instance(s, e)).collect();
    let counts = scenes.iter().zip(estimates).fold(MatchCounts::default(), |acc, (s, e)| {
        let pred: Vec<(usize, usize)> = e.matches.iter().map(|m| (m.0, m.1)).collect();
        acc.merge(MatchCounts::of(&pred, &s.correspondences))
    });
    Ok(ReportRow {
        method: method.to_string(),
        cell: cell.to_string(),
        scenes: scenes.len(),
        pose,
        ap: ApTable::compute(&instances),
        matching: counts.prf(),
    })
}
