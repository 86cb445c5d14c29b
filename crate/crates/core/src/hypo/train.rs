use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{aim_loss, refinement_loss, ForwardOptions, Fusion, LossParts};
use super::params::{Architecture, NopeSacParams, ParamGroup};
use crate::error::{HypoError, NnError};
use crate::geom::{rotation_geodesic_deg, PlanePair, Pose};
use crate::matcher::{
    matching_loss, sinkhorn_backward, sinkhorn_with_trace, Match, MatchSupervision, PlaneMatcher, PlaneSet,
};
use crate::rng::{domain, stream};
use crate::synth::{perturb_pose, sample_pose, PoseRange, ScenePair};
use crate::tinynn::{AdamW, AdamWConfig, Checkpoint};

/// Items per gradient chunk. Chunks are summed in order, so the result does
/// not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of the stage after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl StageConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if (step as f64) >= self.decay_at * self.steps as f64 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { steps: 20_000, batch: 16, lr: 1e-4, decay_at: 0.7, decay_factor: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub architecture: Architecture,
    pub aim: StageConfig,
    pub refine: StageConfig,
    pub weight_decay: f64,
    /// Perturbation of the ground-truth pose drawn afresh for every
    /// training item.
    pub init_rotation_sigma_deg: f64,
    pub init_translation_sigma: f64,
    pub calibration_steps: usize,
    pub calibration_batch: usize,
    pub calibration_lr: f64,
    pub eval_interval: usize,
    pub log_interval: usize,
    pub validation_poses: usize,
    /// Scenes held out from the end of the dataset for validation.
    pub validation_scenes: usize,
    pub warp: bool,
    pub matcher: PlaneMatcher,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            architecture: Architecture::full(),
            aim: StageConfig { decay_at: 1.0, ..StageConfig::default() },
            refine: StageConfig::default(),
            weight_decay: 1e-4,
            init_rotation_sigma_deg: 10.0,
            init_translation_sigma: 0.3,
            calibration_steps: 200,
            calibration_batch: 32,
            calibration_lr: 0.05,
            eval_interval: 500,
            log_interval: 10,
            validation_poses: 256,
            validation_scenes: 32,
            warp: true,
            matcher: PlaneMatcher::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HypoError> {
        self.architecture.validate()?;
        let bad = |m: &str| Err(HypoError::Config(m.into()));
        for (name, s) in [("aim", &self.aim), ("refine", &self.refine)] {
            if s.steps > 0 && s.batch == 0 {
                return bad(&format!("{name}.batch must be positive"));
            }
            if !(s.lr > 0.0) || !(s.decay_factor > 0.0) || !(s.decay_at >= 0.0) {
                return bad(&format!("{name} learning rate, decay_at and decay_factor must be positive"));
            }
        }
        if self.eval_interval == 0 || self.log_interval == 0 {
            return bad("eval_interval and log_interval must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.init_rotation_sigma_deg >= 0.0) || !(self.init_translation_sigma >= 0.0) {
            return bad("weight decay and perturbation sigmas must be non-negative");
        }
        if self.calibration_steps > 0 && (self.calibration_batch == 0 || !(self.calibration_lr > 0.0)) {
            return bad("calibration needs a positive batch and learning rate");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.aim.steps + self.refine.steps
    }

    fn adamw(&self, stage: &StageConfig) -> AdamW {
        AdamW::new(AdamWConfig { lr: stage.lr, weight_decay: self.weight_decay, ..AdamWConfig::default() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Aim,
    Calibrate,
    Refine,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Aim => "aim",
            Stage::Calibrate => "calibrate",
            Stage::Refine => "refine",
        }
    }
}

/// One training-log row. Validation columns are filled on evaluation steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub lr: f64,
    pub loss: LossParts,
    pub val_rot_median: Option<f64>,
    pub val_trans_median: Option<f64>,
}

pub const LOG_HEADER: &str = "step,stage,lr,loss,soft,avg,score,val_rot_median_deg,val_trans_median_m";

impl LogRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{:e},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
            self.step,
            self.stage.name(),
            self.lr,
            self.loss.total,
            self.loss.soft,
            self.loss.avg,
            self.loss.score,
            opt(self.val_rot_median),
            opt(self.val_trans_median)
        );
        s
    }
}

/// Lower-middle element of the sorted values; NaN for an empty slice.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// The matcher's predicted matches at `init`, most confident first.
pub fn predicted_matches(scene: &ScenePair, matcher: &PlaneMatcher, init: &Pose) -> Result<Vec<Match>, HypoError> {
    let (p1, p2) = (scene.observed_planes(0), scene.observed_planes(1));
    let (d1, d2) = (scene.descriptors(0), scene.descriptors(1));
    let first = PlaneSet { planes: &p1, descriptors: &d1 };
    let second = PlaneSet { planes: &p2, descriptors: &d2 };
    let Some(outcome) = matcher.run(first, second, init)? else {
        return Ok(Vec::new());
    };
    let mut matches = outcome.matches;
    matches.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.i.cmp(&b.i)));
    Ok(matches)
}

/// Plane pairs for the matcher's predicted matches at `init`, most
/// confident first, capped at `max`.
pub fn predicted_correspondences(
    scene: &ScenePair,
    matcher: &PlaneMatcher,
    init: &Pose,
    max: usize,
) -> Result<(Vec<PlanePair>, Vec<(usize, usize)>), HypoError> {
    let mut matches = predicted_matches(scene, matcher, init)?;
    matches.truncate(max);
    let pairs = matches.iter().map(|m| PlanePair::new(scene.views[0][m.i].plane, scene.views[1][m.j].plane)).collect();
    Ok((pairs, matches.iter().map(|m| (m.i, m.j)).collect()))
}

fn gt_correspondences(scene: &ScenePair, max: usize) -> Vec<PlanePair> {
    let mut pairs = scene.gt_pairs();
    pairs.truncate(max);
    pairs
}

struct Item {
    init: Pose,
    corrs: Vec<PlanePair>,
    gt: Pose,
}

/// Training state. Every batch is drawn from a stream keyed by the global
/// step, so a resumed run sees exactly the batches of an uninterrupted one.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub params: NopeSacParams,
    pub step: usize,
    pub calibrated: bool,
    optimizer: AdamW,
    train: &'a [ScenePair],
    validation: &'a [ScenePair],
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, scenes: &'a [ScenePair]) -> Result<Self, HypoError> {
        config.validate()?;
        let mut rng = stream(config.seed, domain::PARAM_INIT, 0);
        let mut params = NopeSacParams::init(config.architecture, &mut rng)?;
        params.bin_score = config.matcher.bin_score;
        Self::with_params(config, scenes, params)
    }

    /// Starts from existing parameters, e.g. a pretrained auto-encoder.
    pub fn with_params(config: TrainConfig, scenes: &'a [ScenePair], params: NopeSacParams) -> Result<Self, HypoError> {
        config.validate()?;
        if params.arch != config.architecture {
            return Err(HypoError::Config("checkpoint architecture differs from the configured one".into()));
        }
        if config.refine.steps > 0 && scenes.len() <= config.validation_scenes {
            return Err(HypoError::Config(format!(
                "{} scenes leave nothing to train on after holding out {}",
                scenes.len(),
                config.validation_scenes
            )));
        }
        let split = scenes.len().saturating_sub(config.validation_scenes);
        let optimizer = config.adamw(&config.aim);
        Ok(Self { config, params, step: 0, calibrated: false, optimizer, train: &scenes[..split], validation: &scenes[split..] })
    }

    pub fn resume(config: TrainConfig, scenes: &'a [ScenePair], ck: &Checkpoint) -> Result<Self, HypoError> {
        let params = NopeSacParams::read_from(ck)?;
        let mut t = Self::with_params(config, scenes, params)?;
        let scalar = |n: &str| ck.scalar(n).ok_or_else(|| HypoError::Nn(NnError::Checkpoint(format!("missing {n}"))));
        t.step = scalar("train.step")? as usize;
        t.calibrated = scalar("train.calibrated")? != 0.0;
        if t.step >= t.config.aim.steps && t.calibrated {
            t.optimizer = t.config.adamw(&t.config.refine);
        }
        t.optimizer.step = scalar("adam.step")? as u64;
        let count = scalar("adam.buffers")? as usize;
        let buffer = |n: String| {
            ck.buffer(&n).map(<[f64]>::to_vec).ok_or_else(|| HypoError::Nn(NnError::Checkpoint(format!("missing {n}"))))
        };
        t.optimizer.first_moment = (0..count).map(|k| buffer(format!("adam.m.{k}"))).collect::<Result<_, _>>()?;
        t.optimizer.second_moment = (0..count).map(|k| buffer(format!("adam.v.{k}"))).collect::<Result<_, _>>()?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        self.params.write_into(&mut ck);
        ck.scalars.push(("train.step".into(), self.step as f64));
        ck.scalars.push(("train.calibrated".into(), if self.calibrated { 1.0 } else { 0.0 }));
        ck.scalars.push(("adam.step".into(), self.optimizer.step as f64));
        ck.scalars.push(("adam.buffers".into(), self.optimizer.first_moment.len() as f64));
        for (k, (m, v)) in self.optimizer.first_moment.iter().zip(&self.optimizer.second_moment).enumerate() {
            ck.buffers.push((format!("adam.m.{k}"), m.clone()));
            ck.buffers.push((format!("adam.v.{k}"), v.clone()));
        }
        ck
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.total_steps() && (self.calibrated || self.config.refine.steps == 0)
    }

    /// Runs until the configured total (or `limit` more steps), calling
    /// `log` for every row.
    pub fn run(&mut self, limit: Option<usize>, log: &mut dyn FnMut(&LogRow)) -> Result<(), HypoError> {
        let end = limit.map_or(self.config.total_steps(), |l| (self.step + l).min(self.config.total_steps()));
        while self.step < end {
            if self.step >= self.config.aim.steps && !self.calibrated {
                let row = self.calibrate()?;
                log(&row);
            }
            let row = self.train_step()?;
            if let Some(row) = row {
                log(&row);
            }
        }
        if self.step >= self.config.total_steps() && self.config.refine.steps > 0 && !self.calibrated {
            let row = self.calibrate()?;
            log(&row);
        }
        Ok(())
    }

    fn train_step(&mut self) -> Result<Option<LogRow>, HypoError> {
        let step = self.step;
        let (stage, lr, loss) = if step < self.config.aim.steps {
            let lr = self.config.aim.lr_at(step);
            (Stage::Aim, lr, self.aim_step(step, lr)?)
        } else {
            let local = step - self.config.aim.steps;
            let lr = self.config.refine.lr_at(local);
            (Stage::Refine, lr, self.refine_step(step, lr)?)
        };
        self.step += 1;
        let stage_end = self.step == self.config.aim.steps || self.step == self.config.total_steps();
        let evaluate = self.step % self.config.eval_interval == 0 || stage_end;
        if !evaluate && step % self.config.log_interval != 0 {
            return Ok(None);
        }
        let (val_rot_median, val_trans_median) = if evaluate {
            let (r, t) = match stage {
                Stage::Aim => self.validate_aim()?,
                _ => self.validate_refiner()?,
            };
            (Some(r), Some(t))
        } else {
            (None, None)
        };
        Ok(Some(LogRow { step, stage, lr, loss, val_rot_median, val_trans_median }))
    }

    fn aim_step(&mut self, step: usize, lr: f64) -> Result<LossParts, HypoError> {
        let mut rng = stream(self.config.seed, domain::AIM_BATCH, step as u64);
        let poses: Vec<Pose> = (0..self.config.aim.batch).map(|_| sample_pose(&mut rng, PoseRange::AIM)).collect();
        let mut grads = self.params.zeros_like();
        let loss = aim_loss(&self.params, &poses, Some(&mut grads))?;
        self.apply(ParamGroup::Aim, &grads, lr)?;
        Ok(LossParts { total: loss, ..LossParts::default() })
    }

    fn items(&self, step: usize) -> Result<Vec<Item>, HypoError> {
        let mut rng = stream(self.config.seed, domain::REFINE_BATCH, step as u64);
        let max = self.params.arch.max_correspondences;
        let matcher = PlaneMatcher { bin_score: self.params.bin_score, ..self.config.matcher };
        let mut items = Vec::with_capacity(2 * self.config.refine.batch);
        for _ in 0..self.config.refine.batch {
            let scene = &self.train[rng.random_range(0..self.train.len())];
            let init = perturb_pose(&scene.pose, self.config.init_rotation_sigma_deg, self.config.init_translation_sigma, &mut rng);
            let (pred, _) = predicted_correspondences(scene, &matcher, &init, max)?;
            for corrs in [pred, gt_correspondences(scene, max)] {
                if !corrs.is_empty() {
                    items.push(Item { init, corrs, gt: scene.pose });
                }
            }
        }
        Ok(items)
    }

    fn refine_step(&mut self, step: usize, lr: f64) -> Result<LossParts, HypoError> {
        let items = self.items(step)?;
        if items.is_empty() {
            return Ok(LossParts::default());
        }
        let weight = 1.0 / items.len() as f64;
        let opts = ForwardOptions { warp: self.config.warp };
        let params = &self.params;
        let chunks: Vec<(NopeSacParams, LossParts)> = items
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = params.zeros_like();
                let mut parts = LossParts::default();
                for it in chunk {
                    let p = refinement_loss(params, &it.init, &it.corrs, &it.gt, opts, weight, Some(&mut grads))?;
                    parts.add(&p.scaled(weight));
                }
                Ok((grads, parts))
            })
            .collect::<Result<_, HypoError>>()?;
        let mut iter = chunks.into_iter();
        let (mut grads, mut parts) = iter.next().expect("at least one chunk");
        for (g, p) in iter {
            grads.add_assign(&g);
            parts.add(&p);
        }
        self.apply(ParamGroup::Refiner, &grads, lr)?;
        Ok(parts)
    }

    fn apply(&mut self, group: ParamGroup, grads: &NopeSacParams, lr: f64) -> Result<(), HypoError> {
        if !grads.is_finite() {
            return Err(HypoError::Config(format!("non-finite gradient at step {}", self.step)));
        }
        self.optimizer.step_with_lr(self.params.group_params_mut(group), grads.group_params(group), lr)?;
        Ok(())
    }

    /// Fits the dustbin score by minimizing the matching loss on training
    /// scenes at perturbed initial poses, then resets the optimizer for the
    /// refiner stage.
    pub fn calibrate(&mut self) -> Result<LogRow, HypoError> {
        let matcher = self.config.matcher;
        let mut adam = AdamW::new(AdamWConfig { lr: self.config.calibration_lr, weight_decay: 0.0, ..AdamWConfig::default() });
        let mut bin = [self.params.bin_score];
        let mut last = 0.0;
        for k in 0..self.config.calibration_steps {
            let mut rng = stream(self.config.seed, domain::CALIBRATION, k as u64);
            let mut loss = 0.0;
            let mut grad = 0.0;
            let mut count = 0usize;
            for _ in 0..self.config.calibration_batch {
                let scene = &self.train[rng.random_range(0..self.train.len())];
                let init = perturb_pose(&scene.pose, self.config.init_rotation_sigma_deg, self.config.init_translation_sigma, &mut rng);
                let (p1, p2) = (scene.observed_planes(0), scene.observed_planes(1));
                let (d1, d2) = (scene.descriptors(0), scene.descriptors(1));
                if p1.is_empty() || p2.is_empty() {
                    continue;
                }
                let scores = matcher.scores(PlaneSet { planes: &p1, descriptors: &d1 }, PlaneSet { planes: &p2, descriptors: &d2 }, &init)?;
                let (a, trace) = sinkhorn_with_trace(&scores.total, bin[0], matcher.iters);
                let sup = MatchSupervision::from_matches(scene.correspondences.clone(), p1.len(), p2.len());
                let (l, g_log) = matching_loss(&a, &sup)?;
                loss += l;
                grad += sinkhorn_backward(&trace, &g_log).1;
                count += 1;
            }
            if count == 0 {
                break;
            }
            last = loss / count as f64;
            let g = [grad / count as f64];
            adam.step(vec![&mut bin[..]], vec![&g[..]])?;
        }
        self.params.bin_score = bin[0];
        self.calibrated = true;
        self.optimizer = self.config.adamw(&self.config.refine);
        Ok(LogRow {
            step: self.step,
            stage: Stage::Calibrate,
            lr: self.config.calibration_lr,
            loss: LossParts { total: last, ..LossParts::default() },
            val_rot_median: None,
            val_trans_median: None,
        })
    }

    /// Median reconstruction errors (degrees, metres) on held-out poses.
    pub fn validate_aim(&self) -> Result<(f64, f64), HypoError> {
        aim_reconstruction_medians(&self.params, self.config.seed, self.config.validation_poses)
    }

    /// Median Soft-fusion errors on the held-out scenes with predicted
    /// correspondences at each scene's initial pose.
    pub fn validate_refiner(&self) -> Result<(f64, f64), HypoError> {
        let matcher = PlaneMatcher { bin_score: self.params.bin_score, ..self.config.matcher };
        let opts = ForwardOptions { warp: self.config.warp };
        let errors: Vec<(f64, f64)> = self
            .validation
            .par_iter()
            .map(|scene| {
                let (corrs, _) = predicted_correspondences(scene, &matcher, &scene.init, self.params.arch.max_correspondences)?;
                let pose = if corrs.is_empty() {
                    scene.init
                } else {
                    self.params.refine(&scene.init, &corrs, Fusion::Soft, opts)?.0
                };
                Ok((rotation_geodesic_deg(pose.rotation, scene.pose.rotation), (pose.translation - scene.pose.translation).norm()))
            })
            .collect::<Result<_, HypoError>>()?;
        let (r, t): (Vec<f64>, Vec<f64>) = errors.into_iter().unzip();
        Ok((lower_median(&r), lower_median(&t)))
    }
}

/// Encode→decode errors on `count` poses from the validation stream.
pub fn aim_reconstruction_errors(params: &NopeSacParams, seed: u64, count: usize) -> Result<Vec<(f64, f64)>, HypoError> {
    let mut rng = stream(seed, domain::VALIDATION, 0);
    let poses: Vec<Pose> = (0..count).map(|_| sample_pose(&mut rng, PoseRange::AIM)).collect();
    poses
        .iter()
        .map(|p| {
            let q = params.decode_pose(&params.aim_encode(p)?)?;
            Ok((rotation_geodesic_deg(q.rotation, p.rotation), (q.translation - p.translation).norm()))
        })
        .collect()
}

pub fn aim_reconstruction_medians(params: &NopeSacParams, seed: u64, count: usize) -> Result<(f64, f64), HypoError> {
    let errors = aim_reconstruction_errors(params, seed, count)?;
    let (r, t): (Vec<f64>, Vec<f64>) = errors.into_iter().unzip();
    Ok((lower_median(&r), lower_median(&t)))
}
