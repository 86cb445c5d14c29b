//! Central finite-difference checks of every hand-written backward pass.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{warp_plane, Plane, PlanePair, Pose, Vec3};
use crate::hypo::{aim_loss, refinement_loss, Architecture, ForwardOptions, NopeSacParams};
use crate::matcher::{matching_loss, sinkhorn_backward, sinkhorn_with_trace, MatchSupervision, DEFAULT_SINKHORN_ITERS};
use crate::rng::{domain, stream};
use crate::synth::{perturb_pose, sample_pose, PoseRange};

/// Gradients smaller than this are compared in absolute terms.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Relative disagreement between the two central differences above which a
/// coordinate is treated as sitting on a kink.
const KINK_TOLERANCE: f64 = 1e-5;

const MLP_NAMES: [&str; 11] =
    ["rot_enc", "trans_enc", "linear_rot", "linear_trans", "g", "e_r", "e_t", "d_r", "d_t", "score_r", "score_t"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Suite whose analytic gradient is scaled by 1.01 before comparison.
    /// Exists so tests can confirm the checker notices a broken backward.
    pub corrupt: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 10, step: 1e-5, tolerance: 1e-4, corrupt: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree, i.e. a ReLU or
    /// sorting kink lies within one step.
    pub kinks: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub suites: Vec<SuiteResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Relative error with gradients below [`GRADIENT_FLOOR`] compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

#[derive(Default)]
struct Tally {
    instances: usize,
    checked: usize,
    kinks: usize,
    max_rel_error: f64,
}

impl Tally {
    /// Compares one coordinate given the loss at `x ± h` and `x ± h/2`.
    /// Central differences at the two steps agree to O(h²) on smooth
    /// stretches; disagreement means a ReLU or sorting kink lies in between.
    fn compare(&mut self, analytic: f64, probes: [f64; 4], h: f64) {
        let [lo, hi, lo2, hi2] = probes;
        let (wide, narrow) = ((hi - lo) / (2.0 * h), (hi2 - lo2) / h);
        if relative_error(wide, narrow) > KINK_TOLERANCE {
            self.kinks += 1;
            return;
        }
        self.checked += 1;
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, narrow));
    }

    fn finish(self, name: String, tolerance: f64) -> SuiteResult {
        // a suite where most coordinates sit on kinks has not been checked
        let passed = self.max_rel_error < tolerance && self.checked > 4 * self.kinks;
        SuiteResult { name, instances: self.instances, checked: self.checked, kinks: self.kinks, max_rel_error: self.max_rel_error, passed }
    }
}

fn corruption(opts: &GradcheckOptions, suite: &str) -> f64 {
    if opts.corrupt.as_deref() == Some(suite) {
        1.01
    } else {
        1.0
    }
}

/// Checks every coordinate of the selected networks against `loss`.
fn check_networks(
    params: &NopeSacParams,
    grads: &NopeSacParams,
    nets: &[usize],
    prefix: &str,
    opts: &GradcheckOptions,
    tallies: &mut [Tally],
    loss: &dyn Fn(&NopeSacParams) -> f64,
) {
    let h = opts.step;
    let mut probe = params.clone();
    for (slot, &net) in nets.iter().enumerate() {
        let scale = corruption(opts, &format!("{prefix}/{}", MLP_NAMES[net]));
        let analytic: Vec<Vec<f64>> = grads.mlps()[net].params().iter().map(|b| b.to_vec()).collect();
        tallies[slot].instances += 1;
        for (b, buffer) in analytic.iter().enumerate() {
            for (e, &a) in buffer.iter().enumerate() {
                let orig = probe.mlps()[net].params()[b][e];
                let mut at = |dx: f64| {
                    probe.mlps_mut()[net].params_mut()[b][e] = orig + dx;
                    loss(&probe)
                };
                let probes = [at(-h), at(h), at(-h / 2.0), at(h / 2.0)];
                probe.mlps_mut()[net].params_mut()[b][e] = orig;
                tallies[slot].compare(a * scale, probes, h);
            }
        }
    }
}

fn random_pairs(rng: &mut impl Rng, m: usize, gt: &Pose) -> Vec<PlanePair> {
    (0..m)
        .map(|_| {
            let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.5));
            let first = Plane::new(n, rng.random_range(1.0..4.0));
            let second = warp_plane(&first, gt);
            let noisy = Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
            PlanePair::new(first, Plane::new(second.normal + noisy, second.offset + rng.random_range(-0.1..0.1)))
        })
        .collect()
}

fn refinement_suite(opts: &GradcheckOptions, out: &mut Vec<SuiteResult>) {
    let nets: Vec<usize> = (0..MLP_NAMES.len()).collect();
    let mut tallies: Vec<Tally> = nets.iter().map(|_| Tally::default()).collect();
    for k in 0..opts.instances {
        let mut rng = stream(opts.seed, domain::GRADCHECK, k as u64);
        let params = NopeSacParams::init(Architecture::tiny(), &mut rng).expect("tiny architecture is valid");
        let gt = sample_pose(&mut rng, PoseRange::SCENE);
        let init = perturb_pose(&gt, 10.0, 0.3, &mut rng);
        let m = rng.random_range(2..=4);
        let corrs = random_pairs(&mut rng, m, &gt);
        let opts_f = ForwardOptions::default();
        let mut grads = params.zeros_like();
        refinement_loss(&params, &init, &corrs, &gt, opts_f, 1.0, Some(&mut grads)).expect("toy instance is valid");
        let loss = |p: &NopeSacParams| refinement_loss(p, &init, &corrs, &gt, opts_f, 1.0, None).map(|l| l.total).unwrap_or(f64::NAN);
        check_networks(&params, &grads, &nets, "refine", opts, &mut tallies, &loss);
    }
    for (net, t) in nets.iter().zip(tallies) {
        out.push(t.finish(format!("refine/{}", MLP_NAMES[*net]), opts.tolerance));
    }
}

fn aim_suite(opts: &GradcheckOptions, out: &mut Vec<SuiteResult>) {
    let nets = [0, 1, 2, 3];
    let mut tallies: Vec<Tally> = nets.iter().map(|_| Tally::default()).collect();
    for k in 0..opts.instances {
        let mut rng = stream(opts.seed, domain::GRADCHECK, 1_000 + k as u64);
        let params = NopeSacParams::init(Architecture::tiny(), &mut rng).expect("tiny architecture is valid");
        let poses: Vec<Pose> = (0..3).map(|_| sample_pose(&mut rng, PoseRange::AIM)).collect();
        let mut grads = params.zeros_like();
        aim_loss(&params, &poses, Some(&mut grads)).expect("valid batch");
        let loss = |p: &NopeSacParams| aim_loss(p, &poses, None).unwrap_or(f64::NAN);
        check_networks(&params, &grads, &nets, "aim", opts, &mut tallies, &loss);
    }
    for (net, t) in nets.iter().zip(tallies) {
        out.push(t.finish(format!("aim/{}", MLP_NAMES[*net]), opts.tolerance));
    }
}

fn sinkhorn_suite(opts: &GradcheckOptions, out: &mut Vec<SuiteResult>) {
    let mut tally = Tally::default();
    let scale = corruption(opts, "sinkhorn");
    let h = opts.step;
    for k in 0..opts.instances {
        let mut rng = stream(opts.seed, domain::GRADCHECK, 2_000 + k as u64);
        let (k1, k2) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let scores = DMatrix::from_fn(k1, k2, |_, _| rng.random_range(-2.0..1.0));
        let bin = rng.random_range(-1.0..1.0);
        let mut cols: Vec<usize> = (0..k2).collect();
        cols.sort_by_key(|_| rng.random::<u32>());
        let matches = (0..k1.min(k2)).filter(|_| rng.random_bool(0.7)).map(|i| (i, cols[i])).collect();
        let sup = MatchSupervision::from_matches(matches, k1, k2);
        let loss = |s: &DMatrix<f64>, b: f64| {
            let (a, _) = sinkhorn_with_trace(s, b, DEFAULT_SINKHORN_ITERS);
            matching_loss(&a, &sup).map(|l| l.0).unwrap_or(f64::NAN)
        };
        let (a, trace) = sinkhorn_with_trace(&scores, bin, DEFAULT_SINKHORN_ITERS);
        let (_, grad_log) = matching_loss(&a, &sup).expect("supervision indices are in range");
        let (g_scores, g_bin) = sinkhorn_backward(&trace, &grad_log);
        tally.instances += 1;
        let mut probe = scores.clone();
        for i in 0..k1 {
            for j in 0..k2 {
                let mut at = |dx: f64| {
                    probe[(i, j)] = scores[(i, j)] + dx;
                    loss(&probe, bin)
                };
                let probes = [at(-h), at(h), at(-h / 2.0), at(h / 2.0)];
                probe[(i, j)] = scores[(i, j)];
                tally.compare(g_scores[(i, j)] * scale, probes, h);
            }
        }
        let probes = [-h, h, -h / 2.0, h / 2.0].map(|dx| loss(&scores, bin + dx));
        tally.compare(g_bin * scale, probes, h);
    }
    out.push(tally.finish("sinkhorn".to_string(), opts.tolerance));
}

/// Runs every suite on `opts.instances` random instances each.
pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let start = Instant::now();
    let mut suites = Vec::new();
    refinement_suite(opts, &mut suites);
    aim_suite(opts, &mut suites);
    sinkhorn_suite(opts, &mut suites);
    GradcheckReport { suites, seconds: start.elapsed().as_secs_f64() }
}

/// Suite names accepted by [`GradcheckOptions::corrupt`].
pub fn suite_names() -> Vec<String> {
    let mut names: Vec<String> = MLP_NAMES.iter().map(|n| format!("refine/{n}")).collect();
    names.extend(MLP_NAMES[..4].iter().map(|n| format!("aim/{n}")));
    names.push("sinkhorn".to_string());
    names
}
