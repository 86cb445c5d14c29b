use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use planesac_core::baselines::{decompose_homography, fit_homography, nume_ref, NumeRefOptions};
use planesac_core::eval::{polygon_iou, ApTable};
use planesac_core::geom::{plane_induced_homography, Plane, Vec3};
use planesac_core::hypo::{aim_loss, Architecture, ForwardOptions, Fusion, NopeSacParams};
use planesac_core::matcher::{sinkhorn_dustbin, PlaneMatcher};
use planesac_core::pipeline::{ap_instance, estimate_all, EstimateOptions, Method};
use planesac_core::synth::{generate_dataset, sample_pose, PoseRange, SceneConfig};

fn matching(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores = DMatrix::from_fn(20, 20, |_, _| rng.random_range(-2.0..2.0));
    c.bench_function("sinkhorn 20x20, 100 iterations", |b| b.iter(|| sinkhorn_dustbin(&scores, 1.0, 100)));
}

fn model(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = NopeSacParams::init(Architecture::compact(), &mut rng).unwrap();
    let scene = &generate_dataset(&SceneConfig { seed: 2, scenes: 1, min_planes: 8, max_planes: 8, ..SceneConfig::default() }).unwrap().scenes[0];
    let corrs = scene.gt_pairs();
    c.bench_function("compact refine, 8 correspondences", |b| {
        b.iter(|| params.refine(&scene.init, &corrs, Fusion::Soft, ForwardOptions::default()).unwrap())
    });
    let poses: Vec<_> = (0..16).map(|_| sample_pose(&mut rng, PoseRange::AIM)).collect();
    c.bench_function("compact AIM loss + backward, batch 16", |b| {
        b.iter_batched(|| params.zeros_like(), |mut g| aim_loss(&params, &poses, Some(&mut g)).unwrap(), BatchSize::LargeInput)
    });
}

fn baselines(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = sample_pose(&mut rng, PoseRange::SCENE);
    let plane = Plane::new(Vec3::new(0.1, -0.2, 1.0), 3.0);
    let h = plane_induced_homography(&plane, &pose).unwrap();
    let tracks: Vec<[f64; 4]> = (0..20)
        .map(|_| {
            let x = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
            let y = h * x;
            [x.x, x.y, y.x / y.z, y.y / y.z]
        })
        .collect();
    c.bench_function("homography fit + decompose, 20 points", |b| b.iter(|| decompose_homography(&fit_homography(&tracks).unwrap()).unwrap()));
    let scene = &generate_dataset(&SceneConfig { seed: 3, scenes: 1, ..SceneConfig::default() }).unwrap().scenes[0];
    let corrs = scene.gt_pairs();
    let tracks: Vec<_> = scene.correspondences.iter().map(|&(i, _)| scene.points[scene.views[0][i].plane_id.unwrap()].clone()).collect();
    let opts = NumeRefOptions { use_pix: true, ..NumeRefOptions::default() };
    c.bench_function("nume-ref with pixel terms", |b| b.iter(|| nume_ref(&corrs, &scene.init, &tracks, &opts)));
}

fn evaluation(c: &mut Criterion) {
    let a = vec![[0.0, 0.0], [1.0, 0.0], [1.2, 0.8], [0.1, 1.0]];
    let b = vec![[0.5, 0.2], [1.5, 0.3], [1.4, 1.2], [0.4, 1.1]];
    c.bench_function("polygon iou, quads", |bch| bch.iter(|| polygon_iou(&a, &b).unwrap()));
    let scenes = generate_dataset(&SceneConfig { seed: 4, scenes: 100, offset_noise: 0.1, normal_noise_deg: 5.0, ..SceneConfig::default() }).unwrap().scenes;
    let matcher = PlaneMatcher { bin_score: -3.0, ..PlaneMatcher::default() };
    let est = estimate_all(&scenes, None, &EstimateOptions { method: Method::InitOnly, matcher, ..EstimateOptions::default() }).unwrap();
    let instances: Vec<_> = scenes.iter().zip(&est).map(|(s, e)| ap_instance(s, e)).collect();
    c.bench_function("plane AP table, 100 scenes", |bch| bch.iter(|| ApTable::compute(&instances)));
}

criterion_group!(benches, matching, model, baselines, evaluation);
criterion_main!(benches);
