use criterion::{black_box, criterion_group, criterion_main, Criterion};

use shapegrasp::cem::{cem_optimize, gaussian_bump, CemConfig};
use shapegrasp::geometry::Vec3;
use shapegrasp::grasp::{critic_input, grasp_oracle, CriticConfig, CriticModel, GraspSample, GraspWorld, GripperModel, InputMode};
use shapegrasp::scenesim::{generate_episode, render, EpisodeConfig, CROP_CHANNELS};
use shapegrasp::seeds::rng_for;
use shapegrasp::shapepred::{ShapeInput, ShapeNetConfig, ShapeNetModel, COND_FEATURES};

fn scene_benches(c: &mut Criterion) {
    let ep = generate_episode(7, &EpisodeConfig::default()).unwrap();
    let snap = &ep.snapshots[2];
    c.bench_function("render_view", |b| {
        b.iter(|| render(black_box(&ep.scene), 2, &snap.pose, &snap.intrinsics).unwrap())
    });
    c.bench_function("generate_episode", |b| {
        b.iter(|| generate_episode(black_box(11), &EpisodeConfig::default()).unwrap())
    });

    let world = GraspWorld::from_episode(&ep).unwrap();
    let target = world.scene.instance_ids()[0];
    let obj = world.scene.object(target).unwrap();
    let p = obj.pose.translation();
    let s = GraspSample::new([p.x, p.y, p.z], 0.3).unwrap();
    let g = GripperModel::default();
    c.bench_function("grasp_oracle", |b| b.iter(|| grasp_oracle(&world, target, black_box(&s), &g).unwrap()));
}

fn model_benches(c: &mut Criterion) {
    let cfg = ShapeNetConfig::default();
    let model = ShapeNetModel::new(cfg.clone(), 0).unwrap();
    let input = ShapeInput {
        height: cfg.in_height,
        width: cfg.in_width,
        image: vec![0.1; CROP_CHANNELS * cfg.in_height * cfg.in_width],
        cond: [0.0; COND_FEATURES],
    };
    c.bench_function("shape_forward", |b| b.iter(|| model.predict_points(black_box(&input)).unwrap()));

    let critic = CriticModel::new(CriticConfig::default(), InputMode::FullCloud, 0).unwrap();
    let mut rng = rng_for(1, 2);
    let cloud: Vec<Vec3> = (0..300)
        .map(|i| {
            let t = i as f64 * 0.1;
            Vec3::new(0.6 + 0.03 * t.cos(), 0.03 * t.sin(), 0.4 + 0.0002 * i as f64)
        })
        .collect();
    let s = GraspSample::new([0.6, 0.0, 0.42], 0.0).unwrap();
    let batch: Vec<Vec<Vec3>> = (0..100)
        .map(|_| critic_input(&cloud, &s, critic.config.points, &mut rng).unwrap())
        .collect();
    c.bench_function("critic_predict_100", |b| b.iter(|| critic.predict(black_box(&batch)).unwrap()));
}

fn cem_benches(c: &mut Criterion) {
    let cfg = CemConfig::default();
    let init = GraspSample::new([0.0, 0.0, 0.0], 0.0).unwrap();
    let mut seed = 0u64;
    c.bench_function("cem_gaussian_bump", |b| {
        b.iter(|| {
            seed += 1;
            let mut rng = rng_for(seed, 0);
            cem_optimize(gaussian_bump([0.03, -0.02, 0.01], 0.04), &init, &cfg, &[], &mut rng).unwrap()
        })
    });
}

criterion_group!(benches, scene_benches, model_benches, cem_benches);
criterion_main!(benches);
