use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use shadefuse_bench::{frames, Stage, TRUNCATION, VOXEL};
use shadefuse_core::lighting::{estimate_lighting, SubvolumeLattice};
use shadefuse_core::mesh::marching_cubes;
use shadefuse_core::refine::{build_problem, Layout, StageInput, Weights};
use shadefuse_core::sdf::SparseSdf;
use shadefuse_core::solver::{LmState, SolveOptions};

fn fusion(c: &mut Criterion) {
    let (frames, intr) = frames();
    c.bench_function("fuse 10 frames", |b| {
        b.iter(|| SparseSdf::fuse(black_box(&frames), &intr, VOXEL, TRUNCATION).unwrap())
    });
}

fn extraction(c: &mut Criterion) {
    let stage = Stage::new();
    c.bench_function("marching cubes", |b| b.iter(|| marching_cubes(black_box(&stage.sdf))));
}

fn lighting(c: &mut Criterion) {
    let stage = Stage::new();
    let template = SubvolumeLattice::covering_sdf(&stage.sdf, 0.1).unwrap();
    c.bench_function("estimate lighting", |b| {
        b.iter(|| estimate_lighting(&stage.sdf, black_box(&stage.shell), &template, 0.01).unwrap())
    });
}

fn refinement(c: &mut Criterion) {
    let stage = Stage::new();
    let views = stage.views();
    let sv = stage.stage_views(&views);
    let layout = Layout::new(stage.pyramids.len(), stage.shell.clone(), true);
    let input = StageInput {
        sdf: &stage.sdf,
        layout: &layout,
        views: &sv,
        best_views: &stage.best,
        lattice: &stage.lattice,
        intrinsics: stage.intrinsics,
        image_level: 0,
        weights: Weights::default(),
        optimize_poses: true,
        optimize_intrinsics: true,
    };
    c.bench_function("build stage problem", |b| b.iter(|| build_problem(black_box(&input)).unwrap()));

    let sp = build_problem(&input).unwrap();
    let options = SolveOptions::default();
    let mut group = c.benchmark_group("solver");
    group.sample_size(10);
    group.bench_function("one LM iteration", |b| {
        b.iter(|| {
            let mut state = LmState::new(sp.x0.clone(), &options);
            state.iterate(&sp.problem, &options).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, fusion, extraction, lighting, refinement);
criterion_main!(benches);
