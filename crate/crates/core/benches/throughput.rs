//! Pipeline throughput benchmarks. Benchmark IDs carry the compiled
//! parallelism mode so the two builds can be compared side by side:
//!
//!   cargo bench -p zrecon-core                         # rayon data-parallel
//!   cargo bench -p zrecon-core --no-default-features   # sequential fallback
//!
//! Reconstruction is expected to scale linearly in pixel count; the two
//! reconstruct sizes give a quick slope check.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use zrecon_core::forward::{build_lookup, standard_model, ForwardModel, LookupGrid, PairParams};
use zrecon_core::groundtruth::ground_truth_map;
use zrecon_core::image::DualEnergyImage;
use zrecon_core::phantom::{apply_noise, cargo_phantom, render_ideal};
use zrecon_core::recon::reconstruct;
use zrecon_core::segment::felzenszwalb_segment;
use zrecon_core::xsec::synthetic_library;

const MODE: &str = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };

fn model() -> ForwardModel {
    standard_model(Arc::new(synthetic_library()), PairParams::unity()).expect("standard model")
}

/// Noisy cargo phantom at the given pitch, with a fixed seed.
fn noisy_cargo(fm: &ForwardModel, pitch: f64) -> DualEnergyImage {
    let scene = cargo_phantom().scene.with_pitch(pitch);
    let (ideal, _) = render_ideal(&scene, fm).expect("render");
    apply_noise(&ideal, 0.1, 9001).expect("noise")
}

fn bench_tables(c: &mut Criterion) {
    let fm = model();
    let mut g = c.benchmark_group("tables");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("build-default-grid", MODE), |b| {
        b.iter(|| build_lookup(&fm, LookupGrid::default()).expect("tables"))
    });
    g.finish();
}

fn bench_render(c: &mut Criterion) {
    let fm = model();
    let scene = cargo_phantom().scene;
    let (w, h) = scene.grid_dims().expect("grid");
    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    g.throughput(Throughput::Elements((w * h) as u64));
    g.bench_function(BenchmarkId::new("cargo-80k", MODE), |b| {
        b.iter(|| render_ideal(&scene, &fm).expect("render"))
    });
    g.finish();
}

fn bench_segment(c: &mut Criterion) {
    let fm = model();
    let img = noisy_cargo(&fm, 0.5);
    let mut g = c.benchmark_group("segment");
    g.sample_size(10);
    g.throughput(Throughput::Elements(img.len() as u64));
    g.bench_function(BenchmarkId::new("cargo-80k", MODE), |b| {
        b.iter(|| felzenszwalb_segment(&img, &Default::default()).expect("segment"))
    });
    g.finish();
}

fn bench_reconstruct(c: &mut Criterion) {
    let fm = model();
    let lut = build_lookup(&fm, LookupGrid::default()).expect("tables");
    let mut g = c.benchmark_group("reconstruct");
    g.sample_size(10);
    for (label, pitch) in [("cargo-20k", 1.0), ("cargo-80k", 0.5)] {
        let img = noisy_cargo(&fm, pitch);
        let labels = felzenszwalb_segment(&img, &Default::default()).expect("segment");
        g.throughput(Throughput::Elements(img.len() as u64));
        g.bench_function(BenchmarkId::new(label, MODE), |b| {
            b.iter(|| reconstruct(&img, &lut, &labels).expect("reconstruct"))
        });
    }
    g.finish();
}

fn bench_ground_truth(c: &mut Criterion) {
    let fm = model();
    let scene = cargo_phantom().scene.with_pitch(1.0);
    let mut g = c.benchmark_group("ground-truth");
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("cargo-20k", MODE), |b| {
        b.iter(|| ground_truth_map(&scene, &fm).expect("ground truth"))
    });
    g.finish();
}

criterion_group!(
    benches,
    bench_tables,
    bench_render,
    bench_segment,
    bench_reconstruct,
    bench_ground_truth
);
criterion_main!(benches);
