//! Parallel against sequential dispatch on the main hot paths.

use std::hint::black_box;

use cellthresh::features::{self, Sample};
use cellthresh::ingest::CellDay;
use cellthresh::itransformer::{ITransformer, ITransformerConfig};
use cellthresh::nn::{Graph, Tensor};
use cellthresh::par;
use cellthresh::pctn::{PctnConfig, PctnModel, TargetScale};
use cellthresh::synth::{self, SynthConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn cell_days(n_cells: usize) -> Vec<CellDay> {
    let cfg = SynthConfig {
        n_cells,
        n_days: 10,
        ..Default::default()
    };
    synth::generate_cell_days(&cfg).unwrap()
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_256x123x128");
    let a = Tensor::new(vec![256, 123], (0..256 * 123).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b = Tensor::new(vec![123, 128], (0..123 * 128).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let (x, y) = (g.constant(a.clone()), g.constant(b.clone()));
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn bench_data(c: &mut Criterion) {
    let mut group = c.benchmark_group("data");
    group.sample_size(10);
    let days = cell_days(100);
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("synth_100_cells", name), |bench| {
            bench.iter(|| black_box(cell_days(100)))
        });
        group.bench_function(BenchmarkId::new("features_100_cells", name), |bench| {
            bench.iter(|| black_box(features::prepare_samples(&days, 3).unwrap()))
        });
    }
    group.finish();
}

fn bench_models(c: &mut Criterion) {
    let mut group = c.benchmark_group("predict_1024");
    group.sample_size(10);
    let prep = features::prepare_samples(&cell_days(60), 3).unwrap();
    let samples: Vec<Sample> = prep.train.into_iter().take(1024).collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    let pctn = PctnModel::new(PctnConfig::default(), TargetScale::fit(&refs).unwrap()).unwrap();
    let itr_cfg = ITransformerConfig {
        d_model: 32,
        layers: 2,
        n_heads: 4,
        ff_dim: 64,
        ..Default::default()
    };
    let (loc, scale) = ITransformer::fit_target_scale(&refs).unwrap();
    let itr = ITransformer::new(itr_cfg, loc, scale).unwrap();
    for (name, on) in MODES {
        par::set_enabled(on);
        group.bench_function(BenchmarkId::new("pctn", name), |bench| {
            bench.iter(|| black_box(pctn.predict(&samples).unwrap()))
        });
        group.bench_function(BenchmarkId::new("itransformer", name), |bench| {
            bench.iter(|| black_box(itr.predict(&samples).unwrap()))
        });
    }
    par::set_enabled(true);
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_data, bench_models);
criterion_main!(benches);
