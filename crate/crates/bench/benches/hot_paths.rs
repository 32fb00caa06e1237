use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use graphflow::autodiff::{matrix_power_trace, Tensor};
use graphflow::graph::post_process_threshold;
use graphflow::normalizers::quadrature;
use graphflow_bench::{batch, model, random_dag};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn bench_log_density(c: &mut Criterion) {
    let mut group = c.benchmark_group("log_density_batch");
    for (name, monotonic) in [("affine", false), ("monotonic", true)] {
        let m = model(8, monotonic, 0);
        let x = batch(8, 128, 1);
        group.bench_function(BenchmarkId::new(name, "d8_n128"), |b| {
            b.iter(|| m.log_density_batch(&x).unwrap().logp)
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let m = model(8, false, 0);
    let mut rng = StdRng::seed_from_u64(2);
    let zs: Vec<Vec<f64>> =
        (0..16).map(|_| (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    c.bench_function("sample_affine_d8", |b| {
        b.iter(|| {
            for z in &zs {
                m.sample(z).unwrap();
            }
        })
    });
}

fn bench_acyclicity(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(3);
    let d = 16;
    let a = Tensor::matrix(d, d, (0..d * d).map(|_| rng.gen_range(0.0..1.0)).collect());
    c.bench_function("matrix_power_trace_d16", |b| {
        b.iter(|| matrix_power_trace(&a, 1.0 / d as f64, d).unwrap().0)
    });
    let raw = Tensor::matrix(d, d, (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    c.bench_function("post_process_threshold_d16", |b| {
        b.iter(|| post_process_threshold(&raw).edge_count())
    });
    let dag = random_dag(12, 4);
    c.bench_function("topological_order_d12", |b| {
        b.iter(|| graphflow::graph::topological_order(&dag.adjacency).unwrap())
    });
}

fn bench_quadrature(c: &mut Criterion) {
    c.bench_function("clenshaw_curtis_50pts", |b| {
        b.iter(|| quadrature(|t| (t * t).exp().recip(), 0.0, 2.0, 50).unwrap())
    });
}

criterion_group!(benches, bench_log_density, bench_sampling, bench_acyclicity, bench_quadrature);
criterion_main!(benches);
