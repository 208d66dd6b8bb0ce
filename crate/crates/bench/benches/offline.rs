use criterion::{criterion_group, criterion_main, Criterion};
use nalgebra::{DMatrix, DVector};
use smpc_bench::{config, REGION};
use smpc_core::design::{design, tighten, Scheme};
use smpc_core::Polytope;

fn octagon(radius: f64) -> Polytope {
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_4 * i as f64;
            vec![a.cos(), a.sin()]
        })
        .collect();
    Polytope::from_rows(&rows, &[radius; 8], 2).unwrap()
}

fn set_ops(c: &mut Criterion) {
    let p = octagon(1.0);
    let q = octagon(0.1);
    let map = DMatrix::from_row_slice(2, 2, &[1.0, 0.0075, -0.143, 0.996]);
    let shift = DVector::zeros(2);
    let mut group = c.benchmark_group("polytope");
    group.bench_function("minkowski_sum", |b| b.iter(|| p.minkowski_sum(&q).unwrap()));
    group.bench_function("pontryagin_diff", |b| b.iter(|| p.pontryagin_diff(&q).unwrap()));
    group.bench_function("affine_preimage_reduce", |b| b.iter(|| p.affine_preimage(&map, &shift).unwrap().reduce()));
    group.bench_function("vertices", |b| b.iter(|| p.vertices().unwrap()));
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let cfg = config(REGION);
    let model = cfg.disturbance_model().unwrap();
    let mut group = c.benchmark_group("design");
    group.sample_size(10);
    group.bench_function("sampled_tightening", |b| b.iter(|| tighten(&cfg, &model).unwrap()));
    for (name, scheme) in [("proposed", Scheme::Proposed), ("robust", Scheme::Robust)] {
        let cfg = cfg.with_scheme(scheme, None);
        group.bench_function(name, |b| b.iter(|| design(&cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, set_ops, pipeline);
criterion_main!(benches);
