use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hwau_core::init::ParamInit;
use hwau_core::network::{HwaUnetr, ModelConfig};
use hwau_core::ssm::{selective_scan, SsmParams};
use hwau_core::{ConvSpec, ParamStore, Tape, Tensor};

fn wave(shape: Vec<usize>) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as f32 + 1.0) * 0.37).sin())
}

fn conv3d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    for (name, spec, cin, cout) in [
        ("k3 dense", ConvSpec::new([3; 3], [1; 3], [1; 3], 1), 8, 8),
        ("k3 depthwise", ConvSpec::new([3; 3], [1; 3], [1; 3], 16), 16, 16),
        ("k1 pointwise", ConvSpec::pointwise(), 16, 32),
    ] {
        let x = wave(vec![2, cin, 32, 32, 16]);
        let w = wave(vec![cout, cin / spec.groups, spec.kernel[0], spec.kernel[1], spec.kernel[2]]);
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let wv = tape.variable(w.clone());
                let y = tape.conv3d(xv, wv, None, spec).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("selective_scan");
    for len in [512, 4096] {
        let mut init = ParamInit::new(0);
        let p = SsmParams::new(&mut init, "ssm", 16, 8).unwrap();
        let store: ParamStore<f32> = init.finish().cast();
        let x = wave(vec![2, len, 16]);
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bind = tape.bind(&store);
                let xv = tape.constant(x.clone());
                let y = selective_scan(&mut tape, xv, &p, &bind).unwrap();
                let s = tape.sum(y).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let (model, store) = HwaUnetr::new(ModelConfig::default(), 0).unwrap();
    let store: ParamStore<f32> = store.cast();
    let x = wave(vec![1, 2, 32, 32, 16]);
    group.bench_function("forward 32x32x16", |b| b.iter(|| model.predict(&store, &x).unwrap()));
    group.finish();
}

criterion_group!(benches, conv3d, scan, forward);
criterion_main!(benches);
