use criterion::{black_box, criterion_group, criterion_main, Criterion};
use textsal_bench::random_mask;
use textsal_core::attention::EcmsaConfig;
use textsal_core::metrics::{max_e_m, max_f_beta, s_measure};
use textsal_core::nets::{build, parse_attachment, NetConfig};
use textsal_core::text::{encode_toy, tokenize};
use textsal_core::{Rng, Tensor};

fn bench_net_forward(c: &mut Criterion) {
    let cfg = NetConfig {
        base_channels: 8,
        d_text: 16,
        ..NetConfig::default()
    };
    let net = build(
        &cfg,
        &parse_attachment("in:1-3").unwrap(),
        &EcmsaConfig::default(),
        1,
    )
    .unwrap();
    let mut rng = Rng::new(2);
    let image = Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
    let f2 = encode_toy(&tokenize("the red object"), 16).unwrap();
    c.bench_function("unet_in1_3_forward_64", |bench| {
        bench.iter(|| black_box(net.forward(&image, Some(&f2)).unwrap()))
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let pred = Tensor::uniform(&[64, 64], 0.0, 1.0, &mut rng);
    let gt = random_mask(&[64, 64], 4);
    c.bench_function("max_f_beta_64x64", |bench| {
        bench.iter(|| black_box(max_f_beta(&pred, &gt, 0.3, 256).unwrap()))
    });
    c.bench_function("max_e_m_64x64", |bench| {
        bench.iter(|| black_box(max_e_m(&pred, &gt, 256).unwrap()))
    });
    c.bench_function("s_measure_64x64", |bench| {
        bench.iter(|| black_box(s_measure(&pred, &gt).unwrap()))
    });
}

criterion_group!(benches, bench_net_forward, bench_metrics);
criterion_main!(benches);
