use apa_bench::{batch, model, task};
use apa_core::losses::{LossKind, LossSettings};
use apa_core::model::Mode;
use apa_core::ops::cross_entropy_rows;
use apa_core::perturb::{
    approx_perturbation_rows, oracle_perturbation, topk_perturbation_rows, AscentConfig, PerturbParams, ProbeKey,
};
use apa_core::train::{run_adapt_stage, AdaptConfig};
use apa_core::{ActivationRecord, Graph, Tensor, Variant};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let (source, _) = task(200);
    let m = model(&source);
    let (x, y) = batch(&source, 16);
    c.bench_function("forward_backward_batch16", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let vars = m.bind(&mut g);
            let xv = g.constant(x.clone());
            let f = m.forward(&mut g, &vars, xv, Mode::Train).unwrap();
            let rows = cross_entropy_rows(&mut g, f.logits, &y, m.temperature()).unwrap();
            let loss = g.mean(rows).unwrap();
            g.backward(loss).unwrap();
            black_box(g.value(loss).item())
        })
    });
}

fn perturbations(c: &mut Criterion) {
    let (_, target) = task(200);
    let m = model(&target);
    let (x, _) = batch(&target, 16);
    let z: Tensor = m.activations(&x).unwrap();
    let keys: Vec<ProbeKey> = (0..16).map(|index| ProbeKey { step: 0, index }).collect();
    for variant in [Variant::Normalized, Variant::Unnormalized] {
        let params = PerturbParams::defaults_for(variant, 0);
        c.bench_function(&format!("one_step_{variant:?}_batch16"), |b| {
            b.iter(|| black_box(approx_perturbation_rows(&z, &m.classifier, &params, variant, &keys).unwrap()))
        });
    }
    let params = PerturbParams::defaults_for(Variant::Normalized, 0);
    c.bench_function("topk4_normalized_batch16", |b| {
        b.iter(|| black_box(topk_perturbation_rows(&z, &m.classifier, params.epsilon, 4, Variant::Normalized, 50, 0.05).unwrap()))
    });
    let rec = ActivationRecord::from_activation(Tensor::vector(z.row(0).to_vec())).unwrap();
    c.bench_function("oracle_normalized_single", |b| {
        b.iter(|| {
            black_box(
                oracle_perturbation(&rec, &m.classifier, 1.0, Variant::Normalized, &AscentConfig::default(), 0).unwrap(),
            )
        })
    });
}

fn adaptation(c: &mut Criterion) {
    let (source, target) = task(400);
    let m = model(&source);
    let mut cfg = AdaptConfig::new(LossSettings::new(LossKind::ApaN, 0), 0);
    cfg.adapt_steps = 100;
    let mut group = c.benchmark_group("adaptation");
    group.sample_size(10);
    group.bench_function("apa_n_100_steps", |b| {
        b.iter(|| black_box(run_adapt_stage(&cfg, &m, Some(&source), &target, None).unwrap().records.len()))
    });
    group.finish();
}

criterion_group!(benches, forward_backward, perturbations, adaptation);
criterion_main!(benches);
