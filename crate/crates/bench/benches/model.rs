use criterion::{criterion_group, criterion_main, Criterion};
use irrcnn_bench::{model, random_tensor};
use irrcnn_core::arch::{ArchSpec, ForwardCtx, Variant};
use irrcnn_core::autograd::Tape;
use irrcnn_core::layers::Mode;
use irrcnn_core::Tensor;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("cifar_reduced_batch32");
    for variant in [Variant::Irrcnn, Variant::Eirn] {
        let net = model::<f32>(&ArchSpec::cifar_reduced(variant, 10), 7);
        let x: Tensor<f32> = random_tensor((32, 3, 32, 32), 8);
        let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
        group.bench_function(format!("{variant}/infer"), |b| {
            b.iter(|| net.logits(black_box(&x), Mode::Infer).unwrap())
        });
        group.bench_function(format!("{variant}/train_step"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let input = tape.input(x.clone());
                let mut ctx = ForwardCtx::new(Mode::Train, 9);
                let logits = net.forward(&mut tape, input, &mut ctx).unwrap();
                let probs = tape.softmax(logits);
                let loss = tape.cross_entropy(probs, &labels, 0.0).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward
}
criterion_main!(benches);
