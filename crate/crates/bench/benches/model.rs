use criterion::{black_box, criterion_group, criterion_main, Criterion};
use polartensor::autodiff::Tape;
use polartensor::data::{synthetic_dataset, Teacher};
use polartensor::graph::Molecule;
use polartensor::model::{GraphBatch, Model, ModelConfig};
use polartensor::tensor::{decompose, sample_rotation, Mat3};
use polartensor::train::{batch_gradients, loss};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn molecules(n: usize) -> Vec<Molecule> {
    synthetic_dataset(n, 1, &Teacher::with_environment())
        .into_iter()
        .map(|r| r.molecule)
        .collect()
}

fn bench_model(c: &mut Criterion) {
    let mols = molecules(16);
    let refs: Vec<&Molecule> = mols.iter().collect();
    let model = Model::<f32>::init(ModelConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();

    c.bench_function("graph_batch_16", |b| {
        b.iter(|| GraphBatch::new(black_box(&refs), 5.0, 8).unwrap())
    });
    let batch = GraphBatch::new(&refs, model.config.cutoff, model.config.num_rbf).unwrap();
    c.bench_function("toy_forward_16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            model.forward(&mut tape, &p, black_box(&batch), None).unwrap()
        })
    });
    c.bench_function("toy_forward_backward_16", |b| {
        b.iter(|| batch_gradients(&model, black_box(&refs), 1).unwrap())
    });
}

fn bench_tensor(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = sample_rotation(&mut rng);
    let a = Mat3::new(3.0, 0.2, 0.1, 0.2, 4.0, -0.3, 0.1, -0.3, 5.0);
    let b2 = r.matrix() * a * r.matrix().transpose();
    c.bench_function("decompose", |b| b.iter(|| decompose(black_box(&a)).unwrap()));
    c.bench_function("frobenius_loss", |b| b.iter(|| loss(black_box(&a), black_box(&b2))));
}

criterion_group!(benches, bench_model, bench_tensor);
criterion_main!(benches);
