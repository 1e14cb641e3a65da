use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use rlhb_core::diffcore::Tape;
use rlhb_core::models::{BackboneConfig, DiscriminatorModel, PolicyModel};
use rlhb_core::rl::{disc_loss_conditional, gae, TokenTriplet};
use rlhb_core::rng::SeedTree;

const VOCAB: usize = 30;

fn policy() -> PolicyModel {
    PolicyModel::new(&BackboneConfig::default(), VOCAB, &mut SeedTree::new(0).stream("init")).unwrap()
}

fn query() -> (Vec<u32>, Vec<u32>, Vec<u32>) {
    (vec![4, 5, 6, 7], vec![20, 21, 22, 23, 24, 25, 26, 27], vec![5, 6, 7, 2])
}

fn bench_policy(c: &mut Criterion) {
    let p = policy();
    let (q, b, a) = query();
    c.bench_function("policy forward+backward", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let f = p.forward(&mut tape, &p.params, &q, &b, &a).unwrap();
            let s = tape.sum(f.action_logprobs);
            black_box(tape.gradients(s).unwrap());
        })
    });
    let mut rng = SeedTree::new(1).stream("sampling");
    c.bench_function("policy sample (6 tokens)", |bench| bench.iter(|| black_box(p.sample(&q, &b, 6, 1.0, &mut rng).unwrap())));
}

fn bench_disc(c: &mut Criterion) {
    let d = DiscriminatorModel::new(&BackboneConfig::default(), VOCAB, &mut SeedTree::new(2).stream("init")).unwrap();
    let (q, b, a) = query();
    let t = TokenTriplet { query: q, behavior: b, response: a[..3].to_vec() };
    let real = vec![t.clone(); 16];
    let fake = vec![t; 16];
    c.bench_function("discriminator loss 16+16 with gradients", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (l, _) = disc_loss_conditional(&mut tape, &d, &d.params, &real, &fake, false).unwrap();
            black_box(tape.gradients(l).unwrap());
        })
    });
}

fn bench_gae(c: &mut Criterion) {
    let rewards: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let values: Vec<f64> = (0..20).map(|i| (i as f64 * 0.11).cos()).collect();
    c.bench_function("gae T=20", |bench| bench.iter(|| black_box(gae(&rewards, &values, 1.0, 0.95).unwrap())));
}

criterion_group!(benches, bench_policy, bench_disc, bench_gae);
criterion_main!(benches);
