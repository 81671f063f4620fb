use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use diffirm::config::Method;
use diffirm::diffusion::{augment, init_denoiser, DenoiserSpec, NoiseSchedule};
use diffirm::graph::{gcn_layer, normalize_adjacency};
use diffirm::trainer::Trainer;
use diffirm::{Activation, Graph, Tape};
use diffirm_bench::{graph_fixture, random};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_backward");
    for n in [16, 64, 128] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (av, bv) = (tape.param(a.clone()), tape.param(b.clone()));
                let p = tape.matmul(av, bv).unwrap();
                let s = tape.sum(p).unwrap();
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn gcn(c: &mut Criterion) {
    let a_hat = normalize_adjacency(&Graph::ring(32).unwrap());
    let h = random(&[16 * 32, 24], 3);
    let w = random(&[24, 32], 4);
    c.bench_function("gcn_layer_backward_16x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (hv, wv) = (tape.constant(h.clone()), tape.param(w.clone()));
            let av = tape.constant(a_hat.clone());
            let z = gcn_layer(&mut tape, hv, av, wv, Activation::Relu).unwrap();
            let s = tape.sum(z).unwrap();
            tape.backward(s).unwrap()
        })
    });
}

fn denoise_chain(c: &mut Criterion) {
    let a_hat = normalize_adjacency(&Graph::ring(8).unwrap());
    let x = random(&[16 * 8, 16], 5);
    let spec = DenoiserSpec::new(16);
    let params = init_denoiser(&spec, 6).unwrap();
    let sched = NoiseSchedule::linear(1e-4, 0.1, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    c.bench_function("reverse_chain_25_steps", |bench| {
        bench.iter(|| augment(&spec, &params, &x, &a_hat, &sched, 25, 1, &mut rng).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("training_step");
    g.sample_size(10);
    for m in [Method::Erm, Method::Diffirm] {
        let (data, cfg) = graph_fixture(m);
        let mut t = Trainer::new(cfg, &data).unwrap();
        g.bench_function(m.name(), |bench| bench.iter(|| t.step().unwrap()));
    }
    g.finish();
}

criterion_group!(benches, matmul, gcn, denoise_chain, training_step);
criterion_main!(benches);
