//! Hot kernels, benchmarked under whichever execution mode the crate was
//! built with. Run once with default features and once with
//! `--no-default-features`; the group names carry the mode so criterion
//! keeps both sets of results side by side.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use nbinv_core::attack_eval::{rank1_identification, tar_at_far, AttackKind, ScoreSet};
use nbinv_core::extractor::Template;
use nbinv_core::losses::{LossConfig, Objective};
use nbinv_core::nbnet::{build_network, desk_spec, Arch, ReconstructionModel};
use nbinv_core::nn::{zeros_like, Init, Mode};
use nbinv_core::norta::{uniform_inputs, Marginal, NortaModel};
use nbinv_core::par::is_parallel;
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn nbnet(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("nbnet/{}", mode()));
    g.sample_size(10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for arch in [Arch::Dcnn, Arch::NbnetB] {
        let model: ReconstructionModel<f32> = build_network(&desk_spec(arch, 128), Init::Normal { std: 0.02 }, &mut rng).unwrap();
        let t = Array2::from_shape_simple_fn((64, 128), || rng.gen_range(-0.2f32..0.2));
        let target = Array4::from_shape_simple_fn((64, 3, 32, 32), || rng.gen_range(-1.0f32..1.0));
        let obj = Objective::<f32>::new(LossConfig::pixel(1.0), None).unwrap();
        g.bench_function(BenchmarkId::new("infer_batch64", arch.name()), |b| b.iter(|| model.infer(black_box(t.view())).unwrap()));
        g.bench_function(BenchmarkId::new("train_step_batch64", arch.name()), |b| {
            b.iter(|| {
                let (y, cache) = model.forward(t.view(), Mode::Train).unwrap();
                let (_, gy) = obj.value_and_grad(&target, &y).unwrap();
                let mut grad = zeros_like(&model);
                model.backward(&cache, &gy, Some(&mut grad));
                grad
            })
        });
    }
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("metrics/{}", mode()));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let set = ScoreSet {
        genuine: (0..5_000).map(|_| rng.gen_range(0.0..1.0)).collect(),
        impostor: (0..200_000).map(|_| rng.gen_range(-1.0..0.8)).collect(),
        fold_id: 0,
        attack_kind: AttackKind::Type1,
    };
    g.bench_function("tar_at_far_200k", |b| b.iter(|| tar_at_far(black_box(&set), &[0.001, 0.01]).unwrap()));
    let tpl = |rng: &mut ChaCha8Rng, s: usize| Template {
        vector: (0..128).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        subject_id: format!("s{s}"),
        sample_id: "0".into(),
        extractor_id: "bench".into(),
    };
    let gallery: Vec<Template> = (0..1_000).map(|s| tpl(&mut rng, s)).collect();
    let probes: Vec<Template> = (0..1_000).map(|s| tpl(&mut rng, s)).collect();
    g.bench_function("rank1_1000x1000", |b| b.iter(|| rank1_identification(black_box(&gallery), &probes).unwrap()));
    g.finish();
}

fn norta(c: &mut Criterion) {
    let mut g = c.benchmark_group(format!("norta/{}", mode()));
    g.sample_size(10);
    let marginals = vec![
        Marginal::Uniform { lo: 0.0, hi: 1.0 },
        Marginal::Exponential { rate: 1.0 },
        Marginal::Normal { mean: 0.0, sd: 1.0 },
    ];
    let sigma = DMatrix::from_row_slice(3, 3, &[1.0 / 12.0, 0.1, 0.1, 0.1, 1.0, -0.3, 0.1, -0.3, 1.0]);
    g.bench_function("fit_3d", |b| b.iter(|| NortaModel::fit(marginals.clone(), sigma.clone()).unwrap()));
    let model = NortaModel::fit(marginals, sigma).unwrap();
    let z = uniform_inputs(100_000, 3, 3);
    g.bench_function("sample_100k", |b| b.iter(|| model.sample(black_box(&z)).unwrap()));
    g.finish();
}

criterion_group!(benches, nbnet, metrics, norta);
criterion_main!(benches);
