use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use odlab::harness::step::{scene_step, TeacherView};
use odlab::harness::train::Dataset;
use odlab::harness::TrainConfig;
use odlab::matching::{hungarian, CostMatrix};
use odlab::network::{forward, ModelParams};
use odlab::synthdata::Split;

fn bench_hungarian(c: &mut Criterion) {
    let mut group = c.benchmark_group("hungarian");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (rows, cols) in [(24, 4), (24, 8), (64, 16)] {
        let m = CostMatrix::from_totals(rows, cols, (0..rows * cols).map(|_| rng.gen_range(0.0..10.0)).collect());
        group.bench_with_input(BenchmarkId::from_parameter(format!("{rows}x{cols}")), &m, |b, m| b.iter(|| hungarian(black_box(m))));
    }
    group.finish();
}

fn small_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.num_train = 4;
    cfg.data.num_val = 1;
    cfg
}

fn bench_forward(c: &mut Criterion) {
    let cfg = small_config();
    let data = Dataset::build(&cfg, Split::Train).unwrap();
    let params = ModelParams::init(&cfg.model, 0);
    c.bench_function("forward/default_model", |b| b.iter(|| forward(black_box(&params), black_box(&data.features[0])).unwrap()));
}

fn bench_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("scene_step");
    let data = Dataset::build(&small_config(), Split::Train).unwrap();
    let (scene, f) = (&data.scenes[0], &data.features[0]);
    for (name, md, pd, aux) in [("baseline", false, false, false), ("md", true, false, false), ("md_pd_aux", true, true, true)] {
        let mut cfg = small_config();
        cfg.distill.md = md;
        cfg.distill.pd = pd;
        cfg.distill.aux = aux;
        let student = ModelParams::init(&cfg.model, 1);
        let teacher = ModelParams::init(&cfg.model, 2);
        group.bench_function(name, |b| {
            b.iter(|| {
                let tv = TeacherView::for_config(&teacher, f, &scene.objects, &cfg).unwrap();
                scene_step(&cfg, &student, tv.as_ref(), f, &scene.objects, 4.0).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_hungarian, bench_forward, bench_step);
criterion_main!(benches);
