use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scfattn::cyclo::{scf_full, scf_full_fast, GridCell, PatchCache, ScfConfig};
use scfattn::par::ExecMode;
use scfattn::reinforce::prepare;
use scfattn::sigsynth::{generate_dataset_with, Scenario, SynthConfig};

fn grids(c: &mut Criterion) {
    let synth = SynthConfig::default();
    let scf = ScfConfig::default();
    let ds = generate_dataset_with(Scenario::I, &synth, 16, 1, 1).unwrap();
    let signal = ds.train[0].signal(&synth).unwrap();

    let mut g = c.benchmark_group("scf_grid");
    g.sample_size(10);
    g.bench_function("direct", |b| b.iter(|| scf_full(&signal, &scf).unwrap()));
    g.bench_function("fast", |b| b.iter(|| scf_full_fast(&signal, &scf).unwrap()));
    g.bench_function("five_patches", |b| {
        b.iter(|| {
            let mut cache = PatchCache::new(&signal, &scf).unwrap();
            for i in 0..5 {
                cache.get(GridCell::new(i, 4).unwrap());
            }
        })
    });
    g.finish();

    let mut g = c.benchmark_group("prepare_16");
    g.sample_size(10);
    for (name, mode) in [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)] {
        g.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| prepare(&ds.train, &synth, &scf, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, grids);
criterion_main!(benches);
