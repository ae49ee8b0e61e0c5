use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use qfix::par::Exec;
use qfix::verification::suites::{run_suite, Suite, SuiteOptions};

fn suites(c: &mut Criterion) {
    let mut group = c.benchmark_group("suites");
    group.sample_size(10);
    for (suite, instances) in [(Suite::Igm, 100), (Suite::Grad, 10), (Suite::Detach, 20)] {
        for exec in [Exec::Sequential, Exec::Parallel] {
            let opts = SuiteOptions {
                exec,
                instances: Some(instances),
                ..SuiteOptions::default()
            };
            group.bench_with_input(BenchmarkId::new(suite.name(), format!("{exec:?}")), &opts, |b, opts| {
                b.iter(|| run_suite(suite, opts).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, suites);
criterion_main!(benches);
