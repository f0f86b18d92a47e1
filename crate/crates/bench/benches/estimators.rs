use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fsdet::bayes::{fit_bayes, McmcSettings, PriorSpec};
use fsdet::categorical::{fit_dwls, polychoric_matrix};
use fsdet::datagen::sample_moments;
use fsdet::ml::fit_ml;
use fsdet::normal::bvn_cdf;
use fsdet_bench::{model_spec, sample};

fn bench_bvn(c: &mut Criterion) {
    let mut g = c.benchmark_group("bvn_cdf");
    for rho in [0.3, 0.9, 0.999] {
        g.bench_with_input(BenchmarkId::from_parameter(rho), &rho, |b, &r| {
            b.iter(|| bvn_cdf(black_box(0.4), black_box(-0.7), r))
        });
    }
    g.finish();
}

fn bench_ml(c: &mut Criterion) {
    let spec = model_spec();
    let mut g = c.benchmark_group("fit_ml");
    for n in [300, 900] {
        let (_, s) = sample_moments(&sample(n, 0, 1).x).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &s, |b, s| b.iter(|| fit_ml(s, &spec, n).unwrap()));
    }
    g.finish();
}

fn bench_polychoric(c: &mut Criterion) {
    let spec = model_spec();
    let mut g = c.benchmark_group("polychoric");
    for cats in [2, 8] {
        let x = sample(300, cats, 2).x;
        g.bench_with_input(BenchmarkId::new("matrix", cats), &x, |b, x| b.iter(|| polychoric_matrix(x).unwrap()));
        let poly = polychoric_matrix(&x).unwrap();
        g.bench_with_input(BenchmarkId::new("dwls", cats), &poly, |b, p| b.iter(|| fit_dwls(p, &spec).unwrap()));
    }
    g.finish();
}

fn bench_gibbs(c: &mut Criterion) {
    let spec = model_spec();
    let x = sample(300, 4, 3).x;
    let mcmc = McmcSettings { burn_in: 100, draws: 200, ..McmcSettings::default() };
    let mut g = c.benchmark_group("gibbs");
    g.sample_size(10);
    g.bench_function("n300_300_iterations", |b| {
        b.iter(|| fit_bayes(&x, &spec, &PriorSpec::default(), &mcmc, 5, &[1]).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_bvn, bench_ml, bench_polychoric, bench_gibbs);
criterion_main!(benches);
