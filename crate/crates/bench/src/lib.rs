//! Fixtures shared by the benchmarks.

use fsdet::datagen::{binomial_thresholds, categorize, sample_continuous, GeneratedSample};
use fsdet::{build_population_pattern, ModelSpec, PopulationDescriptor};

/// Three factors with five indicators each, as used in the population runs.
pub fn descriptor(sl: f64) -> PopulationDescriptor {
    PopulationDescriptor { q: 3, p_per_factor: 5, sl, cl: false, phi_offdiag: 0.3 }
}

pub fn model_spec() -> ModelSpec {
    ModelSpec::independent_cluster(3, 5, true).expect("valid model")
}

/// Seeded sample of `n` cases, categorized when `c >= 2`.
pub fn sample(n: usize, c: usize, seed: u64) -> GeneratedSample {
    let truth = build_population_pattern(&descriptor(0.8)).expect("valid descriptor");
    let mut rng = fsdet::rng::stream(seed, &[0]);
    let s = sample_continuous(&truth, n, &mut rng).expect("sample");
    if c >= 2 {
        categorize(&s, &binomial_thresholds(c).expect("thresholds")).expect("categorize")
    } else {
        s
    }
}
