//! Moment-matching invariant: with the exact oracle velocity, every sampler
//! kind reproduces the data mixture's first two moments at 128 steps over
//! 1e4 paths (within 5%).

use flowrl::mixture::GaussianMixture;
use flowrl::samplers::{sample, OracleField, SamplerKind, SamplerSpec, MAX_STOCHASTICITY};
use flowrl::schedule::RectifiedFlow;

const RF: RectifiedFlow = RectifiedFlow;

fn terminal_moments(spec: &SamplerSpec, seed: u64) -> (f64, f64) {
    let mix = GaussianMixture::uniform(vec![vec![-1.5], vec![1.5]], 0.25).unwrap();
    let field = OracleField {
        mixture: &mix,
        sched: &RF,
    };
    let n = 10_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n {
        let mut rng = flowrl::rng::substream(seed, &[0x6d6f, i as u64]);
        let (x0, _) = sample(&field, spec, 0, &RF, &mut rng).unwrap();
        sum += x0[0];
        sum_sq += x0[0] * x0[0];
    }
    let mean = sum / n as f64;
    (mean, sum_sq / n as f64 - mean * mean)
}

fn assert_moments(spec: SamplerSpec, label: &str) {
    let (mean, var) = terminal_moments(&spec, 31);
    // Data mixture: mean 0, variance 0.25 + 1.5^2 = 2.5.
    assert!(
        mean.abs() <= 0.05 * 2.5_f64.sqrt(),
        "{label}: mean {mean}"
    );
    assert!(
        (var - 2.5).abs() <= 0.05 * 2.5,
        "{label}: variance {var} vs 2.5"
    );
}

#[test]
fn euler_ode_matches_data_moments() {
    assert_moments(SamplerSpec::new(SamplerKind::EulerOde, 128), "euler_ode");
}

#[test]
fn multistep2_ode_matches_data_moments() {
    assert_moments(
        SamplerSpec::new(SamplerKind::Multistep2Ode, 128),
        "multistep2_ode",
    );
}

#[test]
fn sde_euler_matches_data_moments() {
    assert_moments(
        SamplerSpec::sde_euler(128, MAX_STOCHASTICITY),
        "sde_euler",
    );
}

#[test]
fn sde_ddim_matches_data_moments() {
    assert_moments(SamplerSpec::sde_ddim(128, 1.0), "sde_ddim");
}
