//! Wall-clock scaling of the literal estimator; kept in its own binary so no
//! other test competes for the CPU.

use std::time::Instant;

use dope_core::design::estimate_mi;
use dope_core::model::*;
use dope_core::posterior::{draw_posterior, GibbsConfig, PosteriorSamples};
use dope_core::rng::stream;

fn prior_samples(spec: &PopulationSpec, prior: &PriorParams, l: usize, seed: u64) -> PosteriorSamples {
    let cfg = GibbsConfig { n_samples: l, seed, ..Default::default() };
    draw_posterior(&cfg, &Design::empty(), &TestData::empty(), spec, prior, &TestErrorParams::perfect()).unwrap()
}

#[test]
fn pairwise_cost_is_quadratic() {
    let spec = PopulationSpec::from_sizes(&[3, 3]).unwrap();
    let prior = PriorParams::new(0.3, 0.3, 0.05).unwrap();
    let err = TestErrorParams::new(0.2, 0.01).unwrap();
    let design = Design::from_lists(&[vec![0, 1, 2], vec![3, 4, 5]]).unwrap();
    let time = |l: usize| {
        let samples = prior_samples(&spec, &prior, l, 2);
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let t = Instant::now();
            estimate_mi(&design, &samples, &err, &mut stream(1, &[])).unwrap();
            best = best.min(t.elapsed().as_secs_f64());
        }
        best
    };
    let (small, large) = (600, 6000);
    let exponent = (time(large) / time(small)).ln() / 10f64.ln();
    assert!((1.7..=2.3).contains(&exponent), "exponent {exponent}");
}
