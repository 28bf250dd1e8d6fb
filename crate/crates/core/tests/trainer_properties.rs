mod common;

use bnml_core::model::{loss_and_grads, plain_loss_and_grad};
use bnml_core::trainer::{
    gamma_envelope_report, init_state, monotonicity_report, train, train_from, TrainTrace,
};
use bnml_core::{ModelKind, Probes, Rng, TrainConfig};
use common::gaussian;
use proptest::prelude::*;

fn cfg(model: ModelKind, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { steps, seed, log_every: 7, model, ..TrainConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn updates_are_plain_gradient_steps(seed in any::<u64>(), n in 2usize..8, p in 1usize..4, eta in 0.001f64..0.5) {
        let data = gaussian(seed, n, p, n * p + 3);
        for model in [ModelKind::BnCnn, ModelKind::Plain] {
            let c = TrainConfig { eta, ..cfg(model, 5, seed) };
            let start = init_state(&mut Rng::new(seed), &c, data.d());
            let run = train_from(&data, &c, Probes::default(), start.clone());
            let mut st = start;
            for _ in 0..5 {
                let g = if model.is_bn() {
                    loss_and_grads(&st, &data).unwrap()
                } else {
                    plain_loss_and_grad(&st.w, &data).unwrap()
                };
                for (w, gw) in st.w.iter_mut().zip(&g.grad_w) {
                    *w -= eta * gw;
                }
                st.gamma -= eta * g.grad_gamma;
            }
            prop_assert_eq!(&run.state, &st);
        }
    }

    #[test]
    fn bn_norm_never_decreases(seed in any::<u64>(), n in 2usize..10, p in 1usize..4, eta in 0.01f64..1.0) {
        let data = gaussian(seed, n, p, n * p + 2);
        let model = if p == 1 { ModelKind::BnLinear } else { ModelKind::BnCnn };
        let c = TrainConfig { eta, log_every: 1, ..cfg(model, 400, seed) };
        let run = train(&data, &c, Probes::default()).unwrap();
        prop_assert_eq!(run.norm_decreases, 0);
        prop_assert_eq!(monotonicity_report(&run.trace, None).norm_violations, 0);
    }

    #[test]
    fn trace_csv_round_trips(seed in any::<u64>(), steps in 0usize..60) {
        let data = gaussian(seed, 4, 1, 6);
        let wstar = bnml_core::solvers::solve_uniform_margin(&data).unwrap().solution;
        let run = train(&data, &cfg(ModelKind::BnLinear, steps, seed), Probes { wstar: Some(&wstar), wmax: None }).unwrap();
        let back = TrainTrace::from_csv(&run.trace.to_csv()).unwrap();
        prop_assert_eq!(back, run.trace);
    }
}

#[test]
fn identical_inputs_give_identical_traces() {
    let data = gaussian(11, 10, 2, 25);
    let c = cfg(ModelKind::BnCnn, 500, 3);
    let a = train(&data, &c, Probes::default()).unwrap();
    let b = train(&data, &c, Probes::default()).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.state, b.state);
}

#[test]
fn zero_steps_gives_only_the_initial_row() {
    let data = gaussian(1, 5, 1, 8);
    let run = train(&data, &cfg(ModelKind::BnLinear, 0, 0), Probes::default()).unwrap();
    assert_eq!(run.trace.rows.len(), 1);
    assert_eq!(run.trace.rows[0].gamma, Some(1.0));
}

#[test]
fn bn_cnn_equalizes_patch_margins() {
    let data = gaussian(5, 6, 3, 30);
    let c = TrainConfig { eta: 5e-4, log_every: 100, ..cfg(ModelKind::BnCnn, 20_000, 2) };
    let run = train(&data, &c, Probes::default()).unwrap();
    let rows = &run.trace.rows;
    let (first, last) = (&rows[0], rows.last().unwrap());
    assert!(last.discrepancy <= 1e-4 * first.discrepancy, "{} -> {}", first.discrepancy, last.discrepancy);
    assert!(last.gamma.unwrap() > first.gamma.unwrap());
    let env = gamma_envelope_report(&run.trace, c.eta);
    assert!(env.start.is_some() && env.violations == 0, "{env:?}");
}

#[test]
fn invalid_configs_are_rejected() {
    let data = gaussian(1, 3, 1, 4);
    for bad in [
        TrainConfig { eta: 0.0, ..TrainConfig::default() },
        TrainConfig { init_scale: -1.0, ..TrainConfig::default() },
        TrainConfig { log_every: 0, ..TrainConfig::default() },
    ] {
        assert!(train(&data, &bad, Probes::default()).is_err());
    }
}
