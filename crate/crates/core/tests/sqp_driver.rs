use boxsqp::measure::{classify_active, GridFunction, MeasureSpace};
use boxsqp::problem::{kkt_residual, LagrangeNewtonOracle, ProblemOracle, SqpConfig};
use boxsqp::sqp::{
    estimate_rate, quadratic_tail_constant, run_sqplin, run_sqpnln, stepsize, tau_band_report, RunStatus,
};
use boxsqp::verification::{make_synthetic, Spectrum};
use proptest::prelude::*;

#[test]
fn stepsize_examples() {
    let s = MeasureSpace::uniform(4, 1.0).unwrap();
    let zero = GridFunction::zeros(&s);
    let u = GridFunction::constant(&s, 0.5);
    assert_eq!(stepsize(&zero, &u).unwrap(), 0.0);
    let v = GridFunction::from_fn(&s, |i| if i == 2 { -2.0 } else { 1.0 });
    assert_eq!(stepsize(&v, &u).unwrap(), 2.0);
    let big = GridFunction::constant(&s, 4.0);
    assert_eq!(stepsize(&v, &big).unwrap(), 0.5);
}

#[test]
fn rate_fit_examples() {
    let quad: Vec<f64> = (0..5).map(|n| 0.5f64.powi(1 << n)).collect();
    let (r, c) = estimate_rate(&quad).unwrap();
    assert!((r - 2.0).abs() < 1e-10 && (c - 1.0).abs() < 1e-8, "{r} {c}");
    let lin: Vec<f64> = (1..8).map(|n| 0.5f64.powi(n)).collect();
    let (r, _) = estimate_rate(&lin).unwrap();
    assert!((r - 1.0).abs() < 1e-10);
    assert!(estimate_rate(&[1.0, 0.1]).is_err());
    assert!(estimate_rate(&[1.0, 0.1, 0.2]).is_err());
}

#[test]
fn small_nonlinearity_gives_a_quadratic_rate() {
    let mut p = make_synthetic(11, 32, Spectrum::new(0.05, 2.0), 1e-2).unwrap();
    let kappa = 0.02;
    let u0 = GridFunction::constant(p.control_space(), 0.9);
    let run = run_sqpnln(&mut p, &u0, &SqpConfig::new(kappa)).unwrap();
    assert_eq!(run.status, RunStatus::Converged);
    assert!(run.iterations() >= 4, "{}", run.iterations());
    let (r, _) = run.fitted_rate().unwrap();
    assert!(r >= 1.7, "rate {r}, errors {:?}", run.error_sequence());
    assert!(kkt_residual(&mut p, kappa, &run.final_control).unwrap() < 5e-12);
}

#[test]
fn tail_constant_on_table_like_column() {
    let k = quadratic_tail_constant(&[5e1, 1.2, 8.4e-3, 2.0e-5, 1.6e-10]).unwrap();
    assert!(k < 1e6, "{k}");
    assert!(quadratic_tail_constant(&[1.0, 1e-3]).is_none());
}

#[test]
fn methods_agree_on_a_synthetic_problem() {
    let mut p = make_synthetic(5, 24, Spectrum::new(0.1, 3.0), 0.2).unwrap();
    let kappa = 0.3;
    let cfg = SqpConfig::new(kappa);
    let u0 = GridFunction::zeros(p.control_space());
    let a = run_sqpnln(&mut p, &u0, &cfg).unwrap();
    let primal = p.solved_primal(&u0).unwrap();
    let b = run_sqplin(&mut p, &u0, primal, &cfg).unwrap();
    assert!(a.converged() && b.converged());
    let gap = a.final_control.sub(&b.final_control).unwrap().norm_inf() / a.final_control.norm_inf();
    assert!(gap < cfg.stop_tol, "{gap}");
    // X^{τ±} points sit on the matching bound
    let band = tau_band_report(&mut p, kappa, &a.final_control, None).unwrap();
    assert_eq!((band.plus_off_lower, band.minus_off_upper, band.count_biactive), (0, 0, 0));
}

#[test]
fn rows_record_the_projected_active_counts() {
    let mut p = make_synthetic(2, 16, Spectrum::new(0.1, 1.0), 0.05).unwrap();
    let u0 = GridFunction::zeros(p.control_space());
    let run = run_sqpnln(&mut p, &u0, &SqpConfig::new(0.1)).unwrap();
    assert_eq!(run.records[0].n, 0);
    assert!(run.records[0].stepsize.is_none());
    for (r, u) in run.records.iter().zip(&run.iterates) {
        let (f, l, up) = classify_active(u, &p.bounds(), 0.0).counts();
        assert_eq!((r.count_free, r.count_lower, r.count_upper), (f, l, up));
    }
}

#[test]
fn invalid_configuration_is_rejected() {
    let mut p = make_synthetic(1, 4, Spectrum::new(0.1, 1.0), 0.0).unwrap();
    let u0 = GridFunction::zeros(p.control_space());
    assert!(run_sqpnln(&mut p, &u0, &SqpConfig::new(0.0)).is_err());
    let outside = GridFunction::constant(p.control_space(), 3.0);
    assert!(run_sqpnln(&mut p, &outside, &SqpConfig::new(0.1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_iterate_is_feasible(seed in 0u64..1000, eps in 0.0f64..0.5, kappa in 0.05f64..1.0, start in -1.0f64..1.0) {
        let mut p = make_synthetic(seed, 12, Spectrum::new(0.0, 2.0), eps).unwrap();
        let b = p.bounds();
        let u0 = GridFunction::constant(p.control_space(), start);
        let run = run_sqpnln(&mut p, &u0, &SqpConfig::new(kappa)).unwrap();
        for u in &run.iterates {
            prop_assert!(u.values().iter().all(|x| b.lower() <= *x && *x <= b.upper()));
        }
        if run.converged() {
            prop_assert!(kkt_residual(&mut p, kappa, &run.final_control).unwrap() <= 10.0 * 5e-13);
        }
    }
}
