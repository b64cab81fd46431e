//! Outer iterations: the control-reduced SQP method and the Lagrange–Newton
//! baseline, plus convergence diagnostics.

use std::fmt;
use std::time::Instant;

use crate::error::{Result, SqpError};
use crate::measure::{classify_active, weighted_inner, BoxBounds, GridFunction};
use crate::problem::{LagrangeNewtonOracle, ProblemOracle, SqpConfig};
use crate::qp::{solve_ssn, FrozenHessian, LinearizedHessian, QpInstance, QpResult, SsnSettings};

/// One row of a convergence history.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    /// `J(u_n)`.
    pub objective: f64,
    /// `δ_n`; absent for the starting point.
    pub stepsize: Option<f64>,
    pub count_free: usize,
    pub count_lower: usize,
    pub count_upper: usize,
    /// Semismooth Newton iterations of the subproblem that produced `u_n`.
    pub qp_iterations: usize,
    /// Seconds since the run started.
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Converged,
    MaxIters,
    SubproblemFailure,
    /// Residuals grew over several consecutive iterations.
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIters => "max_iters",
            RunStatus::SubproblemFailure => "subproblem_failure",
            RunStatus::Diverged => "diverged",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct SqpRun {
    pub records: Vec<IterationRecord>,
    /// `u_0, u_1, …`; the last entry is `final_control`.
    pub iterates: Vec<GridFunction>,
    pub final_control: GridFunction,
    pub status: RunStatus,
    /// Diagnostic for a failed or diverged run.
    pub message: Option<String>,
}

impl SqpRun {
    /// Number of subproblems solved.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn final_objective(&self) -> f64 {
        self.records.last().expect("records are nonempty").objective
    }

    /// `‖u_n − u_final‖_∞` for every iterate, the final one included.
    pub fn error_sequence(&self) -> Vec<f64> {
        self.iterates
            .iter()
            .map(|u| u.sub(&self.final_control).expect("same space").norm_inf())
            .collect()
    }

    /// Rate fit against the final iterate, dropping the last two entries
    /// (the reference itself and the round-off dominated one before it).
    pub fn fitted_rate(&self) -> Result<(f64, f64)> {
        let e = self.error_sequence();
        if e.len() < 2 {
            return Err(SqpError::RateEstimate("run has no steps".into()));
        }
        estimate_rate(&e[..e.len() - 2])
    }

    pub fn stepsizes(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.stepsize).collect()
    }
}

/// `δ = ‖v_{n−1}‖_∞ / max{1, ‖u_n‖_∞}`.
pub fn stepsize(previous_step: &GridFunction, current_control: &GridFunction) -> Result<f64> {
    previous_step.check_same_space(current_control)?;
    Ok(previous_step.norm_inf() / current_control.norm_inf().max(1.0))
}

/// Least-squares fit of `log e_{n+1} = log C + r log e_n`; returns `(r, C)`.
pub fn estimate_rate(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.len() < 3 {
        return Err(SqpError::RateEstimate(format!(
            "need at least 3 errors, got {}",
            errors.len()
        )));
    }
    if errors.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(SqpError::RateEstimate("errors must be positive and finite".into()));
    }
    if errors.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SqpError::RateEstimate("error sequence is not strictly decreasing".into()));
    }
    let pts: Vec<(f64, f64)> = errors.windows(2).map(|w| (w[0].ln(), w[1].ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let r = sxy / sxx;
    Ok((r, (my - r * mx).exp()))
}

/// Largest `δ_{n+1}/δ_n²` over the last three recorded stepsizes.
pub fn quadratic_tail_constant(stepsizes: &[f64]) -> Option<f64> {
    if stepsizes.len() < 3 {
        return None;
    }
    let tail = &stepsizes[stepsizes.len() - 3..];
    Some(
        tail.windows(2)
            .map(|w| if w[1] == 0.0 { 0.0 } else { w[1] / (w[0] * w[0]) })
            .fold(0.0, f64::max),
    )
}

/// Strict-complementarity counts for `g = κu + Φ(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauBandReport {
    pub tau: f64,
    /// Points with `g > τ`.
    pub count_tau_plus: usize,
    /// Points with `g < −τ`.
    pub count_tau_minus: usize,
    /// Points at a bound with `|g| ≤ τ`.
    pub count_biactive: usize,
    /// Points of the `τ+` set not at the lower bound.
    pub plus_off_lower: usize,
    /// Points of the `τ−` set not at the upper bound.
    pub minus_off_upper: usize,
}

/// Counts the `τ` bands of `κu + Φ(u)`. `tau = None` uses
/// `1e-6·‖κu + Φ(u)‖_∞`.
pub fn tau_band_report<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    kappa: f64,
    u: &GridFunction,
    tau: Option<f64>,
) -> Result<TauBandReport> {
    let g = crate::problem::gradient(oracle, kappa, u)?;
    let tau = match tau {
        Some(t) if t > 0.0 => t,
        Some(t) => return Err(SqpError::Domain(format!("tau must be positive, got {t}"))),
        None => (1e-6 * g.norm_inf()).max(f64::MIN_POSITIVE),
    };
    let b = oracle.bounds();
    let mut r = TauBandReport {
        tau,
        count_tau_plus: 0,
        count_tau_minus: 0,
        count_biactive: 0,
        plus_off_lower: 0,
        minus_off_upper: 0,
    };
    for (&gi, &ui) in g.values().iter().zip(u.values()) {
        let at_lower = ui == b.lower();
        let at_upper = ui == b.upper();
        if gi > tau {
            r.count_tau_plus += 1;
            r.plus_off_lower += usize::from(!at_lower);
        } else if gi < -tau {
            r.count_tau_minus += 1;
            r.minus_off_upper += usize::from(!at_upper);
        } else if at_lower || at_upper {
            r.count_biactive += 1;
        }
    }
    Ok(r)
}

fn ssn_settings(cfg: &SqpConfig) -> SsnSettings {
    SsnSettings {
        tol: cfg.qp_tol,
        max_iters: cfg.qp_max_iters,
        cg_tol: cfg.cg_tol,
        cg_max_iters: cfg.cg_max_iters,
    }
}

/// `u_n + v`, with points the subproblem reported active put exactly on
/// their bound and everything clamped into the box.
fn take_step(u: &GridFunction, res: &QpResult, b: &BoxBounds) -> Result<GridFunction> {
    let mut next = u.add(&res.step)?;
    let vals = next.values_mut();
    for x in vals.iter_mut() {
        *x = b.clamp(*x);
    }
    for &i in &res.final_active_sets.lower_active {
        vals[i] = b.lower();
    }
    for &i in &res.final_active_sets.upper_active {
        vals[i] = b.upper();
    }
    Ok(next)
}

fn check_feasible(u: &GridFunction, b: &BoxBounds) -> Result<()> {
    if let Some(x) = u.values().iter().find(|x| !b.contains(**x)) {
        return Err(SqpError::InvalidBounds(format!(
            "starting control value {x} outside [{}, {}]",
            b.lower(),
            b.upper()
        )));
    }
    Ok(())
}

struct Recorder {
    start: Instant,
    bounds: BoxBounds,
    records: Vec<IterationRecord>,
    iterates: Vec<GridFunction>,
}

impl Recorder {
    fn new(bounds: BoxBounds) -> Self {
        Self {
            start: Instant::now(),
            bounds,
            records: Vec::new(),
            iterates: Vec::new(),
        }
    }

    fn push(&mut self, u: &GridFunction, objective: f64, prev_step: Option<&GridFunction>, qp_iterations: usize) -> Result<()> {
        let (count_free, count_lower, count_upper) = classify_active(u, &self.bounds, 0.0).counts();
        let stepsize = prev_step.map(|v| stepsize(v, u)).transpose()?;
        self.records.push(IterationRecord {
            n: self.records.len(),
            objective,
            stepsize,
            count_free,
            count_lower,
            count_upper,
            qp_iterations,
            wall_time_seconds: self.start.elapsed().as_secs_f64(),
        });
        self.iterates.push(u.clone());
        Ok(())
    }

    fn finish(self, status: RunStatus, message: Option<String>) -> SqpRun {
        let final_control = self.iterates.last().expect("at least the start").clone();
        SqpRun {
            records: self.records,
            iterates: self.iterates,
            final_control,
            status,
            message,
        }
    }
}

fn full_objective(smooth: f64, kappa: f64, u: &GridFunction) -> Result<f64> {
    Ok(smooth + 0.5 * kappa * weighted_inner(u, u)?)
}

fn stop_test(step: &GridFunction, next: &GridFunction, j_old: f64, j_new: f64, tol: f64) -> bool {
    let d = step.norm_inf();
    let rel = d / next.norm_inf().max(1.0);
    d.max(rel) < tol || j_old.to_bits() == j_new.to_bits()
}

/// Control-reduced SQP: each iteration evaluates `Φ(u_n)` (one nonlinear
/// state solve and one adjoint solve) and solves the box-constrained
/// quadratic model built from `Φ'(u_n)`.
pub fn run_sqpnln<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    u0: &GridFunction,
    cfg: &SqpConfig,
) -> Result<SqpRun> {
    cfg.validate()?;
    let bounds = oracle.bounds();
    u0.check_same_space(&GridFunction::zeros(oracle.control_space()))?;
    check_feasible(u0, &bounds)?;
    let settings = ssn_settings(cfg);
    let mut rec = Recorder::new(bounds);

    let mut u = u0.clone();
    let mut j = full_objective(oracle.objective(&u)?, cfg.kappa, &u)?;
    rec.push(&u, j, None, 0)?;
    let mut warm = GridFunction::zeros(u.space());

    for n in 0..cfg.max_outer_iters {
        let phi = match oracle.phi(&u) {
            Ok(p) => p,
            Err(e) => return Ok(rec.finish(RunStatus::SubproblemFailure, Some(format!("iterate {n}: {e}")))),
        };
        let res = {
            let hess = FrozenHessian::new(&mut *oracle, u.clone());
            let mut q = QpInstance::new(hess, u.clone(), cfg.kappa, bounds, &phi)?;
            solve_ssn(&mut q, &warm, &settings)
        };
        let res = match res {
            Ok(r) => r,
            Err(e) => return Ok(rec.finish(RunStatus::SubproblemFailure, Some(format!("subproblem {n}: {e}")))),
        };
        let next = take_step(&u, &res, &bounds)?;
        let step = next.sub(&u)?;
        let j_next = match oracle.objective(&next) {
            Ok(s) => full_objective(s, cfg.kappa, &next)?,
            Err(e) => return Ok(rec.finish(RunStatus::SubproblemFailure, Some(format!("iterate {}: {e}", n + 1)))),
        };
        rec.push(&next, j_next, Some(&step), res.ssn_iterations)?;
        let done = stop_test(&step, &next, j, j_next, cfg.stop_tol);
        u = next;
        j = j_next;
        warm = step;
        if done {
            return Ok(rec.finish(RunStatus::Converged, None));
        }
    }
    Ok(rec.finish(RunStatus::MaxIters, None))
}

/// Consecutive residual increases that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 5;

/// Lagrange–Newton SQP: state, adjoint and control are iterated jointly and
/// every iteration only needs linear solves.
pub fn run_sqplin<O: LagrangeNewtonOracle + ?Sized>(
    oracle: &mut O,
    u0: &GridFunction,
    primal0: O::Primal,
    cfg: &SqpConfig,
) -> Result<SqpRun> {
    cfg.validate()?;
    let bounds = oracle.bounds();
    u0.check_same_space(&GridFunction::zeros(oracle.control_space()))?;
    check_feasible(u0, &bounds)?;
    let settings = ssn_settings(cfg);
    let mut rec = Recorder::new(bounds);

    let mut u = u0.clone();
    let mut primal = primal0;
    let mut j = full_objective(oracle.primal_objective(&u, &primal)?, cfg.kappa, &u)?;
    rec.push(&u, j, None, 0)?;
    let mut warm = GridFunction::zeros(u.space());
    let mut last_residual = f64::INFINITY;
    let mut growth = 0;

    for n in 0..cfg.max_outer_iters {
        let attempt = (|| -> Result<QpResult> {
            oracle.linearize(&u, &primal)?;
            let phi = oracle.linearized_phi()?;
            let hess = LinearizedHessian::new(&mut *oracle);
            let mut q = QpInstance::new(hess, u.clone(), cfg.kappa, bounds, &phi)?;
            solve_ssn(&mut q, &warm, &settings)
        })();
        let res = match attempt {
            Ok(r) => r,
            Err(e) => return Ok(rec.finish(RunStatus::SubproblemFailure, Some(format!("subproblem {n}: {e}")))),
        };
        let next = take_step(&u, &res, &bounds)?;
        let step = next.sub(&u)?;
        let evaluated = (|| -> Result<(O::Primal, f64, f64)> {
            let p = oracle.advance(&step)?;
            let jn = full_objective(oracle.primal_objective(&next, &p)?, cfg.kappa, &next)?;
            let r = oracle.state_residual(&next, &p)?;
            Ok((p, jn, r))
        })();
        let (p_next, j_next, state_res) = match evaluated {
            Ok(t) => t,
            Err(e) => return Ok(rec.finish(RunStatus::SubproblemFailure, Some(format!("iterate {}: {e}", n + 1)))),
        };
        rec.push(&next, j_next, Some(&step), res.ssn_iterations)?;
        let residual = step.norm_inf().max(state_res);
        if !residual.is_finite() || !j_next.is_finite() {
            return Ok(rec.finish(RunStatus::Diverged, Some(format!("non-finite iterate {}", n + 1))));
        }
        growth = if residual > last_residual { growth + 1 } else { 0 };
        last_residual = residual;
        if growth >= DIVERGENCE_WINDOW {
            return Ok(rec.finish(
                RunStatus::Diverged,
                Some(format!("residual grew over {DIVERGENCE_WINDOW} consecutive iterations, now {residual:.3e}")),
            ));
        }
        let done = stop_test(&step, &next, j, j_next, cfg.stop_tol);
        u = next;
        j = j_next;
        primal = p_next;
        warm = step;
        if done {
            return Ok(rec.finish(RunStatus::Converged, None));
        }
    }
    Ok(rec.finish(RunStatus::MaxIters, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::MeasureSpace;
    use std::sync::Arc;

    #[test]
    fn stepsize_examples() {
        let s = MeasureSpace::new(vec![1.0; 3]).unwrap();
        let z = GridFunction::zeros(&s);
        let u = GridFunction::new(s.clone(), vec![0.5, -0.2, 0.1]).unwrap();
        assert_eq!(stepsize(&z, &u).unwrap(), 0.0);
        let v = GridFunction::new(s.clone(), vec![2.0, -1.0, 0.0]).unwrap();
        assert_eq!(stepsize(&v, &u).unwrap(), 2.0);
        let big = GridFunction::new(s, vec![4.0, 0.0, 0.0]).unwrap();
        assert_eq!(stepsize(&v, &big).unwrap(), 0.5);
    }

    #[test]
    fn rate_of_model_sequences() {
        let quad: Vec<f64> = (0..5).map(|n| 0.5f64.powi(1 << n)).collect();
        let (r, c) = estimate_rate(&quad).unwrap();
        assert!((r - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-10);
        let lin: Vec<f64> = (1..8).map(|n| 0.5f64.powi(n)).collect();
        let (r, c) = estimate_rate(&lin).unwrap();
        assert!((r - 1.0).abs() < 1e-12 && (c - 0.5).abs() < 1e-12);
        assert!(estimate_rate(&[1.0, 0.1]).is_err());
        assert!(estimate_rate(&[1.0, 0.1, 0.2]).is_err());
        assert!(estimate_rate(&[1.0, 0.1, 0.0]).is_err());
    }

    #[test]
    fn quadratic_tail_from_table_like_steps() {
        let k = quadratic_tail_constant(&[0.94, 0.21, 8.4e-3, 2.0e-5, 1.6e-10]).unwrap();
        assert!(k < 1e6);
        assert!(quadratic_tail_constant(&[1.0, 0.5]).is_none());
    }

    /// `Φ(u) = Su + c` with unit weights.
    struct Affine {
        space: Arc<MeasureSpace>,
        s: Vec<Vec<f64>>,
        c: Vec<f64>,
        bounds: BoxBounds,
    }

    impl Affine {
        fn mat(&self, u: &[f64]) -> Vec<f64> {
            self.s.iter().map(|r| r.iter().zip(u).map(|(a, b)| a * b).sum()).collect()
        }
    }

    impl ProblemOracle for Affine {
        fn control_space(&self) -> &Arc<MeasureSpace> {
            &self.space
        }
        fn bounds(&self) -> BoxBounds {
            self.bounds
        }
        fn objective(&mut self, u: &GridFunction) -> Result<f64> {
            let su = self.mat(u.values());
            Ok(u.values().iter().zip(&su).zip(&self.c).map(|((x, s), c)| 0.5 * x * s + c * x).sum())
        }
        fn phi(&mut self, u: &GridFunction) -> Result<GridFunction> {
            let su = self.mat(u.values());
            GridFunction::new(self.space.clone(), su.iter().zip(&self.c).map(|(a, b)| a + b).collect())
        }
        fn apply_phi_prime(&mut self, _u: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
            GridFunction::new(self.space.clone(), self.mat(v.values()))
        }
    }

    fn affine() -> Affine {
        Affine {
            space: MeasureSpace::new(vec![1.0; 3]).unwrap(),
            s: vec![vec![2.0, 0.5, 0.0], vec![0.5, 1.0, 0.2], vec![0.0, 0.2, 0.3]],
            c: vec![-3.0, 0.4, 0.05],
            bounds: BoxBounds::l2(-1.0, 1.0).unwrap(),
        }
    }

    #[test]
    fn affine_problem_is_solved_by_the_first_subproblem() {
        let mut o = affine();
        let cfg = SqpConfig::new(0.5);
        let u0 = GridFunction::constant(&o.space.clone(), 0.3);
        let run = run_sqpnln(&mut o, &u0, &cfg).unwrap();
        assert!(run.converged());
        // the second subproblem returns a zero step
        assert_eq!(run.iterations(), 2);
        assert_eq!(run.iterates[1], run.iterates[2]);
        assert_eq!(run.records[0].stepsize, None);
        let kkt = crate::problem::kkt_residual(&mut o, 0.5, &run.final_control).unwrap();
        assert!(kkt < 1e-12);
        for r in &run.records {
            assert_eq!(r.count_free + r.count_lower + r.count_upper, 3);
        }
        let band = tau_band_report(&mut o, 0.5, &run.final_control, None).unwrap();
        assert_eq!(band.count_biactive, 0);
        assert_eq!(band.plus_off_lower + band.minus_off_upper, 0);
        assert!(band.count_tau_minus >= 1); // first point sits at the upper bound
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut o = affine();
        let u0 = GridFunction::constant(&o.space.clone(), 3.0);
        assert!(run_sqpnln(&mut o, &u0, &SqpConfig::new(0.5)).is_err());
    }

    #[test]
    fn tau_band_examples() {
        let mut o = Affine {
            s: vec![vec![0.0; 3]; 3],
            c: vec![0.0; 3],
            ..affine()
        };
        // Φ ≡ 0, u ≡ α = −1 would give κu < 0; use a shifted box instead
        o.bounds = BoxBounds::l2(0.5, 2.0).unwrap();
        let u = GridFunction::constant(&o.space.clone(), 0.5);
        let r = tau_band_report(&mut o, 1.0, &u, Some(1e-3)).unwrap();
        assert_eq!((r.count_tau_plus, r.count_tau_minus, r.count_biactive), (3, 0, 0));
        assert_eq!(r.plus_off_lower, 0);
        // interior u with κu + Φ ≡ 0: c = −κu
        o.c = vec![-1.0; 3];
        let u = GridFunction::constant(&o.space.clone(), 1.0);
        let r = tau_band_report(&mut o, 1.0, &u, Some(1e-6)).unwrap();
        assert_eq!((r.count_tau_plus, r.count_tau_minus, r.count_biactive), (0, 0, 0));
    }
}
