//! Box-constrained quadratic subproblems
//!
//! ```text
//!   min_v  ½⟨(κ + H)v, v⟩_μ + ⟨ℓ, v⟩_μ   s.t.  α ≤ u_n + v ≤ β,
//! ```
//!
//! with `ℓ = κu_n + Φ(u_n)` and `H` available only as an action. The solution
//! `u⁺ = u_n + v` is characterised by the projection fixed point
//! `u⁺ = Proj[α,β](−(H(u⁺ − u_n) + Φ(u_n))/κ)`, which the primal–dual
//! active-set (semismooth Newton) method of [`solve_ssn`] solves with
//! conjugate gradients on the free set. [`solve_projected_gradient`] is an
//! independent first-order solver for the same problem.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::exec;
use crate::measure::{
    classify_point, weighted_inner, ActiveSetPartition, BoxBounds, GridFunction, MeasureSpace,
    PointState,
};
use crate::problem::{LagrangeNewtonOracle, ProblemOracle};

/// A symmetric linear operator on a control space, given by its action.
pub trait HessianAction {
    fn space(&self) -> &Arc<MeasureSpace>;
    fn apply(&mut self, v: &GridFunction) -> Result<GridFunction>;
}

/// `v ↦ Φ'(u)v` at a frozen `u`.
pub struct FrozenHessian<'a, O: ?Sized> {
    oracle: &'a mut O,
    at: GridFunction,
}

impl<'a, O: ProblemOracle + ?Sized> FrozenHessian<'a, O> {
    pub fn new(oracle: &'a mut O, at: GridFunction) -> Self {
        Self { oracle, at }
    }
}

impl<O: ProblemOracle + ?Sized> HessianAction for FrozenHessian<'_, O> {
    fn space(&self) -> &Arc<MeasureSpace> {
        self.oracle.control_space()
    }
    fn apply(&mut self, v: &GridFunction) -> Result<GridFunction> {
        self.oracle.apply_phi_prime(&self.at, v)
    }
}

/// Hessian action of a linearized Lagrange–Newton model.
pub struct LinearizedHessian<'a, O: ?Sized> {
    oracle: &'a mut O,
}

impl<'a, O: LagrangeNewtonOracle + ?Sized> LinearizedHessian<'a, O> {
    pub fn new(oracle: &'a mut O) -> Self {
        Self { oracle }
    }
}

impl<O: LagrangeNewtonOracle + ?Sized> HessianAction for LinearizedHessian<'_, O> {
    fn space(&self) -> &Arc<MeasureSpace> {
        self.oracle.control_space()
    }
    fn apply(&mut self, v: &GridFunction) -> Result<GridFunction> {
        self.oracle.apply_linearized_hessian(v)
    }
}

/// Dense matrix acting on a measure space, `v ↦ A v`. Mostly for tests and
/// synthetic problems.
pub struct DenseHessian {
    space: Arc<MeasureSpace>,
    rows: Vec<Vec<f64>>,
}

impl DenseHessian {
    pub fn new(space: Arc<MeasureSpace>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = space.point_count();
        if rows.len() != n || rows.iter().any(|r| r.len() != n) {
            return Err(SqpError::DimensionMismatch {
                expected: n,
                found: rows.len(),
            });
        }
        Ok(Self { space, rows })
    }
}

impl HessianAction for DenseHessian {
    fn space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }
    fn apply(&mut self, v: &GridFunction) -> Result<GridFunction> {
        let x = v.values();
        let out = self
            .rows
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        GridFunction::new(self.space.clone(), out)
    }
}

/// Data of one quadratic subproblem.
pub struct QpInstance<H> {
    pub hessian: H,
    pub base_point: GridFunction,
    pub kappa: f64,
    pub bounds: BoxBounds,
    /// `κu_n + Φ(u_n)`.
    pub linear_term: GridFunction,
}

impl<H: HessianAction> QpInstance<H> {
    /// Builds the instance from `Φ(u_n)`; the linear term is `κu_n + Φ(u_n)`.
    pub fn new(
        hessian: H,
        base_point: GridFunction,
        kappa: f64,
        bounds: BoxBounds,
        phi_at_base: &GridFunction,
    ) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(SqpError::InvalidConfig(format!("kappa must be positive, got {kappa}")));
        }
        base_point.check_same_space(phi_at_base)?;
        let linear_term = GridFunction::lincomb(kappa, &base_point, 1.0, phi_at_base)?;
        Ok(Self {
            hessian,
            base_point,
            kappa,
            bounds,
            linear_term,
        })
    }

    pub fn space(&self) -> &Arc<MeasureSpace> {
        self.base_point.space()
    }

    /// `Φ(u_n)` recovered from the linear term.
    pub fn phi_at_base(&self) -> GridFunction {
        GridFunction::lincomb(1.0, &self.linear_term, -self.kappa, &self.base_point)
            .expect("same space by construction")
    }

    /// Fixed-point residual `‖u⁺ − Proj(−(Hv + Φ(u_n))/κ)‖_∞` given `Hv`.
    pub fn residual_with(&self, step: &GridFunction, h_step: &GridFunction) -> f64 {
        let u = self.base_point.values();
        let l = self.linear_term.values();
        let v = step.values();
        let hv = h_step.values();
        let k = self.kappa;
        let b = self.bounds;
        exec::max_indexed(v.len(), |i| {
            // Φ(u_n) = ℓ − κu_n
            let target = b.clamp(-(hv[i] + l[i] - k * u[i]) / k);
            (u[i] + v[i] - target).abs()
        })
    }

    pub fn fixed_point_residual(&mut self, step: &GridFunction) -> Result<f64> {
        let hv = self.hessian.apply(step)?;
        Ok(self.residual_with(step, &hv))
    }
}

/// `½[κ⟨v,v⟩ + ⟨Hv,v⟩] + ⟨ℓ, v⟩`.
pub fn qp_objective<H: HessianAction>(q: &mut QpInstance<H>, v: &GridFunction) -> Result<f64> {
    let hv = q.hessian.apply(v)?;
    Ok(objective_with(q, v, &hv))
}

fn objective_with<H>(q: &QpInstance<H>, v: &GridFunction, hv: &GridFunction) -> f64 {
    let w = v.space().weights();
    let x = v.values();
    let h = hv.values();
    let l = q.linear_term.values();
    let k = q.kappa;
    exec::sum_indexed(x.len(), |i| w[i] * x[i] * (0.5 * (k * x[i] + h[i]) + l[i]))
}

/// Tolerances for [`solve_ssn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsnSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub cg_tol: f64,
    /// `None` means ten times the free-point count.
    pub cg_max_iters: Option<usize>,
}

impl Default for SsnSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 100,
            cg_tol: 1e-12,
            cg_max_iters: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpResult {
    /// `v_n = u⁺ − u_n`.
    pub step: GridFunction,
    pub ssn_iterations: usize,
    pub cg_iterations: usize,
    pub final_active_sets: ActiveSetPartition,
    pub fixed_point_residual: f64,
}

const CYCLE_FALLBACK_STEPS: usize = 5;
const CYCLE_FALLBACK_MAX: usize = 5120;

/// Primal–dual active-set method for the subproblem.
///
/// Each iteration fixes the active points at their bounds, solves the
/// reduced system `(κ + H)_II v_I = −(ℓ + H v_A)_I` by conjugate gradients in
/// the μ-inner product, and re-classifies from `−(Hv + Φ(u_n))/κ`. It stops
/// once the classification repeats and the fixed-point residual is below
/// `tol`. A classification that revisits an earlier pattern without lowering
/// the residual triggers a few projected-gradient steps.
pub fn solve_ssn<H: HessianAction>(
    q: &mut QpInstance<H>,
    v_init: &GridFunction,
    settings: &SsnSettings,
) -> Result<QpResult> {
    q.base_point.check_same_space(v_init)?;
    let n = q.base_point.len();
    let (lo, hi) = step_bounds(q);
    let mut v = v_init.clone();
    for (i, x) in v.values_mut().iter_mut().enumerate() {
        *x = x.max(lo[i]).min(hi[i]);
    }
    let mut hv = if v.values().iter().all(|x| *x == 0.0) {
        GridFunction::zeros(q.space())
    } else {
        q.hessian.apply(&v)?
    };
    let mut states = classify_states(q, &hv);
    let mut seen: HashMap<Vec<PointState>, f64> = HashMap::new();
    let mut cg_total = 0;
    let mut last_residual = f64::INFINITY;
    let mut fallback_steps = CYCLE_FALLBACK_STEPS;

    for iter in 1..=settings.max_iters {
        // fix active points at their bounds
        let mut changed = GridFunction::zeros(q.space());
        let mut any_change = false;
        {
            let vv = v.values_mut();
            let cv = changed.values_mut();
            for i in 0..n {
                let target = match states[i] {
                    PointState::Lower => lo[i],
                    PointState::Upper => hi[i],
                    PointState::Free => continue,
                };
                if vv[i] != target {
                    cv[i] = target - vv[i];
                    vv[i] = target;
                    any_change = true;
                }
            }
        }
        if any_change {
            hv.axpy(1.0, &q.hessian.apply(&changed)?)?;
        }

        let free: Vec<bool> = states.iter().map(|s| *s == PointState::Free).collect();
        let free_count = free.iter().filter(|f| **f).count();
        if free_count > 0 {
            // b = −(κv + Hv + ℓ) on the free set
            let mut b = GridFunction::zeros(q.space());
            {
                let bv = b.values_mut();
                let (x, h, l) = (v.values(), hv.values(), q.linear_term.values());
                for i in 0..n {
                    if free[i] {
                        bv[i] = -(q.kappa * x[i] + h[i] + l[i]);
                    }
                }
            }
            let cap = settings.cg_max_iters.unwrap_or(10 * free_count).max(1);
            let sol = cg_on_free_set(&mut q.hessian, q.kappa, &free, &b, settings.cg_tol, cap)?;
            cg_total += sol.iterations;
            v.axpy(1.0, &sol.x)?;
            hv.axpy(1.0, &sol.hx)?;
        }

        let residual = q.residual_with(&v, &hv);
        let new_states = classify_states(q, &hv);
        if new_states == states && residual <= settings.tol {
            // confirm with a fresh operator application
            let fresh = q.hessian.apply(&v)?;
            let fresh_residual = q.residual_with(&v, &fresh);
            if fresh_residual <= settings.tol {
                let mut step = v;
                for (i, x) in step.values_mut().iter_mut().enumerate() {
                    *x = x.max(lo[i]).min(hi[i]);
                }
                let fixed_point_residual = q.fixed_point_residual(&step)?;
                return Ok(QpResult {
                    step,
                    ssn_iterations: iter,
                    cg_iterations: cg_total,
                    final_active_sets: ActiveSetPartition::from_states(&states),
                    fixed_point_residual,
                });
            }
            hv = fresh;
        }
        last_residual = residual;

        let cycling = new_states != states
            && seen
                .get(&new_states)
                .is_some_and(|&r_then| residual >= r_then);
        seen.entry(states.clone())
            .and_modify(|r| *r = r.min(residual))
            .or_insert(residual);
        states = new_states;
        if cycling {
            // each repeated cycle gets a longer projected-gradient phase
            for _ in 0..fallback_steps {
                projected_gradient_step(q, &mut v, &mut hv, &lo, &hi)?;
            }
            fallback_steps = (2 * fallback_steps).min(CYCLE_FALLBACK_MAX);
            states = classify_states(q, &hv);
        }
    }
    Err(SqpError::QpNonConvergence {
        iterations: settings.max_iters,
        residual: last_residual,
    })
}

fn step_bounds<H: HessianAction>(q: &QpInstance<H>) -> (Vec<f64>, Vec<f64>) {
    let u = q.base_point.values();
    let lo = u.iter().map(|x| q.bounds.lower() - x).collect();
    let hi = u.iter().map(|x| q.bounds.upper() - x).collect();
    (lo, hi)
}

fn classify_states<H: HessianAction>(q: &QpInstance<H>, hv: &GridFunction) -> Vec<PointState> {
    let u = q.base_point.values();
    let l = q.linear_term.values();
    let h = hv.values();
    let k = q.kappa;
    (0..u.len())
        .map(|i| classify_point(-(h[i] + l[i] - k * u[i]) / k, &q.bounds, 0.0))
        .collect()
}

struct CgSolution {
    x: GridFunction,
    hx: GridFunction,
    iterations: usize,
}

/// CG for `(κ + H)_II x = b` in the μ-inner product, starting from zero.
/// Returns `x` (supported on the free set) and the full vector `Hx`.
fn cg_on_free_set<H: HessianAction>(
    h: &mut H,
    kappa: f64,
    free: &[bool],
    b: &GridFunction,
    tol: f64,
    max_iters: usize,
) -> Result<CgSolution> {
    let space = b.space().clone();
    let mut x = GridFunction::zeros(&space);
    let mut hx = GridFunction::zeros(&space);
    let mut r = b.clone();
    let b_norm = weighted_inner(b, b)?.sqrt();
    if b_norm == 0.0 {
        return Ok(CgSolution { x, hx, iterations: 0 });
    }
    let mut p = r.clone();
    let mut rr = b_norm * b_norm;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let hp = h.apply(&p)?;
        let mut ap = hp.clone();
        for (i, a) in ap.values_mut().iter_mut().enumerate() {
            *a = if free[i] { *a + kappa * p.values()[i] } else { 0.0 };
        }
        let pap = weighted_inner(&p, &ap)?;
        let pp = weighted_inner(&p, &p)?;
        if !(pap > 0.0) {
            return Err(SqpError::Indefinite {
                curvature: pap / pp,
            });
        }
        let alpha = rr / pap;
        x.axpy(alpha, &p)?;
        hx.axpy(alpha, &hp)?;
        r.axpy(-alpha, &ap)?;
        let rr_new = weighted_inner(&r, &r)?;
        if rr_new.sqrt() <= tol * b_norm {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        p = GridFunction::lincomb(1.0, &r, beta, &p)?;
    }
    Ok(CgSolution { x, hx, iterations })
}

/// One projected-gradient step with backtracking on the QP objective.
fn projected_gradient_step<H: HessianAction>(
    q: &mut QpInstance<H>,
    v: &mut GridFunction,
    hv: &mut GridFunction,
    lo: &[f64],
    hi: &[f64],
) -> Result<()> {
    let f0 = objective_with(q, v, hv);
    let grad = {
        let mut g = GridFunction::lincomb(q.kappa, v, 1.0, hv)?;
        g.axpy(1.0, &q.linear_term)?;
        g
    };
    let mut step = 1.0 / estimate_curvature(q, v, hv);
    for _ in 0..60 {
        let mut trial = GridFunction::lincomb(1.0, v, -step, &grad)?;
        for (i, x) in trial.values_mut().iter_mut().enumerate() {
            *x = x.max(lo[i]).min(hi[i]);
        }
        let d = trial.sub(v)?;
        let h_trial = q.hessian.apply(&trial)?;
        let f1 = objective_with(q, &trial, &h_trial);
        let model = f0 + weighted_inner(&grad, &d)? + weighted_inner(&d, &d)? / (2.0 * step);
        if f1 <= model + 1e-14 * f0.abs().max(1.0) {
            *v = trial;
            *hv = h_trial;
            return Ok(());
        }
        step *= 0.5;
    }
    Ok(())
}

/// Crude upper curvature guess `κ + ‖Hv‖/‖v‖` (refined by backtracking).
fn estimate_curvature<H>(q: &QpInstance<H>, v: &GridFunction, hv: &GridFunction) -> f64 {
    let nv = v.norm_l2();
    let est = if nv > 0.0 { hv.norm_l2() / nv } else { 0.0 };
    q.kappa + est
}

/// Projected gradient method with backtracking, stopped on the same
/// fixed-point residual as [`solve_ssn`]. Independent of the active-set logic.
pub fn solve_projected_gradient<H: HessianAction>(
    q: &mut QpInstance<H>,
    tol: f64,
    max_iters: usize,
) -> Result<GridFunction> {
    let (lo, hi) = step_bounds(q);
    let mut v = GridFunction::zeros(q.space());
    for (i, x) in v.values_mut().iter_mut().enumerate() {
        *x = x.max(lo[i]).min(hi[i]);
    }
    let mut hv = q.hessian.apply(&v)?;
    let lipschitz = power_iteration(q, 50)? * 1.05;
    let mut step = 1.0 / lipschitz;
    let mut residual = q.residual_with(&v, &hv);
    for _ in 0..max_iters {
        if residual <= tol {
            return Ok(v);
        }
        let f0 = objective_with(q, &v, &hv);
        let mut grad = GridFunction::lincomb(q.kappa, &v, 1.0, &hv)?;
        grad.axpy(1.0, &q.linear_term)?;
        loop {
            let mut trial = GridFunction::lincomb(1.0, &v, -step, &grad)?;
            for (i, x) in trial.values_mut().iter_mut().enumerate() {
                *x = x.max(lo[i]).min(hi[i]);
            }
            let d = trial.sub(&v)?;
            let h_trial = q.hessian.apply(&trial)?;
            let f1 = objective_with(q, &trial, &h_trial);
            let model = f0 + weighted_inner(&grad, &d)? + weighted_inner(&d, &d)? / (2.0 * step);
            if f1 <= model + 1e-15 * f0.abs().max(1.0) || step < 1e-300 {
                v = trial;
                hv = h_trial;
                break;
            }
            step *= 0.5;
        }
        residual = q.residual_with(&v, &hv);
    }
    if residual <= tol {
        return Ok(v);
    }
    Err(SqpError::QpNonConvergence {
        iterations: max_iters,
        residual,
    })
}

/// Largest eigenvalue estimate of `κ + H` in the μ-inner product.
fn power_iteration<H: HessianAction>(q: &mut QpInstance<H>, iters: usize) -> Result<f64> {
    let n = q.base_point.len();
    let mut x = GridFunction::from_fn(q.space(), |i| 1.0 + ((i * 7919) % 13) as f64 / 13.0);
    let mut lambda = q.kappa;
    for _ in 0..iters {
        let nx = x.norm_l2();
        if nx == 0.0 || n == 0 {
            break;
        }
        x.scale(1.0 / nx);
        let mut ax = q.hessian.apply(&x)?;
        ax.axpy(q.kappa, &x)?;
        lambda = weighted_inner(&ax, &x)?.abs().max(lambda);
        x = ax;
    }
    Ok(lambda)
}
