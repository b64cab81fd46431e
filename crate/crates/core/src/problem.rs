//! The abstract problem interface and generic derivative diagnostics.
//!
//! A problem is `min 𝒥(u) + (κ/2)‖u‖²` over a box, where the smooth part `𝒥`
//! is reached only through a [`ProblemOracle`]: its value, the representative
//! `Φ(u)` of `𝒥'(u)` in the μ-weighted pairing, and the action `v ↦ Φ'(u)v`.

use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::measure::{project_box, weighted_inner, BoxBounds, GridFunction, MeasureSpace};

/// Access to the smooth part of the objective.
///
/// Implementations may cache state and adjoint data for the most recently
/// seen control, so all methods take `&mut self`.
pub trait ProblemOracle {
    fn control_space(&self) -> &Arc<MeasureSpace>;

    fn bounds(&self) -> BoxBounds;

    /// `𝒥(u)`.
    fn objective(&mut self, u: &GridFunction) -> Result<f64>;

    /// `Φ(u)`, so that `𝒥'(u)v = ⟨Φ(u), v⟩_μ`.
    fn phi(&mut self, u: &GridFunction) -> Result<GridFunction>;

    /// `Φ'(u)v`.
    fn apply_phi_prime(&mut self, u: &GridFunction, v: &GridFunction) -> Result<GridFunction>;

    /// Rejects controls outside the oracle's domain. The default accepts all.
    fn check_admissible(&self, u: &GridFunction) -> Result<()> {
        let _ = u;
        Ok(())
    }
}

impl<O: ProblemOracle + ?Sized> ProblemOracle for &mut O {
    fn control_space(&self) -> &Arc<MeasureSpace> {
        (**self).control_space()
    }
    fn bounds(&self) -> BoxBounds {
        (**self).bounds()
    }
    fn objective(&mut self, u: &GridFunction) -> Result<f64> {
        (**self).objective(u)
    }
    fn phi(&mut self, u: &GridFunction) -> Result<GridFunction> {
        (**self).phi(u)
    }
    fn apply_phi_prime(&mut self, u: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        (**self).apply_phi_prime(u, v)
    }
    fn check_admissible(&self, u: &GridFunction) -> Result<()> {
        (**self).check_admissible(u)
    }
}

/// Extension used by the Lagrange–Newton baseline, where state and adjoint
/// are carried as independent iterates and only linear problems are solved.
///
/// After [`linearize`](Self::linearize) at `(u, primal)` the oracle represents
/// the control-reduced quadratic model of the Lagrangian: its gradient part
/// [`linearized_phi`](Self::linearized_phi) and Hessian action
/// [`apply_linearized_hessian`](Self::apply_linearized_hessian), both in the
/// same μ-pairing as `Φ` and `Φ'`.
pub trait LagrangeNewtonOracle: ProblemOracle {
    /// State/adjoint pair.
    type Primal: Clone;

    fn zero_primal(&self) -> Self::Primal;

    /// `(y_u, φ_u)` from a nonlinear state solve and an adjoint solve.
    fn solved_primal(&mut self, u: &GridFunction) -> Result<Self::Primal>;

    fn linearize(&mut self, u: &GridFunction, primal: &Self::Primal) -> Result<()>;

    fn linearized_phi(&mut self) -> Result<GridFunction>;

    fn apply_linearized_hessian(&mut self, v: &GridFunction) -> Result<GridFunction>;

    /// New state/adjoint after the control step `v` of the current model.
    fn advance(&mut self, v: &GridFunction) -> Result<Self::Primal>;

    /// `𝒥` evaluated at the state carried in `primal` (and at `u` for terms
    /// that depend on the control directly).
    fn primal_objective(&mut self, u: &GridFunction, primal: &Self::Primal) -> Result<f64>;

    /// Max-norm residual of the (nonlinear) state equation at `(u, primal)`.
    fn state_residual(&mut self, u: &GridFunction, primal: &Self::Primal) -> Result<f64>;
}

/// Regularization weight and constant starting control shipped with a
/// benchmark instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceDefaults {
    pub kappa: f64,
    pub initial_control: f64,
}

/// Outer iteration variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Control-reduced SQP: one nonlinear state solve per iteration.
    SqpNln,
    /// Lagrange–Newton: state, adjoint and control updated jointly.
    SqpLin,
}

impl std::str::FromStr for Method {
    type Err = SqpError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqpnln" | "nln" => Ok(Method::SqpNln),
            "sqplin" | "lin" => Ok(Method::SqpLin),
            other => Err(SqpError::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::SqpNln => "sqpnln",
            Method::SqpLin => "sqplin",
        })
    }
}

/// Solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SqpConfig {
    /// Tikhonov weight κ.
    pub kappa: f64,
    /// Outer stopping tolerance on the max-norm change between iterates.
    pub stop_tol: f64,
    pub max_outer_iters: usize,
    /// Fixed-point residual tolerance for the QP subproblems.
    pub qp_tol: f64,
    pub qp_max_iters: usize,
    /// Relative residual tolerance of the inner conjugate gradient solves.
    pub cg_tol: f64,
    /// `None` means ten times the current free-point count.
    pub cg_max_iters: Option<usize>,
    pub method: Method,
}

impl SqpConfig {
    pub fn new(kappa: f64) -> Self {
        Self {
            kappa,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(SqpError::InvalidConfig(format!("{name} must be positive, got {x}")))
            }
        };
        positive("kappa", self.kappa)?;
        positive("stop_tol", self.stop_tol)?;
        positive("qp_tol", self.qp_tol)?;
        positive("cg_tol", self.cg_tol)?;
        if self.max_outer_iters == 0 || self.qp_max_iters == 0 || self.cg_max_iters == Some(0) {
            return Err(SqpError::InvalidConfig("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SqpConfig {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            stop_tol: 5e-13,
            max_outer_iters: 50,
            qp_tol: 1e-10,
            qp_max_iters: 100,
            cg_tol: 1e-12,
            cg_max_iters: None,
            method: Method::SqpNln,
        }
    }
}

/// `J(u) = 𝒥(u) + (κ/2)‖u‖²`.
pub struct FullObjective<O> {
    pub oracle: O,
    pub kappa: f64,
}

impl<O: ProblemOracle> FullObjective<O> {
    pub fn new(oracle: O, kappa: f64) -> Self {
        Self { oracle, kappa }
    }

    pub fn value(&mut self, u: &GridFunction) -> Result<f64> {
        let smooth = self.oracle.objective(u)?;
        Ok(smooth + 0.5 * self.kappa * weighted_inner(u, u)?)
    }

    pub fn gradient(&mut self, u: &GridFunction) -> Result<GridFunction> {
        gradient(&mut self.oracle, self.kappa, u)
    }

    /// Central-difference check of `J` against `⟨F(u), v⟩`.
    pub fn fd_gradient_check(
        &mut self,
        u: &GridFunction,
        v: &GridFunction,
        steps: &[f64],
    ) -> Result<Vec<(f64, f64)>> {
        u.check_same_space(v)?;
        self.oracle.check_admissible(u)?;
        let g = self.gradient(u)?;
        let exact = weighted_inner(&g, v)?;
        let mut out = Vec::with_capacity(steps.len());
        for &h in steps {
            let (plus, minus) = perturbed(u, v, h)?;
            self.oracle.check_admissible(&plus)?;
            self.oracle.check_admissible(&minus)?;
            let fd = (self.value(&plus)? - self.value(&minus)?) / (2.0 * h);
            out.push((h, (fd - exact).abs()));
        }
        Ok(out)
    }
}

/// `F(u) = Φ(u) + κu`.
pub fn gradient<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    kappa: f64,
    u: &GridFunction,
) -> Result<GridFunction> {
    let mut g = oracle.phi(u)?;
    g.axpy(kappa, u)?;
    Ok(g)
}

/// `‖u − Proj[α,β](−Φ(u)/κ)‖_∞`; zero exactly at stationary points.
pub fn kkt_residual<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    kappa: f64,
    u: &GridFunction,
) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(SqpError::InvalidConfig(format!("kappa must be positive, got {kappa}")));
    }
    let phi = oracle.phi(u)?;
    let target = project_box(&phi.scaled(-1.0 / kappa), &oracle.bounds());
    Ok(u.sub(&target)?.norm_inf())
}

fn perturbed(u: &GridFunction, v: &GridFunction, h: f64) -> Result<(GridFunction, GridFunction)> {
    if !(h > 0.0) {
        return Err(SqpError::Domain(format!("finite-difference step {h} must be positive")));
    }
    Ok((
        GridFunction::lincomb(1.0, u, h, v)?,
        GridFunction::lincomb(1.0, u, -h, v)?,
    ))
}

/// Errors `|(𝒥(u+hv) − 𝒥(u−hv))/(2h) − ⟨Φ(u), v⟩|` for each step `h`.
pub fn fd_gradient_check<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    u: &GridFunction,
    v: &GridFunction,
    steps: &[f64],
) -> Result<Vec<(f64, f64)>> {
    oracle.check_admissible(u)?;
    let phi = oracle.phi(u)?;
    let exact = weighted_inner(&phi, v)?;
    let mut results = Vec::with_capacity(steps.len());
    for &h in steps {
        let (plus, minus) = perturbed(u, v, h)?;
        oracle.check_admissible(&plus)?;
        oracle.check_admissible(&minus)?;
        let fp = oracle.objective(&plus)?;
        let fm = oracle.objective(&minus)?;
        results.push((h, ((fp - fm) / (2.0 * h) - exact).abs()));
    }
    Ok(results)
}

/// Errors `|⟨Φ(u+hw) − Φ(u−hw), v⟩/(2h) − ⟨Φ'(u)w, v⟩|` for each step `h`.
pub fn fd_hessian_check<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    u: &GridFunction,
    v: &GridFunction,
    w: &GridFunction,
    steps: &[f64],
) -> Result<Vec<(f64, f64)>> {
    oracle.check_admissible(u)?;
    let hw = oracle.apply_phi_prime(u, w)?;
    let exact = weighted_inner(&hw, v)?;
    let mut results = Vec::with_capacity(steps.len());
    for &h in steps {
        let (plus, minus) = perturbed(u, w, h)?;
        oracle.check_admissible(&plus)?;
        oracle.check_admissible(&minus)?;
        let pp = oracle.phi(&plus)?;
        let pm = oracle.phi(&minus)?;
        let fd = weighted_inner(&pp.sub(&pm)?, v)? / (2.0 * h);
        results.push((h, (fd - exact).abs()));
    }
    Ok(results)
}

/// `|⟨Φ'(u)v, w⟩ − ⟨Φ'(u)w, v⟩|`.
pub fn symmetry_defect<O: ProblemOracle + ?Sized>(
    oracle: &mut O,
    u: &GridFunction,
    v: &GridFunction,
    w: &GridFunction,
) -> Result<f64> {
    let hv = oracle.apply_phi_prime(u, v)?;
    let hw = oracle.apply_phi_prime(u, w)?;
    Ok((weighted_inner(&hv, w)? - weighted_inner(&hw, v)?).abs())
}

/// Ratios `e(h_k) / e(h_{k+1})` between successive finite-difference errors.
pub fn successive_ratios(errors: &[(f64, f64)]) -> Vec<f64> {
    errors.windows(2).map(|p| p[0].1 / p[1].1).collect()
}
