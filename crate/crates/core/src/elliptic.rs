//! Semilinear elliptic distributed control with homogeneous Dirichlet
//! conditions:
//!
//! ```text
//!   min ∫_Ω L(x, y) dx + (κ/2)‖u‖²   s.t.  −Δy + f(x, y) = χ_ω u,  y = 0 on ∂Ω,
//! ```
//!
//! discretized with continuous P1 states and piecewise constant controls on
//! the elements of `ω`. Nonlinear terms use a quadrature rule exact for cubics.
//! The discrete derivatives are exact derivatives of the discrete objective.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::exec;
use crate::fem::{EnvelopeLdl, P1Space, SimplexMesh, SparseMatrix};
use crate::measure::{classify_point, BoxBounds, GridFunction, MeasureSpace, PointState};
use crate::problem::{InstanceDefaults, LagrangeNewtonOracle, ProblemOracle};

/// A function of a point and a state value.
pub type PointFn = Arc<dyn Fn([f64; 3], f64) -> f64 + Send + Sync>;

pub fn point_fn(f: impl Fn([f64; 3], f64) -> f64 + Send + Sync + 'static) -> PointFn {
    Arc::new(f)
}

/// Nonlinearity `f` and objective integrand `L` with their first two
/// `y`-derivatives. `∂f/∂y ≥ 0` is assumed.
#[derive(Clone)]
pub struct EllipticData {
    pub f: PointFn,
    pub f_y: PointFn,
    pub f_yy: PointFn,
    pub l: PointFn,
    pub l_y: PointFn,
    pub l_yy: PointFn,
    /// Control-space term `e`, adding `⟨e, u⟩_μ` to the objective and `e`
    /// to `Φ`.
    pub control_shift: Option<Vec<f64>>,
}

impl fmt::Debug for EllipticData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticData")
            .field("control_shift", &self.control_shift.as_ref().map(Vec::len))
            .finish_non_exhaustive()
    }
}

impl EllipticData {
    /// `f(y) = c·y` (or `f ≡ 0` for `c = 0`) with tracking `L = ½(y − y_d)²`.
    pub fn linear_tracking(c: f64, target: impl Fn([f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        let t = Arc::new(target);
        let (t1, t2) = (t.clone(), t);
        Self {
            f: point_fn(move |_, y| c * y),
            f_y: point_fn(move |_, _| c),
            f_yy: point_fn(|_, _| 0.0),
            l: point_fn(move |x, y| 0.5 * (y - t1(x)).powi(2)),
            l_y: point_fn(move |x, y| y - t2(x)),
            l_yy: point_fn(|_, _| 1.0),
            control_shift: None,
        }
    }

    /// `f(y) = e^y` with tracking `L = ½(y − y_d)²`.
    pub fn exponential_tracking(target: impl Fn([f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        let t = Arc::new(target);
        let (t1, t2) = (t.clone(), t);
        Self {
            f: point_fn(|_, y| y.exp()),
            f_y: point_fn(|_, y| y.exp()),
            f_yy: point_fn(|_, y| y.exp()),
            l: point_fn(move |x, y| 0.5 * (y - t1(x)).powi(2)),
            l_y: point_fn(move |x, y| y - t2(x)),
            l_yy: point_fn(|_, _| 1.0),
            control_shift: None,
        }
    }
}

/// `Π_i 8x_i(1 − x_i)` over the first `dim` coordinates.
pub fn bubble(dim: usize) -> impl Fn([f64; 3]) -> f64 + Send + Sync + Clone + 'static {
    move |x: [f64; 3]| x[..dim].iter().map(|t| 8.0 * t * (1.0 - t)).product()
}

/// Uniform simplicial mesh of the unit cube together with the control region.
#[derive(Debug, Clone)]
pub struct EllipticMesh {
    fe: Arc<P1Space>,
    control_elements: Vec<usize>,
}

impl EllipticMesh {
    /// Mesh with `2^refinement` cells per side; the control acts everywhere.
    pub fn unit_cube(dim: usize, refinement: u32) -> Result<Self> {
        let mesh = Arc::new(SimplexMesh::unit_cube(dim, refinement)?);
        let ne = mesh.element_count();
        Ok(Self {
            fe: Arc::new(P1Space::new(mesh)),
            control_elements: (0..ne).collect(),
        })
    }

    /// Restricts the control to the given elements.
    pub fn with_control_region(mut self, mut elements: Vec<usize>) -> Result<Self> {
        elements.sort_unstable();
        elements.dedup();
        let ne = self.fe.mesh().element_count();
        if elements.is_empty() || elements.last().is_some_and(|&e| e >= ne) {
            return Err(SqpError::Setup("control region must be a nonempty set of mesh elements".into()));
        }
        self.control_elements = elements;
        Ok(self)
    }

    /// Restricts the control to elements whose centroid satisfies `inside`.
    pub fn with_control_predicate(self, inside: impl Fn([f64; 3]) -> bool) -> Result<Self> {
        let mesh = self.fe.mesh();
        let k = mesh.dim() + 1;
        let bary = vec![1.0 / k as f64; k];
        let elements = (0..mesh.element_count()).filter(|&e| inside(mesh.map_point(e, &bary))).collect();
        self.with_control_region(elements)
    }

    pub fn fe(&self) -> &P1Space {
        &self.fe
    }

    pub fn mesh(&self) -> &SimplexMesh {
        self.fe.mesh()
    }

    pub fn control_elements(&self) -> &[usize] {
        &self.control_elements
    }
}

/// Newton settings for the state equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Residual tolerance relative to the size of the terms of the equation.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 50,
        }
    }
}

/// Solved discrete state with the factorized linearized operator at it.
#[derive(Debug, Clone)]
pub struct EllipticState {
    /// Nodal values; zero on the boundary.
    pub y: Vec<f64>,
    pub newton_iterations: usize,
    /// Max-norm residual of the discrete equation.
    pub residual: f64,
    factor: Arc<EnvelopeLdl>,
}

impl EllipticState {
    /// `LDLᵀ` factors of `K + M(∂f/∂y(y))` with Dirichlet rows eliminated.
    pub fn factor(&self) -> &EnvelopeLdl {
        &self.factor
    }
}

#[derive(Debug, Clone)]
struct Cached {
    u: Vec<f64>,
    state: EllipticState,
    adjoint: Vec<f64>,
    /// `∫ (∂²L/∂y² − φ ∂²f/∂y²) φ_i φ_j`.
    hessian_weight: SparseMatrix,
}

/// State/adjoint pair iterated by the Lagrange–Newton method.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipticPrimal {
    pub y: Vec<f64>,
    pub p: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Linearization {
    y: Vec<f64>,
    factor: EnvelopeLdl,
    hessian_weight: SparseMatrix,
    dy0: Vec<f64>,
    lambda: Vec<f64>,
}

/// The discretized elliptic control problem as a [`ProblemOracle`].
#[derive(Debug, Clone)]
pub struct EllipticProblem {
    mesh: EllipticMesh,
    data: EllipticData,
    bounds: BoxBounds,
    space: Arc<MeasureSpace>,
    newton: NewtonSettings,
    cache: Option<Cached>,
    linearization: Option<Linearization>,
}

impl EllipticProblem {
    pub fn new(mesh: EllipticMesh, data: EllipticData, bounds: BoxBounds) -> Result<Self> {
        let vols = mesh.mesh().volumes();
        let weights = mesh.control_elements.iter().map(|&e| vols[e]).collect();
        let space = MeasureSpace::new(weights)?;
        if let Some(shift) = &data.control_shift {
            if shift.len() != space.point_count() {
                return Err(SqpError::DimensionMismatch {
                    expected: space.point_count(),
                    found: shift.len(),
                });
            }
        }
        Ok(Self {
            mesh,
            data,
            bounds,
            space,
            newton: NewtonSettings::default(),
            cache: None,
            linearization: None,
        })
    }

    /// `f = e^y`, `L = ½(y − Π 8x_i(1 − x_i))²`, bounds `[0.1, 1]`,
    /// `κ = 0.1`, starting control `0.55`.
    pub fn exponential_benchmark(dim: usize, refinement: u32) -> Result<(Self, InstanceDefaults)> {
        let mesh = EllipticMesh::unit_cube(dim, refinement)?;
        let data = EllipticData::exponential_tracking(bubble(dim));
        let p = Self::new(mesh, data, BoxBounds::l2(0.1, 1.0)?)?;
        Ok((
            p,
            InstanceDefaults {
                kappa: 0.1,
                initial_control: 0.55,
            },
        ))
    }

    pub fn with_newton_settings(mut self, s: NewtonSettings) -> Self {
        self.newton = s;
        self
    }

    pub fn mesh(&self) -> &EllipticMesh {
        &self.mesh
    }

    pub fn data(&self) -> &EllipticData {
        &self.data
    }

    fn fe(&self) -> &P1Space {
        self.mesh.fe()
    }

    /// Values of `g(x, y_h(x))` at every quadrature point.
    fn at_qp(&self, y: &[f64], g: &PointFn) -> Vec<f64> {
        let fe = self.fe();
        let yq = fe.values_at_qp(y);
        let nq = fe.qp_per_element();
        exec::map_indexed(yq.len(), |i| g(fe.qp_coord(i / nq, i % nq), yq[i]))
    }

    /// `∫ g(x, y) φ_i` with boundary entries dropped.
    fn load_of(&self, y: &[f64], g: &PointFn) -> Vec<f64> {
        let mut b = self.fe().load(&self.at_qp(y, g));
        self.zero_boundary(&mut b);
        b
    }

    fn zero_boundary(&self, v: &mut [f64]) {
        for (x, &bnd) in v.iter_mut().zip(self.mesh.mesh().boundary_mask()) {
            if bnd {
                *x = 0.0;
            }
        }
    }

    /// `(Bu)_i = ∫_ω u φ_i` for piecewise constant `u`.
    pub fn control_load(&self, u: &[f64]) -> Vec<f64> {
        let mesh = self.mesh.mesh();
        let k = (mesh.dim() + 1) as f64;
        let mut b = vec![0.0; mesh.node_count()];
        for (&e, &ue) in self.mesh.control_elements.iter().zip(u) {
            let share = ue * mesh.volume(e) / k;
            for &n in mesh.element(e) {
                b[n] += share;
            }
        }
        b
    }

    /// Mean of the nodal values over each control element, i.e. `Bᵀp / |e|`.
    pub fn element_average(&self, nodal: &[f64]) -> Vec<f64> {
        let mesh = self.mesh.mesh();
        let k = (mesh.dim() + 1) as f64;
        self.mesh
            .control_elements
            .iter()
            .map(|&e| mesh.element(e).iter().map(|&n| nodal[n]).sum::<f64>() / k)
            .collect()
    }

    /// Residual `Ky + F(y) − Bu` on interior nodes and `y` on boundary nodes,
    /// with the size of the largest term for scaling.
    pub fn state_equation_residual(&self, u: &[f64], y: &[f64]) -> (Vec<f64>, f64) {
        let fe = self.fe();
        let ky = fe.stiffness().matvec(y);
        let fy = fe.load(&self.at_qp(y, &self.data.f));
        let bu = self.control_load(u);
        let mask = self.mesh.mesh().boundary_mask();
        let mut scale = 0.0f64;
        let r = (0..y.len())
            .map(|i| {
                if mask[i] {
                    y[i]
                } else {
                    scale = scale.max(ky[i].abs()).max(fy[i].abs()).max(bu[i].abs());
                    ky[i] + fy[i] - bu[i]
                }
            })
            .collect();
        (r, scale)
    }

    /// `K + M(∂f/∂y(y))` with Dirichlet rows and columns replaced by identity.
    fn jacobian(&self, y: &[f64]) -> SparseMatrix {
        let fe = self.fe();
        let mut j = fe.weighted_mass(&self.at_qp(y, &self.data.f_y));
        j.axpy(1.0, fe.stiffness());
        j.constrain(self.mesh.mesh().boundary_mask());
        j
    }

    /// Newton's method for the state equation, started from `warm_start` (or
    /// zero).
    pub fn solve_state(&self, u: &GridFunction, warm_start: Option<&[f64]>) -> Result<EllipticState> {
        u.check_same_space(&GridFunction::zeros(&self.space))?;
        let n = self.fe().node_count();
        let mut y = match warm_start {
            Some(w) if w.len() == n => w.to_vec(),
            Some(w) => return Err(SqpError::DimensionMismatch { expected: n, found: w.len() }),
            None => vec![0.0; n],
        };
        self.zero_boundary(&mut y);
        let tol = self.newton.tol;
        let mut last = f64::INFINITY;
        for it in 0..=self.newton.max_iters {
            let (r, scale) = self.state_equation_residual(u.values(), &y);
            let res = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !res.is_finite() {
                break;
            }
            last = res;
            let factor = EnvelopeLdl::factor(&self.jacobian(&y))?;
            if res <= tol * scale.max(f64::MIN_POSITIVE) || res == 0.0 {
                return Ok(EllipticState {
                    y,
                    newton_iterations: it,
                    residual: res,
                    factor: Arc::new(factor),
                });
            }
            if it == self.newton.max_iters {
                break;
            }
            let mut d = r;
            factor.solve_in_place(&mut d);
            let ynorm = y.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let dnorm = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (yi, di) in y.iter_mut().zip(&d) {
                *yi -= di;
            }
            // round-off floor: the update no longer changes y
            if dnorm <= 4.0 * f64::EPSILON * ynorm.max(1.0) && res <= 1e3 * tol * scale {
                let (r, _) = self.state_equation_residual(u.values(), &y);
                let res = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                let factor = EnvelopeLdl::factor(&self.jacobian(&y))?;
                return Ok(EllipticState {
                    y,
                    newton_iterations: it + 1,
                    residual: res,
                    factor: Arc::new(factor),
                });
            }
        }
        Err(SqpError::StateSolve {
            step: None,
            iterations: self.newton.max_iters,
            residual: last,
        })
    }

    /// Adjoint state: `(K + M(∂f/∂y(y)))φ = ∫ ∂L/∂y(x, y) φ_i`, zero on the
    /// boundary.
    pub fn solve_adjoint(&self, state: &EllipticState) -> Result<Vec<f64>> {
        let rhs = self.load_of(&state.y, &self.data.l_y);
        let p = state.factor.solve(&rhs);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(SqpError::LinearAlgebra("non-finite adjoint".into()));
        }
        Ok(p)
    }

    fn hessian_weight(&self, y: &[f64], p: &[f64]) -> SparseMatrix {
        let fe = self.fe();
        let yq = fe.values_at_qp(y);
        let pq = fe.values_at_qp(p);
        let nq = fe.qp_per_element();
        let (l_yy, f_yy) = (&self.data.l_yy, &self.data.f_yy);
        let c = exec::map_indexed(yq.len(), |i| {
            let x = fe.qp_coord(i / nq, i % nq);
            l_yy(x, yq[i]) - pq[i] * f_yy(x, yq[i])
        });
        fe.weighted_mass(&c)
    }

    fn ensure(&mut self, u: &GridFunction) -> Result<&Cached> {
        u.check_same_space(&GridFunction::zeros(&self.space))?;
        let hit = self.cache.as_ref().is_some_and(|c| c.u == u.values());
        if !hit {
            let warm = self.cache.as_ref().map(|c| c.state.y.clone());
            let state = self.solve_state(u, warm.as_deref())?;
            let adjoint = self.solve_adjoint(&state)?;
            let hessian_weight = self.hessian_weight(&state.y, &adjoint);
            self.cache = Some(Cached {
                u: u.values().to_vec(),
                state,
                adjoint,
                hessian_weight,
            });
        }
        Ok(self.cache.as_ref().expect("cache filled"))
    }

    /// State and adjoint at `u` (cached).
    pub fn state_and_adjoint(&mut self, u: &GridFunction) -> Result<(EllipticState, Vec<f64>)> {
        let c = self.ensure(u)?;
        Ok((c.state.clone(), c.adjoint.clone()))
    }

    fn shift_term(&self, u: &GridFunction) -> f64 {
        match &self.data.control_shift {
            Some(e) => e
                .iter()
                .zip(u.values())
                .zip(self.space.weights())
                .map(|((a, b), w)| a * b * w)
                .sum(),
            None => 0.0,
        }
    }

    fn with_shift(&self, mut phi: Vec<f64>) -> Result<GridFunction> {
        if let Some(e) = &self.data.control_shift {
            for (p, s) in phi.iter_mut().zip(e) {
                *p += s;
            }
        }
        GridFunction::new(self.space.clone(), phi)
    }

    fn tracking(&self, y: &[f64]) -> f64 {
        self.fe().integrate(&self.at_qp(y, &self.data.l))
    }

    /// `v ↦ A⁻¹ W A⁻¹ B v` followed by element averaging, plus the
    /// intermediate `A⁻¹Bv`.
    fn second_order(
        &self,
        factor: &EnvelopeLdl,
        weight: &SparseMatrix,
        v: &GridFunction,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.control_load(v.values());
        self.zero_boundary(&mut z);
        factor.solve_in_place(&mut z);
        let mut eta = weight.matvec(&z);
        self.zero_boundary(&mut eta);
        factor.solve_in_place(&mut eta);
        (z, eta)
    }
}

impl ProblemOracle for EllipticProblem {
    fn control_space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }

    fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    fn objective(&mut self, u: &GridFunction) -> Result<f64> {
        let y = self.ensure(u)?.state.y.clone();
        Ok(self.tracking(&y) + self.shift_term(u))
    }

    fn phi(&mut self, u: &GridFunction) -> Result<GridFunction> {
        let p = self.ensure(u)?.adjoint.clone();
        self.with_shift(self.element_average(&p))
    }

    fn apply_phi_prime(&mut self, u: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        v.check_same_space(&GridFunction::zeros(&self.space))?;
        self.ensure(u)?;
        let c = self.cache.as_ref().expect("cache filled");
        let (_, eta) = self.second_order(&c.state.factor, &c.hessian_weight, v);
        GridFunction::new(self.space.clone(), self.element_average(&eta))
    }
}

impl LagrangeNewtonOracle for EllipticProblem {
    type Primal = EllipticPrimal;

    fn zero_primal(&self) -> EllipticPrimal {
        let n = self.fe().node_count();
        EllipticPrimal {
            y: vec![0.0; n],
            p: vec![0.0; n],
        }
    }

    fn solved_primal(&mut self, u: &GridFunction) -> Result<EllipticPrimal> {
        let (state, p) = self.state_and_adjoint(u)?;
        Ok(EllipticPrimal { y: state.y, p })
    }

    fn linearize(&mut self, u: &GridFunction, primal: &EllipticPrimal) -> Result<()> {
        u.check_same_space(&GridFunction::zeros(&self.space))?;
        let factor = EnvelopeLdl::factor(&self.jacobian(&primal.y))?;
        let (r, _) = self.state_equation_residual(u.values(), &primal.y);
        let mut dy0 = factor.solve(&r);
        dy0.iter_mut().for_each(|x| *x = -*x);
        let hessian_weight = self.hessian_weight(&primal.y, &primal.p);
        let mut rhs = self.load_of(&primal.y, &self.data.l_y);
        let w_dy0 = hessian_weight.matvec(&dy0);
        for (a, b) in rhs.iter_mut().zip(&w_dy0) {
            *a += b;
        }
        self.zero_boundary(&mut rhs);
        let lambda = factor.solve(&rhs);
        self.linearization = Some(Linearization {
            y: primal.y.clone(),
            factor,
            hessian_weight,
            dy0,
            lambda,
        });
        Ok(())
    }

    fn linearized_phi(&mut self) -> Result<GridFunction> {
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        self.with_shift(self.element_average(&lin.lambda))
    }

    fn apply_linearized_hessian(&mut self, v: &GridFunction) -> Result<GridFunction> {
        v.check_same_space(&GridFunction::zeros(&self.space))?;
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        let (_, eta) = self.second_order(&lin.factor, &lin.hessian_weight, v);
        GridFunction::new(self.space.clone(), self.element_average(&eta))
    }

    fn advance(&mut self, v: &GridFunction) -> Result<EllipticPrimal> {
        v.check_same_space(&GridFunction::zeros(&self.space))?;
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        let (z, eta) = self.second_order(&lin.factor, &lin.hessian_weight, v);
        let y = (0..z.len()).map(|i| lin.y[i] + lin.dy0[i] + z[i]).collect();
        let p = lin.lambda.iter().zip(&eta).map(|(a, b)| a + b).collect();
        Ok(EllipticPrimal { y, p })
    }

    fn primal_objective(&mut self, u: &GridFunction, primal: &EllipticPrimal) -> Result<f64> {
        Ok(self.tracking(&primal.y) + self.shift_term(u))
    }

    fn state_residual(&mut self, u: &GridFunction, primal: &EllipticPrimal) -> Result<f64> {
        let (r, _) = self.state_equation_residual(u.values(), &primal.y);
        Ok(r.iter().fold(0.0f64, |m, x| m.max(x.abs())))
    }
}

fn not_linearized() -> SqpError {
    SqpError::Setup("linearize must be called first".into())
}

/// Returns a copy of `problem` with a control-space shift `e` chosen so that
/// `target` satisfies the projection formula `u = Proj(−(Φ(u) + e)/κ)`:
/// the full gradient `κu + Φ(u) + e` vanishes on free points and equals
/// `+margin` on lower-active and `−margin` on upper-active points.
pub fn manufacture_instance(
    problem: &EllipticProblem,
    kappa: f64,
    target: &GridFunction,
    margin: f64,
) -> Result<EllipticProblem> {
    if !(kappa > 0.0) {
        return Err(SqpError::InvalidConfig(format!("kappa must be positive, got {kappa}")));
    }
    if !(margin > 0.0) {
        return Err(SqpError::Setup(
            "margin must be positive; a zero margin makes every active point biactive".into(),
        ));
    }
    let b = problem.bounds;
    if target.values().iter().any(|x| !b.contains(*x)) {
        return Err(SqpError::InvalidBounds("target control is infeasible".into()));
    }
    let mut base = problem.clone();
    base.data.control_shift = None;
    base.cache = None;
    base.linearization = None;
    let phi0 = base.phi(target)?;
    let shift = target
        .values()
        .iter()
        .zip(phi0.values())
        .map(|(&t, &p)| {
            let g = match classify_point(t, &b, 0.0) {
                PointState::Lower => margin,
                PointState::Upper => -margin,
                PointState::Free => 0.0,
            };
            g - kappa * t - p
        })
        .collect();
    base.data.control_shift = Some(shift);
    Ok(base)
}
