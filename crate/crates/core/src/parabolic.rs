//! Semilinear parabolic equation with bilinear Robin boundary control,
//!
//! ```text
//!   ∂_t y − Δy + f(x, t, y) = 0 in Q,   ∂_n y + u y = g on Σ,   y(0) = y₀,
//!   𝒥(u) = ½‖y_u − y_d‖²_{L²(Q)},
//! ```
//!
//! discretized by P1 elements in space and implicit Euler in time. The
//! control is nodal on the boundary and constant on each time step; its
//! weights are the lumped boundary mass times the step. Every node is an
//! unknown. All formulas are exact derivatives of the discrete objective.

use std::fmt;
use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::exec;
use crate::fem::{EnvelopeLdl, P1Space, SimplexMesh, SparseMatrix};
use crate::measure::{BoxBounds, GridFunction, MeasureSpace};
use crate::problem::{InstanceDefaults, LagrangeNewtonOracle, ProblemOracle};

/// `(x, t, y) ↦ value`.
pub type StateFn = Arc<dyn Fn([f64; 3], f64, f64) -> f64 + Send + Sync>;
/// `(x, t) ↦ value`.
pub type FieldFn = Arc<dyn Fn([f64; 3], f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ParabolicData {
    pub f: StateFn,
    pub f_y: StateFn,
    pub f_yy: StateFn,
    /// Boundary source.
    pub g: FieldFn,
    pub y0: Arc<dyn Fn([f64; 3]) -> f64 + Send + Sync>,
    pub y_d: FieldFn,
}

impl fmt::Debug for ParabolicData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParabolicData").finish_non_exhaustive()
    }
}

impl ParabolicData {
    /// `f = y³ − y`, `g = 1`, `y₀ = Π 8x_i(1 − x_i)`, `y_d = y₀ cos(πt)`.
    pub fn cubic_benchmark(dim: usize) -> Self {
        let y0 = crate::elliptic::bubble(dim);
        let yd = y0.clone();
        Self {
            f: Arc::new(|_, _, y| y * y * y - y),
            f_y: Arc::new(|_, _, y| 3.0 * y * y - 1.0),
            f_yy: Arc::new(|_, _, y| 6.0 * y),
            g: Arc::new(|_, _| 1.0),
            y0: Arc::new(y0),
            y_d: Arc::new(move |x, t| yd(x) * (std::f64::consts::PI * t).cos()),
        }
    }

    /// `f = c·y` with time-independent source `g` and start `y₀`; `y_d ≡ 0`.
    pub fn linear(c: f64, g: f64, y0: f64) -> Self {
        Self {
            f: Arc::new(move |_, _, y| c * y),
            f_y: Arc::new(move |_, _, _| c),
            f_yy: Arc::new(|_, _, _| 0.0),
            g: Arc::new(move |_, _| g),
            y0: Arc::new(move |_| y0),
            y_d: Arc::new(|_, _| 0.0),
        }
    }
}

/// Spatial mesh, time steps and the boundary control lattice.
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    fe: Arc<P1Space>,
    horizon: f64,
    steps: usize,
    tau: f64,
    boundary_nodes: Vec<usize>,
    /// Lumped boundary mass per boundary node.
    lumped: Vec<f64>,
}

impl SpaceTimeGrid {
    /// `2^refinement` cells per side and `2^refinement` time steps.
    pub fn unit_cube(dim: usize, refinement: u32, horizon: f64) -> Result<Self> {
        Self::with_steps(dim, refinement, horizon, 1 << refinement)
    }

    pub fn with_steps(dim: usize, refinement: u32, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || steps == 0 {
            return Err(SqpError::Setup("time horizon and step count must be positive".into()));
        }
        let mesh = Arc::new(SimplexMesh::unit_cube(dim, refinement)?);
        let lumped_all = mesh.lumped_boundary_mass();
        let boundary_nodes = mesh.boundary_nodes();
        let lumped = boundary_nodes.iter().map(|&n| lumped_all[n]).collect();
        Ok(Self {
            fe: Arc::new(P1Space::new(mesh)),
            horizon,
            steps,
            tau: horizon / steps as f64,
            boundary_nodes,
            lumped,
        })
    }

    pub fn fe(&self) -> &P1Space {
        &self.fe
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `t_k = kτ`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.tau
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary_nodes
    }

    pub fn lumped_boundary_mass(&self) -> &[f64] {
        &self.lumped
    }

    /// Lattice index of boundary node `j` on step `k ∈ 1..=M`.
    pub fn lattice_index(&self, k: usize, j: usize) -> usize {
        (k - 1) * self.boundary_nodes.len() + j
    }

    pub fn lattice_size(&self) -> usize {
        self.steps * self.boundary_nodes.len()
    }

    /// Lattice weights: lumped mass times the step.
    pub fn lattice_weights(&self) -> Vec<f64> {
        (0..self.steps)
            .flat_map(|_| self.lumped.iter().map(|m| m * self.tau))
            .collect()
    }

    /// Nodal vector with `m_b·c_b` on boundary nodes for the step-`k` slice of
    /// a lattice function.
    fn boundary_field(&self, u: &[f64], k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.fe.node_count()];
        let off = self.lattice_index(k, 0);
        for (j, &n) in self.boundary_nodes.iter().enumerate() {
            out[n] = self.lumped[j] * u[off + j];
        }
        out
    }
}

/// Nodal fields on time levels `0..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub levels: Vec<Vec<f64>>,
}

impl Trajectory {
    fn zeros(levels: usize, n: usize) -> Self {
        Self {
            levels: vec![vec![0.0; n]; levels],
        }
    }
}

/// Newton settings for each implicit Euler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepNewtonSettings {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StepNewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 50,
        }
    }
}

/// Per-step operators at a linearization point.
#[derive(Debug, Clone)]
struct StepOperators {
    /// `M + τ(K + M(∂f/∂y(y^k)) + diag(m u^k))`, factorized, for `k = 1..=M`.
    factors: Vec<Arc<EnvelopeLdl>>,
    /// `M(1 − ψ^{k−1} ∂²f/∂y²(y^k))` for `k = 1..=M`.
    weights: Vec<SparseMatrix>,
}

#[derive(Debug, Clone)]
struct Cached {
    u: Vec<f64>,
    state: Trajectory,
    adjoint: Trajectory,
    ops: StepOperators,
}

/// State and adjoint trajectories iterated by the Lagrange–Newton method.
#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicPrimal {
    pub y: Trajectory,
    pub psi: Trajectory,
}

#[derive(Debug, Clone)]
struct Linearization {
    y: Trajectory,
    psi: Trajectory,
    ops: StepOperators,
    dy0: Trajectory,
    lambda: Trajectory,
}

/// The discretized parabolic control problem as a [`ProblemOracle`].
#[derive(Debug, Clone)]
pub struct ParabolicProblem {
    grid: SpaceTimeGrid,
    data: ParabolicData,
    bounds: BoxBounds,
    space: Arc<MeasureSpace>,
    newton: StepNewtonSettings,
    cache: Option<Cached>,
    linearization: Option<Linearization>,
}

impl ParabolicProblem {
    pub fn new(grid: SpaceTimeGrid, data: ParabolicData, bounds: BoxBounds) -> Result<Self> {
        let space = MeasureSpace::new(grid.lattice_weights())?;
        Ok(Self {
            grid,
            data,
            bounds,
            space,
            newton: StepNewtonSettings::default(),
            cache: None,
            linearization: None,
        })
    }

    /// Cubic benchmark on the unit cube of dimension `dim` with `T = 4`,
    /// bounds `[0.1, 100]` in `L^{2(d+1)}`, `κ = 0.3`, starting control
    /// `50.05`.
    pub fn cubic_benchmark(dim: usize, refinement: u32) -> Result<(Self, InstanceDefaults)> {
        let grid = SpaceTimeGrid::unit_cube(dim, refinement, 4.0)?;
        let bounds = BoxBounds::new(0.1, 100.0, 2.0 * (dim as f64 + 1.0))?;
        let p = Self::new(grid, ParabolicData::cubic_benchmark(dim), bounds)?;
        Ok((
            p,
            InstanceDefaults {
                kappa: 0.3,
                initial_control: 50.05,
            },
        ))
    }

    pub fn with_newton_settings(mut self, s: StepNewtonSettings) -> Self {
        self.newton = s;
        self
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn data(&self) -> &ParabolicData {
        &self.data
    }

    fn fe(&self) -> &P1Space {
        self.grid.fe()
    }

    fn check_control(&self, u: &GridFunction) -> Result<()> {
        u.check_same_space(&GridFunction::zeros(&self.space))
    }

    fn at_qp(&self, y: &[f64], t: f64, g: &StateFn) -> Vec<f64> {
        let fe = self.fe();
        let yq = fe.values_at_qp(y);
        let nq = fe.qp_per_element();
        exec::map_indexed(yq.len(), |i| g(fe.qp_coord(i / nq, i % nq), t, yq[i]))
    }

    fn initial_state(&self) -> Vec<f64> {
        let y0 = &self.data.y0;
        self.fe().interpolate(|x| y0(x))
    }

    /// Lumped boundary load `m∘g(t_k)`.
    fn source(&self, k: usize) -> Vec<f64> {
        let mesh = self.fe().mesh();
        let t = self.grid.time(k);
        let mut out = vec![0.0; mesh.node_count()];
        for (j, &n) in self.grid.boundary_nodes.iter().enumerate() {
            out[n] = self.grid.lumped[j] * (self.data.g)(mesh.coords(n), t);
        }
        out
    }

    /// Residual `M(y − y_prev) + τ(Ky + F(y) + m∘u^k∘y − m∘g)` of step `k`
    /// and the size of its largest term.
    pub fn step_residual(&self, u: &[f64], k: usize, y: &[f64], y_prev: &[f64]) -> (Vec<f64>, f64) {
        let fe = self.fe();
        let tau = self.grid.tau;
        let diff: Vec<f64> = y.iter().zip(y_prev).map(|(a, b)| a - b).collect();
        let md = fe.mass().matvec(&diff);
        let ky = fe.stiffness().matvec(y);
        let fy = fe.load(&self.at_qp(y, self.grid.time(k), &self.data.f));
        let mu = self.grid.boundary_field(u, k);
        let src = self.source(k);
        let mut scale = 0.0f64;
        let r = (0..y.len())
            .map(|i| {
                let robin = mu[i] * y[i];
                scale = scale
                    .max(md[i].abs())
                    .max(tau * ky[i].abs())
                    .max(tau * fy[i].abs())
                    .max(tau * robin.abs())
                    .max(tau * src[i].abs());
                md[i] + tau * (ky[i] + fy[i] + robin - src[i])
            })
            .collect();
        (r, scale)
    }

    /// `M + τ(K + M(∂f/∂y(y)) + diag(m u^k))`.
    fn step_matrix(&self, u: &[f64], k: usize, y: &[f64]) -> SparseMatrix {
        let fe = self.fe();
        let tau = self.grid.tau;
        let mut a = fe.weighted_mass(&self.at_qp(y, self.grid.time(k), &self.data.f_y));
        a.axpy(1.0, fe.stiffness());
        a.add_diagonal(&self.grid.boundary_field(u, k));
        a.scale(tau);
        a.axpy(1.0, fe.mass());
        a
    }

    /// `M(1 − ψ ∂²f/∂y²(y))` at time level `k`.
    fn step_weight(&self, k: usize, y: &[f64], psi: &[f64]) -> SparseMatrix {
        let fe = self.fe();
        let t = self.grid.time(k);
        let yq = fe.values_at_qp(y);
        let pq = fe.values_at_qp(psi);
        let nq = fe.qp_per_element();
        let f_yy = &self.data.f_yy;
        let c = exec::map_indexed(yq.len(), |i| 1.0 - pq[i] * f_yy(fe.qp_coord(i / nq, i % nq), t, yq[i]));
        fe.weighted_mass(&c)
    }

    fn newton_step(&self, u: &[f64], k: usize, y_prev: &[f64], guess: Vec<f64>) -> Result<(Vec<f64>, EnvelopeLdl)> {
        let tol = self.newton.tol;
        let mut y = guess;
        let mut last = f64::INFINITY;
        for _ in 0..=self.newton.max_iters {
            let (r, scale) = self.step_residual(u, k, &y, y_prev);
            let res = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !res.is_finite() {
                break;
            }
            last = res;
            let factor = EnvelopeLdl::factor(&self.step_matrix(u, k, &y))?;
            if res <= tol * scale.max(f64::MIN_POSITIVE) || res == 0.0 {
                return Ok((y, factor));
            }
            let mut d = r;
            factor.solve_in_place(&mut d);
            let ynorm = y.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let dnorm = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (yi, di) in y.iter_mut().zip(&d) {
                *yi -= di;
            }
            if dnorm <= 4.0 * f64::EPSILON * ynorm.max(1.0) && res <= 1e3 * tol * scale {
                let factor = EnvelopeLdl::factor(&self.step_matrix(u, k, &y))?;
                return Ok((y, factor));
            }
        }
        Err(SqpError::StateSolve {
            step: Some(k),
            iterations: self.newton.max_iters,
            residual: last,
        })
    }

    fn march_state_factored(
        &self,
        u: &GridFunction,
        warm_start: Option<&Trajectory>,
    ) -> Result<(Trajectory, Vec<Arc<EnvelopeLdl>>)> {
        self.check_control(u)?;
        let m = self.grid.steps;
        let mut levels = Vec::with_capacity(m + 1);
        levels.push(self.initial_state());
        let mut factors = Vec::with_capacity(m);
        for k in 1..=m {
            let prev = levels[k - 1].clone();
            let warm = warm_start.and_then(|w| w.levels.get(k)).cloned();
            let attempt = match warm {
                Some(w) => self.newton_step(u.values(), k, &prev, w),
                None => self.newton_step(u.values(), k, &prev, prev.clone()),
            };
            let (y, f) = match attempt {
                Ok(r) => r,
                // fall back to the predecessor as initial guess
                Err(_) if warm_start.is_some() => self.newton_step(u.values(), k, &prev, prev.clone())?,
                Err(e) => return Err(e),
            };
            levels.push(y);
            factors.push(Arc::new(f));
        }
        Ok((Trajectory { levels }, factors))
    }

    /// Implicit Euler march of the state equation with Newton's method on
    /// every step.
    pub fn march_state(&self, u: &GridFunction, warm_start: Option<&Trajectory>) -> Result<Trajectory> {
        Ok(self.march_state_factored(u, warm_start)?.0)
    }

    /// Tracking load `∫ (y^k − y_d(t_k)) φ_i` at level `k`.
    fn tracking_load(&self, k: usize, y: &[f64]) -> Vec<f64> {
        let fe = self.fe();
        let t = self.grid.time(k);
        let yq = fe.values_at_qp(y);
        let nq = fe.qp_per_element();
        let yd = &self.data.y_d;
        let c = exec::map_indexed(yq.len(), |i| yq[i] - yd(fe.qp_coord(i / nq, i % nq), t));
        fe.load(&c)
    }

    /// Backward march `(M + τJ_k)ψ^{k−1} = Mψ^k + τ·rhs_k`, `ψ^M = 0`.
    fn backward(&self, factors: &[Arc<EnvelopeLdl>], mut rhs: impl FnMut(usize) -> Vec<f64>) -> Trajectory {
        let m = self.grid.steps;
        let n = self.fe().node_count();
        let tau = self.grid.tau;
        let mut out = Trajectory::zeros(m + 1, n);
        for k in (1..=m).rev() {
            let mut b = self.fe().mass().matvec(&out.levels[k]);
            let src = rhs(k);
            for (bi, si) in b.iter_mut().zip(&src) {
                *bi += tau * si;
            }
            factors[k - 1].solve_in_place(&mut b);
            out.levels[k - 1] = b;
        }
        out
    }

    /// Forward march `(M + τJ_k)z^k = Mz^{k−1} + τ·rhs_k`, `z^0 = 0`.
    fn forward(&self, factors: &[Arc<EnvelopeLdl>], mut rhs: impl FnMut(usize) -> Vec<f64>) -> Trajectory {
        let m = self.grid.steps;
        let n = self.fe().node_count();
        let tau = self.grid.tau;
        let mut out = Trajectory::zeros(m + 1, n);
        for k in 1..=m {
            let mut b = self.fe().mass().matvec(&out.levels[k - 1]);
            for (bi, si) in b.iter_mut().zip(rhs(k)) {
                *bi += tau * si;
            }
            factors[k - 1].solve_in_place(&mut b);
            out.levels[k] = b;
        }
        out
    }

    fn adjoint_with(&self, state: &Trajectory, factors: &[Arc<EnvelopeLdl>]) -> Trajectory {
        self.backward(factors, |k| self.tracking_load(k, &state.levels[k]))
    }

    /// Backward implicit Euler march of the adjoint equation; level `M` is
    /// zero and level `k − 1` pairs with state step `k`.
    pub fn march_adjoint(&self, u: &GridFunction, state: &Trajectory) -> Result<Trajectory> {
        self.check_control(u)?;
        let factors = (1..=self.grid.steps)
            .map(|k| EnvelopeLdl::factor(&self.step_matrix(u.values(), k, &state.levels[k])).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.adjoint_with(state, &factors))
    }

    fn ensure(&mut self, u: &GridFunction) -> Result<&Cached> {
        self.check_control(u)?;
        if !self.cache.as_ref().is_some_and(|c| c.u == u.values()) {
            let warm = self.cache.take().map(|c| c.state);
            let (state, factors) = self.march_state_factored(u, warm.as_ref())?;
            let adjoint = self.adjoint_with(&state, &factors);
            let weights = (1..=self.grid.steps)
                .map(|k| self.step_weight(k, &state.levels[k], &adjoint.levels[k - 1]))
                .collect();
            self.cache = Some(Cached {
                u: u.values().to_vec(),
                state,
                adjoint,
                ops: StepOperators { factors, weights },
            });
        }
        Ok(self.cache.as_ref().expect("cache filled"))
    }

    /// State and adjoint trajectories at `u` (cached).
    pub fn trajectories(&mut self, u: &GridFunction) -> Result<(Trajectory, Trajectory)> {
        let c = self.ensure(u)?;
        Ok((c.state.clone(), c.adjoint.clone()))
    }

    /// `Σ_k τ ½∫(y^k − y_d(t_k))²`.
    pub fn tracking(&self, y: &Trajectory) -> f64 {
        let fe = self.fe();
        let nq = fe.qp_per_element();
        let yd = &self.data.y_d;
        (1..=self.grid.steps)
            .map(|k| {
                let t = self.grid.time(k);
                let yq = fe.values_at_qp(&y.levels[k]);
                let c = exec::map_indexed(yq.len(), |i| {
                    let d = yq[i] - yd(fe.qp_coord(i / nq, i % nq), t);
                    0.5 * d * d
                });
                self.grid.tau * fe.integrate(&c)
            })
            .sum()
    }

    /// Lattice function `−(a^k b^{k−1})` on boundary nodes.
    pub fn boundary_product(&self, a: &Trajectory, b: &Trajectory) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.lattice_size()];
        for k in 1..=self.grid.steps {
            for (j, &n) in self.grid.boundary_nodes.iter().enumerate() {
                out[self.grid.lattice_index(k, j)] = -a.levels[k][n] * b.levels[k - 1][n];
            }
        }
        out
    }

    /// `z` and `η` for direction `v` at `(y, ψ)` with the given operators.
    fn sensitivities(
        &self,
        ops: &StepOperators,
        y: &Trajectory,
        psi: &Trajectory,
        v: &GridFunction,
    ) -> (Trajectory, Trajectory) {
        let vv = v.values();
        let z = self.forward(&ops.factors, |k| {
            let mv = self.grid.boundary_field(vv, k);
            mv.iter().zip(&y.levels[k]).map(|(a, b)| -a * b).collect()
        });
        let eta = self.backward(&ops.factors, |k| {
            let mut s = ops.weights[k - 1].matvec(&z.levels[k]);
            let mv = self.grid.boundary_field(vv, k);
            for ((si, a), p) in s.iter_mut().zip(&mv).zip(&psi.levels[k - 1]) {
                *si -= a * p;
            }
            s
        });
        (z, eta)
    }

    fn hessian_output(&self, y: &Trajectory, psi: &Trajectory, z: &Trajectory, eta: &Trajectory) -> Vec<f64> {
        let a = self.boundary_product(y, eta);
        let b = self.boundary_product(z, psi);
        a.iter().zip(&b).map(|(x, w)| x + w).collect()
    }

    /// Largest step residual of a trajectory.
    pub fn trajectory_residual(&self, u: &GridFunction, y: &Trajectory) -> Result<f64> {
        self.check_control(u)?;
        let mut worst = 0.0f64;
        for k in 1..=self.grid.steps {
            let (r, _) = self.step_residual(u.values(), k, &y.levels[k], &y.levels[k - 1]);
            worst = worst.max(r.iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
        Ok(worst)
    }
}

impl ProblemOracle for ParabolicProblem {
    fn control_space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }

    fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    fn objective(&mut self, u: &GridFunction) -> Result<f64> {
        let state = self.ensure(u)?.state.clone();
        Ok(self.tracking(&state))
    }

    fn phi(&mut self, u: &GridFunction) -> Result<GridFunction> {
        self.ensure(u)?;
        let c = self.cache.as_ref().expect("cache filled");
        let vals = self.boundary_product(&c.state, &c.adjoint);
        GridFunction::new(self.space.clone(), vals)
    }

    fn apply_phi_prime(&mut self, u: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        self.check_control(v)?;
        self.ensure(u)?;
        let c = self.cache.as_ref().expect("cache filled");
        let (z, eta) = self.sensitivities(&c.ops, &c.state, &c.adjoint, v);
        let out = self.hessian_output(&c.state, &c.adjoint, &z, &eta);
        GridFunction::new(self.space.clone(), out)
    }
}

impl LagrangeNewtonOracle for ParabolicProblem {
    type Primal = ParabolicPrimal;

    /// Zero state (apart from the prescribed initial level) and zero adjoint.
    fn zero_primal(&self) -> ParabolicPrimal {
        let n = self.fe().node_count();
        let m = self.grid.steps;
        let mut y = Trajectory::zeros(m + 1, n);
        y.levels[0] = self.initial_state();
        ParabolicPrimal {
            y,
            psi: Trajectory::zeros(m + 1, n),
        }
    }

    fn solved_primal(&mut self, u: &GridFunction) -> Result<ParabolicPrimal> {
        let (y, psi) = self.trajectories(u)?;
        Ok(ParabolicPrimal { y, psi })
    }

    fn linearize(&mut self, u: &GridFunction, primal: &ParabolicPrimal) -> Result<()> {
        self.check_control(u)?;
        let m = self.grid.steps;
        if primal.y.levels.len() != m + 1 || primal.psi.levels.len() != m + 1 {
            return Err(SqpError::DimensionMismatch {
                expected: m + 1,
                found: primal.y.levels.len(),
            });
        }
        let (y, psi) = (&primal.y, &primal.psi);
        let factors = (1..=m)
            .map(|k| EnvelopeLdl::factor(&self.step_matrix(u.values(), k, &y.levels[k])).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let weights: Vec<SparseMatrix> = (1..=m)
            .map(|k| self.step_weight(k, &y.levels[k], &psi.levels[k - 1]))
            .collect();
        let ops = StepOperators { factors, weights };
        // (M + τJ_k)δy^k = Mδy^{k−1} − R_k, with the level-0 mismatch carried in
        let y_init = self.initial_state();
        let mut dy0 = Trajectory::zeros(m + 1, y_init.len());
        dy0.levels[0] = y_init.iter().zip(&y.levels[0]).map(|(a, b)| a - b).collect();
        for k in 1..=m {
            let (r, _) = self.step_residual(u.values(), k, &y.levels[k], &y.levels[k - 1]);
            let mut b = self.fe().mass().matvec(&dy0.levels[k - 1]);
            for (bi, ri) in b.iter_mut().zip(&r) {
                *bi -= ri;
            }
            ops.factors[k - 1].solve_in_place(&mut b);
            dy0.levels[k] = b;
        }
        let lambda = self.backward(&ops.factors, |k| {
            let mut s = self.tracking_load(k, &y.levels[k]);
            let w = ops.weights[k - 1].matvec(&dy0.levels[k]);
            for (si, wi) in s.iter_mut().zip(&w) {
                *si += wi;
            }
            s
        });
        self.linearization = Some(Linearization {
            y: y.clone(),
            psi: psi.clone(),
            ops,
            dy0,
            lambda,
        });
        Ok(())
    }

    fn linearized_phi(&mut self) -> Result<GridFunction> {
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        let a = self.boundary_product(&lin.y, &lin.lambda);
        let b = self.boundary_product(&lin.dy0, &lin.psi);
        GridFunction::new(self.space.clone(), a.iter().zip(&b).map(|(x, w)| x + w).collect())
    }

    fn apply_linearized_hessian(&mut self, v: &GridFunction) -> Result<GridFunction> {
        self.check_control(v)?;
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        let (z, eta) = self.sensitivities(&lin.ops, &lin.y, &lin.psi, v);
        let out = self.hessian_output(&lin.y, &lin.psi, &z, &eta);
        GridFunction::new(self.space.clone(), out)
    }

    fn advance(&mut self, v: &GridFunction) -> Result<ParabolicPrimal> {
        self.check_control(v)?;
        let lin = self.linearization.as_ref().ok_or_else(not_linearized)?;
        let (z, eta) = self.sensitivities(&lin.ops, &lin.y, &lin.psi, v);
        let m = self.grid.steps;
        let y = Trajectory {
            levels: (0..=m)
                .map(|k| {
                    (0..z.levels[k].len())
                        .map(|i| lin.y.levels[k][i] + lin.dy0.levels[k][i] + z.levels[k][i])
                        .collect()
                })
                .collect(),
        };
        let psi = Trajectory {
            levels: (0..=m)
                .map(|k| lin.lambda.levels[k].iter().zip(&eta.levels[k]).map(|(a, b)| a + b).collect())
                .collect(),
        };
        Ok(ParabolicPrimal { y, psi })
    }

    fn primal_objective(&mut self, _u: &GridFunction, primal: &ParabolicPrimal) -> Result<f64> {
        Ok(self.tracking(&primal.y))
    }

    fn state_residual(&mut self, u: &GridFunction, primal: &ParabolicPrimal) -> Result<f64> {
        self.trajectory_residual(u, &primal.y)
    }
}

fn not_linearized() -> SqpError {
    SqpError::Setup("linearize must be called first".into())
}
