//! Independent oracles: dense synthetic problems with exact derivatives,
//! exhaustive active-set enumeration for small quadratic subproblems, and
//! the Lipschitz stability estimate for masked quadratic problems.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SqpError};
use crate::exec;
use crate::measure::{weighted_norm, BoxBounds, GridFunction, MeasureSpace};
use crate::problem::{LagrangeNewtonOracle, ProblemOracle};
use crate::qp::{HessianAction, QpInstance};

/// Largest point count accepted by [`brute_force_qp`].
pub const BRUTE_FORCE_MAX: usize = 16;
/// Largest point count of a synthetic problem.
pub const SYNTHETIC_MAX: usize = 64;

/// Eigenvalue range of `H` in the μ-inner product, spread uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spectrum {
    pub min: f64,
    pub max: f64,
}

impl Spectrum {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }
}

/// `𝒥(u) = ½uᵀSu + ⟨c, u⟩_μ + ε Σ μ_i (1 − cos u_i)`, so that
/// `Φ(u) = Hu + c + ε sin(u)` with `H = W⁻¹S` symmetric in the μ-inner
/// product.
#[derive(Debug, Clone)]
pub struct SyntheticProblem {
    space: Arc<MeasureSpace>,
    s: DMatrix<f64>,
    h: DMatrix<f64>,
    c: DVector<f64>,
    epsilon: f64,
    bounds: BoxBounds,
    eig_min: f64,
    eig_max: f64,
    linearization: Option<(GridFunction, GridFunction)>,
}

/// Reproducible synthetic problem: weights in `[0.5, 1.5]`, `H` with the
/// given spectrum, `c` uniform in `[−2, 2]`, bounds `[−1, 1]`.
pub fn make_synthetic(seed: u64, n: usize, spectrum: Spectrum, epsilon: f64) -> Result<SyntheticProblem> {
    if n == 0 || n > SYNTHETIC_MAX {
        return Err(SqpError::TooLarge { n, max: SYNTHETIC_MAX });
    }
    if !(spectrum.min <= spectrum.max) || !spectrum.min.is_finite() || !spectrum.max.is_finite() {
        return Err(SqpError::Setup(format!("invalid spectrum {spectrum:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let q = g.qr().q();
    let eig: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                spectrum.min
            } else {
                spectrum.min + (spectrum.max - spectrum.min) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    // S = W^{1/2} Q Λ Qᵀ W^{1/2}
    let lam = DMatrix::from_diagonal(&DVector::from_vec(eig));
    let core = &q * lam * q.transpose();
    let sq = DVector::from_iterator(n, weights.iter().map(|w| w.sqrt()));
    let s = DMatrix::from_fn(n, n, |i, j| sq[i] * core[(i, j)] * sq[j]);
    let s = (&s + s.transpose()) * 0.5;
    let c = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-2.0..2.0)));
    SyntheticProblem::from_parts(MeasureSpace::new(weights)?, s, c, epsilon, BoxBounds::l2(-1.0, 1.0)?)
}

impl SyntheticProblem {
    /// Builds the problem from a symmetric matrix `S` (so `H = W⁻¹S`).
    pub fn from_parts(
        space: Arc<MeasureSpace>,
        s: DMatrix<f64>,
        c: DVector<f64>,
        epsilon: f64,
        bounds: BoxBounds,
    ) -> Result<Self> {
        let n = space.point_count();
        if s.nrows() != n || s.ncols() != n || c.len() != n {
            return Err(SqpError::DimensionMismatch { expected: n, found: s.nrows() });
        }
        if (&s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
            return Err(SqpError::Setup("S must be symmetric".into()));
        }
        let w = space.weights();
        let h = DMatrix::from_fn(n, n, |i, j| s[(i, j)] / w[i]);
        let (eig_min, eig_max) = weighted_extreme_eigenvalues(&s, w, &vec![true; n]);
        Ok(Self {
            space,
            s,
            h,
            c,
            epsilon,
            bounds,
            eig_min,
            eig_max,
            linearization: None,
        })
    }

    pub fn with_bounds(mut self, bounds: BoxBounds) -> Self {
        self.bounds = bounds;
        self
    }

    /// `H` as a matrix acting on point values.
    pub fn operator(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn symmetric_part(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn constant_term(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Smallest and largest eigenvalue of `H` in the μ-inner product.
    pub fn spectrum_bounds(&self) -> (f64, f64) {
        (self.eig_min, self.eig_max)
    }

    fn h_apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.h * DVector::from_column_slice(v)).as_slice().to_vec()
    }
}

/// Extreme eigenvalues of `W⁻¹S` restricted to the masked coordinates.
fn weighted_extreme_eigenvalues(s: &DMatrix<f64>, w: &[f64], mask: &[bool]) -> (f64, f64) {
    let idx: Vec<usize> = (0..w.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return (f64::INFINITY, f64::NEG_INFINITY);
    }
    let m = DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
        let (i, j) = (idx[a], idx[b]);
        s[(i, j)] / (w[i] * w[j]).sqrt()
    });
    let e = SymmetricEigen::new(m).eigenvalues;
    (e.min(), e.max())
}

impl ProblemOracle for SyntheticProblem {
    fn control_space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }

    fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    fn objective(&mut self, u: &GridFunction) -> Result<f64> {
        self.space_check(u)?;
        let x = DVector::from_column_slice(u.values());
        let w = self.space.weights();
        let quad = 0.5 * x.dot(&(&self.s * &x));
        let rest: f64 = (0..x.len())
            .map(|i| w[i] * (self.c[i] * x[i] + self.epsilon * (1.0 - x[i].cos())))
            .sum();
        Ok(quad + rest)
    }

    fn phi(&mut self, u: &GridFunction) -> Result<GridFunction> {
        self.space_check(u)?;
        let hu = self.h_apply(u.values());
        let vals = hu
            .iter()
            .zip(u.values())
            .enumerate()
            .map(|(i, (h, x))| h + self.c[i] + self.epsilon * x.sin())
            .collect();
        GridFunction::new(self.space.clone(), vals)
    }

    fn apply_phi_prime(&mut self, u: &GridFunction, v: &GridFunction) -> Result<GridFunction> {
        self.space_check(u)?;
        self.space_check(v)?;
        let hv = self.h_apply(v.values());
        let vals = hv
            .iter()
            .zip(u.values().iter().zip(v.values()))
            .map(|(h, (x, y))| h + self.epsilon * x.cos() * y)
            .collect();
        GridFunction::new(self.space.clone(), vals)
    }
}

impl SyntheticProblem {
    fn space_check(&self, u: &GridFunction) -> Result<()> {
        u.check_same_space(&GridFunction::zeros(&self.space))
    }
}

/// Lagrange–Newton view with the trivial state equation `y = u`: the
/// "state" is a copy of the control that the method updates linearly.
impl LagrangeNewtonOracle for SyntheticProblem {
    type Primal = GridFunction;

    fn zero_primal(&self) -> GridFunction {
        GridFunction::zeros(&self.space)
    }

    fn solved_primal(&mut self, u: &GridFunction) -> Result<GridFunction> {
        Ok(u.clone())
    }

    fn linearize(&mut self, u: &GridFunction, primal: &GridFunction) -> Result<()> {
        self.space_check(u)?;
        self.space_check(primal)?;
        self.linearization = Some((u.clone(), primal.clone()));
        Ok(())
    }

    fn linearized_phi(&mut self) -> Result<GridFunction> {
        let (u, y) = self.linearization.clone().ok_or_else(not_linearized)?;
        // ∇𝒥(y) + ∇²𝒥(y)(u − y)
        let mut g = self.phi(&y)?;
        g.axpy(1.0, &self.apply_phi_prime(&y, &u.sub(&y)?)?)?;
        Ok(g)
    }

    fn apply_linearized_hessian(&mut self, v: &GridFunction) -> Result<GridFunction> {
        let (_, y) = self.linearization.clone().ok_or_else(not_linearized)?;
        self.apply_phi_prime(&y, v)
    }

    fn advance(&mut self, v: &GridFunction) -> Result<GridFunction> {
        let (u, _) = self.linearization.clone().ok_or_else(not_linearized)?;
        u.add(v)
    }

    fn primal_objective(&mut self, _u: &GridFunction, primal: &GridFunction) -> Result<f64> {
        self.objective(primal)
    }

    fn state_residual(&mut self, u: &GridFunction, primal: &GridFunction) -> Result<f64> {
        Ok(primal.sub(u)?.norm_inf())
    }
}

fn not_linearized() -> SqpError {
    SqpError::Setup("linearize must be called first".into())
}

/// Dense data of a quadratic program `min ½xᵀAx + bᵀx, lo ≤ x ≤ hi` in
/// Euclidean coordinates (weights already folded in).
struct DenseQp {
    a: DMatrix<f64>,
    b: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Coordinates that take part; the others are fixed at zero.
    active_vars: Vec<usize>,
}

impl DenseQp {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.a * x)) + self.b.dot(x)
    }

    /// Solve for one pattern (0 lower, 1 free, 2 upper per variable).
    fn candidate(&self, pattern: &[u8]) -> Option<DVector<f64>> {
        let n = self.a.nrows();
        let mut x = DVector::zeros(n);
        let mut free = Vec::new();
        for (k, &i) in self.active_vars.iter().enumerate() {
            match pattern[k] {
                0 => x[i] = self.lo[i],
                2 => x[i] = self.hi[i],
                _ => free.push(i),
            }
        }
        if !free.is_empty() {
            let rhs = -(&self.a * &x + &self.b);
            let m = free.len();
            let aff = DMatrix::from_fn(m, m, |p, q| self.a[(free[p], free[q])]);
            let r = DVector::from_fn(m, |p, _| rhs[free[p]]);
            let sol = Cholesky::new(aff)?.solve(&r);
            for (p, &i) in free.iter().enumerate() {
                x[i] = sol[p];
            }
        }
        let scale = self.a.amax().max(self.b.amax()).max(1.0);
        let g = &self.a * &x + &self.b;
        for (k, &i) in self.active_vars.iter().enumerate() {
            let width = (self.hi[i] - self.lo[i]).abs().max(1.0);
            let ok = match pattern[k] {
                0 => g[i] >= -1e-10 * scale,
                2 => g[i] <= 1e-10 * scale,
                _ => x[i] >= self.lo[i] - 1e-12 * width && x[i] <= self.hi[i] + 1e-12 * width,
            };
            if !ok {
                return None;
            }
        }
        Some(x)
    }

    fn check_definite(&self) -> Result<()> {
        let m = self.active_vars.len();
        let sub = DMatrix::from_fn(m, m, |p, q| self.a[(self.active_vars[p], self.active_vars[q])]);
        if Cholesky::new(sub).is_none() {
            return Err(SqpError::Setup("quadratic form is not positive definite".into()));
        }
        Ok(())
    }

    /// Exhaustive search; ties resolved towards the lexicographically
    /// smallest pattern (lower < free < upper, first point most significant).
    fn solve(&self) -> Result<DVector<f64>> {
        let m = self.active_vars.len();
        if m > BRUTE_FORCE_MAX {
            return Err(SqpError::TooLarge { n: m, max: BRUTE_FORCE_MAX });
        }
        self.check_definite()?;
        let total = 3usize.pow(m as u32);
        const CHUNK: usize = 729;
        let chunks = total.div_ceil(CHUNK);
        let best_per_chunk = exec::map_indexed(chunks, |c| {
            let mut best: Option<(f64, DVector<f64>)> = None;
            let mut pattern = vec![0u8; m];
            for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let mut r = idx;
                for k in (0..m).rev() {
                    pattern[k] = (r % 3) as u8;
                    r /= 3;
                }
                if let Some(x) = self.candidate(&pattern) {
                    let f = self.objective(&x);
                    if best.as_ref().is_none_or(|(bf, _)| better(f, *bf)) {
                        best = Some((f, x));
                    }
                }
            }
            best
        });
        let mut best: Option<(f64, DVector<f64>)> = None;
        for cand in best_per_chunk.into_iter().flatten() {
            if best.as_ref().is_none_or(|(bf, _)| better(cand.0, *bf)) {
                best = Some(cand);
            }
        }
        best.map(|(_, x)| x).ok_or(SqpError::Infeasible)
    }
}

/// Strictly better beyond round-off, so equal objectives keep the earlier pattern.
fn better(f: f64, best: f64) -> bool {
    f < best - 1e-13 * best.abs().max(1.0)
}

/// Weighted dense form of a subproblem: `A = W(κ + H)`, `b = Wℓ`, with `H`
/// recovered column by column from its action.
fn dense_from_instance<H: HessianAction>(q: &mut QpInstance<H>) -> Result<DenseQp> {
    let space = q.space().clone();
    let n = space.point_count();
    let w = space.weights().to_vec();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let e = GridFunction::from_fn(&space, |i| if i == j { 1.0 } else { 0.0 });
        let col = q.hessian.apply(&e)?;
        for i in 0..n {
            a[(i, j)] = w[i] * col.values()[i];
        }
        a[(j, j)] += w[j] * q.kappa;
    }
    let a = (&a + a.transpose()) * 0.5;
    let b = DVector::from_fn(n, |i, _| w[i] * q.linear_term.values()[i]);
    let u = q.base_point.values();
    Ok(DenseQp {
        a,
        b,
        lo: u.iter().map(|x| q.bounds.lower() - x).collect(),
        hi: u.iter().map(|x| q.bounds.upper() - x).collect(),
        active_vars: (0..n).collect(),
    })
}

/// Solves a subproblem by enumerating all `3^n` active-set patterns.
/// Returns the step `v = u⁺ − u_n`.
pub fn brute_force_qp<H: HessianAction>(q: &mut QpInstance<H>) -> Result<GridFunction> {
    let n = q.base_point.len();
    if n > BRUTE_FORCE_MAX {
        return Err(SqpError::TooLarge { n, max: BRUTE_FORCE_MAX });
    }
    let dense = dense_from_instance(q)?;
    let x = dense.solve()?;
    GridFunction::new(q.space().clone(), x.as_slice().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzCheck {
    /// `‖w₁ − w₀‖`.
    pub lhs: f64,
    /// `‖b₁ − b₀‖ / λ`.
    pub rhs: f64,
    pub lambda: f64,
    pub pass: bool,
}

/// Solves `min ½a(w,w) + ⟨b_i, w⟩` over `{w : w = 0 off the mask,
/// w ∈ bounds on it}` for `i = 0, 1`, with `a(w,w) = ⟨(κ + H)w, w⟩_μ`, and
/// compares `‖w₁ − w₀‖` with `‖b₁ − b₀‖ / λ` (μ-weighted L² norms).
///
/// `lambda = None` takes the smallest eigenvalue of `κ + H` on the masked
/// subspace; a claimed value above it is a setup error.
pub fn lipschitz_stability_check(
    s: &SyntheticProblem,
    kappa: f64,
    b0: &GridFunction,
    b1: &GridFunction,
    bounds: &BoxBounds,
    free_mask: &[bool],
    lambda: Option<f64>,
) -> Result<LipschitzCheck> {
    let space = &s.space;
    let n = space.point_count();
    b0.check_same_space(b1)?;
    b0.check_same_space(&GridFunction::zeros(space))?;
    if free_mask.len() != n {
        return Err(SqpError::DimensionMismatch { expected: n, found: free_mask.len() });
    }
    if !(bounds.lower() <= 0.0 && bounds.upper() >= 0.0) {
        return Err(SqpError::Setup("bounds must contain zero".into()));
    }
    let w = space.weights();
    let mut sk = s.s.clone();
    for i in 0..n {
        sk[(i, i)] += kappa * w[i];
    }
    let (eig_min, _) = weighted_extreme_eigenvalues(&sk, w, free_mask);
    let lam = match lambda {
        Some(l) if l > eig_min * (1.0 + 1e-12) + 1e-14 => {
            return Err(SqpError::Setup(format!(
                "claimed coercivity {l} exceeds smallest eigenvalue {eig_min}"
            )))
        }
        Some(l) => l,
        None => eig_min,
    };
    if !(lam > 0.0) {
        return Err(SqpError::Setup(format!("form is not coercive on the mask (λ = {lam})")));
    }
    let active_vars: Vec<usize> = (0..n).filter(|&i| free_mask[i]).collect();
    let solve = |b: &GridFunction| -> Result<GridFunction> {
        let qp = DenseQp {
            a: sk.clone(),
            b: DVector::from_fn(n, |i, _| w[i] * b.values()[i]),
            lo: vec![bounds.lower(); n],
            hi: vec![bounds.upper(); n],
            active_vars: active_vars.clone(),
        };
        let x = if active_vars.is_empty() { DVector::zeros(n) } else { qp.solve()? };
        GridFunction::new(space.clone(), x.as_slice().to_vec())
    };
    let w0 = solve(b0)?;
    let w1 = solve(b1)?;
    let lhs = weighted_norm(&w1.sub(&w0)?, 2.0)?;
    let rhs = weighted_norm(&b1.sub(b0)?, 2.0)? / lam;
    Ok(LipschitzCheck {
        lhs,
        rhs,
        lambda: lam,
        pass: lhs <= rhs * (1.0 + 1e-8),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qp::{solve_ssn, FrozenHessian, SsnSettings};

    fn scalar_instance(linear: f64) -> (SyntheticProblem, GridFunction) {
        let space = MeasureSpace::new(vec![1.0]).unwrap();
        let p = SyntheticProblem::from_parts(
            space.clone(),
            DMatrix::zeros(1, 1),
            DVector::from_element(1, linear),
            0.0,
            BoxBounds::l2(-1.0, 1.0).unwrap(),
        )
        .unwrap();
        (p, GridFunction::zeros(&space))
    }

    #[test]
    fn scalar_brute_force_examples() {
        for (linear, expected) in [(0.5, -0.5), (5.0, -1.0)] {
            let (mut p, u0) = scalar_instance(linear);
            let phi = p.phi(&u0).unwrap();
            let b = p.bounds();
            let mut q = QpInstance::new(FrozenHessian::new(&mut p, u0.clone()), u0, 1.0, b, &phi).unwrap();
            let v = brute_force_qp(&mut q).unwrap();
            assert!((v.values()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn synthetic_is_reproducible_and_symmetric() {
        let sp = Spectrum::new(0.1, 3.0);
        let a = make_synthetic(1, 6, sp, 0.0).unwrap();
        let b = make_synthetic(1, 6, sp, 0.0).unwrap();
        let c = make_synthetic(2, 6, sp, 0.0).unwrap();
        assert_eq!(a.operator(), b.operator());
        assert_ne!(a.operator(), c.operator());
        let (lo, hi) = a.spectrum_bounds();
        assert!((lo - 0.1).abs() < 1e-10 && (hi - 3.0).abs() < 1e-10);
    }

    #[test]
    fn too_large_instances_are_rejected() {
        let p = make_synthetic(3, 17, Spectrum::new(1.0, 2.0), 0.0).unwrap();
        let mut p2 = p.clone();
        let u0 = GridFunction::zeros(p.control_space());
        let phi = p2.phi(&u0).unwrap();
        let mut q = QpInstance::new(FrozenHessian::new(&mut p2, u0.clone()), u0, 1.0, p.bounds(), &phi).unwrap();
        assert!(matches!(brute_force_qp(&mut q), Err(SqpError::TooLarge { .. })));
        assert!(make_synthetic(0, 65, Spectrum::new(1.0, 2.0), 0.0).is_err());
    }

    #[test]
    fn ssn_matches_enumeration() {
        for seed in 0..10 {
            let mut p = make_synthetic(seed, 8, Spectrum::new(0.05, 4.0), 0.0).unwrap();
            let u0 = GridFunction::from_fn(&p.control_space().clone(), |i| 0.1 * i as f64 - 0.3);
            let phi = p.phi(&u0).unwrap();
            let b = p.bounds();
            let mut q = QpInstance::new(FrozenHessian::new(&mut p, u0.clone()), u0.clone(), 0.5, b, &phi).unwrap();
            let exact = brute_force_qp(&mut q).unwrap();
            let ssn = solve_ssn(&mut q, &GridFunction::zeros(u0.space()), &SsnSettings::default()).unwrap();
            assert!(exact.sub(&ssn.step).unwrap().norm_inf() < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn lipschitz_equal_inputs_and_tight_case() {
        let n = 8;
        let space = MeasureSpace::new(vec![0.125; n]).unwrap();
        let p = SyntheticProblem::from_parts(
            space.clone(),
            DMatrix::zeros(n, n),
            DVector::zeros(n),
            0.0,
            BoxBounds::l2(-100.0, 100.0).unwrap(),
        )
        .unwrap();
        let b0 = GridFunction::from_fn(&space, |i| 0.3 * i as f64 - 1.0);
        let b1 = GridFunction::from_fn(&space, |i| (i as f64).sin());
        let mask = vec![true; n];
        let same = lipschitz_stability_check(&p, 0.5, &b0, &b0, &p.bounds(), &mask, None).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert!(same.pass);
        let r = lipschitz_stability_check(&p, 0.5, &b0, &b1, &p.bounds(), &mask, None).unwrap();
        assert_eq!(r.lambda, 0.5);
        let ratio = r.lhs / r.rhs;
        assert!((1.0 - 1e-10..=1.0).contains(&ratio), "{ratio}");
        // overclaimed coercivity
        assert!(lipschitz_stability_check(&p, 0.5, &b0, &b1, &p.bounds(), &mask, Some(0.6)).is_err());
    }

    #[test]
    fn synthetic_lagrange_newton_view_is_exact_newton() {
        let mut p = make_synthetic(4, 5, Spectrum::new(0.2, 2.0), 0.1).unwrap();
        let u = GridFunction::from_fn(&p.control_space().clone(), |i| 0.2 * i as f64 - 0.4);
        let y = p.solved_primal(&u).unwrap();
        p.linearize(&u, &y).unwrap();
        let lin = p.linearized_phi().unwrap();
        assert_eq!(lin, p.phi(&u).unwrap());
        let v = GridFunction::constant(u.space(), 0.1);
        assert_eq!(p.advance(&v).unwrap(), u.add(&v).unwrap());
    }
}
