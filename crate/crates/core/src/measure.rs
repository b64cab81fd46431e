//! Discrete finite measure spaces and the functions living on them.
//!
//! A [`MeasureSpace`] is a finite set of points with positive weights; the
//! weights realise integration, so every `L^q` quantity below is an exact
//! weighted sum.

use std::sync::Arc;

use crate::error::{Result, SqpError};
use crate::exec;

/// Finite set of points with strictly positive measure weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureSpace {
    weights: Vec<f64>,
    total: f64,
}

impl MeasureSpace {
    pub fn new(weights: Vec<f64>) -> Result<Arc<Self>> {
        if weights.is_empty() {
            return Err(SqpError::InvalidSpace("no points".into()));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(SqpError::InvalidSpace(format!(
                "weight {} at point {i} is not a positive finite number",
                weights[i]
            )));
        }
        let total = exec::sum_indexed(weights.len(), |i| weights[i]);
        Ok(Arc::new(Self { weights, total }))
    }

    /// `n` points of equal weight `total / n`.
    pub fn uniform(n: usize, total: f64) -> Result<Arc<Self>> {
        Self::new(vec![total / n as f64; n])
    }

    pub fn point_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// μ(X).
    pub fn total_measure(&self) -> f64 {
        self.total
    }
}

/// A function on a [`MeasureSpace`].
#[derive(Debug, Clone)]
pub struct GridFunction {
    space: Arc<MeasureSpace>,
    values: Vec<f64>,
}

impl PartialEq for GridFunction {
    fn eq(&self, other: &Self) -> bool {
        same_space(&self.space, &other.space) && self.values == other.values
    }
}

fn same_space(a: &Arc<MeasureSpace>, b: &Arc<MeasureSpace>) -> bool {
    Arc::ptr_eq(a, b) || a.weights == b.weights
}

impl GridFunction {
    pub fn new(space: Arc<MeasureSpace>, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.point_count() {
            return Err(SqpError::DimensionMismatch {
                expected: space.point_count(),
                found: values.len(),
            });
        }
        Ok(Self { space, values })
    }

    pub fn zeros(space: &Arc<MeasureSpace>) -> Self {
        Self::constant(space, 0.0)
    }

    pub fn constant(space: &Arc<MeasureSpace>, c: f64) -> Self {
        Self {
            space: Arc::clone(space),
            values: vec![c; space.point_count()],
        }
    }

    pub fn from_fn(space: &Arc<MeasureSpace>, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            space: Arc::clone(space),
            values: (0..space.point_count()).map(f).collect(),
        }
    }

    pub fn space(&self) -> &Arc<MeasureSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_same_space(&self, other: &Self) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(SqpError::DimensionMismatch {
                expected: self.values.len(),
                found: other.values.len(),
            });
        }
        if !same_space(&self.space, &other.space) {
            return Err(SqpError::SpaceMismatch);
        }
        Ok(())
    }

    /// `self += a * x`.
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_same_space(x)?;
        exec::for_each_mut(&mut self.values, |i, v| *v += a * x.values[i]);
        Ok(())
    }

    pub fn scale(&mut self, a: f64) {
        exec::for_each_mut(&mut self.values, |_, v| *v *= a);
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// `a * x + b * y`.
    pub fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        x.check_same_space(y)?;
        let mut out = x.clone();
        exec::for_each_mut(&mut out.values, |i, v| *v = a * *v + b * y.values[i]);
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        Self::lincomb(1.0, self, -1.0, other)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Self::lincomb(1.0, self, 1.0, other)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Self {
        let mut out = self.clone();
        exec::for_each_mut(&mut out.values, |_, v| *v = f(*v));
        out
    }

    pub fn norm_inf(&self) -> f64 {
        exec::max_indexed(self.values.len(), |i| self.values[i].abs())
    }

    pub fn norm_l2(&self) -> f64 {
        weighted_inner(self, self).map(f64::sqrt).unwrap_or(f64::NAN)
    }
}

/// Extended-real box `[lower, upper]` attached to an integrability exponent `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxBounds {
    lower: f64,
    upper: f64,
    exponent_p: f64,
}

impl BoxBounds {
    pub fn new(lower: f64, upper: f64, exponent_p: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || exponent_p.is_nan() {
            return Err(SqpError::InvalidBounds("NaN in bounds".into()));
        }
        if lower >= upper || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(SqpError::InvalidBounds(format!(
                "need lower < upper, got [{lower}, {upper}]"
            )));
        }
        if exponent_p < 2.0 {
            return Err(SqpError::InvalidBounds(format!(
                "exponent p = {exponent_p} must lie in [2, inf]"
            )));
        }
        if exponent_p > 2.0 && !(lower.is_finite() && upper.is_finite()) {
            return Err(SqpError::InvalidBounds(format!(
                "p = {exponent_p} > 2 requires finite bounds"
            )));
        }
        Ok(Self {
            lower,
            upper,
            exponent_p,
        })
    }

    /// Bounds with `p = 2`.
    pub fn l2(lower: f64, upper: f64) -> Result<Self> {
        Self::new(lower, upper, 2.0)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn exponent_p(&self) -> f64 {
        self.exponent_p
    }

    #[inline]
    pub fn clamp(&self, x: f64) -> f64 {
        // infinite sides are no-ops under max/min
        x.max(self.lower).min(self.upper)
    }

    /// Midpoint for finite boxes, otherwise the finite side (or 0).
    pub fn midpoint(&self) -> f64 {
        match (self.lower.is_finite(), self.upper.is_finite()) {
            (true, true) => 0.5 * (self.lower + self.upper),
            (true, false) => self.lower.max(0.0),
            (false, true) => self.upper.min(0.0),
            (false, false) => 0.0,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Partition of the points into lower-active, upper-active and free sets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSetPartition {
    pub lower_active: Vec<usize>,
    pub upper_active: Vec<usize>,
    pub free: Vec<usize>,
}

/// Membership of a single point in an [`ActiveSetPartition`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointState {
    Lower,
    Free,
    Upper,
}

impl ActiveSetPartition {
    pub fn from_states(states: &[PointState]) -> Self {
        let mut out = Self::default();
        for (i, s) in states.iter().enumerate() {
            match s {
                PointState::Lower => out.lower_active.push(i),
                PointState::Upper => out.upper_active.push(i),
                PointState::Free => out.free.push(i),
            }
        }
        out
    }

    pub fn states(&self, n: usize) -> Vec<PointState> {
        let mut s = vec![PointState::Free; n];
        for &i in &self.lower_active {
            s[i] = PointState::Lower;
        }
        for &i in &self.upper_active {
            s[i] = PointState::Upper;
        }
        s
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.free.len(), self.lower_active.len(), self.upper_active.len())
    }

    pub fn point_count(&self) -> usize {
        self.free.len() + self.lower_active.len() + self.upper_active.len()
    }
}

/// Discrete `L^q` norm: `(Σ w_i |v_i|^q)^{1/q}`, or `max |v_i|` for `q = ∞`.
pub fn weighted_norm(v: &GridFunction, q: f64) -> Result<f64> {
    if q.is_nan() || q < 1.0 {
        return Err(SqpError::InvalidExponent(q));
    }
    if q.is_infinite() {
        return Ok(v.norm_inf());
    }
    let w = v.space.weights();
    let x = &v.values;
    // scale by the max to avoid overflow for large q
    let m = v.norm_inf();
    if m == 0.0 {
        return Ok(0.0);
    }
    let s = if q == 2.0 {
        exec::sum_indexed(x.len(), |i| w[i] * (x[i] / m) * (x[i] / m))
    } else if q == 1.0 {
        exec::sum_indexed(x.len(), |i| w[i] * (x[i] / m).abs())
    } else {
        exec::sum_indexed(x.len(), |i| w[i] * (x[i] / m).abs().powf(q))
    };
    Ok(m * s.powf(1.0 / q))
}

/// μ-weighted `L²` pairing `Σ w_i v_i u_i`.
pub fn weighted_inner(v: &GridFunction, w: &GridFunction) -> Result<f64> {
    v.check_same_space(w)?;
    let mu = v.space.weights();
    Ok(exec::sum_indexed(v.len(), |i| mu[i] * v.values[i] * w.values[i]))
}

/// Pointwise projection onto `[lower, upper]`.
pub fn project_box(v: &GridFunction, b: &BoxBounds) -> GridFunction {
    v.map(|x| b.clamp(x))
}

/// Classifies each point as lower-active (`v ≤ α + tol`), upper-active
/// (`v ≥ β − tol`) or free. A point satisfying both tests is reported
/// lower-active.
pub fn classify_active(v: &GridFunction, b: &BoxBounds, tol: f64) -> ActiveSetPartition {
    let states: Vec<PointState> = v
        .values
        .iter()
        .map(|&x| classify_point(x, b, tol))
        .collect();
    ActiveSetPartition::from_states(&states)
}

#[inline]
pub(crate) fn classify_point(x: f64, b: &BoxBounds, tol: f64) -> PointState {
    if b.lower.is_finite() && x <= b.lower + tol {
        PointState::Lower
    } else if b.upper.is_finite() && x >= b.upper - tol {
        PointState::Upper
    } else {
        PointState::Free
    }
}
