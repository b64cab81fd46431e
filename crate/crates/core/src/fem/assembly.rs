//! Continuous piecewise linear finite element space on a [`SimplexMesh`].
//!
//! Element contributions are computed (possibly in parallel) into local
//! buffers and scattered sequentially in element order, so assembled values
//! do not depend on the execution mode.

use std::sync::Arc;

use super::mesh::SimplexMesh;
use super::quadrature::SimplexRule;
use super::sparse::{Pattern, SparseMatrix};
use crate::exec;

#[derive(Debug, Clone)]
pub struct P1Space {
    mesh: Arc<SimplexMesh>,
    pattern: Arc<Pattern>,
    /// Storage positions of the local `(d+1)²` entries, per element.
    positions: Vec<usize>,
    rule: SimplexRule,
    qp_coords: Vec<[f64; 3]>,
    stiffness: SparseMatrix,
    mass: SparseMatrix,
}

impl P1Space {
    pub fn new(mesh: Arc<SimplexMesh>) -> Self {
        let d = mesh.dim();
        let k = d + 1;
        let ne = mesh.element_count();
        let pattern = Pattern::from_pairs(
            mesh.node_count(),
            (0..ne).flat_map(|e| {
                let el = mesh.element(e).to_vec();
                (0..k).flat_map(move |i| {
                    let el = el.clone();
                    (0..k).map(move |j| (el[i], el[j]))
                })
            }),
        );
        let mut positions = Vec::with_capacity(ne * k * k);
        for e in 0..ne {
            let el = mesh.element(e);
            for &a in el {
                for &b in el {
                    positions.push(pattern.position(a, b).expect("element pair in pattern"));
                }
            }
        }
        let rule = SimplexRule::cubic(d);
        let nq = rule.len();
        let qp_coords = exec::map_indexed(ne * nq, |i| {
            mesh.map_point(i / nq, &rule.points[i % nq])
        });

        let mut space = Self {
            stiffness: SparseMatrix::zeros(&pattern),
            mass: SparseMatrix::zeros(&pattern),
            mesh,
            pattern,
            positions,
            rule,
            qp_coords,
        };
        space.stiffness = space.assemble_local(|s, e, local| {
            let vol = s.mesh.volume(e);
            for i in 0..k {
                for j in 0..k {
                    let gi = s.mesh.gradient(e, i);
                    let gj = s.mesh.gradient(e, j);
                    local[i * k + j] = vol * gi.iter().zip(gj).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
        let denom = ((d + 1) * (d + 2)) as f64;
        space.mass = space.assemble_local(|s, e, local| {
            let base = s.mesh.volume(e) / denom;
            for i in 0..k {
                for j in 0..k {
                    local[i * k + j] = if i == j { 2.0 * base } else { base };
                }
            }
        });
        space
    }

    pub fn mesh(&self) -> &Arc<SimplexMesh> {
        &self.mesh
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn node_count(&self) -> usize {
        self.mesh.node_count()
    }

    /// `∫ ∇φ_i · ∇φ_j`.
    pub fn stiffness(&self) -> &SparseMatrix {
        &self.stiffness
    }

    /// Consistent mass `∫ φ_i φ_j`.
    pub fn mass(&self) -> &SparseMatrix {
        &self.mass
    }

    pub fn rule(&self) -> &SimplexRule {
        &self.rule
    }

    pub fn qp_per_element(&self) -> usize {
        self.rule.len()
    }

    /// Physical coordinates of quadrature point `q` of element `e`.
    pub fn qp_coord(&self, e: usize, q: usize) -> [f64; 3] {
        self.qp_coords[e * self.rule.len() + q]
    }

    pub fn qp_count(&self) -> usize {
        self.qp_coords.len()
    }

    /// Values of the P1 interpolant of `nodal` at every quadrature point.
    pub fn values_at_qp(&self, nodal: &[f64]) -> Vec<f64> {
        let nq = self.rule.len();
        exec::map_indexed(self.qp_coords.len(), |i| {
            let (e, q) = (i / nq, i % nq);
            self.mesh
                .element(e)
                .iter()
                .zip(&self.rule.points[q])
                .map(|(&n, &l)| l * nodal[n])
                .sum()
        })
    }

    /// Nodal interpolant of a function of the coordinates.
    pub fn interpolate(&self, f: impl Fn([f64; 3]) -> f64) -> Vec<f64> {
        (0..self.node_count()).map(|n| f(self.mesh.coords(n))).collect()
    }

    /// `Σ_e Σ_q w_q |e| c(e, q)` for values given per quadrature point.
    pub fn integrate(&self, c: &[f64]) -> f64 {
        let nq = self.rule.len();
        exec::sum_indexed(self.mesh.element_count(), |e| {
            let vol = self.mesh.volume(e);
            (0..nq).map(|q| self.rule.weights[q] * c[e * nq + q]).sum::<f64>() * vol
        })
    }

    /// Load vector `∫ c φ_i` by quadrature, `c` given per quadrature point.
    pub fn load(&self, c: &[f64]) -> Vec<f64> {
        let k = self.mesh.dim() + 1;
        let nq = self.rule.len();
        let locals = exec::map_indexed(self.mesh.element_count(), |e| {
            let vol = self.mesh.volume(e);
            let mut out = vec![0.0; k];
            for q in 0..nq {
                let wc = self.rule.weights[q] * vol * c[e * nq + q];
                for (o, l) in out.iter_mut().zip(&self.rule.points[q]) {
                    *o += wc * l;
                }
            }
            out
        });
        let mut b = vec![0.0; self.node_count()];
        for (e, local) in locals.iter().enumerate() {
            for (&n, v) in self.mesh.element(e).iter().zip(local) {
                b[n] += v;
            }
        }
        b
    }

    /// Weighted mass `∫ c φ_i φ_j` by quadrature, `c` given per quadrature point.
    pub fn weighted_mass(&self, c: &[f64]) -> SparseMatrix {
        let k = self.mesh.dim() + 1;
        let nq = self.rule.len();
        self.assemble_local(|s, e, local| {
            let vol = s.mesh.volume(e);
            for q in 0..nq {
                let wc = s.rule.weights[q] * vol * c[e * nq + q];
                let l = &s.rule.points[q];
                for i in 0..k {
                    for j in 0..k {
                        local[i * k + j] += wc * l[i] * l[j];
                    }
                }
            }
        })
    }

    fn assemble_local<F>(&self, fill: F) -> SparseMatrix
    where
        F: Fn(&Self, usize, &mut [f64]) + Sync + Send,
    {
        let k = self.mesh.dim() + 1;
        let kk = k * k;
        let locals = exec::map_indexed(self.mesh.element_count(), |e| {
            let mut local = vec![0.0; kk];
            fill(self, e, &mut local);
            local
        });
        let mut m = SparseMatrix::zeros(&self.pattern);
        for (e, local) in locals.iter().enumerate() {
            for (pos, v) in self.positions[e * kk..(e + 1) * kk].iter().zip(local) {
                m.add_at_position(*pos, *v);
            }
        }
        m
    }
}
