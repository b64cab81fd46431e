//! Uniform simplicial meshes of the unit interval, square and cube.

use crate::error::{Result, SqpError};

/// Uniform mesh of `(0,1)^d` with `2^N` cells per side, each cube split into
/// `d!` simplices by the Kuhn (path) subdivision.
#[derive(Debug, Clone)]
pub struct SimplexMesh {
    dim: usize,
    refinement: u32,
    per_side: usize,
    coords: Vec<[f64; 3]>,
    /// `dim + 1` node indices per element.
    elements: Vec<usize>,
    volumes: Vec<f64>,
    /// Gradients of the barycentric functions, `(dim + 1) * dim` per element.
    gradients: Vec<f64>,
    on_boundary: Vec<bool>,
    /// Boundary facets: `dim` node indices each.
    facets: Vec<usize>,
    facet_measures: Vec<f64>,
}

impl SimplexMesh {
    pub fn unit_cube(dim: usize, refinement: u32) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(SqpError::Setup(format!("dimension {dim} not in 1..=3")));
        }
        if refinement > 12 {
            return Err(SqpError::Setup(format!("refinement {refinement} too large")));
        }
        let m = 1usize << refinement;
        let np = m + 1;
        let h = 1.0 / m as f64;
        let node_count = np.pow(dim as u32);
        let node_index = |ix: &[usize]| -> usize {
            ix.iter().rev().fold(0, |acc, &k| acc * np + k)
        };
        let mut coords = Vec::with_capacity(node_count);
        let mut on_boundary = Vec::with_capacity(node_count);
        for n in 0..node_count {
            let mut c = [0.0; 3];
            let mut rem = n;
            let mut bnd = false;
            for slot in c.iter_mut().take(dim) {
                let k = rem % np;
                rem /= np;
                *slot = k as f64 * h;
                bnd |= k == 0 || k == m;
            }
            coords.push(c);
            on_boundary.push(bnd);
        }

        let perms = permutations(dim);
        let cell_count = m.pow(dim as u32);
        let mut elements = Vec::with_capacity(cell_count * perms.len() * (dim + 1));
        for cell in 0..cell_count {
            let mut base = vec![0usize; dim];
            let mut rem = cell;
            for b in base.iter_mut() {
                *b = rem % m;
                rem /= m;
            }
            for perm in &perms {
                let mut ix = base.clone();
                elements.push(node_index(&ix));
                for &axis in perm {
                    ix[axis] += 1;
                    elements.push(node_index(&ix));
                }
            }
        }

        let ne = elements.len() / (dim + 1);
        let mut volumes = Vec::with_capacity(ne);
        let mut gradients = Vec::with_capacity(ne * (dim + 1) * dim);
        for e in 0..ne {
            let nodes = &elements[e * (dim + 1)..(e + 1) * (dim + 1)];
            let (vol, grads) = simplex_geometry(dim, nodes.iter().map(|&i| coords[i]).collect());
            volumes.push(vol);
            gradients.extend(grads);
        }

        let (facets, facet_measures) = boundary_facets(dim, &elements, &coords, m);
        Ok(Self {
            dim,
            refinement,
            per_side: m,
            coords,
            elements,
            volumes,
            gradients,
            on_boundary,
            facets,
            facet_measures,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn refinement(&self) -> u32 {
        self.refinement
    }

    pub fn mesh_size(&self) -> f64 {
        1.0 / self.per_side as f64
    }

    pub fn node_count(&self) -> usize {
        self.coords.len()
    }

    pub fn element_count(&self) -> usize {
        self.volumes.len()
    }

    pub fn coords(&self, node: usize) -> [f64; 3] {
        self.coords[node]
    }

    pub fn element(&self, e: usize) -> &[usize] {
        let k = self.dim + 1;
        &self.elements[e * k..(e + 1) * k]
    }

    pub fn volume(&self, e: usize) -> f64 {
        self.volumes[e]
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Gradient of the `local`-th barycentric function on element `e`.
    pub fn gradient(&self, e: usize, local: usize) -> &[f64] {
        let d = self.dim;
        let base = e * (d + 1) * d + local * d;
        &self.gradients[base..base + d]
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        self.on_boundary[node]
    }

    pub fn boundary_mask(&self) -> &[bool] {
        &self.on_boundary
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.node_count()).filter(|&i| self.on_boundary[i]).collect()
    }

    pub fn facet_count(&self) -> usize {
        self.facet_measures.len()
    }

    pub fn facet(&self, f: usize) -> &[usize] {
        &self.facets[f * self.dim..(f + 1) * self.dim]
    }

    pub fn facet_measure(&self, f: usize) -> f64 {
        self.facet_measures[f]
    }

    /// Row-sum lumped boundary mass per node (zero at interior nodes).
    pub fn lumped_boundary_mass(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.node_count()];
        for f in 0..self.facet_count() {
            let share = self.facet_measure(f) / self.dim as f64;
            for &n in self.facet(f) {
                m[n] += share;
            }
        }
        m
    }

    /// Physical point with barycentric coordinates `bary` in element `e`.
    pub fn map_point(&self, e: usize, bary: &[f64]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for (&n, &l) in self.element(e).iter().zip(bary) {
            for (xi, ci) in x.iter_mut().zip(self.coords[n]) {
                *xi += l * ci;
            }
        }
        x
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out.sort();
    out
}

/// Volume and barycentric gradients of a simplex.
fn simplex_geometry(dim: usize, x: Vec<[f64; 3]>) -> (f64, Vec<f64>) {
    // columns of the Jacobian are x_i - x_0
    let mut jac = vec![vec![0.0; dim]; dim];
    for (c, xi) in x.iter().skip(1).enumerate() {
        for r in 0..dim {
            jac[r][c] = xi[r] - x[0][r];
        }
    }
    let det = determinant(&jac);
    let fact: f64 = (1..=dim).map(|k| k as f64).product();
    let inv = inverse(&jac, det);
    // grad λ_i = row i-1 of J^{-1} for i ≥ 1, grad λ_0 = −Σ of the others
    let mut grads = vec![0.0; (dim + 1) * dim];
    for i in 1..=dim {
        for k in 0..dim {
            grads[i * dim + k] = inv[i - 1][k];
            grads[k] -= inv[i - 1][k];
        }
    }
    (det.abs() / fact, grads)
}

fn determinant(a: &[Vec<f64>]) -> f64 {
    match a.len() {
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        3 => {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        _ => unreachable!(),
    }
}

fn inverse(a: &[Vec<f64>], det: f64) -> Vec<Vec<f64>> {
    let n = a.len();
    match n {
        1 => vec![vec![1.0 / a[0][0]]],
        2 => vec![
            vec![a[1][1] / det, -a[0][1] / det],
            vec![-a[1][0] / det, a[0][0] / det],
        ],
        3 => {
            let mut inv = vec![vec![0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
                }
            }
            inv
        }
        _ => unreachable!(),
    }
}

/// Facets lying in one of the planes `x_k = 0` or `x_k = 1`.
fn boundary_facets(
    dim: usize,
    elements: &[usize],
    coords: &[[f64; 3]],
    m: usize,
) -> (Vec<usize>, Vec<f64>) {
    let h = 1.0 / m as f64;
    let mut facets = Vec::new();
    let mut measures = Vec::new();
    let on_plane = |nodes: &[usize]| -> bool {
        (0..dim).any(|k| {
            [0.0, 1.0]
                .iter()
                .any(|&side| nodes.iter().all(|&n| (coords[n][k] - side).abs() < 0.25 * h))
        })
    };
    for el in elements.chunks(dim + 1) {
        for skip in 0..=dim {
            let f: Vec<usize> = el
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, &n)| n)
                .collect();
            if on_plane(&f) {
                let measure = match dim {
                    1 => 1.0,
                    2 => {
                        let (a, b) = (coords[f[0]], coords[f[1]]);
                        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
                    }
                    _ => {
                        let (a, b, c) = (coords[f[0]], coords[f[1]], coords[f[2]]);
                        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                        let cr = [
                            u[1] * v[2] - u[2] * v[1],
                            u[2] * v[0] - u[0] * v[2],
                            u[0] * v[1] - u[1] * v[0],
                        ];
                        0.5 * (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt()
                    }
                };
                facets.extend(f);
                measures.push(measure);
            }
        }
    }
    (facets, measures)
}
