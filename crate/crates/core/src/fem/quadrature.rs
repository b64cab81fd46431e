//! Simplex quadrature rules in barycentric coordinates.
//!
//! Weights are normalised to sum to one; multiply by the simplex volume.

/// Quadrature rule on the reference simplex of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexRule {
    pub dim: usize,
    /// Barycentric coordinates, `dim + 1` per point.
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl SimplexRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Rule exact for polynomials of degree 3 in the given dimension.
    pub fn cubic(dim: usize) -> Self {
        match dim {
            1 => gauss3_segment(),
            2 => six_point_triangle(),
            3 => ten_point_tetrahedron(),
            _ => panic!("no quadrature rule for dimension {dim}"),
        }
    }
}

/// Three-point Gauss–Legendre rule (degree 5).
fn gauss3_segment() -> SimplexRule {
    let a = 0.5 - 0.1 * 15f64.sqrt();
    let pts = [a, 0.5, 1.0 - a];
    SimplexRule {
        dim: 1,
        points: pts.iter().map(|&x| vec![1.0 - x, x]).collect(),
        weights: vec![5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0],
    }
}

/// Six-point symmetric triangle rule with positive weights (degree 4).
fn six_point_triangle() -> SimplexRule {
    let (a, wa) = (0.445_948_490_915_965, 0.223_381_589_678_011);
    let (b, wb) = (0.091_576_213_509_771, 0.109_951_743_655_322);
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (x, w) in [(a, wa), (b, wb)] {
        let y = 1.0 - 2.0 * x;
        for k in 0..3 {
            let mut p = vec![x; 3];
            p[k] = y;
            points.push(p);
            weights.push(w);
        }
    }
    SimplexRule {
        dim: 2,
        points,
        weights,
    }
}

/// Ten-point symmetric tetrahedron rule (degree 3): one orbit of four points
/// near the vertices and one orbit of six points near the edge midpoints.
fn ten_point_tetrahedron() -> SimplexRule {
    const A: f64 = 0.778_495_294_821_331_2;
    const C: f64 = 0.406_244_343_884_049_95;
    const W_VERTEX: f64 = 0.047_633_134_843_208_9;
    let w_edge = (1.0 - 4.0 * W_VERTEX) / 6.0;
    let b = (1.0 - A) / 3.0;
    let d = 0.5 - C;
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for k in 0..4 {
        let mut p = vec![b; 4];
        p[k] = A;
        points.push(p);
        weights.push(W_VERTEX);
    }
    for i in 0..4 {
        for j in i + 1..4 {
            let mut p = vec![d; 4];
            p[i] = C;
            p[j] = C;
            points.push(p);
            weights.push(w_edge);
        }
    }
    SimplexRule {
        dim: 3,
        points,
        weights,
    }
}
