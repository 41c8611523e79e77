//! MINI element: continuous P1 velocity enriched with the cubic bubble
//! `λ₁λ₂λ₃` on every triangle (zero on the boundary), continuous P1 pressure.
//!
//! Velocity coefficient vectors are laid out component-major over the free
//! scalar dofs: `[x-component | y-component]`, each block holding first the
//! interior vertices and then one bubble per triangle.

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};

/// Barycentric point `(λ₁, λ₂, λ₃)`.
pub type Barycentric = [f64; 3];

/// Triangle quadrature on the reference simplex, area 1/2.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub points: Vec<Barycentric>,
    pub weights: Vec<f64>,
    pub exact_degree: usize,
}

pub const DEFAULT_QUADRATURE_DEGREE: usize = 10;
pub const MAX_QUADRATURE_DEGREE: usize = 40;

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

impl QuadratureRule {
    /// Collapsed (Duffy) tensor Gauss rule. Points are interior, weights positive.
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_QUADRATURE_DEGREE {
            return Err(Error::Unsupported(format!(
                "quadrature degree {degree} outside supported range 1..={MAX_QUADRATURE_DEGREE}"
            )));
        }
        // The collapsed direction carries the Jacobian factor (1 - u).
        let n = (degree + 2).div_ceil(2);
        let (x, w) = gauss_legendre(n);
        let mut points = Vec::with_capacity(n * n);
        let mut weights = Vec::with_capacity(n * n);
        for i in 0..n {
            let u = 0.5 * (x[i] + 1.0);
            for j in 0..n {
                let v = 0.5 * (x[j] + 1.0);
                let (xi, eta) = (u, (1.0 - u) * v);
                points.push([1.0 - xi - eta, xi, eta]);
                weights.push(0.25 * w[i] * w[j] * (1.0 - u));
            }
        }
        Ok(Self {
            points,
            weights,
            exact_degree: 2 * n - 2,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Values and barycentric-coordinate derivatives of the four local scalar
/// shape functions (three vertex functions, then the bubble).
#[derive(Debug, Clone, Copy)]
pub struct LocalBasis {
    pub values: [f64; 4],
    /// `d_bary[i][j] = ∂φ_i / ∂λ_j`
    pub d_bary: [[f64; 3]; 4],
}

pub fn evaluate_local_basis(p: Barycentric) -> Result<LocalBasis> {
    const TOL: f64 = 1e-12;
    if p.iter().any(|&l| l < -TOL || !l.is_finite()) || (p.iter().sum::<f64>() - 1.0).abs() > TOL {
        return Err(Error::invalid(format!(
            "point {p:?} is outside the reference simplex"
        )));
    }
    Ok(local_basis_unchecked(p))
}

#[inline]
pub(crate) fn local_basis_unchecked(p: Barycentric) -> LocalBasis {
    let [l1, l2, l3] = p;
    LocalBasis {
        values: [l1, l2, l3, l1 * l2 * l3],
        d_bary: [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [l2 * l3, l1 * l3, l1 * l2],
        ],
    }
}

/// Affine data of one triangle.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub points: [Point; 3],
    pub area: f64,
    /// Constant physical gradients of the barycentric coordinates.
    pub grad_lambda: [[f64; 2]; 3],
}

impl ElementGeometry {
    pub fn new(mesh: &Mesh, t: usize) -> Result<Self> {
        Self::from_points(mesh.triangle_points(t)).map_err(|e| match e {
            Error::DegenerateElement { area, .. } => Error::DegenerateElement { triangle: t, area },
            e => e,
        })
    }

    pub fn from_points(points: [Point; 3]) -> Result<Self> {
        let [p0, p1, p2] = points;
        let area = crate::mesh::signed_area(p0, p1, p2);
        if !(area > 0.0) || !area.is_finite() {
            return Err(Error::DegenerateElement {
                triangle: usize::MAX,
                area,
            });
        }
        let s = 1.0 / (2.0 * area);
        let grad_lambda = [
            [(p1[1] - p2[1]) * s, (p2[0] - p1[0]) * s],
            [(p2[1] - p0[1]) * s, (p0[0] - p2[0]) * s],
            [(p0[1] - p1[1]) * s, (p1[0] - p0[0]) * s],
        ];
        Ok(Self {
            points,
            area,
            grad_lambda,
        })
    }

    pub fn to_physical(&self, b: Barycentric) -> Point {
        let [p0, p1, p2] = self.points;
        [
            b[0] * p0[0] + b[1] * p1[0] + b[2] * p2[0],
            b[0] * p0[1] + b[1] * p1[1] + b[2] * p2[1],
        ]
    }

    /// Barycentric coordinates of a physical point (may be outside the triangle).
    pub fn to_barycentric(&self, x: Point) -> Barycentric {
        let [p0, _, _] = self.points;
        let d = [x[0] - p0[0], x[1] - p0[1]];
        let g = self.grad_lambda;
        let l1 = g[1][0] * d[0] + g[1][1] * d[1];
        let l2 = g[2][0] * d[0] + g[2][1] * d[1];
        [1.0 - l1 - l2, l1, l2]
    }

    /// Physical gradients of the four local functions.
    #[inline]
    pub fn physical_gradients(&self, basis: &LocalBasis) -> [[f64; 2]; 4] {
        let g = self.grad_lambda;
        basis.d_bary.map(|d| {
            [
                d[0] * g[0][0] + d[1] * g[1][0] + d[2] * g[2][0],
                d[0] * g[0][1] + d[1] * g[1][1] + d[2] * g[2][1],
            ]
        })
    }
}

/// Basis values tabulated at the points of a quadrature rule.
#[derive(Debug, Clone)]
pub struct TabulatedBasis {
    pub rule: QuadratureRule,
    pub basis: Vec<LocalBasis>,
}

impl TabulatedBasis {
    pub fn new(rule: QuadratureRule) -> Self {
        let basis = rule
            .points
            .iter()
            .map(|&p| local_basis_unchecked(p))
            .collect();
        Self { rule, basis }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PressureGauge {
    /// Discrete mean-zero constraint via one extra scalar multiplier.
    MeanZero,
    /// Pressure dof at this vertex fixed to zero.
    Pin(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityBoundary {
    /// Boundary vertex dofs eliminated (homogeneous Dirichlet).
    NoSlip,
    /// Every vertex carries dofs; only used to inspect unconstrained operators.
    Unconstrained,
}

/// Degree-of-freedom bookkeeping for the MINI pair on one mesh.
#[derive(Debug, Clone)]
pub struct DofMap {
    vertex_dof: Vec<Option<usize>>,
    n_vertex_dofs: usize,
    n_triangles: usize,
    n_vertices: usize,
    /// Per unconstrained velocity dof (2 × (vertices + triangles), component-major):
    /// false exactly on boundary-vertex dofs.
    interior_mask: Vec<bool>,
    pub pressure_gauge: PressureGauge,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        Self::with_options(mesh, VelocityBoundary::NoSlip, PressureGauge::MeanZero)
    }

    pub fn with_options(mesh: &Mesh, boundary: VelocityBoundary, gauge: PressureGauge) -> Self {
        let mut next = 0;
        let vertex_dof = mesh
            .boundary_vertex()
            .iter()
            .map(|&b| {
                if b && boundary == VelocityBoundary::NoSlip {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect();
        let nv = mesh.n_vertices();
        let nt = mesh.n_triangles();
        let scalar_mask: Vec<bool> = mesh
            .boundary_vertex()
            .iter()
            .map(|&b| !b)
            .chain(std::iter::repeat_n(true, nt))
            .collect();
        let interior_mask = [scalar_mask.clone(), scalar_mask].concat();
        Self {
            vertex_dof,
            n_vertex_dofs: next,
            n_triangles: nt,
            n_vertices: nv,
            interior_mask,
            pressure_gauge: gauge,
        }
    }

    /// Free scalar dofs: free vertices followed by bubbles.
    pub fn n_scalar(&self) -> usize {
        self.n_vertex_dofs + self.n_triangles
    }

    pub fn n_velocity(&self) -> usize {
        2 * self.n_scalar()
    }

    pub fn n_pressure(&self) -> usize {
        self.n_vertices
    }

    pub fn n_vertex_dofs(&self) -> usize {
        self.n_vertex_dofs
    }

    pub fn vertex_dof(&self, v: usize) -> Option<usize> {
        self.vertex_dof[v]
    }

    pub fn bubble_dof(&self, t: usize) -> usize {
        self.n_vertex_dofs + t
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior_mask
    }

    /// Scalar dofs of the four local functions of triangle `t`.
    pub fn local_scalar(&self, mesh: &Mesh, t: usize) -> [Option<usize>; 4] {
        let [a, b, c] = mesh.triangles()[t];
        [
            self.vertex_dof[a],
            self.vertex_dof[b],
            self.vertex_dof[c],
            Some(self.bubble_dof(t)),
        ]
    }

    /// Coefficient vector of the interpolant of a vector field (vertex values,
    /// bubble coefficient chosen so the centroid value matches).
    pub fn interpolate(&self, mesh: &Mesh, f: impl Fn(Point) -> [f64; 2]) -> Vec<f64> {
        let ns = self.n_scalar();
        let mut out = vec![0.0; 2 * ns];
        for (v, p) in mesh.vertices().iter().enumerate() {
            if let Some(d) = self.vertex_dof[v] {
                let val = f(*p);
                out[d] = val[0];
                out[ns + d] = val[1];
            }
        }
        for t in 0..mesh.n_triangles() {
            let pts = mesh.triangle_points(t);
            let c = [
                (pts[0][0] + pts[1][0] + pts[2][0]) / 3.0,
                (pts[0][1] + pts[1][1] + pts[2][1]) / 3.0,
            ];
            let fc = f(c);
            let tri = mesh.triangles()[t];
            let mut lin = [0.0; 2];
            for &v in &tri {
                if let Some(d) = self.vertex_dof[v] {
                    lin[0] += out[d] / 3.0;
                    lin[1] += out[ns + d] / 3.0;
                }
            }
            let b = self.bubble_dof(t);
            out[b] = 27.0 * (fc[0] - lin[0]);
            out[ns + b] = 27.0 * (fc[1] - lin[1]);
        }
        out
    }
}

/// Evaluates a velocity field (value and gradient) of coefficient vector `u`
/// on triangle `t` at the tabulated points.
pub(crate) fn eval_velocity_at(
    dofs: &DofMap,
    local: &[Option<usize>; 4],
    geom: &ElementGeometry,
    basis: &LocalBasis,
    u: &[f64],
) -> ([f64; 2], [[f64; 2]; 2]) {
    let ns = dofs.n_scalar();
    let grads = geom.physical_gradients(basis);
    let mut val = [0.0; 2];
    let mut grad = [[0.0; 2]; 2];
    for (a, d) in local.iter().enumerate() {
        if let Some(d) = *d {
            for c in 0..2 {
                let coef = u[c * ns + d];
                val[c] += coef * basis.values[a];
                grad[c][0] += coef * grads[a][0];
                grad[c][1] += coef * grads[a][1];
            }
        }
    }
    (val, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;
    use proptest::prelude::*;

    fn factorial(n: usize) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    /// ∫_K λ₁^a λ₂^b λ₃^c dA = 2|K| a! b! c! / (a+b+c+2)!
    fn moment(area: f64, a: usize, b: usize, c: usize) -> f64 {
        2.0 * area * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2)
    }

    fn integrate(rule: &QuadratureRule, area: f64, f: impl Fn(Barycentric) -> f64) -> f64 {
        2.0 * area
            * rule
                .points
                .iter()
                .zip(&rule.weights)
                .map(|(&p, &w)| w * f(p))
                .sum::<f64>()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..12 {
            let (x, w) = gauss_legendre(n);
            for k in 0..2 * n {
                let exact = if k % 2 == 0 {
                    2.0 / (k + 1) as f64
                } else {
                    0.0
                };
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
                assert!((q - exact).abs() < 1e-13, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn rule_weights_positive_and_sum_to_half() {
        for d in 1..=MAX_QUADRATURE_DEGREE {
            let r = QuadratureRule::new(d).unwrap();
            assert!(r.exact_degree >= d);
            assert!(r.weights.iter().all(|&w| w > 0.0));
            assert!((r.weights.iter().sum::<f64>() - 0.5).abs() < 1e-14);
            assert!(r.points.iter().all(|p| p.iter().all(|&l| l > 0.0)));
        }
    }

    #[test]
    fn unsupported_degrees_rejected() {
        assert!(matches!(QuadratureRule::new(0), Err(Error::Unsupported(_))));
        assert!(QuadratureRule::new(MAX_QUADRATURE_DEGREE + 1).is_err());
    }

    #[test]
    fn default_rule_moments() {
        let r = QuadratureRule::new(DEFAULT_QUADRATURE_DEGREE).unwrap();
        assert!(r.exact_degree >= 10);
        let area = 0.37;
        assert!((integrate(&r, area, |_| 1.0) - area).abs() < 1e-15);
        assert!((integrate(&r, area, |l| l[0] * l[1] * l[2]) - area / 60.0).abs() < 1e-15);
        assert!((integrate(&r, area, |l| l[0] * l[0]) - area / 6.0).abs() < 1e-15);
    }

    #[test]
    fn every_rule_matches_the_moment_formula() {
        for d in [1, 2, 5, 10, 13, 20] {
            let r = QuadratureRule::new(d).unwrap();
            for a in 0..=r.exact_degree {
                for b in 0..=r.exact_degree - a {
                    for c in 0..=r.exact_degree - a - b {
                        let q = integrate(&r, 1.0, |l| {
                            l[0].powi(a as i32) * l[1].powi(b as i32) * l[2].powi(c as i32)
                        });
                        let m = moment(1.0, a, b, c);
                        assert!((q - m).abs() < 1e-13 * m.max(1e-3), "d={d} ({a},{b},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn bubble_values() {
        let c = evaluate_local_basis([1.0 / 3.0; 3]).unwrap();
        assert!((c.values[3] - 1.0 / 27.0).abs() < 1e-16);
        let e = evaluate_local_basis([0.0, 0.3, 0.7]).unwrap();
        assert_eq!(e.values[3], 0.0);
        assert!(evaluate_local_basis([1.2, -0.1, -0.1]).is_err());
        assert!(evaluate_local_basis([0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn bubble_gradient_integrates_to_zero() {
        let rule = QuadratureRule::new(4).unwrap();
        let geom = ElementGeometry::from_points([[0.1, 0.2], [0.9, 0.4], [0.3, 1.1]]).unwrap();
        let mut s = [0.0; 2];
        for (&p, &w) in rule.points.iter().zip(&rule.weights) {
            let g = geom.physical_gradients(&local_basis_unchecked(p));
            s[0] += w * g[3][0];
            s[1] += w * g[3][1];
        }
        assert!(s[0].abs() < 1e-15 && s[1].abs() < 1e-15);
    }

    #[test]
    fn linear_fields_are_reproduced() {
        let mesh = Mesh::structured_square(3).unwrap();
        let dofs = DofMap::with_options(
            &mesh,
            VelocityBoundary::Unconstrained,
            PressureGauge::MeanZero,
        );
        let f = |p: Point| [1.0 + 2.0 * p[0] - p[1], -0.5 + p[1] * 3.0];
        let u = dofs.interpolate(&mesh, f);
        let tab = TabulatedBasis::new(QuadratureRule::new(3).unwrap());
        for t in 0..mesh.n_triangles() {
            let geom = ElementGeometry::new(&mesh, t).unwrap();
            let local = dofs.local_scalar(&mesh, t);
            for (p, b) in tab.rule.points.iter().zip(&tab.basis) {
                let (val, grad) = eval_velocity_at(&dofs, &local, &geom, b, &u);
                let exact = f(geom.to_physical(*p));
                assert!((val[0] - exact[0]).abs() < 1e-13 && (val[1] - exact[1]).abs() < 1e-13);
                assert!((grad[0][0] - 2.0).abs() < 1e-12 && (grad[1][1] - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dof_counts() {
        let mesh = Mesh::structured_square(4).unwrap();
        let d = DofMap::new(&mesh);
        assert_eq!(
            d.n_velocity(),
            2 * mesh.n_interior_vertices() + 2 * mesh.n_triangles()
        );
        assert_eq!(d.n_pressure(), mesh.n_vertices());
        let ns = mesh.n_vertices() + mesh.n_triangles();
        for t in 0..mesh.n_triangles() {
            assert!(d.interior_mask()[mesh.n_vertices() + t]);
            assert!(d.interior_mask()[ns + mesh.n_vertices() + t]);
        }
        let masked = d.interior_mask().iter().filter(|&&m| !m).count();
        assert_eq!(masked, 2 * (mesh.n_vertices() - mesh.n_interior_vertices()));
    }

    #[test]
    fn barycentric_roundtrip() {
        let geom = ElementGeometry::from_points([[0.1, 0.2], [0.9, 0.4], [0.3, 1.1]]).unwrap();
        let b = [0.2, 0.5, 0.3];
        let back = geom.to_barycentric(geom.to_physical(b));
        for k in 0..3 {
            assert!((back[k] - b[k]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (l2, l3) = if a + b <= 1.0 { (a, b) } else { (1.0 - a, 1.0 - b) };
            let basis = evaluate_local_basis([1.0 - l2 - l3, l2, l3]).unwrap();
            prop_assert!((basis.values[..3].iter().sum::<f64>() - 1.0).abs() < 1e-14);
            prop_assert!(basis.values[3] >= 0.0 && basis.values[3] <= 1.0 / 27.0 + 1e-16);
        }
    }
}
