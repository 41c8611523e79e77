//! Exact evaluation of finite element functions at the quadrature points of a
//! finer nested mesh, and the intergrid mass coupling built from it.

use crate::error::{Error, Result};
use crate::mesh::{MeshHierarchy, Point};
use crate::mini_spaces::{local_basis_unchecked, QuadratureRule};
use crate::operators::Discretization;
use crate::sparse::{CsrMatrix, TripletBuilder};

/// Rule used for error norms: products of two cubics are integrated exactly.
pub const TRANSFER_QUADRATURE_DEGREE: usize = 6;

/// Basis data of one discretization tabulated at the quadrature points of a
/// (possibly finer) nested mesh.
#[derive(Debug, Clone)]
pub struct PointSampler {
    n_scalar: usize,
    pub weights: Vec<f64>,
    pub points: Vec<Point>,
    element: Vec<u32>,
    local: Vec<[Option<usize>; 4]>,
    values: Vec<[f64; 4]>,
    grads: Vec<[[f64; 2]; 4]>,
}

/// Values and gradients of a vector field at sampler points; `grad[c][k] = ∂_k u_c`.
#[derive(Debug, Clone, Default)]
pub struct SampledField {
    pub values: Vec<[f64; 2]>,
    pub grads: Vec<[[f64; 2]; 2]>,
}

impl PointSampler {
    /// `disc` must live on level `own_level` of `hierarchy`; points are taken
    /// from level `point_level >= own_level`.
    pub fn new(
        disc: &Discretization,
        hierarchy: &MeshHierarchy,
        own_level: usize,
        point_level: usize,
        degree: usize,
    ) -> Result<Self> {
        if point_level < own_level || point_level > hierarchy.finest() {
            return Err(Error::invalid(format!(
                "cannot sample level {own_level} on level {point_level}"
            )));
        }
        if hierarchy.mesh(own_level).n_triangles() != disc.mesh.n_triangles() {
            return Err(Error::invalid(
                "discretization does not match the hierarchy level",
            ));
        }
        let rule = QuadratureRule::new(degree)?;
        let fine = hierarchy.mesh(point_level);
        let n = fine.n_triangles() * rule.len();
        let mut s = Self {
            n_scalar: disc.n_scalar(),
            weights: Vec::with_capacity(n),
            points: Vec::with_capacity(n),
            element: Vec::with_capacity(n),
            local: disc.local.clone(),
            values: Vec::with_capacity(n),
            grads: Vec::with_capacity(n),
        };
        for tf in 0..fine.n_triangles() {
            let area = fine.area(tf);
            let pts = fine.triangle_points(tf);
            let tc = hierarchy.ancestor(point_level, own_level, tf);
            let geom = &disc.geometry[tc];
            for (k, b) in rule.points.iter().enumerate() {
                let x = [
                    b[0] * pts[0][0] + b[1] * pts[1][0] + b[2] * pts[2][0],
                    b[0] * pts[0][1] + b[1] * pts[1][1] + b[2] * pts[2][1],
                ];
                let basis = local_basis_unchecked(geom.to_barycentric(x));
                s.weights.push(2.0 * area * rule.weights[k]);
                s.points.push(x);
                s.element.push(tc as u32);
                s.values.push(basis.values);
                s.grads.push(geom.physical_gradients(&basis));
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_velocity(&self) -> usize {
        2 * self.n_scalar
    }

    pub fn sample(&self, u: &[f64]) -> SampledField {
        let mut f = SampledField::default();
        self.sample_into(u, &mut f);
        f
    }

    pub fn sample_into(&self, u: &[f64], out: &mut SampledField) {
        assert_eq!(u.len(), 2 * self.n_scalar);
        let ns = self.n_scalar;
        out.values.clear();
        out.grads.clear();
        for q in 0..self.len() {
            let local = &self.local[self.element[q] as usize];
            let mut val = [0.0; 2];
            let mut grad = [[0.0; 2]; 2];
            for (a, d) in local.iter().enumerate() {
                if let Some(d) = *d {
                    for c in 0..2 {
                        let coef = u[c * ns + d];
                        val[c] += coef * self.values[q][a];
                        grad[c][0] += coef * self.grads[q][a][0];
                        grad[c][1] += coef * self.grads[q][a][1];
                    }
                }
            }
            out.values.push(val);
            out.grads.push(grad);
        }
    }

    /// Squared L² norm and squared H¹ seminorm of `a - b`.
    pub fn difference_norms_sq(&self, a: &SampledField, b: &SampledField) -> (f64, f64) {
        assert_eq!(a.values.len(), self.len());
        assert_eq!(b.values.len(), self.len());
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for q in 0..self.len() {
            let w = self.weights[q];
            let dv = [
                a.values[q][0] - b.values[q][0],
                a.values[q][1] - b.values[q][1],
            ];
            l2 += w * (dv[0] * dv[0] + dv[1] * dv[1]);
            let mut g = 0.0;
            for c in 0..2 {
                for k in 0..2 {
                    let d = a.grads[q][c][k] - b.grads[q][c][k];
                    g += d * d;
                }
            }
            h1 += w * g;
        }
        (l2, h1)
    }

    /// Squared L² and H¹ seminorm errors against a smooth field and its gradient.
    pub fn error_against(
        &self,
        u: &SampledField,
        f: &dyn Fn(Point) -> ([f64; 2], [[f64; 2]; 2]),
    ) -> (f64, f64) {
        let mut l2 = 0.0;
        let mut h1 = 0.0;
        for q in 0..self.len() {
            let (v, g) = f(self.points[q]);
            let w = self.weights[q];
            let dv = [u.values[q][0] - v[0], u.values[q][1] - v[1]];
            l2 += w * (dv[0] * dv[0] + dv[1] * dv[1]);
            let mut s = 0.0;
            for c in 0..2 {
                for k in 0..2 {
                    let d = u.grads[q][c][k] - g[c][k];
                    s += d * d;
                }
            }
            h1 += w * s;
        }
        (l2, h1)
    }
}

/// `C[i, j] = ∫ φ^a_i · φ^b_j` for two samplers sharing the same points.
pub fn cross_mass(a: &PointSampler, b: &PointSampler) -> Result<CsrMatrix> {
    if a.points != b.points {
        return Err(Error::invalid(
            "samplers are defined on different point sets",
        ));
    }
    let mut tb = TripletBuilder::with_capacity(a.n_scalar, b.n_scalar, 16 * a.len());
    for q in 0..a.len() {
        let la = &a.local[a.element[q] as usize];
        let lb = &b.local[b.element[q] as usize];
        let w = a.weights[q];
        for (i, di) in la.iter().enumerate() {
            let Some(di) = *di else { continue };
            for (j, dj) in lb.iter().enumerate() {
                let Some(dj) = *dj else { continue };
                tb.push(di, dj, w * a.values[q][i] * b.values[q][j]);
            }
        }
    }
    Ok(tb.build().block_diag2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseModel;
    use crate::operators::{random_vector, OperatorSet};
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;
    use std::sync::Arc;

    #[test]
    fn coarse_functions_are_reproduced_on_fine_points() {
        let h = MeshHierarchy::unit_square(3);
        let coarse =
            OperatorSet::assemble(Arc::new(h.mesh(1).clone()), &NoiseModel::empty()).unwrap();
        let sc = PointSampler::new(&coarse.disc, &h, 1, 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_vector(coarse.n_velocity(), &mut rng);
        // the L² norm on fine points equals uᵀMu on the coarse mesh
        let f = sc.sample(&u);
        let zero = sc.sample(&vec![0.0; u.len()]);
        let (l2, h1) = sc.difference_norms_sq(&f, &zero);
        assert!((l2 - coarse.l2_norm_sq(&u)).abs() < 1e-13 * l2);
        assert!((h1 - coarse.h1_seminorm_sq(&u)).abs() < 1e-12 * h1);
    }

    #[test]
    fn cross_mass_of_a_level_with_itself_is_the_mass() {
        let h = MeshHierarchy::unit_square(2);
        let ops = OperatorSet::assemble(Arc::new(h.mesh(2).clone()), &NoiseModel::empty()).unwrap();
        let s = PointSampler::new(&ops.disc, &h, 2, 2, 6).unwrap();
        let c = cross_mass(&s, &s).unwrap();
        let d = c.add_scaled(1.0, &ops.mass, -1.0);
        assert!(d.triplets().all(|(_, _, v)| v.abs() < 1e-15));
    }

    #[test]
    fn level_mismatch_is_rejected() {
        let h = MeshHierarchy::unit_square(2);
        let ops = OperatorSet::assemble(Arc::new(h.mesh(2).clone()), &NoiseModel::empty()).unwrap();
        assert!(PointSampler::new(&ops.disc, &h, 2, 1, 6).is_err());
        assert!(PointSampler::new(&ops.disc, &h, 1, 2, 6).is_err());
    }
}
