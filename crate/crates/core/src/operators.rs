//! Assembled MINI operators and the projection / solve primitives built on
//! them: mass `M`, stiffness `K`, divergence coupling `B`, transport matrices
//! `T_n`, the discrete Helmholtz projection, the discrete Stokes operator, the
//! discrete transport operators and the Temam-stabilized convection term.
//!
//! The discretely divergence-free subspace is never given a basis. Membership
//! is enforced through saddle-point solves with a pressure multiplier.

use std::sync::{Arc, Mutex};

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};
use crate::mini_spaces::{
    eval_velocity_at, DofMap, ElementGeometry, PressureGauge, QuadratureRule, TabulatedBasis,
    VelocityBoundary, DEFAULT_QUADRATURE_DEGREE,
};
use crate::noise::NoiseModel;
use crate::sparse::{dot, norm2, CsrMatrix, TripletBuilder};

/// Relative residual above which a saddle solve is reported as broken down.
pub const SOLVE_TOLERANCE: f64 = 1e-10;
/// Relative `|Bv|` accepted as "discretely divergence-free".
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

/// Mesh plus dof bookkeeping plus cached element data.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub mesh: Arc<Mesh>,
    pub dofs: DofMap,
    pub geometry: Vec<ElementGeometry>,
    pub local: Vec<[Option<usize>; 4]>,
    pub tab: TabulatedBasis,
}

impl Discretization {
    pub fn new(mesh: Arc<Mesh>, dofs: DofMap, quadrature: QuadratureRule) -> Result<Self> {
        let geometry = (0..mesh.n_triangles())
            .map(|t| ElementGeometry::new(&mesh, t))
            .collect::<Result<Vec<_>>>()?;
        let local = (0..mesh.n_triangles())
            .map(|t| dofs.local_scalar(&mesh, t))
            .collect();
        Ok(Self {
            mesh,
            dofs,
            geometry,
            local,
            tab: TabulatedBasis::new(quadrature),
        })
    }

    pub fn n_velocity(&self) -> usize {
        self.dofs.n_velocity()
    }

    pub fn n_scalar(&self) -> usize {
        self.dofs.n_scalar()
    }

    pub fn n_pressure(&self) -> usize {
        self.dofs.n_pressure()
    }

    /// Dual vector `⟨f, w_h⟩` of a vector field, by element quadrature.
    pub fn load_vector(&self, f: &dyn Fn(Point) -> [f64; 2]) -> Vec<f64> {
        let ns = self.n_scalar();
        let mut out = vec![0.0; 2 * ns];
        for (geom, local) in self.geometry.iter().zip(&self.local) {
            let scale = 2.0 * geom.area;
            for (k, basis) in self.tab.basis.iter().enumerate() {
                let w = scale * self.tab.rule.weights[k];
                let fv = f(geom.to_physical(self.tab.rule.points[k]));
                for (a, d) in local.iter().enumerate() {
                    if let Some(d) = *d {
                        out[d] += w * fv[0] * basis.values[a];
                        out[ns + d] += w * fv[1] * basis.values[a];
                    }
                }
            }
        }
        out
    }

    /// Scalar mass and stiffness on the free scalar dofs.
    fn scalar_mass_stiffness(&self) -> (CsrMatrix, CsrMatrix) {
        let ns = self.n_scalar();
        let cap = 16 * self.geometry.len();
        let mut mb = TripletBuilder::with_capacity(ns, ns, cap);
        let mut kb = TripletBuilder::with_capacity(ns, ns, cap);
        for (geom, local) in self.geometry.iter().zip(&self.local) {
            let mut me = [[0.0; 4]; 4];
            let mut ke = [[0.0; 4]; 4];
            let scale = 2.0 * geom.area;
            for (k, basis) in self.tab.basis.iter().enumerate() {
                let w = scale * self.tab.rule.weights[k];
                let g = geom.physical_gradients(basis);
                for a in 0..4 {
                    for b in 0..4 {
                        me[a][b] += w * basis.values[a] * basis.values[b];
                        ke[a][b] += w * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                    }
                }
            }
            for a in 0..4 {
                let Some(da) = local[a] else { continue };
                for b in 0..4 {
                    let Some(db) = local[b] else { continue };
                    mb.push(da, db, me[a][b]);
                    kb.push(da, db, ke[a][b]);
                }
            }
        }
        (mb.build(), kb.build())
    }

    /// `B[p, v] = ⟨∇·v, φ_p⟩` and the gauge row `∫ φ_p`.
    fn divergence(&self) -> (CsrMatrix, Vec<f64>) {
        let ns = self.n_scalar();
        let np = self.n_pressure();
        let mut bb = TripletBuilder::with_capacity(np, 2 * ns, 24 * self.geometry.len());
        let mut gauge = vec![0.0; np];
        let tris = self.mesh.triangles();
        for (t, (geom, local)) in self.geometry.iter().zip(&self.local).enumerate() {
            let mut be = [[[0.0; 4]; 2]; 3];
            let scale = 2.0 * geom.area;
            for (k, basis) in self.tab.basis.iter().enumerate() {
                let w = scale * self.tab.rule.weights[k];
                let g = geom.physical_gradients(basis);
                for p in 0..3 {
                    let lp = basis.values[p];
                    for a in 0..4 {
                        be[p][0][a] += w * g[a][0] * lp;
                        be[p][1][a] += w * g[a][1] * lp;
                    }
                }
            }
            for p in 0..3 {
                let gp = tris[t][p];
                gauge[gp] += geom.area / 3.0;
                for c in 0..2 {
                    for a in 0..4 {
                        if let Some(d) = local[a] {
                            bb.push(gp, c * ns + d, be[p][c][a]);
                        }
                    }
                }
            }
        }
        (bb.build(), gauge)
    }

    /// Scalar transport matrix `T[a, b] = ∫ φ_a (ζ·∇φ_b)`.
    fn scalar_transport(
        &self,
        field: &crate::noise::TransportField,
        tab: &TabulatedBasis,
    ) -> CsrMatrix {
        let ns = self.n_scalar();
        let mut tb = TripletBuilder::with_capacity(ns, ns, 16 * self.geometry.len());
        for (geom, local) in self.geometry.iter().zip(&self.local) {
            let mut te = [[0.0; 4]; 4];
            let scale = 2.0 * geom.area;
            for (k, basis) in tab.basis.iter().enumerate() {
                let w = scale * tab.rule.weights[k];
                let z = field.eval(geom.to_physical(tab.rule.points[k]));
                let g = geom.physical_gradients(basis);
                for b in 0..4 {
                    let adv = z[0] * g[b][0] + z[1] * g[b][1];
                    for a in 0..4 {
                        te[a][b] += w * basis.values[a] * adv;
                    }
                }
            }
            for a in 0..4 {
                let Some(da) = local[a] else { continue };
                for b in 0..4 {
                    let Some(db) = local[b] else { continue };
                    tb.push(da, db, te[a][b]);
                }
            }
        }
        tb.build()
    }

    /// Dual vector of `G(v) = (v·∇)v + ½(∇·v)v`.
    pub fn nonlinear_load(&self, v: &[f64]) -> Vec<f64> {
        let ns = self.n_scalar();
        assert_eq!(v.len(), 2 * ns);
        let mut out = vec![0.0; 2 * ns];
        for (geom, local) in self.geometry.iter().zip(&self.local) {
            let scale = 2.0 * geom.area;
            for (k, basis) in self.tab.basis.iter().enumerate() {
                let w = scale * self.tab.rule.weights[k];
                let (val, grad) = eval_velocity_at(&self.dofs, local, geom, basis, v);
                let div = grad[0][0] + grad[1][1];
                let f = [
                    val[0] * grad[0][0] + val[1] * grad[0][1] + 0.5 * div * val[0],
                    val[0] * grad[1][0] + val[1] * grad[1][1] + 0.5 * div * val[1],
                ];
                for (a, d) in local.iter().enumerate() {
                    if let Some(d) = *d {
                        out[d] += w * f[0] * basis.values[a];
                        out[ns + d] += w * f[1] * basis.values[a];
                    }
                }
            }
        }
        out
    }
}

/// Factorized saddle-point system `[[A, Bᵀ, 0], [B, 0, g], [0, gᵀ, 0]]`
/// (mean-zero gauge) or with one pressure dof pinned.
pub struct SaddleSolver {
    n_velocity: usize,
    n_pressure: usize,
    system: CsrMatrix,
    lu: Lu<usize, f64>,
    /// Pressure weights `∫ φ_p` when the mean-zero gauge is requested.
    mean_zero: Option<Vec<f64>>,
}

impl std::fmt::Debug for SaddleSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaddleSolver")
            .field("n_velocity", &self.n_velocity)
            .field("n_pressure", &self.n_pressure)
            .field("nnz", &self.system.nnz())
            .finish()
    }
}

impl SaddleSolver {
    /// The mean-zero gauge is realized by pinning pressure dof 0 and shifting
    /// the result afterwards: constants lie in the kernel of `Bᵀ`, so the
    /// velocity is unchanged, and a dense gauge row would ruin the sparsity
    /// of the factorization.
    pub fn new(
        block: &CsrMatrix,
        div: &CsrMatrix,
        gauge_row: &[f64],
        gauge: PressureGauge,
    ) -> Result<Self> {
        let nv = block.nrows();
        let np = div.nrows();
        let n = nv + np;
        let mut b = TripletBuilder::with_capacity(n, n, block.nnz() + 2 * div.nnz() + 1);
        for (i, j, v) in block.triplets() {
            b.push(i, j, v);
        }
        let (pinned, mean_zero) = match gauge {
            PressureGauge::Pin(p) if p >= np => {
                return Err(Error::invalid(format!(
                    "pinned pressure dof {p} out of range"
                )));
            }
            PressureGauge::Pin(p) => (p, None),
            PressureGauge::MeanZero => {
                if gauge_row.len() != np || !(gauge_row.iter().sum::<f64>() > 0.0) {
                    return Err(Error::invalid(
                        "mean-zero gauge needs positive pressure weights",
                    ));
                }
                (0, Some(gauge_row.to_vec()))
            }
        };
        for (p, j, v) in div.triplets() {
            if p != pinned {
                b.push(nv + p, j, v);
                b.push(j, nv + p, v);
            }
        }
        b.push(nv + pinned, nv + pinned, 1.0);
        let system = b.build();
        let mut trip = Vec::with_capacity(system.nnz());
        system.to_faer_triplets(0, 0, &mut trip);
        let faer_mat: SparseColMat<usize, f64> =
            SparseColMat::try_new_from_triplets(n, n, &trip)
                .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        let lu = faer_mat
            .sp_lu()
            .map_err(|e| Error::Factorization(format!("{e:?}")))?;
        Ok(Self {
            n_velocity: nv,
            n_pressure: np,
            system,
            lu,
            mean_zero,
        })
    }

    pub fn n_velocity(&self) -> usize {
        self.n_velocity
    }

    fn solve_raw(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        self.lu.solve_in_place(x.as_mut());
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Solves with velocity load `f` and zero divergence data. Returns the
    /// velocity and the pressure multiplier.
    pub fn solve(&self, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        assert_eq!(f.len(), self.n_velocity);
        let n = self.system.nrows();
        let mut rhs = vec![0.0; n];
        rhs[..self.n_velocity].copy_from_slice(f);
        let bnorm = norm2(&rhs);
        if bnorm == 0.0 {
            return Ok((vec![0.0; self.n_velocity], vec![0.0; self.n_pressure]));
        }
        let mut x = self.solve_raw(&rhs);
        let residual = |x: &[f64]| {
            let mut r = self.system.mul_vec(x);
            for (ri, bi) in r.iter_mut().zip(&rhs) {
                *ri = bi - *ri;
            }
            r
        };
        let mut r = residual(&x);
        let mut rel = norm2(&r) / bnorm;
        if rel > 1e-13 && rel.is_finite() {
            // one step of iterative refinement
            let dx = self.solve_raw(&r);
            for (xi, di) in x.iter_mut().zip(&dx) {
                *xi += di;
            }
            r = residual(&x);
            rel = norm2(&r) / bnorm;
        }
        if !(rel <= SOLVE_TOLERANCE) {
            return Err(Error::Solver {
                context: "saddle-point solve".into(),
                residual: rel,
            });
        }
        let mut p = x[self.n_velocity..self.n_velocity + self.n_pressure].to_vec();
        if let Some(g) = &self.mean_zero {
            let shift = dot(g, &p) / g.iter().sum::<f64>();
            p.iter_mut().for_each(|q| *q -= shift);
        }
        x.truncate(self.n_velocity);
        Ok((x, p))
    }
}

/// Data handed to the Helmholtz projection.
#[derive(Debug, Clone, Copy)]
pub enum ProjectionInput<'a> {
    /// Finite element coefficients of an L² datum.
    Coefficients(&'a [f64]),
    /// Assembled dual vector `⟨f, w_h⟩` (covers H⁻¹-type data).
    Dual(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub velocity: Vec<f64>,
    pub pressure: Vec<f64>,
}

/// Every assembled operator of one mesh plus the projection factorization.
pub struct OperatorSet {
    pub disc: Discretization,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub div: CsrMatrix,
    pub gauge_row: Vec<f64>,
    pub transport: Vec<CsrMatrix>,
    pub noise: NoiseModel,
    projector: SaddleSolver,
    stokes: Mutex<Option<Arc<SaddleSolver>>>,
}

impl std::fmt::Debug for OperatorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorSet")
            .field("n_velocity", &self.n_velocity())
            .field("n_pressure", &self.n_pressure())
            .field("modes", &self.transport.len())
            .finish()
    }
}

impl OperatorSet {
    /// Default dof map (no-slip, mean-zero pressure) and quadrature.
    pub fn assemble(mesh: Arc<Mesh>, noise: &NoiseModel) -> Result<Self> {
        let dofs = DofMap::new(&mesh);
        Self::assemble_with(mesh, dofs, DEFAULT_QUADRATURE_DEGREE, noise)
    }

    pub fn assemble_with(
        mesh: Arc<Mesh>,
        dofs: DofMap,
        degree: usize,
        noise: &NoiseModel,
    ) -> Result<Self> {
        if mesh.n_vertices() != dofs.n_pressure() {
            return Err(Error::invalid("dof map does not belong to this mesh"));
        }
        let gauge = dofs.pressure_gauge;
        let disc = Discretization::new(mesh, dofs, QuadratureRule::new(degree)?)?;
        let (ms, ks) = disc.scalar_mass_stiffness();
        let (div, gauge_row) = disc.divergence();
        // Transport assembly must integrate ζ·∇φ_b φ_a exactly.
        let transport_degree = degree.max(noise.max_degree() + 5);
        let ttab = if transport_degree == degree {
            disc.tab.clone()
        } else {
            TabulatedBasis::new(QuadratureRule::new(transport_degree)?)
        };
        let transport = noise
            .modes
            .iter()
            .map(|m| disc.scalar_transport(m, &ttab).block_diag2())
            .collect();
        let mass = ms.block_diag2();
        let stiffness = ks.block_diag2();
        let projector = SaddleSolver::new(&mass, &div, &gauge_row, gauge)?;
        Ok(Self {
            disc,
            mass,
            stiffness,
            div,
            gauge_row,
            transport,
            noise: noise.clone(),
            projector,
            stokes: Mutex::new(None),
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.disc.mesh
    }

    pub fn n_velocity(&self) -> usize {
        self.disc.n_velocity()
    }

    pub fn n_pressure(&self) -> usize {
        self.disc.n_pressure()
    }

    pub fn n_modes(&self) -> usize {
        self.transport.len()
    }

    pub fn l2_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.mass.bilinear(a, b)
    }

    pub fn l2_norm_sq(&self, a: &[f64]) -> f64 {
        self.mass.bilinear(a, a)
    }

    /// `vᵀ K v`, the squared discrete Ḣ¹ norm on the divergence-free subspace.
    pub fn h1_seminorm_sq(&self, a: &[f64]) -> f64 {
        self.stiffness.bilinear(a, a)
    }

    /// `|Bv| / | |B| |v| |`, a scale-free measure of the divergence defect.
    pub fn divergence_residual(&self, v: &[f64]) -> f64 {
        let bv = self.div.mul_vec(v);
        let mut abs = vec![0.0; self.n_pressure()];
        for (p, a) in abs.iter_mut().enumerate() {
            *a = self.div.row(p).map(|(j, b)| (b * v[j]).abs()).sum();
        }
        let den = norm2(&abs);
        if den == 0.0 {
            0.0
        } else {
            norm2(&bv) / den
        }
    }

    fn check_divergence_free(&self, v: &[f64]) -> Result<()> {
        let r = self.divergence_residual(v);
        if r > DIVERGENCE_TOLERANCE {
            return Err(Error::NotDivergenceFree { residual: r });
        }
        Ok(())
    }

    /// L²-orthogonal projection onto the discretely divergence-free subspace.
    pub fn helmholtz_project(&self, input: ProjectionInput<'_>) -> Result<Projection> {
        let load = match input {
            ProjectionInput::Coefficients(f) => self.mass.mul_vec(f),
            ProjectionInput::Dual(g) => g.to_vec(),
        };
        if load.len() != self.n_velocity() {
            return Err(Error::invalid("projection input has the wrong length"));
        }
        let (velocity, pressure) = self.projector.solve(&load)?;
        Ok(Projection { velocity, pressure })
    }

    /// Projection of a dual vector, velocity only.
    pub fn project_dual(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.projector.solve(g)?.0)
    }

    /// Projection of a continuous vector field, `𝒫_h f`.
    pub fn project_field(&self, f: &dyn Fn(Point) -> [f64; 2]) -> Result<Vec<f64>> {
        self.project_dual(&self.disc.load_vector(f))
    }

    pub fn stokes_solver(&self) -> Result<Arc<SaddleSolver>> {
        let mut guard = self.stokes.lock().expect("stokes solver lock poisoned");
        if let Some(s) = guard.as_ref() {
            return Ok(s.clone());
        }
        let s = Arc::new(SaddleSolver::new(
            &self.stiffness,
            &self.div,
            &self.gauge_row,
            self.disc.dofs.pressure_gauge,
        )?);
        *guard = Some(s.clone());
        Ok(s)
    }

    /// `A_h v`, defined by `⟨A_h v, w⟩ = ⟨∇v, ∇w⟩` on the divergence-free subspace.
    pub fn apply_discrete_stokes(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_divergence_free(v)?;
        self.project_dual(&self.stiffness.mul_vec(v))
    }

    /// `A_h⁻¹ 𝒫_h g` for a dual vector `g`.
    pub fn inverse_stokes(&self, g: &[f64]) -> Result<Vec<f64>> {
        Ok(self.stokes_solver()?.solve(g)?.0)
    }

    fn mode(&self, n: usize) -> Result<&CsrMatrix> {
        self.transport.get(n).ok_or_else(|| {
            Error::invalid(format!(
                "mode {n} out of range ({} modes)",
                self.transport.len()
            ))
        })
    }

    /// `L_{ζ_n,h} v = 𝒫_h((ζ_n·∇)v)`.
    pub fn apply_transport(&self, n: usize, v: &[f64]) -> Result<Vec<f64>> {
        let t = self.mode(n)?;
        self.project_dual(&t.mul_vec(v))
    }

    /// `½ Σ_n L²_{ζ_n,h} v`, by two nested projections per mode.
    pub fn ito_correction(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_divergence_free(v)?;
        let mut out = vec![0.0; v.len()];
        for n in 0..self.n_modes() {
            let z = self.apply_transport(n, v)?;
            let zz = self.apply_transport(n, &z)?;
            crate::sparse::axpy(0.5, &zz, &mut out);
        }
        Ok(out)
    }

    /// `‖F_h(v)‖²_HS = Σ_n ‖L_{ζ_n,h} v‖²`.
    pub fn noise_hs_norm_sq(&self, v: &[f64]) -> Result<f64> {
        let mut s = 0.0;
        for n in 0..self.n_modes() {
            let z = self.apply_transport(n, v)?;
            s += self.l2_norm_sq(&z);
        }
        Ok(s)
    }

    /// Dual vector `⟨G(v), w_h⟩`.
    pub fn eval_nonlinear(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n_velocity() {
            return Err(Error::invalid("velocity vector has the wrong length"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("velocity vector has non-finite entries"));
        }
        Ok(self.disc.nonlinear_load(v))
    }

    /// `𝒫_h G(v)`.
    pub fn projected_nonlinear(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.project_dual(&self.eval_nonlinear(v)?)
    }

    /// Factorization of `[[M + dt K, Bᵀ], [B, 0]]` for the implicit step.
    pub fn step_solver(&self, dt: f64) -> Result<SaddleSolver> {
        let block = self.mass.add_scaled(1.0, &self.stiffness, dt);
        SaddleSolver::new(
            &block,
            &self.div,
            &self.gauge_row,
            self.disc.dofs.pressure_gauge,
        )
    }

    /// Coefficient vector with random entries, projected onto the
    /// divergence-free subspace.
    pub fn random_divergence_free(&self, rng: &mut impl rand_core::RngCore) -> Result<Vec<f64>> {
        let v = random_vector(self.n_velocity(), rng);
        Ok(self
            .helmholtz_project(ProjectionInput::Coefficients(&v))?
            .velocity)
    }

    /// Writes `M`, `K`, `B` and each `T_n` in coordinate format into `dir`.
    pub fn dump_matrices(&self, dir: &std::path::Path) -> Result<()> {
        let write = |name: &str, m: &CsrMatrix| -> Result<()> {
            let f = std::fs::File::create(dir.join(name))?;
            m.write_coordinate(std::io::BufWriter::new(f))?;
            Ok(())
        };
        write("mass.coo", &self.mass)?;
        write("stiffness.coo", &self.stiffness)?;
        write("divergence.coo", &self.div)?;
        for (n, t) in self.transport.iter().enumerate() {
            write(&format!("transport_{n}.coo"), t)?;
        }
        Ok(())
    }
}

/// Uniform entries in [-1, 1).
pub fn random_vector(n: usize, rng: &mut impl rand_core::RngCore) -> Vec<f64> {
    (0..n)
        .map(|_| ((rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0)
        .collect()
}

/// Full (unconstrained) scalar stiffness on all vertices and bubbles.
pub fn unconstrained_scalar_stiffness(mesh: Arc<Mesh>) -> Result<(DofMap, CsrMatrix)> {
    let dofs = DofMap::with_options(
        &mesh,
        VelocityBoundary::Unconstrained,
        PressureGauge::MeanZero,
    );
    let disc = Discretization::new(
        mesh,
        dofs.clone(),
        QuadratureRule::new(DEFAULT_QUADRATURE_DEGREE)?,
    )?;
    Ok((dofs, disc.scalar_mass_stiffness().1))
}

/// Relative size helper: `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_diff(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn is<T: Send + Sync>() {}
    is::<OperatorSet>();
    is::<SaddleSolver>();
    let _ = Triplet::new(0usize, 0usize, 0.0f64);
    let _ = dot(&[], &[]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Mesh, MeshHierarchy};
    use crate::mini_spaces::QuadratureRule;
    use crate::noise::{ModeSpec, NoiseModel, StreamFunction};
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn ops(level: usize, noise: &NoiseModel) -> OperatorSet {
        let h = MeshHierarchy::unit_square(level);
        OperatorSet::assemble(Arc::new(h.mesh(level).clone()), noise).unwrap()
    }

    #[test]
    fn stiffness_kills_constants_before_elimination() {
        let mesh = Arc::new(Mesh::structured_square(4).unwrap());
        let (dofs, k) = unconstrained_scalar_stiffness(mesh.clone()).unwrap();
        // constant field: every vertex coefficient 1, bubbles 0
        let mut c = vec![0.0; dofs.n_scalar()];
        c[..mesh.n_vertices()].fill(1.0);
        let kc = k.mul_vec(&c);
        for (v, &b) in mesh.boundary_vertex().iter().enumerate() {
            if !b {
                assert!(kc[v].abs() < 1e-13);
            }
        }
        for t in 0..mesh.n_triangles() {
            assert!(kc[mesh.n_vertices() + t].abs() < 1e-13);
        }
    }

    #[test]
    fn single_element_mass_moments() {
        let mesh = Arc::new(
            Mesh::from_parts(vec![[0.1, 0.0], [1.0, 0.3], [0.2, 0.9]], vec![[0, 1, 2]], 0).unwrap(),
        );
        let dofs = DofMap::with_options(
            &mesh,
            VelocityBoundary::Unconstrained,
            PressureGauge::MeanZero,
        );
        let disc =
            Discretization::new(mesh.clone(), dofs, QuadratureRule::new(10).unwrap()).unwrap();
        let (m, _) = disc.scalar_mass_stiffness();
        let area = mesh.area(0);
        let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
        let moment = |a: usize, b: usize, c: usize| {
            2.0 * area * fact(a) * fact(b) * fact(c) / fact(a + b + c + 2)
        };
        assert!((m.get(0, 0) - moment(2, 0, 0)).abs() < 1e-15);
        assert!((m.get(0, 1) - moment(1, 1, 0)).abs() < 1e-15);
        assert!((m.get(0, 3) - moment(2, 1, 1)).abs() < 1e-15);
        assert!((m.get(3, 3) - moment(2, 2, 2)).abs() < 1e-15);
    }

    #[test]
    fn matrices_are_symmetric_and_consistent() {
        let o = ops(3, &NoiseModel::default_family());
        assert!(o.mass.max_abs_asymmetry() < 1e-15);
        assert!(o.stiffness.max_abs_asymmetry() < 1e-13);
        assert_eq!(o.div.ncols(), o.n_velocity());
        assert_eq!(o.transport.len(), 4);
        assert!((o.gauge_row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn zero_amplitude_gives_zero_transport() {
        let noise = NoiseModel::default_family().scaled(0.0).unwrap();
        let o = ops(2, &noise);
        for t in &o.transport {
            assert!(t.triplets().all(|(_, _, v)| v == 0.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = o.random_divergence_free(&mut rng).unwrap();
        assert!(o.apply_transport(0, &v).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transport_is_skew_on_constrained_vectors() {
        let noise = NoiseModel::boundary_vanishing_family();
        let o = ops(2, &noise);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let v = random_vector(o.n_velocity(), &mut rng);
            for t in &o.transport {
                let q = t.bilinear(&v, &v);
                let scale = t.mul_vec(&v).iter().map(|x| x.abs()).sum::<f64>() * norm2(&v);
                assert!(q.abs() < 1e-12 * scale, "{q}");
            }
        }
    }

    #[test]
    fn projection_properties() {
        let o = ops(3, &NoiseModel::empty());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_vector(o.n_velocity(), &mut rng);
        let p = o
            .helmholtz_project(ProjectionInput::Coefficients(&f))
            .unwrap();
        let v = &p.velocity;
        assert!(o.divergence_residual(v) < 1e-10);
        let again = o
            .helmholtz_project(ProjectionInput::Coefficients(v))
            .unwrap()
            .velocity;
        let diff = crate::sparse::sub(&again, v);
        assert!(o.l2_norm_sq(&diff).sqrt() < 1e-10 * o.l2_norm_sq(v).sqrt());
        let r = crate::sparse::sub(&f, v);
        assert!(rel_diff(o.l2_norm_sq(&f), o.l2_norm_sq(v) + o.l2_norm_sq(&r), 0.0) < 1e-10);
        // mean-zero gauge
        assert!(dot(&o.gauge_row, &p.pressure).abs() < 1e-12 * norm2(&p.pressure).max(1e-300));
    }

    #[test]
    fn pinned_gauge_gives_same_velocity() {
        let mesh = Arc::new(MeshHierarchy::unit_square(3).mesh(3).clone());
        let noise = NoiseModel::empty();
        let a = OperatorSet::assemble(mesh.clone(), &noise).unwrap();
        let dofs = DofMap::with_options(&mesh, VelocityBoundary::NoSlip, PressureGauge::Pin(0));
        let b = OperatorSet::assemble_with(mesh, dofs, 10, &noise).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_vector(a.n_velocity(), &mut rng);
        let va = a
            .helmholtz_project(ProjectionInput::Coefficients(&f))
            .unwrap();
        let vb = b
            .helmholtz_project(ProjectionInput::Coefficients(&f))
            .unwrap();
        let d = crate::sparse::sub(&va.velocity, &vb.velocity);
        assert!(norm2(&d) < 1e-10 * norm2(&va.velocity));
        assert_eq!(vb.pressure[0], 0.0);
    }

    #[test]
    fn stokes_operator_rejects_non_solenoidal_input() {
        let o = ops(2, &NoiseModel::empty());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_vector(o.n_velocity(), &mut rng);
        assert!(matches!(
            o.apply_discrete_stokes(&f),
            Err(Error::NotDivergenceFree { .. })
        ));
    }

    #[test]
    fn nonlinearity_is_quadratic_and_neutral() {
        let o = ops(3, &NoiseModel::empty());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_vector(o.n_velocity(), &mut rng);
        let g = o.eval_nonlinear(&v).unwrap();
        let g3 = o
            .eval_nonlinear(&v.iter().map(|x| 3.0 * x).collect::<Vec<_>>())
            .unwrap();
        let d: Vec<f64> = g.iter().zip(&g3).map(|(a, b)| 9.0 * a - b).collect();
        assert!(norm2(&d) <= 1e-13 * norm2(&g3));
        let scale: f64 =
            g.iter().map(|x| x.abs()).sum::<f64>() * v.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(dot(&g, &v).abs() < 1e-11 * scale);
        assert!(o
            .eval_nonlinear(&vec![0.0; o.n_velocity()])
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn mode_index_is_checked() {
        let noise = NoiseModel::build(vec![ModeSpec {
            stream: StreamFunction::Named("rotation".into()),
            amplitude: 1.0,
        }])
        .unwrap();
        let o = ops(1, &noise);
        assert!(o.apply_transport(1, &vec![0.0; o.n_velocity()]).is_err());
    }
}
