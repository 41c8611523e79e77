//! Spectral computations on small meshes: eigenpairs of the discrete Stokes
//! operator, fractional powers, the smoothing operator `J_{h,α} = A_h^α 𝒫_h A^{−α}`
//! with a fine mesh standing in for the continuous operators, and measured
//! operator norms across refinement levels.
//!
//! The dense engine works on the null space of the divergence matrix. Where a
//! fine surrogate is too large for it, norms with integer exponents are
//! computed by Lanczos iterations built from sparse saddle solves.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex};

use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Mat, MatRef, Par, Side};

use crate::error::{Error, Result};
use crate::mesh::MeshHierarchy;
use crate::noise::{NoiseModel, StreamFunction, TransportField};
use crate::operators::{random_vector, OperatorSet};
use crate::sparse::{axpy, dot, CsrMatrix, TripletBuilder};
use crate::transfer::{cross_mass, PointSampler, TRANSFER_QUADRATURE_DEGREE};

/// Largest constrained velocity dimension handled by the dense engine (level 5).
pub const DENSE_DIMENSION_LIMIT: usize = 6100;
/// Spectral scalings with a wider condition number are refused.
pub const SCALING_CONDITION_LIMIT: f64 = 1e12;
/// Truncation residual above which a fractional power is flagged imprecise.
pub const TRUNCATION_TOLERANCE: f64 = 1e-8;

/// Eigenpairs of `K x = λ M x` restricted to `{B x = 0}`, eigenvectors
/// M-orthonormal and stored as columns.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub level: usize,
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat<f64>,
    /// Dimension of the discretely divergence-free space.
    pub space_dimension: usize,
}

impl SpectralDecomposition {
    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_complete(&self) -> bool {
        self.count() == self.space_dimension
    }

    /// `c_k = x_kᵀ M v`
    pub fn coordinates(&self, mass: &CsrMatrix, v: &[f64]) -> Vec<f64> {
        let mv = mass.mul_vec(v);
        (0..self.count())
            .map(|k| {
                dot(
                    self.eigenvectors
                        .col(k)
                        .try_as_col_major()
                        .unwrap()
                        .as_slice(),
                    &mv,
                )
            })
            .collect()
    }

    pub fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let n = self.eigenvectors.nrows();
        let mut out = vec![0.0; n];
        for (k, &ck) in c.iter().enumerate() {
            if ck != 0.0 {
                axpy(
                    ck,
                    self.eigenvectors
                        .col(k)
                        .try_as_col_major()
                        .unwrap()
                        .as_slice(),
                    &mut out,
                );
            }
        }
        out
    }

    fn scaling(&self, exponent: f64) -> Result<Vec<f64>> {
        if exponent != 0.0 {
            let lo = self.eigenvalues[0];
            let hi = *self.eigenvalues.last().unwrap();
            let cond = (hi / lo).powf(exponent.abs());
            if !(cond <= SCALING_CONDITION_LIMIT) {
                return Err(Error::Eigen(format!(
                    "spectral scaling with exponent {exponent} has condition number {cond:.3e}"
                )));
            }
        }
        Ok(self.eigenvalues.iter().map(|l| l.powf(exponent)).collect())
    }
}

/// Dense eigendecomposition of the discrete Stokes operator.
///
/// `count = None` keeps every eigenpair.
pub fn stokes_eigendecomposition(
    ops: &OperatorSet,
    count: Option<usize>,
) -> Result<SpectralDecomposition> {
    let nv = ops.n_velocity();
    if nv > DENSE_DIMENSION_LIMIT {
        return Err(Error::DimensionGuard {
            dofs: nv,
            limit: DENSE_DIMENSION_LIMIT,
        });
    }
    let z = divergence_null_space(&ops.div)?;
    let d = z.ncols();
    if d == 0 {
        return Err(Error::Eigen(
            "the discretely divergence-free space is trivial".into(),
        ));
    }
    let kz = project_sparse(&ops.stiffness, z.as_ref());
    let mz = project_sparse(&ops.mass, z.as_ref());
    let (values, y) = generalized_symmetric_eigen(kz, mz)?;
    let keep = count.unwrap_or(d).min(d);
    if values[0] <= 0.0 {
        return Err(Error::Eigen(format!(
            "non-positive Stokes eigenvalue {}",
            values[0]
        )));
    }
    let y = y.subcols(0, keep).to_owned();
    let x = z.as_ref() * y.as_ref();
    Ok(SpectralDecomposition {
        level: ops.mesh().level(),
        eigenvalues: values[..keep].to_vec(),
        eigenvectors: x,
        space_dimension: d,
    })
}

/// Orthonormal basis (columns) of `ker B`.
fn divergence_null_space(div: &CsrMatrix) -> Result<Mat<f64>> {
    let nv = div.ncols();
    let bt = div.transpose().to_dense();
    let qr = bt.col_piv_qr();
    let r = qr.R();
    let diag = r.nrows().min(r.ncols());
    let r00 = if diag > 0 { r[(0, 0)].abs() } else { 0.0 };
    let rank = (0..diag).filter(|&i| r[(i, i)].abs() > 1e-10 * r00).count();
    let q = qr.compute_Q();
    Ok(q.subcols(rank, nv - rank).to_owned())
}

/// `Zᵀ A Z`, symmetrized.
fn project_sparse(a: &CsrMatrix, z: MatRef<'_, f64>) -> Mat<f64> {
    let az = a.mul_dense(z);
    let mut p = z.transpose() * az.as_ref();
    symmetrize(&mut p);
    p
}

fn symmetrize(a: &mut Mat<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in j + 1..n {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
}

/// Solves `A y = λ B y` with `B` SPD; eigenvectors are B-orthonormal.
fn generalized_symmetric_eigen(a: Mat<f64>, b: Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let llt = b
        .llt(Side::Lower)
        .map_err(|e| Error::Eigen(format!("mass matrix is not positive definite: {e:?}")))?;
    let l = llt.L();
    let mut c = a;
    solve_lower_triangular_in_place(l, c.as_mut(), Par::Seq);
    let mut c = c.transpose().to_owned();
    solve_lower_triangular_in_place(l, c.as_mut(), Par::Seq);
    symmetrize(&mut c);
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let values: Vec<f64> = evd.S().column_vector().iter().copied().collect();
    let mut y = evd.U().to_owned();
    solve_upper_triangular_in_place(l.transpose(), y.as_mut(), Par::Seq);
    Ok((values, y))
}

/// Result of a fractional power, with the part of `v` outside the resolved span.
#[derive(Debug, Clone)]
pub struct FractionalPower {
    pub value: Vec<f64>,
    /// `‖v − Σ c_k x_k‖_M / ‖v‖_M`
    pub truncation_residual: f64,
}

impl FractionalPower {
    pub fn is_precise(&self) -> bool {
        self.truncation_residual <= TRUNCATION_TOLERANCE
    }
}

/// `A_h^α v = Σ λ_k^α ⟨v, x_k⟩ x_k`.
pub fn fractional_apply(
    decomp: &SpectralDecomposition,
    ops: &OperatorSet,
    alpha: f64,
    v: &[f64],
) -> Result<FractionalPower> {
    if !(-1.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("exponent {alpha} outside [-1, 1]")));
    }
    let c = decomp.coordinates(&ops.mass, v);
    let resolved = decomp.synthesize(&c);
    let rest = crate::sparse::sub(v, &resolved);
    let vn = ops.l2_norm_sq(v).sqrt();
    let truncation_residual = if vn == 0.0 {
        0.0
    } else {
        ops.l2_norm_sq(&rest).sqrt() / vn
    };
    let scaled: Vec<f64> = c
        .iter()
        .zip(&decomp.eigenvalues)
        .map(|(ck, l)| ck * l.powf(alpha))
        .collect();
    Ok(FractionalPower {
        value: decomp.synthesize(&scaled),
        truncation_residual,
    })
}

/// Coarse and fine decompositions plus `P = E_cᵀ M_cf E_f`, the coarse
/// coordinates of `𝒫_h` applied to fine eigenvectors.
#[derive(Debug, Clone)]
pub struct SurrogatePair {
    pub coarse: Arc<SpectralDecomposition>,
    pub fine: Arc<SpectralDecomposition>,
    pub projection: Mat<f64>,
}

impl SurrogatePair {
    pub fn gap(&self) -> usize {
        self.fine.level - self.coarse.level
    }
}

/// `J_{h,α}` in spectral coordinates: `diag(λ_c^α) P diag(λ_f^{−α})`.
pub fn build_smoothing_operator(pair: &SurrogatePair, alpha: f64) -> Result<Mat<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "smoothing exponent {alpha} outside (0, 1)"
        )));
    }
    let lc = pair.coarse.scaling(alpha)?;
    let lf = pair.fine.scaling(-alpha)?;
    let p = &pair.projection;
    Ok(Mat::from_fn(p.nrows(), p.ncols(), |i, j| {
        lc[i] * p[(i, j)] * lf[j]
    }))
}

/// `J_{h,α}` as a matrix on coefficient vectors, fine → coarse.
pub fn smoothing_operator_coefficients(
    pair: &SurrogatePair,
    alpha: f64,
    fine_mass: &CsrMatrix,
) -> Result<Mat<f64>> {
    let jt = build_smoothing_operator(pair, alpha)?;
    let ec = &pair.coarse.eigenvectors;
    let ef = &pair.fine.eigenvectors;
    let mef = fine_mass.mul_dense(ef.as_ref());
    let left = ec.as_ref() * jt.as_ref();
    Ok(left.as_ref() * mef.transpose())
}

/// `σ_max(diag(λ_c^{γ/2}) Op diag(λ_f^{−β/2}))`: the norm of a fine → coarse
/// operator from `Ḣ^β` (fine) to `Ḣ^γ` (coarse).
pub fn measure_operator_norm(
    op: MatRef<'_, f64>,
    pair: &SurrogatePair,
    beta: f64,
    gamma: f64,
) -> Result<f64> {
    let sc = pair.coarse.scaling(gamma / 2.0)?;
    let sf = pair.fine.scaling(-beta / 2.0)?;
    let w = Mat::from_fn(op.nrows(), op.ncols(), |i, j| sc[i] * op[(i, j)] * sf[j]);
    let s = w
        .singular_values()
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    Ok(s.first().copied().unwrap_or(0.0))
}

/// `‖I − Op‖` from fine `Ḣ^β` to `L²`, where `Op` maps fine spectral
/// coordinates to coarse ones and both functions live in `L²(𝒪)`.
pub fn measure_identity_defect(
    op: MatRef<'_, f64>,
    pair: &SurrogatePair,
    beta: f64,
) -> Result<f64> {
    let sf = pair.fine.scaling(-beta / 2.0)?;
    let p = pair.projection.as_ref();
    let d = sf.len();
    // ‖c − Op c‖² = cᵀ (I − Pᵀ Op − Opᵀ P + Opᵀ Op) c, using ⟨E_f a, E_c b⟩ = aᵀ Pᵀ b
    let apply = |x: &[f64]| -> Result<Vec<f64>> {
        let c: Vec<f64> = x.iter().zip(&sf).map(|(a, s)| a * s).collect();
        let oc = mat_vec(op, &c);
        let pc = mat_vec(p, &c);
        let mut g = c.clone();
        let t1 = mat_t_vec(p, &oc);
        let t2 = mat_t_vec(op, &pc);
        let t3 = mat_t_vec(op, &oc);
        for i in 0..d {
            g[i] += t3[i] - t1[i] - t2[i];
        }
        Ok(g.iter().zip(&sf).map(|(a, s)| a * s).collect())
    };
    let start = deterministic_start(d);
    let lam = lanczos_largest(apply, |a, b| dot(a, b), start, d.min(400), 1e-10)?;
    Ok(lam.value.max(0.0).sqrt())
}

fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj != 0.0 {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi += a[(i, j)] * xj;
            }
        }
    }
    y
}

fn mat_t_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)] * x[i]).sum())
        .collect()
}

fn deterministic_start(n: usize) -> Vec<f64> {
    use rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    random_vector(n, &mut rng)
}

#[derive(Debug, Clone, Copy)]
pub struct LanczosResult {
    pub value: f64,
    pub iterations: usize,
    /// Ritz residual estimate relative to `|value|`.
    pub residual: f64,
}

/// Largest eigenvalue of an operator self-adjoint in `inner`, by Lanczos with
/// full reorthogonalization.
pub fn lanczos_largest(
    mut apply: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    inner: impl Fn(&[f64], &[f64]) -> f64,
    start: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<LanczosResult> {
    let n0 = inner(&start, &start).sqrt();
    if !(n0 > 0.0) {
        return Err(Error::Eigen("Lanczos start vector is zero".into()));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / n0).collect()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut last = LanczosResult {
        value: 0.0,
        iterations: 0,
        residual: f64::INFINITY,
    };
    for k in 0..max_iter.max(1) {
        let mut w = apply(&basis[k])?;
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::Eigen("non-finite value in Lanczos iteration".into()));
        }
        let a = inner(&w, &basis[k]);
        alphas.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = inner(&w, q);
                axpy(-c, q, &mut w);
            }
        }
        let b = inner(&w, &w).sqrt();
        let m = alphas.len();
        let t = Mat::from_fn(m, m, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j {
                betas[i]
            } else if j + 1 == i {
                betas[j]
            } else {
                0.0
            }
        });
        let evd = t
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let theta = evd.S().column_vector()[m - 1];
        let s_last = evd.U()[(m - 1, m - 1)];
        let res = (b * s_last).abs() / theta.abs().max(f64::MIN_POSITIVE);
        last = LanczosResult {
            value: theta,
            iterations: k + 1,
            residual: res,
        };
        if res <= tol || b <= 1e-14 * theta.abs() {
            return Ok(last);
        }
        betas.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    if last.residual <= tol.sqrt() {
        log::warn!(
            "Lanczos stopped after {} iterations at residual {:.2e}",
            last.iterations,
            last.residual
        );
        Ok(last)
    } else {
        Err(Error::Eigen(format!(
            "Lanczos did not converge: residual {:.2e} after {} iterations",
            last.residual, last.iterations
        )))
    }
}

/// One row of a norm study.
#[derive(Debug, Clone)]
pub struct NormEstimate {
    pub operator: String,
    pub alpha: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub gap: usize,
    pub levels: Vec<usize>,
    pub hs: Vec<f64>,
    pub norms: Vec<f64>,
    pub slope: Option<f64>,
}

impl NormEstimate {
    fn new(operator: &str, alpha: Option<f64>, beta: f64, gamma: f64, gap: usize) -> Self {
        Self {
            operator: operator.into(),
            alpha,
            beta,
            gamma,
            gap,
            levels: Vec::new(),
            hs: Vec::new(),
            norms: Vec::new(),
            slope: None,
        }
    }

    fn push(&mut self, level: usize, h: f64, norm: f64) {
        self.levels.push(level);
        self.hs.push(h);
        self.norms.push(norm);
    }

    /// Fits the log-log slope over all recorded levels (at least 3).
    fn finish(mut self) -> Result<Self> {
        if self.levels.len() < 3 {
            return Err(Error::invalid("a norm slope needs at least three levels"));
        }
        self.slope = Some(crate::experiments::fit_eoc(&self.norms, &self.hs)?.slope);
        Ok(self)
    }

    /// Fits only the finest `k` recorded levels; all levels stay in the rows.
    fn finish_finest(mut self, k: usize) -> Result<Self> {
        if k < 2 || self.levels.len() < k {
            return Err(Error::invalid(
                "not enough levels for the requested fit window",
            ));
        }
        let n = self.levels.len();
        self.slope =
            Some(crate::experiments::fit_eoc(&self.norms[n - k..], &self.hs[n - k..])?.slope);
        Ok(self)
    }
}

pub fn write_norm_csv<W: Write>(mut w: W, rows: &[NormEstimate]) -> std::io::Result<()> {
    writeln!(
        w,
        "operator,alpha,beta,gamma,gap,level,h [length],norm [operator norm],fitted_slope [log norm / log h]"
    )?;
    for r in rows {
        let alpha = r.alpha.map_or(String::new(), |a| format!("{a}"));
        let slope = r.slope.map_or(String::new(), |s| format!("{s:.6}"));
        for i in 0..r.levels.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{:e},{:e},{}",
                r.operator, alpha, r.beta, r.gamma, r.gap, r.levels[i], r.hs[i], r.norms[i], slope
            )?;
        }
    }
    Ok(())
}

/// Smallest nonzero generalized eigenvalue data of the pressure Schur complement.
#[derive(Debug, Clone, Copy)]
pub struct InfSup {
    pub level: usize,
    pub beta: f64,
    /// Eigenvalues of `B K⁻¹ Bᵀ p = μ M_p p` below `1e-10 μ_max`.
    pub near_zero_count: usize,
    pub smallest_eigenvalue: f64,
}

/// `β_h = sqrt(μ_2)` of `B K⁻¹ Bᵀ p = μ M_p p`; the constant pressure is the kernel.
pub fn inf_sup_constant(ops: &OperatorSet) -> Result<InfSup> {
    let nv = ops.n_velocity();
    if nv > DENSE_DIMENSION_LIMIT {
        return Err(Error::DimensionGuard {
            dofs: nv,
            limit: DENSE_DIMENSION_LIMIT,
        });
    }
    let k = ops.stiffness.to_faer();
    let llt = k
        .sp_cholesky(Side::Lower)
        .map_err(|e| Error::Factorization(format!("{e:?}")))?;
    let mut x = ops.div.transpose().to_dense();
    {
        use faer::linalg::solvers::Solve;
        llt.solve_in_place(x.as_mut());
    }
    let mut s = ops.div.mul_dense(x.as_ref());
    symmetrize(&mut s);
    let mp = pressure_mass(ops).to_dense();
    let (mu, _) = generalized_symmetric_eigen(s, mp)?;
    let top = mu.last().copied().unwrap_or(0.0);
    let near_zero_count = mu.iter().filter(|&&m| m.abs() < 1e-10 * top).count();
    let nonzero = mu
        .iter()
        .copied()
        .find(|&m| m >= 1e-10 * top)
        .ok_or_else(|| Error::Eigen("Schur complement vanishes".into()))?;
    Ok(InfSup {
        level: ops.mesh().level(),
        beta: nonzero.sqrt(),
        near_zero_count,
        smallest_eigenvalue: mu[0],
    })
}

/// Continuous P1 mass matrix on pressure dofs.
pub fn pressure_mass(ops: &OperatorSet) -> CsrMatrix {
    let np = ops.n_pressure();
    let mesh = ops.mesh();
    let mut b = TripletBuilder::with_capacity(np, np, 9 * mesh.n_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let a = mesh.area(t) / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                b.push(tri[i], tri[j], if i == j { 2.0 * a } else { a });
            }
        }
    }
    b.build()
}

/// `sup ‖v‖_{Ḣ^{θ₂}} / ‖v‖_{Ḣ^{θ₁}} = λ_max(A_h)^{(θ₂−θ₁)/2}`, with `λ_max` from Lanczos.
pub fn inverse_inequality_ratio(ops: &OperatorSet, theta1: f64, theta2: f64) -> Result<f64> {
    if theta2 < theta1 {
        return Err(Error::invalid("inverse inequality needs θ₂ ≥ θ₁"));
    }
    let lam = largest_stokes_eigenvalue(ops)?;
    Ok(lam.powf(0.5 * (theta2 - theta1)))
}

pub fn largest_stokes_eigenvalue(ops: &OperatorSet) -> Result<f64> {
    let start = ops.helmholtz_project(crate::operators::ProjectionInput::Coefficients(
        &deterministic_start(ops.n_velocity()),
    ))?;
    let res = lanczos_largest(
        |y| ops.project_dual(&ops.stiffness.mul_vec(y)),
        |a, b| ops.l2_inner(a, b),
        start.velocity,
        300,
        1e-9,
    )?;
    Ok(res.value)
}

/// Smooth divergence-free test fields for approximation studies: curls of
/// polynomial stream functions.
pub fn smooth_test_fields() -> Vec<(String, TransportField)> {
    ["bump", "bump_x", "bump_y", "bump_xy", "rotation"]
        .iter()
        .map(|name| {
            let psi = StreamFunction::Named((*name).into())
                .polynomial()
                .expect("builtin stream");
            (name.to_string(), TransportField::new(psi, 1.0))
        })
        .collect()
}

/// Caches operators, decompositions and intergrid couplings on one hierarchy.
pub struct OperatorLab {
    hierarchy: MeshHierarchy,
    operators: Mutex<HashMap<usize, Arc<OperatorSet>>>,
    decompositions: Mutex<HashMap<usize, Arc<SpectralDecomposition>>>,
    couplings: Mutex<HashMap<(usize, usize), Arc<CsrMatrix>>>,
}

impl std::fmt::Debug for OperatorLab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorLab")
            .field("finest", &self.hierarchy.finest())
            .finish()
    }
}

impl OperatorLab {
    pub fn new(finest: usize) -> Self {
        Self {
            hierarchy: MeshHierarchy::unit_square(finest),
            operators: Mutex::new(HashMap::new()),
            decompositions: Mutex::new(HashMap::new()),
            couplings: Mutex::new(HashMap::new()),
        }
    }

    pub fn hierarchy(&self) -> &MeshHierarchy {
        &self.hierarchy
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level > self.hierarchy.finest() {
            return Err(Error::invalid(format!(
                "level {level} beyond the lab's finest level {}",
                self.hierarchy.finest()
            )));
        }
        Ok(())
    }

    /// Noise-free operators on `level`.
    pub fn operators(&self, level: usize) -> Result<Arc<OperatorSet>> {
        self.check_level(level)?;
        let mut cache = self.operators.lock().expect("lab lock poisoned");
        if let Some(o) = cache.get(&level) {
            return Ok(o.clone());
        }
        let o = Arc::new(OperatorSet::assemble(
            Arc::new(self.hierarchy.mesh(level).clone()),
            &NoiseModel::empty(),
        )?);
        cache.insert(level, o.clone());
        Ok(o)
    }

    /// Complete Stokes eigendecomposition on `level` (cached).
    pub fn decomposition(&self, level: usize) -> Result<Arc<SpectralDecomposition>> {
        let ops = self.operators(level)?;
        let mut cache = self.decompositions.lock().expect("lab lock poisoned");
        if let Some(d) = cache.get(&level) {
            return Ok(d.clone());
        }
        let d = Arc::new(stokes_eigendecomposition(&ops, None)?);
        cache.insert(level, d.clone());
        Ok(d)
    }

    /// `M_cf[i, j] = ∫ φ^coarse_i · φ^fine_j`.
    pub fn coupling(&self, coarse: usize, fine: usize) -> Result<Arc<CsrMatrix>> {
        if coarse > fine {
            return Err(Error::invalid("coupling needs coarse ≤ fine"));
        }
        if let Some(c) = self
            .couplings
            .lock()
            .expect("lab lock poisoned")
            .get(&(coarse, fine))
        {
            return Ok(c.clone());
        }
        let oc = self.operators(coarse)?;
        let of = self.operators(fine)?;
        let sc = PointSampler::new(
            &oc.disc,
            &self.hierarchy,
            coarse,
            fine,
            TRANSFER_QUADRATURE_DEGREE,
        )?;
        let sf = PointSampler::new(
            &of.disc,
            &self.hierarchy,
            fine,
            fine,
            TRANSFER_QUADRATURE_DEGREE,
        )?;
        let c = Arc::new(cross_mass(&sc, &sf)?);
        self.couplings
            .lock()
            .expect("lab lock poisoned")
            .insert((coarse, fine), c.clone());
        Ok(c)
    }

    pub fn surrogate_pair(&self, coarse: usize, gap: usize) -> Result<SurrogatePair> {
        if gap < 1 {
            return Err(Error::invalid("surrogate level must be strictly finer"));
        }
        let fine = coarse + gap;
        let dc = self.decomposition(coarse)?;
        let df = self.decomposition(fine)?;
        let mcf = self.coupling(coarse, fine)?;
        let mef = mcf.mul_dense(df.eigenvectors.as_ref());
        let projection = dc.eigenvectors.transpose() * mef.as_ref();
        Ok(SurrogatePair {
            coarse: dc,
            fine: df,
            projection,
        })
    }

    /// `‖I − J_{h,α}‖` from `Ḣ^β` to `L²` over coarse `levels`.
    pub fn smoothing_defect_study(
        &self,
        alpha: f64,
        beta: f64,
        levels: &[usize],
        gap: usize,
    ) -> Result<NormEstimate> {
        let mut est = NormEstimate::new("I-J", Some(alpha), beta, 0.0, gap);
        for &l in levels {
            let pair = self.surrogate_pair(l, gap)?;
            let j = build_smoothing_operator(&pair, alpha)?;
            let n = measure_identity_defect(j.as_ref(), &pair, beta)?;
            est.push(l, self.hierarchy.mesh(l).h(), n);
        }
        est.finish()
    }

    /// `‖I − 𝒫_h‖` from `Ḣ^β` to `L²` with the dense engine.
    pub fn projection_defect_dense(
        &self,
        beta: f64,
        levels: &[usize],
        gap: usize,
    ) -> Result<NormEstimate> {
        let mut est = NormEstimate::new("I-P_h", None, beta, 0.0, gap);
        for &l in levels {
            let pair = self.surrogate_pair(l, gap)?;
            let n = measure_identity_defect(pair.projection.as_ref(), &pair, beta)?;
            est.push(l, self.hierarchy.mesh(l).h(), n);
        }
        est.finish()
    }

    /// `‖I − 𝒫_h‖` from `Ḣ²` to `L²` by Lanczos on the fine surrogate:
    /// the top eigenvalue of `A_f⁻¹ (I − 𝒫_h* 𝒫_h) A_f⁻¹`.
    pub fn projection_defect_h2(&self, coarse: usize, gap: usize) -> Result<f64> {
        let fine = coarse + gap;
        let oc = self.operators(coarse)?;
        let of = self.operators(fine)?;
        let mcf = self.coupling(coarse, fine)?;
        let inv = |y: &[f64]| of.inverse_stokes(&of.mass.mul_vec(y));
        let apply = |y: &[f64]| -> Result<Vec<f64>> {
            let z = inv(y)?;
            let pc = oc.project_dual(&mcf.mul_vec(&z))?;
            let back = of.project_dual(&mcf.transpose_mul_vec(&pc))?;
            let w = crate::sparse::sub(&z, &back);
            inv(&w)
        };
        let start = of
            .helmholtz_project(crate::operators::ProjectionInput::Coefficients(
                &deterministic_start(of.n_velocity()),
            ))?
            .velocity;
        let res = lanczos_largest(apply, |a, b| of.l2_inner(a, b), start, 200, 1e-8)?;
        Ok(res.value.max(0.0).sqrt())
    }

    pub fn projection_rate_study(&self, levels: &[usize], gap: usize) -> Result<NormEstimate> {
        let mut est = NormEstimate::new("I-P_h", None, 2.0, 0.0, gap);
        for &l in levels {
            est.push(
                l,
                self.hierarchy.mesh(l).h(),
                self.projection_defect_h2(l, gap)?,
            );
        }
        est.finish()
    }

    /// `‖(A_f⁻¹𝒫_f − A_h⁻¹𝒫_h) f‖` in `L²` and `Ḣ¹` for one smooth field.
    pub fn stokes_approximation_error(
        &self,
        coarse: usize,
        gap: usize,
        field: &TransportField,
    ) -> Result<(f64, f64)> {
        let fine = coarse + gap;
        let oc = self.operators(coarse)?;
        let of = self.operators(fine)?;
        let f = |p| field.eval(p);
        let uc = oc.inverse_stokes(&oc.disc.load_vector(&f))?;
        let uf = of.inverse_stokes(&of.disc.load_vector(&f))?;
        let sc = PointSampler::new(
            &oc.disc,
            &self.hierarchy,
            coarse,
            fine,
            TRANSFER_QUADRATURE_DEGREE,
        )?;
        let sf = PointSampler::new(
            &of.disc,
            &self.hierarchy,
            fine,
            fine,
            TRANSFER_QUADRATURE_DEGREE,
        )?;
        let (l2, h1) = sf.difference_norms_sq(&sc.sample(&uc), &sf.sample(&uf));
        Ok((l2.sqrt(), h1.sqrt()))
    }

    /// One L² and one Ḣ¹ estimate per test field, slopes fitted over the
    /// finest three of `levels`.
    pub fn stokes_approximation_study(
        &self,
        levels: &[usize],
        gap: usize,
    ) -> Result<Vec<NormEstimate>> {
        let mut out = Vec::new();
        for (name, field) in smooth_test_fields() {
            let mut l2 =
                NormEstimate::new(&format!("Ainv_P-Ahinv_Ph[{name}]"), None, 0.0, 0.0, gap);
            let mut h1 =
                NormEstimate::new(&format!("Ainv_P-Ahinv_Ph[{name}]"), None, 0.0, 1.0, gap);
            for &l in levels {
                let (e0, e1) = self.stokes_approximation_error(l, gap, &field)?;
                let h = self.hierarchy.mesh(l).h();
                l2.push(l, h, e0);
                h1.push(l, h, e1);
            }
            out.push(l2.finish_finest(3)?);
            out.push(h1.finish_finest(3)?);
        }
        Ok(out)
    }

    pub fn inverse_inequality_study(
        &self,
        theta1: f64,
        theta2: f64,
        levels: &[usize],
    ) -> Result<NormEstimate> {
        let mut est = NormEstimate::new("inverse", None, theta1, theta2, 0);
        for &l in levels {
            let ops = self.operators(l)?;
            est.push(
                l,
                ops.mesh().h(),
                inverse_inequality_ratio(&ops, theta1, theta2)?,
            );
        }
        est.finish()
    }

    pub fn inf_sup_study(&self, levels: &[usize]) -> Result<Vec<InfSup>> {
        levels
            .iter()
            .map(|&l| inf_sup_constant(&*self.operators(l)?))
            .collect()
    }
}

/// Discrete surrogate of the smallness constant: `‖½Σ L_n² A_h⁻¹‖` on the
/// divergence-free space of `ops`, from a complete eigendecomposition.
pub fn kappa_surrogate(ops: &OperatorSet) -> Result<f64> {
    if ops.n_modes() == 0 {
        return Ok(0.0);
    }
    kappa_with(ops, &stokes_eigendecomposition(ops, None)?)
}

/// Smallness surrogate of a noise family on one lab level, reusing the
/// cached eigendecomposition of that level.
pub fn estimate_kappa(noise: &NoiseModel, lab: &OperatorLab, level: usize) -> Result<f64> {
    if noise.is_empty() {
        return Ok(0.0);
    }
    let dec = lab.decomposition(level)?;
    let ops = OperatorSet::assemble(Arc::new(lab.hierarchy().mesh(level).clone()), noise)?;
    let k = kappa_with(&ops, &dec)?;
    if k >= 1.0 {
        log::warn!("noise smallness surrogate {k:.3} is not below 1 at level {level}");
    }
    Ok(k)
}

fn kappa_with(ops: &OperatorSet, dec: &SpectralDecomposition) -> Result<f64> {
    let e = dec.eigenvectors.as_ref();
    let d = dec.count();
    let mut c = Mat::<f64>::zeros(d, d);
    for t in &ops.transport {
        let te = t.mul_dense(e);
        let ln = e.transpose() * te.as_ref();
        let l2 = ln.as_ref() * ln.as_ref();
        c += l2;
    }
    let w = Mat::from_fn(d, d, |i, j| 0.5 * c[(i, j)] / dec.eigenvalues[j]);
    let s = w
        .singular_values()
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    Ok(s.first().copied().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::norm2;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    #[test]
    fn eigenpairs_are_consistent() {
        let lab = OperatorLab::new(3);
        let ops = lab.operators(3).unwrap();
        let d = lab.decomposition(3).unwrap();
        assert!(d.is_complete());
        assert_eq!(d.space_dimension, ops.n_velocity() - ops.n_pressure() + 1);
        for w in d.eigenvalues.windows(2) {
            assert!(w[0] <= w[1]);
        }
        assert!(d.eigenvalues[0] > 0.0);
        for k in [0, 7, d.count() - 1] {
            let x: Vec<f64> = d.eigenvectors.col(k).iter().copied().collect();
            let rq = ops.h1_seminorm_sq(&x) / ops.l2_norm_sq(&x);
            assert!((rq - d.eigenvalues[k]).abs() < 1e-10 * d.eigenvalues[k]);
            assert!(ops.divergence_residual(&x) < 1e-9);
            assert!((ops.l2_norm_sq(&x) - 1.0).abs() < 1e-9);
        }
        let x0: Vec<f64> = d.eigenvectors.col(0).iter().copied().collect();
        let x1: Vec<f64> = d.eigenvectors.col(1).iter().copied().collect();
        assert!(ops.l2_inner(&x0, &x1).abs() < 1e-9);
    }

    #[test]
    fn fractional_powers() {
        let lab = OperatorLab::new(2);
        let ops = lab.operators(2).unwrap();
        let d = lab.decomposition(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = ops.random_divergence_free(&mut rng).unwrap();
        let id = fractional_apply(&d, &ops, 0.0, &v).unwrap();
        assert!(id.is_precise());
        let diff = crate::sparse::sub(&id.value, &v);
        assert!(ops.l2_norm_sq(&diff).sqrt() < 1e-10 * ops.l2_norm_sq(&v).sqrt());
        let a1 = fractional_apply(&d, &ops, 1.0, &v).unwrap().value;
        let ah = ops.apply_discrete_stokes(&v).unwrap();
        let diff = crate::sparse::sub(&a1, &ah);
        assert!(ops.l2_norm_sq(&diff).sqrt() < 1e-8 * ops.l2_norm_sq(&ah).sqrt());
        let half = fractional_apply(&d, &ops, 0.3, &v).unwrap().value;
        let twice = fractional_apply(&d, &ops, 0.4, &half).unwrap().value;
        let direct = fractional_apply(&d, &ops, 0.7, &v).unwrap().value;
        let diff = crate::sparse::sub(&twice, &direct);
        assert!(ops.l2_norm_sq(&diff).sqrt() < 1e-9 * ops.l2_norm_sq(&direct).sqrt());
        // a non-solenoidal vector leaves a truncation residual
        let w = random_vector(ops.n_velocity(), &mut rng);
        assert!(!fractional_apply(&d, &ops, 0.5, &w).unwrap().is_precise());
        assert!(fractional_apply(&d, &ops, 1.5, &v).is_err());
    }

    #[test]
    fn smoothing_operator_tends_to_projection() {
        let lab = OperatorLab::new(4);
        let pair = lab.surrogate_pair(2, 2).unwrap();
        let j = build_smoothing_operator(&pair, 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let c = random_vector(pair.fine.count(), &mut rng);
            let a = mat_vec(j.as_ref(), &c);
            let b = mat_vec(pair.projection.as_ref(), &c);
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!(norm2(&d) < 1e-4 * norm2(&b));
        }
        for alpha in [0.25, 0.375, 0.45] {
            let j = build_smoothing_operator(&pair, alpha).unwrap();
            assert!(j.col_iter().all(|c| c.iter().all(|x| x.is_finite())));
        }
        assert!(build_smoothing_operator(&pair, 1.0).is_err());
    }

    #[test]
    fn projection_matrix_matches_saddle_projection() {
        let lab = OperatorLab::new(3);
        let pair = lab.surrogate_pair(1, 2).unwrap();
        let oc = lab.operators(1).unwrap();
        let mcf = lab.coupling(1, 3).unwrap();
        let k = 3;
        let xf: Vec<f64> = pair.fine.eigenvectors.col(k).iter().copied().collect();
        let pc = oc.project_dual(&mcf.mul_vec(&xf)).unwrap();
        let coords = pair.coarse.coordinates(&oc.mass, &pc);
        for i in 0..coords.len() {
            assert!((coords[i] - pair.projection[(i, k)]).abs() < 1e-10);
        }
    }

    #[test]
    fn lift_then_project_is_a_contraction() {
        let lab = OperatorLab::new(3);
        let pair = lab.surrogate_pair(1, 2).unwrap();
        let n = measure_operator_norm(pair.projection.as_ref(), &pair, 0.0, 0.0).unwrap();
        assert!(n <= 1.0 + 1e-9);
    }

    #[test]
    fn dense_and_krylov_projection_defects_agree() {
        let lab = OperatorLab::new(4);
        let pair = lab.surrogate_pair(2, 2).unwrap();
        let dense = measure_identity_defect(pair.projection.as_ref(), &pair, 2.0).unwrap();
        let krylov = lab.projection_defect_h2(2, 2).unwrap();
        assert!((dense - krylov).abs() < 1e-6 * dense, "{dense} vs {krylov}");
    }

    #[test]
    fn inf_sup_has_one_gauge_mode() {
        let lab = OperatorLab::new(3);
        for l in 1..=3 {
            let r = inf_sup_constant(&lab.operators(l).unwrap()).unwrap();
            assert_eq!(r.near_zero_count, 1);
            assert!(r.beta > 0.05);
        }
    }

    #[test]
    fn lanczos_matches_dense_top_eigenvalue() {
        let lab = OperatorLab::new(3);
        let ops = lab.operators(3).unwrap();
        let d = lab.decomposition(3).unwrap();
        let lam = largest_stokes_eigenvalue(&ops).unwrap();
        let top = *d.eigenvalues.last().unwrap();
        assert!((lam - top).abs() < 1e-8 * top);
    }

    #[test]
    fn kappa_scales_quadratically() {
        let h = MeshHierarchy::unit_square(2);
        let mesh = Arc::new(h.mesh(2).clone());
        let noise = NoiseModel::default_family();
        let a = kappa_surrogate(&OperatorSet::assemble(mesh.clone(), &noise).unwrap()).unwrap();
        let b = kappa_surrogate(
            &OperatorSet::assemble(mesh.clone(), &noise.scaled(2.0).unwrap()).unwrap(),
        )
        .unwrap();
        assert!(a > 0.0);
        assert!((b - 4.0 * a).abs() < 1e-9 * b);
        let z =
            kappa_surrogate(&OperatorSet::assemble(mesh, &NoiseModel::empty()).unwrap()).unwrap();
        assert_eq!(z, 0.0);
        let lab = OperatorLab::new(2);
        let c = estimate_kappa(&noise, &lab, 2).unwrap();
        assert!((c - a).abs() < 1e-12 * a);
    }

    #[test]
    fn dimension_guard_trips() {
        let lab = OperatorLab::new(6);
        let ops = lab.operators(6).unwrap();
        assert!(matches!(
            stokes_eigendecomposition(&ops, None),
            Err(Error::DimensionGuard { .. })
        ));
    }
}
