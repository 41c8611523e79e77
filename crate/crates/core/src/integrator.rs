//! Drift-implicit Euler–Maruyama time stepping of the semidiscrete system and
//! the pathwise energy ledger.
//!
//! The Stokes part is implicit; the convection term, the Itô correction and
//! the transport noise are explicit. Each step is one saddle solve with the
//! factorization of `[[M + dt K, Bᵀ], [B, 0]]`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::Point;
use crate::noise::{
    BrownianDriver, ModeSpec, StreamFunction, TransportField, KAPPA_STABILITY_WARN,
};
use crate::operators::{OperatorSet, SaddleSolver};
use crate::sparse::{axpy, sub};

/// Divergence defect tolerated after a step (scale-free, see `OperatorSet::divergence_residual`).
pub const STEP_DIVERGENCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Flags {
    pub nonlinearity: bool,
    pub ito_correction: bool,
    pub noise: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            nonlinearity: true,
            ito_correction: true,
            noise: true,
        }
    }
}

impl Flags {
    /// Stokes flow only.
    pub fn linear_deterministic() -> Self {
        Self {
            nonlinearity: false,
            ito_correction: false,
            noise: false,
        }
    }
}

/// Initial velocity before projection.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialVelocity {
    Zero,
    /// Curl of a stream function, same grammar as noise modes.
    Stream(ModeSpec),
    /// Coefficient vector on the simulation mesh (already in the velocity space).
    Coefficients(Vec<f64>),
}

impl Default for InitialVelocity {
    fn default() -> Self {
        InitialVelocity::Stream(ModeSpec {
            stream: StreamFunction::Named("bump".into()),
            amplitude: DEFAULT_U0_AMPLITUDE,
        })
    }
}

/// Peak speed of the default vortex is about 0.8.
pub const DEFAULT_U0_AMPLITUDE: f64 = 64.0;

impl InitialVelocity {
    /// `u_h(0) = 𝒫_h u_0`.
    pub fn project(&self, ops: &OperatorSet) -> Result<Vec<f64>> {
        match self {
            InitialVelocity::Zero => Ok(vec![0.0; ops.n_velocity()]),
            InitialVelocity::Stream(spec) => {
                let field = TransportField::new(spec.stream.polynomial()?, spec.amplitude);
                ops.project_field(&|p| field.eval(p))
            }
            InitialVelocity::Coefficients(c) => {
                if c.len() != ops.n_velocity() {
                    return Err(Error::invalid(format!(
                        "initial coefficients have length {}, mesh needs {}",
                        c.len(),
                        ops.n_velocity()
                    )));
                }
                ops.project_dual(&ops.mass.mul_vec(c))
            }
        }
    }
}

/// Time-dependent deterministic body force, outside the stochastic model;
/// used for manufactured-solution checks of the deterministic core.
pub type Forcing = Arc<dyn Fn(f64, Point) -> [f64; 2] + Send + Sync>;

#[derive(Clone)]
pub struct SimConfig {
    pub t_final: f64,
    pub steps: usize,
    pub level: usize,
    pub u0: InitialVelocity,
    pub seed: u64,
    pub sample_index: u64,
    pub flags: Flags,
    pub snapshot_stride: usize,
    pub forcing: Option<Forcing>,
}

impl std::fmt::Debug for SimConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimConfig")
            .field("t_final", &self.t_final)
            .field("steps", &self.steps)
            .field("level", &self.level)
            .field("u0", &self.u0)
            .field("seed", &self.seed)
            .field("sample_index", &self.sample_index)
            .field("flags", &self.flags)
            .field("snapshot_stride", &self.snapshot_stride)
            .field("forcing", &self.forcing.is_some())
            .finish()
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t_final: 0.05,
            steps: 64,
            level: 4,
            u0: InitialVelocity::default(),
            seed: 0,
            sample_index: 0,
            flags: Flags::default(),
            snapshot_stride: 1,
            forcing: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::Config(format!(
                "T must be positive, got {}",
                self.t_final
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.snapshot_stride == 0 {
            return Err(Error::Config("snapshot stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }
}

/// Norms after step `step` (step 0 is the initial state).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRecord {
    pub step: usize,
    pub t: f64,
    /// `‖u^m‖²`
    pub l2_sq: f64,
    /// `(u^m)ᵀ K u^m`
    pub h1_sq: f64,
    /// `‖u^m − u^{m−1}‖²`, zero at step 0.
    pub increment_sq: f64,
}

#[derive(Debug, Clone)]
pub struct TrajectoryState {
    pub u: Vec<f64>,
    /// Pressure multiplier of the last solve.
    pub q: Vec<f64>,
    pub t: f64,
    pub step: usize,
    /// `Σ_{j ≥ 1} dt (u^j)ᵀ K u^j`; the energy identity carries a factor 2 on it.
    pub dissipation: f64,
    pub log: Vec<NormRecord>,
}

impl TrajectoryState {
    pub fn new(ops: &OperatorSet, u: Vec<f64>) -> Result<Self> {
        if u.len() != ops.n_velocity() {
            return Err(Error::invalid("initial state has the wrong length"));
        }
        let rec = NormRecord {
            step: 0,
            t: 0.0,
            l2_sq: ops.l2_norm_sq(&u),
            h1_sq: ops.h1_seminorm_sq(&u),
            increment_sq: 0.0,
        };
        Ok(Self {
            q: vec![0.0; ops.n_pressure()],
            u,
            t: 0.0,
            step: 0,
            dissipation: 0.0,
            log: vec![rec],
        })
    }
}

/// One factorization per (mesh, dt), shared by any number of trajectories.
pub struct Stepper<'a> {
    ops: &'a OperatorSet,
    solver: SaddleSolver,
    dt: f64,
    flags: Flags,
    forcing: Option<Forcing>,
}

impl<'a> Stepper<'a> {
    pub fn new(ops: &'a OperatorSet, dt: f64, flags: Flags) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid(format!(
                "time step must be positive, got {dt}"
            )));
        }
        Ok(Self {
            ops,
            solver: ops.step_solver(dt)?,
            dt,
            flags,
            forcing: None,
        })
    }

    pub fn with_forcing(mut self, forcing: Option<Forcing>) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn ops(&self) -> &OperatorSet {
        self.ops
    }

    /// Right-hand side dual vector of the step from `u` with increments `dw`.
    pub fn rhs(&self, u: &[f64], t: f64, dw: &[f64]) -> Result<Vec<f64>> {
        let ops = self.ops;
        let dt = self.dt;
        let mut rhs = ops.mass.mul_vec(u);
        if self.flags.nonlinearity {
            axpy(-dt, &ops.eval_nonlinear(u)?, &mut rhs);
        }
        let noisy = self.flags.noise && dw.iter().any(|&w| w != 0.0);
        for (n, t_n) in ops.transport.iter().enumerate() {
            if self.flags.ito_correction {
                // ⟨L_n² u, w⟩ = ⟨T_n L_n u, w⟩ for divergence-free w
                let z = ops.apply_transport(n, u)?;
                t_n.mul_vec_acc(0.5 * dt, &z, &mut rhs);
            }
            if noisy {
                t_n.mul_vec_acc(dw[n], u, &mut rhs);
            }
        }
        if let Some(f) = &self.forcing {
            let tt = t + dt;
            axpy(dt, &ops.disc.load_vector(&|p| f(tt, p)), &mut rhs);
        }
        Ok(rhs)
    }

    /// Advances `state` by one step with Brownian increments `dw` (one per mode).
    pub fn step(&self, state: &mut TrajectoryState, dw: &[f64]) -> Result<()> {
        if dw.len() != self.ops.n_modes() {
            return Err(Error::invalid(format!(
                "increment row has {} entries, noise has {} modes",
                dw.len(),
                self.ops.n_modes()
            )));
        }
        let next = state.step + 1;
        let rhs = self.rhs(&state.u, state.t, dw)?;
        if rhs.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: next });
        }
        let (u, q) = self.solver.solve(&rhs).map_err(|e| match e {
            Error::Solver { context, residual } => Error::Solver {
                context: format!("{context} at step {next}"),
                residual,
            },
            e => e,
        })?;
        if u.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { step: next });
        }
        let r = self.ops.divergence_residual(&u);
        if r > STEP_DIVERGENCE_TOLERANCE {
            return Err(Error::NotDivergenceFree { residual: r });
        }
        let h1_sq = self.ops.h1_seminorm_sq(&u);
        let rec = NormRecord {
            step: next,
            t: next as f64 * self.dt,
            l2_sq: self.ops.l2_norm_sq(&u),
            h1_sq,
            increment_sq: self.ops.l2_norm_sq(&sub(&u, &state.u)),
        };
        state.u = u;
        state.q = q;
        state.step = next;
        state.t = rec.t;
        state.dissipation += self.dt * h1_sq;
        state.log.push(rec);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub log: Vec<NormRecord>,
    /// `(step, coefficients)` at every stride-th step, always including 0 and the last step.
    pub snapshots: Vec<(usize, Vec<f64>)>,
    pub final_state: TrajectoryState,
}

/// Runs one trajectory on `ops` driven by `path`.
pub fn simulate(
    config: &SimConfig,
    ops: &OperatorSet,
    path: &BrownianDriver,
) -> Result<Trajectory> {
    config.validate()?;
    if path.steps != config.steps || path.n_modes != ops.n_modes() {
        return Err(Error::invalid(format!(
            "path has {} steps x {} modes, expected {} x {}",
            path.steps,
            path.n_modes,
            config.steps,
            ops.n_modes()
        )));
    }
    if (path.dt - config.dt()).abs() > 1e-12 * config.dt() {
        return Err(Error::invalid(
            "path time step does not match the configuration",
        ));
    }
    if let Some(k) = ops.noise.kappa_estimate {
        if k >= KAPPA_STABILITY_WARN && config.flags.noise {
            log::warn!("noise smallness estimate {k:.3} is large; the explicit Itô correction may be unstable");
        }
    }
    let stepper =
        Stepper::new(ops, config.dt(), config.flags)?.with_forcing(config.forcing.clone());
    let u0 = config.u0.project(ops)?;
    let mut state = TrajectoryState::new(ops, u0)?;
    let mut snapshots = vec![(0, state.u.clone())];
    for m in 0..config.steps {
        stepper.step(&mut state, path.row(m))?;
        if state.step % config.snapshot_stride == 0 || state.step == config.steps {
            snapshots.push((state.step, state.u.clone()));
        }
    }
    Ok(Trajectory {
        dt: config.dt(),
        log: state.log.clone(),
        snapshots,
        final_state: state,
    })
}

/// Where the dissipation integrand is sampled in the energy ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DissipationQuadrature {
    /// `Σ_{j=1..m} dt ‖u^j‖²_{Ḣ¹}`, matching the implicit Stokes step.
    ImplicitPoint,
    /// `Σ_{j=0..m−1} dt ‖u^j‖²_{Ḣ¹}`.
    LeftPoint,
}

impl std::fmt::Display for DissipationQuadrature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DissipationQuadrature::ImplicitPoint => "implicit-point",
            DissipationQuadrature::LeftPoint => "left-point",
        })
    }
}

#[derive(Debug, Clone)]
pub struct EnergyReport {
    pub convention: DissipationQuadrature,
    /// `r_m = ‖u^m‖² + 2 Σ dt ‖u^j‖²_{Ḣ¹} − ‖u^0‖²`
    pub residuals: Vec<f64>,
    pub max_abs: f64,
    /// Per-step defect of `‖u^{m+1}‖² − ‖u^m‖² + 2dt‖u^{m+1}‖²_{Ḣ¹} + ‖u^{m+1} − u^m‖²`,
    /// which vanishes exactly for the linear deterministic step.
    pub step_defects: Vec<f64>,
}

pub fn energy_report(
    log: &[NormRecord],
    dt: f64,
    convention: DissipationQuadrature,
) -> EnergyReport {
    let mut residuals = Vec::with_capacity(log.len());
    let mut step_defects = Vec::with_capacity(log.len().saturating_sub(1));
    let e0 = log.first().map_or(0.0, |r| r.l2_sq);
    let mut diss = 0.0;
    for (m, rec) in log.iter().enumerate() {
        if m > 0 {
            diss += dt
                * match convention {
                    DissipationQuadrature::ImplicitPoint => rec.h1_sq,
                    DissipationQuadrature::LeftPoint => log[m - 1].h1_sq,
                };
            step_defects
                .push(rec.l2_sq - log[m - 1].l2_sq + 2.0 * dt * rec.h1_sq + rec.increment_sq);
        }
        residuals.push(rec.l2_sq + 2.0 * diss - e0);
    }
    let max_abs = residuals.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    EnergyReport {
        convention,
        residuals,
        max_abs,
        step_defects,
    }
}

/// CSV with columns `step, t, l2_norm, h1_seminorm, energy_residual`.
pub fn write_norms_csv<W: Write>(
    mut w: W,
    log: &[NormRecord],
    report: &EnergyReport,
) -> std::io::Result<()> {
    writeln!(w, "# dissipation quadrature: {}", report.convention)?;
    writeln!(
        w,
        "step,t [time],l2_norm [velocity],h1_seminorm [velocity/length],energy_residual [velocity^2]"
    )?;
    for (rec, r) in log.iter().zip(&report.residuals) {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e}",
            rec.step,
            rec.t,
            rec.l2_sq.sqrt(),
            rec.h1_sq.sqrt(),
            r
        )?;
    }
    Ok(())
}

/// Plain-text coefficient file: the length on the first line, then one value per line.
pub fn write_coefficients<W: Write>(mut w: W, u: &[f64]) -> std::io::Result<()> {
    writeln!(w, "{}", u.len())?;
    for x in u {
        writeln!(w, "{x:e}")?;
    }
    Ok(())
}

pub fn read_coefficients(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let n: usize = lines
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| Error::Config(format!("{}: missing length header", path.display())))?;
    let v = lines
        .map(|l| {
            l.parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: bad value '{l}'", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    if v.len() != n {
        return Err(Error::Config(format!(
            "{}: header says {n} values, found {}",
            path.display(),
            v.len()
        )));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::MeshHierarchy;
    use crate::noise::NoiseModel;

    fn setup(level: usize, noise: &NoiseModel) -> OperatorSet {
        let h = MeshHierarchy::unit_square(level);
        OperatorSet::assemble(Arc::new(h.mesh(level).clone()), noise).unwrap()
    }

    fn config(level: usize) -> SimConfig {
        SimConfig {
            level,
            steps: 16,
            t_final: 0.02,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let noise = NoiseModel::default_family();
        let ops = setup(2, &noise);
        let cfg = SimConfig {
            u0: InitialVelocity::Zero,
            ..config(2)
        };
        let path = BrownianDriver::sample_path(1, 0, cfg.steps, cfg.dt(), noise.len()).unwrap();
        let tr = simulate(&cfg, &ops, &path).unwrap();
        assert!(tr.final_state.u.iter().all(|&x| x == 0.0));
        let rep = energy_report(&tr.log, tr.dt, DissipationQuadrature::ImplicitPoint);
        assert!(rep.residuals.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn stokes_step_is_a_contraction_with_exact_identity() {
        let noise = NoiseModel::default_family();
        let ops = setup(3, &noise);
        let cfg = SimConfig {
            flags: Flags::linear_deterministic(),
            ..config(3)
        };
        let path = BrownianDriver::zero(cfg.steps, cfg.dt(), noise.len());
        let tr = simulate(&cfg, &ops, &path).unwrap();
        for w in tr.log.windows(2) {
            assert!(w[1].l2_sq < w[0].l2_sq);
        }
        let rep = energy_report(&tr.log, tr.dt, DissipationQuadrature::ImplicitPoint);
        let e0 = tr.log[0].l2_sq;
        assert!(rep.step_defects.iter().all(|d| d.abs() < 1e-10 * e0));
    }

    #[test]
    fn stride_changes_only_storage() {
        let noise = NoiseModel::default_family();
        let ops = setup(2, &noise);
        let a = config(2);
        let b = SimConfig {
            snapshot_stride: 4,
            ..config(2)
        };
        let path = BrownianDriver::sample_path(3, 2, a.steps, a.dt(), noise.len()).unwrap();
        let ta = simulate(&a, &ops, &path).unwrap();
        let tb = simulate(&b, &ops, &path).unwrap();
        assert_eq!(ta.log, tb.log);
        assert_eq!(ta.snapshots.len(), 17);
        assert_eq!(tb.snapshots.len(), 5);
        assert_eq!(ta.snapshots[8], tb.snapshots[2]);
    }

    #[test]
    fn zero_amplitude_matches_deterministic_run() {
        let noise = NoiseModel::default_family();
        let quiet = noise.scaled(0.0).unwrap();
        let ops_quiet = setup(2, &quiet);
        let ops_det = setup(2, &NoiseModel::empty());
        let cfg = config(2);
        let p1 = BrownianDriver::sample_path(5, 0, cfg.steps, cfg.dt(), quiet.len()).unwrap();
        let p2 = BrownianDriver::zero(cfg.steps, cfg.dt(), 0);
        let a = simulate(&cfg, &ops_quiet, &p1).unwrap();
        let b = simulate(&cfg, &ops_det, &p2).unwrap();
        assert_eq!(a.final_state.u, b.final_state.u);
    }

    #[test]
    fn mismatched_path_is_rejected() {
        let noise = NoiseModel::default_family();
        let ops = setup(1, &noise);
        let cfg = config(1);
        let path = BrownianDriver::sample_path(1, 0, cfg.steps + 1, cfg.dt(), noise.len()).unwrap();
        assert!(simulate(&cfg, &ops, &path).is_err());
        let cfg0 = SimConfig {
            steps: 0,
            ..config(1)
        };
        assert!(cfg0.validate().is_err());
    }

    #[test]
    fn coefficient_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.txt");
        let u = vec![1.5, -2.0e-17, 3.25];
        write_coefficients(std::fs::File::create(&p).unwrap(), &u).unwrap();
        assert_eq!(read_coefficients(&p).unwrap(), u);
    }
}
