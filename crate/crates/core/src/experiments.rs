//! Monte Carlo strong-convergence studies, the algebraic identity suite, the
//! time-refinement study of the energy residual, and empirical order fitting.
//!
//! The reference level stands in for the exact solution. Every sample draws
//! one Brownian path and drives all levels with it (common random numbers),
//! so the measured error is a pathwise spatial error on a shared time grid.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{
    energy_report, simulate, DissipationQuadrature, Flags, InitialVelocity, SimConfig, Stepper,
    TrajectoryState,
};
use crate::mesh::MeshHierarchy;
use crate::noise::{BrownianDriver, NoiseModel};
use crate::operators::{random_vector, OperatorSet, ProjectionInput};
use crate::sparse::sub;
use crate::transfer::{PointSampler, SampledField, TRANSFER_QUADRATURE_DEGREE};

/// Least-squares slope of `log e` against `log h`, plus the pairwise orders.
#[derive(Debug, Clone, PartialEq)]
pub struct EocFit {
    pub slope: f64,
    pub pairwise: Vec<f64>,
}

pub fn fit_eoc(errors: &[f64], hs: &[f64]) -> Result<EocFit> {
    if errors.len() != hs.len() || errors.len() < 2 {
        return Err(Error::invalid(
            "order fit needs at least two (error, h) pairs",
        ));
    }
    if let Some(e) = errors
        .iter()
        .chain(hs)
        .find(|&&x| !(x > 0.0) || !x.is_finite())
    {
        return Err(Error::invalid(format!(
            "order fit needs positive finite data, got {e}"
        )));
    }
    let x: Vec<f64> = hs.iter().map(|h| h.ln()).collect();
    let y: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("order fit needs distinct mesh sizes"));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let pairwise = (0..x.len() - 1)
        .map(|i| (y[i] - y[i + 1]) / (x[i] - x[i + 1]))
        .collect();
    Ok(EocFit {
        slope: sxy / sxx,
        pairwise,
    })
}

/// Compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub levels: Vec<usize>,
    pub reference_level: usize,
    pub t_final: f64,
    pub steps: usize,
    pub samples: usize,
    pub base_seed: u64,
    pub noise: NoiseModel,
    pub u0: InitialVelocity,
    pub flags: Flags,
    /// Only every stride-th step enters the sup-in-time error.
    pub snapshot_stride: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            levels: vec![2, 3, 4, 5],
            reference_level: 6,
            t_final: 0.05,
            steps: 64,
            samples: 16,
            base_seed: 0,
            noise: NoiseModel::default_family(),
            u0: InitialVelocity::default(),
            flags: Flags::default(),
            snapshot_stride: 1,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("study needs at least one level".into()));
        }
        if self.levels.iter().any(|&l| l > self.reference_level) {
            return Err(Error::Config(
                "reference level must not be coarser than a study level".into(),
            ));
        }
        if self.samples == 0 || self.steps == 0 || self.snapshot_stride == 0 {
            return Err(Error::Config(
                "samples, steps and snapshot_stride must be positive".into(),
            ));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::Config("T must be positive".into()));
        }
        if matches!(self.u0, InitialVelocity::Coefficients(_)) {
            return Err(Error::Config(
                "a study needs u0 as a field, coefficient files belong to one mesh".into(),
            ));
        }
        if let Some(k) = self.noise.kappa_estimate {
            if k >= 1.0 {
                return Err(Error::Config(format!(
                    "noise smallness estimate {k:.3} is not below 1"
                )));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }
}

/// Per-sample, per-level squared error functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleErrors {
    pub index: u64,
    /// `max_m ‖u^m − u_ref^m‖²`
    pub sup_l2_sq: Vec<f64>,
    /// `Σ_m dt |u^m − u_ref^m|²_{H¹}`
    pub h1_int_sq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LevelErrors {
    pub level: usize,
    pub h: f64,
    pub e_c: f64,
    pub e_h1: f64,
    pub combined: f64,
    pub se_c: f64,
    pub se_h1: f64,
    pub se_combined: f64,
}

#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub levels: Vec<LevelErrors>,
    /// Fitted order of the combined error, `None` when some error vanishes.
    pub slope: Option<f64>,
    pub pairwise: Vec<f64>,
    pub samples: usize,
    pub aborted: Vec<(u64, String)>,
    pub per_sample: Vec<SampleErrors>,
    pub warnings: Vec<String>,
}

impl ErrorReport {
    pub fn combined(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.combined).collect()
    }

    pub fn is_strictly_decreasing(&self) -> bool {
        self.levels
            .windows(2)
            .all(|w| w[1].combined < w[0].combined)
    }

    /// Standard errors of both neighbours below half the level-to-level drop.
    pub fn standard_errors_resolve_drops(&self) -> bool {
        self.levels.windows(2).all(|w| {
            let drop = w[0].combined - w[1].combined;
            w[0].se_combined < 0.5 * drop && w[1].se_combined < 0.5 * drop
        })
    }
}

/// Mean-square estimates with delta-method standard errors of the square roots.
fn aggregate(level: usize, h: f64, a: &[f64], b: &[f64]) -> LevelErrors {
    let n = a.len() as f64;
    let mean = |x: &[f64]| {
        let mut k = Kahan::default();
        x.iter().for_each(|&v| k.add(v));
        k.sum / n
    };
    let ma = mean(a);
    let mb = mean(b);
    let (mut vaa, mut vbb, mut vab) = (Kahan::default(), Kahan::default(), Kahan::default());
    for (x, y) in a.iter().zip(b) {
        vaa.add((x - ma) * (x - ma));
        vbb.add((y - mb) * (y - mb));
        vab.add((x - ma) * (y - mb));
    }
    let denom = if a.len() > 1 {
        (n - 1.0) * n
    } else {
        f64::INFINITY
    };
    let (var_a, var_b, cov) = (vaa.sum / denom, vbb.sum / denom, vab.sum / denom);
    let e_c = ma.sqrt();
    let e_h1 = mb.sqrt();
    let ga = if e_c > 0.0 { 0.5 / e_c } else { 0.0 };
    let gb = if e_h1 > 0.0 { 0.5 / e_h1 } else { 0.0 };
    let var_comb = ga * ga * var_a + gb * gb * var_b + 2.0 * ga * gb * cov;
    LevelErrors {
        level,
        h,
        e_c,
        e_h1,
        combined: e_c + e_h1,
        se_c: (ga * ga * var_a).sqrt(),
        se_h1: (gb * gb * var_b).sqrt(),
        se_combined: var_comb.max(0.0).sqrt(),
    }
}

/// Shared, read-only setup of a study.
struct StudySetup {
    levels: Vec<usize>,
    ops: Vec<Arc<OperatorSet>>,
    samplers: Vec<PointSampler>,
    u0: Vec<Vec<f64>>,
}

fn build_setup(cfg: &StudyConfig) -> Result<StudySetup> {
    let hierarchy = MeshHierarchy::unit_square(cfg.reference_level);
    let mut levels = cfg.levels.clone();
    levels.push(cfg.reference_level);
    let ops = levels
        .iter()
        .map(|&l| {
            OperatorSet::assemble(Arc::new(hierarchy.mesh(l).clone()), &cfg.noise).map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()?;
    let samplers = levels
        .iter()
        .zip(&ops)
        .map(|(&l, o)| {
            PointSampler::new(
                &o.disc,
                &hierarchy,
                l,
                cfg.reference_level,
                TRANSFER_QUADRATURE_DEGREE,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let u0 = ops
        .iter()
        .map(|o| cfg.u0.project(o))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudySetup {
        levels,
        ops,
        samplers,
        u0,
    })
}

/// Runs every level in lockstep on one path and accumulates the errors.
fn run_sample(
    cfg: &StudyConfig,
    setup: &StudySetup,
    steppers: &[Stepper<'_>],
    index: u64,
) -> Result<SampleErrors> {
    let nl = setup.levels.len() - 1;
    let path =
        BrownianDriver::sample_path(cfg.base_seed, index, cfg.steps, cfg.dt(), cfg.noise.len())?;
    let mut states = setup
        .ops
        .iter()
        .zip(&setup.u0)
        .map(|(o, u)| TrajectoryState::new(o, u.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut sup = vec![0.0f64; nl];
    let mut h1 = vec![Kahan::default(); nl];
    let mut reference = SampledField::default();
    let mut coarse = SampledField::default();
    let dt = cfg.dt();
    for m in 0..=cfg.steps {
        if m > 0 {
            for (s, st) in states.iter_mut().zip(steppers) {
                st.step(s, path.row(m - 1))?;
            }
        }
        setup.samplers[nl].sample_into(&states[nl].u, &mut reference);
        for i in 0..nl {
            setup.samplers[i].sample_into(&states[i].u, &mut coarse);
            let (l2, g) = setup.samplers[nl].difference_norms_sq(&coarse, &reference);
            if m % cfg.snapshot_stride == 0 || m == cfg.steps {
                sup[i] = sup[i].max(l2);
            }
            if m > 0 {
                h1[i].add(dt * g);
            }
        }
    }
    Ok(SampleErrors {
        index,
        sup_l2_sq: sup,
        h1_int_sq: h1.iter().map(|k| k.sum).collect(),
    })
}

pub fn run_convergence_study(cfg: &StudyConfig) -> Result<ErrorReport> {
    cfg.validate()?;
    faer::set_global_parallelism(faer::Par::Seq);
    let setup = build_setup(cfg)?;
    let steppers = setup
        .ops
        .iter()
        .map(|o| Stepper::new(o, cfg.dt(), cfg.flags))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<(u64, Result<SampleErrors>)> = (0..cfg.samples as u64)
        .into_par_iter()
        .map(|s| (s, run_sample(cfg, &setup, &steppers, s)))
        .collect();
    let mut per_sample = Vec::new();
    let mut aborted = Vec::new();
    for (s, r) in results {
        match r {
            Ok(e) => per_sample.push(e),
            Err(e) => {
                log::warn!("sample {s} aborted: {e}");
                aborted.push((s, e.to_string()));
            }
        }
    }
    if aborted.len() * 10 > cfg.samples {
        return Err(Error::TooManyAborts {
            aborted: aborted.len(),
            samples: cfg.samples,
        });
    }
    let mut warnings = Vec::new();
    if cfg.snapshot_stride > 1 {
        warnings.push(format!(
            "snapshot stride {} > 1: the sup-in-time error is sampled coarsely",
            cfg.snapshot_stride
        ));
    }
    if let Some(k) = cfg.noise.kappa_estimate {
        if k >= crate::noise::KAPPA_STABILITY_WARN {
            warnings.push(format!("noise smallness estimate {k:.3} is close to 1"));
        }
    }
    let nl = setup.levels.len() - 1;
    let levels: Vec<LevelErrors> = (0..nl)
        .map(|i| {
            let a: Vec<f64> = per_sample.iter().map(|s| s.sup_l2_sq[i]).collect();
            let b: Vec<f64> = per_sample.iter().map(|s| s.h1_int_sq[i]).collect();
            aggregate(setup.levels[i], setup.ops[i].mesh().h(), &a, &b)
        })
        .collect();
    let combined: Vec<f64> = levels.iter().map(|l| l.combined).collect();
    let hs: Vec<f64> = levels.iter().map(|l| l.h).collect();
    let (slope, pairwise) = if combined.len() >= 2 && combined.iter().all(|&e| e > 0.0) {
        let f = fit_eoc(&combined, &hs)?;
        (Some(f.slope), f.pairwise)
    } else {
        (None, Vec::new())
    };
    if levels.windows(2).any(|w| w[1].combined > w[0].combined) {
        warnings.push("combined error is not monotone in the level".into());
    }
    Ok(ErrorReport {
        levels,
        slope,
        pairwise,
        samples: cfg.samples,
        aborted,
        per_sample,
        warnings,
    })
}

/// Errors of one sample only, for isolated reruns.
pub fn run_single_sample(cfg: &StudyConfig, index: u64) -> Result<SampleErrors> {
    cfg.validate()?;
    let setup = build_setup(cfg)?;
    let steppers = setup
        .ops
        .iter()
        .map(|o| Stepper::new(o, cfg.dt(), cfg.flags))
        .collect::<Result<Vec<_>>>()?;
    run_sample(cfg, &setup, &steppers, index)
}

pub fn write_report_csv<W: Write>(mut w: W, r: &ErrorReport) -> std::io::Result<()> {
    writeln!(
        w,
        "level,h [length],E_C [velocity],E_H1 [velocity*sqrt(time)/length],combined,se_E_C,se_E_H1,se_combined,fitted_slope"
    )?;
    let slope = r.slope.map_or("none".to_string(), |s| format!("{s:.6}"));
    for l in &r.levels {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            l.level, l.h, l.e_c, l.e_h1, l.combined, l.se_c, l.se_h1, l.se_combined, slope
        )?;
    }
    Ok(())
}

pub fn write_samples_csv<W: Write>(mut w: W, r: &ErrorReport) -> std::io::Result<()> {
    writeln!(
        w,
        "sample,level,sup_l2_sq [velocity^2],h1_int_sq [velocity^2*time/length^2]"
    )?;
    for s in &r.per_sample {
        for (i, l) in r.levels.iter().enumerate() {
            writeln!(
                w,
                "{},{},{:e},{:e}",
                s.index, l.level, s.sup_l2_sq[i], s.h1_int_sq[i]
            )?;
        }
    }
    for (s, msg) in &r.aborted {
        writeln!(w, "# sample {s} aborted: {msg}")?;
    }
    Ok(())
}

/// Largest relative defect of one identity over a batch of vectors.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub level: usize,
    pub max_relative: f64,
}

fn rel(defect: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        defect.abs()
    } else {
        defect.abs() / scale
    }
}

/// Skew-symmetry, convection neutrality, the coercivity relation, the
/// Itô/Hilbert–Schmidt relations and the projection identities on random
/// discretely divergence-free vectors.
pub fn identity_suite(
    levels: &[usize],
    vectors: usize,
    seed: u64,
    noise: &NoiseModel,
) -> Result<Vec<IdentityCheck>> {
    use rand_core::SeedableRng;
    let finest = levels.iter().copied().max().unwrap_or(0);
    let hierarchy = MeshHierarchy::unit_square(finest);
    let mut out = Vec::new();
    for &l in levels {
        let ops = OperatorSet::assemble(Arc::new(hierarchy.mesh(l).clone()), noise)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ ((l as u64) << 32));
        let mut worst = [0.0f64; 7];
        for _ in 0..vectors {
            let f = random_vector(ops.n_velocity(), &mut rng);
            let v = ops
                .helmholtz_project(ProjectionInput::Coefficients(&f))?
                .velocity;
            let vn = ops.l2_norm_sq(&v).sqrt();

            // ⟨L_n v, v⟩ = 0 and ⟨L_n² v, v⟩ = −‖L_n v‖²
            let mut hs = 0.0;
            for n in 0..ops.n_modes() {
                let lv = ops.apply_transport(n, &v)?;
                let lvn = ops.l2_norm_sq(&lv);
                worst[0] = worst[0].max(rel(ops.l2_inner(&lv, &v), lvn.sqrt() * vn));
                let llv = ops.apply_transport(n, &lv)?;
                worst[4] = worst[4].max(rel(ops.l2_inner(&llv, &v) + lvn, lvn));
                hs += lvn;
            }

            let g = ops.projected_nonlinear(&v)?;
            let gv = ops.l2_inner(&g, &v);
            worst[1] = worst[1].max(rel(gv, ops.l2_norm_sq(&g).sqrt() * vn));

            // 2⟨−A_h v + ½ΣL²v − 𝒫_h G(v), v⟩ + ‖F_h(v)‖²_HS + 2‖v‖²_{Ḣ¹} = 0
            let av = ops.l2_inner(&ops.apply_discrete_stokes(&v)?, &v);
            let ito = ops.l2_inner(&ops.ito_correction(&v)?, &v);
            let hs_direct = ops.noise_hs_norm_sq(&v)?;
            let h1 = ops.h1_seminorm_sq(&v);
            let terms = [-2.0 * av, 2.0 * ito, -2.0 * gv, hs_direct, 2.0 * h1];
            let scale: f64 = terms.iter().map(|t| t.abs()).sum();
            worst[2] = worst[2].max(rel(terms.iter().sum(), scale));

            // Σ‖L_n v‖² against −2⟨½ΣL²v, v⟩
            worst[5] = worst[5].max(rel(hs + 2.0 * ito, hs));

            let pf = ops
                .helmholtz_project(ProjectionInput::Coefficients(&v))?
                .velocity;
            worst[3] = worst[3].max(rel(ops.l2_norm_sq(&sub(&pf, &v)).sqrt(), vn));
            let r = sub(&f, &v);
            let ff = ops.l2_norm_sq(&f);
            worst[6] = worst[6].max(rel(ff - vn * vn - ops.l2_norm_sq(&r), ff));
        }
        let names = [
            "transport skew-symmetry",
            "convection neutrality",
            "coercivity relation",
            "projection idempotency",
            "Ito correction pairing",
            "Hilbert-Schmidt norm",
            "projection Pythagoras",
        ];
        for (name, w) in names.iter().zip(worst) {
            out.push(IdentityCheck {
                name,
                level: l,
                max_relative: w,
            });
        }
    }
    Ok(out)
}

/// Maximum energy residual under time refinement along one fine path.
#[derive(Debug, Clone)]
pub struct EnergyStudy {
    pub level: usize,
    pub steps: Vec<usize>,
    pub dts: Vec<f64>,
    pub max_residual: Vec<f64>,
    pub order: Option<f64>,
    pub convention: DissipationQuadrature,
}

/// Simulates with `base_steps · 2^k` steps for `k < refinements`, all driven
/// by coarsenings of one path on the finest grid.
pub fn energy_refinement_study(
    base: &SimConfig,
    ops: &OperatorSet,
    base_steps: usize,
    refinements: usize,
) -> Result<EnergyStudy> {
    if refinements < 2 || base_steps == 0 {
        return Err(Error::invalid("energy study needs at least two step sizes"));
    }
    let finest = base_steps << (refinements - 1);
    let fine_path = BrownianDriver::sample_path(
        base.seed,
        base.sample_index,
        finest,
        base.t_final / finest as f64,
        ops.n_modes(),
    )?;
    let mut steps = Vec::new();
    let mut dts = Vec::new();
    let mut max_residual = Vec::new();
    for k in 0..refinements {
        let n = base_steps << k;
        let path = fine_path.coarsen(finest / n)?;
        let cfg = SimConfig {
            steps: n,
            ..base.clone()
        };
        let tr = simulate(&cfg, ops, &path)?;
        let rep = energy_report(&tr.log, tr.dt, DissipationQuadrature::ImplicitPoint);
        steps.push(n);
        dts.push(cfg.dt());
        max_residual.push(rep.max_abs);
    }
    let order = if max_residual.iter().all(|&r| r > 0.0) {
        Some(fit_eoc(&max_residual, &dts)?.slope)
    } else {
        None
    };
    Ok(EnergyStudy {
        level: ops.mesh().level(),
        steps,
        dts,
        max_residual,
        order,
        convention: DissipationQuadrature::ImplicitPoint,
    })
}

pub fn write_energy_csv<W: Write>(mut w: W, s: &EnergyStudy) -> std::io::Result<()> {
    writeln!(w, "# dissipation quadrature: {}", s.convention)?;
    let order = s.order.map_or("none".to_string(), |o| format!("{o:.6}"));
    writeln!(
        w,
        "level,steps,dt [time],max_abs_residual [velocity^2],fitted_order"
    )?;
    for i in 0..s.steps.len() {
        writeln!(
            w,
            "{},{},{:e},{:e},{}",
            s.level, s.steps[i], s.dts[i], s.max_residual[i], order
        )?;
    }
    Ok(())
}

/// `git describe --always --dirty`, or `unknown` outside a work tree.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn write_manifest<W: Write>(
    mut w: W,
    command: &str,
    config_hash: &str,
    noise: &NoiseModel,
    extra: &[(&str, String)],
) -> std::io::Result<()> {
    writeln!(w, "command = {command}")?;
    writeln!(w, "config_sha256 = {config_hash}")?;
    writeln!(w, "C_zeta = {:e}", noise.c_zeta)?;
    match noise.kappa_estimate {
        Some(k) => writeln!(w, "kappa_estimate = {k:e}")?,
        None => writeln!(w, "kappa_estimate = not computed")?,
    }
    writeln!(w, "modes = {}", noise.len())?;
    writeln!(w, "git = {}", git_describe())?;
    for (k, v) in extra {
        writeln!(w, "{k} = {v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eoc_examples() {
        let h = [1.0, 0.5, 0.25];
        let f = fit_eoc(&[1.0, 0.5, 0.25], &h).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-14);
        assert_eq!(f.pairwise.len(), 2);
        assert!((fit_eoc(&[1.0, 0.25, 0.0625], &h).unwrap().slope - 2.0).abs() < 1e-14);
        assert!(fit_eoc(&[3.0, 3.0, 3.0], &h).unwrap().slope.abs() < 1e-14);
        assert!(fit_eoc(&[1.0, 0.0, 1.0], &h).is_err());
        assert!(fit_eoc(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn delta_method_on_constant_samples() {
        let l = aggregate(1, 0.5, &[4.0, 4.0, 4.0], &[9.0, 9.0, 9.0]);
        assert_eq!(l.e_c, 2.0);
        assert_eq!(l.e_h1, 3.0);
        assert_eq!(l.combined, 5.0);
        assert_eq!(l.se_combined, 0.0);
    }

    #[test]
    fn zero_data_gives_zero_errors_and_no_slope() {
        let cfg = StudyConfig {
            levels: vec![1, 2],
            reference_level: 3,
            steps: 4,
            samples: 2,
            noise: NoiseModel::empty(),
            u0: InitialVelocity::Zero,
            ..StudyConfig::default()
        };
        let r = run_convergence_study(&cfg).unwrap();
        assert!(r.levels.iter().all(|l| l.combined == 0.0));
        assert!(r.slope.is_none());
    }

    #[test]
    fn self_comparison_is_exact() {
        let cfg = StudyConfig {
            levels: vec![2],
            reference_level: 2,
            steps: 4,
            samples: 1,
            ..StudyConfig::default()
        };
        let r = run_convergence_study(&cfg).unwrap();
        assert!(r.levels[0].combined < 1e-12);
    }

    #[test]
    fn study_rejects_bad_levels() {
        let cfg = StudyConfig {
            levels: vec![4],
            reference_level: 3,
            ..StudyConfig::default()
        };
        assert!(run_convergence_study(&cfg).is_err());
    }

    #[test]
    fn identities_hold_on_small_levels() {
        let checks = identity_suite(&[1, 2], 3, 7, &NoiseModel::default_family()).unwrap();
        assert_eq!(checks.len(), 14);
        for c in checks {
            assert!(
                c.max_relative < 1e-9,
                "{} at level {}: {}",
                c.name,
                c.level,
                c.max_relative
            );
        }
    }
}
