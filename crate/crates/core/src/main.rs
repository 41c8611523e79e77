use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use sns_mini::config::Config;
use sns_mini::error::{Error, Result};
use sns_mini::experiments::{
    energy_refinement_study, identity_suite, run_convergence_study, write_energy_csv,
    write_manifest, write_report_csv, write_samples_csv,
};
use sns_mini::integrator::{
    energy_report, simulate, write_coefficients, write_norms_csv, DissipationQuadrature, Flags,
    SimConfig,
};
use sns_mini::mesh::MeshHierarchy;
use sns_mini::noise::BrownianDriver;
use sns_mini::operator_lab::{write_norm_csv, OperatorLab};
use sns_mini::operators::OperatorSet;

/// Identity checks pass below this relative defect.
const IDENTITY_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "sns-mini",
    version,
    about = "MINI-element stochastic Navier-Stokes experiments"
)]
struct Cli {
    /// Flat key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sample-parallel work
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print statistics of the mesh hierarchy
    MeshInfo,
    /// Run the algebraic identity suite on levels 1 to 4
    Check,
    /// Simulate one trajectory and write its norms
    Simulate,
    /// Monte Carlo spatial convergence study
    Study,
    /// Operator norm, inf-sup and inverse inequality measurements
    OperatorLab,
    /// Time-step refinement of the pathwise energy residual
    Energy,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn manifest(
    out: &Path,
    command: &str,
    cfg: &Config,
    noise: &sns_mini::noise::NoiseModel,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut w = create(out, "manifest.txt")?;
    write_manifest(&mut w, command, &cfg.hash(), noise, extra)?;
    w.flush()?;
    Ok(())
}

fn mesh_info(cfg: &Config) -> Result<()> {
    let finest = cfg.reference_level.max(cfg.level);
    let h = MeshHierarchy::unit_square(finest);
    println!("level,vertices,triangles,edges,h,shape_regularity,velocity_dofs,pressure_dofs");
    for l in 0..=finest {
        let m = h.mesh(l);
        let nv = 2 * (m.n_interior_vertices() + m.n_triangles());
        println!(
            "{},{},{},{},{:e},{:.4},{},{}",
            l,
            m.n_vertices(),
            m.n_triangles(),
            m.n_edges(),
            m.h(),
            m.shape_regularity(),
            nv,
            m.n_vertices()
        );
    }
    Ok(())
}

fn check(cfg: &Config, out: &Path) -> Result<bool> {
    let noise = cfg.noise_model()?;
    let checks = identity_suite(&[1, 2, 3, 4], 20, cfg.seed, &noise)?;
    fs::create_dir_all(out)?;
    let mut w = create(out, "check.csv")?;
    writeln!(w, "identity,level,max_relative_defect [1],pass")?;
    let mut ok = true;
    for c in &checks {
        let pass = c.max_relative < IDENTITY_TOLERANCE;
        ok &= pass;
        writeln!(w, "{},{},{:e},{}", c.name, c.level, c.max_relative, pass)?;
        println!(
            "{:<26} level {}  {:.3e}  {}",
            c.name,
            c.level,
            c.max_relative,
            if pass { "ok" } else { "FAIL" }
        );
    }
    w.flush()?;
    manifest(out, "check", cfg, &noise, &[])?;
    Ok(ok)
}

fn run_simulate(cfg: &Config, out: &Path) -> Result<()> {
    let noise = cfg.noise_with_kappa()?;
    let sim = cfg.sim_config()?;
    let h = MeshHierarchy::unit_square(sim.level);
    let ops = OperatorSet::assemble(Arc::new(h.mesh(sim.level).clone()), &noise)?;
    let path =
        BrownianDriver::sample_path(sim.seed, sim.sample_index, sim.steps, sim.dt(), noise.len())?;
    let tr = simulate(&sim, &ops, &path)?;
    let rep = energy_report(&tr.log, tr.dt, DissipationQuadrature::ImplicitPoint);
    fs::create_dir_all(out.join("snapshots"))?;
    let mut w = create(out, "norms.csv")?;
    write_norms_csv(&mut w, &tr.log, &rep)?;
    w.flush()?;
    for (step, u) in &tr.snapshots {
        let mut w = create(&out.join("snapshots"), &format!("step_{step:06}.txt"))?;
        write_coefficients(&mut w, u)?;
        w.flush()?;
    }
    manifest(
        out,
        "simulate",
        cfg,
        &noise,
        &[("max_abs_energy_residual", format!("{:e}", rep.max_abs))],
    )?;
    println!(
        "simulated {} steps on level {}, max |energy residual| = {:.3e}",
        sim.steps, sim.level, rep.max_abs
    );
    Ok(())
}

fn run_study(cfg: &Config, out: &Path) -> Result<()> {
    let noise = cfg.noise_with_kappa()?;
    let study = cfg.study_config(noise.clone())?;
    let r = run_convergence_study(&study)?;
    fs::create_dir_all(out)?;
    let mut w = create(out, "study.csv")?;
    write_report_csv(&mut w, &r)?;
    w.flush()?;
    let mut w = create(out, "samples.csv")?;
    write_samples_csv(&mut w, &r)?;
    w.flush()?;
    for msg in &r.warnings {
        log::warn!("{msg}");
    }
    let slope = r.slope.map_or("none".into(), |s| format!("{s:.4}"));
    manifest(
        out,
        "study",
        cfg,
        &noise,
        &[
            ("fitted_slope", slope.clone()),
            ("aborted_samples", r.aborted.len().to_string()),
            (
                "reference",
                "finest level stands in for the exact solution".into(),
            ),
        ],
    )?;
    for l in &r.levels {
        println!(
            "level {}  E_C {:.4e}  E_H1 {:.4e}  combined {:.4e} +- {:.1e}",
            l.level, l.e_c, l.e_h1, l.combined, l.se_combined
        );
    }
    println!("fitted slope {slope}");
    Ok(())
}

fn operator_lab(cfg: &Config, out: &Path) -> Result<()> {
    let lab = OperatorLab::new(7);
    let mut rows = Vec::new();
    for beta in [0.5, 1.0] {
        rows.push(lab.smoothing_defect_study(0.25, beta, &[1, 2, 3], 2)?);
        for gap in [2, 3] {
            rows.push(lab.smoothing_defect_study(0.25, beta, &[0, 1, 2], gap)?);
        }
    }
    rows.push(lab.projection_rate_study(&[1, 2, 3, 4], 2)?);
    rows.extend(lab.stokes_approximation_study(&[2, 3, 4, 5], 2)?);
    rows.push(lab.inverse_inequality_study(0.0, 1.0, &[1, 2, 3, 4, 5])?);
    fs::create_dir_all(out)?;
    let mut w = create(out, "operator_norms.csv")?;
    write_norm_csv(&mut w, &rows)?;
    w.flush()?;
    let infsup = lab.inf_sup_study(&[1, 2, 3, 4, 5])?;
    let mut w = create(out, "inf_sup.csv")?;
    writeln!(w, "level,beta_h [1],near_zero_modes,smallest_eigenvalue")?;
    for s in &infsup {
        writeln!(
            w,
            "{},{:e},{},{:e}",
            s.level, s.beta, s.near_zero_count, s.smallest_eigenvalue
        )?;
    }
    w.flush()?;
    for r in &rows {
        println!(
            "{:<28} alpha {:<5} beta {:<4} gamma {:<4} gap {}  slope {}",
            r.operator,
            r.alpha.map_or("-".into(), |a| a.to_string()),
            r.beta,
            r.gamma,
            r.gap,
            r.slope.map_or("-".into(), |s| format!("{s:.3}"))
        );
    }
    for s in &infsup {
        println!("inf-sup level {}  beta_h {:.4}", s.level, s.beta);
    }
    manifest(out, "operator-lab", cfg, &cfg.noise_model()?, &[])?;
    Ok(())
}

fn energy(cfg: &Config, out: &Path) -> Result<()> {
    let noise = cfg.noise_with_kappa()?;
    let h = MeshHierarchy::unit_square(cfg.energy_level);
    let ops = OperatorSet::assemble(Arc::new(h.mesh(cfg.energy_level).clone()), &noise)?;
    let base = SimConfig {
        level: cfg.energy_level,
        ..cfg.sim_config()?
    };
    let s = energy_refinement_study(&base, &ops, cfg.energy_steps, cfg.energy_refinements)?;

    // with noise and convection off the discrete identity is exact
    let lin = SimConfig {
        flags: Flags::linear_deterministic(),
        steps: cfg.energy_steps,
        ..base.clone()
    };
    let zero = BrownianDriver::zero(lin.steps, lin.dt(), ops.n_modes());
    let tr = simulate(&lin, &ops, &zero)?;
    let exact = energy_report(&tr.log, tr.dt, DissipationQuadrature::ImplicitPoint);
    let e0 = tr.log[0].l2_sq.max(f64::MIN_POSITIVE);
    let defect = exact
        .step_defects
        .iter()
        .fold(0.0f64, |a, d| a.max(d.abs()))
        / e0;

    fs::create_dir_all(out)?;
    let mut w = create(out, "energy.csv")?;
    write_energy_csv(&mut w, &s)?;
    w.flush()?;
    let order = s.order.map_or("none".into(), |o| format!("{o:.4}"));
    manifest(
        out,
        "energy",
        cfg,
        &noise,
        &[
            ("fitted_order", order.clone()),
            (
                "linear_deterministic_step_defect_relative",
                format!("{defect:e}"),
            ),
        ],
    )?;
    for i in 0..s.steps.len() {
        println!(
            "steps {:>5}  max |r_m| {:.4e}",
            s.steps[i], s.max_residual[i]
        );
    }
    println!("fitted order {order}");
    println!("linear deterministic step defect (relative to |u0|^2) {defect:.3e}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let out = cli.out.as_path();
    match cli.command {
        Command::MeshInfo => mesh_info(&cfg)?,
        Command::Check => return check(&cfg, out),
        Command::Simulate => run_simulate(&cfg, out)?,
        Command::Study => run_study(&cfg, out)?,
        Command::OperatorLab => operator_lab(&cfg, out)?,
        Command::Energy => energy(&cfg, out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: identity check failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
