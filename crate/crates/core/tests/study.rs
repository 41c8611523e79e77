use sns_mini::experiments::{run_convergence_study, run_single_sample, StudyConfig};
use sns_mini::integrator::{Flags, InitialVelocity};
use sns_mini::noise::{default_specs, NoiseModel};

fn small(samples: usize, flags: Flags) -> StudyConfig {
    StudyConfig {
        levels: vec![1, 2],
        reference_level: 3,
        steps: 8,
        samples,
        base_seed: 3,
        noise: NoiseModel::build(default_specs()).unwrap(),
        u0: InitialVelocity::default(),
        flags,
        ..StudyConfig::default()
    }
}

#[test]
fn isolated_sample_reruns_are_exact() {
    let cfg = small(
        3,
        Flags {
            nonlinearity: false,
            ..Flags::default()
        },
    );
    let r = run_convergence_study(&cfg).unwrap();
    for s in &r.per_sample {
        assert_eq!(&run_single_sample(&cfg, s.index).unwrap(), s);
    }
}

#[test]
fn errors_decrease_with_level() {
    let r = run_convergence_study(&small(4, Flags::default())).unwrap();
    assert!(r.is_strictly_decreasing(), "{:?}", r.combined());
    assert!(r.aborted.is_empty());
    assert!(r.slope.unwrap() > 0.4);
    for l in &r.levels {
        assert!(l.e_c > 0.0 && l.e_h1 > 0.0 && l.se_combined >= 0.0);
    }
}

#[test]
fn doubling_samples_is_within_two_standard_errors() {
    let a = run_convergence_study(&small(8, Flags::default())).unwrap();
    let b = run_convergence_study(&small(16, Flags::default())).unwrap();
    for (x, y) in a.levels.iter().zip(&b.levels) {
        let se = x.se_c.max(y.se_c);
        assert!(
            (x.e_c - y.e_c).abs() < 2.0 * se + 1e-14,
            "{} vs {} (se {se})",
            x.e_c,
            y.e_c
        );
    }
}

#[test]
fn stride_warning_is_reported() {
    let cfg = StudyConfig {
        snapshot_stride: 4,
        ..small(1, Flags::default())
    };
    let r = run_convergence_study(&cfg).unwrap();
    assert!(r.warnings.iter().any(|w| w.contains("stride")));
}
