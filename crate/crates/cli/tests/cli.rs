use std::path::Path;
use std::process::Command;

use boxsqp_cli::{compare_methods, run_experiment, ConfigFile, ExperimentConfig, Overrides, ProblemKind};

fn synthetic(out: &Path) -> Overrides {
    Overrides {
        problem: Some(ProblemKind::Synthetic),
        seed: Some(3),
        size: Some(12),
        epsilon: Some(0.05),
        kappa: Some(0.2),
        output: Some(out.to_path_buf()),
        threads: Some(1),
        timings: Some(false),
        ..Default::default()
    }
}

#[test]
fn reproducible_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let cfg = ExperimentConfig::resolve(&synthetic(dir.path())).unwrap();
        assert!(run_experiment(&cfg).unwrap().converged());
    }
    for file in ["iterations.csv", "table.txt", "summary.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
    let csv = std::fs::read_to_string(a.path().join("iterations.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0.000")));
}

#[test]
fn affine_synthetic_problem_is_solved_in_the_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut o = synthetic(dir.path());
    o.epsilon = Some(0.0);
    let run = run_experiment(&ExperimentConfig::resolve(&o).unwrap()).unwrap();
    assert!(run.converged());
    assert_eq!(run.iterations(), 2);
    let d = run.iterates[1].sub(&run.final_control).unwrap().norm_inf();
    assert!(d < 1e-12, "{d}");
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(
        &path,
        "[problem]\nkind = \"synthetic\"\nsize = 5\nkappa = 0.7\n\n[solver]\nmethod = \"sqplin\"\nu0 = 0.25\n",
    )
    .unwrap();
    let o = Overrides {
        config: Some(path),
        size: Some(9),
        ..Default::default()
    };
    let cfg = ExperimentConfig::resolve(&o).unwrap();
    assert_eq!(cfg.size, 9);
    assert_eq!(cfg.kappa(), 0.7);
    assert_eq!(cfg.u0, boxsqp_cli::U0Spec::Constant(0.25));
    assert_eq!(cfg.method, boxsqp_cli::MethodChoice::Sqplin);
}

#[test]
fn bad_config_files_are_rejected() {
    let unknown = ConfigFile::parse("[problem]\nkind = \"synthetic\"\nsizee = 5\n").unwrap_err();
    assert!(format!("{unknown:#}").contains("sizee"));
    assert!(ConfigFile::parse("[problem]\nkind = \"tetris\"\n").is_err());
    let o = Overrides {
        alpha: Some(1.0),
        beta: Some(0.5),
        ..Default::default()
    };
    assert!(ExperimentConfig::from_parts(ConfigFile::default(), &o).is_err());
    let o = Overrides {
        kappa: Some(-1.0),
        ..Default::default()
    };
    assert!(ExperimentConfig::from_parts(ConfigFile::default(), &o).is_err());
}

#[test]
fn u0_file_length_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let u0 = dir.path().join("u0.txt");
    std::fs::write(&u0, "0.1 0.2 0.3\n").unwrap();
    let mut o = synthetic(dir.path());
    o.u0 = Some(boxsqp_cli::U0Spec::File(u0.clone()));
    let err = run_experiment(&ExperimentConfig::resolve(&o).unwrap()).unwrap_err();
    assert!(err.to_string().contains("3 values"));

    std::fs::write(&u0, (0..12).map(|i| format!("{}\n", 0.05 * i as f64)).collect::<String>()).unwrap();
    assert!(run_experiment(&ExperimentConfig::resolve(&o).unwrap()).unwrap().converged());
}

#[test]
fn methods_agree_on_a_coarse_elliptic_instance() {
    let dir = tempfile::tempdir().unwrap();
    let o = Overrides {
        problem: Some(ProblemKind::EllipticP1),
        dimension: Some(2),
        refinements: Some(3),
        output: Some(dir.path().to_path_buf()),
        timings: Some(false),
        ..Default::default()
    };
    let c = compare_methods(&ExperimentConfig::resolve(&o).unwrap()).unwrap();
    assert!(c.sqpnln.as_ref().unwrap().converged());
    assert!(c.sqplin.as_ref().unwrap().converged());
    assert!(c.relative_difference.unwrap() < 1e-10);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("compare.json")).unwrap()).unwrap();
    assert_eq!(summary["methods"]["sqpnln"]["converged"], true);
    assert!(dir.path().join("sqplin_iterations.csv").exists());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_boxsqp");
    let out = dir.path().to_str().unwrap();
    let ok = Command::new(bin)
        .args(["run", "--problem", "synthetic", "--size", "6", "--timings", "false", "--output", out])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("converged"));

    let capped = Command::new(bin)
        .args(["run", "--problem", "synthetic", "--epsilon", "0.3", "--max-outer-iters", "1", "--output", out])
        .output()
        .unwrap();
    assert_eq!(capped.status.code(), Some(2));

    let bad = Command::new(bin)
        .args(["run", "--problem", "synthetic", "--alpha", "2", "--beta", "1", "--output", out])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("alpha"));
}

#[test]
fn resolved_config_round_trips_through_toml() {
    for problem in [ProblemKind::EllipticP1, ProblemKind::ParabolicP3, ProblemKind::Synthetic] {
        let o = Overrides {
            problem: Some(problem),
            cg_max_iters: Some(77),
            kappa: Some(0.25),
            ..Default::default()
        };
        let cfg = ExperimentConfig::resolve(&o).unwrap();
        let text = toml::to_string(&cfg.to_file()).unwrap();
        let back = ExperimentConfig::from_parts(ConfigFile::parse(&text).unwrap(), &Overrides::default()).unwrap();
        assert_eq!(back, cfg, "{text}");
    }
}
