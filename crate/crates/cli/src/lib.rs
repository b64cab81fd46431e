//! Experiment runner: builds an instance from an [`ExperimentConfig`], runs
//! the SQP methods and writes a convergence table, a CSV of iteration records
//! and a JSON summary.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod report;

use std::path::Path;

use anyhow::{bail, Context, Result};
use boxsqp::elliptic::{EllipticData, EllipticMesh, EllipticProblem};
use boxsqp::parabolic::{ParabolicData, ParabolicProblem, SpaceTimeGrid};
use boxsqp::sqp::{run_sqplin, run_sqpnln, SqpRun};
use boxsqp::verification::{make_synthetic, Spectrum, SyntheticProblem};
use boxsqp::{exec, BoxBounds, GridFunction, LagrangeNewtonOracle, Method, SqpConfig};
use serde_json::json;

pub use config::{ConfigFile, ExperimentConfig, MethodChoice, Overrides, PrimalStart, ProblemKind, U0Spec};

/// Spectrum of the synthetic operator `H`.
const SYNTHETIC_SPECTRUM: (f64, f64) = (0.1, 2.0);

#[derive(Debug, Clone)]
pub enum Instance {
    Elliptic(EllipticProblem),
    Parabolic(ParabolicProblem),
    Synthetic(SyntheticProblem),
}

macro_rules! with_oracle {
    ($inst:expr, $p:ident => $body:expr) => {
        match $inst {
            Instance::Elliptic($p) => $body,
            Instance::Parabolic($p) => $body,
            Instance::Synthetic($p) => $body,
        }
    };
}

pub fn build_instance(cfg: &ExperimentConfig) -> Result<Instance> {
    Ok(match cfg.problem {
        ProblemKind::EllipticP1 => {
            let mesh = EllipticMesh::unit_cube(cfg.dimension, cfg.refinements)?;
            let data = EllipticData::exponential_tracking(boxsqp::elliptic::bubble(cfg.dimension));
            Instance::Elliptic(EllipticProblem::new(mesh, data, BoxBounds::l2(cfg.alpha, cfg.beta)?)?)
        }
        ProblemKind::ParabolicP3 => {
            let grid = SpaceTimeGrid::unit_cube(cfg.dimension, cfg.refinements, cfg.horizon)?;
            let p = 2.0 * (cfg.dimension as f64 + 1.0);
            let bounds = BoxBounds::new(cfg.alpha, cfg.beta, p)?;
            Instance::Parabolic(ParabolicProblem::new(
                grid,
                ParabolicData::cubic_benchmark(cfg.dimension),
                bounds,
            )?)
        }
        ProblemKind::Synthetic => {
            let (lo, hi) = SYNTHETIC_SPECTRUM;
            let s = make_synthetic(cfg.seed, cfg.size, Spectrum::new(lo, hi), cfg.epsilon)?;
            Instance::Synthetic(s.with_bounds(BoxBounds::l2(cfg.alpha, cfg.beta)?))
        }
    })
}

impl Instance {
    pub fn control_points(&self) -> usize {
        with_oracle!(self, p => boxsqp::ProblemOracle::control_space(p).point_count())
    }

    fn initial_control(&self, spec: &U0Spec) -> Result<GridFunction> {
        let space = with_oracle!(self, p => boxsqp::ProblemOracle::control_space(p).clone());
        match spec {
            U0Spec::Constant(c) => Ok(GridFunction::constant(&space, *c)),
            U0Spec::File(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading u0 from {}", path.display()))?;
                let values = text
                    .split_whitespace()
                    .enumerate()
                    .map(|(i, t)| t.parse::<f64>().with_context(|| format!("u0 entry {}: '{t}'", i + 1)))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != space.point_count() {
                    bail!("u0 file has {} values, the control has {} points", values.len(), space.point_count());
                }
                Ok(GridFunction::new(space, values)?)
            }
        }
    }

    /// Runs `method` on this instance.
    pub fn solve(&mut self, cfg: &ExperimentConfig, method: Method) -> Result<SqpRun> {
        let u0 = self.initial_control(&cfg.u0)?;
        let mut sqp: SqpConfig = cfg.sqp.clone();
        sqp.method = method;
        with_oracle!(self, p => solve_with(p, &u0, &sqp, cfg.primal_start))
    }
}

fn solve_with<O: LagrangeNewtonOracle>(
    oracle: &mut O,
    u0: &GridFunction,
    cfg: &SqpConfig,
    start: PrimalStart,
) -> Result<SqpRun> {
    Ok(match cfg.method {
        Method::SqpNln => run_sqpnln(oracle, u0, cfg)?,
        Method::SqpLin => {
            let primal = match start {
                PrimalStart::Zero => oracle.zero_primal(),
                PrimalStart::Solved => oracle.solved_primal(u0)?,
            };
            run_sqplin(oracle, u0, primal, cfg)?
        }
    })
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    exec::configure_threads(cfg.threads);
    std::fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    Ok(())
}

fn write_run(dir: &Path, stem: &str, run: &SqpRun, cfg: &ExperimentConfig, method: Method) -> Result<()> {
    std::fs::write(dir.join(format!("{stem}table.txt")), report::table(&run.records))?;
    report::write_csv(&dir.join(format!("{stem}iterations.csv")), &run.records, cfg.timings)?;
    let mut summary = report::run_summary(run, cfg.timings);
    summary["problem"] = json!(cfg.problem.as_str());
    summary["method"] = json!(method.to_string());
    report::write_json(&dir.join(format!("{stem}summary.json")), &summary)
}

/// Runs the configured method and writes `table.txt`, `iterations.csv` and
/// `summary.json` into the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<SqpRun> {
    prepare(cfg)?;
    let mut inst = build_instance(cfg)?;
    let method: Method = cfg.method.into();
    let run = inst.solve(cfg, method)?;
    write_run(&cfg.output, "", &run, cfg, method)?;
    Ok(run)
}

#[derive(Debug)]
pub struct Comparison {
    pub sqpnln: Result<SqpRun>,
    pub sqplin: Result<SqpRun>,
    /// `‖u_nln − u_lin‖_∞ / ‖u_nln‖_∞` when both runs converged.
    pub relative_difference: Option<f64>,
}

/// Runs both methods concurrently on separate copies of the instance and
/// writes per-method files plus `compare.json`. A failing run is reported,
/// not fatal.
pub fn compare_methods(cfg: &ExperimentConfig) -> Result<Comparison> {
    prepare(cfg)?;
    let inst = build_instance(cfg)?;
    let (mut a, mut b) = (inst.clone(), inst);
    let (sqpnln, sqplin) = std::thread::scope(|s| {
        let h = s.spawn(|| a.solve(cfg, Method::SqpNln));
        let lin = b.solve(cfg, Method::SqpLin);
        (h.join().expect("solver thread panicked"), lin)
    });
    let relative_difference = match (&sqpnln, &sqplin) {
        (Ok(x), Ok(y)) if x.converged() && y.converged() => {
            let d = x.final_control.sub(&y.final_control)?.norm_inf();
            Some(d / x.final_control.norm_inf().max(f64::MIN_POSITIVE))
        }
        _ => None,
    };
    let mut entries = serde_json::Map::new();
    for (method, run) in [(Method::SqpNln, &sqpnln), (Method::SqpLin, &sqplin)] {
        let entry = match run {
            Ok(r) => {
                write_run(&cfg.output, &format!("{method}_"), r, cfg, method)?;
                let mut v = report::run_summary(r, cfg.timings);
                v["converged"] = json!(r.converged());
                v
            }
            Err(e) => json!({ "converged": false, "error": e.to_string() }),
        };
        entries.insert(method.to_string(), entry);
    }
    let summary = json!({
        "problem": cfg.problem.as_str(),
        "methods": entries,
        "relative_linf_difference": relative_difference,
    });
    report::write_json(&cfg.output.join("compare.json"), &summary)?;
    Ok(Comparison {
        sqpnln,
        sqplin,
        relative_difference,
    })
}
