//! Experiment configuration: a TOML file with `[problem]`, `[solver]` and
//! `[output]` sections, overridden key by key from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use boxsqp::{Method, SqpConfig};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Semilinear elliptic equation with distributed control, `f = e^y`.
    #[value(name = "elliptic_p1")]
    EllipticP1,
    /// Semilinear parabolic equation with bilinear Robin boundary control.
    #[value(name = "parabolic_p3")]
    ParabolicP3,
    /// Dense random problem `Φ(u) = Hu + c + ε sin u`.
    Synthetic,
}

impl ProblemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProblemKind::EllipticP1 => "elliptic_p1",
            ProblemKind::ParabolicP3 => "parabolic_p3",
            ProblemKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Sqpnln,
    Sqplin,
}

impl From<MethodChoice> for Method {
    fn from(m: MethodChoice) -> Self {
        match m {
            MethodChoice::Sqpnln => Method::SqpNln,
            MethodChoice::Sqplin => Method::SqpLin,
        }
    }
}

/// Starting state/adjoint pair for the Lagrange–Newton method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PrimalStart {
    /// `y₀ = 0`, `φ₀ = 0`.
    Zero,
    /// State and adjoint of the starting control.
    Solved,
}

/// Starting control: a constant or a file with one value per control point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum U0Spec {
    Constant(f64),
    File(PathBuf),
}

impl std::str::FromStr for U0Spec {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().parse::<f64>() {
            Ok(x) => U0Spec::Constant(x),
            Err(_) => U0Spec::File(PathBuf::from(s)),
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: Option<ProblemKind>,
    pub dimension: Option<usize>,
    pub refinements: Option<u32>,
    pub kappa: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    /// Final time of the parabolic problem.
    pub horizon: Option<f64>,
    /// Synthetic problem: seed, size and nonlinearity weight.
    pub seed: Option<u64>,
    pub size: Option<usize>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub method: Option<MethodChoice>,
    pub u0: Option<U0Spec>,
    pub primal_start: Option<PrimalStart>,
    pub stop_tol: Option<f64>,
    pub max_outer_iters: Option<usize>,
    pub qp_tol: Option<f64>,
    pub qp_max_iters: Option<usize>,
    pub cg_tol: Option<f64>,
    pub cg_max_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Write measured wall times; off gives byte-reproducible files.
    pub timings: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config file {}", path.display()))
    }
}

/// Command-line overrides; each flag matches a config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub problem: Option<ProblemKind>,
    /// Spatial dimension (1, 2 or 3).
    #[arg(long)]
    pub dimension: Option<usize>,
    /// Mesh refinement N, mesh size 2^-N.
    #[arg(long)]
    pub refinements: Option<u32>,
    /// Tikhonov weight.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Lower control bound.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Upper control bound.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Final time (parabolic problem).
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Random seed (synthetic problem).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of control points (synthetic problem).
    #[arg(long)]
    pub size: Option<usize>,
    /// Weight of the nonlinear term (synthetic problem).
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Constant starting control or a file of values.
    #[arg(long)]
    pub u0: Option<U0Spec>,
    #[arg(long, value_enum)]
    pub primal_start: Option<PrimalStart>,
    /// Outer stopping tolerance.
    #[arg(long = "tol")]
    pub stop_tol: Option<f64>,
    #[arg(long)]
    pub max_outer_iters: Option<usize>,
    #[arg(long)]
    pub qp_tol: Option<f64>,
    #[arg(long)]
    pub qp_max_iters: Option<usize>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    #[arg(long)]
    pub cg_max_iters: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Worker threads for the parallel kernels.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Record wall times; `false` gives reproducible files.
    #[arg(long)]
    pub timings: Option<bool>,
}

/// Fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub dimension: usize,
    pub refinements: u32,
    pub alpha: f64,
    pub beta: f64,
    pub horizon: f64,
    pub seed: u64,
    pub size: usize,
    pub epsilon: f64,
    pub method: MethodChoice,
    pub u0: U0Spec,
    pub primal_start: PrimalStart,
    pub sqp: SqpConfig,
    pub output: PathBuf,
    pub threads: usize,
    pub timings: bool,
}

struct Defaults {
    dimension: usize,
    refinements: u32,
    kappa: f64,
    alpha: f64,
    beta: f64,
}

fn defaults(kind: ProblemKind) -> Defaults {
    match kind {
        ProblemKind::EllipticP1 => Defaults {
            dimension: 3,
            refinements: 3,
            kappa: 0.1,
            alpha: 0.1,
            beta: 1.0,
        },
        ProblemKind::ParabolicP3 => Defaults {
            dimension: 3,
            refinements: 3,
            kappa: 0.3,
            alpha: 0.1,
            beta: 100.0,
        },
        ProblemKind::Synthetic => Defaults {
            dimension: 0,
            refinements: 0,
            kappa: 0.5,
            alpha: -1.0,
            beta: 1.0,
        },
    }
}

impl ExperimentConfig {
    /// Merges file and flags (flags win) and fills per-problem defaults.
    pub fn resolve(overrides: &Overrides) -> Result<Self> {
        let file = match &overrides.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        Self::from_parts(file, overrides)
    }

    pub fn from_parts(file: ConfigFile, o: &Overrides) -> Result<Self> {
        let (p, s, out) = (file.problem, file.solver, file.output);
        let problem = o.problem.or(p.kind).unwrap_or(ProblemKind::EllipticP1);
        let d = defaults(problem);
        let alpha = o.alpha.or(p.alpha).unwrap_or(d.alpha);
        let beta = o.beta.or(p.beta).unwrap_or(d.beta);
        let kappa = o.kappa.or(p.kappa).unwrap_or(d.kappa);
        let method = o.method.or(s.method).unwrap_or(MethodChoice::Sqpnln);
        let mut sqp = SqpConfig::new(kappa);
        sqp.method = method.into();
        if let Some(x) = o.stop_tol.or(s.stop_tol) {
            sqp.stop_tol = x;
        }
        if let Some(x) = o.max_outer_iters.or(s.max_outer_iters) {
            sqp.max_outer_iters = x;
        }
        if let Some(x) = o.qp_tol.or(s.qp_tol) {
            sqp.qp_tol = x;
        }
        if let Some(x) = o.qp_max_iters.or(s.qp_max_iters) {
            sqp.qp_max_iters = x;
        }
        if let Some(x) = o.cg_tol.or(s.cg_tol) {
            sqp.cg_tol = x;
        }
        if let Some(x) = o.cg_max_iters.or(s.cg_max_iters) {
            sqp.cg_max_iters = Some(x);
        }
        sqp.validate()?;
        let default_u0 = if problem == ProblemKind::Synthetic { 0.0 } else { 0.5 * (alpha + beta) };
        let cfg = Self {
            problem,
            dimension: o.dimension.or(p.dimension).unwrap_or(d.dimension),
            refinements: o.refinements.or(p.refinements).unwrap_or(d.refinements),
            alpha,
            beta,
            horizon: o.horizon.or(p.horizon).unwrap_or(4.0),
            seed: o.seed.or(p.seed).unwrap_or(0),
            size: o.size.or(p.size).unwrap_or(8),
            epsilon: o.epsilon.or(p.epsilon).unwrap_or(0.0),
            method,
            u0: o.u0.clone().or(s.u0).unwrap_or(U0Spec::Constant(default_u0)),
            primal_start: o.primal_start.or(s.primal_start).unwrap_or(PrimalStart::Zero),
            sqp,
            output: o.output.clone().or(out.directory).unwrap_or_else(|| PathBuf::from("results")),
            threads: o.threads.or(out.threads).unwrap_or(1),
            timings: o.timings.or(out.timings).unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha < self.beta) {
            bail!("alpha must be below beta (alpha = {}, beta = {})", self.alpha, self.beta);
        }
        match self.problem {
            ProblemKind::EllipticP1 | ProblemKind::ParabolicP3 if !(1..=3).contains(&self.dimension) => {
                bail!("dimension must be 1, 2 or 3, got {}", self.dimension)
            }
            ProblemKind::ParabolicP3 if !(self.alpha.is_finite() && self.beta.is_finite()) => {
                bail!("the parabolic problem needs finite bounds")
            }
            ProblemKind::ParabolicP3 if self.alpha < 0.0 => {
                bail!("the parabolic problem needs alpha >= 0, got {}", self.alpha)
            }
            ProblemKind::Synthetic if self.size == 0 => bail!("size must be positive"),
            _ => Ok(()),
        }
    }

    pub fn kappa(&self) -> f64 {
        self.sqp.kappa
    }

    /// Config file that resolves back to `self`.
    pub fn to_file(&self) -> ConfigFile {
        let synthetic = self.problem == ProblemKind::Synthetic;
        let horizon = self.problem == ProblemKind::ParabolicP3;
        ConfigFile {
            problem: ProblemSection {
                kind: Some(self.problem),
                dimension: (!synthetic).then_some(self.dimension),
                refinements: (!synthetic).then_some(self.refinements),
                kappa: Some(self.sqp.kappa),
                alpha: Some(self.alpha),
                beta: Some(self.beta),
                horizon: horizon.then_some(self.horizon),
                seed: synthetic.then_some(self.seed),
                size: synthetic.then_some(self.size),
                epsilon: synthetic.then_some(self.epsilon),
            },
            solver: SolverSection {
                method: Some(self.method),
                u0: Some(self.u0.clone()),
                primal_start: Some(self.primal_start),
                stop_tol: Some(self.sqp.stop_tol),
                max_outer_iters: Some(self.sqp.max_outer_iters),
                qp_tol: Some(self.sqp.qp_tol),
                qp_max_iters: Some(self.sqp.qp_max_iters),
                cg_tol: Some(self.sqp.cg_tol),
                cg_max_iters: self.sqp.cg_max_iters,
            },
            output: OutputSection {
                directory: Some(self.output.clone()),
                threads: Some(self.threads),
                timings: Some(self.timings),
            },
        }
    }
}
