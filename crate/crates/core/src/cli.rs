//! Configuration-driven command line.
//!
//! A run is described by a JSON config with `"schema_version": 1`; unknown
//! keys are rejected. Outputs:
//!
//! * `solve`: `solution.txt` (grid-function table) and `solve_report.json`;
//! * `check`: one `report_<def>.json` per requested definition;
//! * `experiment`: `report.json` and `report.csv`.
//!
//! Exit codes: 0 pass, 1 check or threshold failure, 2 config error,
//! 3 input-data error.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::classes::{check_p_global, check_p_local, check_w, direction_sample, ClassParams, Definition, LocalSamples, WMode};
use crate::contact::{contact_set, lattice_vertices, ADMISSIBLE_RADIUS};
use crate::error::{Error, Result};
use crate::experiments::{
    derive_seed, restrict_to_unit_box, run_experiment, DataKind, ExperimentSpec, NonlocalInstance,
};
use crate::lattice::{GridFunction, Lattice};
use crate::operators::{
    ball_interior, solve_dirichlet, solve_homogenized, KernelModulation, NonlocalKernel, PeriodicDegenerateCoeffs,
    SolveReport, SolverOptions, EXTERIOR_RADIUS,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "harnack-lab", version, about = "Numerical laboratory for two-scale Harnack estimates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Record wall-clock runtimes (outputs are then no longer byte-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a Dirichlet problem.
    Solve(CommonArgs),
    /// Run class-membership checks on a solution file.
    Check {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Run an experiment.
    Experiment(CommonArgs),
    /// Validate a config without computing anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_dim() -> usize {
    2
}

fn default_lmin() -> f64 {
    1.0
}

fn default_lmax() -> f64 {
    10.0
}

fn default_nl_lmax() -> f64 {
    2.0
}

fn default_aniso() -> f64 {
    0.2
}

fn default_per_period() -> usize {
    4
}

/// Operator family and its lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    /// `sum_i lambda_i(x) u_ii` on `[-1, 1]^n`; random coefficients unless `constant` is set.
    Discrete {
        #[serde(default = "default_dim")]
        dim: usize,
        spacing: f64,
        #[serde(default = "default_lmin")]
        lambda_min: f64,
        #[serde(default = "default_lmax")]
        lambda_max: f64,
        #[serde(default)]
        constant: Option<f64>,
    },
    Homogenized {
        #[serde(default = "default_dim")]
        dim: usize,
        coefficients: PeriodicDegenerateCoeffs,
        #[serde(default = "default_per_period")]
        nodes_per_period: usize,
    },
    /// Lattice on `[-2, 2]^n`; the modulation is random (seeded) unless given.
    Nonlocal {
        #[serde(default = "default_dim")]
        dim: usize,
        spacing: f64,
        sigma: f64,
        #[serde(default = "default_lmin")]
        lambda_min: f64,
        #[serde(default = "default_nl_lmax")]
        lambda_max: f64,
        #[serde(default = "default_aniso")]
        anisotropy: f64,
        #[serde(default)]
        modulation: Option<KernelModulation>,
    },
}

impl OperatorSpec {
    pub fn lattice(&self) -> Result<Lattice> {
        match self {
            OperatorSpec::Discrete { dim, spacing, .. } => Lattice::centered(*dim, *spacing, 1.0),
            OperatorSpec::Homogenized {
                dim,
                coefficients,
                nodes_per_period,
            } => {
                if *nodes_per_period == 0 {
                    return Err(Error::Config("nodes_per_period must be positive".into()));
                }
                Lattice::centered(*dim, coefficients.epsilon / *nodes_per_period as f64, 1.0)
            }
            OperatorSpec::Nonlocal { dim, spacing, .. } => Lattice::centered(*dim, *spacing, EXTERIOR_RADIUS),
        }
    }

    fn kernel(&self, seed: u64) -> Option<NonlocalKernel> {
        match self {
            OperatorSpec::Nonlocal {
                sigma,
                lambda_min,
                lambda_max,
                anisotropy,
                modulation,
                ..
            } => Some(NonlocalKernel {
                sigma: *sigma,
                lambda_min: *lambda_min,
                lambda_max: *lambda_max,
                anisotropy: *anisotropy,
                modulation: modulation.clone().unwrap_or(KernelModulation::Random {
                    seed: derive_seed(seed, 20),
                }),
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OperatorSpec::Discrete {
                spacing,
                lambda_min,
                lambda_max,
                constant,
                ..
            } => {
                if !(*spacing > 0.0) {
                    return Err(Error::InvalidParameter(format!("spacing must be positive, got {spacing}")));
                }
                if !(*lambda_min > 0.0 && lambda_min <= lambda_max) {
                    return Err(Error::InvalidParameter(format!(
                        "need 0 < lambda_min <= lambda_max, got [{lambda_min}, {lambda_max}]"
                    )));
                }
                if let Some(c) = constant {
                    if !(*c > 0.0) {
                        return Err(Error::InvalidParameter(format!("constant coefficient must be positive, got {c}")));
                    }
                }
                Ok(())
            }
            OperatorSpec::Homogenized { coefficients, .. } => coefficients.validate(),
            OperatorSpec::Nonlocal { spacing, .. } => {
                if !(*spacing > 0.0) {
                    return Err(Error::InvalidParameter(format!("spacing must be positive, got {spacing}")));
                }
                self.kernel(0).map_or(Ok(()), |k| k.validate())
            }
        }
    }
}

/// Which class definitions to check and with what parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassesConfig {
    pub definitions: Vec<String>,
    pub params: ClassParams,
    /// Paraboloid opening for the contact-point forms; defaults to `a_hi`.
    #[serde(default)]
    pub opening: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandName {
    Solve,
    Check,
    Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub command: CommandName,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub operator: Option<OperatorSpec>,
    #[serde(default)]
    pub boundary: Option<DataKind>,
    #[serde(default)]
    pub rhs: Option<DataKind>,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
    #[serde(default)]
    pub classes: Option<ClassesConfig>,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}; expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if let Some(op) = &self.operator {
            op.validate()?;
        }
        if let Some(s) = &self.solver {
            if !(s.tol > 0.0) || s.max_iterations == 0 {
                return Err(Error::InvalidParameter("solver needs tol > 0 and max_iterations >= 1".into()));
            }
            if let Some(w) = s.omega {
                if !(w > 0.0 && w < 2.0) {
                    return Err(Error::InvalidParameter(format!("omega must lie in (0, 2), got {w}")));
                }
            }
        }
        match self.command {
            CommandName::Solve => {
                if self.operator.is_none() {
                    return Err(Error::Config("solve needs an operator".into()));
                }
            }
            CommandName::Check => {
                if self.operator.is_none() {
                    return Err(Error::Config("check needs an operator (for the grid)".into()));
                }
                let classes = self
                    .classes
                    .as_ref()
                    .ok_or_else(|| Error::Config("check needs a classes section".into()))?;
                if classes.definitions.is_empty() {
                    return Err(Error::Config("classes.definitions is empty".into()));
                }
                for d in &classes.definitions {
                    Definition::parse(d)?;
                }
                classes.params.validate()?;
            }
            CommandName::Experiment => {
                if self.experiment.is_none() {
                    return Err(Error::Config("experiment needs an experiment section".into()));
                }
            }
        }
        Ok(())
    }
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Json(_) | Error::InvalidLattice(_) => 2,
        Error::GridMismatch(_) | Error::Parse { .. } | Error::NegativeValue { .. } | Error::NonFinite { .. } | Error::Io(_) => 3,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_args(args: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Validate { config } => {
            RunConfig::load(&config)?;
            println!("ok");
            Ok(0)
        }
        Command::Solve(common) => with_jobs(&common, |cfg, out| cmd_solve(cfg, out, common.timings)),
        Command::Check { common, solution } => with_jobs(&common, |cfg, out| cmd_check(cfg, &solution, out)),
        Command::Experiment(common) => with_jobs(&common, |cfg, out| cmd_experiment(cfg, out, common.timings)),
    }
}

fn with_jobs<F>(common: &CommonArgs, f: F) -> Result<i32>
where
    F: FnOnce(&RunConfig, &Path) -> Result<i32> + Send,
{
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = Some(s);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&out)?;
    match common.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| f(&cfg, &out))
        }
        None => f(&cfg, &out),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Solves the configured problem, returning the solution on the operator's lattice.
pub fn solve_config(cfg: &RunConfig) -> Result<(GridFunction, SolveReport)> {
    let op = cfg
        .operator
        .as_ref()
        .ok_or_else(|| Error::Config("missing operator".into()))?;
    let seed = cfg.seed.unwrap_or(0);
    let opts = cfg.solver.clone().unwrap_or_default();
    let lat = op.lattice()?;
    let zero = || GridFunction::constant(&lat, 0.0);
    let rhs = match &cfg.rhs {
        Some(k) => k.sample(&lat, derive_seed(seed, 11))?,
        None => zero()?,
    };
    match op {
        OperatorSpec::Discrete {
            lambda_min,
            lambda_max,
            constant,
            ..
        } => {
            let g = cfg.boundary.clone().unwrap_or_else(DataKind::spike).sample(&lat, seed)?;
            let dop = match constant {
                Some(c) => crate::operators::DiscreteEllipticOp::constant(&lat, *c)?,
                None => crate::operators::DiscreteEllipticOp::random(&lat, *lambda_min, *lambda_max, derive_seed(seed, 10))?,
            };
            solve_dirichlet(&dop, &ball_interior(&lat, 1.0), &g, &rhs, &opts)
        }
        OperatorSpec::Homogenized { coefficients, .. } => {
            let g = cfg.boundary.clone().unwrap_or_else(DataKind::spike).sample(&lat, seed)?;
            solve_homogenized(coefficients, &lat, &ball_interior(&lat, 1.0), &g, &rhs, &opts)
        }
        OperatorSpec::Nonlocal { dim, spacing, .. } => {
            let mut inst = NonlocalInstance::new(1.5, *spacing, seed);
            inst.dim = *dim;
            inst.kernel = op.kernel(seed).expect("nonlocal operator has a kernel");
            if let Some(b) = &cfg.boundary {
                inst.exterior = b.clone();
            }
            inst.rhs = cfg.rhs.clone();
            inst.solve(&opts)
        }
    }
}

fn cmd_solve(cfg: &RunConfig, out: &Path, timings: bool) -> Result<i32> {
    let start = Instant::now();
    let (u, report) = solve_config(cfg)?;
    let runtime = timings.then(|| start.elapsed().as_secs_f64());
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("solution.txt"))?);
    u.write_table(&mut w)?;
    w.flush()?;
    write_json(
        &out.join("solve_report.json"),
        &json!({
            "operator": cfg.operator,
            "seed": cfg.seed.unwrap_or(0),
            "report": report,
            "runtime_s": runtime,
        }),
    )?;
    println!(
        "solved {} unknowns in {} iterations, residual {:e}",
        report.unknowns, report.iterations, report.residual
    );
    Ok(0)
}

fn cmd_check(cfg: &RunConfig, solution: &Path, out: &Path) -> Result<i32> {
    let op = cfg.operator.as_ref().ok_or_else(|| Error::Config("missing operator".into()))?;
    let classes = cfg.classes.as_ref().ok_or_else(|| Error::Config("missing classes".into()))?;
    let expected = op.lattice()?;
    let file = fs::File::open(solution)?;
    let u = GridFunction::read_table(BufReader::new(file))?;
    if u.lattice() != &expected {
        return Err(Error::GridMismatch(format!(
            "solution grid {} does not match the configured grid {}",
            crate::lattice::table_header(u.lattice()),
            crate::lattice::table_header(&expected)
        )));
    }
    let u = if matches!(op, OperatorSpec::Nonlocal { .. }) {
        restrict_to_unit_box(&u)?
    } else {
        u
    };
    let params = &classes.params;
    let dim = u.lattice().dim();
    let opening = classes.opening.unwrap_or(params.a_hi);
    let mut contact = None;
    let mut all_pass = true;
    for label in &classes.definitions {
        let def = Definition::parse(label)?;
        if matches!(def, Definition::GlobalP | Definition::ContactW) && contact.is_none() {
            let vertices = lattice_vertices(u.lattice(), ADMISSIBLE_RADIUS);
            contact = Some(contact_set(&u, opening, &vertices)?);
        }
        let report = match def {
            Definition::LocalP => check_p_local(&u, params, &LocalSamples::defaults(dim, params))?,
            Definition::GlobalP => check_p_global(&u, params, contact.as_ref().unwrap(), &direction_sample(dim))?,
            Definition::PointwiseW => check_w(&u, params, WMode::Pointwise, None)?,
            Definition::ContactW => check_w(&u, params, WMode::Contact, contact.as_ref())?,
        };
        println!(
            "definition {}: {} ({} witnesses, {} tested)",
            def.label(),
            report.status,
            report.witness_count,
            report.tested
        );
        all_pass &= report.pass;
        write_json(&out.join(format!("report_{}.json", def.label())), &report)?;
    }
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_experiment(cfg: &RunConfig, out: &Path, timings: bool) -> Result<i32> {
    let mut spec = cfg
        .experiment
        .clone()
        .ok_or_else(|| Error::Config("missing experiment".into()))?;
    if let Some(seed) = cfg.seed {
        spec.set_seed(seed);
    }
    let opts = cfg.solver.clone().unwrap_or_default();
    let report = run_experiment(&spec, &opts, timings)?;
    let mut value = serde_json::to_value(&report)?;
    if let Value::Object(map) = &mut value {
        map.insert("seed".into(), json!(cfg.seed));
    }
    write_json(&out.join("report.json"), &value)?;
    fs::write(out.join("report.csv"), report.table.to_csv())?;
    println!("{}: {}", report.id, if report.pass { "pass" } else { "fail" });
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(if report.pass { 0 } else { 1 })
}
