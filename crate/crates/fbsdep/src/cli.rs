//! Configuration files, report emission, and the command entry points behind
//! the `fbsdep` binary.
//!
//! A run is described by one TOML file (see [`RunConfig`]) naming either a
//! built-in benchmark or a custom affine problem, together with solver and
//! experiment settings; the command-line flags `--seed`, `--paths`,
//! `--steps`, `--out` and `--threads` override the corresponding run-level
//! fields.  Commands write their artifacts into the configured output
//! directory and exit with a fixed code contract:
//!
//! * `0` — success; every acceptance band of the command was met,
//! * `1` — usage, configuration, or input errors,
//! * `2` — a solver failed to converge or a verification band was violated,
//! * `3` — a singularity guard fired in the adjoint gain algebra.
//!
//! Every JSON report embeds the fully resolved configuration and the content
//! hash of the noise parameters, so a report is traceable to the exact
//! ensemble that produced it.  All file output is written serially with
//! shortest round-trip float formatting: rerunning a command with the same
//! configuration produces byte-identical files regardless of `--threads`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::adjoint::{
    solve_first_order, solve_second_order, write_adjoint_csv, write_guard_log, AdjointConfig,
    FirstOrderAdjoint, GainAudit, SecondOrderAdjoint,
};
use crate::error::{Error, Result};
use crate::fbsolve::{
    constant_control, evaluate_cost, picard_solve, time_control, write_solution_csv,
    CostEstimate, FbsdepSolution, PicardReport, RegressionConfig,
};
use crate::grid::ScalarGrid;
use crate::markspace::MarkSpace;
use crate::maxprinciple::{
    expansion_check, order_experiment, verify_mp, MpConfig, OrderFit, OrderStatistic, Replacement,
};
use crate::model::{
    builtin_names, builtin_problem, validate_problem, AffineCoeff, Coefficients, ControlSet,
    LinearTerminal, LipschitzBudget, Problem, QuadraticTerminal, TerminalFn,
};
use crate::noise::{generate_noise, noise_params_hash, NoiseBundle, TimeGrid};

/// Sample count of the `validate` command's derivative audit.
const VALIDATION_SAMPLES: usize = 2000;

// ---------------------------------------------------------------------------
// Configuration sections
// ---------------------------------------------------------------------------

/// `[grid]` — time discretization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Number of Euler steps.
    pub steps: usize,
    /// Horizon override; custom problems default to 1.  Built-in problems
    /// with a closed-form oracle refuse the override, since their oracles
    /// are tied to the registered horizon.
    pub horizon: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            steps: 100,
            horizon: None,
        }
    }
}

/// `[markspace]` — jump marks and their intensity weights (custom problems).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkspaceSection {
    pub marks: Vec<f64>,
    pub weights: Vec<f64>,
}

/// One affine coefficient table: `value = constant + x·X + y·Y + z·Z + zt·Z~
/// + u·U`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineSection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub zt: f64,
    pub u: f64,
    pub constant: f64,
}

impl AffineSection {
    fn coeff(&self) -> AffineCoeff {
        AffineCoeff {
            x: self.x,
            y: self.y,
            z: self.z,
            zt: self.zt,
            u: self.u,
            constant: self.constant,
        }
    }
}

/// Terminal cost `phi(x) = quad·x²/2 + slope·x + offset`.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalSection {
    pub quad: f64,
    pub slope: f64,
    pub offset: f64,
}

/// `[coefficients]` — either a built-in benchmark by name, or a custom
/// problem from affine tables.  The two forms are mutually exclusive.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientsSection {
    /// Name of a built-in benchmark (see `list-problems`).
    pub builtin: Option<String>,
    /// Display name of a custom problem.
    pub name: Option<String>,
    /// Initial state of a custom problem (default 0).
    pub x0: Option<f64>,
    pub drift: Option<AffineSection>,
    pub diffusion: Option<AffineSection>,
    pub jump: Option<AffineSection>,
    pub driver: Option<AffineSection>,
    pub terminal: Option<TerminalSection>,
}

/// `[controls]` — admissible control set: either `min`/`max` for a closed
/// interval or `values` for a finite set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsSection {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub values: Option<Vec<f64>>,
}

impl ControlsSection {
    fn to_control_set(&self) -> Result<ControlSet> {
        match (&self.values, self.min, self.max) {
            (Some(values), None, None) => Ok(ControlSet::Finite(values.clone())),
            (None, Some(min), Some(max)) => Ok(ControlSet::Interval { min, max }),
            _ => Err(Error::Config(
                "[controls] needs either both min and max, or values".into(),
            )),
        }
    }
}

/// `[budget]` — declared Lipschitz bounds per state argument.  When absent,
/// custom problems derive the exact bounds from their affine tables.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub ztilde: f64,
}

/// The candidate control a run solves under.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum ControlSpec {
    /// The problem's oracle feedback evaluated along time at the initial
    /// state, plus an additive offset; the result is clamped to the
    /// admissible set.
    Oracle {
        #[serde(default)]
        offset: f64,
    },
    /// A constant control value, clamped to the admissible set.
    Constant { value: f64 },
}

/// `[run]` — ensemble size, seeding, output, and the candidate control.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Monte Carlo path count.
    pub paths: usize,
    /// Noise seed.
    pub seed: u64,
    /// Worker thread count; 0 uses the process default.
    pub threads: usize,
    /// Output directory (created if missing).
    pub out: PathBuf,
    /// Path cap of the CSV exports; 0 exports every path.
    pub csv_paths: usize,
    /// Candidate control; defaults to the oracle control when the problem
    /// has one and to the clamped zero control otherwise.
    pub control: Option<ControlSpec>,
    /// Also write the raw noise arrays as `noise.bin` for audits.
    pub dump_noise: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            paths: 4096,
            seed: 1,
            threads: 0,
            out: PathBuf::from("out"),
            csv_paths: 64,
            control: None,
            dump_noise: false,
        }
    }
}

/// `[picard]` — coupling iteration settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardSection {
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for PicardSection {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iterations: 25,
        }
    }
}

/// `[adjoint]` — denominator guard floor and gain boundedness threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjointSection {
    pub eps_denominator: f64,
    pub gain_bound: f64,
}

impl Default for AdjointSection {
    fn default() -> Self {
        Self {
            eps_denominator: 1e-8,
            gain_bound: 1e6,
        }
    }
}

/// `[spike]` — needle perturbation shared by `spike-order` and `expansion`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeSection {
    /// Left edge of the perturbation window.
    pub t_bar: f64,
    /// Fixed replacement control value on the window.
    pub replacement: f64,
    /// Window widths, strictly decreasing.
    pub epsilons: Vec<f64>,
}

impl Default for SpikeSection {
    fn default() -> Self {
        Self {
            t_bar: 0.25,
            replacement: 0.0,
            epsilons: vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

/// `[mp]` — lattice shape and tolerance of the Hamiltonian scan.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpSection {
    /// Number of evenly strided time steps.
    pub times: usize,
    /// Number of evenly strided paths.
    pub paths: usize,
    /// Half-width of the control offset ladder.
    pub span: f64,
    /// Number of offsets; odd counts contain the exact zero offset.
    pub offset_count: usize,
    /// Relative violation tolerance.
    pub tol: f64,
}

impl Default for MpSection {
    fn default() -> Self {
        Self {
            times: 20,
            paths: 200,
            span: 2.0,
            offset_count: 41,
            tol: 1e-2,
        }
    }
}

/// `[order]` — statistics and acceptance band of the ε-power-law fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrderSection {
    /// Statistics to fit.
    pub statistics: Vec<OrderStatistic>,
    /// Relative half-width of the accepted slope band around the expected
    /// slope: a fit passes when `|slope − expected| ≤ slope_band·expected`.
    pub slope_band: f64,
}

impl Default for OrderSection {
    fn default() -> Self {
        Self {
            statistics: OrderStatistic::ALL.to_vec(),
            slope_band: 0.15,
        }
    }
}

/// `[expansion]` — overrides of the first-order expansion check.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionSection {
    /// Spike-width ladder; falls back to `[spike].epsilons` when absent.
    pub epsilons: Option<Vec<f64>>,
}

/// A complete run description, as parsed from a TOML configuration file.
///
/// Unknown keys anywhere in the file are hard errors: a typo must fail the
/// run, not silently fall back to a default.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridSection,
    pub markspace: Option<MarkspaceSection>,
    pub coefficients: CoefficientsSection,
    pub controls: Option<ControlsSection>,
    pub budget: Option<BudgetSection>,
    pub run: RunSection,
    pub regression: RegressionConfig,
    pub picard: PicardSection,
    pub adjoint: AdjointSection,
    pub spike: SpikeSection,
    pub mp: MpSection,
    pub order: OrderSection,
    pub expansion: ExpansionSection,
}

impl RunConfig {
    /// Parse a configuration from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read and parse a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read '{}': {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Construct the problem instance this configuration describes.
    pub fn build_problem(&self) -> Result<Problem> {
        match &self.coefficients.builtin {
            Some(name) => self.build_builtin(name),
            None => self.build_custom(),
        }
    }

    fn build_builtin(&self, name: &str) -> Result<Problem> {
        let c = &self.coefficients;
        let mut conflicts: Vec<&str> = Vec::new();
        if self.markspace.is_some() {
            conflicts.push("[markspace]");
        }
        if self.controls.is_some() {
            conflicts.push("[controls]");
        }
        if self.budget.is_some() {
            conflicts.push("[budget]");
        }
        if c.name.is_some() {
            conflicts.push("[coefficients].name");
        }
        if c.x0.is_some() {
            conflicts.push("[coefficients].x0");
        }
        for (section, label) in [
            (&c.drift, "[coefficients.drift]"),
            (&c.diffusion, "[coefficients.diffusion]"),
            (&c.jump, "[coefficients.jump]"),
            (&c.driver, "[coefficients.driver]"),
        ] {
            if section.is_some() {
                conflicts.push(label);
            }
        }
        if c.terminal.is_some() {
            conflicts.push("[coefficients.terminal]");
        }
        if !conflicts.is_empty() {
            return Err(Error::Config(format!(
                "builtin = \"{name}\" conflicts with the custom problem sections {}",
                conflicts.join(", ")
            )));
        }
        let mut problem = builtin_problem(name)?;
        if let Some(horizon) = self.grid.horizon {
            if problem.oracle.is_some() {
                return Err(Error::Config(format!(
                    "overriding the horizon of '{name}' would invalidate its closed-form \
                     oracle; define a custom problem instead"
                )));
            }
            problem.horizon = horizon;
        }
        Ok(problem)
    }

    fn build_custom(&self) -> Result<Problem> {
        let c = &self.coefficients;
        let markspace = match &self.markspace {
            Some(section) => MarkSpace::new(section.marks.clone(), section.weights.clone())?,
            None => {
                return Err(Error::Config(
                    "custom problems need a [markspace] section (or set [coefficients].builtin)"
                        .into(),
                ))
            }
        };
        let controls = match &self.controls {
            Some(section) => section.to_control_set()?,
            None => return Err(Error::Config("custom problems need a [controls] section".into())),
        };
        controls.validate()?;

        let drift = c.drift.unwrap_or_default();
        let diffusion = c.diffusion.unwrap_or_default();
        let jump = c.jump.unwrap_or_default();
        let driver = c.driver.unwrap_or_default();
        if jump.z != 0.0 {
            return Err(Error::Config(
                "the jump coefficient must not read z; set [coefficients.jump].z = 0".into(),
            ));
        }
        let terminal = c.terminal.unwrap_or_default();
        let phi: Arc<dyn TerminalFn> = if terminal.quad == 0.0 {
            Arc::new(LinearTerminal {
                slope: terminal.slope,
                offset: terminal.offset,
            })
        } else {
            Arc::new(QuadraticTerminal {
                quad: terminal.quad,
                slope: terminal.slope,
                offset: terminal.offset,
            })
        };
        let budget = match self.budget {
            Some(section) => LipschitzBudget {
                x: section.x,
                y: section.y,
                z: section.z,
                ztilde: section.ztilde,
            },
            // Affine tables have exact Lipschitz constants; derive them.
            None => {
                let tables = [drift, diffusion, jump, driver];
                let bound = |pick: fn(&AffineSection) -> f64| {
                    tables.iter().map(|t| pick(t).abs()).fold(0.0, f64::max)
                };
                LipschitzBudget {
                    x: bound(|t| t.x),
                    y: bound(|t| t.y),
                    z: bound(|t| t.z),
                    ztilde: bound(|t| t.zt),
                }
            }
        };

        Ok(Problem {
            name: c.name.clone().unwrap_or_else(|| "custom".into()),
            x0: c.x0.unwrap_or(0.0),
            horizon: self.grid.horizon.unwrap_or(1.0),
            markspace,
            coefficients: Coefficients {
                b: Arc::new(drift.coeff()),
                sigma: Arc::new(diffusion.coeff()),
                f: Arc::new(jump.coeff()),
                g: Arc::new(driver.coeff()),
                phi,
            },
            controls,
            budget,
            oracle: None,
        })
    }
}

// ---------------------------------------------------------------------------
// Command-line surface
// ---------------------------------------------------------------------------

/// Flags shared by every command that runs a configuration.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Path to the TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override the noise seed ([run].seed).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Override the Monte Carlo path count ([run].paths).
    #[arg(long, value_name = "N")]
    pub paths: Option<usize>,
    /// Override the Euler step count ([grid].steps).
    #[arg(long, value_name = "K")]
    pub steps: Option<usize>,
    /// Override the output directory ([run].out).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the worker thread count ([run].threads; 0 = default pool).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the coupled system under the configured control and export the
    /// solution with its cost estimate.
    Solve(CommonArgs),
    /// Solve and export both adjoint orders with their guard logs.
    Adjoint(CommonArgs),
    /// Scan the shifted Hamiltonian over a trajectory lattice for minimality
    /// violations.
    VerifyMp(CommonArgs),
    /// Fit ε-power laws of the spike-variation statistics.
    SpikeOrder(CommonArgs),
    /// Compare measured spike cost gaps against the first-order expansion.
    Expansion(CommonArgs),
    /// List the built-in benchmark problems.
    ListProblems,
    /// Audit a problem definition: derivatives, z-independence of the jump
    /// coefficient, and the Lipschitz budget.
    Validate(CommonArgs),
}

/// Command-line interface of the `fbsdep` binary.
#[derive(Debug, Parser)]
#[command(
    name = "fbsdep",
    version,
    about = "Coupled forward-backward SDE solver with Poisson jumps, adjoint \
             states, and stochastic maximum-principle verification"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Parse arguments, run the requested command, and return the process exit
/// code.  Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // --help and --version surface as "errors" that print to stdout.
            let is_usage_error = err.use_stderr();
            let _ = err.print();
            return if is_usage_error { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::ListProblems => cmd_list_problems(),
        Command::Validate(args) => cmd_validate(&args),
        Command::Solve(args) => run_prepared(&args, cmd_solve),
        Command::Adjoint(args) => run_prepared(&args, cmd_adjoint),
        Command::VerifyMp(args) => run_prepared(&args, cmd_verify_mp),
        Command::SpikeOrder(args) => run_prepared(&args, cmd_spike_order),
        Command::Expansion(args) => run_prepared(&args, cmd_expansion),
    }
}

fn load_with_overrides(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(paths) = args.paths {
        cfg.run.paths = paths;
    }
    if let Some(steps) = args.steps {
        cfg.grid.steps = steps;
    }
    if let Some(out) = &args.out {
        cfg.run.out = out.clone();
    }
    if let Some(threads) = args.threads {
        cfg.run.threads = threads;
    }
    Ok(cfg)
}

/// Load the configuration, then run `f` inside a thread pool of the
/// configured size (0 keeps the default pool).
fn run_prepared(args: &CommonArgs, f: fn(&Prepared) -> Result<i32>) -> Result<i32> {
    let cfg = load_with_overrides(args)?;
    let threads = cfg.run.threads;
    let body = move || f(&prepare(cfg)?);
    if threads == 0 {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
        pool.install(body)
    }
}

// ---------------------------------------------------------------------------
// Run preparation
// ---------------------------------------------------------------------------

/// Everything a command needs: the resolved configuration, the problem, the
/// noise ensemble, and the candidate control grid.
struct Prepared {
    cfg: RunConfig,
    problem: Problem,
    noise: NoiseBundle,
    control: ScalarGrid,
    out: PathBuf,
    noise_hash: String,
}

impl Prepared {
    fn csv_cap(&self) -> Option<usize> {
        match self.cfg.run.csv_paths {
            0 => None,
            n => Some(n),
        }
    }

    fn envelope<'a, T: Serialize>(&'a self, command: &'static str, body: T) -> Envelope<'a, T> {
        Envelope {
            command,
            problem: &self.problem.name,
            noise_params_hash: &self.noise_hash,
            config: &self.cfg,
            body,
        }
    }
}

fn prepare(mut cfg: RunConfig) -> Result<Prepared> {
    let problem = cfg.build_problem()?;
    let grid = TimeGrid::new(problem.horizon, cfg.grid.steps)?;
    let noise = generate_noise(&grid, &problem.markspace, cfg.run.paths, cfg.run.seed)?;
    let (control, resolved) = build_control(&problem, &cfg, &noise)?;
    // Reports must show what actually ran, so the defaulted control is made
    // explicit before the config is embedded anywhere.
    cfg.run.control = Some(resolved);
    let out = cfg.run.out.clone();
    fs::create_dir_all(&out)?;
    if cfg.run.dump_noise {
        let mut w = BufWriter::new(fs::File::create(out.join("noise.bin"))?);
        noise.write_binary(&mut w)?;
        w.flush()?;
    }
    let noise_hash = noise.params_hash();
    Ok(Prepared {
        cfg,
        problem,
        noise,
        control,
        out,
        noise_hash,
    })
}

/// Build the candidate control grid and report the spec it resolved to.
fn build_control(
    problem: &Problem,
    cfg: &RunConfig,
    noise: &NoiseBundle,
) -> Result<(ScalarGrid, ControlSpec)> {
    let resolved = match &cfg.run.control {
        Some(spec) => spec.clone(),
        None => match problem.oracle {
            Some(_) => ControlSpec::Oracle { offset: 0.0 },
            None => ControlSpec::Constant {
                value: problem.controls.clamp(0.0),
            },
        },
    };
    let grid = match &resolved {
        ControlSpec::Oracle { offset } => {
            let feedback = problem.oracle_control()?;
            let x0 = problem.x0;
            let controls = &problem.controls;
            time_control(noise, |t| controls.clamp(feedback(t, x0) + offset))
        }
        ControlSpec::Constant { value } => {
            constant_control(noise, problem.controls.clamp(*value))
        }
    };
    Ok((grid, resolved))
}

/// Solve the coupled system and insist on convergence (non-convergence in a
/// reference solve poisons every downstream estimate).
fn reference_solution(p: &Prepared) -> Result<FbsdepSolution> {
    let solution = picard_solve(
        &p.problem,
        &p.control,
        &p.noise,
        &p.cfg.regression,
        p.cfg.picard.tol,
        p.cfg.picard.max_iterations,
    )?;
    if !solution.report.converged {
        return Err(Error::UnconvergedSolution);
    }
    Ok(solution)
}

fn adjoint_config(cfg: &RunConfig) -> AdjointConfig {
    AdjointConfig {
        eps_denominator: cfg.adjoint.eps_denominator,
        gain_bound: cfg.adjoint.gain_bound,
        regression: cfg.regression,
    }
}

/// Solve both adjoint orders and escalate any guard breach to an error.
fn regular_adjoints(
    p: &Prepared,
    solution: &FbsdepSolution,
) -> Result<(FirstOrderAdjoint, SecondOrderAdjoint)> {
    let acfg = adjoint_config(&p.cfg);
    let first = solve_first_order(&p.problem, solution, &p.noise, &acfg)?;
    first.audit.ensure_regular()?;
    let second = solve_second_order(&p.problem, solution, &first, &p.noise, &acfg)?;
    second.audit.ensure_regular()?;
    Ok((first, second))
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

/// Common JSON wrapper of every report.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'static str,
    problem: &'a str,
    noise_params_hash: &'a str,
    config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv_file(
    path: &Path,
    fill: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>,
) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    fill(&mut w)?;
    w.flush()?;
    Ok(())
}

fn rel_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_solve(p: &Prepared) -> Result<i32> {
    let solution = picard_solve(
        &p.problem,
        &p.control,
        &p.noise,
        &p.cfg.regression,
        p.cfg.picard.tol,
        p.cfg.picard.max_iterations,
    )?;
    let cost = evaluate_cost(&solution, true)?;

    let csv_path = p.out.join("solution.csv");
    write_csv_file(&csv_path, |w| {
        write_solution_csv(&solution, &p.noise, w, p.csv_cap())
    })?;

    #[derive(Serialize)]
    struct Body<'a> {
        picard: &'a PicardReport,
        cost: &'a CostEstimate,
        artifacts: Vec<String>,
    }
    let report_path = p.out.join("solve_report.json");
    write_json(
        &report_path,
        &p.envelope(
            "solve",
            Body {
                picard: &solution.report,
                cost: &cost,
                artifacts: vec![rel_name(&csv_path)],
            },
        ),
    )?;

    println!(
        "solve: J = {:.6} +/- {:.2e} after {} Picard iterations (converged: {})",
        cost.value, cost.standard_error, solution.report.iterations, solution.report.converged
    );
    println!(
        "solve: wrote {} and {}",
        csv_path.display(),
        report_path.display()
    );
    if solution.report.converged {
        Ok(0)
    } else {
        eprintln!(
            "solve: Picard iteration stopped at distance {:.3e} without reaching tol {:.1e}",
            solution.report.distances.last().copied().unwrap_or(f64::NAN),
            solution.report.tol
        );
        Ok(2)
    }
}

fn cmd_adjoint(p: &Prepared) -> Result<i32> {
    let solution = reference_solution(p)?;
    let acfg = adjoint_config(&p.cfg);
    let first = solve_first_order(&p.problem, &solution, &p.noise, &acfg)?;
    let second = solve_second_order(&p.problem, &solution, &first, &p.noise, &acfg)?;

    let csv_path = p.out.join("adjoint.csv");
    write_csv_file(&csv_path, |w| {
        write_adjoint_csv(&first, &second, &p.noise, w, p.csv_cap())
    })?;
    let guards_first = p.out.join("guards_first.csv");
    write_csv_file(&guards_first, |w| write_guard_log(&first.audit.events, w))?;
    let guards_second = p.out.join("guards_second.csv");
    write_csv_file(&guards_second, |w| write_guard_log(&second.audit.events, w))?;

    #[derive(Serialize)]
    struct Body<'a> {
        picard: &'a PicardReport,
        first_order_audit: &'a GainAudit,
        second_order_audit: &'a GainAudit,
        artifacts: Vec<String>,
    }
    let report_path = p.out.join("adjoint_report.json");
    write_json(
        &report_path,
        &p.envelope(
            "adjoint",
            Body {
                picard: &solution.report,
                first_order_audit: &first.audit,
                second_order_audit: &second.audit,
                artifacts: vec![
                    rel_name(&csv_path),
                    rel_name(&guards_first),
                    rel_name(&guards_second),
                ],
            },
        ),
    )?;

    let breaches = first.audit.event_count + second.audit.event_count;
    println!(
        "adjoint: max gain {:.3e} (bound {:.1e}), {} guard breach(es)",
        first.audit.max_gain.max(second.audit.max_gain),
        p.cfg.adjoint.gain_bound,
        breaches
    );
    println!(
        "adjoint: wrote {}, {}, {}, {}",
        csv_path.display(),
        guards_first.display(),
        guards_second.display(),
        report_path.display()
    );
    if breaches > 0 {
        for event in first
            .audit
            .events
            .iter()
            .chain(second.audit.events.iter())
            .take(5)
        {
            eprintln!(
                "adjoint: {} = {:.3e} at t = {}, path {}, mark {}",
                event.guard, event.value, event.t, event.path, event.mark
            );
        }
        return Ok(3);
    }
    if !first.audit.within_bound || !second.audit.within_bound {
        eprintln!(
            "adjoint: gain bound {:.1e} exceeded (max gain {:.3e}); the boundedness \
             hypothesis fails on this problem",
            p.cfg.adjoint.gain_bound,
            first.audit.max_gain.max(second.audit.max_gain)
        );
        return Ok(2);
    }
    Ok(0)
}

fn cmd_verify_mp(p: &Prepared) -> Result<i32> {
    let solution = reference_solution(p)?;
    let (first, second) = regular_adjoints(p, &solution)?;
    let mp_cfg = MpConfig {
        n_times: p.cfg.mp.times,
        n_paths: p.cfg.mp.paths,
        offsets: MpConfig::spanning(p.cfg.mp.span, p.cfg.mp.offset_count),
        tol: p.cfg.mp.tol,
    };
    let report = verify_mp(&p.problem, &solution, &first, &second, &mp_cfg, &p.noise)?;

    let csv_path = p.out.join("mp_gaps.csv");
    write_csv_file(&csv_path, |w| {
        writeln!(w, "t,path,u,gap")?;
        for (ti, &step) in report.step_indices.iter().enumerate() {
            for (pi, &path) in report.path_indices.iter().enumerate() {
                for oi in 0..report.offsets.len() {
                    let flat =
                        (ti * report.path_indices.len() + pi) * report.offsets.len() + oi;
                    writeln!(
                        w,
                        "{},{path},{},{}",
                        p.noise.grid().knot(step),
                        report.controls[flat],
                        report.gaps[flat]
                    )?;
                }
            }
        }
        Ok(())
    })?;

    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a crate::maxprinciple::MpReport,
        artifacts: Vec<String>,
    }
    let report_path = p.out.join("mp_report.json");
    write_json(
        &report_path,
        &p.envelope(
            "verify-mp",
            Body {
                report: &report,
                artifacts: vec![rel_name(&csv_path)],
            },
        ),
    )?;

    println!(
        "verify-mp: {} evaluations, min gap {:.3e}, min scaled gap {:.3e}, violations {:.4}%",
        report.n_evaluations,
        report.min_gap,
        report.min_scaled_gap,
        100.0 * report.violation_fraction
    );
    println!(
        "verify-mp: wrote {} and {}",
        csv_path.display(),
        report_path.display()
    );
    if report.violation_fraction == 0.0 {
        Ok(0)
    } else {
        eprintln!(
            "verify-mp: the candidate control violates Hamiltonian minimality on {:.4}% \
             of the lattice",
            100.0 * report.violation_fraction
        );
        Ok(2)
    }
}

fn cmd_spike_order(p: &Prepared) -> Result<i32> {
    let solution = reference_solution(p)?;
    let acfg = adjoint_config(&p.cfg);
    let first = solve_first_order(&p.problem, &solution, &p.noise, &acfg)?;
    first.audit.ensure_regular()?;

    #[derive(Serialize)]
    struct Outcome {
        fit: OrderFit,
        expected_slope: f64,
        slope_band: f64,
        /// Whether the fitted slope sits inside the band; absent for
        /// inconclusive fits.
        within_band: Option<bool>,
    }

    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut artifacts: Vec<String> = Vec::new();
    for &statistic in &p.cfg.order.statistics {
        let fit = order_experiment(
            &p.problem,
            &solution,
            &first,
            p.cfg.spike.t_bar,
            &Replacement::Value(p.cfg.spike.replacement),
            &p.cfg.spike.epsilons,
            statistic,
            &p.noise,
            &p.cfg.regression,
            p.cfg.picard.tol,
            p.cfg.picard.max_iterations,
        )?;

        let csv_path = p.out.join(format!("order_{}.csv", statistic.label()));
        write_csv_file(&csv_path, |w| {
            writeln!(w, "epsilon,statistic,se")?;
            for ((eps, value), se) in fit
                .epsilons
                .iter()
                .zip(&fit.values)
                .zip(&fit.standard_errors)
            {
                writeln!(w, "{eps},{value},{se}")?;
            }
            Ok(())
        })?;
        artifacts.push(rel_name(&csv_path));

        let expected = statistic.expected_slope();
        let within_band = (!fit.inconclusive)
            .then(|| (fit.slope - expected).abs() <= p.cfg.order.slope_band * expected);
        if fit.inconclusive {
            println!(
                "spike-order: {} is statistically zero at some width (noise floor {:.2e}); \
                 no slope claimed",
                statistic.label(),
                fit.noise_floor
            );
        } else {
            println!(
                "spike-order: {} slope {:.3} (expected {:.1}, band +/-{:.0}%, r^2 {:.4})",
                statistic.label(),
                fit.slope,
                expected,
                100.0 * p.cfg.order.slope_band,
                fit.r_squared
            );
        }
        outcomes.push(Outcome {
            fit,
            expected_slope: expected,
            slope_band: p.cfg.order.slope_band,
            within_band,
        });
    }

    #[derive(Serialize)]
    struct Body {
        fits: Vec<Outcome>,
        artifacts: Vec<String>,
    }
    let report_path = p.out.join("order_report.json");
    let failed = outcomes
        .iter()
        .any(|o| o.within_band == Some(false));
    write_json(
        &report_path,
        &p.envelope(
            "spike-order",
            Body {
                fits: outcomes,
                artifacts,
            },
        ),
    )?;
    println!("spike-order: wrote {}", report_path.display());

    if failed {
        eprintln!("spike-order: at least one fitted slope fell outside its acceptance band");
        Ok(2)
    } else {
        Ok(0)
    }
}

fn cmd_expansion(p: &Prepared) -> Result<i32> {
    let solution = reference_solution(p)?;
    let (first, second) = regular_adjoints(p, &solution)?;
    let epsilons = p
        .cfg
        .expansion
        .epsilons
        .clone()
        .unwrap_or_else(|| p.cfg.spike.epsilons.clone());
    let report = expansion_check(
        &p.problem,
        &solution,
        &first,
        &second,
        p.cfg.spike.t_bar,
        &Replacement::Value(p.cfg.spike.replacement),
        &epsilons,
        &p.noise,
        &p.cfg.regression,
        p.cfg.picard.tol,
        p.cfg.picard.max_iterations,
        p.cfg.adjoint.eps_denominator,
    )?;

    let csv_path = p.out.join("expansion.csv");
    write_csv_file(&csv_path, |w| {
        writeln!(w, "epsilon,gap,se,error")?;
        for (((eps, gap), se), err) in report
            .epsilons
            .iter()
            .zip(&report.gaps)
            .zip(&report.gap_standard_errors)
            .zip(&report.errors)
        {
            writeln!(w, "{eps},{gap},{se},{err}")?;
        }
        Ok(())
    })?;

    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a crate::maxprinciple::ExpansionReport,
        artifacts: Vec<String>,
    }
    let report_path = p.out.join("expansion_report.json");
    write_json(
        &report_path,
        &p.envelope(
            "expansion",
            Body {
                report: &report,
                artifacts: vec![rel_name(&csv_path)],
            },
        ),
    )?;

    println!(
        "expansion: G = {:.6} +/- {:.2e}, final first-order error {:.3e} (band {:.3e})",
        report.g_value,
        report.g_standard_error,
        report.errors.last().copied().unwrap_or(f64::NAN),
        report.band
    );
    println!(
        "expansion: wrote {} and {}",
        csv_path.display(),
        report_path.display()
    );

    let pass = report.errors_decreasing && report.final_within_band && report.signs_match;
    if pass {
        Ok(0)
    } else {
        eprintln!(
            "expansion: first-order expansion bands violated (errors decreasing: {}, \
             final within band: {}, signs match: {})",
            report.errors_decreasing, report.final_within_band, report.signs_match
        );
        Ok(2)
    }
}

fn cmd_list_problems() -> Result<i32> {
    for &name in builtin_names() {
        let problem = builtin_problem(name)?;
        let oracle = if problem.oracle.is_some() {
            "closed-form oracle"
        } else {
            "no oracle"
        };
        println!(
            "{name:<16} horizon {:<4} marks {:<2} {oracle}",
            problem.horizon,
            problem.markspace.len()
        );
    }
    Ok(0)
}

fn cmd_validate(args: &CommonArgs) -> Result<i32> {
    let cfg = load_with_overrides(args)?;
    let problem = cfg.build_problem()?;
    let report = validate_problem(&problem, VALIDATION_SAMPLES, cfg.run.seed)?;

    fs::create_dir_all(&cfg.run.out)?;
    let grid = TimeGrid::new(problem.horizon, cfg.grid.steps)?;
    let hash = noise_params_hash(cfg.run.seed, cfg.run.paths, &grid, &problem.markspace);

    #[derive(Serialize)]
    struct Body<'a> {
        report: &'a crate::model::ValidationReport,
    }
    let report_path = cfg.run.out.join("validation_report.json");
    write_json(
        &report_path,
        &Envelope {
            command: "validate",
            problem: &problem.name,
            noise_params_hash: &hash,
            config: &cfg,
            body: Body { report: &report },
        },
    )?;

    println!(
        "validate: '{}' max gradient mismatch {:.2e}, max hessian mismatch {:.2e}, \
         f z-dependence {:.2e}",
        problem.name,
        report.max_gradient_mismatch,
        report.max_hessian_mismatch,
        report.f_z_dependence
    );
    for warning in &report.warnings {
        println!("validate: warning: {warning}");
    }
    println!("validate: wrote {}", report_path.display());
    if report.budget_ok {
        Ok(0)
    } else {
        eprintln!(
            "validate: observed Lipschitz ratios {:?} exceed the declared budget",
            report.observed_lipschitz
        );
        Ok(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_builtin_config_parses_and_builds() {
        let cfg = RunConfig::from_toml("[coefficients]\nbuiltin = \"lq_jump\"\n")
            .expect("minimal config must parse");
        let problem = cfg.build_problem().expect("builtin must build");
        assert_eq!(problem.name, "lq_jump");
        assert_eq!(cfg.grid.steps, 100, "steps must default to 100");
        assert_eq!(cfg.run.paths, 4096, "paths must default to 4096");
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        for text in [
            "[coefficients]\nbuiltin = \"zero\"\ntypo = 1\n",
            "[run]\npath_count = 10\n",
            "[grid]\nsteps = 10\nhorizonn = 2.0\n",
            "top_level_typo = true\n",
        ] {
            let err = RunConfig::from_toml(text).expect_err("unknown keys must be rejected");
            assert!(
                matches!(err, Error::Config(_)),
                "expected a config error, got {err:?}"
            );
        }
    }

    #[test]
    fn builtin_rejects_conflicting_custom_sections() {
        let cfg = RunConfig::from_toml(
            "[coefficients]\nbuiltin = \"zero\"\n[markspace]\nmarks = [1.0]\nweights = [1.0]\n",
        )
        .expect("parse succeeds; the conflict is semantic");
        let err = cfg.build_problem().expect_err("conflict must be rejected");
        assert!(
            err.to_string().contains("[markspace]"),
            "the error must name the conflicting section, got: {err}"
        );
    }

    #[test]
    fn horizon_override_is_refused_on_oracle_problems() {
        let cfg = RunConfig::from_toml(
            "[grid]\nhorizon = 2.0\n[coefficients]\nbuiltin = \"lq_jump\"\n",
        )
        .expect("config must parse");
        let err = cfg.build_problem().expect_err("override must be refused");
        assert!(
            err.to_string().contains("oracle"),
            "the error must explain the oracle conflict, got: {err}"
        );

        let cfg = RunConfig::from_toml(
            "[grid]\nhorizon = 2.0\n[coefficients]\nbuiltin = \"linear_forward\"\n",
        )
        .expect("config must parse");
        let problem = cfg.build_problem().expect("oracle-free override is fine");
        assert_eq!(problem.horizon, 2.0);
    }

    #[test]
    fn custom_problem_builds_with_derived_budget() {
        let cfg = RunConfig::from_toml(
            r#"
            [markspace]
            marks = [-0.5, 1.0]
            weights = [0.4, 0.6]

            [coefficients]
            name = "drifted"
            x0 = 1.0
            [coefficients.drift]
            x = 0.3
            u = 1.0
            [coefficients.driver]
            y = 0.05
            [coefficients.terminal]
            slope = 0.5

            [controls]
            min = -1.0
            max = 1.0
            "#,
        )
        .expect("custom config must parse");
        let problem = cfg.build_problem().expect("custom problem must build");
        assert_eq!(problem.name, "drifted");
        assert_eq!(problem.x0, 1.0);
        assert_eq!(
            problem.budget.x, 0.3,
            "the x budget must be derived from the affine tables"
        );
        assert_eq!(problem.budget.y, 0.05);
        assert_eq!(problem.markspace.len(), 2);
    }

    #[test]
    fn custom_problem_rejects_z_reading_jump_coefficient() {
        let cfg = RunConfig::from_toml(
            r#"
            [markspace]
            marks = [1.0]
            weights = [1.0]
            [coefficients.jump]
            z = 0.1
            [controls]
            min = 0.0
            max = 0.0
            "#,
        )
        .expect("config must parse");
        let err = cfg.build_problem().expect_err("jump z-dependence is banned");
        assert!(
            err.to_string().contains("jump"),
            "the error must point at the jump coefficient, got: {err}"
        );
    }

    #[test]
    fn control_resolution_prefers_the_oracle_and_clamps() {
        let cfg =
            RunConfig::from_toml("[coefficients]\nbuiltin = \"lq_jump\"\n").expect("parses");
        let problem = cfg.build_problem().expect("builds");
        let grid = TimeGrid::new(problem.horizon, 4).expect("grid");
        let noise = generate_noise(&grid, &problem.markspace, 3, 7).expect("noise");

        let (control, resolved) = build_control(&problem, &cfg, &noise).expect("control");
        assert!(
            matches!(resolved, ControlSpec::Oracle { offset } if offset == 0.0),
            "an oracle problem must default to its oracle control"
        );
        let oracle = problem.oracle_control().expect("oracle");
        assert_eq!(control.get(0, 0), oracle(0.0, problem.x0));

        // Oracle-free problems fall back to the clamped zero control.
        let cfg = RunConfig::from_toml("[coefficients]\nbuiltin = \"linear_bsde\"\n")
            .expect("parses");
        let problem = cfg.build_problem().expect("builds");
        let noise = generate_noise(
            &TimeGrid::new(problem.horizon, 4).expect("grid"),
            &problem.markspace,
            3,
            7,
        )
        .expect("noise");
        let (_, resolved) = build_control(&problem, &cfg, &noise).expect("control");
        assert!(
            matches!(resolved, ControlSpec::Constant { .. }),
            "oracle-free problems must resolve to a constant control"
        );
    }

    #[test]
    fn control_spec_round_trips_through_toml() {
        let cfg = RunConfig::from_toml(
            "[coefficients]\nbuiltin = \"lq_jump\"\n[run.control]\nkind = \"oracle\"\noffset = 1.0\n",
        )
        .expect("tagged control spec must parse");
        assert!(
            matches!(cfg.run.control, Some(ControlSpec::Oracle { offset }) if offset == 1.0)
        );
        let cfg = RunConfig::from_toml(
            "[coefficients]\nbuiltin = \"zero\"\n[run.control]\nkind = \"constant\"\nvalue = 0.5\n",
        )
        .expect("constant control spec must parse");
        assert!(
            matches!(cfg.run.control, Some(ControlSpec::Constant { value }) if value == 0.5)
        );
    }

    #[test]
    fn order_statistics_deserialize_by_label() {
        let cfg = RunConfig::from_toml(
            "[coefficients]\nbuiltin = \"lq_spike\"\n[order]\nstatistics = [\"forward_gap\", \"remainder\"]\n",
        )
        .expect("statistic labels must deserialize");
        assert_eq!(
            cfg.order.statistics,
            vec![OrderStatistic::ForwardGap, OrderStatistic::Remainder]
        );
    }
}
