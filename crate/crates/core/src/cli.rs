//! `glovebox-sim` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::report::{emit_csv, emit_plots, write_csv, PlotContext};
use crate::scenario::{default_scenario, load_scenario, ScenarioConfig};
use crate::simulate::{arm_polylines, simulate, Simulation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCENARIO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_OUTPUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "glovebox-sim", version, about = "Contact-implicit dual-arm glovebox manipulation planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan the scenario path and write the trace.
    Run(RunArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Scenario TOML file, or `default` for the built-in scenario.
    #[arg(long, default_value = "default")]
    pub scenario: String,
    /// CSV trace path; the trace goes to stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Directory for path.svg, zmp.svg and forces.svg.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Overrides task.waypoints.
    #[arg(long)]
    pub waypoints: Option<usize>,
    /// Overrides solver.max_iterations.
    #[arg(long = "max-iters")]
    pub max_iters: Option<usize>,
    /// Overrides solver.tol_kkt and solver.tol_con.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Debug logging on stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

impl RunArgs {
    /// Scenario file values with command-line overrides applied.
    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let mut config = if self.scenario == "default" {
            default_scenario()
        } else {
            load_scenario(&self.scenario)?
        };
        if let Some(n) = self.waypoints {
            config.task.waypoints = n;
        }
        if let Some(n) = self.max_iters {
            config.solver.max_iterations = n;
        }
        if let Some(t) = self.tol {
            config.solver.tol_kkt = t;
            config.solver.tol_con = t;
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn plot_context(config: &ScenarioConfig, sim: &Simulation) -> Result<PlotContext> {
    let scene = config.scene()?;
    let arm_lines = sim
        .steps
        .iter()
        .map(|s| arm_polylines(&scene, &s.plan.theta))
        .collect::<Result<Vec<_>>>()?;
    Ok(PlotContext {
        sp_polygon: scene.balance.sp_polygon.clone(),
        sp_center: scene.balance.sp_center,
        safe_radius: scene.balance.safe_radius,
        port_edges: scene.port_edges,
        arm_lines,
    })
}

fn write_outputs(args: &RunArgs, config: &ScenarioConfig, sim: &Simulation) -> Result<()> {
    let records = sim.records();
    if records.is_empty() {
        return Ok(());
    }
    match &args.csv {
        Some(path) => emit_csv(&records, path)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_csv(&records, &mut lock)?;
            lock.flush().map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    if let Some(dir) = &args.svg {
        emit_plots(&records, &plot_context(config, sim)?, dir)?;
    }
    Ok(())
}

pub fn run(args: &RunArgs) -> i32 {
    let config = match args.scenario_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SCENARIO;
        }
    };
    let prepared = match config.prepare() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_SCENARIO;
        }
    };
    log::info!(
        "planning {} waypoints from ({:.3}, {:.3})",
        prepared.waypoints.len(),
        prepared.waypoints[0].x,
        prepared.waypoints[0].y
    );
    let sim = match simulate(&prepared) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_NOT_CONVERGED;
        }
    };
    if let Err(e) = write_outputs(args, &config, &sim) {
        eprintln!("error: {e}");
        return EXIT_OUTPUT;
    }
    match &sim.failure {
        None => EXIT_OK,
        Some(e) => {
            eprintln!("error: {e}");
            eprintln!("{} of {} steps completed", sim.steps.len(), prepared.waypoints.len());
            EXIT_NOT_CONVERGED
        }
    }
}

/// Parses `argv` (program name first) and runs. Usage errors print to
/// stderr and give exit code 2.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match cli.command {
        Command::Run(args) => {
            let level = if args.verbose { "debug" } else { "warn" };
            let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
                .target(env_logger::Target::Stderr)
                .try_init();
            run(&args)
        }
    }
}
