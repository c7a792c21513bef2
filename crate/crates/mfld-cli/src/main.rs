//! `mfld`: run the mean-field Langevin parameter flow from a config file,
//! emit its artifacts, or verify the solver against closed-form targets.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad configuration or
//! usage, 3 runtime failure (numerical abort or unwritable artifact).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mfld::measure::write_clouds_csv;
use mfld::{
    moment_trace, monotonicity_report, run_flow, write_contraction_csv, Error, FlowState,
    FlowTrace,
};
use mfld_cli::battery::{contraction_series, render_table, run_battery};
use mfld_cli::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "mfld", version, about = "Mean-field Langevin particle solver")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the parameter flow; write trace, final clouds and a summary.
    Run {
        /// Path to a key = value config file.
        config: PathBuf,
        /// Directory for flow_trace.csv, clouds.csv and summary.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the self-check battery on a linear-quadratic config.
    VerifyLq {
        config: PathBuf,
    },
    /// Write a single artifact of the configured run to one file.
    Emit {
        config: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    /// Checkpoint trace of the flow.
    Trace,
    /// Final parameter clouds.
    Clouds,
    /// Distance series of the flow against its +2-shifted twin.
    Contraction,
}

enum AppError {
    Config(String),
    Runtime(Error),
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.0)
    }
}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        AppError::Runtime(e)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(AppError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, AppError> {
    match cli.cmd {
        Cmd::Run { config, out } => cmd_run(&config, &out),
        Cmd::VerifyLq { config } => cmd_verify(&config),
        Cmd::Emit { config, what, out } => cmd_emit(&config, what, &out),
    }
}

fn execute_flow(cfg: &RunConfig) -> Result<(FlowTrace, FlowState), Error> {
    let spec = cfg.build_problem()?;
    let noise = cfg.sample_noise()?;
    run_flow(&spec, &cfg.flow_config(), &noise, cfg.sample_init()?, &cfg.xi)
}

fn cmd_run(config: &Path, out: &Path) -> Result<ExitCode, AppError> {
    let cfg = RunConfig::from_file(config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let t0 = Instant::now();
    let (trace, state) = execute_flow(&cfg)?;
    let seconds = t0.elapsed().as_secs_f64();

    trace.write_csv(&out.join("flow_trace.csv"))?;
    write_clouds(state.control(), &out.join("clouds.csv"))?;
    write_summary(&cfg, &trace, seconds, &out.join("summary.txt"))?;

    println!("wrote flow_trace.csv, clouds.csv, summary.txt to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn write_clouds(control: &mfld::ParticleControl, path: &Path) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_clouds_csv(control, &mut w).map_err(|e| Error::io(path.display().to_string(), e))?;
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_summary(cfg: &RunConfig, trace: &FlowTrace, seconds: f64, path: &Path) -> Result<(), Error> {
    let rows = trace.rows();
    let mut text = String::new();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        let mt = moment_trace(trace);
        let rep = monotonicity_report(trace);
        text.push_str(&format!("flow horizon        {:.6}\n", last.s));
        text.push_str(&format!("checkpoints         {}\n", rows.len()));
        text.push_str(&format!("objective           {:.6} +- {:.6}\n", last.j_sigma, last.j_stderr));
        text.push_str(&format!("objective at start  {:.6} +- {:.6}\n", first.j_sigma, first.j_stderr));
        text.push_str(&format!(
            "moment (order {})    {:.6}, a priori bound {:.6} {}\n",
            cfg.q_metric,
            last.moment_q,
            mt.bound,
            if mt.bounded { "held" } else { "VIOLATED" }
        ));
        text.push_str(&format!("foc spread          {:.6} -> {:.6}\n", first.foc_spread, last.foc_spread));
        text.push_str(&format!("gibbs residual      {:.6}\n", last.gibbs_residual));
        text.push_str(&format!("distance to start   {:.6}\n", last.rho_to_ref));
        text.push_str(&format!(
            "objective rises     {} of {} checkpoint pairs\n",
            rep.violations, rep.pairs
        ));
    } else {
        text.push_str("empty trace\n");
    }
    text.push_str(&format!("wall time           {seconds:.1}s\n"));
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_verify(config: &Path) -> Result<ExitCode, AppError> {
    let cfg = RunConfig::from_file(config)?;
    let Some(params) = cfg.lq_params() else {
        return Err(AppError::Config("verify-lq needs problem=lq".into()));
    };
    if !(cfg.sigma > 0.0) {
        return Err(AppError::Config("verify-lq needs sigma > 0".into()));
    }
    if params.b != 0.0 || params.q_run != 0.0 || params.g_term_quad != 0.0 {
        return Err(AppError::Config(
            "verify-lq needs b = 0, q_run = 0 and g_term_quad = 0; \
             the closed-form targets hold only there"
                .into(),
        ));
    }
    let checks = run_battery(&cfg)?;
    print!("{}", render_table(&checks));
    if checks.iter().all(|c| c.pass) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn cmd_emit(config: &Path, what: What, out: &Path) -> Result<ExitCode, AppError> {
    let cfg = RunConfig::from_file(config)?;
    match what {
        What::Trace => {
            let (trace, _) = execute_flow(&cfg)?;
            trace.write_csv(out)?;
        }
        What::Clouds => {
            let (_, state) = execute_flow(&cfg)?;
            write_clouds(state.control(), out)?;
        }
        What::Contraction => {
            let est = contraction_series(&cfg)?;
            write_contraction_csv(&est.series, out)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}
