use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use atomfrac::analysis::{classify_crack, stress_strain, verify_trace};
use atomfrac::evolution::refine_tau_study;
use atomfrac::output::{self, CrackSummary, VerifyFile, STRESS_DEFINITION};
use atomfrac::scenario::{parse_scenario, preset, write_scenario, Scenario, PRESET_NAMES};
use atomfrac::{Error, Result};

/// Quasi-static crack evolution in atomistic lattices with damageable bonds.
#[derive(Parser)]
#[command(name = "atomfrac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trajectory.csv, bonds.csv, verify.json and,
    /// for stretching loads, stress_strain.csv.
    Run {
        scenario: PathBuf,
        /// Output directory (default: `output.dir` of the scenario, else `out/<name>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a scenario for several time steps and compare the trajectories.
    TauStudy {
        scenario: PathBuf,
        /// Comma separated time steps; fractions such as 1/30 are accepted.
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List or print the built-in scenarios.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a scenario file.
    Emit { name: String },
}

/// Exit codes: 1 bad input, 2 solver failure (partial trace written),
/// 3 a verification check failed.
fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let res = match cli.command {
        Command::Run { scenario, out } => cmd_run(&scenario, out),
        Command::TauStudy { scenario, taus, out } => cmd_tau_study(&scenario, &taus, out),
        Command::Presets { action } => cmd_presets(action),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ATOMFRAC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfiguration(format!("ATOMFRAC_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidConfiguration(e.to_string()))
}

fn out_dir(s: &Scenario, out: Option<PathBuf>) -> PathBuf {
    out.or_else(|| s.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| Path::new("out").join(&s.name))
}

fn cmd_run(path: &Path, out: Option<PathBuf>) -> Result<ExitCode> {
    let scenario = parse_scenario(path)?;
    let dir = out_dir(&scenario, out);
    let setup = scenario.build()?;
    let (trace, failure) = match setup.run() {
        Ok(t) => (t, None),
        Err(f) => (f.trace, Some(f.error)),
    };
    let tie_tol = scenario.tie_tol();
    let sys = &setup.sys;
    let model = &setup.model;

    output::write_file(&dir, "trajectory.csv", &output::trajectory_csv(&trace, sys))?;
    output::write_file(&dir, "bonds.csv", &output::bonds_csv(&trace, sys, model, tie_tol)?)?;

    let report = verify_trace(&trace, sys, model, tie_tol)?;
    let grad_tol = setup.settings.grad_tol;
    let all_green = failure.is_none() && report.all_green(grad_tol);

    let stress = scenario.stress_strain_enabled();
    if stress {
        let curve = stress_strain(&trace, sys, model, tie_tol)?;
        output::write_file(&dir, "stress_strain.csv", &output::stress_strain_csv(&curve))?;
        if let Some(p) = curve.peak() {
            info!("peak stress {:.6e} at strain {:.4}", p.stress, p.strain);
        }
    }
    let crack = if sys.dimension() == 2 {
        Some(CrackSummary::from(&classify_crack(&trace, sys, model)?))
    } else {
        None
    };

    let verify = VerifyFile {
        scenario: scenario.name.clone(),
        truncated: failure.is_some(),
        error: failure.as_ref().map(|e| e.to_string()),
        grad_tol,
        all_green,
        dirichlet_atoms: sys.dirichlet().to_vec(),
        driven_atoms: sys.driven().to_vec(),
        report: Some(report.clone()),
        crack: crack.clone(),
        stress_definition: stress.then_some(STRESS_DEFINITION),
    };
    output::write_file(&dir, "verify.json", &output::verify_json(&verify))?;

    println!(
        "{}: {} steps, dissipation {:.6e}, lift error {:.2e}, min slack {:.2e}, residual {:.2e}{}",
        scenario.name,
        report.steps,
        report.dissipation_sum,
        report.lift_identity_max_error,
        report.per_step_inequality_min_slack,
        report.inclusion_residual_max,
        crack.map(|c| format!(", crack {}", c.geometry)).unwrap_or_default()
    );
    println!("wrote {}", dir.display());

    if let Some(e) = failure {
        eprintln!("error: {e}; trace truncated");
        return Ok(ExitCode::from(2));
    }
    if !all_green {
        eprintln!("verification failed, see {}", dir.join("verify.json").display());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_tau(text: &str) -> Result<f64> {
    let bad = || Error::InvalidConfiguration(format!("cannot read time step {text:?}"));
    let v = match text.trim().split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            a / b
        }
        None => text.trim().parse().map_err(|_| bad())?,
    };
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

fn cmd_tau_study(path: &Path, taus: &[String], out: Option<PathBuf>) -> Result<ExitCode> {
    let scenario = parse_scenario(path)?;
    let mut taus = taus.iter().map(|t| parse_tau(t)).collect::<Result<Vec<f64>>>()?;
    taus.sort_by(|a, b| b.total_cmp(a));
    let dir = out_dir(&scenario, out);
    let report = refine_tau_study(&taus, |tau| {
        let mut s = scenario.with_tau(tau);
        s.validate()?;
        s.build()?.run().map_err(|f| f.error)
    })?;
    output::write_file(&dir, "tau_study.csv", &output::tau_study_csv(&report))?;
    for r in &report.rows {
        match r.sup_distance {
            Some(d) => println!("tau {:.6e}: {} steps, sup distance {:.6e}", r.tau, r.steps, d),
            None => println!("tau {:.6e}: {} steps", r.tau, r.steps),
        }
    }
    if !report.distances_decrease() {
        warn!("distances between successive refinements do not decrease");
    }
    println!("wrote {}", dir.join("tau_study.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_presets(action: PresetAction) -> Result<ExitCode> {
    match action {
        PresetAction::List => {
            for name in PRESET_NAMES {
                println!("{name}");
            }
        }
        PresetAction::Emit { name } => {
            let s = preset(&name).ok_or_else(|| {
                Error::InvalidConfiguration(format!("unknown preset {name:?}; try `atomfrac presets list`"))
            })?;
            print!("{}", write_scenario(&s)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
