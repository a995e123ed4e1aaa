use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use strainsim::checks;
use strainsim::scenarios::{self, Mode, ScenarioRun, ScenarioSpec};

#[derive(Parser)]
#[command(name = "strainsim", version, about = "Soft-arm scenarios: closed-loop runs, workspace clouds and self-checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write trajectory CSVs and metrics.json.
    Run {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// precomputed | online | two_phase
        #[arg(long)]
        mode: Option<Mode>,
        /// `param=a:b:n` or `param=v1,v2,...`; one run per value.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Tip positions of static equilibria under random admissible tensions.
    Workspace {
        spec: PathBuf,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the property suites (and the behavioral analogs with --all).
    Check {
        #[arg(long)]
        all: bool,
    },
}

fn summarize(run: &ScenarioRun) {
    let m = &run.metrics;
    for s in &m.segments {
        let bands: Vec<String> = s
            .metrics
            .bands
            .iter()
            .map(|b| match b.time_to_band {
                Some(t) => format!("{:.0}mm@{t:.3}s", b.radius * 1e3),
                None => format!("{:.0}mm@-", b.radius * 1e3),
            })
            .collect();
        println!(
            "window {:>3} target {} {:?} {:>5.1} s  final {:.2} mm  rms {:.2} mm  {}{}{}",
            s.index,
            s.target,
            s.phase,
            s.window,
            s.metrics.final_error * 1e3,
            s.metrics.rms_error * 1e3,
            bands.join(" "),
            if s.admissible { "" } else { "  inadmissible reference" },
            s.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default(),
        );
    }
    if let Some(st) = &m.strike {
        println!(
            "strike at t = {:.4} s: closest {:.1} mm at {:.3} s, {}",
            st.t_strike,
            st.closest_distance * 1e3,
            st.closest_time,
            if st.reached { "reached" } else { "missed" }
        );
    }
}

fn run_one(spec: &ScenarioSpec, mode: Option<Mode>, out: &Path) -> Result<bool, String> {
    let run = scenarios::run_scenario(spec, mode).map_err(|e| e.to_string())?;
    scenarios::write_outputs(&run, out).map_err(|e| e.to_string())?;
    summarize(&run);
    Ok(run.metrics.completed)
}

fn run(spec_path: &Path, out: &Path, seed: Option<u64>, mode: Option<Mode>, sweep: Option<&str>) -> Result<bool, String> {
    let mut spec = ScenarioSpec::load(spec_path).map_err(|e| e.to_string())?;
    if let Some(s) = seed {
        spec.sim.seed = s;
    }
    let Some(sweep) = sweep else {
        return run_one(&spec, mode, out);
    };
    let (param, range) = sweep.split_once('=').ok_or("sweep takes `param=range`")?;
    let values = scenarios::parse_range(range).map_err(|e| e.to_string())?;
    let specs = values
        .iter()
        .map(|&v| {
            let mut s = spec.clone();
            s.set_param(param, v).map(|_| (v, s))
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let outcomes: Vec<(f64, Result<bool, String>)> = specs
        .par_iter()
        .map(|(v, s)| (*v, run_one(s, mode, &out.join(format!("{param}={v}")))))
        .collect();
    let mut ok = true;
    for (v, res) in outcomes {
        match res {
            Ok(done) => {
                ok &= done;
                println!("{param}={v}: {}", if done { "completed" } else { "incomplete" });
            }
            Err(e) => {
                ok = false;
                println!("{param}={v}: {e}");
            }
        }
    }
    Ok(ok)
}

fn workspace(spec_path: &Path, samples: usize, out: &Path) -> Result<(), String> {
    let spec = ScenarioSpec::load(spec_path).map_err(|e| e.to_string())?;
    let points = scenarios::sample_workspace(&spec, samples).map_err(|e| e.to_string())?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    std::fs::write(out.join("workspace.csv"), scenarios::workspace_csv(&points)).map_err(|e| e.to_string())?;
    println!("{} of {samples} samples solved", points.len());
    Ok(())
}

fn check(all: bool) -> bool {
    let mut suites = checks::property_suites();
    if all {
        suites.push(checks::behavioral_suite());
    }
    let mut ok = true;
    for s in &suites {
        let out = s.execute();
        ok &= out.passed();
        println!("{}", out.summary());
    }
    ok
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { spec, out, seed, mode, sweep } => run(&spec, &out, seed, mode, sweep.as_deref()),
        Command::Workspace { spec, samples, out } => workspace(&spec, samples, &out).map(|_| true),
        Command::Check { all } => Ok(check(all)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
