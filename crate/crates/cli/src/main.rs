use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vcosim::config::{load_scenario, LoadError, ValidatedScenario, SAMPLE_SCENARIO};
use vcosim::orchestrator::{run, Degradation, RunOptions, CODE_VERSION};

const EXIT_INPUT: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "vcosim", about = "Platoon / cellular link co-simulator", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write CSV outputs plus run.json.
    Run {
        scenario: PathBuf,
        /// Override the scenario's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Pace the simulation to wall-clock time.
        #[arg(long)]
        realtime: bool,
        /// Add 400 ms to every control packet sent in [T0, T0+DUR].
        #[arg(long, num_args = 2, value_names = ["T0", "DUR"], allow_negative_numbers = true)]
        force_degradation: Option<Vec<f64>>,
    },
    /// Validate a scenario and print derived quantities.
    Check { scenario: PathBuf },
    /// Print the shipped sample scenario.
    Sample,
    /// Print the code version.
    Version,
}

fn load(path: &PathBuf) -> Result<ValidatedScenario, ExitCode> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(EXIT_INPUT));
        }
    };
    load_scenario(&text).map_err(|e| {
        match e {
            LoadError::Parse(p) => eprintln!("error: {}: {p}", path.display()),
            LoadError::Validation(v) => {
                eprintln!("error: {} is invalid:", path.display());
                for err in &v.0 {
                    eprintln!("  {err}");
                }
            }
        }
        ExitCode::from(EXIT_INPUT)
    })
}

fn check(s: &ValidatedScenario) {
    let cfg = s.config();
    println!("scenario: {}", if cfg.name.is_empty() { "(unnamed)" } else { &cfg.name });
    println!("seed: {}", cfg.seed);
    println!("duration: {} s in {} steps of {} s", cfg.duration, s.steps(), cfg.dt_sim);
    println!(
        "cadence (steps): control {}, channel {}, mobility log {}, metrics window {}",
        s.control_ticks(),
        s.channel_ticks(),
        s.mobility_ticks(),
        s.window_ticks()
    );
    println!("path: {} waypoints, length {:.3} m", cfg.path.len(), s.path().length());
    let cum: Vec<String> = s.path().cumulative_lengths().iter().map(|c| format!("{c:.3}")).collect();
    println!("  cumulative lengths: [{}]", cum.join(", "));
    println!("buildings: {}", cfg.buildings.len());
    for (i, b) in s.building_bboxes().iter().enumerate() {
        println!("  [{i}] bbox ({:.1}, {:.1}) .. ({:.1}, {:.1})", b.min.x, b.min.y, b.max.x, b.max.y);
    }
    let g = s.gnb();
    println!("gnb: ({:.1}, {:.1}) height {} m", g.position.x, g.position.y, g.height);
    println!("vehicles: {} of {} node slots (one reserved for the gNB)", cfg.vehicles.len(), cfg.max_nodes);
    for v in &cfg.vehicles {
        println!("  {} at s = {} m, {} m/s", v.id, v.initial_s, v.initial_speed);
    }
    for (id, gap) in s.initial_gaps() {
        println!("  initial gap in front of {id}: {gap:.3} m");
    }
    let profile = s.rsrp_profile(1.0);
    if let (Some(lo), Some(hi)) = (
        profile.iter().map(|p| p.2).min_by(f64::total_cmp),
        profile.iter().map(|p| p.2).max_by(f64::total_cmp),
    ) {
        let los = profile.iter().filter(|p| p.1).count() as f64 / profile.len() as f64;
        println!("shadow-free RSRP along the loop: {lo:.2} .. {hi:.2} dBm, {:.0} % line of sight", los * 100.0);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("{CODE_VERSION}");
            ExitCode::SUCCESS
        }
        Command::Sample => {
            print!("{SAMPLE_SCENARIO}");
            ExitCode::SUCCESS
        }
        Command::Check { scenario } => match load(&scenario) {
            Ok(s) => {
                check(&s);
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Run { scenario, seed, out, realtime, force_degradation } => {
            let s = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let degradation = match force_degradation.as_deref() {
                Some(&[t0, dur]) if t0.is_finite() && dur.is_finite() && t0 >= 0.0 && dur >= 0.0 => {
                    Some(Degradation::new(t0, dur))
                }
                Some(_) => {
                    eprintln!("error: --force-degradation needs two non-negative numbers T0 DUR");
                    return ExitCode::from(EXIT_INPUT);
                }
                None => None,
            };
            let opts = RunOptions { seed, realtime, degradation };
            match run(s, &out, &opts) {
                Ok(summary) => {
                    println!(
                        "run complete: {} steps, t = {} s, seed {}, outputs in {} ({:.2} s wall)",
                        summary.steps,
                        summary.end_t,
                        summary.seed,
                        out.display(),
                        summary.wall_time_s
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: run aborted: {e}");
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
