use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use atomsense::config::ExperimentConfig;
use atomsense::experiments::{self, Check, SteadyStateReport};
use atomsense::io;

#[derive(Parser)]
#[command(name = "kalman-atomsense", version, about = "Kalman filtering for a simulated Faraday-rotation atomic sensor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment file; built-in lab defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the replicate count.
    #[arg(long, value_name = "N")]
    runs: Option<usize>,
    /// Print the report as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the sensor and write trajectory CSVs.
    Simulate(Common),
    /// Filter a trajectory file with the configured model.
    Filter {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV (t,Jy,Jz,q,p,E_true,z).
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Solve the discrete Riccati equation.
    SteadyState(Common),
    /// Fit the spin-noise spectrum; simulates a signal-free run unless --input is given.
    Spectroscopy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Consistency checks on filter output.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Filter CSV.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Trajectory CSV with the true waveform.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
    },
    /// OU waveform: coverage, NIS and steady-state checks over replicate seeds.
    ExperimentOu(Common),
    /// Stepped-sine waveform tracked by Wiener-process and polynomial models.
    ExperimentUnknown(Common),
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
            cfg.unknown.seed = s;
            cfg.spectroscopy.seed = s;
        }
        if let Some(n) = self.runs {
            anyhow::ensure!(n >= 1, "--runs must be at least 1");
            cfg.run.n_runs = n;
            cfg.unknown.n_runs = n;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.run.output_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

enum Failure {
    Threshold,
    Usage(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Usage(e)
    }
}

fn emit<T: Serialize>(common: &Common, path: &Path, report: &T) -> Result<()> {
    io::write_json(path, report)?;
    if common.json {
        print!("{}", io::to_json(report)?);
    }
    Ok(())
}

fn summarize(common: &Common, checks: &[Check]) {
    if common.json {
        return;
    }
    for c in checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{verdict}  {:<36} {:.6e}  [{:.3e}, {:.3e}]", c.name, c.value, c.low, c.high);
    }
}

fn verdict(passed: bool) -> Result<(), Failure> {
    if passed {
        Ok(())
    } else {
        Err(Failure::Threshold)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg);
            let seeds = atomsense_core::simulator::replicate(cfg.run.n_runs, cfg.run.seed)
                .map_err(anyhow::Error::from)?;
            let mut written = Vec::new();
            for (i, seed) in seeds.iter().enumerate() {
                let tr = experiments::simulate_from_config(&cfg, *seed)?;
                let name = if seeds.len() == 1 {
                    "trajectory.csv".to_owned()
                } else {
                    format!("trajectory_{i:03}.csv")
                };
                let path = out.join(name);
                io::write_trajectory_csv(&path, &tr)?;
                written.push(path);
            }
            if !c.json {
                for p in &written {
                    println!("wrote {}", p.display());
                }
            }
            Ok(())
        }
        Command::Filter { common, input } => {
            let cfg = common.load()?;
            let table = io::read_trajectory_csv(&input)?;
            let rows = experiments::filter_table(&cfg, &table)?;
            let path = common.out_dir(&cfg).join("filter.csv");
            io::write_filter_csv(&path, &rows)?;
            if !common.json {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::SteadyState(c) => {
            let cfg = c.load()?;
            let ss = experiments::steady_state_for(&cfg)?;
            let report = SteadyStateReport::from(&ss);
            emit(&c, &c.out_dir(&cfg).join("steady_state.json"), &report)?;
            if !c.json {
                println!(
                    "converged in {} iterations, residual {:.3e}",
                    report.iterations, report.residual
                );
            }
            Ok(())
        }
        Command::Spectroscopy { common, input } => {
            let cfg = common.load()?;
            let out = match &input {
                Some(p) => {
                    let t = io::read_trajectory_csv(p)?;
                    if t.t.len() < 2 {
                        return Err(anyhow::anyhow!("need at least two samples").into());
                    }
                    let delta = t.t[1] - t.t[0];
                    experiments::calibrate_record(&cfg, &t.z, delta)?
                }
                None => experiments::calibrate(&cfg)?,
            };
            let dir = common.out_dir(&cfg);
            let fit = out.fit.clone();
            io::write_psd_csv(&dir.join("psd.csv"), &out.psd, Some(&move |f| fit.model(f)))?;
            emit(&common, &dir.join("calibration.json"), &out.report)?;
            summarize(&common, &out.report.checks);
            verdict(out.report.passed)
        }
        Command::Validate {
            common,
            input,
            truth,
        } => {
            let cfg = common.load()?;
            let rows = io::read_filter_csv(&input)?;
            let truth = truth.as_deref().map(io::read_trajectory_csv).transpose()?;
            let report = experiments::validate_outputs(&cfg, truth.as_ref(), &rows)?;
            emit(&common, &common.out_dir(&cfg).join("validation.json"), &report)?;
            summarize(&common, &report.checks);
            verdict(report.passed)
        }
        Command::ExperimentOu(c) => {
            let cfg = c.load()?;
            let out = experiments::experiment_ou(&cfg)?;
            let dir = c.out_dir(&cfg);
            io::write_trajectory_csv(&dir.join("trajectory.csv"), &out.trajectory)?;
            io::write_filter_csv(&dir.join("filter.csv"), &out.rows)?;
            io::write_json(&dir.join("steady_state.json"), &out.report.steady_state)?;
            emit(&c, &dir.join("report.json"), &out.report)?;
            summarize(&c, &out.report.checks);
            verdict(out.report.passed)
        }
        Command::ExperimentUnknown(c) => {
            let cfg = c.load()?;
            let out = experiments::experiment_unknown(&cfg)?;
            let dir = c.out_dir(&cfg);
            let t = &out.tracks;
            io::write_columns_csv(
                &dir.join("tracks.csv"),
                &[
                    "t", "q_bar", "q_bar_dot", "q_wp", "q_pm", "q_dot_wp", "q_dot_pm", "bias_sq_wp",
                    "bias_sq_pm",
                ],
                &[
                    &t.t, &t.q_bar, &t.q_bar_dot, &t.q_wp, &t.q_pm, &t.q_dot_wp, &t.q_dot_pm,
                    &t.bias_sq_wp, &t.bias_sq_pm,
                ],
            )?;
            emit(&c, &dir.join("report.json"), &out.report)?;
            if !c.json {
                for m in [&out.report.wiener_process, &out.report.polynomial] {
                    println!(
                        "{:<15} bias²={:.3e} var={:.3e} mse={:.3e}",
                        m.model, m.bias_sq, m.variance, m.mse
                    );
                }
            }
            summarize(&c, &out.report.checks);
            verdict(out.report.passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
