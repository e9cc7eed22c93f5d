use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocvkit::config::{RunConfig, DEFAULT_CONFIG_TOML};
use ocvkit::pipeline::{
    cmd_estimate_ocv, cmd_estimate_r0, cmd_hysteresis, cmd_simulate, EstimateOptions, Outputs,
    R0Source,
};
use ocvkit::resistance::PulseKind;
use ocvkit::Error;

#[derive(Parser)]
#[command(
    name = "ocvkit",
    version,
    about = "Low-rate OCV characterization and pulse resistance estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the low-rate OCV test on a simulated cell; writes log.csv and truth.toml.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's [output] dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the OCV model to a log; writes params.toml, table.csv and fit_report.toml.
    EstimateOcv {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Estimation defaults come from here when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        table_n: Option<usize>,
        /// SOC at the start of the discharge branch.
        #[arg(long)]
        s_initial: Option<f64>,
    },
    /// Estimate R0 from the pulse records of a log, or run a Monte Carlo study from a config.
    EstimateR0 {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        log: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Voltage noise std in V; log mode only.
        #[arg(long, default_value_t = 2e-4)]
        sigma: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        /// discharge_at_full, charge_at_empty or optimized_alternating.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        cycles: Option<usize>,
    },
    /// Split R0h into R0 and R_h and write both hysteresis series.
    Hysteresis {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        r0: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        s_initial: f64,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seed());
            let out = Outputs::new(out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir)))?;
            let sim = cmd_simulate(&cfg, seed, &out)?;
            println!("seed={seed}");
            println!("rows={}", sim.log.len());
            println!("modes={}", sim.log.mode_sequence());
            println!("out={}", out.dir.display());
        }
        Command::EstimateOcv {
            log,
            out,
            config,
            epsilon,
            table_n,
            s_initial,
        } => {
            let mut opts = EstimateOptions::default();
            if let Some(path) = config {
                let e = RunConfig::load(&path)?.estimation;
                opts = EstimateOptions {
                    epsilon: e.epsilon,
                    table_n: e.table_n,
                    s_initial: e.s_initial,
                };
            }
            opts.epsilon = epsilon.unwrap_or(opts.epsilon);
            opts.table_n = table_n.unwrap_or(opts.table_n);
            opts.s_initial = s_initial.unwrap_or(opts.s_initial);
            let out = Outputs::new(out)?;
            let (est, report) = cmd_estimate_ocv(&log, opts, &out)?;
            let p = &est.fit.params;
            println!("k={:?}", p.k);
            println!("r0h_Ohm={}", p.r0h_ohm);
            println!("rows={}", report.rows);
            println!("residual_rms_V={}", report.residual_rms_v);
            println!("condition_number={}", report.condition_number);
        }
        Command::EstimateR0 {
            log,
            config,
            out,
            sigma,
            seed,
            trials,
            kind,
            cycles,
        } => {
            let out = Outputs::new(out)?;
            let report = match (log, config) {
                (Some(path), _) => cmd_estimate_r0(
                    R0Source::Log {
                        path: &path,
                        sigma_v: sigma,
                    },
                    &out,
                )?,
                (None, Some(path)) => {
                    let cfg = RunConfig::load(&path)?;
                    let mut mc = cfg.monte_carlo_config(seed.unwrap_or(cfg.seed()), trials)?;
                    if kind.is_some() || cycles.is_some() {
                        let name = kind.unwrap_or_else(|| cfg.monte_carlo.pulse_kind.clone());
                        mc.kind =
                            PulseKind::parse(&name, cycles.unwrap_or(cfg.monte_carlo.cycles))?;
                    }
                    cmd_estimate_r0(R0Source::MonteCarlo(mc), &out)?
                }
                (None, None) => unreachable!("clap requires --log or --config"),
            };
            for (k, v) in &report.summary {
                println!("{k}={v}");
            }
        }
        Command::Hysteresis {
            log,
            params,
            r0,
            out,
            s_initial,
        } => {
            let out = Outputs::new(out)?;
            let rec = cmd_hysteresis(&log, &params, &r0, s_initial, &out)?;
            println!("r_h_Ohm={}", rec.r_h_ohm);
            println!("rms_divergence_V={}", rec.rms_divergence_v);
            println!("negative_r_h={}", rec.negative_r_h);
        }
        Command::DefaultConfig => print!("{DEFAULT_CONFIG_TOML}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("E_USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
