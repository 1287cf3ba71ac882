use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use pushcen::config::{ExperimentConfig, Method};
use pushcen::experiment::{ablation_report, cost_report, run_matrix, MatrixSpec, ResultsTable};
use pushcen::params::LayerLayout;
use pushcen::sim::topology::TopologySpec;
use pushcen::sim::{self, write_manifest};
use pushcen::wcp::{comm_cost_bits, ValueWidth};

/// Exit status for a failed conservation or perturbation check.
const INVARIANT_EXIT: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "pushcen", version, about = "Centroid-compressed push-sum gossip learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write its metrics and manifest.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run methods × alphas × seeds and tabulate the results.
    Matrix {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_values = ["pushcen", "async-dfedavg", "independent"])]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.4, 1.0])]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        /// Also write each cell's per-tick metrics.
        #[arg(long)]
        metrics: bool,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare the full protocol against its no-regularizer and no-buffer variants.
    Ablate {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4])]
        seeds: Vec<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print per-push message sizes as JSON.
    Cost {
        #[command(flatten)]
        overrides: Overrides,
        /// Cost a single compressible layer of this many weights instead of the configured model.
        #[arg(long)]
        params: Option<usize>,
        /// Value width in bits (16, 32 or 64).
        #[arg(long)]
        bits: Option<u32>,
    },
    /// Run the invariant checks for the configuration.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the configuration, with defaults filled in, as TOML.
    ShowConfig {
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Buffer capacity; 0 means unbounded.
    #[arg(long)]
    buffer_limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    delayed_frac: Option<f64>,
    /// Expected number of activations over the run.
    #[arg(long)]
    events: Option<u64>,
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    no_buffer: bool,
}

impl Overrides {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = self.alpha {
            c.data.alpha = v;
        }
        if let Some(v) = self.clients {
            c.data.clients = v;
        }
        if let Some(v) = self.fanout {
            c.topology = TopologySpec::RandomGossip { fanout: v };
        }
        if let Some(v) = self.clusters {
            c.trainer.clusters = v;
        }
        if let Some(v) = self.lambda {
            c.trainer.lambda = v;
        }
        if let Some(v) = self.epochs {
            c.trainer.epochs = v;
        }
        if let Some(v) = self.buffer_limit {
            c.buffer.capacity = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.delayed_frac {
            c.schedule.delayed_fraction = v;
        }
        if let Some(v) = self.events {
            c.schedule.events = v;
        }
        c.ablation.no_reg |= self.no_reg;
        c.ablation.no_buffer |= self.no_buffer;
        c.validate()?;
        Ok(c)
    }
}

fn value_width(bits: u32) -> anyhow::Result<ValueWidth> {
    Ok(match bits {
        16 => ValueWidth::B16,
        32 => ValueWidth::B32,
        64 => ValueWidth::B64,
        _ => bail!("value width must be 16, 32 or 64 bits, got {bits}"),
    })
}

fn create_dir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn run_one(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<ExitCode> {
    create_dir(out)?;
    info!("running {} seed {} ({})", cfg.method, cfg.seed, cfg.hash());
    let log = sim::run(cfg)?;
    log.write_csv(&out.join("metrics.csv"))?;
    write_manifest(&out.join("manifest.json"), cfg, &sim::plan_for(cfg)?, &log.summary)?;
    let s = &log.summary;
    println!(
        "{}: final mean accuracy {:.4} (client sd {:.4}), {} activations, {} bytes sent, max mass drift {:.2e}",
        cfg.method, s.final_mean_acc, s.final_acc_sd, s.activations, s.cum_bytes, s.max_mass_drift
    );
    if let Some(w) = &s.stepsize_warning {
        eprintln!("warning: {w}");
    }
    Ok(ExitCode::SUCCESS)
}

fn matrix(spec: &MatrixSpec, metrics: bool, threads: Option<usize>, out: &Path) -> anyhow::Result<ExitCode> {
    create_dir(out)?;
    info!("running {} cells", spec.cells().len());
    let outcomes = run_matrix(spec, threads)?;
    let mut invariant_failed = false;
    for o in &outcomes {
        let stem = format!("{}_a{}_s{}", o.config.method, o.config.data.alpha, o.config.seed);
        match &o.result {
            Ok(log) => {
                write_manifest(&out.join(format!("{stem}.json")), &o.config, &sim::plan_for(&o.config)?, &log.summary)?;
                if metrics {
                    log.write_csv(&out.join(format!("{stem}.csv")))?;
                }
            }
            Err(e) => {
                invariant_failed |= e.is_invariant();
                eprintln!("{stem}: {e}");
            }
        }
    }
    let table = ResultsTable::from_outcomes(&outcomes);
    fs::write(out.join("results.csv"), table.to_csv()?)?;
    let text = table.to_text();
    fs::write(out.join("results.txt"), &text)?;
    print!("{text}");
    Ok(if invariant_failed {
        ExitCode::from(INVARIANT_EXIT)
    } else if table.is_partial() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn ablate(base: &ExperimentConfig, seeds: &[u64], threads: Option<usize>, out: &Path) -> anyhow::Result<ExitCode> {
    create_dir(out)?;
    let report = ablation_report(base, seeds, threads)?;
    let text = report.to_text();
    fs::write(out.join("ablation.txt"), &text)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(ExitCode::SUCCESS)
}

fn cost(cfg: &ExperimentConfig, params: Option<usize>, bits: Option<u32>) -> anyhow::Result<ExitCode> {
    let mut cfg = cfg.clone();
    if let Some(b) = bits {
        cfg.trainer.value_bits = value_width(b)?;
    }
    let json = match params {
        Some(n) => {
            let layout = LayerLayout::single("weight", n, true)?;
            let cost = comm_cost_bits(&layout, cfg.trainer.clusters, cfg.trainer.value_bits)?;
            serde_json::json!({
                "params": n,
                "clusters": cfg.trainer.clusters,
                "value_bits": cfg.trainer.value_bits.bits(),
                "predicted_bits": cost,
            })
        }
        None => serde_json::to_value(cost_report(&cfg)?)?,
    };
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(ExitCode::SUCCESS)
}

fn verify(cfg: &ExperimentConfig) -> anyhow::Result<ExitCode> {
    let checks = pushcen::verify::verify(cfg)?;
    for c in &checks {
        println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(if checks.iter().all(|c| c.pass) { ExitCode::SUCCESS } else { ExitCode::from(INVARIANT_EXIT) })
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { overrides, out } => run_one(&overrides.load()?, &out),
        Command::Matrix { overrides, methods, alphas, seeds, metrics, threads, out } => {
            let spec = MatrixSpec { base: overrides.load()?, methods, alphas, seeds };
            matrix(&spec, metrics, threads, &out)
        }
        Command::Ablate { overrides, seeds, threads, out } => ablate(&overrides.load()?, &seeds, threads, &out),
        Command::Cost { overrides, params, bits } => cost(&overrides.load()?, params, bits),
        Command::Verify { overrides } => verify(&overrides.load()?),
        Command::ShowConfig { overrides } => {
            print!("{}", overrides.load()?.to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pushcen: {e:#}");
            let invariant = e.downcast_ref::<pushcen::Error>().is_some_and(pushcen::Error::is_invariant);
            if invariant {
                ExitCode::from(INVARIANT_EXIT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
