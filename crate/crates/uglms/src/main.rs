use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uglms::harness::{
    bench_selection, run_grid, run_montecarlo, run_rht_compare, run_single, ExperimentConfig,
};

/// Adaptive SAR ADC linearity testing: estimate capacitor mismatch online
/// and reconstruct DNL/INL from the converged model.
#[derive(Parser)]
#[command(name = "uglms", version, about)]
struct Cli {
    /// Flat key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Experiment seed; every output is a pure function of (config, seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for data files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct CommonOverrides {
    /// Device resolution in bits.
    #[arg(long)]
    bits: Option<u32>,
    /// Input-referred noise in LSB RMS.
    #[arg(long)]
    noise: Option<f64>,
    /// Relative standard deviation of one unit capacitor.
    #[arg(long)]
    sigma_unit: Option<f64>,
    /// Iteration budget.
    #[arg(long)]
    iterations: Option<u32>,
    /// Conversions per sweep.
    #[arg(long)]
    samples: Option<u32>,
    /// Overlap selection with the running sweep.
    #[arg(long)]
    pipelined: bool,
    /// Stop early once every predicted edge std is at or below this (LSB).
    #[arg(long)]
    epsilon_p: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// One device: reconstruct INL/DNL and export curves plus error traces.
    Single {
        #[command(flatten)]
        common: CommonOverrides,
    },
    /// Convergence traces while varying resolution, sweep size, or noise.
    Grid {
        #[command(flatten)]
        common: CommonOverrides,
        /// Which parameter to vary: resolution, samples, or noise.
        #[arg(long)]
        axis: Option<String>,
        /// Resolution list for the resolution axis.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<u32>>,
        /// Sweep size list for the samples axis.
        #[arg(long, value_delimiter = ',')]
        sample_counts: Option<Vec<u32>>,
        /// Noise list for the noise axis.
        #[arg(long, value_delimiter = ',')]
        noise_levels: Option<Vec<f64>>,
    },
    /// Independent devices: correlation of estimated vs reference peak INL.
    Montecarlo {
        #[command(flatten)]
        common: CommonOverrides,
        /// Number of devices.
        #[arg(long)]
        devices: Option<u32>,
        /// Classification limit in LSB.
        #[arg(long)]
        pass_limit: Option<f64>,
    },
    /// Selection-cost scaling across resolutions.
    Bench {
        #[command(flatten)]
        common: CommonOverrides,
        /// Resolutions to benchmark.
        #[arg(long, value_delimiter = ',')]
        resolutions: Option<Vec<u32>>,
    },
    /// Adaptive estimate vs a full ramp histogram test on the same device.
    Rht {
        #[command(flatten)]
        common: CommonOverrides,
        /// Histogram hits per code.
        #[arg(long)]
        hpc: Option<u32>,
    },
}

fn build_config(cli: &Cli) -> uglms::Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    let common = match &cli.command {
        Command::Single { common } => common,
        Command::Grid { common, .. } => common,
        Command::Montecarlo { common, .. } => common,
        Command::Bench { common, .. } => common,
        Command::Rht { common, .. } => common,
    };
    if let Some(bits) = common.bits {
        config.bits = Some(bits);
    }
    if let Some(noise) = common.noise {
        config.noise_rms = noise;
    }
    if let Some(sigma) = common.sigma_unit {
        config.sigma_unit = Some(sigma);
    }
    if let Some(iterations) = common.iterations {
        config.iterations = Some(iterations);
    }
    if let Some(samples) = common.samples {
        config.samples = Some(samples);
    }
    if common.pipelined {
        config.pipelined = true;
    }
    if let Some(eps) = common.epsilon_p {
        config.epsilon_p = Some(eps);
    }
    match &cli.command {
        Command::Grid { axis, resolutions, sample_counts, noise_levels, .. } => {
            if let Some(axis) = axis {
                config.set("axis", axis)?;
            }
            if let Some(list) = resolutions {
                config.resolutions = Some(list.clone());
            }
            if let Some(list) = sample_counts {
                config.sample_counts = Some(list.clone());
            }
            if let Some(list) = noise_levels {
                config.noise_levels = Some(list.clone());
            }
        }
        Command::Montecarlo { devices, pass_limit, .. } => {
            if let Some(devices) = devices {
                config.devices = *devices;
            }
            if let Some(limit) = pass_limit {
                config.pass_limit = *limit;
            }
        }
        Command::Bench { resolutions, .. } => {
            if let Some(list) = resolutions {
                config.resolutions = Some(list.clone());
            }
        }
        Command::Rht { hpc, .. } => {
            if let Some(hpc) = hpc {
                config.hits_per_code = *hpc;
            }
        }
        Command::Single { .. } => {}
    }
    Ok(config)
}

fn run(cli: &Cli) -> uglms::Result<()> {
    let config = build_config(cli)?;
    match &cli.command {
        Command::Single { .. } => run_single(&config).map(|_| ()),
        Command::Grid { .. } => run_grid(&config).map(|_| ()),
        Command::Montecarlo { .. } => run_montecarlo(&config).map(|_| ()),
        Command::Bench { .. } => bench_selection(&config).map(|_| ()),
        Command::Rht { .. } => run_rht_compare(&config).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
