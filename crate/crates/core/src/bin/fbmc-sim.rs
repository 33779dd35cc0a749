use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbmc_thp::config::{parse_designs, SimConfig};
use fbmc_thp::sim::Simulator;
use fbmc_thp::{Error, Result};

/// FBMC/OQAM link-level simulator: MMSE DFE (uplink) and dual THP (downlink).
#[derive(Parser)]
#[command(name = "fbmc-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (`key = value` lines); defaults to the desk-scale setup.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated designs, e.g. `dfe-ul,thp-sum`.
    #[arg(long)]
    designs: Option<String>,
    /// Worker threads for `sweep` (0 = all cores).
    #[arg(long, default_value_t = 0)]
    parallel: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Dump prototype, channel and filter sets of one channel realization.
    Design {
        #[command(flatten)]
        common: Common,
        /// Channel index.
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// Design Eb/N0 in dB.
        #[arg(long, default_value_t = 15.0)]
        ebn0: f64,
    },
    /// Run the cells of one channel at one Eb/N0.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long)]
        ebn0: f64,
    },
    /// Run the full grid and write the result CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<SimConfig> {
    let mut cfg = match &common.config {
        Some(p) => SimConfig::from_file(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &common.designs {
        cfg.designs = parse_designs(d)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn design(common: &Common, channel: usize, ebn0: f64) -> Result<()> {
    let cfg = load(common)?;
    let dir = cfg.out.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let sim = Simulator::new(cfg)?;
    let ctx = sim.channel_context(channel)?;
    let nv = sim.noise_variance(ebn0);
    sim.prototype().write_csv(&dir.join("prototype.csv"))?;
    ctx.channel.write_csv(&dir.join(format!("channel_{channel}.csv")))?;
    for &d in &sim.config().designs {
        let path = dir.join(format!("{d}.csv"));
        if d.is_downlink() {
            let dl = sim.design_dl(&ctx, d, nv)?;
            if dl.exceeds_power_budget() {
                eprintln!(
                    "warning: {d}: transmit power {:.6} exceeds M_u = {}",
                    dl.transmit_power(),
                    dl.filters.len()
                );
            }
            dl.write_csv(&path)?;
            println!("{d}: mean MSE {:.6e}, power {:.4}", dl.mean_mse(), dl.transmit_power());
        } else {
            let ul = sim.design_ul(&ctx, d, nv)?;
            ul.write_csv(&path)?;
            println!("{d}: mean MSE {:.6e}", ul.mean_mse());
        }
    }
    let lat = sim.latencies();
    println!(
        "latency: linear {} feedback {}; filters written to {}",
        lat.linear,
        lat.feedback,
        dir.display()
    );
    Ok(())
}

fn run(common: &Common, channel: usize, ebn0: f64) -> Result<()> {
    let mut cfg = load(common)?;
    cfg.ebn0_db = vec![ebn0];
    let out = cfg.out.clone();
    let sim = Simulator::new(cfg)?;
    let ctx = sim.channel_context(channel)?;
    let cells = sim
        .config()
        .designs
        .iter()
        .map(|&d| sim.run_cell(&ctx, d, ebn0))
        .collect::<Result<Vec<_>>>()?;
    for c in &cells {
        println!(
            "{:<14} ber {:.4e}  mse analytic {:.4e}  empirical {:.4e}",
            c.design,
            c.ber(),
            c.mse_analytic,
            c.mse_empirical()
        );
    }
    let mut res = sim.aggregate(&[cells]);
    res.header.push(format!("channel={channel}"));
    res.write_csv(&out)
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let out = cfg.out.clone();
    let sim = Simulator::new(cfg)?;
    let start = std::time::Instant::now();
    let res = sim.sweep(common.parallel)?;
    res.write_csv(&out)?;
    let names: Vec<&str> = sim.config().designs.iter().map(|d| d.name()).collect();
    eprintln!(
        "{} rows ({}) written to {} in {:.1} s",
        res.rows.len(),
        names.join(","),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Design { common, channel, ebn0 } => design(common, *channel, *ebn0),
        Command::Run { common, channel, ebn0 } => run(common, *channel, *ebn0),
        Command::Sweep { common } => sweep(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
