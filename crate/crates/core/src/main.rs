use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use gridfault::cli::{self, BenchArgs, FeederConfig, GenDataArgs, TrainArgs};
use gridfault::graph::GraphStrategy;
use gridfault::stgnn::Arch;

#[derive(Parser)]
#[command(
    name = "gridfault",
    about = "STGNN fault location for partially observable distribution feeders",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FeederArgs {
    /// Feeder description file
    #[arg(long, default_value = "crates/core/data/ieee123.feeder")]
    feeder: PathBuf,
    /// Sensor placement file
    #[arg(long, default_value = "crates/core/data/ieee123_placement.txt")]
    placement: PathBuf,
    /// Feeder configuration: default | green
    #[arg(long, default_value = "default", value_parser = parse_config)]
    config: FeederConfig,
}

fn parse_config(s: &str) -> Result<FeederConfig, String> {
    FeederConfig::parse(s).ok_or_else(|| format!("unknown config \"{s}\" (default|green)"))
}

fn parse_strategy_arg(s: &str) -> Result<GraphStrategy, String> {
    cli::parse_strategy(s).map_err(|e| e.to_string())
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    Arch::parse(s).ok_or_else(|| {
        format!("unknown arch \"{s}\" (gru|rgcn|rsage-mean|rsage-max|rgatv2)")
    })
}

#[derive(Subcommand)]
enum Command {
    /// Construct and export a sensor graph
    BuildGraph {
        #[command(flatten)]
        feeder: FeederArgs,
        /// Graph-forming strategy: measured-only | full
        #[arg(long, value_parser = parse_strategy_arg)]
        strategy: GraphStrategy,
        /// Edge-list output path
        #[arg(long, default_value = "graph.txt")]
        out: PathBuf,
        /// Optional DOT export for visual inspection
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Generate a surrogate dataset cache with normalized splits
    GenData {
        #[command(flatten)]
        feeder: FeederArgs,
        /// Simulation runs per (location, fault type) scenario
        #[arg(long, default_value_t = 4)]
        runs: usize,
        /// Comma-separated fault position buses (default: the shipped 25)
        #[arg(long, value_delimiter = ',')]
        locations: Option<Vec<String>>,
        /// Comma-separated fault types (default: all 11)
        #[arg(long, value_delimiter = ',')]
        types: Option<Vec<String>>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output prefix; writes <out>.{full,train,val,test}.bin
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
        /// Also export the raw runs as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Import externally simulated runs from CSV into a dataset cache
    ImportCsv {
        /// CSV file matching the documented schema
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output prefix; writes <out>.{full,train,val,test}.bin
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Train one architecture, optionally across several seeds
    Train {
        #[command(flatten)]
        feeder: FeederArgs,
        #[arg(long, value_parser = parse_arch)]
        arch: Arch,
        /// Graph strategy: measured-only | full
        #[arg(long, default_value = "measured-only", value_parser = parse_strategy_arg)]
        topology: GraphStrategy,
        /// Dataset prefix produced by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Seeds; more than one produces a sweep with a 90% CI
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Model size preset: paper | desk
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A .bin dataset file (for example dataset.test.bin)
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "report.json")]
        report: PathBuf,
    },
    /// Time measured-only vs full-topology training
    Bench {
        #[command(flatten)]
        feeder: FeederArgs,
        /// Comma-separated STGNN architectures
        #[arg(long, value_delimiter = ',', default_value = "rgcn", value_parser = parse_arch)]
        archs: Vec<Arch>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run every experiment described in a manifest
    Sweep {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::BuildGraph {
            feeder,
            strategy,
            out,
            dot,
        } => cli::cmd_build_graph(
            &feeder.feeder,
            &feeder.placement,
            strategy,
            feeder.config,
            &out,
            dot.as_deref(),
        ),
        Command::GenData {
            feeder,
            runs,
            locations,
            types,
            seed,
            out,
            csv,
        } => cli::cmd_gen_data(
            &feeder.feeder,
            &feeder.placement,
            feeder.config,
            &GenDataArgs {
                runs,
                locations,
                types,
                seed,
                csv,
            },
            &out,
        ),
        Command::ImportCsv { csv, seed, out } => cli::cmd_import_csv(&csv, seed, &out),
        Command::Train {
            feeder,
            arch,
            topology,
            data,
            seeds,
            epochs,
            lr,
            preset,
            out_dir,
        } => cli::cmd_train(
            &feeder.feeder,
            &feeder.placement,
            &TrainArgs {
                arch,
                strategy: topology,
                config: feeder.config,
                data_prefix: data,
                seeds,
                epochs,
                lr,
                preset,
                out_dir,
            },
        ),
        Command::Eval {
            checkpoint,
            data,
            report,
        } => cli::cmd_eval(&checkpoint, &data, &report),
        Command::Bench {
            feeder,
            archs,
            data,
            epochs,
            reps,
            preset,
            seed,
            out_dir,
        } => cli::cmd_bench(
            &feeder.feeder,
            &feeder.placement,
            &BenchArgs {
                archs,
                config: feeder.config,
                data_prefix: data,
                epochs,
                reps,
                preset,
                seed,
                out_dir,
            },
        ),
        Command::Sweep { manifest } => cli::cmd_sweep(&manifest),
    }
}
