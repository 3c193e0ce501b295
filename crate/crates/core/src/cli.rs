//! Command implementations for the `gridfault` binary: graph export, data
//! generation, training/evaluation, the topology timing benchmark, and
//! manifest-driven sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    apply_normalizer, build_dataset, export_runs_csv, fit_normalizer, generate_runs, import_csv,
    split, DatagenConfig, Dataset, FaultType, SurrogateConfig, SurrogateContext, ALL_FAULT_TYPES,
};
use crate::feeder::{parse_feeder, parse_placement, FeederTopology, SensorPlacement, SwitchOp};
use crate::graph::{build_full_topology, build_measured_only, GraphStrategy, SensorGraph};
use crate::stgnn::{Arch, Model, ModelDims};
use crate::trainer::{
    benchmark_topologies, confidence_interval, evaluate, seed_sweep, train, EvalReport,
    TrainConfig, REPORT_CSV_HEADER,
};

/// Fault positions of the shipped IEEE 123-bus experiment.
pub const DEFAULT_FAULT_BUSES: [&str; 25] = [
    "7", "13", "18", "21", "25", "29", "35", "42", "47", "51", "53", "55", "57", "62", "65",
    "72", "80", "83", "86", "89", "93", "97", "99", "101", "108",
];

/// The two feeder configurations under study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeederConfig {
    Default,
    Green,
}

impl FeederConfig {
    pub fn keyword(self) -> &'static str {
        match self {
            FeederConfig::Default => "default",
            FeederConfig::Green => "green",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "default" => Some(FeederConfig::Default),
            "green" => Some(FeederConfig::Green),
            _ => None,
        }
    }

    /// Switch operations producing this configuration from the default.
    pub fn switch_ops(self) -> Vec<SwitchOp> {
        match self {
            FeederConfig::Default => Vec::new(),
            FeederConfig::Green => vec![SwitchOp::open("60", "160"), SwitchOp::close("54", "94")],
        }
    }
}

pub fn load_feeder(path: &Path, config: FeederConfig) -> Result<FeederTopology> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading feeder file {}", path.display()))?;
    let topology = parse_feeder(&text)?;
    let topology = topology.apply_switch_ops(&config.switch_ops())?;
    let diags = topology.validate();
    if diags.has_errors() {
        for d in &diags.items {
            eprintln!("feeder: {}", d.message);
        }
        bail!("feeder failed validation");
    }
    Ok(topology)
}

pub fn load_placement(path: &Path, topology: &FeederTopology) -> Result<SensorPlacement> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading placement file {}", path.display()))?;
    let placement = parse_placement(&text)?;
    placement.validate(topology)?;
    Ok(placement)
}

pub fn build_graph(
    topology: &FeederTopology,
    placement: &SensorPlacement,
    strategy: GraphStrategy,
) -> Result<SensorGraph> {
    Ok(match strategy {
        GraphStrategy::MeasuredOnly => build_measured_only(topology, placement)?,
        GraphStrategy::FullTopology => build_full_topology(topology, placement)?,
    })
}

/// Output root: GRIDFAULT_OUT overrides the manifest/flag directory.
pub fn resolve_out_dir(flag: &Path) -> PathBuf {
    match std::env::var_os("GRIDFAULT_OUT") {
        Some(root) => PathBuf::from(root).join(flag),
        None => flag.to_path_buf(),
    }
}

pub fn cmd_build_graph(
    feeder: &Path,
    placement_path: &Path,
    strategy: GraphStrategy,
    config: FeederConfig,
    out: &Path,
    dot: Option<&Path>,
) -> Result<()> {
    let topology = load_feeder(feeder, config)?;
    let placement = load_placement(placement_path, &topology)?;
    let graph = build_graph(&topology, &placement, strategy)?;
    fs::write(out, graph.export_edge_list())
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(dot_path) = dot {
        let name = format!("{}_{}", strategy.keyword().replace('-', "_"), config.keyword());
        fs::write(dot_path, graph.export_dot(&name))?;
    }
    println!(
        "{} graph ({}): {} nodes, {} edges, {} observed -> {}",
        strategy.keyword(),
        config.keyword(),
        graph.node_count(),
        graph.edges.len(),
        graph.observed_count(),
        out.display()
    );
    Ok(())
}

/// Scenario grid flags for data generation.
pub struct GenDataArgs {
    pub runs: usize,
    pub locations: Option<Vec<String>>,
    pub types: Option<Vec<String>>,
    pub seed: u64,
    pub csv: Option<PathBuf>,
}

pub fn datagen_config(args: &GenDataArgs) -> Result<DatagenConfig> {
    let locations = match &args.locations {
        Some(list) => list.clone(),
        None => DEFAULT_FAULT_BUSES.iter().map(|s| s.to_string()).collect(),
    };
    let fault_types = match &args.types {
        Some(list) => list
            .iter()
            .map(|s| {
                FaultType::parse(s).with_context(|| format!("unknown fault type \"{s}\""))
            })
            .collect::<Result<Vec<_>>>()?,
        None => ALL_FAULT_TYPES.to_vec(),
    };
    Ok(DatagenConfig {
        locations,
        fault_types,
        resistances: vec![0.1, 1.0, 10.0],
        runs_per_scenario: args.runs,
        load_range: (0.5, 1.3),
        surrogate: SurrogateConfig::default(),
        seed: args.seed,
    })
}

/// Generates the dataset cache plus normalized 70/15/15 split files.
pub fn cmd_gen_data(
    feeder: &Path,
    placement_path: &Path,
    config: FeederConfig,
    args: &GenDataArgs,
    out_prefix: &Path,
) -> Result<()> {
    let topology = load_feeder(feeder, config)?;
    let placement = load_placement(placement_path, &topology)?;
    let cfg = datagen_config(args)?;

    let ds = if let Some(csv_path) = &args.csv {
        // write runs as CSV alongside the cache
        let runs = generate_runs(&cfg, &topology, &placement)?;
        let ctx = SurrogateContext::new(&topology, &placement, cfg.surrogate.clone())?;
        let file = fs::File::create(csv_path)?;
        export_runs_csv(&runs, &ctx.sensor_buses, &ctx.sensor_phases, file)?;
        crate::datagen::dataset_from_runs(
            &cfg,
            &runs,
            ctx.sensor_buses.clone(),
            ctx.sensor_phases.clone(),
        )?
    } else {
        build_dataset(&cfg, &topology, &placement)?
    };

    let hist = ds.class_histogram();
    println!("windows: {}", ds.len());
    println!(
        "class histogram: no-fault {} ({:.1}%), faults {:?}",
        hist[0],
        100.0 * hist[0] as f64 / ds.len() as f64,
        &hist[1..]
    );

    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(7);
    let (train_raw, val_raw, test_raw) = split(&ds, (0.7, 0.15, 0.15), &mut rng)?;
    let stats = fit_normalizer(&train_raw)?;
    let train_ds = apply_normalizer(&train_raw, stats);
    let val_ds = apply_normalizer(&val_raw, stats);
    let test_ds = apply_normalizer(&test_raw, stats);

    let write = |suffix: &str, d: &Dataset| -> Result<u64> {
        let path = out_prefix.with_extension(format!("{suffix}.bin"));
        let mut buf = Vec::new();
        d.save(&mut buf)?;
        fs::write(&path, &buf).with_context(|| format!("writing {}", path.display()))?;
        let sum = crate::datagen::fnv1a(&buf);
        println!("{}: {} windows, checksum {sum:016x}", path.display(), d.len());
        Ok(sum)
    };
    write("full", &ds)?;
    write("train", &train_ds)?;
    write("val", &val_ds)?;
    write("test", &test_ds)?;
    Ok(())
}

pub fn cmd_import_csv(csv_path: &Path, seed: u64, out_prefix: &Path) -> Result<()> {
    let file = fs::File::open(csv_path)?;
    let ds = import_csv(file, seed)?;
    println!("imported {} windows from {}", ds.len(), csv_path.display());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let (train_raw, val_raw, test_raw) = split(&ds, (0.7, 0.15, 0.15), &mut rng)?;
    let stats = fit_normalizer(&train_raw)?;
    for (suffix, d) in [
        ("full", ds.clone()),
        ("train", apply_normalizer(&train_raw, stats)),
        ("val", apply_normalizer(&val_raw, stats)),
        ("test", apply_normalizer(&test_raw, stats)),
    ] {
        let path = out_prefix.with_extension(format!("{suffix}.bin"));
        let mut buf = Vec::new();
        d.save(&mut buf)?;
        fs::write(&path, &buf)?;
        println!("{}: {} windows", path.display(), d.len());
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file =
        fs::File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    Ok(Dataset::load(std::io::BufReader::new(file))?)
}

/// Model size presets: `paper` uses the published dimensions, `desk`
/// shrinks them for single-core experimentation.
pub fn dims_for_preset(preset: &str) -> Result<ModelDims> {
    match preset {
        "paper" => Ok(ModelDims::default()),
        "desk" => Ok(ModelDims::desk()),
        other => bail!("unknown preset \"{other}\" (expected paper|desk)"),
    }
}

pub struct TrainArgs {
    pub arch: Arch,
    pub strategy: GraphStrategy,
    pub config: FeederConfig,
    pub data_prefix: PathBuf,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub preset: String,
    pub out_dir: PathBuf,
}

pub fn cmd_train(feeder: &Path, placement_path: &Path, args: &TrainArgs) -> Result<()> {
    let topology = load_feeder(feeder, args.config)?;
    let placement = load_placement(placement_path, &topology)?;
    let graph = build_graph(&topology, &placement, args.strategy)?;
    let train_ds = load_dataset(&args.data_prefix.with_extension("train.bin"))?;
    let test_ds = load_dataset(&args.data_prefix.with_extension("test.bin"))?;

    let out_dir = resolve_out_dir(&args.out_dir);
    fs::create_dir_all(&out_dir)?;

    let mut cfg = TrainConfig::new(args.arch, args.strategy);
    cfg.dims = dims_for_preset(&args.preset)?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }

    let reports_path = out_dir.join("reports.csv");
    if !reports_path.exists() {
        fs::write(&reports_path, format!("{REPORT_CSV_HEADER}\n"))?;
    }

    let mut scores = Vec::new();
    for &seed in &args.seeds {
        let run_cfg = cfg.clone().with_seed(seed);
        let run_id = format!(
            "{}_{}_{}_s{seed}",
            args.arch.keyword(),
            args.strategy.keyword().replace('-', "_"),
            args.config.keyword()
        );
        println!("training {run_id} ({} epochs)...", run_cfg.epochs);
        let mut out = train::<f32>(&run_cfg, &train_ds, &graph)?;
        let mut report = evaluate(&mut out.model, &test_ds)?;
        report.train_seconds = out.train_seconds;
        println!(
            "{run_id}: macro F1 {:.4} in {:.1}s",
            report.macro_f1, out.train_seconds
        );

        let ck_path = out_dir.join(format!("{run_id}.ck"));
        let mut bytes = Vec::new();
        out.model.save(&mut bytes)?;
        fs::write(&ck_path, &bytes)?;
        fs::write(
            out_dir.join(format!("{run_id}.json")),
            out.model.sidecar_json(),
        )?;
        fs::write(
            out_dir.join(format!("{run_id}.report.json")),
            report.to_json(),
        )?;
        let mut loss_csv = String::from("epoch,step,loss\n");
        for pt in &out.loss_history {
            loss_csv.push_str(&format!("{},{},{}\n", pt.epoch, pt.step, pt.loss));
        }
        fs::write(out_dir.join(format!("{run_id}.loss.csv")), loss_csv)?;

        let row = report.to_csv_row(&run_id, args.arch, args.strategy, &train_ds.meta.fingerprint);
        let mut csv = fs::read_to_string(&reports_path)?;
        csv.push_str(&row);
        csv.push('\n');
        fs::write(&reports_path, csv)?;
        scores.push(report.macro_f1);
    }

    if scores.len() >= 2 {
        let (mean, half_width) = confidence_interval(&scores, 0.90)?;
        let sweep = serde_json::json!({
            "arch": args.arch.keyword(),
            "topology": args.strategy.keyword(),
            "config": args.config.keyword(),
            "seeds": args.seeds,
            "scores": scores,
            "mean": mean,
            "ci90_half_width": half_width,
        });
        let path = out_dir.join(format!(
            "sweep_{}_{}_{}.json",
            args.arch.keyword(),
            args.strategy.keyword().replace('-', "_"),
            args.config.keyword()
        ));
        fs::write(&path, serde_json::to_string_pretty(&sweep)?)?;
        println!("sweep: mean {mean:.4} +/- {half_width:.4} (90% CI) -> {}", path.display());
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data_file: &Path, report_path: &Path) -> Result<()> {
    let bytes = fs::read(checkpoint)?;
    let mut model = Model::<f32>::load(bytes.as_slice())?;
    let ds = load_dataset(data_file)?;
    let report = evaluate(&mut model, &ds)?;
    fs::write(report_path, report.to_json())?;
    println!(
        "macro F1 {:.4} over {} windows -> {}",
        report.macro_f1,
        report.samples,
        report_path.display()
    );
    Ok(())
}

pub struct BenchArgs {
    pub archs: Vec<Arch>,
    pub config: FeederConfig,
    pub data_prefix: PathBuf,
    pub epochs: usize,
    pub reps: usize,
    pub preset: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub fn cmd_bench(feeder: &Path, placement_path: &Path, args: &BenchArgs) -> Result<()> {
    let topology = load_feeder(feeder, args.config)?;
    let placement = load_placement(placement_path, &topology)?;
    let measured = build_graph(&topology, &placement, GraphStrategy::MeasuredOnly)?;
    let full = build_graph(&topology, &placement, GraphStrategy::FullTopology)?;
    let train_ds = load_dataset(&args.data_prefix.with_extension("train.bin"))?;
    let out_dir = resolve_out_dir(&args.out_dir);
    fs::create_dir_all(&out_dir)?;

    println!("arch            measured-only (s)    full (s)        ratio");
    let mut rows = Vec::new();
    for &arch in &args.archs {
        if !arch.is_stgnn() {
            bail!("bench compares STGNN architectures; got {}", arch.keyword());
        }
        let mut cfg = TrainConfig::new(arch, GraphStrategy::MeasuredOnly).with_seed(args.seed);
        cfg.dims = dims_for_preset(&args.preset)?;
        cfg.epochs = args.epochs;
        let cmp = benchmark_topologies::<f32>(&cfg, &train_ds, &measured, &full, args.reps)?;
        println!(
            "{:<15} {:>8.2} +/- {:>5.2} {:>8.2} +/- {:>5.2}  {:>6.2}x",
            cmp.arch, cmp.measured.mean, cmp.measured.std, cmp.full.mean, cmp.full.std, cmp.ratio
        );
        rows.push(cmp);
    }
    fs::write(
        out_dir.join("bench.json"),
        serde_json::to_string_pretty(&rows)?,
    )?;
    Ok(())
}

/// A full experiment description: data generation plus a list of
/// training runs over architectures, topologies and configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub feeder: PathBuf,
    pub placement: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub datagen: ManifestDatagen,
    pub trainings: Vec<ManifestTraining>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestDatagen {
    pub runs_per_scenario: usize,
    pub locations: Option<Vec<String>>,
    pub types: Option<Vec<String>>,
}

impl Default for ManifestDatagen {
    fn default() -> Self {
        ManifestDatagen {
            runs_per_scenario: 4,
            locations: None,
            types: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTraining {
    pub arch: String,
    pub topology: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    #[serde(default = "default_preset")]
    pub preset: String,
}

fn default_preset() -> String {
    "desk".to_string()
}

impl ExperimentManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: ExperimentManifest = toml::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.feeder.exists() {
            bail!("feeder file {} does not exist", self.feeder.display());
        }
        if !self.placement.exists() {
            bail!("placement file {} does not exist", self.placement.display());
        }
        for t in &self.trainings {
            Arch::parse(&t.arch).with_context(|| format!("unknown arch \"{}\"", t.arch))?;
            parse_strategy(&t.topology)?;
            FeederConfig::parse(&t.config)
                .with_context(|| format!("unknown config \"{}\"", t.config))?;
            if t.seeds.is_empty() {
                bail!("training entry has no seeds");
            }
        }
        Ok(())
    }

    /// Fingerprint tying outputs back to this manifest.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        format!("{:016x}", crate::datagen::fnv1a(json.as_bytes()))
    }
}

pub fn parse_strategy(s: &str) -> Result<GraphStrategy> {
    match s {
        "measured-only" => Ok(GraphStrategy::MeasuredOnly),
        "full" => Ok(GraphStrategy::FullTopology),
        other => bail!("unknown strategy \"{other}\" (expected measured-only|full)"),
    }
}

/// Runs every training in the manifest, generating datasets per feeder
/// configuration as needed.
pub fn cmd_sweep(manifest_path: &Path) -> Result<()> {
    let manifest = ExperimentManifest::load(manifest_path)?;
    let out_dir = resolve_out_dir(&manifest.out_dir);
    fs::create_dir_all(&out_dir)?;
    println!("manifest fingerprint: {}", manifest.fingerprint());

    let mut configs: Vec<FeederConfig> = manifest
        .trainings
        .iter()
        .map(|t| FeederConfig::parse(&t.config).expect("validated"))
        .collect();
    configs.dedup();

    for config in configs {
        let prefix = out_dir.join(format!("data_{}", config.keyword()));
        if !prefix.with_extension("train.bin").exists() {
            println!("generating {} dataset...", config.keyword());
            let gen_args = GenDataArgs {
                runs: manifest.datagen.runs_per_scenario,
                locations: manifest.datagen.locations.clone(),
                types: manifest.datagen.types.clone(),
                seed: manifest.seed,
                csv: None,
            };
            cmd_gen_data(&manifest.feeder, &manifest.placement, config, &gen_args, &prefix)?;
        }
    }

    for t in &manifest.trainings {
        let config = FeederConfig::parse(&t.config).expect("validated");
        let args = TrainArgs {
            arch: Arch::parse(&t.arch).expect("validated"),
            strategy: parse_strategy(&t.topology)?,
            config,
            data_prefix: out_dir.join(format!("data_{}", config.keyword())),
            seeds: t.seeds.clone(),
            epochs: t.epochs,
            lr: t.lr,
            preset: t.preset.clone(),
            out_dir: manifest.out_dir.clone(),
        };
        cmd_train(&manifest.feeder, &manifest.placement, &args)?;
    }
    Ok(())
}

/// Seed sweep entry point shared with the library tests.
pub fn run_seed_sweep(
    config: &TrainConfig,
    train_ds: &Dataset,
    eval_ds: &Dataset,
    graph: &SensorGraph,
    seeds: &[u64],
) -> Result<crate::trainer::SeedSweepResult> {
    Ok(seed_sweep::<f32>(config, train_ds, eval_ds, graph, seeds)?)
}

/// Convenience used by `eval` when a report needs a quick look.
pub fn summarize_report(report: &EvalReport) -> String {
    format!(
        "macro F1 {:.4}, weighted F1 {:.4}, {} samples",
        report.macro_f1, report.weighted_f1, report.samples
    )
}
