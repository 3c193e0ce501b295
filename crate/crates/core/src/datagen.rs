//! Labeled window datasets: a surrogate fault-signature generator, window
//! slicing, z-score normalization, group-wise splitting, CSV ingestion and
//! a binary cache.
//!
//! The surrogate replaces circuit simulation with a distance-attenuated
//! voltage-sag model: pre-fault levels follow local load, faulted phases
//! sag by depth(R_f) * exp(-beta * d) where d is the electrical distance
//! from sensor to fault, and ground faults add a small swell on healthy
//! phases. Gaussian measurement noise sits on top. Constants live in
//! [`SurrogateConfig`]; defaults give 10-60% sags against 0.2% noise.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederTopology, Phase, PhaseSet, SensorPlacement};
use crate::nn::Real;

pub const SAMPLES_PER_RUN: usize = 60;
pub const FAULT_ONSET: usize = 40;
pub const FAULT_DURATION: usize = 20;
pub const WINDOW_LEN: usize = 20;
pub const WINDOWS_PER_RUN: usize = 40;
pub const PHASES: usize = 3;
pub const CLASSES: usize = 26;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown bus \"{0}\"")]
    UnknownBus(String),
    #[error("fault type {fault_type} needs phases {needed} but bus {bus} has {available}")]
    FaultPhasesAbsent {
        fault_type: String,
        needed: String,
        bus: String,
        available: String,
    },
    #[error("fault resistance {0} is not in the configured depth table")]
    UnknownResistance(f64),
    #[error("bus {0} is unreachable from the fault location")]
    Unreachable(String),
    #[error("run length {0} is not {SAMPLES_PER_RUN} samples")]
    BadRunLength(usize),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios((f64, f64, f64)),
    #[error("csv schema error at row {row}: {msg}")]
    CsvSchema { row: usize, msg: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache format error: {0}")]
    Cache(String),
    #[error("dataset is empty")]
    Empty,
}

/// The 11 short-circuit fault classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultType {
    Ag,
    Bg,
    Cg,
    Ab,
    Bc,
    Ca,
    Abg,
    Bcg,
    Cag,
    Abc,
    Abcg,
}

pub const ALL_FAULT_TYPES: [FaultType; 11] = [
    FaultType::Ag,
    FaultType::Bg,
    FaultType::Cg,
    FaultType::Ab,
    FaultType::Bc,
    FaultType::Ca,
    FaultType::Abg,
    FaultType::Bcg,
    FaultType::Cag,
    FaultType::Abc,
    FaultType::Abcg,
];

impl FaultType {
    pub fn name(self) -> &'static str {
        match self {
            FaultType::Ag => "AG",
            FaultType::Bg => "BG",
            FaultType::Cg => "CG",
            FaultType::Ab => "AB",
            FaultType::Bc => "BC",
            FaultType::Ca => "CA",
            FaultType::Abg => "ABG",
            FaultType::Bcg => "BCG",
            FaultType::Cag => "CAG",
            FaultType::Abc => "ABC",
            FaultType::Abcg => "ABCG",
        }
    }

    pub fn parse(s: &str) -> Option<FaultType> {
        ALL_FAULT_TYPES.into_iter().find(|t| t.name() == s)
    }

    /// Phases carrying fault current.
    pub fn phases(self) -> PhaseSet {
        let s = match self {
            FaultType::Ag => "A",
            FaultType::Bg => "B",
            FaultType::Cg => "C",
            FaultType::Ab | FaultType::Abg => "AB",
            FaultType::Bc | FaultType::Bcg => "BC",
            FaultType::Ca | FaultType::Cag => "AC",
            FaultType::Abc | FaultType::Abcg => "ABC",
        };
        PhaseSet::from_str_strict(s).expect("static phase sets are valid")
    }

    pub fn ground_involved(self) -> bool {
        matches!(
            self,
            FaultType::Ag
                | FaultType::Bg
                | FaultType::Cg
                | FaultType::Abg
                | FaultType::Bcg
                | FaultType::Cag
                | FaultType::Abcg
        )
    }
}

/// One fully specified fault realization.
#[derive(Debug, Clone)]
pub struct FaultScenario {
    pub location: String,
    pub fault_type: FaultType,
    pub resistance: f64,
    /// Per-bus load multipliers aligned with `FeederTopology::buses`.
    pub load_multipliers: Vec<f64>,
}

/// Surrogate signal constants. Sag magnitude decreases monotonically with
/// both distance and fault resistance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateConfig {
    /// Nominal pre-fault voltage, per-unit.
    pub v0: f64,
    /// Load sensitivity of the pre-fault level.
    pub kappa_load: f64,
    /// Measurement noise standard deviation, per-unit.
    pub noise_sigma: f64,
    /// Spatial attenuation rate, per unit electrical distance.
    pub beta: f64,
    /// Hop radius of the local load neighborhood.
    pub load_radius_hops: u32,
    /// (resistance, sag depth at distance zero) pairs.
    pub depth_table: Vec<(f64, f64)>,
    /// Swell factor on healthy phases for ground-involved faults.
    pub swell: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            v0: 1.0,
            kappa_load: 0.05,
            noise_sigma: 0.002,
            beta: 0.5,
            load_radius_hops: 2,
            depth_table: vec![(0.1, 0.6), (1.0, 0.35), (10.0, 0.12)],
            swell: 0.03,
        }
    }
}

impl SurrogateConfig {
    pub fn depth(&self, resistance: f64) -> Result<f64, DataError> {
        self.depth_table
            .iter()
            .find(|(r, _)| (*r - resistance).abs() < 1e-12)
            .map(|(_, d)| *d)
            .ok_or(DataError::UnknownResistance(resistance))
    }
}

/// One simulated fault event: 60 ms of per-phase RMS voltages at every
/// sensor, fault onset at sample 40, duration 20 samples.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub run_id: u64,
    pub fault_bus: String,
    pub fault_type: FaultType,
    pub resistance: f64,
    /// [sensor][phase][t] flattened, missing phases held at zero.
    pub traces: Vec<f32>,
    pub n_sensors: usize,
}

impl RunRecord {
    pub fn value(&self, sensor: usize, phase: usize, t: usize) -> f32 {
        self.traces[(sensor * PHASES + phase) * SAMPLES_PER_RUN + t]
    }
}

/// One classification instance: a 20-step window of all sensors plus its
/// 26-class label (0 = no fault).
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// [sensor][phase][t] flattened, WINDOW_LEN steps.
    pub features: Vec<f32>,
    pub label: u8,
    /// (run id, window start) split-grouping key.
    pub group_key: (u64, u8),
}

impl WindowSample {
    pub fn value(&self, sensor: usize, phase: usize, t: usize) -> f32 {
        self.features[(sensor * PHASES + phase) * WINDOW_LEN + t]
    }
}

/// Per-channel z-score statistics fitted on a training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; PHASES],
    pub std: [f32; PHASES],
    /// Channels whose variance was zero and std clamped to one.
    pub clamped: [bool; PHASES],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub fingerprint: String,
}

/// A set of window samples plus the sensor layout they index into.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n_sensors: usize,
    pub sensor_buses: Vec<String>,
    /// Measured phases per sensor; unmeasured entries stay zero.
    pub sensor_phases: Vec<[bool; PHASES]>,
    /// Fault buses in label order; label k corresponds to index k-1.
    pub locations: Vec<String>,
    pub samples: Vec<WindowSample>,
    pub norm_stats: Option<NormStats>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; CLASSES];
        for s in &self.samples {
            hist[s.label as usize] += 1;
        }
        hist
    }

    /// FNV-1a over the serialized cache bytes.
    pub fn checksum(&self) -> u64 {
        let mut buf = Vec::new();
        self.save(&mut buf).expect("in-memory write");
        fnv1a(&buf)
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(a.wrapping_mul(0x9E3779B97F4A7C15) ^ splitmix(b)))
}

/// Precomputed topology-dependent pieces shared by all runs: sensor bus
/// indices, measured phases, and the local load neighborhoods.
pub struct SurrogateContext<'a> {
    topology: &'a FeederTopology,
    pub sensor_buses: Vec<String>,
    sensor_bus_idx: Vec<usize>,
    pub sensor_phases: Vec<[bool; PHASES]>,
    load_hoods: Vec<Vec<usize>>,
    pub config: SurrogateConfig,
}

impl<'a> SurrogateContext<'a> {
    pub fn new(
        topology: &'a FeederTopology,
        placement: &SensorPlacement,
        config: SurrogateConfig,
    ) -> Result<Self, DataError> {
        let graph = topology.closed_graph();
        let mut sensor_buses = Vec::new();
        let mut sensor_bus_idx = Vec::new();
        let mut sensor_phases = Vec::new();
        let mut load_hoods = Vec::new();
        for entry in &placement.entries {
            let idx = topology
                .bus_index(&entry.bus)
                .ok_or_else(|| DataError::UnknownBus(entry.bus.clone()))?;
            let phases = topology.buses[idx].phases;
            sensor_phases.push([
                phases.contains(Phase::A),
                phases.contains(Phase::B),
                phases.contains(Phase::C),
            ]);
            let hops = graph.hops_from(idx);
            let hood: Vec<usize> = (0..topology.buses.len())
                .filter(|&b| hops[b].is_some_and(|h| h <= config.load_radius_hops))
                .collect();
            load_hoods.push(hood);
            sensor_buses.push(entry.bus.clone());
            sensor_bus_idx.push(idx);
        }
        Ok(SurrogateContext {
            topology,
            sensor_buses,
            sensor_bus_idx,
            sensor_phases,
            load_hoods,
            config,
        })
    }

    /// Noise-free sag fraction seen by `sensor` for a fault at `dist`.
    fn sag(&self, depth: f64, dist: f64) -> f64 {
        depth * (-self.config.beta * dist).exp()
    }

    pub fn generate(
        &self,
        run_id: u64,
        scenario: &FaultScenario,
        rng: &mut ChaCha12Rng,
    ) -> Result<RunRecord, DataError> {
        let fault_idx = self
            .topology
            .bus_index(&scenario.location)
            .ok_or_else(|| DataError::UnknownBus(scenario.location.clone()))?;
        let fault_phases = scenario.fault_type.phases();
        let available = self.topology.buses[fault_idx].phases;
        if !fault_phases.is_subset_of(available) {
            return Err(DataError::FaultPhasesAbsent {
                fault_type: scenario.fault_type.name().to_string(),
                needed: fault_phases.to_string(),
                bus: scenario.location.clone(),
                available: available.to_string(),
            });
        }
        let depth = self.config.depth(scenario.resistance)?;
        assert_eq!(
            scenario.load_multipliers.len(),
            self.topology.buses.len(),
            "one load multiplier per bus"
        );

        let dist = self
            .topology
            .closed_graph()
            .dijkstra(fault_idx, &self.topology.segments);

        let n = self.sensor_buses.len();
        let mut traces = vec![0f32; n * PHASES * SAMPLES_PER_RUN];
        let cfg = &self.config;
        for (m, &bus_idx) in self.sensor_bus_idx.iter().enumerate() {
            let d = dist[bus_idx].ok_or_else(|| {
                DataError::Unreachable(self.sensor_buses[m].clone())
            })?;
            let hood = &self.load_hoods[m];
            let mean_load: f64 =
                hood.iter().map(|&b| scenario.load_multipliers[b]).sum::<f64>() / hood.len() as f64;
            let base = cfg.v0 * (1.0 - cfg.kappa_load * (mean_load - 0.9));
            let sag_level = base * (1.0 - self.sag(depth, d));
            let swell_level = base * (1.0 + cfg.swell * (-cfg.beta * d).exp());
            for p in 0..PHASES {
                if !self.sensor_phases[m][p] {
                    continue;
                }
                let phase = [Phase::A, Phase::B, Phase::C][p];
                let faulted = fault_phases.contains(phase);
                let swells = !faulted && scenario.fault_type.ground_involved();
                for t in 0..SAMPLES_PER_RUN {
                    let level = if t < FAULT_ONSET {
                        base
                    } else if faulted {
                        sag_level
                    } else if swells {
                        swell_level
                    } else {
                        base
                    };
                    let noise: f64 = if cfg.noise_sigma > 0.0 {
                        cfg.noise_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        0.0
                    };
                    traces[(m * PHASES + p) * SAMPLES_PER_RUN + t] = (level + noise) as f32;
                }
            }
        }
        Ok(RunRecord {
            run_id,
            fault_bus: scenario.location.clone(),
            fault_type: scenario.fault_type,
            resistance: scenario.resistance,
            traces,
            n_sensors: n,
        })
    }
}

/// Convenience wrapper building a one-off context.
pub fn generate_run(
    topology: &FeederTopology,
    placement: &SensorPlacement,
    scenario: &FaultScenario,
    config: SurrogateConfig,
    rng: &mut ChaCha12Rng,
) -> Result<RunRecord, DataError> {
    let ctx = SurrogateContext::new(topology, placement, config)?;
    ctx.generate(0, scenario, rng)
}

/// Slices one run into 40 overlapping windows with start offsets 1..=40.
/// Windows ending before the onset are labeled 0, the rest carry the
/// fault-location label, yielding an exact 20/20 split.
pub fn slice_windows(run: &RunRecord, fault_label: u8) -> Result<Vec<WindowSample>, DataError> {
    if run.traces.len() != run.n_sensors * PHASES * SAMPLES_PER_RUN {
        return Err(DataError::BadRunLength(
            run.traces.len() / (run.n_sensors * PHASES).max(1),
        ));
    }
    let mut out = Vec::with_capacity(WINDOWS_PER_RUN);
    for start in 1..=WINDOWS_PER_RUN {
        let mut features = vec![0f32; run.n_sensors * PHASES * WINDOW_LEN];
        for m in 0..run.n_sensors {
            for p in 0..PHASES {
                for t in 0..WINDOW_LEN {
                    features[(m * PHASES + p) * WINDOW_LEN + t] = run.value(m, p, start + t);
                }
            }
        }
        let label = if start + WINDOW_LEN - 1 < FAULT_ONSET {
            0
        } else {
            fault_label
        };
        out.push(WindowSample {
            features,
            label,
            group_key: (run.run_id, start as u8),
        });
    }
    Ok(out)
}

/// Scenario-grid configuration for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatagenConfig {
    /// Fault position buses in label order.
    pub locations: Vec<String>,
    pub fault_types: Vec<FaultType>,
    pub resistances: Vec<f64>,
    pub runs_per_scenario: usize,
    pub load_range: (f64, f64),
    pub surrogate: SurrogateConfig,
    pub seed: u64,
}

impl DatagenConfig {
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

/// Generates the scenario grid: locations x types x runs, cycling fault
/// resistance by run index and drawing load multipliers per run.
pub fn generate_runs(
    config: &DatagenConfig,
    topology: &FeederTopology,
    placement: &SensorPlacement,
) -> Result<Vec<RunRecord>, DataError> {
    let ctx = SurrogateContext::new(topology, placement, config.surrogate.clone())?;
    let mut runs = Vec::new();
    let mut run_id = 0u64;
    for (li, location) in config.locations.iter().enumerate() {
        for (ti, fault_type) in config.fault_types.iter().enumerate() {
            let scenario_idx = (li * config.fault_types.len() + ti) as u64;
            for r in 0..config.runs_per_scenario {
                let mut rng =
                    ChaCha12Rng::seed_from_u64(mix_seed(config.seed, scenario_idx, r as u64));
                let resistance = config.resistances[r % config.resistances.len()];
                let load_multipliers: Vec<f64> = (0..topology.buses.len())
                    .map(|_| rng.gen_range(config.load_range.0..config.load_range.1))
                    .collect();
                let scenario = FaultScenario {
                    location: location.clone(),
                    fault_type: *fault_type,
                    resistance,
                    load_multipliers,
                };
                runs.push(ctx.generate(run_id, &scenario, &mut rng)?);
                run_id += 1;
            }
        }
    }
    Ok(runs)
}

/// Windows every run and assembles the dataset.
pub fn dataset_from_runs(
    config: &DatagenConfig,
    runs: &[RunRecord],
    ctx_sensor_buses: Vec<String>,
    ctx_sensor_phases: Vec<[bool; PHASES]>,
) -> Result<Dataset, DataError> {
    let label_of: HashMap<&str, u8> = config
        .locations
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), (i + 1) as u8))
        .collect();
    let mut samples = Vec::with_capacity(runs.len() * WINDOWS_PER_RUN);
    for run in runs {
        let label = *label_of
            .get(run.fault_bus.as_str())
            .ok_or_else(|| DataError::UnknownBus(run.fault_bus.clone()))?;
        samples.extend(slice_windows(run, label)?);
    }
    Ok(Dataset {
        n_sensors: ctx_sensor_buses.len(),
        sensor_buses: ctx_sensor_buses,
        sensor_phases: ctx_sensor_phases,
        locations: config.locations.clone(),
        samples,
        norm_stats: None,
        meta: DatasetMeta {
            seed: config.seed,
            fingerprint: config.fingerprint(),
        },
    })
}

/// Full pipeline: scenario grid, surrogate runs, window slicing.
pub fn build_dataset(
    config: &DatagenConfig,
    topology: &FeederTopology,
    placement: &SensorPlacement,
) -> Result<Dataset, DataError> {
    let ctx = SurrogateContext::new(topology, placement, config.surrogate.clone())?;
    let sensor_buses = ctx.sensor_buses.clone();
    let sensor_phases = ctx.sensor_phases.clone();
    drop(ctx);
    let runs = generate_runs(config, topology, placement)?;
    dataset_from_runs(config, &runs, sensor_buses, sensor_phases)
}

/// Per-channel mean and standard deviation over measured entries of the
/// training split. Zero-variance channels clamp std to one.
pub fn fit_normalizer(train: &Dataset) -> Result<NormStats, DataError> {
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let mut sums = [0f64; PHASES];
    let mut counts = [0u64; PHASES];
    for s in &train.samples {
        for m in 0..train.n_sensors {
            for p in 0..PHASES {
                if !train.sensor_phases[m][p] {
                    continue;
                }
                for t in 0..WINDOW_LEN {
                    sums[p] += s.value(m, p, t) as f64;
                    counts[p] += 1;
                }
            }
        }
    }
    let mut mean = [0f32; PHASES];
    let mut sq = [0f64; PHASES];
    for p in 0..PHASES {
        mean[p] = if counts[p] > 0 {
            (sums[p] / counts[p] as f64) as f32
        } else {
            0.0
        };
    }
    for s in &train.samples {
        for m in 0..train.n_sensors {
            for p in 0..PHASES {
                if !train.sensor_phases[m][p] {
                    continue;
                }
                for t in 0..WINDOW_LEN {
                    let d = s.value(m, p, t) as f64 - mean[p] as f64;
                    sq[p] += d * d;
                }
            }
        }
    }
    let mut std = [1f32; PHASES];
    let mut clamped = [false; PHASES];
    for p in 0..PHASES {
        let var = if counts[p] > 0 {
            sq[p] / counts[p] as f64
        } else {
            0.0
        };
        if var > 0.0 {
            std[p] = (var.sqrt()) as f32;
        } else {
            clamped[p] = true;
            eprintln!("warning: channel {p} has zero variance; std clamped to 1");
        }
    }
    Ok(NormStats { mean, std, clamped })
}

/// Applies z-scoring to measured entries; unmeasured entries stay zero.
pub fn apply_normalizer(ds: &Dataset, stats: NormStats) -> Dataset {
    let mut out = ds.clone();
    for s in &mut out.samples {
        for m in 0..out.n_sensors {
            for p in 0..PHASES {
                if !out.sensor_phases[m][p] {
                    continue;
                }
                for t in 0..WINDOW_LEN {
                    let idx = (m * PHASES + p) * WINDOW_LEN + t;
                    s.features[idx] = (s.features[idx] - stats.mean[p]) / stats.std[p];
                }
            }
        }
    }
    out.norm_stats = Some(stats);
    out
}

/// Group-disjoint split: whole group keys are shuffled and allocated by
/// the given ratios, so no key ever spans partitions.
pub fn split(
    ds: &Dataset,
    ratios: (f64, f64, f64),
    rng: &mut ChaCha12Rng,
) -> Result<(Dataset, Dataset, Dataset), DataError> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if !(ratios.0 > 0.0 && ratios.1 >= 0.0 && ratios.2 >= 0.0 && (sum - 1.0).abs() < 1e-9) {
        return Err(DataError::BadRatios(ratios));
    }
    let mut keys: Vec<(u64, u8)> = ds.samples.iter().map(|s| s.group_key).collect();
    keys.sort_unstable();
    keys.dedup();
    // Fisher-Yates with the provided stream
    for i in (1..keys.len()).rev() {
        let j = rng.gen_range(0..=i);
        keys.swap(i, j);
    }
    let n = keys.len();
    let n_train = (n as f64 * ratios.0).round() as usize;
    let n_val = (n as f64 * ratios.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let assign: HashMap<(u64, u8), u8> = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let part = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            (k, part)
        })
        .collect();

    let mut parts: Vec<Vec<WindowSample>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for s in &ds.samples {
        parts[assign[&s.group_key] as usize].push(s.clone());
    }
    let mk = |samples: Vec<WindowSample>| Dataset {
        samples,
        ..ds.clone()
    };
    let mut it = parts.into_iter();
    Ok((
        mk(it.next().unwrap()),
        mk(it.next().unwrap()),
        mk(it.next().unwrap()),
    ))
}

// --- CSV interchange -------------------------------------------------------

const CSV_HEADER: [&str; 8] = [
    "run_id",
    "sensor_bus",
    "phase",
    "t_ms",
    "v_rms_pu",
    "fault_bus",
    "fault_type",
    "resistance_ohm",
];

/// One row per (run, sensor, measured phase, sample).
pub fn export_runs_csv<W: Write>(
    runs: &[RunRecord],
    sensor_buses: &[String],
    sensor_phases: &[[bool; PHASES]],
    w: W,
) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CSV_HEADER)?;
    for run in runs {
        for (m, bus) in sensor_buses.iter().enumerate() {
            for p in 0..PHASES {
                if !sensor_phases[m][p] {
                    continue;
                }
                let phase = ["A", "B", "C"][p];
                for t in 0..SAMPLES_PER_RUN {
                    wtr.write_record([
                        run.run_id.to_string(),
                        bus.clone(),
                        phase.to_string(),
                        t.to_string(),
                        run.value(m, p, t).to_string(),
                        run.fault_bus.clone(),
                        run.fault_type.name().to_string(),
                        run.resistance.to_string(),
                    ])?;
                }
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Rebuilds runs from CSV rows and windows them into a dataset. Sensors
/// appear in first-appearance order; fault locations are labeled in
/// natural bus order.
pub fn import_csv<R: Read>(reader: R, seed: u64) -> Result<Dataset, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    {
        let headers = rdr.headers()?.clone();
        for want in CSV_HEADER {
            if !headers.iter().any(|h| h == want) {
                return Err(DataError::CsvSchema {
                    row: 1,
                    msg: format!("missing column \"{want}\""),
                });
            }
        }
    }
    let idx_of = |headers: &csv::StringRecord, name: &str| {
        headers.iter().position(|h| h == name).unwrap()
    };
    let headers = rdr.headers()?.clone();
    let col = [
        idx_of(&headers, "run_id"),
        idx_of(&headers, "sensor_bus"),
        idx_of(&headers, "phase"),
        idx_of(&headers, "t_ms"),
        idx_of(&headers, "v_rms_pu"),
        idx_of(&headers, "fault_bus"),
        idx_of(&headers, "fault_type"),
        idx_of(&headers, "resistance_ohm"),
    ];

    let mut sensor_buses: Vec<String> = Vec::new();
    let mut sensor_of: HashMap<String, usize> = HashMap::new();
    let mut sensor_phases: Vec<[bool; PHASES]> = Vec::new();
    struct RunAcc {
        fault_bus: String,
        fault_type: FaultType,
        resistance: f64,
        values: HashMap<(usize, usize, usize), f32>,
    }
    let mut runs: Vec<(u64, RunAcc)> = Vec::new();
    let mut run_pos: HashMap<u64, usize> = HashMap::new();

    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let field = |c: usize| record.get(col[c]).unwrap_or("").trim().to_string();
        let run_id: u64 = field(0).parse().map_err(|_| DataError::CsvSchema {
            row,
            msg: format!("invalid run_id \"{}\"", field(0)),
        })?;
        let bus = field(1);
        let phase = match field(2).as_str() {
            "A" => 0usize,
            "B" => 1,
            "C" => 2,
            other => {
                return Err(DataError::CsvSchema {
                    row,
                    msg: format!("invalid phase \"{other}\""),
                })
            }
        };
        let t: usize = field(3).parse().map_err(|_| DataError::CsvSchema {
            row,
            msg: format!("invalid t_ms \"{}\"", field(3)),
        })?;
        if t >= SAMPLES_PER_RUN {
            return Err(DataError::CsvSchema {
                row,
                msg: format!("t_ms {t} out of range"),
            });
        }
        let v: f32 = field(4).parse().map_err(|_| DataError::CsvSchema {
            row,
            msg: format!("invalid v_rms_pu \"{}\"", field(4)),
        })?;
        let fault_bus = field(5);
        let fault_type = FaultType::parse(&field(6)).ok_or_else(|| DataError::CsvSchema {
            row,
            msg: format!("invalid fault_type \"{}\"", field(6)),
        })?;
        let resistance: f64 = field(7).parse().map_err(|_| DataError::CsvSchema {
            row,
            msg: format!("invalid resistance_ohm \"{}\"", field(7)),
        })?;

        let m = *sensor_of.entry(bus.clone()).or_insert_with(|| {
            sensor_buses.push(bus.clone());
            sensor_phases.push([false; PHASES]);
            sensor_buses.len() - 1
        });
        sensor_phases[m][phase] = true;

        let ri = *run_pos.entry(run_id).or_insert_with(|| {
            runs.push((
                run_id,
                RunAcc {
                    fault_bus: fault_bus.clone(),
                    fault_type,
                    resistance,
                    values: HashMap::new(),
                },
            ));
            runs.len() - 1
        });
        runs[ri].1.values.insert((m, phase, t), v);
    }
    if runs.is_empty() {
        return Err(DataError::Empty);
    }

    let n = sensor_buses.len();
    let mut records = Vec::with_capacity(runs.len());
    for (run_id, acc) in &runs {
        let mut traces = vec![0f32; n * PHASES * SAMPLES_PER_RUN];
        for (&(m, p, t), &v) in &acc.values {
            traces[(m * PHASES + p) * SAMPLES_PER_RUN + t] = v;
        }
        records.push(RunRecord {
            run_id: *run_id,
            fault_bus: acc.fault_bus.clone(),
            fault_type: acc.fault_type,
            resistance: acc.resistance,
            traces,
            n_sensors: n,
        });
    }

    let mut locations: Vec<String> = records.iter().map(|r| r.fault_bus.clone()).collect();
    locations.sort_by_key(|b| crate::feeder::bus_id_key(b));
    locations.dedup();
    let label_of: HashMap<&str, u8> = locations
        .iter()
        .enumerate()
        .map(|(i, b)| (b.as_str(), (i + 1) as u8))
        .collect();

    let mut samples = Vec::new();
    for run in &records {
        samples.extend(slice_windows(run, label_of[run.fault_bus.as_str()])?);
    }
    let fingerprint = format!("csv-{:016x}", fnv1a(format!("{n}-{}", records.len()).as_bytes()));
    Ok(Dataset {
        n_sensors: n,
        sensor_buses,
        sensor_phases,
        locations,
        samples,
        norm_stats: None,
        meta: DatasetMeta { seed, fingerprint },
    })
}

// --- Binary cache ----------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"GFDS";
const CACHE_VERSION: u32 = 1;

impl Dataset {
    pub fn save<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_sensors as u32).to_le_bytes())?;
        w.write_all(&(PHASES as u32).to_le_bytes())?;
        w.write_all(&(WINDOW_LEN as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        w.write_all(&self.meta.seed.to_le_bytes())?;
        write_string(&mut w, &self.meta.fingerprint)?;
        w.write_all(&(self.locations.len() as u32).to_le_bytes())?;
        for loc in &self.locations {
            write_string(&mut w, loc)?;
        }
        for (bus, mask) in self.sensor_buses.iter().zip(&self.sensor_phases) {
            write_string(&mut w, bus)?;
            let bits = mask[0] as u8 | (mask[1] as u8) << 1 | (mask[2] as u8) << 2;
            w.write_all(&[bits])?;
        }
        match &self.norm_stats {
            None => w.write_all(&[0u8])?,
            Some(s) => {
                w.write_all(&[1u8])?;
                for p in 0..PHASES {
                    w.write_all(&s.mean[p].to_le_bytes())?;
                    w.write_all(&s.std[p].to_le_bytes())?;
                    w.write_all(&[s.clamped[p] as u8])?;
                }
            }
        }
        for s in &self.samples {
            w.write_all(&s.group_key.0.to_le_bytes())?;
            w.write_all(&[s.group_key.1, s.label])?;
            for v in &s.features {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Dataset, DataError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(DataError::Cache("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(DataError::Cache(format!("unsupported version {version}")));
        }
        let n_sensors = read_u32(&mut r)? as usize;
        let phases = read_u32(&mut r)? as usize;
        let window = read_u32(&mut r)? as usize;
        if phases != PHASES || window != WINDOW_LEN {
            return Err(DataError::Cache(format!(
                "unexpected dims F={phases} S={window}"
            )));
        }
        let count = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let fingerprint = read_string(&mut r)?;
        let loc_count = read_u32(&mut r)? as usize;
        let mut locations = Vec::with_capacity(loc_count);
        for _ in 0..loc_count {
            locations.push(read_string(&mut r)?);
        }
        let mut sensor_buses = Vec::with_capacity(n_sensors);
        let mut sensor_phases = Vec::with_capacity(n_sensors);
        for _ in 0..n_sensors {
            sensor_buses.push(read_string(&mut r)?);
            let mut bits = [0u8; 1];
            r.read_exact(&mut bits)?;
            sensor_phases.push([bits[0] & 1 != 0, bits[0] & 2 != 0, bits[0] & 4 != 0]);
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let norm_stats = if flag[0] == 1 {
            let mut mean = [0f32; PHASES];
            let mut std = [0f32; PHASES];
            let mut clamped = [false; PHASES];
            for p in 0..PHASES {
                mean[p] = read_f32(&mut r)?;
                std[p] = read_f32(&mut r)?;
                let mut c = [0u8; 1];
                r.read_exact(&mut c)?;
                clamped[p] = c[0] != 0;
            }
            Some(NormStats { mean, std, clamped })
        } else {
            None
        };
        let feat_len = n_sensors * PHASES * WINDOW_LEN;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let run_id = read_u64(&mut r)?;
            let mut two = [0u8; 2];
            r.read_exact(&mut two)?;
            let mut features = vec![0f32; feat_len];
            let mut buf = vec![0u8; feat_len * 4];
            r.read_exact(&mut buf)?;
            for (i, chunk) in buf.chunks_exact(4).enumerate() {
                features[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            samples.push(WindowSample {
                features,
                label: two[1],
                group_key: (run_id, two[0]),
            });
        }
        Ok(Dataset {
            n_sensors,
            sensor_buses,
            sensor_phases,
            locations,
            samples,
            norm_stats,
            meta: DatasetMeta { seed, fingerprint },
        })
    }
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<(), DataError> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string<R: Read>(r: &mut R) -> Result<String, DataError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| DataError::Cache("invalid utf8".into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Batch feature staging: builds per-timestep (windows * nodes) x F input
/// matrices for a graph binding; `sensor_index` maps graph nodes onto
/// dataset sensors, unobserved nodes stay zero. Uses the first `steps`
/// timesteps of each window.
pub fn stage_step_inputs<T: Real>(
    windows: &[&WindowSample],
    node_sensor: &[Option<usize>],
    steps: usize,
) -> Vec<ndarray::Array2<T>> {
    assert!(steps >= 1 && steps <= WINDOW_LEN, "steps out of range");
    let n = node_sensor.len();
    let rows = windows.len() * n;
    (0..steps)
        .map(|t| {
            let mut x = ndarray::Array2::zeros((rows, PHASES));
            for (b, w) in windows.iter().enumerate() {
                for (v, sensor) in node_sensor.iter().enumerate() {
                    if let Some(m) = sensor {
                        for p in 0..PHASES {
                            x[[b * n + v, p]] = T::from(w.value(*m, p, t)).unwrap();
                        }
                    }
                }
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{parse_feeder, parse_placement};

    fn tiny_feeder() -> FeederTopology {
        parse_feeder(
            "\
bus S ABC substation
bus a ABC
bus b ABC
line S a ABC 1.0
line a b ABC 1.0
",
        )
        .unwrap()
    }

    fn tiny_placement() -> SensorPlacement {
        parse_placement("pmu S three\npmu a three\npmu b three\n").unwrap()
    }

    fn tiny_config(runs: usize, seed: u64) -> DatagenConfig {
        DatagenConfig {
            locations: vec!["a".into(), "b".into()],
            fault_types: vec![FaultType::Abc, FaultType::Ag],
            resistances: vec![0.1, 1.0, 10.0],
            runs_per_scenario: runs,
            load_range: (0.5, 1.3),
            surrogate: SurrogateConfig::default(),
            seed,
        }
    }

    /// Multipliers at 0.9 pin the pre-fault base to exactly 1.0 p.u.
    fn scenario(t: &FeederTopology, loc: &str, ft: FaultType, r: f64) -> FaultScenario {
        FaultScenario {
            location: loc.into(),
            fault_type: ft,
            resistance: r,
            load_multipliers: vec![0.9; t.buses.len()],
        }
    }

    #[test]
    fn abc_fault_at_own_bus_sags_to_full_depth() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let mut cfg = SurrogateConfig::default();
        cfg.noise_sigma = 0.0;
        let sc = scenario(&t, "a", FaultType::Abc, 0.1);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let run = generate_run(&t, &p, &sc, cfg, &mut rng).unwrap();
        // sensor 1 is at bus a, distance zero
        for phase in 0..3 {
            for t_idx in FAULT_ONSET..SAMPLES_PER_RUN {
                let v = run.value(1, phase, t_idx);
                assert!((v - 0.4).abs() < 1e-6, "phase {phase} t {t_idx}: {v}");
            }
            for t_idx in 0..FAULT_ONSET {
                assert!((run.value(1, phase, t_idx) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noise_free_prefault_is_constant() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let mut cfg = SurrogateConfig::default();
        cfg.noise_sigma = 0.0;
        let sc = scenario(&t, "b", FaultType::Bc, 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let run = generate_run(&t, &p, &sc, cfg, &mut rng).unwrap();
        for m in 0..3 {
            for phase in 0..3 {
                let first = run.value(m, phase, 0);
                for t_idx in 1..FAULT_ONSET {
                    assert_eq!(run.value(m, phase, t_idx), first);
                }
            }
        }
    }

    #[test]
    fn sag_decreases_with_distance_and_resistance() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let mut cfg = SurrogateConfig::default();
        cfg.noise_sigma = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        // fault at S: sensor distances are 0, 1, 2
        let mut sags = Vec::new();
        for resistance in [0.1, 1.0, 10.0] {
            let sc = scenario(&t, "S", FaultType::Abc, resistance);
            let run = generate_run(&t, &p, &sc, cfg.clone(), &mut rng).unwrap();
            let sag_at = |m: usize| 1.0 - run.value(m, 0, 50) as f64;
            assert!(sag_at(0) > sag_at(1));
            assert!(sag_at(1) > sag_at(2));
            sags.push(sag_at(1));
        }
        assert!(sags[0] > sags[1] && sags[1] > sags[2]);
    }

    #[test]
    fn ground_fault_swells_healthy_phases() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let mut cfg = SurrogateConfig::default();
        cfg.noise_sigma = 0.0;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let run = generate_run(&t, &p, &scenario(&t, "a", FaultType::Ag, 0.1), cfg.clone(), &mut rng)
            .unwrap();
        // phase A sags, B and C swell at the faulted bus
        assert!(run.value(1, 0, 50) < 1.0 - 1e-3);
        assert!(run.value(1, 1, 50) > 1.0 + 1e-3);
        assert!(run.value(1, 2, 50) > 1.0 + 1e-3);

        // line-to-line fault leaves the healthy phase untouched
        let run = generate_run(&t, &p, &scenario(&t, "a", FaultType::Ab, 0.1), cfg, &mut rng)
            .unwrap();
        assert!((run.value(1, 2, 50) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fault_phases_absent_is_an_error() {
        let t = parse_feeder(
            "\
bus S ABC substation
bus x A
line S x A 1.0
",
        )
        .unwrap();
        let p = parse_placement("pmu S three\n").unwrap();
        let sc = FaultScenario {
            location: "x".into(),
            fault_type: FaultType::Bc,
            resistance: 0.1,
            load_multipliers: vec![1.0; 2],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let err = generate_run(&t, &p, &sc, SurrogateConfig::default(), &mut rng).unwrap_err();
        assert!(matches!(err, DataError::FaultPhasesAbsent { .. }));
    }

    #[test]
    fn windows_split_exactly_twenty_twenty() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let run = generate_run(
            &t,
            &p,
            &scenario(&t, "a", FaultType::Abc, 0.1),
            SurrogateConfig::default(),
            &mut rng,
        )
        .unwrap();
        let windows = slice_windows(&run, 7).unwrap();
        assert_eq!(windows.len(), 40);
        let no_fault = windows.iter().filter(|w| w.label == 0).count();
        assert_eq!(no_fault, 20);
        assert!(windows.iter().filter(|w| w.label == 7).count() == 20);
        // start offsets are 1..=40 in order
        assert_eq!(windows[0].group_key.1, 1);
        assert_eq!(windows[39].group_key.1, 40);
        // start 20 is the last no-fault window, start 21 the first fault one
        assert_eq!(windows[19].label, 0);
        assert_eq!(windows[20].label, 7);
        // start 21 contains exactly one in-fault sample
        let w21 = &windows[20];
        let v_last = w21.value(1, 0, WINDOW_LEN - 1);
        let v_prev = w21.value(1, 0, WINDOW_LEN - 2);
        assert!(v_last < v_prev - 0.1, "onset sample should sag");
        // start 40 is fully in-fault: constant modulo noise
        let w40 = &windows[39];
        for t_idx in 0..WINDOW_LEN {
            assert!(w40.value(1, 0, t_idx) < 0.5);
        }
    }

    #[test]
    fn build_dataset_counts_and_balance() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let cfg = tiny_config(1, 9);
        let ds = build_dataset(&cfg, &t, &p).unwrap();
        // 2 locations x 2 types x 1 run x 40 windows
        assert_eq!(ds.len(), 160);
        let hist = ds.class_histogram();
        assert_eq!(hist[0], 80);
        assert_eq!(hist[1], 40);
        assert_eq!(hist[2], 40);
    }

    #[test]
    fn generator_is_deterministic() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let cfg = tiny_config(2, 77);
        let a = build_dataset(&cfg, &t, &p).unwrap();
        let b = build_dataset(&cfg, &t, &p).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let other = build_dataset(&tiny_config(2, 78), &t, &p).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn normalizer_zero_mean_unit_std() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let ds = build_dataset(&tiny_config(1, 10), &t, &p).unwrap();
        let stats = fit_normalizer(&ds).unwrap();
        let normed = apply_normalizer(&ds, stats);
        for ph in 0..PHASES {
            let mut sum = 0f64;
            let mut count = 0u64;
            for s in &normed.samples {
                for m in 0..normed.n_sensors {
                    if !normed.sensor_phases[m][ph] {
                        continue;
                    }
                    for t_idx in 0..WINDOW_LEN {
                        sum += s.value(m, ph, t_idx) as f64;
                        count += 1;
                    }
                }
            }
            let mean = sum / count as f64;
            assert!(mean.abs() < 1e-6, "channel {ph} mean {mean}");
            let mut sq = 0f64;
            for s in &normed.samples {
                for m in 0..normed.n_sensors {
                    if !normed.sensor_phases[m][ph] {
                        continue;
                    }
                    for t_idx in 0..WINDOW_LEN {
                        let d = s.value(m, ph, t_idx) as f64 - mean;
                        sq += d * d;
                    }
                }
            }
            let std = (sq / count as f64).sqrt();
            assert!((std - 1.0).abs() < 1e-6, "channel {ph} std {std}");
        }
    }

    #[test]
    fn normalizer_clamps_constant_channel() {
        let ds = Dataset {
            n_sensors: 1,
            sensor_buses: vec!["S".into()],
            sensor_phases: vec![[true, false, false]],
            locations: vec!["a".into()],
            samples: vec![WindowSample {
                features: vec![2.5; PHASES * WINDOW_LEN],
                label: 0,
                group_key: (0, 1),
            }],
            norm_stats: None,
            meta: DatasetMeta {
                seed: 0,
                fingerprint: "t".into(),
            },
        };
        let stats = fit_normalizer(&ds).unwrap();
        assert!(stats.clamped[0]);
        assert_eq!(stats.std[0], 1.0);
        let normed = apply_normalizer(&ds, stats);
        for t_idx in 0..WINDOW_LEN {
            assert_eq!(normed.samples[0].value(0, 0, t_idx), 0.0);
        }
    }

    #[test]
    fn normalization_is_idempotent_on_standardized_data() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let ds = build_dataset(&tiny_config(1, 11), &t, &p).unwrap();
        let normed = apply_normalizer(&ds, fit_normalizer(&ds).unwrap());
        let stats2 = fit_normalizer(&normed).unwrap();
        for ph in 0..PHASES {
            assert!(stats2.mean[ph].abs() < 1e-6);
            assert!((stats2.std[ph] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn split_is_group_disjoint_and_deterministic() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let ds = build_dataset(&tiny_config(3, 12), &t, &p).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(100);
        let (train, val, test) = split(&ds, (0.7, 0.15, 0.15), &mut rng).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), ds.len());

        use std::collections::HashSet;
        let keys = |d: &Dataset| -> HashSet<(u64, u8)> {
            d.samples.iter().map(|s| s.group_key).collect()
        };
        let (a, b, c) = (keys(&train), keys(&val), keys(&test));
        assert!(a.is_disjoint(&b));
        assert!(a.is_disjoint(&c));
        assert!(b.is_disjoint(&c));

        let mut rng2 = ChaCha12Rng::seed_from_u64(100);
        let (train2, _, _) = split(&ds, (0.7, 0.15, 0.15), &mut rng2).unwrap();
        assert_eq!(train.len(), train2.len());
        assert_eq!(keys(&train), keys(&train2));
    }

    #[test]
    fn split_ratio_proportions_hold() {
        // 480 group keys at 70/15/15
        let t = tiny_feeder();
        let p = tiny_placement();
        let ds = build_dataset(&tiny_config(3, 13), &t, &p).unwrap();
        let n_groups = 2 * 2 * 3 * 40;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let (train, val, test) = split(&ds, (0.7, 0.15, 0.15), &mut rng).unwrap();
        assert_eq!(train.len(), (n_groups as f64 * 0.7).round() as usize);
        assert_eq!(val.len(), (n_groups as f64 * 0.15).round() as usize);
        assert_eq!(test.len(), ds.len() - train.len() - val.len());
        assert!(split(&ds, (0.5, 0.2, 0.2), &mut rng).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let cfg = tiny_config(1, 14);
        let runs = generate_runs(&cfg, &t, &p).unwrap();
        let ctx = SurrogateContext::new(&t, &p, cfg.surrogate.clone()).unwrap();
        let ds = dataset_from_runs(&cfg, &runs, ctx.sensor_buses.clone(), ctx.sensor_phases.clone())
            .unwrap();

        let mut csv_bytes = Vec::new();
        export_runs_csv(&runs, &ctx.sensor_buses, &ctx.sensor_phases, &mut csv_bytes).unwrap();
        let imported = import_csv(csv_bytes.as_slice(), cfg.seed).unwrap();

        assert_eq!(imported.len(), ds.len());
        assert_eq!(imported.n_sensors, ds.n_sensors);
        for (a, b) in imported.samples.iter().zip(ds.samples.iter()) {
            assert_eq!(a.features, b.features, "features must round-trip exactly");
            assert_eq!(a.label, b.label);
            assert_eq!(a.group_key, b.group_key);
        }
    }

    #[test]
    fn csv_missing_column_is_named() {
        let bad = "run_id,sensor_bus,phase,t_ms,v_rms_pu,fault_bus,fault_type\n";
        let err = import_csv(bad.as_bytes(), 0).unwrap_err();
        match err {
            DataError::CsvSchema { msg, .. } => assert!(msg.contains("resistance_ohm")),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn cache_round_trip() {
        let t = tiny_feeder();
        let p = tiny_placement();
        let ds = build_dataset(&tiny_config(1, 15), &t, &p).unwrap();
        let ds = apply_normalizer(&ds, fit_normalizer(&ds).unwrap());
        let mut buf = Vec::new();
        ds.save(&mut buf).unwrap();
        let loaded = Dataset::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.norm_stats, ds.norm_stats);
        assert_eq!(loaded.sensor_buses, ds.sensor_buses);
        for (a, b) in loaded.samples.iter().zip(ds.samples.iter()) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.label, b.label);
            assert_eq!(a.group_key, b.group_key);
        }
        // checksum stability
        assert_eq!(loaded.checksum(), ds.checksum());
    }

    #[test]
    fn missing_phases_stay_zero() {
        let t = parse_feeder(
            "\
bus S ABC substation
bus x C
line S x C 1.0
",
        )
        .unwrap();
        let p = parse_placement("pmu S three\npmu x single\n").unwrap();
        let sc = FaultScenario {
            location: "S".into(),
            fault_type: FaultType::Cg,
            resistance: 0.1,
            load_multipliers: vec![1.0; 2],
        };
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let run = generate_run(&t, &p, &sc, SurrogateConfig::default(), &mut rng).unwrap();
        // sensor 1 has only phase C; A and B stay zero
        for t_idx in 0..SAMPLES_PER_RUN {
            assert_eq!(run.value(1, 0, t_idx), 0.0);
            assert_eq!(run.value(1, 1, t_idx), 0.0);
            assert_ne!(run.value(1, 2, t_idx), 0.0);
        }
    }
}
