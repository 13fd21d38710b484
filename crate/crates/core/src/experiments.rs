//! Experiment orchestration: dataset generation, the loss table, prediction
//! runs, and the order and target-existence probes, each writing CSV series
//! and a JSON manifest into an output directory.
//!
//! Every artifact is a pure function of the configuration, so two runs with
//! the same configuration produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ime::{self, TruncatedModifiedHamiltonian};
use crate::integrators::{self, Method, SolverConfig};
use crate::loss::{self, FlowDataset, FlowPair, HistoryRow, Provenance, Sampling, TrainConfig};
use crate::net::{Activation, NetArchitecture, NetParameters, ScalarNet};
use crate::optim::AdamConfig;
use crate::phase::{self, AnalyticSystem, CanonicalField, Hamiltonian, PhaseState};
use crate::stats;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Table1,
    PendulumPredict,
    KeplerPredict,
    ImeOrders,
    NtExistence,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 5] = [
        ExperimentId::Table1,
        ExperimentId::PendulumPredict,
        ExperimentId::KeplerPredict,
        ExperimentId::ImeOrders,
        ExperimentId::NtExistence,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ExperimentId::Table1 => "table1",
            ExperimentId::PendulumPredict => "pendulum_predict",
            ExperimentId::KeplerPredict => "kepler_predict",
            ExperimentId::ImeOrders => "ime_orders",
            ExperimentId::NtExistence => "nt_existence",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// How the training states are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub sampling: Sampling,
    /// Number of pairs.
    pub size: usize,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub decay_at: Vec<usize>,
    pub decay_factor: f64,
    pub test_every: usize,
}

impl TrainingSpec {
    pub fn architecture(&self, d: usize) -> Result<NetArchitecture> {
        NetArchitecture::new(2 * d, self.hidden_widths.clone(), self.activation)
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                ..AdamConfig::default()
            },
            iterations: self.iterations,
            batch_size: self.batch_size,
            decay_at: self.decay_at.clone(),
            decay_factor: self.decay_factor,
            test_every: self.test_every,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentId,
    pub system: AnalyticSystem,
    /// Training and evaluation methods; prediction runs train one net per entry.
    pub methods: Vec<Method>,
    pub dataset: DatasetSpec,
    pub training: TrainingSpec,
    pub solver: SolverConfig,
    /// RK4 sub-steps per step of length `h` for every exact-flow evaluation.
    pub oracle_substeps: usize,
    /// Prediction steps from the dataset's start state.
    #[serde(default)]
    pub horizon: usize,
    /// Steps of the conservation series along the net's exact flow.
    #[serde(default)]
    pub conservation_steps: usize,
    #[serde(default)]
    pub conservation_start: Vec<f64>,
    /// Step sizes for the order and existence probes, strictly decreasing.
    #[serde(default)]
    pub h_grid: Vec<f64>,
    /// States at which the probes are evaluated.
    #[serde(default)]
    pub probe_states: Vec<Vec<f64>>,
    /// Network checkpoint scored by `eval-loss`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

fn pendulum_region() -> Sampling {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let root2 = std::f64::consts::SQRT_2;
    Sampling::Region {
        bounds: vec![(-half_pi, half_pi), (-root2, root2)],
    }
}

impl ExperimentConfig {
    /// Default configuration of each experiment.
    pub fn preset(experiment: ExperimentId) -> Self {
        let table_training = TrainingSpec {
            hidden_widths: vec![64, 64],
            activation: Activation::Tanh,
            learning_rate: 1e-3,
            iterations: 15_000,
            batch_size: None,
            decay_at: vec![10_000],
            decay_factor: 0.1,
            test_every: 500,
        };
        let predict_training = TrainingSpec {
            hidden_widths: vec![64, 64],
            activation: Activation::Tanh,
            learning_rate: 1e-3,
            iterations: 30_000,
            batch_size: None,
            decay_at: vec![20_000],
            decay_factor: 0.1,
            test_every: 500,
        };
        let base = Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            system: AnalyticSystem::Pendulum,
            methods: vec![Method::SymplecticEuler],
            dataset: DatasetSpec {
                sampling: pendulum_region(),
                size: 4000,
                h: 0.1,
            },
            training: table_training,
            solver: SolverConfig::default(),
            oracle_substeps: 1000,
            horizon: 0,
            conservation_steps: 0,
            conservation_start: Vec::new(),
            h_grid: Vec::new(),
            probe_states: Vec::new(),
            checkpoint: None,
            output_dir: PathBuf::from("out").join(experiment.id()),
            seed: 0,
        };
        match experiment {
            ExperimentId::Table1 => Self {
                conservation_steps: 100,
                conservation_start: vec![0.0, 1.0],
                ..base
            },
            ExperimentId::PendulumPredict => Self {
                methods: vec![Method::ImplicitMidpoint, Method::ImplicitTrapezoidal],
                dataset: DatasetSpec {
                    sampling: Sampling::Trajectory { start: vec![0.0, 1.0] },
                    size: 40,
                    h: 0.1,
                },
                training: predict_training,
                horizon: 200,
                ..base
            },
            ExperimentId::KeplerPredict => Self {
                system: AnalyticSystem::Kepler,
                methods: vec![Method::ImplicitMidpoint, Method::ImplicitTrapezoidal],
                dataset: DatasetSpec {
                    sampling: Sampling::Trajectory {
                        start: vec![0.0, 1.0, 1.0, 0.2],
                    },
                    size: 55,
                    h: 0.1,
                },
                training: predict_training,
                horizon: 110,
                ..base
            },
            ExperimentId::ImeOrders => Self {
                h_grid: vec![0.2, 0.1, 0.05, 0.025],
                probe_states: vec![vec![0.5, 0.3], vec![-0.7, 1.0], vec![0.2, -1.2]],
                ..base
            },
            ExperimentId::NtExistence => Self {
                methods: vec![Method::ExplicitEuler],
                h_grid: vec![0.2, 0.1, 0.05, 0.02, 0.01, 1e-3, 1e-4],
                probe_states: vec![vec![0.0, 1.0]],
                ..base
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if self.dataset.size == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        if !(self.dataset.h > 0.0) || !self.dataset.h.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", self.dataset.h)));
        }
        if self.oracle_substeps == 0 {
            return Err(Error::Config("oracle sub-steps must be at least 1".into()));
        }
        let flat = 2 * self.system.dim();
        match &self.dataset.sampling {
            Sampling::Region { bounds } => {
                if bounds.len() != flat {
                    return Err(Error::Config(format!(
                        "{} needs {flat} coordinate bounds, got {}",
                        self.system,
                        bounds.len()
                    )));
                }
                if bounds.iter().any(|&(lo, hi)| !lo.is_finite() || !hi.is_finite() || !(lo < hi)) {
                    return Err(Error::Config("region bounds must be finite with lo < hi".into()));
                }
            }
            Sampling::Trajectory { start } => {
                if start.len() != flat {
                    return Err(Error::Config(format!(
                        "{} needs a start state of length {flat}, got {}",
                        self.system,
                        start.len()
                    )));
                }
            }
        }
        self.solver.validate()?;
        self.training.architecture(self.system.dim())?;
        self.training.train_config(self.methods[0], self.seed).validate()?;
        Ok(())
    }

    fn require(&self, allowed: &[ExperimentId]) -> Result<()> {
        if allowed.contains(&self.experiment) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "experiment `{}` cannot be run by this command",
                self.experiment
            )))
        }
    }

    fn dataset_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    fn test_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    fn training_seed(&self, method: Method) -> u64 {
        derive_seed(self.seed, 16 + method as u64)
    }

    fn probe_states(&self) -> Result<Vec<PhaseState>> {
        if self.probe_states.is_empty() {
            return Err(Error::Config("probe states must not be empty".into()));
        }
        self.probe_states
            .iter()
            .map(|v| PhaseState::from_flat(v.clone()))
            .collect()
    }
}

/// SplitMix64 finalizer of `seed + tag`, giving independent sub-seeds.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Pairs `(y, φ_h(y))` drawn per `spec`.
///
/// Region sampling draws i.i.d. uniform states from `seed`; trajectory
/// sampling chains `spec.size` steps of the exact flow from the start state.
pub fn generate_dataset(
    system: AnalyticSystem,
    spec: &DatasetSpec,
    oracle_substeps: usize,
    seed: u64,
) -> Result<FlowDataset> {
    if spec.size == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let field = CanonicalField(&system);
    let (pairs, seed) = match &spec.sampling {
        Sampling::Region { bounds } => {
            if bounds.len() != 2 * system.dim() {
                return Err(Error::Config(format!(
                    "{system} needs {} coordinate bounds, got {}",
                    2 * system.dim(),
                    bounds.len()
                )));
            }
            if bounds.iter().any(|&(lo, hi)| !lo.is_finite() || !hi.is_finite() || !(lo < hi)) {
                return Err(Error::Config("region bounds must be finite with lo < hi".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pairs = Vec::with_capacity(spec.size);
            for _ in 0..spec.size {
                let coords = bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..hi)).collect();
                let y = PhaseState::from_flat(coords)?;
                let y_next = phase::reference_flow(&field, &y, spec.h, oracle_substeps)?;
                pairs.push(FlowPair { y, y_next });
            }
            (pairs, Some(seed))
        }
        Sampling::Trajectory { start } => {
            let y0 = PhaseState::from_flat(start.clone())?;
            let traj = phase::reference_trajectory(&field, &y0, spec.h, spec.size, oracle_substeps)?;
            let pairs = traj
                .states
                .windows(2)
                .map(|w| FlowPair {
                    y: w[0].clone(),
                    y_next: w[1].clone(),
                })
                .collect();
            (pairs, None)
        }
    };
    FlowDataset::new(
        pairs,
        spec.h,
        Provenance {
            system: system.name().to_string(),
            sampling: spec.sampling.clone(),
            oracle_substeps,
            seed,
        },
    )
}

fn num(v: f64) -> String {
    format!("{v:e}")
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn coord_names(d: usize, prefix: &str, suffix: &str) -> Vec<String> {
    (1..=d)
        .map(|i| format!("{prefix}p{i}{suffix}"))
        .chain((1..=d).map(|i| format!("{prefix}q{i}{suffix}")))
        .collect()
}

/// Writes `<stem>.csv` and the `<stem>.json` provenance sidecar.
pub fn write_dataset(data: &FlowDataset, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let d = data.dim();
    let header: Vec<String> = coord_names(d, "", "")
        .into_iter()
        .chain(coord_names(d, "", "_next"))
        .collect();
    let rows: Vec<Vec<String>> = data
        .pairs
        .iter()
        .map(|pair| pair.y.as_slice().iter().chain(pair.y_next.as_slice()).map(|&v| num(v)).collect())
        .collect();
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(&csv_path, &header, &rows)?;
    let sidecar = DatasetSidecar {
        schema_version: SCHEMA_VERSION,
        size: data.len(),
        h: data.h,
        provenance: data.provenance.clone(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(vec![csv_path, json_path])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetSidecar {
    schema_version: u32,
    size: usize,
    h: f64,
    provenance: Provenance,
}

/// Reads a dataset written by [`write_dataset`] from `<stem>.csv` and its sidecar.
pub fn read_dataset(dir: &Path, stem: &str) -> Result<FlowDataset> {
    let sidecar: DatasetSidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let mut reader = csv::Reader::from_path(dir.join(format!("{stem}.csv")))?;
    let width = reader.headers()?.len();
    if width == 0 || width % 4 != 0 {
        return Err(Error::Shape(format!("dataset header has {width} columns")));
    }
    let mut pairs = Vec::new();
    for record in reader.records() {
        let values = record?
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| Error::Config(format!("bad number `{s}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != width {
            return Err(Error::Shape(format!("row has {} values, header {width}", values.len())));
        }
        let (y, y_next) = values.split_at(width / 2);
        pairs.push(FlowPair {
            y: PhaseState::from_flat(y.to_vec())?,
            y_next: PhaseState::from_flat(y_next.to_vec())?,
        });
    }
    if pairs.len() != sidecar.size {
        return Err(Error::Shape(format!(
            "sidecar declares {} pairs, file has {}",
            sidecar.size,
            pairs.len()
        )));
    }
    FlowDataset::new(pairs, sidecar.h, sidecar.provenance)
}

/// A trained network with enough context to be reloaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub arch: NetArchitecture,
    pub params: Vec<f64>,
    pub seed: u64,
    pub metadata: CheckpointMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub system: AnalyticSystem,
    pub method: Method,
    pub h: f64,
    pub iterations: usize,
    pub final_train_loss: f64,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn net(&self) -> Result<ScalarNet> {
        ScalarNet::new(self.arch.clone(), NetParameters::from_flat(&self.arch, self.params.clone())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("checkpoint schema {} is not supported", ck.schema_version)));
        }
        ck.net()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// What a run did, where it wrote, and the headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub command: String,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub oracle_substeps: usize,
    pub status: RunStatus,
    pub failures: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
}

impl ExperimentReport {
    fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_hash: config.hash()?,
            seed: config.seed,
            oracle_substeps: config.oracle_substeps,
            status: RunStatus::Ok,
            failures: Vec::new(),
            metrics: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    fn fail(&mut self, message: String) {
        self.status = RunStatus::Failed;
        self.failures.push(message);
    }

    fn finish(mut self, dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        self.artifacts.push(path.clone());
        fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let header = ["iteration", "train_loss", "test_loss"].map(String::from);
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                num(r.train_loss),
                r.test_loss.map(num).unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Analytic candidates scored next to the network: the base Hamiltonian and,
/// where closed forms exist, the modified truncations.
fn analytic_candidates(cfg: &ExperimentConfig, method: Method) -> Vec<(String, Box<dyn Hamiltonian>)> {
    let mut out: Vec<(String, Box<dyn Hamiltonian>)> = vec![("H".into(), Box::new(cfg.system))];
    for k in 1..=2 {
        if let Ok(t) = TruncatedModifiedHamiltonian::new(cfg.system, method, k, cfg.dataset.h) {
            out.push((t.label(), Box::new(t)));
        }
    }
    out
}


/// Trains one net and writes its history and checkpoint. Divergence is
/// recorded in the report with the partial history written.
fn train_and_save(
    cfg: &ExperimentConfig,
    method: Method,
    data: &FlowDataset,
    test: Option<&FlowDataset>,
    report: &mut ExperimentReport,
) -> Result<Option<ScalarNet>> {
    let dir = &cfg.output_dir;
    let arch = cfg.training.architecture(cfg.system.dim())?;
    let seed = cfg.training_seed(method);
    let tcfg = cfg.training.train_config(method, seed);
    let history_path = dir.join(format!("history_{}.csv", method.id()));
    match loss::train(&arch, data, test, &tcfg) {
        Ok(outcome) => {
            write_history(&history_path, &outcome.history)?;
            let checkpoint = Checkpoint {
                schema_version: SCHEMA_VERSION,
                arch: arch.clone(),
                params: outcome.net.params.as_slice().to_vec(),
                seed,
                metadata: CheckpointMetadata {
                    system: cfg.system,
                    method,
                    h: data.h,
                    iterations: tcfg.iterations,
                    final_train_loss: outcome.final_loss(),
                    config_hash: report.config_hash.clone(),
                },
            };
            let ck_path = dir.join(format!("checkpoint_{}.json", method.id()));
            checkpoint.save(&ck_path)?;
            report.artifacts.push(history_path);
            report.artifacts.push(ck_path);
            report
                .metrics
                .insert(format!("{}.final_train_loss", method.id()), outcome.final_loss());
            if let Some(t) = outcome.history.last().and_then(|r| r.test_loss) {
                report.metrics.insert(format!("{}.final_test_loss", method.id()), t);
            }
            Ok(Some(outcome.net))
        }
        Err(Error::TrainingDiverged {
            iteration,
            last_finite_loss,
            checkpoint,
        }) => {
            let partial = vec![HistoryRow {
                iteration,
                train_loss: last_finite_loss,
                test_loss: None,
            }];
            write_history(&history_path, &partial)?;
            let ck_path = dir.join(format!("checkpoint_{}_last_finite.json", method.id()));
            Checkpoint {
                schema_version: SCHEMA_VERSION,
                arch,
                params: checkpoint,
                seed,
                metadata: CheckpointMetadata {
                    system: cfg.system,
                    method,
                    h: data.h,
                    iterations: iteration,
                    final_train_loss: last_finite_loss,
                    config_hash: report.config_hash.clone(),
                },
            }
            .save(&ck_path)?;
            report.artifacts.push(history_path);
            report.artifacts.push(ck_path);
            report.fail(format!("{method} training diverged at iteration {iteration}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn training_data(cfg: &ExperimentConfig) -> Result<FlowDataset> {
    generate_dataset(cfg.system, &cfg.dataset, cfg.oracle_substeps, cfg.dataset_seed())
}

fn test_data(cfg: &ExperimentConfig) -> Result<Option<FlowDataset>> {
    match cfg.dataset.sampling {
        Sampling::Region { .. } => {
            Ok(Some(generate_dataset(cfg.system, &cfg.dataset, cfg.oracle_substeps, cfg.test_seed())?))
        }
        Sampling::Trajectory { .. } => Ok(None),
    }
}

/// `gen-data`: the training set and, for region sampling, a fresh test set.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("gen-data", cfg)?;
    let train = training_data(cfg)?;
    report.artifacts.extend(write_dataset(&train, &dir, "train")?);
    if let Some(test) = test_data(cfg)? {
        report.artifacts.extend(write_dataset(&test, &dir, "test")?);
    }
    report.metrics.insert("train_pairs".into(), train.len() as f64);
    report.finish(&dir)
}

/// `train`: one net per configured method.
pub fn run_train(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("train", cfg)?;
    let train = training_data(cfg)?;
    let test = test_data(cfg)?;
    for &method in &cfg.methods {
        train_and_save(cfg, method, &train, test.as_ref(), &mut report)?;
    }
    report.finish(&dir)
}

fn loss_rows(
    method: Method,
    candidates: &[(String, &dyn Hamiltonian)],
    train: &FlowDataset,
    test: Option<&FlowDataset>,
    report: &mut ExperimentReport,
) -> Result<Vec<Vec<String>>> {
    let train_batch = loss::ProbeBatch::new(method, train)?;
    let test_batch = test.map(|t| loss::ProbeBatch::new(method, t)).transpose()?;
    let mut rows = Vec::with_capacity(candidates.len());
    for (name, cand) in candidates {
        let tr = train_batch.loss(*cand)?;
        let te = test_batch.as_ref().map(|b| b.loss(*cand)).transpose()?;
        report.metrics.insert(format!("loss.{name}.train"), tr);
        if let Some(te) = te {
            report.metrics.insert(format!("loss.{name}.test"), te);
        }
        rows.push(vec![name.clone(), num(tr), te.map(num).unwrap_or_default()]);
    }
    Ok(rows)
}

fn loss_header() -> Vec<String> {
    ["candidate", "train_loss", "test_loss"].map(String::from).to_vec()
}

/// `eval-loss`: scores the analytic candidates and an optional checkpoint
/// with the first configured method's loss.
pub fn run_eval_loss(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("eval-loss", cfg)?;
    let method = cfg.methods[0];
    let train = training_data(cfg)?;
    let test = test_data(cfg)?;
    let analytic = analytic_candidates(cfg, method);
    let net = cfg.checkpoint.as_deref().map(Checkpoint::load).transpose()?.map(|c| c.net()).transpose()?;
    let mut cands: Vec<(String, &dyn Hamiltonian)> = Vec::new();
    if let Some(net) = &net {
        cands.push(("net".into(), net));
    }
    cands.extend(analytic.iter().map(|(n, c)| (n.clone(), c.as_ref())));
    let rows = loss_rows(method, &cands, &train, test.as_ref(), &mut report)?;
    let path = dir.join("losses.csv");
    write_csv(&path, &loss_header(), &rows)?;
    report.artifacts.push(path);
    report.finish(&dir)
}

/// `table1`: trains the symplectic-Euler net on region data, scores it next
/// to `H`, `MH1` and `MH2`, and measures how closely the net tracks each
/// candidate through target gaps and conservation along the net's exact flow.
pub fn run_table1(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.require(&[ExperimentId::Table1])?;
    if cfg.system != AnalyticSystem::Pendulum || cfg.methods != [Method::SymplecticEuler] {
        return Err(Error::Config("table1 runs the pendulum with symplectic Euler".into()));
    }
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("table1", cfg)?;
    let method = Method::SymplecticEuler;
    let train = training_data(cfg)?;
    let test = test_data(cfg)?.ok_or_else(|| Error::Config("table1 needs region sampling".into()))?;
    let trained = train_and_save(cfg, method, &train, Some(&test), &mut report)?;
    let analytic = analytic_candidates(cfg, method);

    let mut rows = Vec::new();
    if let Some(t) = &trained {
        let cands: Vec<(String, &dyn Hamiltonian)> = vec![("net".into(), t)];
        rows.extend(loss_rows(method, &cands, &train, Some(&test), &mut report)?);
    } else {
        rows.push(vec!["net".into(), num(f64::NAN), num(f64::NAN)]);
    }
    let cands: Vec<(String, &dyn Hamiltonian)> = analytic.iter().map(|(n, c)| (n.clone(), c.as_ref())).collect();
    rows.extend(loss_rows(method, &cands, &train, Some(&test), &mut report)?);
    let path = dir.join("table1.csv");
    write_csv(&path, &loss_header(), &rows)?;
    report.artifacts.push(path);

    if let Some(t) = &trained {
        let sample: Vec<PhaseState> = train.pairs.iter().map(|p| p.y.clone()).collect();
        let mut gap_rows = Vec::new();
        for (name, cand) in &analytic {
            let gap = loss::target_gap(t, cand.as_ref(), &sample)?;
            report.metrics.insert(format!("gap.{name}"), gap);
            gap_rows.push(vec![name.clone(), num(gap)]);
        }
        let path = dir.join("target_gaps.csv");
        write_csv(&path, &["candidate", "target_gap"].map(String::from), &gap_rows)?;
        report.artifacts.push(path);

        if cfg.conservation_steps > 0 {
            let start = PhaseState::from_flat(cfg.conservation_start.clone())?;
            let flow = phase::reference_trajectory(
                &CanonicalField(t),
                &start,
                cfg.dataset.h,
                cfg.conservation_steps,
                cfg.oracle_substeps,
            )?;
            let series = analytic
                .iter()
                .map(|(_, c)| ime::conservation_series(c.as_ref(), &flow))
                .collect::<Result<Vec<_>>>()?;
            let header: Vec<String> = ["step", "t"]
                .map(String::from)
                .into_iter()
                .chain(analytic.iter().map(|(n, _)| n.clone()))
                .collect();
            let rows: Vec<Vec<String>> = (0..flow.len())
                .map(|i| {
                    let mut row = vec![i.to_string(), num(flow.time(i))];
                    row.extend(series.iter().map(|s| num(s[i])));
                    row
                })
                .collect();
            for ((name, _), s) in analytic.iter().zip(&series) {
                report.metrics.insert(format!("amplitude.{name}"), stats::amplitude(s));
            }
            let path = dir.join("conservation.csv");
            write_csv(&path, &header, &rows)?;
            report.artifacts.push(path);
        }
    }
    report.finish(&dir)
}

/// Summary of one prediction rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSummary {
    pub method: Method,
    pub steps: usize,
    pub max_global_error: f64,
    /// Least-squares slope of energy drift against time.
    pub drift_slope: f64,
    pub truncated_at: Option<usize>,
}

/// `predict`: trains one net per method on trajectory data and rolls each
/// forward with its own integrator, comparing against the exact flow.
pub fn run_prediction(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.require(&[ExperimentId::PendulumPredict, ExperimentId::KeplerPredict])?;
    let start = match &cfg.dataset.sampling {
        Sampling::Trajectory { start } => PhaseState::from_flat(start.clone())?,
        Sampling::Region { .. } => return Err(Error::Config("prediction needs trajectory sampling".into())),
    };
    if cfg.horizon == 0 {
        return Err(Error::Config("prediction horizon must be positive".into()));
    }
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("predict", cfg)?;
    let train = training_data(cfg)?;
    let h = cfg.dataset.h;
    let reference =
        phase::reference_trajectory(&CanonicalField(&cfg.system), &start, h, cfg.horizon, cfg.oracle_substeps)?;
    let e0 = cfg.system.value(start.as_slice())?;
    let d = cfg.system.dim();
    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        let Some(net) = train_and_save(cfg, method, &train, None, &mut report)? else {
            continue;
        };
        let (pred, failure) =
            integrators::rollout_until_failure(method, &CanonicalField(&net), &start, h, cfg.horizon, &cfg.solver)?;
        let truncated_at = failure.as_ref().map(|_| pred.len() - 1);
        if let Some(e) = failure {
            report.fail(format!("{method} prediction stopped: {e}"));
        }
        let header: Vec<String> = ["step", "t"]
            .map(String::from)
            .into_iter()
            .chain(coord_names(d, "pred_", ""))
            .chain(coord_names(d, "ref_", ""))
            .chain(["global_error", "energy_drift"].map(String::from))
            .collect();
        let mut rows = Vec::with_capacity(pred.len());
        let mut times = Vec::with_capacity(pred.len());
        let mut drifts = Vec::with_capacity(pred.len());
        let mut max_err = 0.0_f64;
        for (i, state) in pred.states.iter().enumerate() {
            let reference_state = &reference.states[i];
            let err = state.distance(reference_state);
            let drift = cfg.system.value(state.as_slice())? - e0;
            max_err = max_err.max(err);
            times.push(pred.time(i));
            drifts.push(drift);
            let mut row = vec![i.to_string(), num(pred.time(i))];
            row.extend(state.as_slice().iter().map(|&v| num(v)));
            row.extend(reference_state.as_slice().iter().map(|&v| num(v)));
            row.push(num(err));
            row.push(num(drift));
            rows.push(row);
        }
        let path = dir.join(format!("prediction_{}.csv", method.id()));
        write_csv(&path, &header, &rows)?;
        report.artifacts.push(path);
        let drift_slope = if times.len() >= 2 {
            stats::linear_fit(&times, &drifts)?.0
        } else {
            0.0
        };
        report.metrics.insert(format!("{}.max_global_error", method.id()), max_err);
        report.metrics.insert(format!("{}.drift_slope", method.id()), drift_slope);
        report
            .metrics
            .insert(format!("{}.drift_amplitude", method.id()), stats::amplitude(&drifts));
        summaries.push(PredictionSummary {
            method,
            steps: pred.len() - 1,
            max_global_error: max_err,
            drift_slope,
            truncated_at,
        });
    }
    let header = ["method", "steps", "max_global_error", "drift_slope", "truncated_at"].map(String::from);
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.method.id().to_string(),
                s.steps.to_string(),
                num(s.max_global_error),
                num(s.drift_slope),
                s.truncated_at.map(|v| v.to_string()).unwrap_or_default(),
            ]
        })
        .collect();
    let path = dir.join("prediction_summary.csv");
    write_csv(&path, &header, &rows)?;
    report.artifacts.push(path);
    report.finish(&dir)
}

/// `ime-orders`: one-step defect of each truncation's field against the
/// exact flow over the step grid, with the fitted slope and its expectation.
pub fn run_ime_orders(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.require(&[ExperimentId::ImeOrders])?;
    if cfg.h_grid.is_empty() {
        return Err(Error::Config("step grid must not be empty".into()));
    }
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("ime-orders", cfg)?;
    let states = cfg.probe_states()?;
    let mut defect_rows = Vec::new();
    let mut slope_rows = Vec::new();
    for &method in &cfg.methods {
        for k in 0..=2 {
            if TruncatedModifiedHamiltonian::new(cfg.system, method, k, cfg.dataset.h).is_err() {
                continue;
            }
            let est = ime::verify_target_order(
                &cfg.system,
                method,
                |h| TruncatedModifiedHamiltonian::new(cfg.system, method, k, h),
                &states,
                &cfg.h_grid,
                &cfg.solver,
            )?;
            let label = TruncatedModifiedHamiltonian::new(cfg.system, method, k, 0.0)?.label();
            let expected = (method.order() as usize + k + 1) as f64;
            for (h, defect) in est.h_grid.iter().zip(&est.defects) {
                defect_rows.push(vec![method.id().into(), label.clone(), num(*h), num(*defect)]);
            }
            slope_rows.push(vec![method.id().into(), label.clone(), num(est.slope), num(expected)]);
            report.metrics.insert(format!("slope.{}.{label}", method.id()), est.slope);
        }
    }
    if slope_rows.is_empty() {
        return Err(Error::Config(format!(
            "no closed-form truncations are available for {}",
            cfg.system
        )));
    }
    let path = dir.join("order_defects.csv");
    write_csv(&path, &["method", "candidate", "h", "defect"].map(String::from), &defect_rows)?;
    report.artifacts.push(path);
    let path = dir.join("order_slopes.csv");
    write_csv(&path, &["method", "candidate", "slope", "expected"].map(String::from), &slope_rows)?;
    report.artifacts.push(path);
    report.finish(&dir)
}

/// `nt-existence`: gradient-symmetry defect of the explicit-Euler target map
/// over the step grid at each probe state.
pub fn run_nt_existence(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.require(&[ExperimentId::NtExistence])?;
    if cfg.h_grid.is_empty() {
        return Err(Error::Config("step grid must not be empty".into()));
    }
    if cfg.h_grid.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Config("step sizes must be positive".into()));
    }
    let dir = prepare_output(cfg)?;
    let mut report = ExperimentReport::new("nt-existence", cfg)?;
    let states = cfg.probe_states()?;
    let mut rows = Vec::new();
    for (si, y) in states.iter().enumerate() {
        let mut defects = Vec::with_capacity(cfg.h_grid.len());
        for &h in &cfg.h_grid {
            let defect = ime::gradient_symmetry_defect(&cfg.system, y, h)?;
            defects.push(defect);
            rows.push(vec![si.to_string(), num(h), num(defect)]);
        }
        let (imax, imin) = extreme_indices(&cfg.h_grid);
        report.metrics.insert(format!("state{si}.defect_at_max_h"), defects[imax]);
        report.metrics.insert(format!("state{si}.defect_at_min_h"), defects[imin]);
        report
            .metrics
            .insert(format!("state{si}.ratio"), defects[imax] / defects[imin]);
    }
    let path = dir.join("symmetry_defects.csv");
    write_csv(&path, &["state", "h", "defect"].map(String::from), &rows)?;
    report.artifacts.push(path);
    report.finish(&dir)
}

fn extreme_indices(values: &[f64]) -> (usize, usize) {
    let mut imax = 0;
    let mut imin = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[imax] {
            imax = i;
        }
        if *v < values[imin] {
            imin = i;
        }
    }
    (imax, imin)
}
