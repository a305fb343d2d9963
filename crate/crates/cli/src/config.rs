//! Run configuration: a TOML file layered over a per-task preset, with
//! `key=value` overrides applied last.

use std::path::{Path, PathBuf};

use pn_closure::autodiff_mlp::{Architecture, TrainConfig};
use pn_closure::data_pipeline::{InitialCondition, MaterialRanges, MaterialSample};
use pn_closure::transport_solver::{Grid2D, Reconstruction, SolverConfig};
use pn_closure::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const SCHEMA_VERSION: u32 = 1;

const BASE: &str = r#"
schema_version = 1
task = "custom"
seed = 0
out_dir = "runs/custom"

[grid]
nx = 64
ny = 64
x = [-1.0, 1.0]
y = [-1.0, 1.0]

[model]
order = 2
reference_order = 10

[material]
sigma_a = 0.0
sigma_s = 1.0
sample = false
sigma_a_range = [0.0, 1.0]
sigma_s_range = [1.0, 10.0]

[initial_condition]
kind = "single_mode"
k_max = 10

[solver]
cfl = 0.4
t_end = 1.0
snapshot_intervals = 10
reconstruction = "muscl_minmod"

[generate]
seeds = [0]

[train]

[sweep]
depths = [1, 2, 3, 4, 5]
widths = [16, 32, 64, 128, 256]

[rollout]
model = "linear_pn"
seed = 0

[evaluate]
candidates = []
"#;

const TASK1: &str = r#"
out_dir = "runs/task1"
"#;

const TASK2: &str = r#"
out_dir = "runs/task2"
[model]
order = 3
reference_order = 16
[initial_condition]
kind = "multi_sine"
[generate]
seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]
[rollout]
seed = 10
"#;

const TASK3: &str = r#"
out_dir = "runs/task3"
[model]
order = 3
reference_order = 16
[material]
sample = true
[initial_condition]
kind = "multi_sine"
[generate]
seeds = "0..100"
budget = 100
[rollout]
seed = 100
"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Task1,
    Task2,
    Task3,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub nx: usize,
    pub ny: usize,
    pub x: (f64, f64),
    pub y: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Retained order `N`.
    pub order: usize,
    pub reference_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSection {
    pub sigma_a: f64,
    pub sigma_s: f64,
    /// Draw `(σ_a, σ_s)` per trajectory from the ranges instead.
    pub sample: bool,
    pub sigma_a_range: (f64, f64),
    pub sigma_s_range: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcKind {
    SingleMode,
    MultiSine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IcSection {
    pub kind: IcKind,
    pub k_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub cfl: f64,
    pub t_end: f64,
    pub snapshot_intervals: usize,
    pub reconstruction: Reconstruction,
}

/// Either an explicit list or a half-open range written `"a..b"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedList {
    List(Vec<u64>),
    Range(String),
}

impl SeedList {
    pub fn expand(&self) -> Result<Vec<u64>> {
        match self {
            Self::List(v) => Ok(v.clone()),
            Self::Range(s) => {
                let bad = || Error::Config(format!("seed range {s:?} is not of the form \"a..b\""));
                let (a, b) = s.split_once("..").ok_or_else(bad)?;
                let a: u64 = a.trim().parse().map_err(|_| bad())?;
                let b: u64 = b.trim().parse().map_err(|_| bad())?;
                Ok((a..b).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub seeds: SeedList,
    /// Storage budget `K`; streaming selection runs only when set.
    pub budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub architecture: Architecture,
    pub normalize_inputs: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            width: d.width,
            depth: d.depth,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            epochs: d.epochs,
            val_fraction: d.val_fraction,
            weight_decay: d.weight_decay,
            epsilon: d.epsilon,
            architecture: d.architecture,
            normalize_inputs: d.normalize_inputs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutModel {
    LinearPn,
    MlClosure,
}

impl RolloutModel {
    pub fn name(self) -> &'static str {
        match self {
            Self::LinearPn => "linear_pn",
            Self::MlClosure => "ml_closure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub model: RolloutModel,
    /// Trajectory seed for the initial condition and material draw.
    pub seed: u64,
    /// Defaults to the checkpoint written by `train`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub reference: Option<PathBuf>,
    pub candidates: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub task: Task,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid: GridSection,
    pub model: ModelSection,
    pub material: MaterialSection,
    pub initial_condition: IcSection,
    pub solver: SolverSection,
    pub generate: GenerateSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
    pub rollout: RolloutSection,
    pub evaluate: EvaluateSection,
}

fn parse_table(text: &str, origin: &str) -> Result<Table> {
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{origin}: {e}")))
}

fn preset(task: &str) -> Result<&'static str> {
    match task {
        "task1" => Ok(TASK1),
        "task2" => Ok(TASK2),
        "task3" => Ok(TASK3),
        "custom" => Ok(""),
        other => Err(Error::Config(format!("unknown task {other:?}"))),
    }
}

/// Recursively overlays `top` onto `base`; non-table values replace.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let (last, parents) = path.split_last().expect("nonempty path");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override key {key:?}: {p:?} is not a table"))),
        };
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Command-line adjustments layered on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub entries: Vec<String>,
}

impl RunConfig {
    /// Loads `path` (or the bare defaults when absent) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => Table::new(),
        };
        Self::from_table(user, overrides)
    }

    pub fn from_table(mut user: Table, overrides: &Overrides) -> Result<Self> {
        for spec in &overrides.entries {
            apply_override(&mut user, spec)?;
        }
        let task = match user.get("task") {
            None => "custom".to_string(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("task must be a string, got {v}"))),
        };
        let mut merged = parse_table(BASE, "built-in defaults")?;
        merge(&mut merged, parse_table(preset(&task)?, "task preset")?);
        merge(&mut merged, user);
        if let Some(seed) = overrides.seed {
            merged.insert("seed".into(), Value::Integer(seed as i64));
        }
        if let Some(out) = &overrides.out_dir {
            merged.insert("out_dir".into(), Value::String(out.display().to_string()));
        }
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let m = &self.model;
        if m.order < 1 || m.order + 1 > m.reference_order {
            return Err(Error::Config(format!(
                "need 1 <= order and order + 1 <= reference_order, got {} and {}",
                m.order, m.reference_order
            )));
        }
        self.grid()?;
        self.solver()?.validate()?;
        if self.solver.snapshot_intervals == 0 {
            return Err(Error::Config("snapshot_intervals must be positive".into()));
        }
        if self.initial_condition.kind == IcKind::MultiSine && self.initial_condition.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.generate.seeds.expand()?.is_empty() {
            return Err(Error::Config("no generation seeds".into()));
        }
        if self.generate.budget == Some(0) {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        self.train_config().validate()?;
        if self.sweep.depths.is_empty() || self.sweep.widths.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        self.material(0)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid2D<f64>> {
        let g = &self.grid;
        Grid2D::new(g.nx, g.ny, g.x, g.y).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn solver(&self) -> Result<SolverConfig<f64>> {
        let s = &self.solver;
        if s.snapshot_intervals == 0 {
            return Err(Error::Config("snapshot_intervals must be positive".into()));
        }
        Ok(SolverConfig {
            cfl: s.cfl,
            reconstruction: s.reconstruction,
            ..SolverConfig::uniform(s.t_end, s.snapshot_intervals)
        })
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.generate.seeds.expand()
    }

    pub fn initial_condition(&self, trajectory_seed: u64) -> InitialCondition {
        match self.initial_condition.kind {
            IcKind::SingleMode => InitialCondition::SingleMode,
            IcKind::MultiSine => InitialCondition::MultiSine {
                k_max: self.initial_condition.k_max,
                seed: trajectory_seed,
            },
        }
    }

    pub fn material(&self, trajectory_seed: u64) -> Result<MaterialSample> {
        let m = &self.material;
        let sample = if m.sample {
            let ranges = MaterialRanges {
                sigma_a: m.sigma_a_range,
                sigma_s: m.sigma_s_range,
            };
            MaterialSample::draw(&ranges, self.seed, trajectory_seed)?
        } else {
            MaterialSample {
                sigma_a: m.sigma_a,
                sigma_s: m.sigma_s,
            }
        };
        sample.collision::<f64>().map_err(|e| Error::Config(e.to_string()))?;
        Ok(sample)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            order: self.model.order,
            width: t.width,
            depth: t.depth,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: self.seed,
            val_fraction: t.val_fraction,
            weight_decay: t.weight_decay,
            epsilon: t.epsilon,
            architecture: t.architecture,
            normalize_inputs: t.normalize_inputs,
        }
    }

    pub fn dataset_manifest_path(&self) -> PathBuf {
        self.out_dir.join("dataset.json")
    }

    pub fn generate_dir(&self) -> PathBuf {
        self.out_dir.join("generate")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join("train")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.rollout
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.train_dir().join("checkpoint.bin"))
    }
}
