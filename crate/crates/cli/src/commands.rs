use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use pn_closure::autodiff_mlp::{train_split, SampleSet, TrainConfig};
use pn_closure::data_pipeline::{samples_from_snapshot, snapshot_score, split_dataset, ScoredFile, SelectionState};
use pn_closure::formats::{
    read_checkpoint, read_dataset, read_json, read_snapshot, sibling, snapshot_file_name, write_checkpoint,
    write_dataset, write_json, write_ledger, write_snapshot, CurveWriter, DatasetManifest, RunManifest,
    SnapshotEntry, SnapshotMeta, MANIFEST_SCHEMA_VERSION,
};
use pn_closure::pn_core::{operators_for_order, PnOperators};
use pn_closure::transport_solver::{relative_l2_error, ClosureModel, Discretization, FieldState};
use pn_closure::{Error, Result};
use serde::Serialize;

use crate::config::{RolloutModel, RunConfig};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn missing(path: &Path, what: &str) -> Error {
    Error::Config(format!("{what} {} does not exist", path.display()))
}

/// Runs one trajectory and writes its snapshots into `dir`.
fn run_trajectory(
    cfg: &RunConfig,
    ops: &PnOperators<f64>,
    model: ClosureModel<f64>,
    model_name: &str,
    trajectory_seed: u64,
    dir: &Path,
) -> Result<RunManifest> {
    let grid = cfg.grid()?;
    let material = cfg.material(trajectory_seed)?;
    let ic_spec = cfg.initial_condition(trajectory_seed);
    let ic = ic_spec.generate(grid, ops.order(), cfg.seed)?;
    let disc = Discretization::new(grid, ops, &material.collision()?, model, cfg.solver.reconstruction)?;
    let out = disc.run(&ic, &cfg.solver()?)?;
    let meta = SnapshotMeta {
        sigma_a: material.sigma_a,
        sigma_s: material.sigma_s,
        seed: trajectory_seed,
    };
    let mut snapshots = Vec::with_capacity(out.snapshots.len());
    for (k, s) in out.snapshots.iter().enumerate() {
        let file = snapshot_file_name(trajectory_seed, k);
        write_snapshot(&dir.join(&file), s, &meta)?;
        snapshots.push(SnapshotEntry { file, t: s.t });
    }
    Ok(RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        model: model_name.to_string(),
        order: ops.order(),
        grid,
        sigma_a: material.sigma_a,
        sigma_s: material.sigma_s,
        seed: trajectory_seed,
        initial_condition: ic_spec,
        operators: ops.provenance(),
        snapshots,
        diagnostics: out.diagnostics,
    })
}

/// Reference trajectories at `N_ref`, optional streaming selection, and the
/// training dataset built from the surviving snapshots.
pub fn generate(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.generate_dir();
    ensure_dir(&dir)?;
    let n = cfg.model.order;
    let ops = operators_for_order::<f64>(cfg.model.reference_order)?;
    let mut selection = cfg.generate.budget.map(SelectionState::new).transpose()?;
    let mut manifests = Vec::new();
    for seed in cfg.seeds()? {
        let m = run_trajectory(cfg, &ops, ClosureModel::LinearPn, "linear_pn", seed, &dir)?;
        info!("trajectory {seed}: {} snapshots, {} steps", m.snapshots.len(), m.diagnostics.steps);
        if let Some(sel) = selection.as_mut() {
            for entry in &m.snapshots {
                let (state, _) = read_snapshot::<f64>(&dir.join(&entry.file))?;
                let offered = ScoredFile {
                    file: entry.file.clone(),
                    seed,
                    time: entry.t,
                    score: snapshot_score(&state, n)?,
                };
                for gone in sel.offer(offered) {
                    fs::remove_file(dir.join(&gone.file))?;
                }
            }
        }
        manifests.push(m);
    }
    let retained: Option<Vec<String>> = selection.as_ref().map(|sel| {
        let mut files: Vec<String> = sel.retained().into_iter().map(|f| f.file).collect();
        files.sort();
        files
    });
    if let Some(sel) = &selection {
        write_ledger(&dir.join("ledger.csv"), sel.ledger())?;
        info!("selection kept {} of {} snapshots", sel.retained().len(), sel.ledger().len());
    }
    let mut sources = Vec::new();
    for mut m in manifests {
        if let Some(keep) = &retained {
            m.snapshots.retain(|e| keep.binary_search(&e.file).is_ok());
        }
        sources.extend(m.snapshots.iter().map(|e| e.file.clone()));
        write_json(&dir.join(format!("seed{:04}.json", m.seed)), &m)?;
    }
    build_dataset(cfg, &dir, &sources)
}

fn build_dataset(cfg: &RunConfig, dir: &Path, sources: &[String]) -> Result<()> {
    let n = cfg.model.order;
    let mut parts = Vec::with_capacity(sources.len());
    for file in sources {
        let (state, _) = read_snapshot::<f64>(&dir.join(file))?;
        parts.push(samples_from_snapshot(&state, n)?);
    }
    let refs: Vec<&SampleSet<f64>> = parts.iter().collect();
    let val_fraction = cfg.train.val_fraction;
    let (train, val) = split_dataset(&refs, val_fraction, cfg.seed)?;
    let data_file = "dataset.bin".to_string();
    write_dataset(&cfg.out_dir.join(&data_file), &train, &val)?;
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        order: n,
        train_samples: train.len(),
        val_samples: val.len(),
        val_fraction,
        split_seed: cfg.seed,
        data_file,
        source_files: sources.iter().map(|f| format!("generate/{f}")).collect(),
        skipped: Vec::new(),
    };
    write_json(&cfg.dataset_manifest_path(), &manifest)?;
    info!("dataset: {} training and {} validation samples", train.len(), val.len());
    Ok(())
}

fn load_dataset(cfg: &RunConfig) -> Result<(SampleSet<f64>, SampleSet<f64>)> {
    let path = cfg.dataset_manifest_path();
    if !path.exists() {
        return Err(missing(&path, "dataset manifest"));
    }
    let manifest: DatasetManifest = read_json(&path)?;
    if manifest.order != cfg.model.order {
        return Err(Error::Config(format!(
            "dataset built for order {} but the config asks for order {}",
            manifest.order, cfg.model.order
        )));
    }
    read_dataset(&sibling(&path, &manifest.data_file))
}

#[derive(Serialize)]
struct TrainSummary {
    order: usize,
    width: usize,
    depth: usize,
    epochs: usize,
    best_epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

fn train_into(
    dir: &Path,
    data: &(SampleSet<f64>, SampleSet<f64>),
    ops: &PnOperators<f64>,
    tc: &TrainConfig,
) -> Result<TrainSummary> {
    ensure_dir(dir)?;
    let mut curve = CurveWriter::create(&dir.join("curve.csv"))?;
    let mut write_err = None;
    let outcome = train_split(&data.0, &data.1, ops, tc, |r| {
        if let Err(e) = curve.append(r) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    write_checkpoint(&dir.join("checkpoint.bin"), &outcome.best)?;
    let best = &outcome.best;
    let summary = TrainSummary {
        order: tc.order,
        width: tc.width,
        depth: tc.depth,
        epochs: tc.epochs,
        best_epoch: best.epoch,
        train_loss: best.train_loss,
        val_loss: best.val_loss,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    info!("best epoch {} with validation loss {:e}", best.epoch, best.val_loss);
    Ok(summary)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let ops = operators_for_order::<f64>(cfg.model.order)?;
    train_into(&cfg.train_dir(), &data, &ops, &cfg.train_config())?;
    Ok(())
}

/// Trains one network per `(depth, width)` pair of the sweep grid.
pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(cfg)?;
    let ops = operators_for_order::<f64>(cfg.model.order)?;
    let root = cfg.out_dir.join("sweep");
    let mut table = String::from("depth,width,best_epoch,train_loss,val_loss\n");
    for &depth in &cfg.sweep.depths {
        for &width in &cfg.sweep.widths {
            let tc = TrainConfig {
                depth,
                width,
                ..cfg.train_config()
            };
            info!("sweep: depth {depth}, width {width}");
            let s = train_into(&root.join(format!("d{depth}_w{width}")), &data, &ops, &tc)?;
            writeln!(table, "{depth},{width},{},{:e},{:e}", s.best_epoch, s.train_loss, s.val_loss).unwrap();
        }
    }
    write_text(&root.join("summary.csv"), &table)
}

pub fn rollout_dir(cfg: &RunConfig, model: RolloutModel) -> PathBuf {
    cfg.out_dir.join("rollout").join(format!(
        "{}_n{}_seed{:04}",
        model.name(),
        cfg.model.order,
        cfg.rollout.seed
    ))
}

/// One trajectory at the retained order with the configured closure.
pub fn rollout(cfg: &RunConfig) -> Result<PathBuf> {
    let n = cfg.model.order;
    let model = match cfg.rollout.model {
        RolloutModel::LinearPn => ClosureModel::LinearPn,
        RolloutModel::MlClosure => {
            let path = cfg.checkpoint_path();
            if !path.exists() {
                return Err(missing(&path, "checkpoint"));
            }
            let ck = read_checkpoint::<f64>(&path)?;
            if ck.params.shape.order != n {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained for order {} but the config asks for order {n}",
                    path.display(),
                    ck.params.shape.order
                )));
            }
            ClosureModel::Ml {
                params: ck.params,
                epsilon: ck.epsilon,
            }
        }
    };
    let ops = operators_for_order::<f64>(n)?;
    let dir = rollout_dir(cfg, cfg.rollout.model);
    ensure_dir(&dir)?;
    let m = run_trajectory(cfg, &ops, model, cfg.rollout.model.name(), cfg.rollout.seed, &dir)?;
    let path = dir.join("manifest.json");
    write_json(&path, &m)?;
    info!("rollout written to {}", path.display());
    Ok(path)
}

struct LoadedRun {
    label: String,
    manifest_path: PathBuf,
    manifest: RunManifest,
}

impl LoadedRun {
    fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(missing(path, "run manifest"));
        }
        let manifest: RunManifest = read_json(path)?;
        Ok(Self {
            label: format!("{}_n{}", manifest.model, manifest.order),
            manifest_path: path.to_path_buf(),
            manifest,
        })
    }

    fn snapshot(&self, k: usize) -> Result<FieldState<f64>> {
        let entry = &self.manifest.snapshots[k];
        let (state, _) = read_snapshot(&sibling(&self.manifest_path, &entry.file))?;
        if state.grid != self.manifest.grid {
            return Err(Error::Config(format!("{} does not match its manifest grid", entry.file)));
        }
        Ok(state)
    }
}

fn check_aligned(reference: &LoadedRun, other: &LoadedRun) -> Result<()> {
    let (a, b) = (&reference.manifest, &other.manifest);
    if a.grid != b.grid {
        return Err(Error::Config(format!(
            "{} and {} use different grids",
            reference.manifest_path.display(),
            other.manifest_path.display()
        )));
    }
    let same_times = a.snapshots.len() == b.snapshots.len()
        && a.snapshots.iter().zip(&b.snapshots).all(|(x, y)| (x.t - y.t).abs() <= 1e-12);
    if !same_times {
        return Err(Error::Config(format!(
            "{} and {} have different snapshot times",
            reference.manifest_path.display(),
            other.manifest_path.display()
        )));
    }
    Ok(())
}

/// `u_0` along `y = 0`, interpolated linearly between the bracketing rows.
fn cut_at_y0(state: &FieldState<f64>) -> Vec<(f64, f64)> {
    let g = &state.grid;
    let s = (0.0 - g.y_min) / g.dy() - 0.5;
    let j0 = s.floor();
    let w = s - j0;
    let wrap = |j: f64| j.rem_euclid(g.ny as f64) as usize;
    let (ja, jb) = (wrap(j0), wrap(j0 + 1.0));
    (0..g.nx)
        .map(|i| {
            let a = state.cell(g.index(i, ja))[0];
            let b = state.cell(g.index(i, jb))[0];
            (g.center(i, 0).0, (1.0 - w) * a + w * b)
        })
        .collect()
}

fn field_text(state: &FieldState<f64>) -> String {
    let g = &state.grid;
    let mut out = format!(
        "# u0 at t = {}; rows y from {} to {} ({} cells), columns x from {} to {} ({} cells)\n",
        state.t, g.y_min, g.y_max, g.ny, g.x_min, g.x_max, g.nx
    );
    for j in 0..g.ny {
        let row: Vec<String> = (0..g.nx).map(|i| format!("{:e}", state.cell(g.index(i, j))[0])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Error table against the reference plus y = 0 cuts and final-time fields
/// for every run.
pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ref_path = cfg
        .evaluate
        .reference
        .as_ref()
        .ok_or_else(|| Error::Config("evaluate.reference is not set".into()))?;
    if cfg.evaluate.candidates.is_empty() {
        return Err(Error::Config("evaluate.candidates is empty".into()));
    }
    let mut reference = LoadedRun::load(ref_path)?;
    reference.label = format!("reference_{}", reference.label);
    let mut candidates = cfg
        .evaluate
        .candidates
        .iter()
        .map(|p| LoadedRun::load(p))
        .collect::<Result<Vec<_>>>()?;
    for (idx, c) in candidates.iter_mut().enumerate() {
        check_aligned(&reference, c)?;
        c.label = format!("{}_{idx}", c.label);
    }

    let dir = cfg.out_dir.join("evaluate");
    ensure_dir(&dir)?;
    let times: Vec<f64> = reference.manifest.snapshots.iter().map(|e| e.t).collect();
    let mut table = String::from("model,order,run,t,relative_l2_error\n");
    let mut cuts = String::from("run,t,x,u0\n");
    let ref_fields = (0..times.len()).map(|k| reference.snapshot(k)).collect::<Result<Vec<_>>>()?;
    let mut emit = |run: &LoadedRun, k: usize, state: &FieldState<f64>| -> Result<()> {
        for (x, v) in cut_at_y0(state) {
            writeln!(cuts, "{},{},{x:e},{v:e}", run.label, times[k]).unwrap();
        }
        if k + 1 == times.len() {
            write_text(&dir.join(format!("field_{}.txt", run.label)), &field_text(state))?;
        }
        Ok(())
    };
    for (k, f) in ref_fields.iter().enumerate() {
        emit(&reference, k, f)?;
    }
    for c in &candidates {
        for (k, r) in ref_fields.iter().enumerate() {
            let state = c.snapshot(k)?;
            let err = relative_l2_error(&state.component(0), &r.component(0))?;
            writeln!(
                table,
                "{},{},{},{},{err:e}",
                c.manifest.model,
                c.manifest.order,
                c.label,
                times[k]
            )
            .unwrap();
            emit(c, k, &state)?;
        }
    }
    write_text(&dir.join("errors.csv"), &table)?;
    write_text(&dir.join("cuts.csv"), &cuts)?;
    info!("evaluation written to {}", dir.display());
    Ok(())
}
