//! On-disk formats: snapshots, checkpoints, datasets, manifests, ledgers and
//! training curves.
//!
//! Binary files start with a four-byte magic and a little-endian `u32` format
//! version; every number after that is little-endian and every real is `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff_mlp::{
    Architecture, CheckpointRecord, CurveRecord, InputScaler, MlpParams, NetworkShape, SampleSet,
};
use crate::data_pipeline::{InitialCondition, LedgerEntry, SelectionAction};
use crate::error::{Error, Result};
use crate::pn_core::{flat_size, OperatorProvenance};
use crate::scalar::Real;
use crate::transport_solver::{Diagnostics, FieldState, Grid2D};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"PNSN";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNCK";
pub const DATASET_MAGIC: &[u8; 4] = b"PNDS";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open_checked(path: &Path, magic: &[u8; 4]) -> Result<BufReader<File>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| format_err(path, "file too short"))?;
    if &m != magic {
        return Err(format_err(path, format!("bad magic {m:?}")));
    }
    let version = r.read_u32::<LE>().map_err(|_| format_err(path, "missing version"))?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported format version {version}")));
    }
    Ok(r)
}

fn write_reals<T: Real, W: Write>(w: &mut W, values: impl IntoIterator<Item = T>) -> Result<()> {
    for v in values {
        w.write_f64::<LE>(v.as_f64())?;
    }
    Ok(())
}

fn read_reals<T: Real, R: Read>(r: &mut R, n: usize, path: &Path) -> Result<Vec<T>> {
    let mut buf = vec![0f64; n];
    r.read_f64_into::<LE>(&mut buf)
        .map_err(|_| format_err(path, format!("truncated payload, expected {n} values")))?;
    Ok(buf.into_iter().map(T::lit).collect())
}

fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(format_err(path, "trailing bytes after payload")),
    }
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    r.read_u32::<LE>().map_err(|_| format_err(path, "truncated header"))
}

fn read_u64<R: Read>(r: &mut R, path: &Path) -> Result<u64> {
    r.read_u64::<LE>().map_err(|_| format_err(path, "truncated header"))
}

fn read_f64<R: Read>(r: &mut R, path: &Path) -> Result<f64> {
    r.read_f64::<LE>().map_err(|_| format_err(path, "truncated header"))
}

/// Per-snapshot metadata stored next to the field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub sigma_a: f64,
    pub sigma_s: f64,
    pub seed: u64,
}

/// Header `{version, N, nx, ny, bounds, t, σ_a, σ_s, seed}` then the cell-major payload.
pub fn write_snapshot<T: Real>(path: &Path, state: &FieldState<T>, meta: &SnapshotMeta) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    let g = &state.grid;
    for v in [state.order, g.nx, g.ny] {
        w.write_u32::<LE>(v as u32)?;
    }
    write_reals(&mut w, [g.x_min, g.x_max, g.y_min, g.y_max, state.t])?;
    w.write_f64::<LE>(meta.sigma_a)?;
    w.write_f64::<LE>(meta.sigma_s)?;
    w.write_u64::<LE>(meta.seed)?;
    write_reals(&mut w, state.data.iter().copied())?;
    w.flush()?;
    Ok(())
}

pub fn read_snapshot<T: Real>(path: &Path) -> Result<(FieldState<T>, SnapshotMeta)> {
    let mut r = open_checked(path, SNAPSHOT_MAGIC)?;
    let order = read_u32(&mut r, path)? as usize;
    let nx = read_u32(&mut r, path)? as usize;
    let ny = read_u32(&mut r, path)? as usize;
    let b: Vec<T> = read_reals(&mut r, 5, path)?;
    let meta = SnapshotMeta {
        sigma_a: read_f64(&mut r, path)?,
        sigma_s: read_f64(&mut r, path)?,
        seed: read_u64(&mut r, path)?,
    };
    if order < 1 {
        return Err(format_err(path, "moment order 0"));
    }
    let grid = Grid2D::new(nx, ny, (b[0], b[1]), (b[2], b[3])).map_err(|e| format_err(path, e.to_string()))?;
    let data = read_reals(&mut r, nx * ny * flat_size(order), path)?;
    expect_eof(&mut r, path)?;
    let state = FieldState {
        t: b[4],
        order,
        grid,
        data,
    };
    state.check_finite().map_err(|e| format_err(path, e.to_string()))?;
    Ok((state, meta))
}

/// One snapshot file of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub file: String,
    pub t: f64,
}

/// Human-readable description of a solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// `linear_pn` or `ml_closure`.
    pub model: String,
    pub order: usize,
    pub grid: Grid2D<f64>,
    pub sigma_a: f64,
    pub sigma_s: f64,
    pub seed: u64,
    pub initial_condition: InitialCondition,
    pub operators: OperatorProvenance,
    pub snapshots: Vec<SnapshotEntry>,
    pub diagnostics: Diagnostics,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| format_err(path, e.to_string()))
}

const FLAG_SHARED_TRUNK: u32 = 1;
const FLAG_SCALER: u32 = 2;

/// Header `{version, N, depth, width, ε, seed, flags, epoch, losses}`, then
/// the optional input scaler and every layer's weights and biases in
/// declaration order.
pub fn write_checkpoint<T: Real>(path: &Path, ck: &CheckpointRecord<T>) -> Result<()> {
    let p = &ck.params;
    let mut w = create(path)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    for v in [p.shape.order, p.shape.depth, p.shape.width] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_f64::<LE>(ck.epsilon)?;
    w.write_u64::<LE>(ck.seed)?;
    let mut flags = 0;
    if p.shape.architecture == Architecture::SharedTrunk {
        flags |= FLAG_SHARED_TRUNK;
    }
    if p.scaler.is_some() {
        flags |= FLAG_SCALER;
    }
    w.write_u32::<LE>(flags)?;
    w.write_u64::<LE>(ck.epoch as u64)?;
    w.write_f64::<LE>(ck.train_loss)?;
    w.write_f64::<LE>(ck.val_loss)?;
    if let Some(s) = &p.scaler {
        write_reals(&mut w, s.mean.iter().copied())?;
        write_reals(&mut w, s.scale.iter().copied())?;
    }
    for t in p.tensors() {
        write_reals(&mut w, t.iter().copied())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<CheckpointRecord<T>> {
    let mut r = open_checked(path, CHECKPOINT_MAGIC)?;
    let order = read_u32(&mut r, path)? as usize;
    let depth = read_u32(&mut r, path)? as usize;
    let width = read_u32(&mut r, path)? as usize;
    let epsilon = read_f64(&mut r, path)?;
    let seed = read_u64(&mut r, path)?;
    let flags = read_u32(&mut r, path)?;
    let epoch = read_u64(&mut r, path)? as usize;
    let train_loss = read_f64(&mut r, path)?;
    let val_loss = read_f64(&mut r, path)?;
    let shape = NetworkShape {
        order,
        width,
        depth,
        architecture: if flags & FLAG_SHARED_TRUNK != 0 {
            Architecture::SharedTrunk
        } else {
            Architecture::SeparateHeads
        },
    };
    let mut params = MlpParams::<T>::zeros(shape).map_err(|e| format_err(path, e.to_string()))?;
    if flags & FLAG_SCALER != 0 {
        let f = shape.input_size();
        params.scaler = Some(InputScaler {
            mean: read_reals(&mut r, f, path)?.into(),
            scale: read_reals(&mut r, f, path)?.into(),
        });
    }
    for t in params.tensors_mut() {
        let values: Vec<T> = read_reals(&mut r, t.len(), path)?;
        t.copy_from_slice(&values);
    }
    expect_eof(&mut r, path)?;
    if !params.is_finite() {
        return Err(format_err(path, "non-finite network parameter"));
    }
    Ok(CheckpointRecord {
        epoch,
        train_loss,
        val_loss,
        params,
        seed,
        epsilon,
    })
}

/// Describes a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub order: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
    pub data_file: String,
    pub source_files: Vec<String>,
    /// Files that could not be used, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn write_set<T: Real, W: Write>(w: &mut W, set: &SampleSet<T>) -> Result<()> {
    for field in set.fields() {
        write_reals(w, field.iter().copied())?;
    }
    Ok(())
}

fn read_set<T: Real, R: Read>(r: &mut R, order: usize, len: usize, path: &Path) -> Result<SampleSet<T>> {
    let mut set = SampleSet::with_len(order, len);
    for field in set.fields_mut() {
        let dim = field.raw_dim();
        let values = read_reals(r, dim[0] * dim[1], path)?;
        *field = Array2::from_shape_vec(dim, values).map_err(|e| format_err(path, e.to_string()))?;
    }
    Ok(set)
}

/// Header `{version, N, n_train, n_val}`, then the training and validation
/// sets field by field, each field row-major.
pub fn write_dataset<T: Real>(path: &Path, train: &SampleSet<T>, val: &SampleSet<T>) -> Result<()> {
    if train.order != val.order {
        return Err(Error::DimensionMismatch("training and validation orders differ".into()));
    }
    let mut w = create(path)?;
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(train.order as u32)?;
    w.write_u64::<LE>(train.len() as u64)?;
    w.write_u64::<LE>(val.len() as u64)?;
    write_set(&mut w, train)?;
    write_set(&mut w, val)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset<T: Real>(path: &Path) -> Result<(SampleSet<T>, SampleSet<T>)> {
    let mut r = open_checked(path, DATASET_MAGIC)?;
    let order = read_u32(&mut r, path)? as usize;
    let n_train = read_u64(&mut r, path)? as usize;
    let n_val = read_u64(&mut r, path)? as usize;
    let train = read_set(&mut r, order, n_train, path)?;
    let val = read_set(&mut r, order, n_val, path)?;
    expect_eof(&mut r, path)?;
    Ok((train, val))
}

fn action_name(a: SelectionAction) -> &'static str {
    match a {
        SelectionAction::Kept => "kept",
        SelectionAction::Dropped => "dropped",
        SelectionAction::Evicted => "evicted",
    }
}

/// `file,seed,time,score,action`, one line per decision.
pub fn write_ledger(path: &Path, entries: &[LedgerEntry]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "file,seed,time,score,action")?;
    for e in entries {
        writeln!(w, "{},{},{},{:e},{}", e.file, e.seed, e.time, e.score, action_name(e.action))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerEntry>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| format_err(path, format!("malformed ledger line {line}"));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n + 1));
            }
            let action = match f[4] {
                "kept" => SelectionAction::Kept,
                "dropped" => SelectionAction::Dropped,
                "evicted" => SelectionAction::Evicted,
                _ => return Err(bad(n + 1)),
            };
            Ok(LedgerEntry {
                file: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad(n + 1))?,
                time: f[2].parse().map_err(|_| bad(n + 1))?,
                score: f[3].parse().map_err(|_| bad(n + 1))?,
                action,
            })
        })
        .collect()
}

/// Append-only `epoch,train_loss,val_loss` records.
pub struct CurveWriter {
    out: BufWriter<File>,
}

impl CurveWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        writeln!(out, "epoch,train_loss,val_loss")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, r: &CurveRecord) -> Result<()> {
        writeln!(self.out, "{},{:e},{:e}", r.epoch, r.train_loss, r.val_loss)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRecord>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize| format_err(path, format!("malformed curve line {line}"));
    text.lines()
        .enumerate()
        .skip(1)
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(n + 1));
            }
            Ok(CurveRecord {
                epoch: f[0].parse().map_err(|_| bad(n + 1))?,
                train_loss: f[1].parse().map_err(|_| bad(n + 1))?,
                val_loss: f[2].parse().map_err(|_| bad(n + 1))?,
            })
        })
        .collect()
}

/// Snapshot file name for trajectory `seed` at snapshot index `k`.
pub fn snapshot_file_name(seed: u64, k: usize) -> String {
    format!("seed{seed:04}_snap{k:03}.bin")
}

/// Resolves `file` relative to the directory holding `manifest`.
pub fn sibling(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(file)
}
