//! Initial conditions, derivative extraction, snapshot scoring and
//! storage-budgeted selection of training files.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff_mlp::{split_indices, SampleSet};
use crate::error::{Error, Result};
use crate::pn_core::{flat_size, CollisionSpec, MomentIndexing};
use crate::rng::{stream, tags};
use crate::scalar::Real;
use crate::transport_solver::{FieldState, Grid2D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialCondition {
    /// `u_0 = sin(π(x + y)) + 2`.
    SingleMode,
    /// Random truncated Fourier series with modes `1 ≤ m, n ≤ k_max`.
    MultiSine { k_max: usize, seed: u64 },
}

impl InitialCondition {
    pub fn generate<T: Real>(&self, grid: Grid2D<T>, order: usize, global_seed: u64) -> Result<FieldState<T>> {
        match *self {
            Self::SingleMode => Ok(ic_single_mode(grid, order)),
            Self::MultiSine { k_max, seed } => ic_multi_sine(grid, order, k_max, global_seed, seed),
        }
    }
}

fn fill_u0<T: Real>(grid: Grid2D<T>, order: usize, f: impl Fn(f64, f64) -> f64) -> FieldState<T> {
    let mut state = FieldState::zeros(grid, order);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let (x, y) = grid.center(i, j);
            state.cell_mut(grid.index(i, j))[0] = T::lit(f(x.as_f64(), y.as_f64()));
        }
    }
    state
}

pub fn ic_single_mode<T: Real>(grid: Grid2D<T>, order: usize) -> FieldState<T> {
    fill_u0(grid, order, |x, y| (std::f64::consts::PI * (x + y)).sin() + 2.0)
}

/// Coefficients of the multi-sine initial condition.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSineCoefficients {
    pub k_max: usize,
    /// `a[(m−1)·k_max + (n−1)]`.
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub offset: f64,
    pub c: f64,
}

impl MultiSineCoefficients {
    /// Draws `a_{m,n} ~ U[−1/(mn), 1/(mn)]`, `φ_{m,n} ~ U[0, 2π)`, `c ~ U[0, 1)`,
    /// in the order `(m, n)` row by row, then `c`.
    pub fn sample<R: Rng>(k_max: usize, rng: &mut R) -> Result<Self> {
        if k_max < 1 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        let mut amplitude = Vec::with_capacity(k_max * k_max);
        let mut phase = Vec::with_capacity(k_max * k_max);
        let mut total = 0.0;
        for m in 1..=k_max {
            for n in 1..=k_max {
                let bound = 1.0 / (m * n) as f64;
                amplitude.push(rng.gen_range(-bound..=bound));
                phase.push(rng.gen_range(0.0..std::f64::consts::TAU));
                total += bound;
            }
        }
        let c = rng.gen_range(0.0..1.0);
        Ok(Self {
            k_max,
            amplitude,
            phase,
            offset: total + c,
            c,
        })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let pi = std::f64::consts::PI;
        let mut v = self.offset;
        for m in 1..=self.k_max {
            for n in 1..=self.k_max {
                let k = (m - 1) * self.k_max + (n - 1);
                v += self.amplitude[k] * (pi * (m as f64 * x + n as f64 * y) + self.phase[k]).sin();
            }
        }
        v
    }
}

pub fn ic_multi_sine<T: Real>(
    grid: Grid2D<T>,
    order: usize,
    k_max: usize,
    global_seed: u64,
    seed: u64,
) -> Result<FieldState<T>> {
    let coef = MultiSineCoefficients::sample(k_max, &mut stream(global_seed, seed, tags::INITIAL_CONDITION))?;
    Ok(fill_u0(grid, order, |x, y| coef.eval(x, y)))
}

/// Homogeneous material drawn per trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialSample {
    pub sigma_a: f64,
    pub sigma_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialRanges {
    pub sigma_a: (f64, f64),
    pub sigma_s: (f64, f64),
}

impl Default for MaterialRanges {
    fn default() -> Self {
        Self {
            sigma_a: (0.0, 1.0),
            sigma_s: (1.0, 10.0),
        }
    }
}

impl MaterialSample {
    pub fn draw(ranges: &MaterialRanges, global_seed: u64, seed: u64) -> Result<Self> {
        let ok = |(lo, hi): (f64, f64)| lo >= 0.0 && hi >= lo && hi.is_finite();
        if !ok(ranges.sigma_a) || !ok(ranges.sigma_s) {
            return Err(Error::Config(format!("invalid material ranges {ranges:?}")));
        }
        let mut rng = stream(global_seed, seed, tags::MATERIAL);
        let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        Ok(Self {
            sigma_a: draw(ranges.sigma_a),
            sigma_s: draw(ranges.sigma_s),
        })
    }

    pub fn collision<T: Real>(&self) -> Result<CollisionSpec<T>> {
        CollisionSpec::new(T::lit(self.sigma_a), T::lit(self.sigma_s))
    }
}

/// Periodic central differences of the moment blocks `N−1`, `N`, `N+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeBlocks<T> {
    pub order: usize,
    /// Number of moments per cell: `N + (N+1) + (N+2)`.
    pub width: usize,
    pub dx: Vec<T>,
    pub dy: Vec<T>,
}

fn check_order<T: Real>(state: &FieldState<T>, order: usize) -> Result<()> {
    if order < 1 {
        return Err(Error::InvalidOrder(order));
    }
    if state.order < order + 1 {
        return Err(Error::InvalidValue(format!(
            "snapshot of order {} cannot supply the degree-{} moments",
            state.order,
            order + 1
        )));
    }
    Ok(())
}

/// `(v_{i+1} − v_{i−1}) / (2Δ)` in both directions for moments `lo..hi`.
fn central_differences<T: Real>(state: &FieldState<T>, lo: usize, hi: usize) -> (Vec<T>, Vec<T>) {
    let grid = state.grid;
    let f = state.flat_size();
    let w = hi - lo;
    let (rx, ry) = (T::one() / (T::lit(2.0) * grid.dx()), T::one() / (T::lit(2.0) * grid.dy()));
    let mut dx = vec![T::zero(); grid.cells() * w];
    let mut dy = vec![T::zero(); grid.cells() * w];
    for j in 0..grid.ny {
        let (jm, jp) = ((j + grid.ny - 1) % grid.ny, (j + 1) % grid.ny);
        for i in 0..grid.nx {
            let (im, ip) = ((i + grid.nx - 1) % grid.nx, (i + 1) % grid.nx);
            let c = grid.index(i, j);
            let (xp, xm) = (grid.index(ip, j) * f, grid.index(im, j) * f);
            let (yp, ym) = (grid.index(i, jp) * f, grid.index(i, jm) * f);
            for k in 0..w {
                let q = lo + k;
                dx[c * w + k] = (state.data[xp + q] - state.data[xm + q]) * rx;
                dy[c * w + k] = (state.data[yp + q] - state.data[ym + q]) * ry;
            }
        }
    }
    (dx, dy)
}

pub fn compute_derivatives<T: Real>(state: &FieldState<T>, order: usize) -> Result<DerivativeBlocks<T>> {
    check_order(state, order)?;
    let lo = flat_size(order - 1) - order;
    let hi = flat_size(order + 1);
    let (dx, dy) = central_differences(state, lo, hi);
    Ok(DerivativeBlocks {
        order,
        width: hi - lo,
        dx,
        dy,
    })
}

/// One training sample per cell.
pub fn samples_from_snapshot<T: Real>(state: &FieldState<T>, order: usize) -> Result<SampleSet<T>> {
    let d = compute_derivatives(state, order)?;
    let cells = state.grid.cells();
    let f = flat_size(order);
    let mut set = SampleSet::with_len(order, cells);
    let (n, w) = (order, d.width);
    // Offsets of blocks N−1, N, N+1 inside the derivative row.
    let ranges = [(0, n), (n, n + 1), (2 * n + 1, n + 2)];
    for c in 0..cells {
        set.u.row_mut(c).iter_mut().zip(&state.cell(c)[..f]).for_each(|(d, &v)| *d = v);
        let rx = &d.dx[c * w..(c + 1) * w];
        let ry = &d.dy[c * w..(c + 1) * w];
        let targets = [
            (&mut set.dx_prev, &mut set.dy_prev),
            (&mut set.dx_cur, &mut set.dy_cur),
            (&mut set.dx_next, &mut set.dy_next),
        ];
        for ((tx, ty), (o, len)) in targets.into_iter().zip(ranges) {
            tx.row_mut(c).iter_mut().zip(&rx[o..o + len]).for_each(|(d, &v)| *d = v);
            ty.row_mut(c).iter_mut().zip(&ry[o..o + len]).for_each(|(d, &v)| *d = v);
        }
    }
    Ok(set)
}

/// `s = ‖u_{N+1}‖ + ‖∇u_{N+1}‖`, each norm the root mean square over every
/// cell and every entry of the stacked block (both gradient directions
/// stacked together).
pub fn snapshot_score<T: Real>(state: &FieldState<T>, order: usize) -> Result<f64> {
    check_order(state, order)?;
    let ix = MomentIndexing::new(order + 1)?;
    let block = ix.block_range(order + 1);
    let f = state.flat_size();
    let cells = state.grid.cells();
    let mut sq = 0.0;
    for c in 0..cells {
        for q in block.clone() {
            let v = state.data[c * f + q].as_f64();
            sq += v * v;
        }
    }
    let value_norm = (sq / (cells * block.len()) as f64).sqrt();
    let (dx, dy) = central_differences(state, block.start, block.end);
    let gsq: f64 = dx.iter().chain(&dy).map(|v| v.as_f64() * v.as_f64()).sum();
    let grad_norm = (gsq / (dx.len() + dy.len()) as f64).sqrt();
    Ok(value_norm + grad_norm)
}

/// A snapshot file offered to the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredFile {
    pub file: String,
    pub seed: u64,
    pub time: f64,
    pub score: f64,
}

impl ScoredFile {
    /// `Greater` means `self` ranks ahead: higher score, then earlier `(seed, time)`.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.seed.cmp(&self.seed))
            .then_with(|| other.time.total_cmp(&self.time))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionAction {
    /// Accepted on arrival.
    Kept,
    /// Rejected on arrival.
    Dropped,
    /// Accepted earlier, deleted to make room.
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub file: String,
    pub seed: u64,
    pub time: f64,
    pub score: f64,
    pub action: SelectionAction,
}

/// Top-`K` retention with delete-as-you-go semantics: a file that leaves the
/// retained set is gone for good.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub budget: usize,
    retained: Vec<ScoredFile>,
    ledger: Vec<LedgerEntry>,
}

impl SelectionState {
    pub fn new(budget: usize) -> Result<Self> {
        if budget < 1 {
            return Err(Error::Config("selection budget must be at least 1".into()));
        }
        Ok(Self {
            budget,
            retained: Vec::new(),
            ledger: Vec::new(),
        })
    }

    fn record(&mut self, f: &ScoredFile, action: SelectionAction) {
        self.ledger.push(LedgerEntry {
            file: f.file.clone(),
            seed: f.seed,
            time: f.time,
            score: f.score,
            action,
        });
    }

    /// Offers one file; returns the files deleted as a consequence (either
    /// the new file itself or the evicted one).
    pub fn offer(&mut self, file: ScoredFile) -> Vec<ScoredFile> {
        if self.retained.len() < self.budget {
            self.record(&file, SelectionAction::Kept);
            self.retained.push(file);
            return Vec::new();
        }
        let (worst_idx, worst) = self
            .retained
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.rank_cmp(b.1))
            .expect("budget is at least one");
        if file.rank_cmp(worst) == Ordering::Greater {
            let evicted = self.retained.swap_remove(worst_idx);
            self.record(&evicted, SelectionAction::Evicted);
            self.record(&file, SelectionAction::Kept);
            self.retained.push(file);
            vec![evicted]
        } else {
            self.record(&file, SelectionAction::Dropped);
            vec![file]
        }
    }

    /// Retained files, best first.
    pub fn retained(&self) -> Vec<ScoredFile> {
        let mut r = self.retained.clone();
        r.sort_by(|a, b| b.rank_cmp(a));
        r
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    /// Smallest retained score once the budget is full.
    pub fn threshold(&self) -> Option<f64> {
        (self.retained.len() == self.budget)
            .then(|| self.retained.iter().map(|f| f.score).fold(f64::INFINITY, f64::min))
    }
}

/// Streams `files` through a fresh selection.
pub fn streaming_topk(files: impl IntoIterator<Item = ScoredFile>, budget: usize) -> Result<SelectionState> {
    let mut state = SelectionState::new(budget)?;
    for f in files {
        state.offer(f);
    }
    Ok(state)
}

/// Training and validation samples built from in-memory snapshots.
pub fn dataset_from_snapshots<T: Real>(
    snapshots: &[FieldState<T>],
    order: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<(SampleSet<T>, SampleSet<T>)> {
    let sets = snapshots
        .iter()
        .map(|s| samples_from_snapshot(s, order))
        .collect::<Result<Vec<_>>>()?;
    split_dataset(&sets.iter().collect::<Vec<_>>(), val_fraction, seed)
}

pub fn split_dataset<T: Real>(parts: &[&SampleSet<T>], val_fraction: f64, seed: u64) -> Result<(SampleSet<T>, SampleSet<T>)> {
    let all = SampleSet::concat(parts)?;
    let (tr, va) = split_indices(all.len(), val_fraction, seed)?;
    Ok((all.select(&tr), all.select(&va)))
}

#[cfg(test)]
mod tests;
