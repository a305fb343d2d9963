//! Finite-volume method of lines for the closed moment system
//!
//! ```text
//! ∂t u + 𝒜(u) ∂x u + ℬ(u) ∂y u = 𝒬 u
//! ```
//!
//! on a periodic rectangle. Only the last block row of `𝒜`, `ℬ` may depend on
//! the state; every other row is the constant PN operator and is applied in
//! sparse form. The spatial operator is a quasilinear Rusanov scheme:
//!
//! ```text
//! du_i/dt = −A(u_i) (m_{i+½} − m_{i−½}) / Δx
//!           + (λ_{i+½} d_{i+½} − λ_{i−½} d_{i−½}) / (2Δx) + …
//! ```
//!
//! with `m`, `d` the mean and jump of the reconstructed face states and
//! `λ_{i+½}` the larger wavespeed bound of the two adjacent cells. Time
//! integration is SSP-RK2.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::autodiff_mlp::MlpParams;
use crate::closure_model::{linear_pn_closure, ClosureBlocks};
use crate::error::{Error, Result};
use crate::linalg::{self, CsrMatrix};
use crate::pn_core::{flat_size, CollisionSpec, PnOperators};
use crate::scalar::Real;

/// Uniform periodic grid of `nx × ny` cells; cell `(i, j)` has flat index `j·nx + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D<T> {
    pub nx: usize,
    pub ny: usize,
    pub x_min: T,
    pub x_max: T,
    pub y_min: T,
    pub y_max: T,
}

impl<T: Real> Grid2D<T> {
    pub const MIN_CELLS: usize = 8;

    /// `[−1, 1]²`.
    pub fn square(nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, (-T::one(), T::one()), (-T::one(), T::one()))
    }

    pub fn new(nx: usize, ny: usize, x: (T, T), y: (T, T)) -> Result<Self> {
        if nx < Self::MIN_CELLS || ny < Self::MIN_CELLS {
            return Err(Error::Config(format!(
                "grid {nx}x{ny} is smaller than {0}x{0}",
                Self::MIN_CELLS
            )));
        }
        if !(x.1 > x.0) || !(y.1 > y.0) {
            return Err(Error::Config("grid bounds must be increasing".into()));
        }
        Ok(Self {
            nx,
            ny,
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
        })
    }

    pub fn dx(&self) -> T {
        (self.x_max - self.x_min) / T::from_usize_exact(self.nx)
    }

    pub fn dy(&self) -> T {
        (self.y_max - self.y_min) / T::from_usize_exact(self.ny)
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn center(&self, i: usize, j: usize) -> (T, T) {
        let half = T::lit(0.5);
        (
            self.x_min + (T::from_usize_exact(i) + half) * self.dx(),
            self.y_min + (T::from_usize_exact(j) + half) * self.dy(),
        )
    }

    /// Grid with half the cells in each direction over the same domain.
    pub fn coarsened(&self) -> Result<Self> {
        if self.nx % 2 != 0 || self.ny % 2 != 0 {
            return Err(Error::Config("coarsening needs even cell counts".into()));
        }
        Self::new(self.nx / 2, self.ny / 2, (self.x_min, self.x_max), (self.y_min, self.y_max))
    }
}

/// Moment vectors at cell centers, stored cell by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState<T> {
    pub t: T,
    pub order: usize,
    pub grid: Grid2D<T>,
    /// `data[cell · flat_size + k]`.
    pub data: Vec<T>,
}

impl<T: Real> FieldState<T> {
    pub fn zeros(grid: Grid2D<T>, order: usize) -> Self {
        Self {
            t: T::zero(),
            order,
            grid,
            data: vec![T::zero(); grid.cells() * flat_size(order)],
        }
    }

    pub fn flat_size(&self) -> usize {
        flat_size(self.order)
    }

    pub fn cell(&self, c: usize) -> &[T] {
        let f = self.flat_size();
        &self.data[c * f..(c + 1) * f]
    }

    pub fn cell_mut(&mut self, c: usize) -> &mut [T] {
        let f = self.flat_size();
        &mut self.data[c * f..(c + 1) * f]
    }

    /// Scalar field of moment `k`, indexed like the cells.
    pub fn component(&self, k: usize) -> Vec<T> {
        let f = self.flat_size();
        self.data.iter().skip(k).step_by(f).copied().collect()
    }

    /// The same state with only the moments up to `order`.
    pub fn truncated(&self, order: usize) -> Result<Self> {
        if order > self.order || order < 1 {
            return Err(Error::InvalidOrder(order));
        }
        let (f_old, f_new) = (self.flat_size(), flat_size(order));
        let data = self
            .data
            .chunks_exact(f_old)
            .flat_map(|c| c[..f_new].iter().copied())
            .collect();
        Ok(Self {
            t: self.t,
            order,
            grid: self.grid,
            data,
        })
    }

    /// Average over 2×2 blocks of cells.
    pub fn restricted(&self) -> Result<Self> {
        let coarse = self.grid.coarsened()?;
        let f = self.flat_size();
        let mut out = Self::zeros(coarse, self.order);
        out.t = self.t;
        let quarter = T::lit(0.25);
        for j in 0..coarse.ny {
            for i in 0..coarse.nx {
                let dst = coarse.index(i, j);
                for (di, dj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let src = self.grid.index(2 * i + di, 2 * j + dj);
                    for k in 0..f {
                        out.data[dst * f + k] += quarter * self.data[src * f + k];
                    }
                }
            }
        }
        Ok(out)
    }

    /// `Σ u_0 Δx Δy`.
    pub fn mass(&self) -> T {
        let f = self.flat_size();
        self.data.iter().step_by(f).copied().sum::<T>() * self.grid.dx() * self.grid.dy()
    }

    pub fn check_finite(&self) -> Result<()> {
        check_finite(&self.grid, self.flat_size(), &self.data)
    }
}

fn check_finite<T: Real>(grid: &Grid2D<T>, f: usize, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(p) => {
            let c = p / f;
            Err(Error::NonFinite {
                i: c % grid.nx,
                j: c / grid.nx,
                component: p % f,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reconstruction {
    FirstOrder,
    #[default]
    MusclMinmod,
}

/// How the last block row of the transport matrices is closed.
#[derive(Debug, Clone, PartialEq)]
pub enum ClosureModel<T> {
    /// `u_{N+1} = 0`.
    LinearPn,
    /// State-independent closure blocks.
    Fixed(ClosureBlocks<T>),
    /// Network evaluated at every cell.
    Ml { params: MlpParams<T>, epsilon: T },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig<T> {
    pub cfl: T,
    pub t_end: T,
    pub snapshot_times: Vec<T>,
    pub reconstruction: Reconstruction,
}

impl<T: Real> SolverConfig<T> {
    /// Snapshots at `0, t_end/n, …, t_end`.
    pub fn uniform(t_end: T, intervals: usize) -> Self {
        let times = (0..=intervals)
            .map(|k| t_end * T::from_usize_exact(k) / T::from_usize_exact(intervals))
            .collect();
        Self {
            cfl: T::lit(0.4),
            t_end,
            snapshot_times: times,
            reconstruction: Reconstruction::MusclMinmod,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > T::zero() && self.cfl <= T::lit(0.9)) {
            return Err(Error::Config(format!("cfl {} outside (0, 0.9]", self.cfl.as_f64())));
        }
        if !(self.t_end >= T::zero()) {
            return Err(Error::Config("t_end must be nonnegative".into()));
        }
        if self.snapshot_times.iter().any(|&t| !(t >= T::zero() && t <= self.t_end)) {
            return Err(Error::Config("snapshot times must lie in [0, t_end]".into()));
        }
        if self.snapshot_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("snapshot times must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Last-block-row matrices `[G_{N−1}/2 | G_N/2]` and wavespeed bounds,
/// either shared by all cells or one per cell.
#[derive(Debug, Clone)]
struct LastRows<T> {
    per_cell: bool,
    /// `n1 × width` row-major per cell.
    gx: Vec<T>,
    gy: Vec<T>,
    lam_x: Vec<T>,
    lam_y: Vec<T>,
}

impl<T: Real> LastRows<T> {
    #[inline]
    fn slot(&self, c: usize) -> usize {
        if self.per_cell {
            c
        } else {
            0
        }
    }
}

/// The parts of `P 𝒜^ML P⁻¹` that do not depend on the closure, where
/// `P = diag(I, C⁻¹)` and `H = C Cᵀ`.
#[derive(Debug, Clone)]
struct ConjugateParts<T> {
    /// Largest absolute row sum over blocks `0 … N−2`.
    rest_row_max: T,
    /// Absolute row sums of block `N−1` outside the last block column.
    prev_partial: Vec<T>,
    /// Squared Frobenius norm outside the last block row and column.
    rest_frob_sq: T,
}

impl<T: Real> ConjugateParts<T> {
    fn new(m: &Array2<T>, prev0: usize, last0: usize) -> Self {
        let abs_sum = |r: usize, end: usize| (0..end).map(|c| m[[r, c]].abs()).sum::<T>();
        Self {
            rest_row_max: (0..prev0).map(|r| abs_sum(r, last0)).fold(T::zero(), T::max),
            prev_partial: (prev0..last0).map(|r| abs_sum(r, last0)).collect(),
            rest_frob_sq: m.slice(s![..last0, ..last0]).iter().map(|&v| v * v).sum(),
        }
    }

    /// `min(‖T‖_∞, ‖T‖_F)` for the conjugate with coupling block
    /// `X = (prev block)ᵀ C / 2` and last block `Y = Cᵀ M C / 2`.
    fn bound(&self, x: &Array2<T>, y: &Array2<T>) -> T {
        let mut inf = self.rest_row_max;
        for (i, row) in x.rows().into_iter().enumerate() {
            inf = inf.max(self.prev_partial[i] + row.iter().map(|v| v.abs()).sum());
        }
        for r in 0..y.nrows() {
            let s = x.column(r).iter().map(|v| v.abs()).sum::<T>() + y.row(r).iter().map(|v| v.abs()).sum();
            inf = inf.max(s);
        }
        let sq = |m: &Array2<T>| m.iter().map(|&v| v * v).sum::<T>();
        let frob = (self.rest_frob_sq + T::lit(2.0) * sq(x) + sq(y)).sqrt();
        inf.min(frob)
    }
}

/// Spatial discretization with everything that does not depend on the state.
#[derive(Debug, Clone)]
pub struct Discretization<T> {
    pub grid: Grid2D<T>,
    pub order: usize,
    pub reconstruction: Reconstruction,
    collision: Vec<T>,
    /// Rows above the last block of `𝒜` and `ℬ`.
    a_upper: CsrMatrix<T>,
    b_upper: CsrMatrix<T>,
    /// Column sums of `|𝒜|`, `|ℬ|` over the upper rows, and their largest row sum.
    a_col_abs: Vec<T>,
    b_col_abs: Vec<T>,
    a_row_max: T,
    b_row_max: T,
    a_sym: ConjugateParts<T>,
    b_sym: ConjugateParts<T>,
    /// First column of block `N−1`.
    last_col0: usize,
    /// First row of block `N`.
    last_row0: usize,
    model: ClosureModel<T>,
    ops: PnOperators<T>,
}

impl<T: Real> Discretization<T> {
    pub fn new(
        grid: Grid2D<T>,
        ops: &PnOperators<T>,
        collision: &CollisionSpec<T>,
        model: ClosureModel<T>,
        reconstruction: Reconstruction,
    ) -> Result<Self> {
        let n = ops.order();
        match &model {
            ClosureModel::Fixed(b) if b.g_prev.dim() != (n + 1, n) => {
                return Err(Error::DimensionMismatch(format!(
                    "closure blocks for order {} used with order {n}",
                    b.g_prev.ncols()
                )))
            }
            ClosureModel::Ml { params, epsilon } => {
                if params.shape.order != n {
                    return Err(Error::DimensionMismatch(format!(
                        "network trained for order {} used with order {n}",
                        params.shape.order
                    )));
                }
                if !(*epsilon > T::zero()) {
                    return Err(Error::InvalidValue("epsilon must be positive".into()));
                }
            }
            _ => {}
        }
        let ix = &ops.indexing;
        let last_row0 = ix.block_offset(n);
        let last_col0 = ix.block_offset(n - 1);
        let upper = |m: &Array2<T>| m.slice(s![..last_row0, ..]).to_owned();
        let col_abs = |m: &Array2<T>| -> Vec<T> {
            upper(m).columns().into_iter().map(|c| c.iter().map(|v| v.abs()).sum()).collect()
        };
        let row_max = |m: &Array2<T>| {
            upper(m)
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<T>())
                .fold(T::zero(), T::max)
        };
        Ok(Self {
            grid,
            order: n,
            reconstruction,
            collision: collision.diagonal(n),
            a_upper: CsrMatrix::from_dense(upper(&ops.a_full).view(), T::zero()),
            b_upper: CsrMatrix::from_dense(upper(&ops.b_full).view(), T::zero()),
            a_col_abs: col_abs(&ops.a_full),
            b_col_abs: col_abs(&ops.b_full),
            a_row_max: row_max(&ops.a_full),
            b_row_max: row_max(&ops.b_full),
            a_sym: ConjugateParts::new(&ops.a_full, last_col0, last_row0),
            b_sym: ConjugateParts::new(&ops.b_full, last_col0, last_row0),
            last_col0,
            last_row0,
            model,
            ops: ops.clone(),
        })
    }

    pub fn flat_size(&self) -> usize {
        flat_size(self.order)
    }

    pub fn model(&self) -> &ClosureModel<T> {
        &self.model
    }

    /// Dense collision matrix `𝒬`, for reference.
    pub fn collision_matrix(&self) -> Array2<T> {
        Array2::from_diag(&ndarray::Array1::from(self.collision.clone()))
    }

    fn width(&self) -> usize {
        self.flat_size() - self.last_col0
    }

    /// Smaller of the 1- and ∞-norm of the full matrix whose last block row is `g`.
    fn bound(&self, col_abs: &[T], row_max: T, g: &[T]) -> T {
        let w = self.width();
        let n1 = self.order + 1;
        let mut norm_inf = row_max;
        for r in 0..n1 {
            norm_inf = norm_inf.max(g[r * w..(r + 1) * w].iter().map(|v| v.abs()).sum());
        }
        let mut norm_1 = col_abs[..self.last_col0].iter().copied().fold(T::zero(), T::max);
        for c in 0..w {
            let mut s = col_abs[self.last_col0 + c];
            for r in 0..n1 {
                s += g[r * w + c].abs();
            }
            norm_1 = norm_1.max(s);
        }
        norm_1.min(norm_inf)
    }

    fn pack_blocks(&self, prev: ArrayView2<'_, T>, last: ArrayView2<'_, T>, out: &mut [T]) {
        let half = T::lit(0.5);
        let n = self.order;
        let w = self.width();
        for r in 0..=n {
            for c in 0..n {
                out[r * w + c] = prev[[r, c]] * half;
            }
            for c in 0..=n {
                out[r * w + n + c] = last[[r, c]] * half;
            }
        }
    }

    /// Norm bounds of the symmetric conjugates of both directions.
    fn conjugate_bounds(&self, h: &Array2<T>, mx: &Array2<T>, my: &Array2<T>) -> Result<(T, T)> {
        let n = self.order;
        let half = T::lit(0.5);
        let chol = linalg::cholesky(h.view())?;
        let bound = |parts: &ConjugateParts<T>, prev: ArrayView2<'_, T>, m: &Array2<T>| {
            let x = prev.t().dot(&chol).mapv(|v| v * half);
            let y = chol.t().dot(&m.dot(&chol)).mapv(|v| v * half);
            parts.bound(&x, &y)
        };
        Ok((
            bound(&self.a_sym, self.ops.a_block(n - 1), mx),
            bound(&self.b_sym, self.ops.b_block(n - 1), my),
        ))
    }

    fn shared_rows(&self, blocks: &ClosureBlocks<T>) -> Result<LastRows<T>> {
        let w = self.width();
        let n1 = self.order + 1;
        let mut gx = vec![T::zero(); n1 * w];
        let mut gy = vec![T::zero(); n1 * w];
        self.pack_blocks(blocks.g_prev.view(), blocks.g_last.view(), &mut gx);
        self.pack_blocks(blocks.k_prev.view(), blocks.k_last.view(), &mut gy);
        let (sx, sy) = self.conjugate_bounds(&blocks.h, &blocks.mx, &blocks.my)?;
        let lam_x = vec![self.bound(&self.a_col_abs, self.a_row_max, &gx).min(sx)];
        let lam_y = vec![self.bound(&self.b_col_abs, self.b_row_max, &gy).min(sy)];
        Ok(LastRows {
            per_cell: false,
            gx,
            gy,
            lam_x,
            lam_y,
        })
    }

    fn last_rows(&self, state: &FieldState<T>) -> Result<LastRows<T>> {
        match &self.model {
            ClosureModel::LinearPn => self.shared_rows(&linear_pn_closure(&self.ops)),
            ClosureModel::Fixed(blocks) => self.shared_rows(blocks),
            ClosureModel::Ml { params, epsilon } => self.ml_rows(state, params, *epsilon),
        }
    }

    fn ml_rows(&self, state: &FieldState<T>, params: &MlpParams<T>, eps: T) -> Result<LastRows<T>> {
        let f = self.flat_size();
        let cells = self.grid.cells();
        let n = self.order;
        let n1 = n + 1;
        let w = self.width();
        let inputs = ArrayView2::from_shape((cells, f), &state.data)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        let out = params.forward_batch(inputs)?.outputs;
        let a_prev = self.ops.a_block(n - 1);
        let b_prev = self.ops.b_block(n - 1);
        let mut rows = LastRows {
            per_cell: true,
            gx: vec![T::zero(); cells * n1 * w],
            gy: vec![T::zero(); cells * n1 * w],
            lam_x: vec![T::zero(); cells],
            lam_y: vec![T::zero(); cells],
        };
        let half = T::lit(0.5);
        let mut l = Array2::<T>::zeros((n1, n1));
        let mut h = Array2::<T>::zeros((n1, n1));
        let mut mx = Array2::<T>::zeros((n1, n1));
        let mut my = Array2::<T>::zeros((n1, n1));
        for c in 0..cells {
            let (lp, lx, ly) = (out[0].row(c), out[1].row(c), out[2].row(c));
            let mut k = 0;
            for i in 0..n1 {
                for j in 0..=i {
                    l[[i, j]] = lp[k];
                    k += 1;
                }
            }
            for i in 0..n1 {
                for j in 0..=i {
                    let mut acc = T::zero();
                    for q in 0..=j {
                        acc += l[[i, q]] * l[[j, q]];
                    }
                    if i == j {
                        acc += eps;
                    }
                    h[[i, j]] = acc;
                    h[[j, i]] = acc;
                }
                for j in 0..n1 {
                    mx[[i, j]] = (lx[i * n1 + j] + lx[j * n1 + i]) * half;
                    my[[i, j]] = (ly[i * n1 + j] + ly[j * n1 + i]) * half;
                }
            }
            let (sx, sy) = self.conjugate_bounds(&h, &mx, &my)?;
            let gx = &mut rows.gx[c * n1 * w..(c + 1) * n1 * w];
            self.pack_blocks(h.dot(&a_prev).view(), h.dot(&mx).view(), gx);
            let lam_x = self.bound(&self.a_col_abs, self.a_row_max, gx).min(sx);
            let gy = &mut rows.gy[c * n1 * w..(c + 1) * n1 * w];
            self.pack_blocks(h.dot(&b_prev).view(), h.dot(&my).view(), gy);
            let lam_y = self.bound(&self.b_col_abs, self.b_row_max, gy).min(sy);
            rows.lam_x[c] = lam_x;
            rows.lam_y[c] = lam_y;
        }
        Ok(rows)
    }

    /// Largest `(λx, λy)` over all cells for `state`.
    pub fn max_wavespeeds(&self, state: &FieldState<T>) -> Result<(T, T)> {
        let rows = self.last_rows(state)?;
        Ok(max_lambdas(&rows))
    }

    /// Semi-discrete right-hand side.
    pub fn rhs(&self, state: &FieldState<T>) -> Result<Vec<T>> {
        let mut ws = Workspace::new(self.grid.cells(), self.flat_size());
        let rows = self.last_rows(state)?;
        let mut out = vec![T::zero(); state.data.len()];
        self.rhs_into(state, &rows, &mut ws, &mut out)?;
        Ok(out)
    }

    fn rhs_into(&self, state: &FieldState<T>, rows: &LastRows<T>, ws: &mut Workspace<T>, out: &mut [T]) -> Result<()> {
        self.check_state(state)?;
        let f = self.flat_size();
        for (c, cell) in state.data.chunks_exact(f).enumerate() {
            for k in 0..f {
                out[c * f + k] = self.collision[k] * cell[k];
            }
        }
        self.directional(state, rows, ws, out, Direction::X);
        self.directional(state, rows, ws, out, Direction::Y);
        check_finite(&self.grid, f, out)
    }

    fn check_state(&self, state: &FieldState<T>) -> Result<()> {
        if state.order != self.order || state.grid != self.grid {
            return Err(Error::DimensionMismatch(format!(
                "state of order {} on {}x{} used with order {} on {}x{}",
                state.order, state.grid.nx, state.grid.ny, self.order, self.grid.nx, self.grid.ny
            )));
        }
        Ok(())
    }

    fn directional(&self, state: &FieldState<T>, rows: &LastRows<T>, ws: &mut Workspace<T>, out: &mut [T], dir: Direction) {
        let f = self.flat_size();
        let grid = &self.grid;
        let (h, csr, g, lam) = match dir {
            Direction::X => (grid.dx(), &self.a_upper, &rows.gx, &rows.lam_x),
            Direction::Y => (grid.dy(), &self.b_upper, &rows.gy, &rows.lam_y),
        };
        let neighbor = |c: usize, forward: bool| -> usize {
            let (i, j) = (c % grid.nx, c / grid.nx);
            match (dir, forward) {
                (Direction::X, true) => grid.index((i + 1) % grid.nx, j),
                (Direction::X, false) => grid.index((i + grid.nx - 1) % grid.nx, j),
                (Direction::Y, true) => grid.index(i, (j + 1) % grid.ny),
                (Direction::Y, false) => grid.index(i, (j + grid.ny - 1) % grid.ny),
            }
        };
        let u = &state.data;
        let cells = grid.cells();
        let half = T::lit(0.5);

        if self.reconstruction == Reconstruction::MusclMinmod {
            for c in 0..cells {
                let (cm, cp) = (neighbor(c, false), neighbor(c, true));
                for k in 0..f {
                    let v = u[c * f + k];
                    ws.slope[c * f + k] = minmod(v - u[cm * f + k], u[cp * f + k] - v);
                }
            }
        }
        // Face c is the face between cell c and its forward neighbor.
        let muscl = self.reconstruction == Reconstruction::MusclMinmod;
        for c in 0..cells {
            let cp = neighbor(c, true);
            let lam_face = lam[rows.slot(c)].max(lam[rows.slot(cp)]);
            for k in 0..f {
                let (mut ul, mut ur) = (u[c * f + k], u[cp * f + k]);
                if muscl {
                    ul += half * ws.slope[c * f + k];
                    ur -= half * ws.slope[cp * f + k];
                }
                ws.mean[c * f + k] = (ul + ur) * half;
                ws.flux[c * f + k] = lam_face * (ur - ul);
            }
        }
        let inv_h = T::one() / h;
        let w = self.width();
        let n1 = self.order + 1;
        for c in 0..cells {
            let cm = neighbor(c, false);
            for k in 0..f {
                ws.diff[k] = ws.mean[c * f + k] - ws.mean[cm * f + k];
            }
            let o = &mut out[c * f..(c + 1) * f];
            for k in 0..f {
                o[k] += (ws.flux[c * f + k] - ws.flux[cm * f + k]) * half * inv_h;
            }
            for r in 0..self.last_row0 {
                o[r] -= csr.row_dot(r, &ws.diff) * inv_h;
            }
            let gc = &g[rows.slot(c) * n1 * w..(rows.slot(c) + 1) * n1 * w];
            let tail = &ws.diff[self.last_col0..];
            for r in 0..n1 {
                let row = &gc[r * w..(r + 1) * w];
                let s: T = row.iter().zip(tail).map(|(&a, &b)| a * b).sum();
                o[self.last_row0 + r] -= s * inv_h;
            }
        }
    }

    /// One SSP-RK2 step of size `dt`.
    pub fn step(&self, state: &FieldState<T>, dt: T) -> Result<FieldState<T>> {
        let mut ws = Workspace::new(self.grid.cells(), self.flat_size());
        let rows = self.last_rows(state)?;
        self.step_with(state, dt, &rows, &mut ws)
    }

    fn step_with(&self, state: &FieldState<T>, dt: T, rows: &LastRows<T>, ws: &mut Workspace<T>) -> Result<FieldState<T>> {
        let mut k = vec![T::zero(); state.data.len()];
        self.rhs_into(state, rows, ws, &mut k)?;
        let mut stage = state.clone();
        for (s, d) in stage.data.iter_mut().zip(&k) {
            *s += dt * *d;
        }
        stage.t = state.t + dt;
        let rows_stage = match self.model {
            ClosureModel::Ml { .. } => self.last_rows(&stage)?,
            _ => rows.clone(),
        };
        self.rhs_into(&stage, &rows_stage, ws, &mut k)?;
        let half = T::lit(0.5);
        for ((s, &u0), &d) in stage.data.iter_mut().zip(&state.data).zip(&k) {
            *s = half * u0 + half * (*s + dt * d);
        }
        Ok(stage)
    }

    /// Advances `ic` to `t_end`, landing exactly on every snapshot time.
    pub fn run(&self, ic: &FieldState<T>, config: &SolverConfig<T>) -> Result<RunOutput<T>> {
        config.validate()?;
        self.check_state(ic)?;
        ic.check_finite()?;
        let mut ws = Workspace::new(self.grid.cells(), self.flat_size());
        let mut state = ic.clone();
        let mut snapshots = Vec::with_capacity(config.snapshot_times.len());
        let mut diagnostics = Diagnostics::default();
        let mut pending = config.snapshot_times.iter().copied().filter(|&t| t >= ic.t).peekable();
        let h_min = self.grid.dx().min(self.grid.dy());
        loop {
            while let Some(&ts) = pending.peek() {
                if ts > state.t {
                    break;
                }
                snapshots.push(FieldState { t: ts, ..state.clone() });
                pending.next();
            }
            let rows = self.last_rows(&state)?;
            let (lx, ly) = max_lambdas(&rows);
            diagnostics.times.push(state.t.as_f64());
            diagnostics.mass.push(state.mass().as_f64());
            diagnostics.max_wavespeed.push((lx.as_f64(), ly.as_f64()));
            if state.t >= config.t_end {
                break;
            }
            let target = pending.peek().copied().unwrap_or(config.t_end).min(config.t_end);
            let speed = lx + ly;
            let dt_cfl = if speed > T::zero() {
                config.cfl * h_min / speed
            } else {
                target - state.t
            };
            let land = dt_cfl >= target - state.t;
            let dt = if land { target - state.t } else { dt_cfl };
            state = self.step_with(&state, dt, &rows, &mut ws)?;
            if land {
                state.t = target;
            }
            diagnostics.steps += 1;
        }
        Ok(RunOutput { snapshots, diagnostics })
    }
}

fn max_lambdas<T: Real>(rows: &LastRows<T>) -> (T, T) {
    let mx = |v: &[T]| v.iter().copied().fold(T::zero(), T::max);
    (mx(&rows.lam_x), mx(&rows.lam_y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    X,
    Y,
}

#[derive(Debug)]
struct Workspace<T> {
    slope: Vec<T>,
    mean: Vec<T>,
    flux: Vec<T>,
    diff: Vec<T>,
}

impl<T: Real> Workspace<T> {
    fn new(cells: usize, f: usize) -> Self {
        Self {
            slope: vec![T::zero(); cells * f],
            mean: vec![T::zero(); cells * f],
            flux: vec![T::zero(); cells * f],
            diff: vec![T::zero(); f],
        }
    }
}

#[inline]
fn minmod<T: Real>(a: T, b: T) -> T {
    if a * b <= T::zero() {
        T::zero()
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    /// Time of each accepted state, starting with the initial one.
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    /// `(max λx, max λy)` used for the step leaving each state.
    pub max_wavespeed: Vec<(f64, f64)>,
}

impl Diagnostics {
    /// Largest `|m(t) − m(0)| / |m(0)|`.
    pub fn relative_mass_drift(&self) -> f64 {
        let m0 = self.mass.first().copied().unwrap_or(0.0);
        self.mass.iter().map(|m| (m - m0).abs()).fold(0.0, f64::max) / m0.abs()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub snapshots: Vec<FieldState<T>>,
    pub diagnostics: Diagnostics,
}

/// `‖a − b‖₂ / ‖b‖₂` over all entries.
pub fn relative_l2_error<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "fields of {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let den: T = b.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(den > T::zero()) {
        return Err(Error::InvalidValue("reference field has zero norm".into()));
    }
    let num: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
    Ok(num / den)
}
