//! Last-block-row closure with a block-diagonal symmetrizer.
//!
//! Given an SPD matrix `H` and symmetric `M_x`, `M_y`, the closure blocks are
//!
//! ```text
//! G_{N-1} = H A_{N-1},   K_{N-1} = H B_{N-1},   G_N = H M_x,   K_N = H M_y,
//! ```
//!
//! with every `G_j`, `K_j` for `j ≤ N−2` zero. The resulting system is
//! symmetrized by `𝒮 = diag(I, …, I, H⁻¹)`, so every direction
//! `n_x 𝒜^ML + n_y ℬ^ML` has a real spectrum.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::pn_core::PnOperators;
use crate::scalar::Real;

/// Default regularizer in `H = L Lᵀ + ε I`.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Lower-triangular factor `L` and regularizer `ε` of `H = L Lᵀ + ε I`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor<T> {
    lower: Array2<T>,
    epsilon: T,
}

impl<T: Real> SpdFactor<T> {
    /// Entries above the diagonal of `raw` are ignored.
    pub fn new(raw: Array2<T>, epsilon: T) -> Result<Self> {
        let (r, c) = raw.dim();
        if r != c {
            return Err(Error::DimensionMismatch(format!("factor is {r}x{c}")));
        }
        if !(epsilon > T::zero()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", epsilon.as_f64())));
        }
        let mut lower = raw;
        for i in 0..r {
            for j in (i + 1)..c {
                lower[[i, j]] = T::zero();
            }
        }
        Ok(Self { lower, epsilon })
    }

    /// Fills the lower triangle row by row from `packed` (length `n(n+1)/2`).
    pub fn from_packed(n: usize, packed: &[T], epsilon: T) -> Result<Self> {
        if packed.len() != n * (n + 1) / 2 {
            return Err(Error::DimensionMismatch(format!(
                "packed factor of length {} for size {n}",
                packed.len()
            )));
        }
        let mut lower = Array2::zeros((n, n));
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                lower[[i, j]] = packed[k];
                k += 1;
            }
        }
        Self::new(lower, epsilon)
    }

    pub fn lower(&self) -> ArrayView2<'_, T> {
        self.lower.view()
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// `H = L Lᵀ + ε I`, exactly symmetric.
pub fn assemble_h<T: Real>(factor: &SpdFactor<T>) -> Array2<T> {
    let l = &factor.lower;
    let n = l.nrows();
    let mut h = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = T::zero();
            for k in 0..=j {
                acc += l[[i, k]] * l[[j, k]];
            }
            h[[i, j]] = acc;
            h[[j, i]] = acc;
        }
        h[[i, i]] += factor.epsilon;
    }
    h
}

/// `(raw + rawᵀ) / 2`.
pub fn symmetrize<T: Real>(raw: ArrayView2<'_, T>) -> Array2<T> {
    linalg::symmetric_part(raw)
}

/// The learned last-block-row matrices and the `H` that symmetrizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosureBlocks<T> {
    pub h: Array2<T>,
    pub mx: Array2<T>,
    pub my: Array2<T>,
    /// `G_{N−1}`, shape `(N+1) × N`.
    pub g_prev: Array2<T>,
    pub k_prev: Array2<T>,
    /// `G_N`, shape `(N+1) × (N+1)`.
    pub g_last: Array2<T>,
    pub k_last: Array2<T>,
}

fn check_square<T>(name: &str, m: &ArrayView2<'_, T>, n: usize) -> Result<()> {
    if m.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {:?}, expected ({n}, {n})",
            m.dim()
        )));
    }
    Ok(())
}

/// Closure blocks in the `G = H A`, `G_N = H M` form.
pub fn assemble_closure<T: Real>(
    h: ArrayView2<'_, T>,
    mx: ArrayView2<'_, T>,
    my: ArrayView2<'_, T>,
    ops: &PnOperators<T>,
) -> Result<ClosureBlocks<T>> {
    let n = ops.order();
    check_square("H", &h, n + 1)?;
    check_square("Mx", &mx, n + 1)?;
    check_square("My", &my, n + 1)?;
    Ok(ClosureBlocks {
        g_prev: h.dot(&ops.a_block(n - 1)),
        k_prev: h.dot(&ops.b_block(n - 1)),
        g_last: h.dot(&mx),
        k_last: h.dot(&my),
        h: h.to_owned(),
        mx: mx.to_owned(),
        my: my.to_owned(),
    })
}

/// Closure blocks in the `G = H̃⁻¹ A`, `G_N = H̃⁻¹ M` form, solved through a
/// Cholesky factorization of `H̃`. Equals [`assemble_closure`] with `H = H̃⁻¹`.
pub fn assemble_closure_inverse_form<T: Real>(
    h_tilde: ArrayView2<'_, T>,
    mx: ArrayView2<'_, T>,
    my: ArrayView2<'_, T>,
    ops: &PnOperators<T>,
) -> Result<ClosureBlocks<T>> {
    let n = ops.order();
    check_square("H~", &h_tilde, n + 1)?;
    check_square("Mx", &mx, n + 1)?;
    check_square("My", &my, n + 1)?;
    let l = linalg::cholesky(h_tilde)?;
    let solve = |b: ArrayView2<'_, T>| linalg::cholesky_solve(l.view(), b);
    Ok(ClosureBlocks {
        g_prev: solve(ops.a_block(n - 1)),
        k_prev: solve(ops.b_block(n - 1)),
        g_last: solve(mx),
        k_last: solve(my),
        h: solve(Array2::eye(n + 1).view()),
        mx: mx.to_owned(),
        my: my.to_owned(),
    })
}

/// Closure produced by raw network outputs `L`, `L_x`, `L_y`.
pub fn closure_from_factors<T: Real>(
    factor: &SpdFactor<T>,
    lx: ArrayView2<'_, T>,
    ly: ArrayView2<'_, T>,
    ops: &PnOperators<T>,
) -> Result<ClosureBlocks<T>> {
    let h = assemble_h(factor);
    assemble_closure(h.view(), symmetrize(lx).view(), symmetrize(ly).view(), ops)
}

/// `H = I`, `M_x = M_y = 0`: the truncation `u_{N+1} = 0`, i.e. linear PN.
pub fn linear_pn_closure<T: Real>(ops: &PnOperators<T>) -> ClosureBlocks<T> {
    let n1 = ops.order() + 1;
    let eye = Array2::<T>::eye(n1);
    let zero = Array2::<T>::zeros((n1, n1));
    assemble_closure(eye.view(), zero.view(), zero.view(), ops).expect("shapes are consistent")
}

/// Random constrained closure for diagnostics and tests.
///
/// `L` has off-diagonal entries from U(−1, 1) and diagonal entries from
/// U(0.5, 1.5), which keeps `cond(H)` moderate so that floating-point checks of
/// the symmetrizer stay near machine precision. `L_x`, `L_y` have U(−1, 1)
/// entries.
pub fn sample_constrained_closure<T: Real, R: Rng>(
    ops: &PnOperators<T>,
    rng: &mut R,
    epsilon: T,
) -> ClosureBlocks<T> {
    let n1 = ops.order() + 1;
    let raw = Array2::from_shape_fn((n1, n1), |(i, j)| {
        if i == j {
            T::lit(rng.gen_range(0.5..1.5))
        } else {
            T::lit(rng.gen_range(-1.0..1.0))
        }
    });
    let mut uniform = |_| T::lit(rng.gen_range(-1.0..1.0));
    let lx = Array2::from_shape_fn((n1, n1), &mut uniform);
    let ly = Array2::from_shape_fn((n1, n1), &mut uniform);
    let factor = SpdFactor::new(raw, epsilon).expect("square factor, positive epsilon");
    closure_from_factors(&factor, lx.view(), ly.view(), ops).expect("shapes are consistent")
}

/// `𝒜^ML`, `ℬ^ML`: the PN matrices with the last block row replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct MlSystemMatrices<T> {
    pub order: usize,
    pub a_ml: Array2<T>,
    pub b_ml: Array2<T>,
}

pub fn assemble_ml_matrices<T: Real>(
    ops: &PnOperators<T>,
    blocks: &ClosureBlocks<T>,
) -> Result<MlSystemMatrices<T>> {
    let n = ops.order();
    if blocks.g_prev.dim() != (n + 1, n) || blocks.g_last.dim() != (n + 1, n + 1) {
        return Err(Error::DimensionMismatch(format!(
            "closure blocks {:?}/{:?} for order {n}",
            blocks.g_prev.dim(),
            blocks.g_last.dim()
        )));
    }
    let ix = &ops.indexing;
    let last = ix.block_range(n);
    let prev = ix.block_range(n - 1);
    let half = T::lit(0.5);
    let replace = |full: &Array2<T>, p: &Array2<T>, q: &Array2<T>| {
        let mut m = full.clone();
        m.slice_mut(s![last.clone(), ..]).fill(T::zero());
        m.slice_mut(s![last.clone(), prev.clone()]).assign(&p.mapv(|v| v * half));
        m.slice_mut(s![last.clone(), last.clone()]).assign(&q.mapv(|v| v * half));
        m
    };
    Ok(MlSystemMatrices {
        order: n,
        a_ml: replace(&ops.a_full, &blocks.g_prev, &blocks.g_last),
        b_ml: replace(&ops.b_full, &blocks.k_prev, &blocks.k_last),
    })
}

/// `𝒮 = diag(I, …, I, H⁻¹)`, with the inverse taken through Cholesky.
pub fn symmetrizer<T: Real>(flat_size: usize, h: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n1 = h.nrows();
    let h_inv = linalg::spd_inverse(h)?;
    let mut s = Array2::eye(flat_size);
    let o = flat_size - n1;
    s.slice_mut(s![o.., o..]).assign(&h_inv);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperbolicityReport {
    pub directions: usize,
    /// Largest `|Im λ|` over all sampled directions.
    pub max_imag: f64,
    /// Largest `‖𝒮M − (𝒮M)ᵀ‖_F` over all sampled directions.
    pub max_defect: f64,
}

impl HyperbolicityReport {
    pub fn passes(&self, imag_tol: f64, defect_tol: f64) -> bool {
        self.max_imag < imag_tol && self.max_defect < defect_tol
    }
}

/// Samples `n_dirs` unit directions from `seed` and checks the spectrum of
/// `n_x 𝒜^ML + n_y ℬ^ML` and the symmetry of `𝒮 (n_x 𝒜^ML + n_y ℬ^ML)`.
pub fn verify_hyperbolicity<T: Real>(
    mats: &MlSystemMatrices<T>,
    h: ArrayView2<'_, T>,
    n_dirs: usize,
    seed: u64,
) -> Result<HyperbolicityReport> {
    let s = symmetrizer(mats.a_ml.nrows(), h)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = HyperbolicityReport {
        directions: n_dirs,
        max_imag: 0.0,
        max_defect: 0.0,
    };
    for _ in 0..n_dirs {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (T::lit(angle.cos()), T::lit(angle.sin()));
        let m = &mats.a_ml * nx + &mats.b_ml * ny;
        let imag = linalg::eigenvalues(m.view())
            .iter()
            .fold(0.0f64, |acc, z| acc.max(z.im.abs()));
        let defect = linalg::asymmetry(s.dot(&m).view()).as_f64();
        report.max_imag = report.max_imag.max(imag);
        report.max_defect = report.max_defect.max(defect);
    }
    Ok(report)
}

/// Upper bound on the spectral radius: the smaller of the 1- and ∞-norms.
pub fn spectral_bound<T: Real>(m: ArrayView2<'_, T>) -> T {
    linalg::norm_1(m).min(linalg::norm_inf(m))
}

/// Per-direction wavespeed bounds `(λx, λy)` for the Rusanov dissipation.
pub fn wavespeed_bound<T: Real>(mats: &MlSystemMatrices<T>) -> (T, T) {
    (spectral_bound(mats.a_ml.view()), spectral_bound(mats.b_ml.view()))
}

/// `C⁻¹ B` for lower triangular `C`.
fn lower_solve<T: Real>(c: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        for i in 0..c.nrows() {
            let mut v = x[[i, col]];
            for k in 0..i {
                v -= c[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = v / c[[i, i]];
        }
    }
    x
}

/// `P M P⁻¹` with `P = diag(I, C⁻¹)` and `H = C Cᵀ`; symmetric whenever `M`
/// is symmetrized by `diag(I, H⁻¹)`.
pub fn conjugated<T: Real>(m: ArrayView2<'_, T>, h: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let c = linalg::cholesky(h)?;
    let f = m.nrows();
    let o = f - h.nrows();
    let mut t = m.to_owned();
    let rows = lower_solve(c.view(), t.slice(s![o.., ..]));
    t.slice_mut(s![o.., ..]).assign(&rows);
    let cols = t.slice(s![.., o..]).dot(&c);
    t.slice_mut(s![.., o..]).assign(&cols);
    Ok(t)
}

/// Tighter wavespeed bounds using the symmetric conjugates `P 𝒜^ML P⁻¹`:
/// the smaller of [`wavespeed_bound`] and the ∞- and Frobenius norms of the
/// conjugate, whose spectrum is the same.
pub fn symmetrized_wavespeed_bound<T: Real>(mats: &MlSystemMatrices<T>, h: ArrayView2<'_, T>) -> Result<(T, T)> {
    let (cx, cy) = wavespeed_bound(mats);
    let tight = |m: &Array2<T>, cheap: T| -> Result<T> {
        let t = conjugated(m.view(), h)?;
        Ok(cheap.min(linalg::norm_inf(t.view())).min(linalg::frobenius(t.view())))
    };
    Ok((tight(&mats.a_ml, cx)?, tight(&mats.b_ml, cy)?))
}
