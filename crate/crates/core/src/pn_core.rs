//! Moment ordering, transport matrices and the collision matrix of the real
//! planar PN system `∂t u + 𝒜 ∂x u + ℬ ∂y u = 𝒬 u`.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;
use crate::sphere_basis::{BasisIndex, HarmonicKind, SphereQuadrature};

/// Number of planar moments of degree at most `order`.
pub const fn flat_size(order: usize) -> usize {
    (order + 1) * (order + 2) / 2
}

/// Entries below this after quadrature are exact zeros polluted by roundoff.
const ASSEMBLY_ZERO: f64 = 1e-13;

/// Flat layout of the planar moments `u = (u_0, …, u_N)`.
///
/// Degree block `l` has `l + 1` entries: `(R_l^0, R_l^2, I_l^2, …)` for even
/// `l` and `(R_l^1, I_l^1, R_l^3, I_l^3, …)` for odd `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MomentIndexing {
    order: usize,
    entries: Vec<BasisIndex>,
}

impl MomentIndexing {
    pub fn new(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::InvalidOrder(order));
        }
        Ok(Self::new_unchecked(order))
    }

    fn new_unchecked(order: usize) -> Self {
        let entries = (0..=order).flat_map(degree_block).collect();
        Self { order, entries }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn flat_size(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[BasisIndex] {
        &self.entries
    }

    pub fn entry(&self, pos: usize) -> BasisIndex {
        self.entries[pos]
    }

    /// First flat position of degree block `l`.
    pub fn block_offset(&self, l: usize) -> usize {
        l * (l + 1) / 2
    }

    pub fn block_range(&self, l: usize) -> std::ops::Range<usize> {
        let o = self.block_offset(l);
        o..o + l + 1
    }

    pub fn position(&self, idx: BasisIndex) -> Option<usize> {
        if idx.l > self.order || !idx.is_planar() {
            return None;
        }
        let o = self.block_offset(idx.l);
        let local = match idx.kind {
            HarmonicKind::Zonal => 0,
            kind => {
                // even l: m = 2, 4, …  start at local 1; odd l: m = 1, 3, … start at 0
                let pair = if idx.l % 2 == 0 { idx.m / 2 - 1 } else { idx.m / 2 };
                let base = if idx.l % 2 == 0 { 1 } else { 0 };
                base + 2 * pair + usize::from(kind == HarmonicKind::Sin)
            }
        };
        Some(o + local)
    }
}

fn degree_block(l: usize) -> Vec<BasisIndex> {
    let mut out = Vec::with_capacity(l + 1);
    let first_m = if l % 2 == 0 {
        out.push(BasisIndex::zonal(l));
        2
    } else {
        1
    };
    for m in (first_m..=l).step_by(2) {
        out.push(BasisIndex { l, m, kind: HarmonicKind::Cos });
        out.push(BasisIndex { l, m, kind: HarmonicKind::Sin });
    }
    out
}

/// Transport matrices of the order-`N` system and their degree blocks.
///
/// `a_full` stores 𝒜 itself; its `(l+1, l)` block equals `A_l / 2`.
#[derive(Debug, Clone)]
pub struct PnOperators<T> {
    pub indexing: MomentIndexing,
    pub a_full: Array2<T>,
    pub b_full: Array2<T>,
    /// `A_0 … A_N`; the last couples `u_N` to the omitted degree `N + 1`.
    a_blocks: Vec<Array2<T>>,
    b_blocks: Vec<Array2<T>>,
}

impl<T: Real> PnOperators<T> {
    pub fn order(&self) -> usize {
        self.indexing.order()
    }

    pub fn flat_size(&self) -> usize {
        self.indexing.flat_size()
    }

    /// `A_l ∈ ℝ^{(l+2)×(l+1)}` for `0 ≤ l ≤ N`.
    pub fn a_block(&self, l: usize) -> ArrayView2<'_, T> {
        self.a_blocks[l].view()
    }

    pub fn b_block(&self, l: usize) -> ArrayView2<'_, T> {
        self.b_blocks[l].view()
    }

    /// `A_N`, the coupling of `u_N` to the omitted `u_{N+1}`.
    pub fn a_next(&self) -> ArrayView2<'_, T> {
        self.a_blocks[self.order()].view()
    }

    pub fn b_next(&self) -> ArrayView2<'_, T> {
        self.b_blocks[self.order()].view()
    }

    /// Rebuilds 𝒜 from the blocks `A_0 … A_{N−1}`.
    pub fn a_from_blocks(&self) -> Array2<T> {
        block_tridiagonal(&self.indexing, &self.a_blocks[..self.order()])
    }

    pub fn b_from_blocks(&self) -> Array2<T> {
        block_tridiagonal(&self.indexing, &self.b_blocks[..self.order()])
    }

    pub fn provenance(&self) -> OperatorProvenance {
        OperatorProvenance {
            order: self.order(),
            flat_size: self.flat_size(),
            phase_convention: "condon-shortley".to_string(),
            a_frobenius: linalg::frobenius(self.a_full.view()).as_f64(),
            b_frobenius: linalg::frobenius(self.b_full.view()).as_f64(),
            a_nonzeros: self.a_full.iter().filter(|v| **v != T::zero()).count(),
            b_nonzeros: self.b_full.iter().filter(|v| **v != T::zero()).count(),
        }
    }
}

/// Summary of an operator set, recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorProvenance {
    pub order: usize,
    pub flat_size: usize,
    pub phase_convention: String,
    pub a_frobenius: f64,
    pub b_frobenius: f64,
    pub a_nonzeros: usize,
    pub b_nonzeros: usize,
}

fn block_tridiagonal<T: Real>(ix: &MomentIndexing, blocks: &[Array2<T>]) -> Array2<T> {
    let n = ix.flat_size();
    let half = T::lit(0.5);
    let mut m = Array2::zeros((n, n));
    for (l, blk) in blocks.iter().enumerate() {
        let rows = ix.block_range(l + 1);
        let cols = ix.block_range(l);
        m.slice_mut(s![rows.clone(), cols.clone()]).assign(&blk.mapv(|v| v * half));
        m.slice_mut(s![cols, rows]).assign(&blk.t().mapv(|v| v * half));
    }
    m
}

/// Assembles 𝒜, ℬ at order `order` by quadrature of `⟨Ω_{x|y} Φ_β, Φ_α⟩`.
///
/// The quadrature must be exact through degree `order + 1`, because the
/// blocks `A_N`, `B_N` coupling to the omitted degree are assembled too.
pub fn assemble_operators<T: Real>(order: usize, quad: &SphereQuadrature<T>) -> Result<PnOperators<T>> {
    let indexing = MomentIndexing::new(order)?;
    if quad.exact_degree() < order + 1 {
        return Err(Error::QuadratureInsufficient {
            needed: order + 1,
            available: quad.exact_degree(),
        });
    }
    let big = MomentIndexing::new_unchecked(order + 1);
    let table = quad.tabulate(big.entries());
    let w = Array1::from(quad.weights());

    let gram = {
        let weighted = &table * &w;
        weighted.dot(&table.t())
    };
    let gram_defect = gram
        .indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { T::one() } else { T::zero() }).abs())
        .fold(T::zero(), T::max);
    if gram_defect > T::lit(1e-10).max(T::epsilon() * T::lit(1e3)) {
        return Err(Error::QuadratureInsufficient {
            needed: order + 1,
            available: quad.exact_degree(),
        });
    }

    let (ox, oy): (Vec<T>, Vec<T>) = quad.points().map(|(d, _)| (d.omega_x(), d.omega_y())).unzip();
    let project = |omega: &[T]| -> Array2<T> {
        let wo = Array1::from_iter(w.iter().zip(omega).map(|(&a, &b)| a * b));
        let raw = (&table * &wo).dot(&table.t());
        let mut m = linalg::symmetric_part(raw.view());
        let zero = T::lit(ASSEMBLY_ZERO).max(T::epsilon() * T::lit(64.0));
        m.mapv_inplace(|v| if v.abs() < zero { T::zero() } else { v });
        m
    };
    let a_big = project(&ox);
    let b_big = project(&oy);

    let two = T::lit(2.0);
    let blocks = |m: &Array2<T>| -> Vec<Array2<T>> {
        (0..=order)
            .map(|l| {
                m.slice(s![big.block_range(l + 1), big.block_range(l)])
                    .mapv(|v| v * two)
            })
            .collect()
    };
    let a_blocks = blocks(&a_big);
    let b_blocks = blocks(&b_big);
    let n = indexing.flat_size();
    Ok(PnOperators {
        a_full: a_big.slice(s![..n, ..n]).to_owned(),
        b_full: b_big.slice(s![..n, ..n]).to_owned(),
        indexing,
        a_blocks,
        b_blocks,
    })
}

/// Convenience: builds the quadrature and assembles in one go.
pub fn operators_for_order<T: Real>(order: usize) -> Result<PnOperators<T>> {
    let quad = SphereQuadrature::new(order);
    assemble_operators(order, &quad)
}

/// Absorption and isotropic scattering cross sections, per unit length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionSpec<T> {
    pub sigma_a: T,
    pub sigma_s: T,
}

impl<T: Real> CollisionSpec<T> {
    pub fn new(sigma_a: T, sigma_s: T) -> Result<Self> {
        if !(sigma_a >= T::zero() && sigma_s >= T::zero()) {
            return Err(Error::Config(format!(
                "cross sections must be nonnegative (sigma_a={}, sigma_s={})",
                sigma_a.as_f64(),
                sigma_s.as_f64()
            )));
        }
        Ok(Self { sigma_a, sigma_s })
    }

    /// Diagonal of 𝒬: `−σ_a` for `u_0`, `−(σ_a + σ_s)` for every higher moment.
    pub fn diagonal(&self, order: usize) -> Vec<T> {
        let mut d = vec![-(self.sigma_a + self.sigma_s); flat_size(order)];
        d[0] = -self.sigma_a;
        d
    }
}

pub fn collision_matrix<T: Real>(order: usize, spec: &CollisionSpec<T>) -> Array2<T> {
    Array2::from_diag(&Array1::from(spec.diagonal(order)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    use crate::sphere_basis::{eval_basis, SphericalDirection};

    #[test]
    fn indexing_layouts() {
        let ix = MomentIndexing::new(1).unwrap();
        assert_eq!(ix.flat_size(), 3);
        assert_eq!(ix.entry(0), BasisIndex::zonal(0));
        assert_eq!(ix.entry(1), BasisIndex { l: 1, m: 1, kind: HarmonicKind::Cos });
        assert_eq!(ix.entry(2), BasisIndex { l: 1, m: 1, kind: HarmonicKind::Sin });

        let ix = MomentIndexing::new(2).unwrap();
        assert_eq!(ix.flat_size(), 6);
        let sizes: Vec<_> = (0..=2).map(|l| ix.block_range(l).len()).collect();
        assert_eq!(sizes, vec![1, 2, 3]);
        assert_eq!(ix.entry(3), BasisIndex::zonal(2));
        assert_eq!(ix.entry(4), BasisIndex { l: 2, m: 2, kind: HarmonicKind::Cos });

        assert_eq!(MomentIndexing::new(9).unwrap().flat_size(), 55);
        assert!(matches!(MomentIndexing::new(0), Err(Error::InvalidOrder(0))));
    }

    #[test]
    fn indexing_is_bijective() {
        for n in 1..=15 {
            let ix = MomentIndexing::new(n).unwrap();
            assert_eq!(ix.flat_size(), flat_size(n));
            for (pos, &e) in ix.entries().iter().enumerate() {
                assert!(e.is_planar());
                assert_eq!(ix.position(e), Some(pos));
            }
            for l in 0..=n {
                for e in &ix.entries()[ix.block_range(l)] {
                    assert_eq!(e.l, l);
                }
            }
        }
    }

    #[test]
    fn structure_symmetry_and_sparsity() {
        for n in [1, 2, 3, 5] {
            let ops = operators_for_order::<f64>(n).unwrap();
            let ix = &ops.indexing;
            for m in [&ops.a_full, &ops.b_full] {
                assert!(linalg::asymmetry(m.view()) < 1e-12);
                for ((i, j), v) in m.indexed_iter() {
                    let (li, lj) = (ix.entry(i).l, ix.entry(j).l);
                    if li.abs_diff(lj) != 1 {
                        assert!(v.abs() < 1e-12, "({i},{j}) = {v}");
                    }
                }
            }
            assert_eq!(ops.a_from_blocks(), ops.a_full);
            assert_eq!(ops.b_from_blocks(), ops.b_full);
            for l in 0..=n {
                assert_eq!(ops.a_block(l).dim(), (l + 2, l + 1));
            }
        }
    }

    /// Independent oracle: midpoint rule in (θ, φ) on a fine grid.
    fn brute_inner(f: impl Fn(SphericalDirection<f64>) -> f64) -> f64 {
        let (nt, np) = (800, 800);
        let (ht, hp) = (PI / nt as f64, 2.0 * PI / np as f64);
        let mut s = 0.0;
        for a in 0..nt {
            let theta = (a as f64 + 0.5) * ht;
            for b in 0..np {
                let phi = (b as f64 + 0.5) * hp;
                let d = SphericalDirection { mu: theta.cos(), phi };
                s += f(d) * theta.sin() * ht * hp;
            }
        }
        s
    }

    #[test]
    fn zeroth_to_first_coupling_entry() {
        let c = BasisIndex { l: 1, m: 1, kind: HarmonicKind::Cos };
        let z = BasisIndex::zonal(0);
        let oracle = brute_inner(|d| d.omega_x() * eval_basis(c, d).unwrap() * eval_basis(z, d).unwrap());
        assert_abs_diff_eq!(oracle.abs(), 1.0 / 3f64.sqrt(), epsilon = 1e-5);

        let ops = operators_for_order::<f64>(2).unwrap();
        let j = ops.indexing.position(c).unwrap();
        assert_abs_diff_eq!(ops.a_full[[0, j]], oracle, epsilon = 1e-5);
        assert_abs_diff_eq!(ops.a_full[[0, j]].abs(), 0.57735, epsilon = 1e-5);
        assert_abs_diff_eq!(ops.a_full[[0, j]].abs(), 1.0 / 3f64.sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn nesting_and_next_block() {
        let lo = operators_for_order::<f64>(3).unwrap();
        let hi = operators_for_order::<f64>(4).unwrap();
        let n = lo.flat_size();
        let sub = hi.a_full.slice(s![..n, ..n]);
        for (x, y) in sub.iter().zip(lo.a_full.iter()) {
            assert!((x - y).abs() < 1e-13);
        }
        // A_N of the order-3 system is the block A_3 of the order-4 system.
        for (x, y) in lo.a_next().iter().zip(hi.a_block(3).iter()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn quadrature_too_small_is_rejected() {
        let q = SphereQuadrature::<f64>::new(2);
        assert!(matches!(
            assemble_operators(4, &q),
            Err(Error::QuadratureInsufficient { .. })
        ));
    }

    #[test]
    fn transport_speeds_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=12 {
            let ops = operators_for_order::<f64>(n).unwrap();
            for _ in 0..100 {
                let t: f64 = rng.gen_range(0.0..2.0 * PI);
                let m = &ops.a_full * t.cos() + &ops.b_full * t.sin();
                let ev = linalg::symmetric_eigenvalues(m.view());
                let rho = ev.iter().fold(0.0f64, |a, b| a.max(b.abs()));
                assert!(rho <= 1.0 + 1e-10, "N={n}: spectral radius {rho}");
            }
        }
    }

    #[test]
    fn p1_axis_speeds() {
        let ops = operators_for_order::<f64>(1).unwrap();
        for m in [&ops.a_full, &ops.b_full] {
            let ev = linalg::symmetric_eigenvalues(m.view());
            let s = 1.0 / 3f64.sqrt();
            assert_abs_diff_eq!(ev[0], -s, epsilon = 1e-12);
            assert_abs_diff_eq!(ev[1], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ev[2], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn collision_examples() {
        let q = collision_matrix(2, &CollisionSpec::new(0.0, 1.0).unwrap());
        assert_eq!(q.diag().to_vec(), vec![0.0, -1.0, -1.0, -1.0, -1.0, -1.0]);
        assert!(collision_matrix(3, &CollisionSpec::new(0.0, 0.0).unwrap())
            .iter()
            .all(|v| *v == 0.0));
        let q = collision_matrix(1, &CollisionSpec::new(0.5, 2.0).unwrap());
        assert_eq!(q.diag().to_vec(), vec![-0.5, -2.5, -2.5]);
        assert_eq!(q[[0, 1]], 0.0);
        assert!(CollisionSpec::new(-0.1, 1.0).is_err());
    }

    #[test]
    fn assembles_in_single_precision() {
        let ops32 = operators_for_order::<f32>(3).unwrap();
        let ops64 = operators_for_order::<f64>(3).unwrap();
        for (a, b) in ops32.a_full.iter().zip(ops64.a_full.iter()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}
