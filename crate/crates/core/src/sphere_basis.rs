//! Legendre functions, real spherical harmonics, and a sphere quadrature
//! exact for every inner product the moment assembly needs.
//!
//! Associated Legendre functions carry the Condon–Shortley phase,
//! `P_1^1(μ) = −√(1−μ²)`. Entry signs of the assembled transport matrices
//! depend on this choice; their magnitudes and spectra do not.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Real;

const DOMAIN_SLACK: f64 = 1e-14;

/// Direction on the unit sphere, `Ω = (√(1−μ²) cos φ, √(1−μ²) sin φ, μ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDirection<T> {
    pub mu: T,
    pub phi: T,
}

impl<T: Real> SphericalDirection<T> {
    pub fn new(mu: T, phi: T) -> Result<Self> {
        check_domain(mu)?;
        let two_pi = T::lit(2.0 * PI);
        if !(phi >= T::zero() && phi < two_pi) {
            return Err(Error::Domain { value: phi.as_f64() });
        }
        Ok(Self { mu, phi })
    }

    fn sin_theta(&self) -> T {
        (T::one() - self.mu * self.mu).max(T::zero()).sqrt()
    }

    pub fn omega_x(&self) -> T {
        self.sin_theta() * self.phi.cos()
    }

    pub fn omega_y(&self) -> T {
        self.sin_theta() * self.phi.sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HarmonicKind {
    Zonal,
    Cos,
    Sin,
}

/// One real spherical harmonic `Φ_l^0`, `Φ_l^{m,c}` or `Φ_l^{m,s}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BasisIndex {
    pub l: usize,
    pub m: usize,
    pub kind: HarmonicKind,
}

impl BasisIndex {
    pub fn new(l: usize, m: usize, kind: HarmonicKind) -> Result<Self> {
        let ok = m <= l && ((kind == HarmonicKind::Zonal) == (m == 0));
        if !ok {
            return Err(Error::InvalidIndex(format!("(l={l}, m={m}, {kind:?})")));
        }
        Ok(Self { l, m, kind })
    }

    pub fn zonal(l: usize) -> Self {
        Self { l, m: 0, kind: HarmonicKind::Zonal }
    }

    /// Member of the planar-symmetric space (even in μ).
    pub fn is_planar(&self) -> bool {
        (self.l + self.m) % 2 == 0
    }

    /// Every real harmonic of degree `l`, zonal first, then cos/sin per order.
    pub fn all_of_degree(l: usize) -> Vec<Self> {
        let mut out = vec![Self::zonal(l)];
        for m in 1..=l {
            out.push(Self { l, m, kind: HarmonicKind::Cos });
            out.push(Self { l, m, kind: HarmonicKind::Sin });
        }
        out
    }
}

fn check_domain<T: Real>(mu: T) -> Result<()> {
    if mu.abs() > T::one() + T::lit(DOMAIN_SLACK) || mu.is_nan() {
        return Err(Error::Domain { value: mu.as_f64() });
    }
    Ok(())
}

/// Legendre polynomial `P_l(μ)` by the Bonnet recurrence.
pub fn eval_legendre<T: Real>(l: usize, mu: T) -> Result<T> {
    check_domain(mu)?;
    Ok(legendre_unchecked(l, mu))
}

fn legendre_unchecked<T: Real>(l: usize, mu: T) -> T {
    let mut p_prev = T::one();
    if l == 0 {
        return p_prev;
    }
    let mut p = mu;
    for k in 2..=l {
        let k_t = T::from_usize_exact(k);
        let next = ((T::lit(2.0) * k_t - T::one()) * mu * p - (k_t - T::one()) * p_prev) / k_t;
        p_prev = p;
        p = next;
    }
    p
}

/// Associated Legendre function `P_l^m(μ)` with the Condon–Shortley phase.
pub fn eval_assoc_legendre<T: Real>(l: usize, m: usize, mu: T) -> Result<T> {
    check_domain(mu)?;
    if m > l {
        return Err(Error::InvalidIndex(format!("order m={m} exceeds degree l={l}")));
    }
    Ok(assoc_legendre_unchecked(l, m, mu))
}

fn assoc_legendre_unchecked<T: Real>(l: usize, m: usize, mu: T) -> T {
    if m == 0 {
        return legendre_unchecked(l, mu);
    }
    // P_m^m = (-1)^m (2m-1)!! (1-μ²)^{m/2}
    let sin_theta = (T::one() - mu * mu).max(T::zero()).sqrt();
    let mut pmm = T::one();
    for k in 1..=m {
        pmm = -pmm * T::from_usize_exact(2 * k - 1) * sin_theta;
    }
    if l == m {
        return pmm;
    }
    let mut p_prev = pmm;
    let mut p = mu * T::from_usize_exact(2 * m + 1) * pmm;
    for k in (m + 2)..=l {
        let next = (T::from_usize_exact(2 * k - 1) * mu * p - T::from_usize_exact(k + m - 1) * p_prev)
            / T::from_usize_exact(k - m);
        p_prev = p;
        p = next;
    }
    p
}

/// `N_l^m = √((2l+1)/(4π) · (l−m)!/(l+m)!)`.
pub fn normalization<T: Real>(l: usize, m: usize) -> T {
    let mut ratio = 1.0f64;
    for k in (l - m + 1)..=(l + m) {
        ratio /= k as f64;
    }
    T::lit(((2 * l + 1) as f64 / (4.0 * PI) * ratio).sqrt())
}

/// Value of the real spherical harmonic `idx` in direction `dir`.
pub fn eval_basis<T: Real>(idx: BasisIndex, dir: SphericalDirection<T>) -> Result<T> {
    check_domain(dir.mu)?;
    Ok(basis_unchecked(idx, dir.mu, dir.phi))
}

fn basis_unchecked<T: Real>(idx: BasisIndex, mu: T, phi: T) -> T {
    let radial = normalization::<T>(idx.l, idx.m) * assoc_legendre_unchecked(idx.l, idx.m, mu);
    let m = T::from_usize_exact(idx.m);
    match idx.kind {
        HarmonicKind::Zonal => radial,
        HarmonicKind::Cos => T::lit(std::f64::consts::SQRT_2) * radial * (m * phi).cos(),
        HarmonicKind::Sin => T::lit(std::f64::consts::SQRT_2) * radial * (m * phi).sin(),
    }
}

/// Tensor Gauss–Legendre × uniform-azimuth rule on the sphere.
#[derive(Debug, Clone)]
pub struct SphereQuadrature<T> {
    /// Highest harmonic degree the rule was sized for.
    pub n_max: usize,
    pub mu_nodes: Vec<T>,
    pub mu_weights: Vec<T>,
    pub phi_nodes: Vec<T>,
    pub phi_weight: T,
}

impl<T: Real> SphereQuadrature<T> {
    /// Rule exact for `⟨Ω_{x|y} Φ_β, Φ_α⟩` whenever both degrees are at most
    /// `n_max + 1`: `n_max + 5` Gauss nodes in μ and `4 n_max + 8` uniform
    /// nodes in φ.
    pub fn new(n_max: usize) -> Self {
        let (mu_nodes, mu_weights) = gauss_legendre::<T>(n_max + 5);
        let n_phi = 4 * n_max + 8;
        let h = T::lit(2.0 * PI / n_phi as f64);
        let phi_nodes = (0..n_phi).map(|k| T::from_usize_exact(k) * h).collect();
        Self {
            n_max,
            mu_nodes,
            mu_weights,
            phi_nodes,
            phi_weight: h,
        }
    }

    /// Highest harmonic degree for which transport inner products are exact.
    pub fn exact_degree(&self) -> usize {
        self.n_max + 1
    }

    pub fn len(&self) -> usize {
        self.mu_nodes.len() * self.phi_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterates `(direction, weight)` pairs, μ-major.
    pub fn points(&self) -> impl Iterator<Item = (SphericalDirection<T>, T)> + '_ {
        self.mu_nodes.iter().zip(&self.mu_weights).flat_map(move |(&mu, &w)| {
            self.phi_nodes
                .iter()
                .map(move |&phi| (SphericalDirection { mu, phi }, w * self.phi_weight))
        })
    }

    pub fn integrate<F: FnMut(SphericalDirection<T>) -> T>(&self, mut f: F) -> T {
        self.points().map(|(d, w)| w * f(d)).sum()
    }

    /// Values of every basis function in `indices` at every node:
    /// row = basis function, column = node.
    pub fn tabulate(&self, indices: &[BasisIndex]) -> ndarray::Array2<T> {
        let pts: Vec<_> = self.points().map(|(d, _)| d).collect();
        ndarray::Array2::from_shape_fn((indices.len(), pts.len()), |(a, q)| {
            basis_unchecked(indices[a], pts[q].mu, pts[q].phi)
        })
    }

    pub fn weights(&self) -> Vec<T> {
        self.points().map(|(_, w)| w).collect()
    }

    /// Matrix of pairwise inner products `⟨Φ_α, Φ_β⟩`.
    pub fn gram_matrix(&self, indices: &[BasisIndex]) -> ndarray::Array2<T> {
        let table = self.tabulate(indices);
        let w = ndarray::Array1::from(self.weights());
        let weighted = &table * &w;
        weighted.dot(&table.t())
    }
}

/// Gauss–Legendre nodes (ascending) and weights on [−1, 1].
pub fn gauss_legendre<T: Real>(n: usize) -> (Vec<T>, Vec<T>) {
    let mut nodes = vec![T::zero(); n];
    let mut weights = vec![T::zero(); n];
    let tol = T::epsilon() * T::lit(4.0);
    for i in 0..n.div_ceil(2) {
        let mut x = T::lit((PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos());
        let mut dp = T::one();
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= tol {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d.is_finite() {
            dp = d;
        }
        let w = T::lit(2.0) / ((T::one() - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }
    (nodes, weights)
}

fn legendre_with_derivative<T: Real>(n: usize, x: T) -> (T, T) {
    let p = legendre_unchecked(n, x);
    let p_prev = if n == 0 { T::zero() } else { legendre_unchecked(n - 1, x) };
    let n_t = T::from_usize_exact(n);
    let d = n_t * (x * p - p_prev) / (x * x - T::one());
    (p, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn legendre_examples() {
        assert_eq!(eval_legendre(0, 0.3).unwrap(), 1.0);
        assert_eq!(eval_legendre(1, 0.3).unwrap(), 0.3);
        let closed = (3.0 * 0.25 - 1.0) / 2.0;
        assert_abs_diff_eq!(eval_legendre(2, 0.5).unwrap(), closed, epsilon = 1e-15);
        assert_abs_diff_eq!(closed, -0.125, epsilon = 1e-15);
    }

    #[test]
    fn legendre_rejects_out_of_domain() {
        assert!(matches!(eval_legendre(3, 1.0 + 1e-12), Err(Error::Domain { .. })));
        assert!(eval_legendre(3, 1.0 + 1e-15).is_ok());
        assert!(matches!(eval_assoc_legendre(2, 3, 0.1), Err(Error::InvalidIndex(_))));
    }

    #[test]
    fn legendre_endpoints_stable_to_degree_64() {
        for l in 0..=64 {
            let s = if l % 2 == 0 { 1.0 } else { -1.0 };
            assert_abs_diff_eq!(eval_legendre(l, 1.0).unwrap(), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(eval_legendre(l, -1.0).unwrap(), s, epsilon = 1e-12);
        }
    }

    #[test]
    fn assoc_legendre_examples() {
        assert_eq!(
            eval_assoc_legendre(3, 0, 0.7).unwrap(),
            eval_legendre(3, 0.7).unwrap()
        );
        // Closed form P_1^1 = -sqrt(1 - μ²).
        assert_eq!(eval_assoc_legendre(1, 1, 0.0).unwrap(), -1.0);
        let mu: f64 = 0.4;
        let closed_22 = 3.0 * (1.0 - mu * mu);
        let closed_31 = -1.5 * (5.0 * mu * mu - 1.0) * (1.0 - mu * mu).sqrt();
        assert_abs_diff_eq!(eval_assoc_legendre(2, 2, mu).unwrap(), closed_22, epsilon = 1e-14);
        assert_abs_diff_eq!(eval_assoc_legendre(3, 1, mu).unwrap(), closed_31, epsilon = 1e-14);
    }

    #[test]
    fn parity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for l in 0..=12 {
            for idx in BasisIndex::all_of_degree(l) {
                let sign = if (l + idx.m) % 2 == 0 { 1.0 } else { -1.0 };
                for _ in 0..100 {
                    let mu: f64 = rng.gen_range(-1.0..=1.0);
                    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
                    let a = eval_basis(idx, SphericalDirection::new(mu, phi).unwrap()).unwrap();
                    let b = eval_basis(idx, SphericalDirection::new(-mu, phi).unwrap()).unwrap();
                    assert_eq!(b, sign * a, "{idx:?} at mu={mu}");
                    let pa = eval_assoc_legendre(l, idx.m, mu).unwrap();
                    let pb = eval_assoc_legendre(l, idx.m, -mu).unwrap();
                    assert_eq!(pb, sign * pa);
                }
            }
        }
    }

    #[test]
    fn basis_examples() {
        let d = SphericalDirection::new(0.123, 4.0).unwrap();
        let v = eval_basis(BasisIndex::zonal(0), d).unwrap();
        assert_abs_diff_eq!(v, 1.0 / (4.0 * PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.2820948, epsilon = 1e-7);

        let idx = BasisIndex::new(1, 1, HarmonicKind::Cos).unwrap();
        let v: f64 = eval_basis(idx, SphericalDirection::new(0.0, 0.0).unwrap()).unwrap();
        let closed = (2.0f64).sqrt() * (3.0 / (8.0 * PI)).sqrt() * 1.0;
        assert_abs_diff_eq!(v.abs(), closed, epsilon = 1e-15);
        assert_abs_diff_eq!(v.abs(), 0.4886025, epsilon = 1e-7);
    }

    #[test]
    fn basis_index_validation() {
        assert!(BasisIndex::new(2, 0, HarmonicKind::Cos).is_err());
        assert!(BasisIndex::new(2, 1, HarmonicKind::Zonal).is_err());
        assert!(BasisIndex::new(2, 3, HarmonicKind::Sin).is_err());
        assert!(BasisIndex::new(3, 1, HarmonicKind::Sin).unwrap().is_planar());
        assert!(!BasisIndex::new(3, 2, HarmonicKind::Sin).unwrap().is_planar());
    }

    #[test]
    fn quadrature_basic_integrals() {
        let q = SphereQuadrature::<f64>::new(6);
        let total: f64 = q.mu_weights.iter().sum::<f64>() * q.phi_nodes.len() as f64 * q.phi_weight;
        assert_abs_diff_eq!(total, 4.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(q.integrate(|_| 1.0), 4.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(q.integrate(|d| d.omega_x()), 0.0, epsilon = 1e-12);
        // ∫ Ω_x² = 4π/3
        assert_abs_diff_eq!(q.integrate(|d| d.omega_x().powi(2)), 4.0 * PI / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn gauss_legendre_matches_known_rule() {
        let (x, w) = gauss_legendre::<f64>(3);
        let r = (0.6f64).sqrt();
        assert_abs_diff_eq!(x[0], -r, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[0], 5.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[1], 8.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn gram_identity_up_to_degree_nine() {
        let q = SphereQuadrature::<f64>::new(9);
        let idx: Vec<_> = (0..=9).flat_map(BasisIndex::all_of_degree).collect();
        assert_eq!(idx.len(), 100);
        let g = q.gram_matrix(&idx);
        for ((i, j), v) in g.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-12, "gram[{i},{j}] = {v}");
        }
    }

    #[test]
    fn single_precision_basis_agrees() {
        let d32 = SphericalDirection::new(0.3f32, 1.1f32).unwrap();
        let d64 = SphericalDirection::new(0.3f64, 1.1f64).unwrap();
        let idx = BasisIndex::new(4, 2, HarmonicKind::Sin).unwrap();
        let a = eval_basis(idx, d32).unwrap() as f64;
        let b = eval_basis(idx, d64).unwrap();
        assert!((a - b).abs() < 1e-5);
    }
}
