//! Small dense kernels shared by the rest of the crate.
//!
//! Only the 2×2 and 3×3 symmetric cases show up in the model (a bivariate
//! noise vector and its three covariance parameters), so everything here is
//! written out by hand for those sizes. The chi-square quantile is computed
//! from the regularized lower incomplete gamma function by safeguarded
//! bisection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Relative pivot tolerance for [`cholesky3`].
pub const PD_TOLERANCE: f64 = 1e-12;

/// Determinant below which a 2×2 covariance is treated as singular.
pub const SINGULAR_DET: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("covariance is singular (det = {det})")]
    SingularCovariance { det: f64 },
    #[error("argument out of domain: {0}")]
    DomainError(String),
}

/// Symmetric 2×2 matrix stored as its three unique entries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMatrix2 {
    pub a11: f64,
    pub a22: f64,
    pub a12: f64,
}

impl SymMatrix2 {
    pub const ZERO: Self = Self { a11: 0.0, a22: 0.0, a12: 0.0 };
    pub const IDENTITY: Self = Self { a11: 1.0, a22: 1.0, a12: 0.0 };

    pub fn new(a11: f64, a22: f64, a12: f64) -> Self {
        Self { a11, a22, a12 }
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    /// `v v^T`.
    pub fn outer(v: [f64; 2]) -> Self {
        Self::new(v[0] * v[0], v[1] * v[1], v[0] * v[1])
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.a11 * k, self.a22 * k, self.a12 * k)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.a11 + other.a11, self.a22 + other.a22, self.a12 + other.a12)
    }

    /// True when the matrix is a valid (PSD) covariance.
    pub fn is_covariance(&self) -> bool {
        self.a11 >= 0.0 && self.a22 >= 0.0 && self.a12 * self.a12 <= self.a11 * self.a22
    }

    /// `z^T A^{-1} z`, failing when the matrix is singular.
    pub fn inverse_quadratic_form(&self, z: [f64; 2]) -> Result<f64, NumericsError> {
        let det = self.det();
        if det <= SINGULAR_DET {
            return Err(NumericsError::SingularCovariance { det });
        }
        let q = self.a22 * z[0] * z[0] - 2.0 * self.a12 * z[0] * z[1] + self.a11 * z[1] * z[1];
        Ok(q / det)
    }

    /// Lower Cholesky factor of a PSD matrix, returned as `(l11, l21, l22)`.
    ///
    /// Rank-deficient input yields a rank-deficient factor instead of an
    /// error, so sampling from a degenerate covariance is well defined.
    pub fn psd_cholesky(&self) -> [f64; 3] {
        let a11 = self.a11.max(0.0);
        let a22 = self.a22.max(0.0);
        if a11 > 0.0 {
            let l11 = a11.sqrt();
            let l21 = self.a12 / l11;
            let l22 = (a22 - l21 * l21).max(0.0).sqrt();
            [l11, l21, l22]
        } else {
            [0.0, 0.0, a22.sqrt()]
        }
    }
}

/// Symmetric 3×3 matrix. Entries are kept in the order
/// `(m00, m11, m22, m01, m02, m12)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymMatrix3 {
    pub entries: [f64; 6],
}

impl SymMatrix3 {
    pub fn identity() -> Self {
        Self::from_full([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn diag(d: [f64; 3]) -> Self {
        Self { entries: [d[0], d[1], d[2], 0.0, 0.0, 0.0] }
    }

    /// Builds from a full matrix; only the lower triangle is read.
    pub fn from_full(m: [[f64; 3]; 3]) -> Self {
        Self { entries: [m[0][0], m[1][1], m[2][2], m[1][0], m[2][0], m[2][1]] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let e = &self.entries;
        match (i.min(j), i.max(j)) {
            (0, 0) => e[0],
            (1, 1) => e[1],
            (2, 2) => e[2],
            (0, 1) => e[3],
            (0, 2) => e[4],
            (1, 2) => e[5],
            _ => panic!("index ({i}, {j}) out of range for 3x3 matrix"),
        }
    }

    pub fn to_full(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.get(i, j);
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest eigenvalue.
    pub fn max_eigenvalue(&self) -> f64 {
        let m = nalgebra::Matrix3::from_fn(|i, j| self.get(i, j));
        m.symmetric_eigenvalues().max()
    }
}

/// Lower-triangular 3×3 factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lower3 {
    pub l: [[f64; 3]; 3],
}

impl Lower3 {
    /// `L v`.
    pub fn mul_vec(&self, v: [f64; 3]) -> [f64; 3] {
        let l = &self.l;
        [
            l[0][0] * v[0],
            l[1][0] * v[0] + l[1][1] * v[1],
            l[2][0] * v[0] + l[2][1] * v[1] + l[2][2] * v[2],
        ]
    }

    /// Solves `L w = v` by forward substitution.
    pub fn solve_lower(&self, v: [f64; 3]) -> [f64; 3] {
        let l = &self.l;
        let w0 = v[0] / l[0][0];
        let w1 = (v[1] - l[1][0] * w0) / l[1][1];
        let w2 = (v[2] - l[2][0] * w0 - l[2][1] * w1) / l[2][2];
        [w0, w1, w2]
    }

    /// `v^T (L L^T)^{-1} v`.
    pub fn inverse_quadratic_form(&self, v: [f64; 3]) -> f64 {
        let w = self.solve_lower(v);
        w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> SymMatrix3 {
        let l = &self.l;
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| l[i][k] * l[j][k]).sum();
            }
        }
        SymMatrix3::from_full(m)
    }
}

/// Cholesky factorization of a symmetric 3×3 matrix.
pub fn cholesky3(m: &SymMatrix3) -> Result<Lower3, NumericsError> {
    let scale = m.max_abs();
    let tol = PD_TOLERANCE * scale;
    let mut l = [[0.0; 3]; 3];
    for j in 0..3 {
        let pivot = m.get(j, j) - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if !(pivot > tol) || scale == 0.0 {
            return Err(NumericsError::NotPositiveDefinite { index: j, pivot });
        }
        let d = pivot.sqrt();
        l[j][j] = d;
        for i in (j + 1)..3 {
            let s = m.get(i, j) - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / d;
        }
    }
    Ok(Lower3 { l })
}

/// Density of the centred bivariate normal with covariance `sigma` at `z`.
pub fn gaussian2_density(z: [f64; 2], sigma: &SymMatrix2) -> Result<f64, NumericsError> {
    let q = sigma.inverse_quadratic_form(z)?;
    let det = sigma.det();
    Ok((-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt()))
}

/// Maps standard-normal pairs through the Cholesky factor of `sigma`.
pub fn correlate2(xi: [f64; 2], factor: [f64; 3]) -> [f64; 2] {
    [factor[0] * xi[0], factor[1] * xi[0] + factor[2] * xi[1]]
}

/// Draws `n` centred bivariate normal vectors with covariance `sigma`.
pub fn gaussian2_sample(rng: &mut RngStream, sigma: &SymMatrix2, n: usize) -> Vec<[f64; 2]> {
    let factor = sigma.psd_cholesky();
    (0..n).map(|_| correlate2(rng.standard_normal2(), factor)).collect()
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Power series.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (log_prefix.exp() * h)).max(0.0)
    }
}

/// Chi-square CDF with `dof` degrees of freedom.
pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    regularized_gamma_p(0.5 * dof as f64, 0.5 * x)
}

/// Quantile of the chi-square distribution.
pub fn chi2_quantile(p: f64, dof: u32) -> Result<f64, NumericsError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::DomainError(format!("probability {p} not in (0, 1)")));
    }
    if dof == 0 {
        return Err(NumericsError::DomainError("degrees of freedom must be >= 1".into()));
    }
    let mut lo = 0.0_f64;
    let mut hi = dof as f64 + 1.0;
    while chi2_cdf(hi, dof) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(mid, dof) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded random stream.
///
/// Streams form a tree: [`RngStream::derive`] produces a child whose seed
/// depends only on the parent's key and the child index, never on how many
/// draws the parent has made. Workers get their own children so results do
/// not depend on scheduling.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { key: seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn derive(&self, index: u64) -> Self {
        let key = splitmix64(splitmix64(self.key) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)));
        Self::new(key)
    }

    /// Child stream addressed by a path of indices.
    pub fn derive_path(&self, path: &[u64]) -> Self {
        path.iter().fold(self.clone(), |s, &i| s.derive(i))
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn standard_normal2(&mut self) -> [f64; 2] {
        [self.standard_normal(), self.standard_normal()]
    }

    /// Standard exponential draw.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn max_diff(a: &SymMatrix3, b: &SymMatrix3) -> f64 {
        a.entries.iter().zip(&b.entries).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn cholesky_identity_and_diagonal() {
        let l = cholesky3(&SymMatrix3::identity()).unwrap();
        assert_eq!(l.l, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let l = cholesky3(&SymMatrix3::diag([4.0, 9.0, 16.0])).unwrap();
        assert_eq!(l.l, [[2.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 4.0]]);
    }

    #[test]
    fn cholesky_tridiagonal_round_trip() {
        let m = SymMatrix3::from_full([[2.0, 1.0, 0.0], [1.0, 2.0, 1.0], [0.0, 1.0, 2.0]]);
        let l = cholesky3(&m).unwrap();
        assert!(max_diff(&l.reconstruct(), &m) <= 1e-12);
        for i in 0..3 {
            assert!(l.l[i][i] > 0.0);
        }
    }

    #[test]
    fn cholesky_rejects_singular() {
        let m = SymMatrix3::from_full([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(matches!(cholesky3(&m), Err(NumericsError::NotPositiveDefinite { index: 1, .. })));
        assert!(cholesky3(&SymMatrix3::default()).is_err());
    }

    #[test]
    fn density_values() {
        let f0 = gaussian2_density([0.0, 0.0], &SymMatrix2::IDENTITY).unwrap();
        assert!((f0 - 0.159_154_943_091_895_35).abs() < 1e-12);
        let f1 = gaussian2_density([1.0, 0.0], &SymMatrix2::IDENTITY).unwrap();
        let expected = (-0.5_f64).exp() / (2.0 * std::f64::consts::PI);
        assert!((f1 - expected).abs() < 1e-15);
        assert!((f1 - 0.096_532).abs() < 1e-6);
        assert!(matches!(
            gaussian2_density([0.0, 0.0], &SymMatrix2::new(1.0, 1.0, 1.0)),
            Err(NumericsError::SingularCovariance { .. })
        ));
    }

    #[test]
    fn density_integrates_to_one() {
        // Midpoint rule on a +-6 sigma box.
        let sigma = SymMatrix2::new(0.009, 0.016, 0.006);
        let (s1, s2) = (sigma.a11.sqrt(), sigma.a22.sqrt());
        let n = 400;
        let (h1, h2) = (12.0 * s1 / n as f64, 12.0 * s2 / n as f64);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let z = [-6.0 * s1 + (i as f64 + 0.5) * h1, -6.0 * s2 + (j as f64 + 0.5) * h2];
                total += gaussian2_density(z, &sigma).unwrap() * h1 * h2;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn sampling_zero_and_moments() {
        let mut rng = RngStream::new(1);
        assert!(gaussian2_sample(&mut rng, &SymMatrix2::ZERO, 100).iter().all(|z| *z == [0.0, 0.0]));

        let check = |sigma: SymMatrix2, tol: f64, seed: u64| {
            let mut rng = RngStream::new(seed);
            let n = 100_000;
            let s = gaussian2_sample(&mut rng, &sigma, n);
            let acc = s.iter().fold(SymMatrix2::ZERO, |a, z| a.add(&SymMatrix2::outer(*z)));
            let est = acc.scale(1.0 / n as f64);
            assert!((est.a11 - sigma.a11).abs() < tol, "{est:?}");
            assert!((est.a22 - sigma.a22).abs() < tol, "{est:?}");
            assert!((est.a12 - sigma.a12).abs() < tol, "{est:?}");
        };
        check(SymMatrix2::IDENTITY, 0.03, 2);
        check(SymMatrix2::new(0.009, 0.016, 0.006), 0.002, 3);
    }

    #[test]
    fn chi2_quantile_values() {
        assert!((chi2_quantile(0.5, 2).unwrap() - 2.0 * 2.0_f64.ln()).abs() < 1e-9);
        assert!((chi2_quantile(0.9, 3).unwrap() - 6.251_388_631).abs() < 1e-6);
        assert!((chi2_quantile(0.95, 1).unwrap() - 3.841_458_821).abs() < 1e-6);
        for (p, k) in [(0.1, 3), (0.5, 5), (0.99, 10), (0.001, 1)] {
            let x = chi2_quantile(p, k).unwrap();
            assert!((chi2_cdf(x, k) - p).abs() <= 1e-10);
        }
        assert!(chi2_quantile(0.0, 3).is_err());
        assert!(chi2_quantile(1.0, 3).is_err());
        assert!(chi2_quantile(0.5, 0).is_err());
    }

    #[test]
    fn chi2_quantile_increasing() {
        let q: Vec<f64> = (1..=100).map(|i| chi2_quantile(i as f64 / 101.0, 3).unwrap()).collect();
        assert!(q.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(42).derive(3);
        let mut used = RngStream::new(42);
        used.next_u64();
        let mut d = used.derive(3);
        assert_eq!(c.next_u64(), d.next_u64());
        assert_ne!(RngStream::new(42).derive(1).next_u64(), RngStream::new(42).derive(2).next_u64());
    }

    proptest! {
        #[test]
        fn cholesky_round_trip_random_pd(a in prop::array::uniform9(-3.0f64..3.0), shift in 0.1f64..5.0) {
            // B B^T + shift I is positive definite.
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (0..3).map(|k| a[3 * i + k] * a[3 * j + k]).sum::<f64>()
                        + if i == j { shift } else { 0.0 };
                }
            }
            let m = SymMatrix3::from_full(m);
            let l = cholesky3(&m).unwrap();
            prop_assert!(max_diff(&l.reconstruct(), &m) <= 1e-10 * m.max_abs());
        }

        #[test]
        fn density_symmetric_and_peaked(z in prop::array::uniform2(-1.0f64..1.0), s1 in 0.01f64..2.0, s2 in 0.01f64..2.0, rho in -0.9f64..0.9) {
            let sigma = SymMatrix2::new(s1, s2, rho * (s1 * s2).sqrt());
            let f = gaussian2_density(z, &sigma).unwrap();
            prop_assert_eq!(f, gaussian2_density([-z[0], -z[1]], &sigma).unwrap());
            prop_assert!(f <= gaussian2_density([0.0, 0.0], &sigma).unwrap());
        }
    }
}
