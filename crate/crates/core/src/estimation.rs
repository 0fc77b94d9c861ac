//! Sequential learning of the noise covariance.
//!
//! The running estimate treats the prior guess `c0` as one pseudo-observation:
//!
//! ```text
//! Σ̂_t = (mat(c0) + Σ_{i=1..t} Z_i Z_iᵀ) / (t + 1)
//! ```
//!
//! and `√(t+1)(Σ̂_t − Σ*)` is asymptotically normal with covariance `M_Σ`.
//! Plugging the estimate into `M_Σ` gives the confidence ellipsoid
//!
//! ```text
//! τ(t, c) = {Σ ∈ Θ : (t+1)(Σ − c)ᵀ M̂(c)⁻¹ (Σ − c) ≤ κ},   κ = χ²₃ quantile at 1 − α
//! ```
//!
//! over which nature minimizes in the adaptive robust Bellman operator.
//! The adaptive mode replaces the ellipsoid by `{c}` and the strong robust
//! mode by all of `Θ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CovarianceVector, Theta, Vec2};
use crate::numerics::{chi2_quantile, cholesky3, Lower3, NumericsError, RngStream, SymMatrix2, SymMatrix3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("asymptotic covariance is degenerate at c = {c:?}")]
    DegenerateEstimate { c: [f64; 3] },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `R(t, c, z)`: folds one observation into the estimate and projects the
/// result onto `theta`.
pub fn recursive_update(t: usize, c: &CovarianceVector, z: Vec2, theta: &Theta) -> CovarianceVector {
    let n = (t + 1) as f64;
    let m = c.as_matrix().scale(n).add(&SymMatrix2::outer(z)).scale(1.0 / (n + 1.0));
    theta.project(&CovarianceVector::from_matrix(&m))
}

/// Batch form of the estimator for `c0` followed by `zs`.
pub fn batch_estimate(c0: &CovarianceVector, zs: &[Vec2], theta: &Theta) -> CovarianceVector {
    let sum = zs.iter().fold(c0.as_matrix(), |acc, z| acc.add(&SymMatrix2::outer(*z)));
    theta.project(&CovarianceVector::from_matrix(&sum.scale(1.0 / (zs.len() + 1) as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub t: usize,
    pub c: CovarianceVector,
}

impl EstimatorState {
    pub fn new(c0: CovarianceVector, theta: &Theta) -> Self {
        Self { t: 0, c: theta.project(&c0) }
    }

    pub fn observe(&mut self, z: Vec2, theta: &Theta) {
        self.c = recursive_update(self.t, &self.c, z, theta);
        self.t += 1;
    }
}

/// Plug-in asymptotic covariance of `(ŝ1, ŝ2, ŝ12)`.
pub fn asymptotic_cov(c: &CovarianceVector) -> SymMatrix3 {
    let (s1, s2, s12) = (c.s1, c.s2, c.s12);
    SymMatrix3::from_full([
        [2.0 * s1 * s1, 2.0 * s12 * s12, 2.0 * s1 * s12],
        [2.0 * s12 * s12, 2.0 * s2 * s2, 2.0 * s2 * s12],
        [2.0 * s1 * s12, 2.0 * s2 * s12, s1 * s2 + s12 * s12],
    ])
}

/// Cholesky factor of [`asymptotic_cov`], or `DegenerateEstimate`.
pub fn asymptotic_cov_factor(c: &CovarianceVector) -> Result<Lower3, EstimationError> {
    cholesky3(&asymptotic_cov(c)).map_err(|_| EstimationError::DegenerateEstimate { c: c.to_array() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UncertaintyMode {
    #[serde(rename = "ar")]
    AdaptiveRobust,
    #[serde(rename = "ad")]
    Adaptive,
    #[serde(rename = "sr")]
    StrongRobust,
}

impl UncertaintyMode {
    pub const ALL: [UncertaintyMode; 3] =
        [UncertaintyMode::AdaptiveRobust, UncertaintyMode::Adaptive, UncertaintyMode::StrongRobust];

    pub fn label(&self) -> &'static str {
        match self {
            Self::AdaptiveRobust => "ar",
            Self::Adaptive => "ad",
            Self::StrongRobust => "sr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ar" => Some(Self::AdaptiveRobust),
            "ad" => Some(Self::Adaptive),
            "sr" => Some(Self::StrongRobust),
            _ => None,
        }
    }
}

impl std::fmt::Display for UncertaintyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Confidence ellipsoid around a center: `Σ = c + radius · L u` with
/// `|u| <= 1` and `L Lᵀ = M̂(c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub factor: Lower3,
    pub radius: f64,
}

impl Ellipsoid {
    fn point(&self, center: &CovarianceVector, u: [f64; 3]) -> CovarianceVector {
        center.offset(self.factor.mul_vec(u), self.radius)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintySet {
    pub mode: UncertaintyMode,
    pub center: CovarianceVector,
    pub t: usize,
    pub kappa: f64,
    pub theta: Theta,
    /// The confidence ellipsoid at `(t, center)`. Present for the adaptive
    /// robust mode, and for the strong robust mode where it seeds the search
    /// near the estimate. `None` when `M̂(center)` is degenerate.
    pub ellipsoid: Option<Ellipsoid>,
}

/// `κ` for confidence level `alpha`.
pub fn ellipsoid_quantile(alpha: f64) -> Result<f64, NumericsError> {
    chi2_quantile(1.0 - alpha, 3)
}

/// Builds `τ(t, c)` for the given mode; fails on a degenerate `M̂` in the
/// adaptive robust mode.
pub fn make_uncertainty_set(
    mode: UncertaintyMode,
    t: usize,
    c: &CovarianceVector,
    alpha: f64,
    theta: &Theta,
) -> Result<UncertaintySet, EstimationError> {
    let kappa = ellipsoid_quantile(alpha)?;
    let set = UncertaintySet::with_fallback(mode, t, c, kappa, theta);
    if mode == UncertaintyMode::AdaptiveRobust && set.ellipsoid.is_none() {
        return Err(EstimationError::DegenerateEstimate { c: c.to_array() });
    }
    Ok(set)
}

impl UncertaintySet {
    /// Builds `τ(t, c)`; a degenerate `M̂(c)` makes the adaptive robust set
    /// collapse to the singleton `{c}`.
    pub fn with_fallback(mode: UncertaintyMode, t: usize, c: &CovarianceVector, kappa: f64, theta: &Theta) -> Self {
        let center = theta.project(c);
        let ellipsoid = match mode {
            UncertaintyMode::Adaptive => None,
            _ => asymptotic_cov_factor(&center)
                .ok()
                .map(|factor| Ellipsoid { factor, radius: (kappa.max(0.0) / (t + 1) as f64).sqrt() }),
        };
        Self { mode, center, t, kappa, theta: *theta, ellipsoid }
    }

    /// True when the set has collapsed to `{center}`.
    pub fn is_singleton(&self) -> bool {
        match self.mode {
            UncertaintyMode::Adaptive => true,
            UncertaintyMode::AdaptiveRobust => self.ellipsoid.is_none(),
            UncertaintyMode::StrongRobust => false,
        }
    }

    pub fn contains(&self, sigma: &CovarianceVector) -> bool {
        match self.mode {
            UncertaintyMode::Adaptive => sigma == &self.center,
            UncertaintyMode::StrongRobust => self.theta.contains(sigma),
            UncertaintyMode::AdaptiveRobust => match &self.ellipsoid {
                None => sigma == &self.center,
                Some(_) => self.theta.contains(sigma) && self.ellipsoid_statistic(sigma) <= self.kappa * (1.0 + 1e-9),
            },
        }
    }

    /// `(t+1)(Σ − c)ᵀ M̂(c)⁻¹ (Σ − c)`; infinite when `M̂(c)` is degenerate.
    pub fn ellipsoid_statistic(&self, sigma: &CovarianceVector) -> f64 {
        match &self.ellipsoid {
            Some(e) => (self.t + 1) as f64 * e.factor.inverse_quadratic_form(sigma.sub(&self.center)),
            None => f64::INFINITY,
        }
    }

    /// Longest axis of the ellipsoid, `2 √(κ λ_max(M̂) / (t+1))`.
    pub fn shrinkage_diameter(&self) -> Option<f64> {
        self.ellipsoid.as_ref()?;
        let lambda = asymptotic_cov(&self.center).max_eigenvalue();
        Some(2.0 * (self.kappa.max(0.0) * lambda / (self.t + 1) as f64).sqrt())
    }
}

/// Number of coordinate-descent steps used to polish the best candidate.
pub const POLISH_STEPS: usize = 20;

fn fibonacci_sphere(n: usize, radius: f64) -> impl Iterator<Item = [f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    (0..n).map(move |i| {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
    })
}

/// Whitened candidates in the unit ball: the center, 32 points on the
/// boundary sphere and 31 on two interior shells.
fn ball_candidates() -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    out.extend(fibonacci_sphere(32, 1.0));
    out.extend(fibonacci_sphere(16, 2.0 / 3.0));
    out.extend(fibonacci_sphere(15, 1.0 / 3.0));
    out
}

/// Lattice over `Θ` in (variance, variance, correlation) coordinates.
fn theta_candidates(theta: &Theta) -> Vec<CovarianceVector> {
    let levels = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let rhos = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
    let mut out = Vec::with_capacity(64);
    for &l1 in &levels {
        for &l2 in &levels {
            for &rho in &rhos {
                let (s1, s2) = (l1 * theta.sigma_bar, l2 * theta.sigma_bar);
                out.push(theta.project(&CovarianceVector::new(s1, s2, rho * (s1 * s2).sqrt())));
            }
        }
    }
    out
}

/// Moves `target` toward `center` along the connecting segment until it
/// lies in `theta`. `center` must be a member.
fn retract(center: &CovarianceVector, target: CovarianceVector, theta: &Theta) -> CovarianceVector {
    if theta.contains(&target) {
        return target;
    }
    let d = target.sub(center);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if theta.contains(&center.offset(d, mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        *center
    } else {
        center.offset(d, lo)
    }
}

struct Best {
    value: f64,
    point: CovarianceVector,
}

impl Best {
    fn offer(&mut self, value: f64, point: CovarianceVector) -> bool {
        if value < self.value {
            self.value = value;
            self.point = point;
            true
        } else {
            false
        }
    }
}

fn search_ellipsoid<F>(set: &UncertaintySet, e: &Ellipsoid, objective: &mut F) -> Best
where
    F: FnMut(&CovarianceVector) -> f64,
{
    let center = set.center;
    let map = |u: [f64; 3]| {
        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let u = if norm > 1.0 { [u[0] / norm, u[1] / norm, u[2] / norm] } else { u };
        retract(&center, e.point(&center, u), &set.theta)
    };
    let mut best = Best { value: objective(&center), point: center };
    let mut best_u = [0.0; 3];
    for u in ball_candidates().into_iter().skip(1) {
        let p = map(u);
        if best.offer(objective(&p), p) {
            best_u = u;
        }
    }
    let mut h = 0.25;
    let mut stale = 0;
    for step in 0..POLISH_STEPS {
        let k = step % 3;
        let mut moved = false;
        for sign in [1.0, -1.0] {
            let mut u = best_u;
            u[k] += sign * h;
            let p = map(u);
            if best.offer(objective(&p), p) {
                best_u = u;
                moved = true;
                break;
            }
        }
        stale = if moved { 0 } else { stale + 1 };
        if stale == 3 {
            h *= 0.5;
            stale = 0;
        }
    }
    best
}

fn search_theta<F>(set: &UncertaintySet, objective: &mut F) -> Best
where
    F: FnMut(&CovarianceVector) -> f64,
{
    let theta = set.theta;
    let mut best = Best { value: objective(&set.center), point: set.center };
    for p in theta_candidates(&theta) {
        best.offer(objective(&p), p);
    }
    let mut h = theta.sigma_bar / 8.0;
    let mut stale = 0;
    for step in 0..POLISH_STEPS {
        let k = step % 3;
        let mut moved = false;
        for sign in [1.0, -1.0] {
            let mut v = best.point.to_array();
            v[k] += sign * h;
            let p = theta.project(&CovarianceVector::from(v));
            if best.offer(objective(&p), p) {
                moved = true;
                break;
            }
        }
        stale = if moved { 0 } else { stale + 1 };
        if stale == 3 {
            h *= 0.5;
            stale = 0;
        }
    }
    best
}

/// Approximate `inf_{Σ ∈ set} objective(Σ)` and a minimizer in the set.
///
/// The center is always the first candidate, so the result never exceeds
/// `objective(center)`; ties keep the earliest candidate. The strong robust
/// search also runs the ellipsoid search at `(t, center)` and keeps the
/// smaller value, which makes results nested across modes for any
/// deterministic objective.
pub fn inner_infimum<F>(set: &UncertaintySet, mut objective: F) -> (f64, CovarianceVector)
where
    F: FnMut(&CovarianceVector) -> f64,
{
    match set.mode {
        UncertaintyMode::Adaptive => (objective(&set.center), set.center),
        UncertaintyMode::AdaptiveRobust => match &set.ellipsoid {
            None => (objective(&set.center), set.center),
            Some(e) => {
                let best = search_ellipsoid(set, e, &mut objective);
                (best.value, best.point)
            }
        },
        UncertaintyMode::StrongRobust => {
            let local = set.ellipsoid.as_ref().map(|e| search_ellipsoid(set, e, &mut objective));
            let global = search_theta(set, &mut objective);
            match local {
                Some(l) if l.value <= global.value => (l.value, l.point),
                _ => (global.value, global.point),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub steps: usize,
    pub trials: usize,
    pub hits: usize,
    pub frequency: f64,
}

/// Monte Carlo coverage of `Σ* ∈ τ_AR(t, Σ̂_t)` after `steps` observations.
pub fn coverage_experiment(
    sigma_star: &CovarianceVector,
    c0: &CovarianceVector,
    alpha: f64,
    steps: usize,
    trials: usize,
    theta: &Theta,
    rng: &RngStream,
) -> Result<CoverageReport, EstimationError> {
    let kappa = ellipsoid_quantile(alpha)?;
    let factor = sigma_star.noise_factor();
    let mut hits = 0;
    for trial in 0..trials {
        let mut stream = rng.derive(trial as u64);
        let mut est = EstimatorState::new(*c0, theta);
        for _ in 0..steps {
            let z = crate::numerics::correlate2(stream.standard_normal2(), factor);
            est.observe(z, theta);
        }
        let set = UncertaintySet::with_fallback(UncertaintyMode::AdaptiveRobust, est.t, &est.c, kappa, theta);
        if set.contains(sigma_star) {
            hits += 1;
        }
    }
    Ok(CoverageReport { alpha, steps, trials, hits, frequency: hits as f64 / trials.max(1) as f64 })
}
