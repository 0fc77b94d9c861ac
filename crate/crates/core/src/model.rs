//! The controlled linear-Gaussian system: state dynamics, tamed quadratic
//! rewards, the covariance parameter set and the finite action grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::recursive_update;
use crate::numerics::SymMatrix2;

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model parameter `{field}`: {constraint}")]
    Invalid { field: &'static str, constraint: String },
}

/// Noise covariance `[[s1, s12], [s12, s2]]` as a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct CovarianceVector {
    pub s1: f64,
    pub s2: f64,
    pub s12: f64,
}

impl From<[f64; 3]> for CovarianceVector {
    fn from(v: [f64; 3]) -> Self {
        Self { s1: v[0], s2: v[1], s12: v[2] }
    }
}

impl From<CovarianceVector> for [f64; 3] {
    fn from(c: CovarianceVector) -> Self {
        c.to_array()
    }
}

impl CovarianceVector {
    pub const ZERO: Self = Self { s1: 0.0, s2: 0.0, s12: 0.0 };

    pub fn new(s1: f64, s2: f64, s12: f64) -> Self {
        Self { s1, s2, s12 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.s1, self.s2, self.s12]
    }

    pub fn as_matrix(&self) -> SymMatrix2 {
        SymMatrix2::new(self.s1, self.s2, self.s12)
    }

    pub fn from_matrix(m: &SymMatrix2) -> Self {
        Self::new(m.a11, m.a22, m.a12)
    }

    pub fn sub(&self, other: &Self) -> [f64; 3] {
        [self.s1 - other.s1, self.s2 - other.s2, self.s12 - other.s12]
    }

    pub fn offset(&self, d: [f64; 3], scale: f64) -> Self {
        Self::new(self.s1 + scale * d[0], self.s2 + scale * d[1], self.s12 + scale * d[2])
    }

    /// Lower Cholesky factor `(l11, l21, l22)` of the covariance.
    pub fn noise_factor(&self) -> [f64; 3] {
        self.as_matrix().psd_cholesky()
    }
}

/// The compact parameter set
/// `{0 <= s1, s2 <= sigma_bar, s12^2 <= s1 s2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theta {
    pub sigma_bar: f64,
}

impl Theta {
    pub fn new(sigma_bar: f64) -> Self {
        Self { sigma_bar }
    }

    pub fn contains(&self, c: &CovarianceVector) -> bool {
        let bound = self.sigma_bar;
        c.s1 >= 0.0
            && c.s2 >= 0.0
            && c.s1 <= bound
            && c.s2 <= bound
            && c.s12 * c.s12 <= c.s1 * c.s2 * (1.0 + 1e-12)
    }

    /// Clamps variances to `[0, sigma_bar]` and shrinks the covariance term
    /// onto `|s12| <= sqrt(s1 s2)`.
    pub fn project(&self, c: &CovarianceVector) -> CovarianceVector {
        let s1 = c.s1.clamp(0.0, self.sigma_bar);
        let s2 = c.s2.clamp(0.0, self.sigma_bar);
        let cap = (s1 * s2).sqrt();
        let s12 = c.s12.signum() * c.s12.abs().min(cap);
        CovarianceVector::new(s1, s2, if s12.is_nan() { 0.0 } else { s12 })
    }
}

/// `y = (x, c)`: physical state plus the current covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentedState {
    pub x: Vec2,
    pub c: CovarianceVector,
}

impl AugmentedState {
    /// Builds a state, projecting the estimate onto `theta`.
    pub fn new(x: Vec2, c: CovarianceVector, theta: &Theta) -> Self {
        Self { x, c: theta.project(&c) }
    }

    /// Flattened as `(x1, x2, s1, s2, s12)`.
    pub fn to_point(&self) -> [f64; 5] {
        [self.x[0], self.x[1], self.c.s1, self.c.s2, self.c.s12]
    }

    pub fn from_point(p: &[f64; 5]) -> Self {
        Self { x: [p[0], p[1]], c: CovarianceVector::new(p[2], p[3], p[4]) }
    }
}

/// Control in `[-1, 1]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub Vec2);

impl Action {
    pub fn new(a: Vec2) -> Self {
        Self([a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])
    }
}

/// Real 2×2 matrix in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn apply(&self, v: Vec2) -> Vec2 {
        let m = &self.0;
        [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
    }

    /// `v^T M v`.
    pub fn quadratic(&self, v: Vec2) -> f64 {
        let mv = self.apply(v);
        v[0] * mv[0] + v[1] * mv[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub horizon: usize,
    pub beta: f64,
    pub gamma: f64,
    pub state_matrix: Mat2,
    pub control_matrix: Mat2,
    pub state_weight: Mat2,
    pub control_weight: Mat2,
    /// Upper reward clip `b1 > 0`.
    pub reward_cap: f64,
    /// Lower reward clip `b2 < 0`.
    pub reward_floor: f64,
    pub x0: Vec2,
    pub c0: CovarianceVector,
    pub sigma_bar: f64,
    pub alpha: f64,
    pub action_grid_n: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let b = Mat2([[0.5, -0.1], [-0.1, 0.5]]);
        Self {
            horizon: 10,
            beta: 0.3,
            gamma: 0.2,
            state_matrix: b,
            control_matrix: b,
            state_weight: Mat2([[0.7, -0.2], [-0.2, 0.7]]),
            control_weight: Mat2([[-200.0, 100.0], [100.0, -200.0]]),
            reward_cap: 10.0,
            reward_floor: -10.0,
            x0: [2.0, 2.0],
            c0: CovarianceVector::new(0.00625, 0.02025, 0.004),
            sigma_bar: 0.1,
            alpha: 0.1,
            action_grid_n: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |ok: bool, field: &'static str, constraint: &str| {
            if ok {
                Ok(())
            } else {
                Err(ModelError::Invalid { field, constraint: constraint.to_string() })
            }
        };
        check(self.horizon >= 1, "horizon", "must be >= 1")?;
        check(self.beta > 0.0 && self.beta < 1.0, "beta", "must lie in (0, 1)")?;
        check(self.gamma > 0.0 && self.gamma.is_finite(), "gamma", "must be > 0")?;
        check(self.reward_cap > 0.0, "reward_cap", "must be > 0")?;
        check(self.reward_floor < 0.0, "reward_floor", "must be < 0")?;
        check(self.alpha > 0.0 && self.alpha < 1.0, "alpha", "must lie in (0, 1)")?;
        check(self.sigma_bar >= 0.0 && self.sigma_bar.is_finite(), "sigma_bar", "must be >= 0")?;
        check(self.action_grid_n >= 2, "action_grid_n", "must be >= 2")?;
        check(self.theta().contains(&self.c0), "c0", "must lie in the parameter set")?;
        Ok(())
    }

    pub fn theta(&self) -> Theta {
        Theta::new(self.sigma_bar)
    }

    pub fn initial_state(&self) -> AugmentedState {
        AugmentedState::new(self.x0, self.c0, &self.theta())
    }

    /// `sum_{k=t}^{T} beta^k`.
    pub fn discount_tail(&self, t: usize) -> f64 {
        (t..=self.horizon).map(|k| self.beta.powi(k as i32)).sum()
    }

    /// Analytic range of the value function at time `t`.
    pub fn value_bounds(&self, t: usize) -> (f64, f64) {
        let tail = self.discount_tail(t);
        ((self.gamma * self.reward_floor * tail).exp(), (self.gamma * self.reward_cap * tail).exp())
    }
}

/// `S(x, a, z) = B1 x + B2 a + z`.
pub fn dynamics(x: Vec2, a: &Action, z: Vec2, cfg: &ModelConfig) -> Vec2 {
    let bx = cfg.state_matrix.apply(x);
    let ba = cfg.control_matrix.apply(a.0);
    [bx[0] + ba[0] + z[0], bx[1] + ba[1] + z[1]]
}

fn clip(v: f64, cfg: &ModelConfig) -> f64 {
    v.max(cfg.reward_floor).min(cfg.reward_cap)
}

/// `min{b1, max{b2, x^T K1 x + a^T K2 a}}`.
pub fn running_reward(x: Vec2, a: &Action, cfg: &ModelConfig) -> f64 {
    clip(cfg.state_weight.quadratic(x) + cfg.control_weight.quadratic(a.0), cfg)
}

/// `min{b1, max{b2, x^T K1 x}}`.
pub fn terminal_reward(x: Vec2, cfg: &ModelConfig) -> f64 {
    clip(cfg.state_weight.quadratic(x), cfg)
}

/// One step of the augmented chain: state dynamics paired with the
/// covariance-estimate update.
pub fn augmented_step(t: usize, y: &AugmentedState, a: &Action, z: Vec2, cfg: &ModelConfig) -> AugmentedState {
    let theta = cfg.theta();
    AugmentedState { x: dynamics(y.x, a, z, cfg), c: recursive_update(t, &y.c, z, &theta) }
}

/// Per-axis grid levels `-1 = l_0 < ... < l_{n-1} = 1`.
pub fn grid_levels(n: usize) -> Vec<f64> {
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

/// Uniform `n x n` lattice over `[-1, 1]^2`, first component ascending,
/// then second.
pub fn action_grid(cfg: &ModelConfig) -> Vec<Action> {
    let levels = grid_levels(cfg.action_grid_n);
    levels.iter().flat_map(|&a1| levels.iter().map(move |&a2| Action([a1, a2]))).collect()
}

/// Snaps a scalar to the nearest grid level after clamping into `[-1, 1]`.
pub fn snap_to_grid(v: f64, n: usize) -> f64 {
    let v = if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
    let step = 2.0 / (n - 1) as f64;
    let idx = ((v + 1.0) / step).round() as usize;
    grid_levels(n)[idx.min(n - 1)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dynamics_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(dynamics([0.0, 0.0], &Action([0.0, 0.0]), [0.0, 0.0], &cfg), [0.0, 0.0]);
        let x = dynamics([2.0, 2.0], &Action([0.0, 0.0]), [0.0, 0.0], &cfg);
        assert!((x[0] - 0.8).abs() < 1e-15 && (x[1] - 0.8).abs() < 1e-15);
        let x = dynamics([0.0, 0.0], &Action([1.0, -1.0]), [0.0, 0.0], &cfg);
        assert!((x[0] - 0.6).abs() < 1e-15 && (x[1] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn reward_examples() {
        let cfg = ModelConfig::default();
        assert_eq!(running_reward([0.0, 0.0], &Action([0.0, 0.0]), &cfg), 0.0);
        assert!((running_reward([2.0, 2.0], &Action([0.0, 0.0]), &cfg) - 4.0).abs() < 1e-12);
        assert!((terminal_reward([2.0, 2.0], &cfg) - 4.0).abs() < 1e-12);
        assert_eq!(cfg.control_weight.quadratic([1.0, 1.0]), -200.0);
        assert_eq!(running_reward([0.0, 0.0], &Action([1.0, 1.0]), &cfg), -10.0);
    }

    #[test]
    fn action_grid_examples() {
        let mut cfg = ModelConfig { action_grid_n: 2, ..Default::default() };
        let g: Vec<Vec2> = action_grid(&cfg).iter().map(|a| a.0).collect();
        assert_eq!(g, vec![[-1.0, -1.0], [-1.0, 1.0], [1.0, -1.0], [1.0, 1.0]]);
        cfg.action_grid_n = 3;
        let g = action_grid(&cfg);
        assert_eq!(g.len(), 9);
        assert!(g.contains(&Action([0.0, 0.0])));
        cfg.action_grid_n = 5;
        let g = action_grid(&cfg);
        assert_eq!(g.len(), 25);
        assert_eq!(g[1].0[1] - g[0].0[1], 0.5);
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(action_grid(&cfg), g);
    }

    #[test]
    fn snapping() {
        assert_eq!(snap_to_grid(0.2, 5), 0.0);
        assert_eq!(snap_to_grid(0.3, 5), 0.5);
        assert_eq!(snap_to_grid(7.0, 5), 1.0);
        assert_eq!(snap_to_grid(-0.74, 5), -0.5);
        assert_eq!(snap_to_grid(f64::NAN, 5), 0.0);
    }

    #[test]
    fn augmented_step_composes_both_updates() {
        let cfg = ModelConfig::default();
        let theta = cfg.theta();
        let y = cfg.initial_state();
        let a = Action([0.5, -0.5]);
        let z = [0.1, -0.05];
        let next = augmented_step(3, &y, &a, z, &cfg);
        assert_eq!(next.x, dynamics(y.x, &a, z, &cfg));
        assert_eq!(next.c, recursive_update(3, &y.c, z, &theta));

        let zero = augmented_step(0, &y, &a, [0.0, 0.0], &cfg);
        assert!((zero.c.s1 - y.c.s1 / 2.0).abs() < 1e-15);

        let huge = augmented_step(0, &y, &a, [1e6, -3e7], &cfg);
        assert!(theta.contains(&huge.c));
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { gamma: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Invalid { field: "gamma", .. })));
        let bad = ModelConfig { reward_floor: 1.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(ModelError::Invalid { field: "reward_floor", .. })));
        let bad = ModelConfig { beta: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn value_bounds_match_discount_tail() {
        let cfg = ModelConfig::default();
        let (lo, hi) = cfg.value_bounds(cfg.horizon);
        let d = cfg.beta.powi(cfg.horizon as i32);
        assert!((lo - (cfg.gamma * cfg.reward_floor * d).exp()).abs() < 1e-15);
        assert!((hi - (cfg.gamma * cfg.reward_cap * d).exp()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn reward_always_clipped(x in prop::array::uniform2(-1e6f64..1e6), a in prop::array::uniform2(-1e6f64..1e6)) {
            let cfg = ModelConfig::default();
            let r = running_reward(x, &Action(a), &cfg);
            prop_assert!(r >= cfg.reward_floor && r <= cfg.reward_cap);
            let r = terminal_reward(x, &cfg);
            prop_assert!(r >= cfg.reward_floor && r <= cfg.reward_cap);
        }

        #[test]
        fn dynamics_is_affine(x in prop::array::uniform2(-10f64..10.0), xp in prop::array::uniform2(-10f64..10.0),
                              a in prop::array::uniform2(-1f64..1.0), z in prop::array::uniform2(-1f64..1.0)) {
            let cfg = ModelConfig::default();
            let zero = Action([0.0, 0.0]);
            let lhs = dynamics([x[0] + xp[0], x[1] + xp[1]], &Action(a), z, &cfg);
            let base = dynamics([0.0, 0.0], &zero, [0.0, 0.0], &cfg);
            let r1 = dynamics(x, &Action(a), z, &cfg);
            let r2 = dynamics(xp, &zero, [0.0, 0.0], &cfg);
            for i in 0..2 {
                prop_assert!((lhs[i] + base[i] - r1[i] - r2[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_lands_in_theta(c in prop::array::uniform3(-1f64..1.0)) {
            let theta = Theta::new(0.1);
            let p = theta.project(&CovarianceVector::from(c));
            prop_assert!(theta.contains(&p));
        }
    }
}
