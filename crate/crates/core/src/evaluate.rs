//! Out-of-sample evaluation of fitted policies under the true covariance,
//! scored by the empirical entropic risk of discounted rewards,
//!
//! ```text
//! W = (1/γ) ln( (1/K) Σ_i exp(γ Σ_t β^t r_t^i) )
//! ```

use rayon::prelude::*;
use serde::Serialize;

use crate::estimation::UncertaintyMode;
use crate::model::{augmented_step, running_reward, terminal_reward, Action, AugmentedState, CovarianceVector, ModelConfig};
use crate::numerics::{correlate2, RngStream};
use crate::solver::{solve_backward, SolveResult, SolverConfig, SolverError, STREAM_EVAL};

/// Neumaier-compensated sum.
fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `(1/γ) ln mean(exp(γ s_i))`, shifted by the maximum to avoid overflow.
pub fn entropic_risk(samples: &[f64], gamma: f64) -> f64 {
    assert!(!samples.is_empty(), "entropic risk of an empty sample");
    let m = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = compensated_sum(samples.iter().map(|s| (gamma * (s - m)).exp())) / samples.len() as f64;
    m + mean.ln() / gamma
}

/// Delta-method standard error of [`entropic_risk`].
pub fn entropic_risk_std_error(samples: &[f64], gamma: f64) -> f64 {
    let k = samples.len() as f64;
    if samples.len() < 2 {
        return 0.0;
    }
    let m = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = samples.iter().map(|s| (gamma * (s - m)).exp()).collect();
    let mean = compensated_sum(e.iter().copied()) / k;
    let var = compensated_sum(e.iter().map(|v| (v - mean) * (v - mean))) / (k - 1.0);
    var.sqrt() / (k.sqrt() * mean * gamma)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: UncertaintyMode,
    pub gamma: f64,
    pub paths: usize,
    pub criterion: f64,
    pub std_error: f64,
    pub seed: u64,
    /// Discounted reward total of each path.
    pub totals: Vec<f64>,
}

/// Discounted reward totals of `paths` trajectories from `y0` under
/// `theta_star` and the given Markov policy. Path `i` draws its noise from
/// stream `i` of `rng`, so different policies see the same noise.
pub fn simulate_policy<P>(policy: &P, theta_star: &CovarianceVector, paths: usize, rng: &RngStream, cfg: &ModelConfig) -> Vec<f64>
where
    P: Fn(usize, &AugmentedState) -> Action + Sync,
{
    let factor = theta_star.noise_factor();
    (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.derive(i as u64);
            let mut y = cfg.initial_state();
            let mut total = 0.0;
            for t in 0..cfg.horizon {
                let a = policy(t, &y);
                total += cfg.beta.powi(t as i32) * running_reward(y.x, &a, cfg);
                let z = correlate2(stream.standard_normal2(), factor);
                y = augmented_step(t, &y, &a, z, cfg);
            }
            total + cfg.beta.powi(cfg.horizon as i32) * terminal_reward(y.x, cfg)
        })
        .collect()
}

/// Applies the fitted policy surrogates of `result` to `paths` trajectories
/// under `theta_star`.
pub fn forward_evaluate(
    result: &SolveResult,
    theta_star: &CovarianceVector,
    paths: usize,
    rng: &RngStream,
    seed: u64,
) -> EvalReport {
    let cfg = &result.config;
    let totals = simulate_policy(&|t, y: &AugmentedState| result.policy(t, y), theta_star, paths, rng, cfg);
    EvalReport {
        mode: result.mode,
        gamma: cfg.gamma,
        paths,
        criterion: entropic_risk(&totals, cfg.gamma),
        std_error: entropic_risk_std_error(&totals, cfg.gamma),
        seed,
        totals,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub mode: UncertaintyMode,
    /// Solver value `W̄_0(y0)`.
    pub initial_value: f64,
    pub report: EvalReport,
}

/// Solves and evaluates each mode for each seed. Within a seed all modes
/// share the mesh, the Bellman noise and the evaluation noise.
pub fn compare_modes(
    cfg: &ModelConfig,
    solver: &SolverConfig,
    modes: &[UncertaintyMode],
    theta_star: &CovarianceVector,
    seeds: &[u64],
    paths: usize,
) -> Result<Vec<ComparisonRow>, SolverError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let eval_rng = RngStream::new(seed).derive(STREAM_EVAL);
        for &mode in modes {
            let result = solve_backward(cfg, solver, mode, seed)?;
            let report = forward_evaluate(&result, theta_star, paths, &eval_rng, seed);
            rows.push(ComparisonRow { seed, mode, initial_value: result.initial_value(), report });
        }
    }
    Ok(rows)
}
