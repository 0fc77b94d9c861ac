//! Backward solution of the adaptive robust Bellman recursion
//!
//! ```text
//! W_T(y) = exp(γ β^T r_T(x))
//! W_t(y) = max_{a ∈ A} inf_{θ ∈ τ(t, c)} E_θ[ W_{t+1}(G(t, y, a, Z)) ] · exp(γ β^t r_t(x, a))
//! ```
//!
//! on a random mesh of the augmented state space. Expectations are replaced
//! by `M`-point Monte Carlo averages with common random numbers per mesh
//! point, and `W_{t+1}` between mesh points by a Gaussian-process surrogate
//! fitted on log-values. Policies are fitted the same way, one surrogate per
//! action component.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{ellipsoid_quantile, inner_infimum, UncertaintyMode, UncertaintySet};
use crate::model::{
    action_grid, augmented_step, running_reward, snap_to_grid, terminal_reward, Action, AugmentedState,
    CovarianceVector, ModelConfig, Vec2,
};
use crate::numerics::{correlate2, NumericsError, RngStream};
use crate::surrogate::{GpError, PolicySurrogate, ValueSurrogate, DEFAULT_NUGGET};

/// Stream indices under the run seed.
pub(crate) const STREAM_MESH_PATHS: u64 = 0;
pub(crate) const STREAM_MESH_POINTS: u64 = 1;
pub(crate) const STREAM_BELLMAN: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid solver setting `{field}`: {constraint}")]
    Config { field: &'static str, constraint: String },
    #[error("surrogate fit failed at t = {t} ({what}): {source}")]
    SurrogateFitFailure {
        t: usize,
        what: &'static str,
        #[source]
        source: GpError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Forward paths used to build the mesh.
    pub paths: usize,
    /// Mesh points per time step (`t >= 1`).
    pub mesh_size: usize,
    /// Monte Carlo draws per one-step expectation.
    pub mc_samples: usize,
    pub nugget: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { paths: 500, mesh_size: 300, mc_samples: 100, nugget: DEFAULT_NUGGET }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let err = |field, c: &str| Err(SolverError::Config { field, constraint: c.to_string() });
        if self.paths < 10 {
            return err("paths", "must be >= 10");
        }
        if self.mesh_size < 10 {
            return err("mesh_size", "must be >= 10");
        }
        if self.mc_samples < 1 {
            return err("mc_samples", "must be >= 1");
        }
        if !(self.nugget > 0.0) {
            return err("nugget", "must be > 0");
        }
        Ok(())
    }
}

/// Mesh points per time step. The state at `t = 0` is deterministic, so
/// the first level holds `y0` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub points: Vec<Vec<AugmentedState>>,
}

/// Draw from the uniform distribution on `Θ` by rejection.
fn uniform_theta(cfg: &ModelConfig, rng: &mut RngStream) -> CovarianceVector {
    let bound = cfg.sigma_bar;
    loop {
        let s1 = rng.uniform_range(0.0, bound);
        let s2 = rng.uniform_range(0.0, bound);
        let s12 = rng.uniform_range(-bound, bound);
        if s12 * s12 <= s1 * s2 || bound == 0.0 {
            return cfg.theta().project(&CovarianceVector::new(s1, s2, s12));
        }
    }
}

/// Simulated augmented states `[t][path]` under random grid actions and
/// noise covariances drawn uniformly from `Θ` per path.
pub fn simulate_paths(cfg: &ModelConfig, paths: usize, rng: &RngStream) -> Vec<Vec<AugmentedState>> {
    let actions = action_grid(cfg);
    let mut states = vec![Vec::with_capacity(paths); cfg.horizon + 1];
    for p in 0..paths {
        let mut stream = rng.derive(p as u64);
        let factor = uniform_theta(cfg, &mut stream).noise_factor();
        let mut y = cfg.initial_state();
        states[0].push(y);
        for (t, level) in states.iter_mut().enumerate().skip(1) {
            let a = actions[stream.index(actions.len())];
            let z = correlate2(stream.standard_normal2(), factor);
            y = augmented_step(t - 1, &y, &a, z, cfg);
            level.push(y);
        }
    }
    states
}

/// Convex combination of `k` distinct randomly chosen points with
/// symmetric Dirichlet(1) weights.
fn hull_sample(points: &[AugmentedState], k: usize, rng: &mut RngStream) -> [f64; 5] {
    let n = points.len();
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.index(n - i);
        idx.swap(i, j);
    }
    let weights: Vec<f64> = (0..k).map(|_| rng.exponential()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = [0.0; 5];
    for (w, &i) in weights.iter().zip(&idx[..k]) {
        let p = points[i].to_point();
        for d in 0..5 {
            out[d] += w / total * p[d];
        }
    }
    out
}

pub fn generate_mesh(cfg: &ModelConfig, solver: &SolverConfig, rng: &RngStream) -> Result<Mesh, SolverError> {
    solver.validate()?;
    let theta = cfg.theta();
    let simulated = simulate_paths(cfg, solver.paths, &rng.derive(STREAM_MESH_PATHS));
    let sampler = rng.derive(STREAM_MESH_POINTS);
    let mut points = vec![vec![cfg.initial_state()]];
    for (t, level) in simulated.iter().enumerate().take(cfg.horizon).skip(1) {
        let pts = (0..solver.mesh_size)
            .map(|i| {
                let mut stream = sampler.derive_path(&[t as u64, i as u64]);
                let p = hull_sample(level, 6, &mut stream);
                let y = AugmentedState::from_point(&p);
                AugmentedState::new(y.x, y.c, &theta)
            })
            .collect();
        points.push(pts);
    }
    Ok(Mesh { points })
}

/// Integration nodes in standard-normal coordinates. `Z = L(θ) ξ` maps them
/// to any covariance `θ`, so one node set serves every candidate `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNodes {
    pub nodes: Vec<Vec2>,
    /// `None` means equal weights.
    pub weights: Option<Vec<f64>>,
}

impl NoiseNodes {
    pub fn monte_carlo(rng: &mut RngStream, m: usize) -> Self {
        Self { nodes: (0..m).map(|_| rng.standard_normal2()).collect(), weights: None }
    }

    pub fn weighted(nodes: Vec<Vec2>, weights: Vec<f64>) -> Self {
        assert_eq!(nodes.len(), weights.len());
        Self { nodes, weights: Some(weights) }
    }

    pub fn expectation<F: FnMut(Vec2) -> f64>(&self, mut f: F) -> f64 {
        match &self.weights {
            None => self.nodes.iter().map(|&n| f(n)).sum::<f64>() / self.nodes.len() as f64,
            Some(w) => self.nodes.iter().zip(w).map(|(&n, w)| w * f(n)).sum(),
        }
    }
}

/// `E_θ[ W_{t+1}(G(t, y, a, Z)) ] · exp(γ β^t r_t(x, a))` over the given
/// nodes.
pub fn one_step_value<V>(
    t: usize,
    y: &AugmentedState,
    a: &Action,
    theta: &CovarianceVector,
    next_value: &V,
    nodes: &NoiseNodes,
    cfg: &ModelConfig,
) -> f64
where
    V: Fn(&AugmentedState) -> f64 + ?Sized,
{
    let factor = theta.noise_factor();
    let mean = nodes.expectation(|xi| next_value(&augmented_step(t, y, a, correlate2(xi, factor), cfg)));
    let discount = cfg.beta.powi(t as i32);
    mean * (cfg.gamma * discount * running_reward(y.x, a, cfg)).exp()
}

/// Terminal value `exp(γ β^T r_T(x))`.
pub fn terminal_value(y: &AugmentedState, cfg: &ModelConfig) -> f64 {
    (cfg.gamma * cfg.beta.powi(cfg.horizon as i32) * terminal_reward(y.x, cfg)).exp()
}

/// Bellman update at one state: the max over `actions` of the inner
/// infimum over `set`. Returns the value and the index of the maximizing
/// action; ties go to the lowest index.
///
/// `objective(c)` bounds the inner infimum from above, so actions whose
/// plug-in value cannot beat the incumbent are skipped without changing
/// the result.
pub fn bellman_point<V>(
    t: usize,
    y: &AugmentedState,
    actions: &[Action],
    set: &UncertaintySet,
    next_value: &V,
    nodes: &NoiseNodes,
    cfg: &ModelConfig,
) -> (f64, usize)
where
    V: Fn(&AugmentedState) -> f64 + ?Sized,
{
    let objective = |a: &Action, th: &CovarianceVector| one_step_value(t, y, a, th, next_value, nodes, cfg);
    let plug_in: Vec<f64> = actions.iter().map(|a| objective(a, &set.center)).collect();
    let mut order: Vec<usize> = (0..actions.len()).collect();
    order.sort_by(|&i, &j| plug_in[j].total_cmp(&plug_in[i]).then(i.cmp(&j)));

    let mut best: Option<(f64, usize)> = None;
    for i in order {
        if let Some((v, _)) = best {
            if plug_in[i] < v {
                break;
            }
        }
        let value = if set.is_singleton() { plug_in[i] } else { inner_infimum(set, |th| objective(&actions[i], th)).0 };
        best = match best {
            Some((v, j)) if v > value || (v == value && j < i) => Some((v, j)),
            _ => Some((value, i)),
        };
    }
    best.expect("non-empty action set")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BellmanOutput {
    pub values: Vec<f64>,
    pub actions: Vec<Action>,
}

/// One backward step over a mesh level. Noise nodes for mesh point `i` come
/// from the stream `(t, i)` under `rng`, independent of the mode, so runs in
/// different modes share their random numbers.
pub fn bellman_step<V>(
    t: usize,
    mesh_t: &[AugmentedState],
    next_value: &V,
    cfg: &ModelConfig,
    solver: &SolverConfig,
    mode: UncertaintyMode,
    rng: &RngStream,
) -> Result<BellmanOutput, SolverError>
where
    V: Fn(&AugmentedState) -> f64 + Sync + ?Sized,
{
    let kappa = ellipsoid_quantile(cfg.alpha)?;
    let theta = cfg.theta();
    let actions = action_grid(cfg);
    let results: Vec<(f64, usize)> = mesh_t
        .par_iter()
        .enumerate()
        .map(|(i, y)| {
            let mut stream = rng.derive_path(&[t as u64, i as u64]);
            let nodes = NoiseNodes::monte_carlo(&mut stream, solver.mc_samples);
            let set = UncertaintySet::with_fallback(mode, t, &y.c, kappa, &theta);
            bellman_point(t, y, &actions, &set, next_value, &nodes, cfg)
        })
        .collect();
    Ok(BellmanOutput {
        values: results.iter().map(|r| r.0).collect(),
        actions: results.iter().map(|r| actions[r.1]).collect(),
    })
}

/// Fitted quantities for one time step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub t: usize,
    pub mesh: Vec<AugmentedState>,
    pub values: Vec<f64>,
    pub actions: Vec<Action>,
    pub value: ValueSurrogate,
    pub policy: [PolicySurrogate; 2],
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub mode: UncertaintyMode,
    pub seed: u64,
    pub config: ModelConfig,
    pub solver: SolverConfig,
    /// Indexed by `t = 0..T`.
    pub steps: Vec<StepResult>,
}

impl SolveResult {
    /// Mesh value at `y0`.
    pub fn initial_value(&self) -> f64 {
        self.steps[0].values[0]
    }

    pub fn initial_action(&self) -> Action {
        self.steps[0].actions[0]
    }

    /// Surrogate policy at `(t, y)`, clamped and snapped to the action grid.
    pub fn policy(&self, t: usize, y: &AugmentedState) -> Action {
        let p = y.to_point();
        let n = self.config.action_grid_n;
        let [p1, p2] = &self.steps[t].policy;
        Action([snap_to_grid(p1.predict(&p), n), snap_to_grid(p2.predict(&p), n)])
    }

    /// Writes `<prefix>_t<t>.csv` tables and GP dumps under `dir`.
    pub fn write_artifacts(&self, dir: &Path, prefix: &str) -> io::Result<()> {
        let tables = dir.join("tables");
        let models = dir.join("models");
        fs::create_dir_all(&tables)?;
        fs::create_dir_all(&models)?;
        for step in &self.steps {
            let mut w = BufWriter::new(fs::File::create(tables.join(format!("{prefix}_t{}.csv", step.t)))?);
            writeln!(w, "x1,x2,s1,s2,s12,value,action1,action2")?;
            for ((y, v), a) in step.mesh.iter().zip(&step.values).zip(&step.actions) {
                let p = y.to_point();
                writeln!(w, "{},{},{},{},{},{},{},{}", p[0], p[1], p[2], p[3], p[4], v, a.0[0], a.0[1])?;
            }
            w.flush()?;
            for (kind, gp) in [("value", &step.value.gp), ("policy1", &step.policy[0].gp), ("policy2", &step.policy[1].gp)] {
                let mut w = BufWriter::new(fs::File::create(models.join(format!("{prefix}_{kind}_t{}.gp", step.t)))?);
                gp.write_to(&mut w)?;
                w.flush()?;
            }
        }
        Ok(())
    }
}

fn fit_step(
    t: usize,
    cfg: &ModelConfig,
    solver: &SolverConfig,
    mesh: Vec<AugmentedState>,
    out: BellmanOutput,
) -> Result<StepResult, SolverError> {
    let inputs: Vec<Vec<f64>> = mesh.iter().map(|y| y.to_point().to_vec()).collect();
    let (floor, cap) = cfg.value_bounds(t);
    let value = ValueSurrogate::fit(&inputs, &out.values, floor, cap, solver.nugget)
        .map_err(|source| SolverError::SurrogateFitFailure { t, what: "value", source })?;
    let policy = |k: usize, what: &'static str| {
        let targets: Vec<f64> = out.actions.iter().map(|a| a.0[k]).collect();
        PolicySurrogate::fit(&inputs, &targets, solver.nugget)
            .map_err(|source| SolverError::SurrogateFitFailure { t, what, source })
    };
    let policy = [policy(0, "policy1")?, policy(1, "policy2")?];
    Ok(StepResult { t, mesh, values: out.values, actions: out.actions, value, policy })
}

/// Backward recursion `t = T-1, ..., 0`. The last step integrates the exact
/// terminal function; earlier steps use the surrogate fitted one step later.
pub fn solve_backward(
    cfg: &ModelConfig,
    solver: &SolverConfig,
    mode: UncertaintyMode,
    seed: u64,
) -> Result<SolveResult, SolverError> {
    let root = RngStream::new(seed);
    let mesh = generate_mesh(cfg, solver, &root)?;
    let noise = root.derive(STREAM_BELLMAN);
    let mut steps: Vec<StepResult> = Vec::with_capacity(cfg.horizon);
    for t in (0..cfg.horizon).rev() {
        let level = &mesh.points[t];
        let out = match steps.last() {
            None => bellman_step(t, level, &|y: &AugmentedState| terminal_value(y, cfg), cfg, solver, mode, &noise)?,
            Some(next) => {
                let surrogate = &next.value;
                bellman_step(t, level, &|y: &AugmentedState| surrogate.predict(&y.to_point()), cfg, solver, mode, &noise)?
            }
        };
        steps.push(fit_step(t, cfg, solver, level.clone(), out)?);
    }
    steps.reverse();
    Ok(SolveResult { mode, seed, config: cfg.clone(), solver: solver.clone(), steps })
}

/// Value and maximizing action at `(t, y)` by exact recursion of the
/// Bellman operator: expectations are weighted sums over `nodes` and
/// `W_{t+1}` is evaluated by recursing instead of through a surrogate.
/// The cost grows like `(|A| |nodes|)^(T-t)`; meant for small instances.
pub fn exact_value(
    t: usize,
    y: &AugmentedState,
    cfg: &ModelConfig,
    mode: UncertaintyMode,
    nodes: &NoiseNodes,
) -> Result<(f64, Action), SolverError> {
    exact_value_with_actions(t, y, cfg, mode, &action_grid(cfg), nodes)
}

/// [`exact_value`] over an explicit action set instead of the grid.
pub fn exact_value_with_actions(
    t: usize,
    y: &AugmentedState,
    cfg: &ModelConfig,
    mode: UncertaintyMode,
    actions: &[Action],
    nodes: &NoiseNodes,
) -> Result<(f64, Action), SolverError> {
    if actions.is_empty() {
        return Err(SolverError::Config { field: "actions", constraint: "must not be empty".into() });
    }
    let kappa = ellipsoid_quantile(cfg.alpha)?;
    let (v, i) = exact_point(t, y, cfg, mode, kappa, actions, nodes);
    Ok((v, actions[i]))
}

fn exact_point(
    t: usize,
    y: &AugmentedState,
    cfg: &ModelConfig,
    mode: UncertaintyMode,
    kappa: f64,
    actions: &[Action],
    nodes: &NoiseNodes,
) -> (f64, usize) {
    let set = UncertaintySet::with_fallback(mode, t, &y.c, kappa, &cfg.theta());
    if t + 1 == cfg.horizon {
        bellman_point(t, y, actions, &set, &|y2: &AugmentedState| terminal_value(y2, cfg), nodes, cfg)
    } else {
        let next = |y2: &AugmentedState| exact_point(t + 1, y2, cfg, mode, kappa, actions, nodes).0;
        bellman_point(t, y, actions, &set, &next, nodes, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{dynamics, Mat2};

    fn small_solver() -> SolverConfig {
        SolverConfig { paths: 60, mesh_size: 30, mc_samples: 20, nugget: DEFAULT_NUGGET }
    }

    #[test]
    fn mesh_shapes_and_invariants() {
        let cfg = ModelConfig { horizon: 4, ..Default::default() };
        let mesh = generate_mesh(&cfg, &small_solver(), &RngStream::new(1)).unwrap();
        assert_eq!(mesh.points.len(), 4);
        assert_eq!(mesh.points[0], vec![cfg.initial_state()]);
        for level in &mesh.points[1..] {
            assert_eq!(level.len(), 30);
            assert!(level.iter().all(|y| cfg.theta().contains(&y.c)));
        }
    }

    #[test]
    fn mesh_rejects_small_settings() {
        let cfg = ModelConfig::default();
        let bad = SolverConfig { paths: 5, ..small_solver() };
        assert!(matches!(generate_mesh(&cfg, &bad, &RngStream::new(1)), Err(SolverError::Config { field: "paths", .. })));
        let bad = SolverConfig { mesh_size: 9, ..small_solver() };
        assert!(matches!(generate_mesh(&cfg, &bad, &RngStream::new(1)), Err(SolverError::Config { field: "mesh_size", .. })));
    }

    #[test]
    fn zero_noise_mesh_collapses_onto_trajectory() {
        // Actions have no effect and Θ = {0}: every path is the same.
        let cfg = ModelConfig {
            horizon: 3,
            control_matrix: Mat2([[0.0, 0.0], [0.0, 0.0]]),
            sigma_bar: 0.0,
            c0: CovarianceVector::ZERO,
            ..Default::default()
        };
        let mesh = generate_mesh(&cfg, &small_solver(), &RngStream::new(4)).unwrap();
        let mut x = cfg.x0;
        for level in &mesh.points[1..] {
            x = dynamics(x, &Action([0.0, 0.0]), [0.0, 0.0], &cfg);
            for y in level {
                assert!((y.x[0] - x[0]).abs() < 1e-14 && (y.x[1] - x[1]).abs() < 1e-14);
                assert_eq!(y.c, CovarianceVector::ZERO);
            }
        }
    }

    #[test]
    fn first_mesh_level_stays_in_reachable_box() {
        // x1 = B1 x0 + B2 a + z with a in [-1,1]^2 and z of std at most sqrt(sigma_bar).
        let cfg = ModelConfig { horizon: 2, ..Default::default() };
        let solver = SolverConfig { paths: 500, mesh_size: 300, ..small_solver() };
        let mesh = generate_mesh(&cfg, &solver, &RngStream::new(9)).unwrap();
        let center = cfg.state_matrix.apply(cfg.x0);
        let reach = 0.6 + 4.0 * cfg.sigma_bar.sqrt();
        for y in &mesh.points[1] {
            assert!((y.x[0] - center[0]).abs() <= reach && (y.x[1] - center[1]).abs() <= reach, "{y:?}");
        }
    }

    #[test]
    fn one_step_value_constant_integrand() {
        let cfg = ModelConfig::default();
        let y = AugmentedState::new([0.0, 0.0], cfg.c0, &cfg.theta());
        let zero = Action([0.0, 0.0]);
        for m in [1, 3, 7, 100] {
            let nodes = NoiseNodes::monte_carlo(&mut RngStream::new(m as u64), m);
            assert_eq!(one_step_value(0, &y, &zero, &cfg.c0, &|_: &AugmentedState| 1.0, &nodes, &cfg), 1.0);
        }
        let y = AugmentedState::new([2.0, 2.0], cfg.c0, &cfg.theta());
        let nodes = NoiseNodes::monte_carlo(&mut RngStream::new(3), 10);
        let v = one_step_value(2, &y, &zero, &cfg.c0, &|_: &AugmentedState| 1.0, &nodes, &cfg);
        let r = running_reward(y.x, &zero, &cfg);
        assert!((v - (cfg.gamma * cfg.beta.powi(2) * r).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_field_picks_first_action() {
        let cfg = ModelConfig {
            state_weight: Mat2([[0.0, 0.0], [0.0, 0.0]]),
            control_weight: Mat2([[0.0, 0.0], [0.0, 0.0]]),
            horizon: 2,
            ..Default::default()
        };
        let mesh = vec![cfg.initial_state()];
        for mode in UncertaintyMode::ALL {
            let out =
                bellman_step(0, &mesh, &|_: &AugmentedState| 1.0, &cfg, &small_solver(), mode, &RngStream::new(1)).unwrap();
            assert_eq!(out.values, vec![1.0]);
            assert_eq!(out.actions, vec![Action([-1.0, -1.0])]);
        }
    }

    #[test]
    fn single_step_problem() {
        let cfg = ModelConfig { horizon: 1, ..Default::default() };
        let res = solve_backward(&cfg, &small_solver(), UncertaintyMode::Adaptive, 5).unwrap();
        assert_eq!(res.steps.len(), 1);
        assert_eq!(res.steps[0].mesh, vec![cfg.initial_state()]);
        let (lo, hi) = cfg.value_bounds(0);
        assert!(res.initial_value() >= lo && res.initial_value() <= hi);
        let y0 = cfg.initial_state();
        assert!((res.steps[0].value.predict(&y0.to_point()) / res.initial_value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn solve_is_reproducible_and_bounded() {
        let cfg = ModelConfig { horizon: 3, ..Default::default() };
        let a = solve_backward(&cfg, &small_solver(), UncertaintyMode::AdaptiveRobust, 7).unwrap();
        let b = solve_backward(&cfg, &small_solver(), UncertaintyMode::AdaptiveRobust, 7).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.values, sb.values);
            assert_eq!(sa.actions, sb.actions);
            assert_eq!(sa.mesh, sb.mesh);
            let (lo, hi) = cfg.value_bounds(sa.t);
            assert!(sa.values.iter().all(|v| *v >= lo && *v <= hi));
        }
    }

    #[test]
    fn artifacts_are_written() {
        let cfg = ModelConfig { horizon: 2, ..Default::default() };
        let res = solve_backward(&cfg, &small_solver(), UncertaintyMode::Adaptive, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        res.write_artifacts(dir.path(), "ad").unwrap();
        let table = fs::read_to_string(dir.path().join("tables/ad_t1.csv")).unwrap();
        assert!(table.starts_with("x1,x2,s1,s2,s12,value,action1,action2\n"));
        assert_eq!(table.lines().count(), 31);
        let bytes = fs::read(dir.path().join("models/ad_value_t1.gp")).unwrap();
        let gp = crate::surrogate::GpModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(&gp, &res.steps[1].value.gp);
    }
    #[test]
    fn one_step_value_matches_gaussian_mgf() {
        // next(y) = exp(u·x') has E = exp(u·μ + uᵀΣu/2) with μ = B1 x + B2 a.
        let cfg = ModelConfig { gamma: 0.2, ..Default::default() };
        let y = cfg.initial_state();
        let a = Action([0.5, -0.5]);
        let theta = CovarianceVector::new(0.05, 0.03, 0.01);
        let u = [0.8, -0.6];
        let next = |y2: &AugmentedState| (u[0] * y2.x[0] + u[1] * y2.x[1]).exp();
        let mu = dynamics(y.x, &a, [0.0, 0.0], &cfg);
        let var = u[0] * u[0] * theta.s1 + u[1] * u[1] * theta.s2 + 2.0 * u[0] * u[1] * theta.s12;
        let scale = (cfg.gamma * running_reward(y.x, &a, &cfg)).exp();
        let oracle = (u[0] * mu[0] + u[1] * mu[1] + 0.5 * var).exp() * scale;

        let nodes = NoiseNodes::monte_carlo(&mut RngStream::new(42), 4000);
        let mc = one_step_value(0, &y, &a, &theta, &next, &nodes, &cfg);
        let f = theta.noise_factor();
        let samples: Vec<f64> = nodes.nodes.iter().map(|&n| next(&augmented_step(0, &y, &a, correlate2(n, f), &cfg)) * scale).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64).sqrt();
        let se = sd / (samples.len() as f64).sqrt();
        assert!((mc - mean).abs() < 1e-12 * mean);
        assert!((mc - oracle).abs() < 3.0 * se, "mc {mc} oracle {oracle} se {se}");
    }

    #[test]
    fn two_atom_bellman_by_hand() {
        // One step, two actions, noise ±(1, 0) through the Cholesky factor
        // of c0 with equal weights, so z = ±(√s1, s12/√s1).
        let cfg = ModelConfig {
            horizon: 1,
            control_weight: Mat2([[-1.0, 0.0], [0.0, -1.0]]),
            ..Default::default()
        };
        let y = cfg.initial_state();
        let actions = [Action([0.0, 0.0]), Action([-1.0, -1.0])];
        let nodes = NoiseNodes::weighted(vec![[1.0, 0.0], [-1.0, 0.0]], vec![0.5, 0.5]);
        let set = UncertaintySet::with_fallback(UncertaintyMode::Adaptive, 0, &y.c, 6.25, &cfg.theta());
        let (v, i) = bellman_point(0, &y, &actions, &set, &|y2: &AugmentedState| terminal_value(y2, &cfg), &nodes, &cfg);

        let l = [cfg.c0.s1.sqrt(), cfg.c0.s12 / cfg.c0.s1.sqrt()];
        let k1 = |x: [f64; 2]| (0.7 * x[0] * x[0] - 0.4 * x[0] * x[1] + 0.7 * x[1] * x[1]).clamp(-10.0, 10.0);
        let hand = |a: [f64; 2]| {
            let r0 = (k1([2.0, 2.0]) - a[0] * a[0] - a[1] * a[1]).clamp(-10.0, 10.0);
            let base = [0.8 + 0.5 * a[0] - 0.1 * a[1], 0.8 - 0.1 * a[0] + 0.5 * a[1]];
            let w: f64 = [1.0, -1.0].iter().map(|sgn| 0.5 * (0.2 * 0.3 * k1([base[0] + sgn * l[0], base[1] + sgn * l[1]])).exp()).sum();
            w * (0.2 * r0).exp()
        };
        let (h0, h1) = (hand([0.0, 0.0]), hand([-1.0, -1.0]));
        assert!(h0 > h1);
        assert_eq!(i, 0);
        assert!((v - h0).abs() < 1e-13 * h0, "{v} vs {h0}");
    }

    #[test]
    fn small_gamma_recovers_risk_neutral_value() {
        // (1/γ) ln W_0 → max_a E[Σ β^t r_t] as γ → 0; with a single action
        // the right side is an expectation over the four noise paths.
        let base = ModelConfig { horizon: 2, ..Default::default() };
        let actions = [Action([0.0, 0.0])];
        let nodes = NoiseNodes::weighted(vec![[1.0, 0.5], [-1.0, -0.5]], vec![0.5, 0.5]);
        let mut neutral = 0.0;
        for n0 in &nodes.nodes {
            for n1 in &nodes.nodes {
                let a = actions[0];
                let mut y = base.initial_state();
                let mut total = running_reward(y.x, &a, &base);
                y = augmented_step(0, &y, &a, correlate2(*n0, y.c.noise_factor()), &base);
                total += base.beta * running_reward(y.x, &a, &base);
                y = augmented_step(1, &y, &a, correlate2(*n1, y.c.noise_factor()), &base);
                total += base.beta * base.beta * terminal_reward(y.x, &base);
                neutral += 0.25 * total;
            }
        }
        let mut last = f64::INFINITY;
        for gamma in [1e-2, 1e-4, 1e-6] {
            let cfg = ModelConfig { gamma, ..base.clone() };
            let y0 = cfg.initial_state();
            let (w, _) = exact_value_with_actions(0, &y0, &cfg, UncertaintyMode::Adaptive, &actions, &nodes).unwrap();
            let gap = (w.ln() / gamma - neutral).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last < 1e-5, "gap {last}");
    }
}
