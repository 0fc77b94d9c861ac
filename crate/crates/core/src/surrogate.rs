//! Gaussian-process regression with an anisotropic Matérn-5/2 kernel.
//!
//! The predictor is the plain kriging mean with zero prior mean,
//!
//! ```text
//! f̃(y) = k(y)ᵀ (K + ε² I)⁻¹ w
//! ```
//!
//! Inputs are standardized per dimension before the kernel sees them, and
//! the hyperparameters (one lengthscale per input plus a signal variance)
//! maximize the log marginal likelihood by a deterministic multi-start
//! coordinate search in log space.

use std::io::{self, Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Default nugget `ε`.
pub const DEFAULT_NUGGET: f64 = 1e-5;

const SQRT5: f64 = 2.236_067_977_499_79;
const MAX_JITTER: f64 = 1e-2;
const RESTART_FACTORS: [f64; 5] = [0.5, 0.2, 1.0, 2.0, 0.1];
const MAX_SWEEPS: usize = 50;
const MIN_STEP: f64 = 1.0 / 64.0;

const DUMP_MAGIC: &[u8; 4] = b"ARGP";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("no training data")]
    Empty,
    #[error("input {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, got: usize, expected: usize },
    #[error("target {index} is not finite ({value})")]
    NonFiniteTarget { index: usize, value: f64 },
    #[error("kernel system with {n} points not positive definite up to jitter {jitter:e}")]
    FitFailure { n: usize, jitter: f64 },
    #[error("malformed model dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `σ² (1 + √5 r + 5r²/3) exp(−√5 r)` for a scaled distance `r`.
#[inline]
pub fn matern52_of_distance(r: f64, signal_variance: f64) -> f64 {
    let s = SQRT5 * r;
    signal_variance * (1.0 + s + s * s / 3.0) * (-s).exp()
}

/// Anisotropic Matérn-5/2 kernel between two points.
pub fn matern52(u: &[f64], v: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = u.iter().zip(v).zip(lengthscales).map(|((a, b), l)| ((a - b) / l).powi(2)).sum();
    matern52_of_distance(r2.sqrt(), signal_variance)
}

/// Kernel hyperparameters in standardized input units.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    dim: usize,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    shift: Vec<f64>,
    scale: Vec<f64>,
    hyper: Hyperparameters,
    nugget: f64,
    /// Diagonal loading actually used, `>= nugget²`.
    jitter: f64,
    alpha: Vec<f64>,
    /// Training inputs after standardization and division by lengthscales,
    /// row-major `n x dim`.
    scaled: Vec<f64>,
    constant: Option<f64>,
}

fn standardization(inputs: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = inputs.len() as f64;
    let mut shift = vec![0.0; dim];
    let mut scale = vec![1.0; dim];
    for d in 0..dim {
        let mean = inputs.iter().map(|x| x[d]).sum::<f64>() / n;
        let var = inputs.iter().map(|x| (x[d] - mean).powi(2)).sum::<f64>() / n;
        shift[d] = mean;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mean.abs()) {
            scale[d] = sd;
        }
    }
    (shift, scale)
}

struct Prepared {
    z: Vec<Vec<f64>>,
    y: DVector<f64>,
}

impl Prepared {
    fn gram(&self, hyper: &Hyperparameters, diag: f64) -> DMatrix<f64> {
        let n = self.z.len();
        let scaled: Vec<Vec<f64>> = self
            .z
            .iter()
            .map(|p| p.iter().zip(&hyper.lengthscales).map(|(v, l)| v / l).collect())
            .collect();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            k[(i, i)] = hyper.signal_variance + diag;
            for j in 0..i {
                let r2: f64 = scaled[i].iter().zip(&scaled[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = matern52_of_distance(r2.sqrt(), hyper.signal_variance);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn log_marginal_likelihood(&self, hyper: &Hyperparameters, diag: f64) -> f64 {
        let Some(chol) = Cholesky::new(self.gram(hyper, diag)) else {
            return f64::NEG_INFINITY;
        };
        let alpha = chol.solve(&self.y);
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let n = self.y.len() as f64;
        let v = -0.5 * self.y.dot(&alpha) - log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln();
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    }
}

fn to_hyper(params: &[f64]) -> Hyperparameters {
    let d = params.len() - 1;
    Hyperparameters { lengthscales: params[..d].iter().map(|p| p.exp()).collect(), signal_variance: params[d].exp() }
}

/// Multi-start coordinate search over log-lengthscales and log-variance.
fn optimize_hyperparameters(prep: &Prepared, diag: f64) -> Hyperparameters {
    let dim = prep.z[0].len();
    let ranges: Vec<f64> = (0..dim)
        .map(|d| {
            let (lo, hi) = prep.z.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[d]), hi.max(p[d])));
            if hi - lo > 1e-12 {
                hi - lo
            } else {
                1.0
            }
        })
        .collect();
    let second_moment = (prep.y.norm_squared() / prep.y.len() as f64).max(1e-300);
    let mut lower: Vec<f64> = ranges.iter().map(|r| (1e-3 * r).ln()).collect();
    let mut upper: Vec<f64> = ranges.iter().map(|r| (1e3 * r).ln()).collect();
    lower.push((1e-6 * second_moment).ln());
    upper.push((1e6 * second_moment).ln());

    let mut best: Option<(f64, Vec<f64>)> = None;
    for factor in RESTART_FACTORS {
        let mut params: Vec<f64> = ranges.iter().map(|r| (factor * r).ln()).collect();
        params.push(second_moment.ln());
        let mut value = prep.log_marginal_likelihood(&to_hyper(&params), diag);
        let mut step = 1.0;
        for _ in 0..MAX_SWEEPS {
            let mut improved = false;
            for k in 0..params.len() {
                for sign in [1.0, -1.0] {
                    let mut trial = params.clone();
                    trial[k] = (trial[k] + sign * step).clamp(lower[k], upper[k]);
                    if trial[k] == params[k] {
                        continue;
                    }
                    let v = prep.log_marginal_likelihood(&to_hyper(&trial), diag);
                    if v > value {
                        value = v;
                        params = trial;
                        improved = true;
                        break;
                    }
                }
            }
            if !improved {
                step *= 0.5;
                if step < MIN_STEP {
                    break;
                }
            }
        }
        if best.as_ref().is_none_or(|(v, _)| value > *v) {
            best = Some((value, params));
        }
    }
    to_hyper(&best.expect("at least one restart").1)
}

fn validate(inputs: &[Vec<f64>], targets: &[f64]) -> Result<usize, GpError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(GpError::Empty);
    }
    let dim = inputs[0].len();
    for (index, x) in inputs.iter().enumerate() {
        if x.len() != dim {
            return Err(GpError::DimensionMismatch { index, got: x.len(), expected: dim });
        }
    }
    for (index, &value) in targets.iter().enumerate() {
        if !value.is_finite() {
            return Err(GpError::NonFiniteTarget { index, value });
        }
    }
    Ok(dim)
}

impl GpModel {
    /// Fits hyperparameters by maximum marginal likelihood and solves the
    /// regularized kernel system.
    ///
    /// All-equal targets (or a single training point) give a constant model
    /// with zero signal variance that predicts the common value everywhere.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], nugget: f64) -> Result<Self, GpError> {
        let dim = validate(inputs, targets)?;
        let (lo, hi) = targets.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if inputs.len() == 1 || hi - lo <= 1e-14 * lo.abs().max(hi.abs()).max(1e-300) {
            return Ok(Self::constant(inputs, targets, dim, nugget));
        }
        let (shift, scale) = standardization(inputs, dim);
        let prep = Prepared {
            z: inputs.iter().map(|x| x.iter().zip(&shift).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect(),
            y: DVector::from_column_slice(targets),
        };
        let hyper = optimize_hyperparameters(&prep, nugget * nugget);
        Self::assemble(inputs, targets, shift, scale, prep, hyper, nugget)
    }

    /// Solves the kernel system for fixed hyperparameters (standardized
    /// units), skipping the likelihood search.
    pub fn fit_with(inputs: &[Vec<f64>], targets: &[f64], hyper: Hyperparameters, nugget: f64) -> Result<Self, GpError> {
        let dim = validate(inputs, targets)?;
        let (shift, scale) = standardization(inputs, dim);
        let prep = Prepared {
            z: inputs.iter().map(|x| x.iter().zip(&shift).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect(),
            y: DVector::from_column_slice(targets),
        };
        Self::assemble(inputs, targets, shift, scale, prep, hyper, nugget)
    }

    fn constant(inputs: &[Vec<f64>], targets: &[f64], dim: usize, nugget: f64) -> Self {
        let mean = targets.iter().sum::<f64>() / targets.len() as f64;
        Self {
            dim,
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
            hyper: Hyperparameters { lengthscales: vec![1.0; dim], signal_variance: 0.0 },
            nugget,
            jitter: nugget * nugget,
            alpha: vec![0.0; inputs.len()],
            scaled: Vec::new(),
            constant: Some(mean),
        }
    }

    fn assemble(
        inputs: &[Vec<f64>],
        targets: &[f64],
        shift: Vec<f64>,
        scale: Vec<f64>,
        prep: Prepared,
        hyper: Hyperparameters,
        nugget: f64,
    ) -> Result<Self, GpError> {
        let n = inputs.len();
        let y_norm = prep.y.norm();
        let mut jitter = nugget * nugget;
        let alpha = loop {
            let k = prep.gram(&hyper, jitter);
            if let Some(chol) = Cholesky::<f64, Dyn>::new(k.clone()) {
                let mut alpha = chol.solve(&prep.y);
                // Two rounds of iterative refinement.
                for _ in 0..2 {
                    let r = &prep.y - &k * &alpha;
                    if r.norm() <= 1e-8 * y_norm {
                        break;
                    }
                    alpha += chol.solve(&r);
                }
                if (&prep.y - &k * &alpha).norm() <= 1e-8 * y_norm.max(1e-300) {
                    break alpha;
                }
            }
            jitter *= 10.0;
            if jitter > MAX_JITTER {
                return Err(GpError::FitFailure { n, jitter: jitter / 10.0 });
            }
        };
        let dim = shift.len();
        let mut scaled = Vec::with_capacity(n * dim);
        for z in &prep.z {
            scaled.extend(z.iter().zip(&hyper.lengthscales).map(|(v, l)| v / l));
        }
        Ok(Self {
            dim,
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            shift,
            scale,
            hyper,
            nugget,
            jitter,
            alpha: alpha.iter().copied().collect(),
            scaled,
            constant: None,
        })
    }

    /// `k(y)ᵀ α`.
    pub fn predict(&self, query: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        debug_assert_eq!(query.len(), self.dim);
        let mut q = [0.0; 16];
        let q = if self.dim <= 16 { &mut q[..self.dim] } else { return self.predict_slow(query) };
        for d in 0..self.dim {
            q[d] = (query[d] - self.shift[d]) / self.scale[d] / self.hyper.lengthscales[d];
        }
        let sv = self.hyper.signal_variance;
        self.scaled
            .chunks_exact(self.dim)
            .zip(&self.alpha)
            .map(|(row, a)| {
                let r2: f64 = row.iter().zip(q.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                a * matern52_of_distance(r2.sqrt(), sv)
            })
            .sum()
    }

    fn predict_slow(&self, query: &[f64]) -> f64 {
        let q: Vec<f64> = (0..self.dim).map(|d| (query[d] - self.shift[d]) / self.scale[d]).collect();
        self.inputs
            .iter()
            .zip(&self.alpha)
            .map(|(x, a)| {
                let z: Vec<f64> = (0..self.dim).map(|d| (x[d] - self.shift[d]) / self.scale[d]).collect();
                a * matern52(&z, &q, &self.hyper.lengthscales, self.hyper.signal_variance)
            })
            .sum()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hyperparameters(&self) -> &Hyperparameters {
        &self.hyper
    }

    /// Lengthscales in the original input units.
    pub fn lengthscales(&self) -> Vec<f64> {
        self.hyper.lengthscales.iter().zip(&self.scale).map(|(l, s)| l * s).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.hyper.signal_variance
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn alpha_weights(&self) -> &[f64] {
        &self.alpha
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Writes the versioned little-endian dump described in the README.
    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.inputs.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[self.constant.is_some() as u8])?;
        let mut put = |v: f64| w.write_all(&v.to_le_bytes());
        put(self.constant.unwrap_or(0.0))?;
        for v in self.shift.iter().chain(&self.scale).chain(&self.hyper.lengthscales) {
            put(*v)?;
        }
        put(self.hyper.signal_variance)?;
        put(self.nugget)?;
        put(self.jitter)?;
        for x in &self.inputs {
            for v in x {
                put(*v)?;
            }
        }
        for v in self.targets.iter().chain(&self.alpha) {
            put(*v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, GpError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(GpError::Format("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> io::Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(r)?;
        if version != DUMP_VERSION {
            return Err(GpError::Format(format!("unsupported version {version}")));
        }
        let n = read_u32(r)? as usize;
        let dim = read_u32(r)? as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let f64s = |r: &mut R, k: usize| -> io::Result<Vec<f64>> {
            let mut out = Vec::with_capacity(k);
            let mut b = [0u8; 8];
            for _ in 0..k {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let constant_value = f64s(r, 1)?[0];
        let shift = f64s(r, dim)?;
        let scale = f64s(r, dim)?;
        let lengthscales = f64s(r, dim)?;
        let tail = f64s(r, 3)?;
        let flat = f64s(r, n * dim)?;
        let targets = f64s(r, n)?;
        let alpha = f64s(r, n)?;
        let inputs: Vec<Vec<f64>> = flat.chunks(dim.max(1)).map(|c| c.to_vec()).take(n).collect();
        let mut scaled = Vec::new();
        if flag[0] == 0 {
            for x in &inputs {
                for d in 0..dim {
                    scaled.push((x[d] - shift[d]) / scale[d] / lengthscales[d]);
                }
            }
        }
        Ok(Self {
            dim,
            inputs,
            targets,
            shift,
            scale,
            hyper: Hyperparameters { lengthscales, signal_variance: tail[0] },
            nugget: tail[1],
            jitter: tail[2],
            alpha,
            scaled,
            constant: (flag[0] != 0).then_some(constant_value),
        })
    }
}

/// Value-function surrogate: a GP on log-values, exponentiated and clamped
/// to the analytic range of the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSurrogate {
    pub gp: GpModel,
    pub floor: f64,
    pub cap: f64,
}

impl ValueSurrogate {
    pub fn fit(inputs: &[Vec<f64>], values: &[f64], floor: f64, cap: f64, nugget: f64) -> Result<Self, GpError> {
        let logs: Vec<f64> = values.iter().map(|v| v.max(floor).ln()).collect();
        Ok(Self { gp: GpModel::fit(inputs, &logs, nugget)?, floor, cap })
    }

    pub fn predict(&self, query: &[f64]) -> f64 {
        self.gp.predict(query).exp().clamp(self.floor, self.cap)
    }
}

/// Policy-component surrogate, clamped to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySurrogate {
    pub gp: GpModel,
}

impl PolicySurrogate {
    pub fn fit(inputs: &[Vec<f64>], actions: &[f64], nugget: f64) -> Result<Self, GpError> {
        Ok(Self { gp: GpModel::fit(inputs, actions, nugget)? })
    }

    pub fn predict(&self, query: &[f64]) -> f64 {
        let v = self.gp.predict(query);
        if v.is_finite() {
            v.clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }
}
