//! Euler-Maruyama simulation of the hidden process
//!
//! ```text
//! x' = x + g(x) dt + Σ^{1/2} ξ √dt,   ξ ~ N(0, I)
//! ```
//!
//! Noise for step `s` of a simulation comes from `rng.child(s)`, and row `i`
//! of that draw from its own sub-stream, so a sample's path never depends on
//! how many other samples share the batch.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::autodiff::Matrix;
use crate::nn::{Activation, Checkpoint, CheckpointError, Entry, Mlp, NnError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("substeps per observation must be at least 1")]
    InvalidSubsteps,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite drift at sample {sample} (Euler step {step})")]
    NonFiniteDrift { step: usize, sample: usize },
    #[error("non-finite state at sample {sample} (Euler step {step})")]
    NonFiniteState { step: usize, sample: usize },
    #[error("invalid initial distribution: {0}")]
    InvalidInitial(String),
    #[error("matrix is not symmetric positive semidefinite")]
    NotPsd,
    #[error("OU rate must be positive, got {0}")]
    InvalidTheta(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, SdeError>;

/// A drift field on `R^n`, evaluated on a batch with one sample per row.
pub trait Drift {
    fn dim(&self) -> usize;
    fn drift(&self, x: &Matrix) -> Result<Matrix>;
}

impl Drift for Mlp {
    fn dim(&self) -> usize {
        self.input_dim()
    }

    fn drift(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?)
    }
}

/// Wraps a closure as a drift, used by the synthetic generators.
pub struct FnDrift<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(f64) -> f64> FnDrift<F> {
    /// A drift acting coordinate-wise.
    pub fn elementwise(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(f64) -> f64> Drift for FnDrift<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.mapv(&self.f))
    }
}

/// Ornstein-Uhlenbeck drift `θ(μ − x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuDrift {
    pub theta: f64,
    pub mu: Vec<f64>,
}

pub fn ou_drift(theta: f64, mu: &[f64]) -> Result<OuDrift> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(SdeError::InvalidTheta(theta));
    }
    Ok(OuDrift {
        theta,
        mu: mu.to_vec(),
    })
}

impl Drift for OuDrift {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn drift(&self, x: &Matrix) -> Result<Matrix> {
        check_dim(self.mu.len(), x.ncols())?;
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (v, m) in row.iter_mut().zip(&self.mu) {
                *v = self.theta * (m - *v);
            }
        }
        Ok(out)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SdeError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Scaled Gaussian increments `ξ Σ^{1/2ᵀ} √dt` for one Euler step.
pub fn increment(rng: &Rng, rows: usize, sigma_root: &Matrix, dt: f64) -> Matrix {
    let xi = rng.normal_matrix(rows, sigma_root.nrows());
    xi.dot(&sigma_root.t()) * dt.sqrt()
}

/// One Euler-Maruyama step with explicit increments.
pub fn euler_step_with(x: &Matrix, drift: &dyn Drift, dt: f64, noise: &Matrix, step: usize) -> Result<Matrix> {
    check_dim(drift.dim(), x.ncols())?;
    let g = drift.drift(x)?;
    if let Some(sample) = first_non_finite_row(&g) {
        return Err(SdeError::NonFiniteDrift { step, sample });
    }
    let next = x + &(g * dt) + noise;
    if let Some(sample) = first_non_finite_row(&next) {
        return Err(SdeError::NonFiniteState { step, sample });
    }
    Ok(next)
}

/// One Euler-Maruyama step drawing its noise from `rng`.
pub fn euler_step(x: &Matrix, drift: &dyn Drift, sigma_root: &Matrix, dt: f64, rng: &Rng) -> Result<Matrix> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SdeError::InvalidStep(dt));
    }
    check_dim(sigma_root.nrows(), x.ncols())?;
    let noise = increment(rng, x.nrows(), sigma_root, dt);
    euler_step_with(x, drift, dt, &noise, 0)
}

fn first_non_finite_row(m: &Matrix) -> Option<usize> {
    m.rows()
        .into_iter()
        .position(|r| r.iter().any(|v| !v.is_finite()))
}

/// Runs `substeps` Euler steps per observation gap for `gaps` gaps and
/// returns the state at every observation time, starting with `x0`.
pub fn simulate_drift(
    drift: &dyn Drift,
    sigma_root: &Matrix,
    dt: f64,
    substeps: usize,
    x0: &Matrix,
    gaps: usize,
    rng: &Rng,
) -> Result<Vec<Matrix>> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SdeError::InvalidStep(dt));
    }
    if substeps == 0 {
        return Err(SdeError::InvalidSubsteps);
    }
    check_dim(drift.dim(), x0.ncols())?;
    check_dim(sigma_root.nrows(), x0.ncols())?;
    let mut out = Vec::with_capacity(gaps + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for gap in 0..gaps {
        for sub in 0..substeps {
            let step = gap * substeps + sub;
            let noise = increment(&rng.child(step as u64), x.nrows(), sigma_root, dt);
            x = euler_step_with(&x, drift, dt, &noise, step)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// The learned hidden dynamic: drift `g`, observation map `f`, a fixed
/// noise root, and the Euler grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    pub g: Mlp,
    pub f: Mlp,
    pub sigma_root: Matrix,
    pub dt: f64,
    pub substeps_per_obs: usize,
}

impl DiffusionModel {
    /// Four-layer drift and two-layer observation map, ReLU hidden units.
    pub fn new(
        hidden_dim: usize,
        obs_dim: usize,
        width: usize,
        sigma_root: Matrix,
        dt: f64,
        substeps_per_obs: usize,
        seed: u64,
    ) -> Result<Self> {
        let rng = Rng::new(seed);
        let g = Mlp::new(&[hidden_dim, width, width, width, hidden_dim], Activation::Relu, rng.child(0).stream().next_u64())?;
        let f = Mlp::new(&[hidden_dim, width, obs_dim], Activation::Relu, rng.child(1).stream().next_u64())?;
        Self::from_parts(g, f, sigma_root, dt, substeps_per_obs)
    }

    pub fn from_parts(g: Mlp, f: Mlp, sigma_root: Matrix, dt: f64, substeps_per_obs: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SdeError::InvalidStep(dt));
        }
        if substeps_per_obs == 0 {
            return Err(SdeError::InvalidSubsteps);
        }
        let n = g.input_dim();
        check_dim(n, g.output_dim())?;
        check_dim(n, f.input_dim())?;
        check_dim(n, sigma_root.nrows())?;
        check_dim(n, sigma_root.ncols())?;
        if sigma_root.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::NotPsd);
        }
        Ok(Self {
            g,
            f,
            sigma_root,
            dt,
            substeps_per_obs,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.g.input_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.f.output_dim()
    }

    /// Hidden states at observation times `0..=gaps`.
    pub fn simulate(&self, x0: &Matrix, gaps: usize, rng: &Rng) -> Result<Vec<Matrix>> {
        simulate_drift(&self.g, &self.sigma_root, self.dt, self.substeps_per_obs, x0, gaps, rng)
    }

    /// Advances `x` by one observation gap.
    pub fn propagate(&self, x: &Matrix, rng: &Rng) -> Result<Matrix> {
        Ok(self.simulate(x, 1, rng)?.pop().expect("two states"))
    }

    pub fn observe(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.f.forward(x)?)
    }

    pub fn write_checkpoint(&self, ckpt: &mut Checkpoint) {
        ckpt.insert("g", Entry::Mlp(self.g.clone()));
        ckpt.insert("f", Entry::Mlp(self.f.clone()));
        ckpt.insert("sigma_root", Entry::Matrix(self.sigma_root.clone()));
        ckpt.set_meta("dt", format!("{:.17e}", self.dt));
        ckpt.set_meta("substeps_per_obs", self.substeps_per_obs);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let dt = ckpt
            .meta("dt")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::MissingEntry("dt".into()))?;
        let substeps = ckpt
            .meta("substeps_per_obs")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CheckpointError::MissingEntry("substeps_per_obs".into()))?;
        Self::from_parts(
            ckpt.mlp("g")?.clone(),
            ckpt.mlp("f")?.clone(),
            ckpt.matrix("sigma_root")?.clone(),
            dt,
            substeps,
        )
    }
}

/// Distribution of the initial hidden state.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialSpec {
    StandardNormal(usize),
    Normal { mean: Vec<f64>, cov_root: Matrix },
    Uniform { dim: usize, lo: f64, hi: f64 },
}

impl InitialSpec {
    pub fn dim(&self) -> usize {
        match self {
            InitialSpec::StandardNormal(n) => *n,
            InitialSpec::Normal { mean, .. } => mean.len(),
            InitialSpec::Uniform { dim, .. } => *dim,
        }
    }
}

pub fn sample_initial(spec: &InitialSpec, count: usize, rng: &Rng) -> Result<Matrix> {
    if count == 0 {
        return Err(SdeError::InvalidInitial("count must be positive".into()));
    }
    match spec {
        InitialSpec::StandardNormal(n) => Ok(rng.normal_matrix(count, *n)),
        InitialSpec::Normal { mean, cov_root } => {
            let n = mean.len();
            if cov_root.dim() != (n, n) {
                return Err(SdeError::InvalidInitial(format!(
                    "covariance root is {:?}, mean has {n} entries",
                    cov_root.dim()
                )));
            }
            let mut x = rng.normal_matrix(count, n).dot(&cov_root.t());
            for mut row in x.rows_mut() {
                for (v, m) in row.iter_mut().zip(mean) {
                    *v += m;
                }
            }
            Ok(x)
        }
        InitialSpec::Uniform { dim, lo, hi } => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(SdeError::InvalidInitial(format!("need lo < hi, got [{lo}, {hi}]")));
            }
            Ok(rng.uniform_matrix(count, *dim, *lo, *hi))
        }
    }
}

/// Symmetric square root of a positive semidefinite matrix through its
/// eigen-decomposition. Tiny negative eigenvalues from round-off are clamped.
pub fn psd_sqrt(cov: &Matrix) -> Result<Matrix> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(SdeError::NotPsd);
    }
    for i in 0..n {
        for j in 0..i {
            if (cov[[i, j]] - cov[[j, i]]).abs() > 1e-12 * (1.0 + cov[[i, j]].abs()) {
                return Err(SdeError::NotPsd);
            }
        }
    }
    let m = DMatrix::from_fn(n, n, |i, j| cov[[i, j]]);
    let eig = m.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(SdeError::NotPsd);
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root = &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose();
    Ok(Matrix::from_shape_fn((n, n), |(i, j)| 0.5 * (root[(i, j)] + root[(j, i)])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_drift(n: usize) -> FnDrift<impl Fn(f64) -> f64> {
        FnDrift::elementwise(n, |v| v)
    }

    #[test]
    fn zero_drift_zero_noise_is_identity() {
        let zero = FnDrift::elementwise(2, |_| 0.0);
        let x = array![[1.0, -3.0], [0.5, 2.0]];
        let y = euler_step(&x, &zero, &Matrix::zeros((2, 2)), 0.2, &Rng::new(0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn one_deterministic_step() {
        let x = array![[1.0]];
        let y = euler_step(&x, &identity_drift(1), &Matrix::zeros((1, 1)), 0.2, &Rng::new(0)).unwrap();
        assert!((y[[0, 0]] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_drift_names_sample() {
        let blow = FnDrift::elementwise(1, |v: f64| if v > 1.0 { f64::NAN } else { v });
        let x = array![[0.0], [0.5], [2.0]];
        let err = euler_step(&x, &blow, &Matrix::zeros((1, 1)), 0.1, &Rng::new(0)).unwrap_err();
        assert!(matches!(err, SdeError::NonFiniteDrift { sample: 2, .. }));
        assert!(euler_step(&x, &blow, &Matrix::zeros((1, 1)), 0.0, &Rng::new(0)).is_err());
    }

    #[test]
    fn ou_drift_formula() {
        let d = ou_drift(1.0, &[0.0]).unwrap();
        assert_eq!(d.drift(&array![[2.0]]).unwrap(), array![[-2.0]]);
        assert_eq!(d.drift(&array![[0.0]]).unwrap(), array![[0.0]]);
        let d = ou_drift(0.5, &[1.0, 1.0]).unwrap();
        assert_eq!(d.drift(&array![[0.0, 2.0]]).unwrap(), array![[0.5, -0.5]]);
        assert!(ou_drift(0.0, &[0.0]).is_err());
    }

    #[test]
    fn single_substep_matches_euler_step() {
        let drift = ou_drift(0.7, &[0.3, -0.2]).unwrap();
        let root = array![[0.1, 0.0], [0.02, 0.1]];
        let x0 = Rng::new(5).normal_matrix(6, 2);
        let rng = Rng::new(9);
        let path = simulate_drift(&drift, &root, 0.1, 1, &x0, 3, &rng).unwrap();
        assert_eq!(path.len(), 4);
        let mut x = x0.clone();
        for (s, expected) in path.iter().enumerate().skip(1) {
            x = euler_step(&x, &drift, &root, 0.1, &rng.child(s as u64 - 1)).unwrap();
            assert_eq!(&x, expected);
        }
    }

    #[test]
    fn linear_drift_matches_matrix_power() {
        // x' = x + A x dt, so after k steps x_k = (I + A dt)^k x_0.
        let a = array![[0.25, 0.1], [-0.3, 0.05]];
        let g = Mlp::from_parts(
            vec![2, 2],
            vec![Activation::Linear],
            vec![a.t().to_owned()],
            vec![Matrix::zeros((1, 2))],
        )
        .unwrap();
        let x0 = array![[1.0, -0.5], [0.3, 2.0]];
        let path = simulate_drift(&g, &Matrix::zeros((2, 2)), 0.2, 5, &x0, 3, &Rng::new(0)).unwrap();
        let step = Matrix::eye(2) + &(&a * 0.2);
        let mut power = Matrix::eye(2);
        for (t, x) in path.iter().enumerate() {
            let expected = x0.dot(&power.t());
            for (u, v) in x.iter().zip(expected.iter()) {
                assert!((u - v).abs() < 1e-10, "t={t}");
            }
            for _ in 0..5 {
                power = step.dot(&power);
            }
        }
    }

    #[test]
    fn samples_independent_of_batch_size() {
        let drift = ou_drift(1.0, &[0.0, 0.0]).unwrap();
        let root = Matrix::eye(2) * 0.3;
        let x_small = Matrix::ones((3, 2));
        let x_big = Matrix::ones((40, 2));
        let rng = Rng::new(12);
        let a = simulate_drift(&drift, &root, 0.1, 5, &x_small, 2, &rng).unwrap();
        let b = simulate_drift(&drift, &root, 0.1, 5, &x_big, 2, &rng).unwrap();
        for t in 0..3 {
            assert_eq!(a[t], b[t].slice(ndarray::s![0..3, ..]));
        }
    }

    #[test]
    fn increments_have_variance_dt() {
        let dt = 0.04;
        let inc = increment(&Rng::new(3), 100_000, &Matrix::eye(1), dt);
        let n = inc.len() as f64;
        let mean = inc.sum() / n;
        let var = inc.mapv(|v| (v - mean).powi(2)).sum() / (n - 1.0);
        // Sample variance has standard error dt * sqrt(2 / n).
        assert!((var - dt).abs() < 3.0 * dt * (2.0 / n).sqrt(), "var {var}");
    }

    #[test]
    fn initial_samples() {
        let rng = Rng::new(1);
        let x = sample_initial(&InitialSpec::StandardNormal(2), 100_000, &rng).unwrap();
        let n = x.nrows() as f64;
        for col in x.columns() {
            assert!((col.sum() / n).abs() < 3.0 / n.sqrt());
        }
        let u = sample_initial(&InitialSpec::Uniform { dim: 2, lo: -2.0, hi: 2.0 }, 10_000, &rng).unwrap();
        assert!(u.iter().all(|v| (-2.0..=2.0).contains(v)));
        assert_eq!(
            sample_initial(&InitialSpec::StandardNormal(3), 50, &rng).unwrap(),
            sample_initial(&InitialSpec::StandardNormal(3), 50, &rng).unwrap()
        );
        assert!(sample_initial(&InitialSpec::Uniform { dim: 1, lo: 1.0, hi: 1.0 }, 5, &rng).is_err());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let cov = array![[0.04, 0.032], [0.032, 0.04]];
        let r = psd_sqrt(&cov).unwrap();
        let back = r.dot(&r);
        for (a, b) in back.iter().zip(cov.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(r[[0, 1]], r[[1, 0]]);
        assert!(psd_sqrt(&array![[1.0, 0.0], [0.0, -1.0]]).is_err());
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let model = DiffusionModel::new(2, 2, 8, psd_sqrt(&array![[0.0025, 0.002], [0.002, 0.0025]]).unwrap(), 0.2, 5, 4)
            .unwrap();
        let mut ckpt = Checkpoint::new();
        model.write_checkpoint(&mut ckpt);
        let back = DiffusionModel::from_checkpoint(&Checkpoint::from_text(&ckpt.to_text()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
