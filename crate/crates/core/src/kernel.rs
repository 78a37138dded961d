//! Squared-exponential (ARD) covariance and its log-hyperparameter
//! derivatives.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative diagonal jitter applied before any factorization of a covariance
/// matrix: `1e-6 * sigma^2`, so grid sweeps over the magnitude stay equally
/// well conditioned.
pub const JITTER_REL: f64 = 1e-6;

/// Log-scale hyperparameters of the squared-exponential covariance.
///
/// One shared lengthscale broadcasts to every input dimension; a vector of
/// length `d` gives one lengthscale per dimension (ARD). The same
/// hyperparameters are used for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// `log(sigma^2)`, the log of the signal variance.
    pub log_magnitude: f64,
    /// Log lengthscales; length 1 (shared) or `d` (ARD).
    pub log_lengthscales: Vec<f64>,
}

impl Hyperparams {
    pub fn new(log_magnitude: f64, log_lengthscales: Vec<f64>) -> Result<Self> {
        if !log_magnitude.is_finite() || log_lengthscales.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("hyperparameters".into()));
        }
        if log_lengthscales.is_empty() {
            return Err(Error::InvalidInput("need at least one lengthscale".into()));
        }
        Ok(Self {
            log_magnitude,
            log_lengthscales,
        })
    }

    /// Shared-lengthscale constructor.
    pub fn isotropic(log_magnitude: f64, log_lengthscale: f64) -> Self {
        Self {
            log_magnitude,
            log_lengthscales: vec![log_lengthscale],
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.log_magnitude.exp()
    }

    /// Inverse squared lengthscale for input dimension `k`.
    fn inv_sq_lengthscale(&self, k: usize) -> f64 {
        let ll = if self.log_lengthscales.len() == 1 {
            self.log_lengthscales[0]
        } else {
            self.log_lengthscales[k]
        };
        (-2.0 * ll).exp()
    }

    /// Checks the lengthscale vector against the input dimension.
    fn check_dim(&self, d: usize) -> Result<()> {
        let q = self.log_lengthscales.len();
        if q != 1 && q != d {
            return Err(Error::InvalidInput(format!(
                "{q} lengthscales for {d} input dimensions"
            )));
        }
        Ok(())
    }

    /// Number of free log-parameters: 1 + number of lengthscales.
    pub fn num_params(&self) -> usize {
        1 + self.log_lengthscales.len()
    }

    /// Flattened log-parameter vector `[log sigma^2, log l_1, ...]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.push(self.log_magnitude);
        v.extend_from_slice(&self.log_lengthscales);
        v
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidInput("parameter vector too short".into()));
        }
        Self::new(v[0], v[1..].to_vec())
    }
}

fn scaled_sq_dist(theta: &Hyperparams, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        s += theta.inv_sq_lengthscale(k) * diff * diff;
    }
    s
}

/// Builds the `n x n` squared-exponential covariance of the rows of `x`.
///
/// No jitter is added here; callers add `JITTER_REL * sigma^2` to the
/// diagonal immediately before factorizing.
pub fn build_covariance(x: &DMatrix<f64>, theta: &Hyperparams) -> Result<DMatrix<f64>> {
    theta.check_dim(x.ncols())?;
    let n = x.nrows();
    let sigma2 = theta.sigma2();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        k[(i, i)] = sigma2;
        for j in 0..i {
            let xj: Vec<f64> = x.row(j).iter().copied().collect();
            let v = sigma2 * (-0.5 * scaled_sq_dist(theta, &xi, &xj)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }
    Ok(k)
}

/// Covariance between the rows of `x` and the rows of `xstar` (`n x m`).
pub fn cross_covariance(
    x: &DMatrix<f64>,
    xstar: &DMatrix<f64>,
    theta: &Hyperparams,
) -> Result<DMatrix<f64>> {
    if x.ncols() != xstar.ncols() {
        return Err(Error::InvalidInput(format!(
            "input dimensions differ: {} vs {}",
            x.ncols(),
            xstar.ncols()
        )));
    }
    theta.check_dim(x.ncols())?;
    let sigma2 = theta.sigma2();
    let mut k = DMatrix::zeros(x.nrows(), xstar.nrows());
    for i in 0..x.nrows() {
        let xi: Vec<f64> = x.row(i).iter().copied().collect();
        for j in 0..xstar.nrows() {
            let xj: Vec<f64> = xstar.row(j).iter().copied().collect();
            k[(i, j)] = sigma2 * (-0.5 * scaled_sq_dist(theta, &xi, &xj)).exp();
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cross covariance".into()));
    }
    Ok(k)
}

/// Derivative of the covariance with respect to log-parameter `which`,
/// where index 0 is `log sigma^2` and index `1 + k` is the `k`'th log
/// lengthscale.
pub fn covariance_grad(
    x: &DMatrix<f64>,
    theta: &Hyperparams,
    which: usize,
) -> Result<DMatrix<f64>> {
    theta.check_dim(x.ncols())?;
    if which >= theta.num_params() {
        return Err(Error::InvalidInput(format!(
            "parameter index {which} out of range 0..{}",
            theta.num_params()
        )));
    }
    let k = build_covariance(x, theta)?;
    if which == 0 {
        // d/d log(sigma^2): the kernel scales linearly with sigma^2.
        return Ok(k);
    }
    let dim = which - 1;
    let shared = theta.log_lengthscales.len() == 1;
    let n = x.nrows();
    let mut g = k;
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            if shared {
                for q in 0..x.ncols() {
                    let diff = x[(i, q)] - x[(j, q)];
                    s += theta.inv_sq_lengthscale(q) * diff * diff;
                }
            } else {
                let diff = x[(i, dim)] - x[(j, dim)];
                s = theta.inv_sq_lengthscale(dim) * diff * diff;
            }
            g[(i, j)] *= s;
        }
    }
    Ok(g)
}

/// Covariance with the standard relative jitter on the diagonal, ready for
/// factorization.
pub fn jittered_covariance(x: &DMatrix<f64>, theta: &Hyperparams) -> Result<DMatrix<f64>> {
    let mut k = build_covariance(x, theta)?;
    let eps = JITTER_REL * theta.sigma2();
    for i in 0..k.nrows() {
        k[(i, i)] += eps;
    }
    Ok(k)
}
