//! Squared-exponential (RBF) kernel with per-dimension lengthscales.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::GpError;

/// Kernel and noise parameters, stored as natural logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfHyperparams {
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_noise_variance: f64,
}

impl RbfHyperparams {
    /// Unit lengthscales and signal variance, noise variance 0.1.
    pub fn init(dim: usize) -> Self {
        Self {
            log_lengthscales: vec![0.0; dim],
            log_signal_variance: 0.0,
            log_noise_variance: 0.1f64.ln(),
        }
    }

    pub fn new(lengthscales: &[f64], signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            log_lengthscales: lengthscales.iter().map(|l| l.ln()).collect(),
            log_signal_variance: signal_variance.ln(),
            log_noise_variance: noise_variance.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn lengthscales(&self) -> Vec<f64> {
        self.log_lengthscales.iter().map(|l| l.exp()).collect()
    }

    pub fn signal_variance(&self) -> f64 {
        self.log_signal_variance.exp()
    }

    pub fn noise_variance(&self) -> f64 {
        self.log_noise_variance.exp()
    }

    pub fn is_valid(&self) -> bool {
        self.log_lengthscales
            .iter()
            .chain([&self.log_signal_variance, &self.log_noise_variance])
            .all(|v| v.is_finite() && v.exp() > 0.0 && v.exp().is_finite())
    }

    /// Flattens to `[log ℓ_1..log ℓ_D, log σ_f², log σ_n²]`, or
    /// `[log ℓ, log σ_f², log σ_n²]` with a shared lengthscale.
    pub fn to_params(&self, ard: bool) -> Vec<f64> {
        let mut p = if ard {
            self.log_lengthscales.clone()
        } else {
            vec![self.log_lengthscales.first().copied().unwrap_or(0.0)]
        };
        p.push(self.log_signal_variance);
        p.push(self.log_noise_variance);
        p
    }

    pub fn from_params(params: &[f64], dim: usize, ard: bool) -> Self {
        let n = params.len();
        let log_lengthscales = if ard {
            params[..dim].to_vec()
        } else {
            vec![params[0]; dim]
        };
        Self {
            log_lengthscales,
            log_signal_variance: params[n - 2],
            log_noise_variance: params[n - 1],
        }
    }
}

fn check_dim(cols: usize, h: &RbfHyperparams) -> Result<(), GpError> {
    if cols != h.dim() {
        return Err(GpError::DimensionMismatch {
            expected: h.dim(),
            actual: cols,
        });
    }
    Ok(())
}

/// `K[a,b] = σ_f² exp(-½ Σ_j ((x1[a,j] - x2[b,j]) / ℓ_j)²)`.
pub fn kernel(x1: &DMatrix<f64>, x2: &DMatrix<f64>, h: &RbfHyperparams) -> Result<DMatrix<f64>, GpError> {
    check_dim(x1.ncols(), h)?;
    check_dim(x2.ncols(), h)?;
    let inv_ls: Vec<f64> = h.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let sf2 = h.signal_variance();
    Ok(DMatrix::from_fn(x1.nrows(), x2.nrows(), |a, b| {
        let mut r2 = 0.0;
        for (j, il) in inv_ls.iter().enumerate() {
            let d = (x1[(a, j)] - x2[(b, j)]) * il;
            r2 += d * d;
        }
        sf2 * (-0.5 * r2).exp()
    }))
}

/// Symmetric `K(X, X)`, filling only one triangle's worth of exponentials.
pub fn kernel_sym(x: &DMatrix<f64>, h: &RbfHyperparams) -> Result<DMatrix<f64>, GpError> {
    check_dim(x.ncols(), h)?;
    let n = x.nrows();
    let d = x.ncols();
    let inv_ls: Vec<f64> = h.log_lengthscales.iter().map(|l| (-l).exp()).collect();
    let sf2 = h.signal_variance();
    // row-major scaled copy for cache-friendly distance loops
    let scaled: Vec<f64> = (0..n)
        .flat_map(|a| (0..d).map(move |j| (a, j)))
        .map(|(a, j)| x[(a, j)] * inv_ls[j])
        .collect();
    let mut k = DMatrix::zeros(n, n);
    for a in 0..n {
        k[(a, a)] = sf2;
        let ra = &scaled[a * d..(a + 1) * d];
        for b in 0..a {
            let rb = &scaled[b * d..(b + 1) * d];
            let r2: f64 = ra.iter().zip(rb).map(|(u, v)| (u - v) * (u - v)).sum();
            let v = sf2 * (-0.5 * r2).exp();
            k[(a, b)] = v;
            k[(b, a)] = v;
        }
    }
    Ok(k)
}
