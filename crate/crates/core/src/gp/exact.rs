//! Exact GP regression in normalized space: factorization, marginal
//! likelihood with analytic gradient, prediction and Adam training.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::kernel::{kernel, kernel_sym, RbfHyperparams};
use super::GpError;

/// Diagonal jitter tried in order before giving up on a factorization.
pub const JITTER_LADDER: [f64; 5] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Per-dimension lengthscales; a single shared one otherwise.
    pub ard: bool,
    /// Training rows kept after strided subsampling.
    pub n_max: usize,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ard: true,
            n_max: 2000,
            optimizer: AdamConfig::default(),
        }
    }
}

/// Posterior predictive moments at a batch of queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Queries whose variance came out negative and were clamped to zero.
    pub clamped: usize,
}

/// A zero-mean exact GP conditioned on normalized training data.
#[derive(Debug, Clone)]
pub struct ExactGp {
    hyper: RbfHyperparams,
    x: DMatrix<f64>,
    y: DVector<f64>,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    // fast mean path: training rows divided by lengthscale, row-major,
    // and σ_f² α
    scaled_x: Vec<f64>,
    weights: Vec<f64>,
    inv_ls: Vec<f64>,
}

fn factorize(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    for &jitter in &JITTER_LADDER {
        let mut ky = k.clone();
        for i in 0..ky.nrows() {
            ky[(i, i)] += noise + jitter;
        }
        if let Some(ch) = Cholesky::new(ky) {
            if ch.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok((ch, jitter));
            }
        }
    }
    Err(GpError::FactorizationFailed)
}

impl ExactGp {
    /// Conditions the GP on `(x, y)`.
    pub fn fit(x: DMatrix<f64>, y: DVector<f64>, hyper: RbfHyperparams) -> Result<Self, GpError> {
        if x.nrows() != y.len() {
            return Err(GpError::DimensionMismatch {
                expected: x.nrows(),
                actual: y.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(GpError::InvalidConfig("no training rows".into()));
        }
        if !hyper.is_valid() {
            return Err(GpError::InvalidConfig("non-finite hyperparameters".into()));
        }
        let k = kernel_sym(&x, &hyper)?;
        let (chol, jitter) = factorize(&k, hyper.noise_variance())?;
        let alpha = chol.solve(&y);
        let inv_ls: Vec<f64> = hyper.log_lengthscales.iter().map(|l| (-l).exp()).collect();
        let d = x.ncols();
        let mut scaled_x = Vec::with_capacity(x.nrows() * d);
        for a in 0..x.nrows() {
            for j in 0..d {
                scaled_x.push(x[(a, j)] * inv_ls[j]);
            }
        }
        let sf2 = hyper.signal_variance();
        let weights = alpha.iter().map(|a| a * sf2).collect();
        Ok(Self {
            hyper,
            x,
            y,
            jitter,
            chol,
            alpha,
            scaled_x,
            weights,
            inv_ls,
        })
    }

    pub fn hyper(&self) -> &RbfHyperparams {
        &self.hyper
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_train(&self) -> usize {
        self.x.nrows()
    }

    /// Lower Cholesky factor of `K + (σ_n² + jitter) I`.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `K + (σ_n² + jitter) I` rebuilt from the hyperparameters.
    pub fn noisy_gram(&self) -> Result<DMatrix<f64>, GpError> {
        let mut k = kernel_sym(&self.x, &self.hyper)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.hyper.noise_variance() + self.jitter;
        }
        Ok(k)
    }

    /// Relative Frobenius error of `L Lᵀ` against the noisy Gram matrix.
    pub fn reconstruction_error(&self) -> Result<f64, GpError> {
        let ky = self.noisy_gram()?;
        let l = self.chol.l();
        Ok((&l * l.transpose() - &ky).norm() / ky.norm())
    }

    /// `log p(y | X, θ)` with `K_y = K + (σ_n² + jitter) I`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y.len() as f64;
        let fit = self.y.dot(&self.alpha);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * fit - log_det - 0.5 * n * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to
    /// [`RbfHyperparams::to_params`].
    ///
    /// `∂/∂θ = ½ tr((α αᵀ - K_y⁻¹) ∂K_y/∂θ)`.
    pub fn lml_gradient(&self, ard: bool) -> Vec<f64> {
        let n = self.x.nrows();
        let d = self.x.ncols();
        let mut m = self.chol.inverse();
        m.neg_mut();
        m.ger(1.0, &self.alpha, &self.alpha, 1.0);

        let sf2 = self.hyper.signal_variance();
        let mut g_ls = vec![0.0; d];
        let mut g_sf = 0.0;
        let mut diff = vec![0.0; d];
        for b in 0..n {
            let rb = &self.scaled_x[b * d..(b + 1) * d];
            for a in (b + 1)..n {
                let ra = &self.scaled_x[a * d..(a + 1) * d];
                let mut r2 = 0.0;
                for j in 0..d {
                    let u = ra[j] - rb[j];
                    diff[j] = u * u;
                    r2 += diff[j];
                }
                let kab = sf2 * (-0.5 * r2).exp();
                let w = m[(a, b)] * kab;
                // off-diagonal pairs appear twice in the trace; the ½ cancels
                g_sf += w;
                for j in 0..d {
                    g_ls[j] += w * diff[j];
                }
            }
        }
        let trace_m: f64 = m.diagonal().sum();
        g_sf += 0.5 * sf2 * trace_m;
        let g_sn = 0.5 * self.hyper.noise_variance() * trace_m;

        let mut grad = if ard { g_ls } else { vec![g_ls.iter().sum()] };
        grad.push(g_sf);
        grad.push(g_sn);
        grad
    }

    /// Posterior mean and observation-level variance (includes σ_n²).
    pub fn predict(&self, xq: &DMatrix<f64>) -> Result<Prediction, GpError> {
        if xq.ncols() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                actual: xq.ncols(),
            });
        }
        let ks = kernel(&self.x, xq, &self.hyper)?;
        let mean: Vec<f64> = (ks.transpose() * &self.alpha).iter().copied().collect();
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or(GpError::FactorizationFailed)?;
        let prior = self.hyper.signal_variance() + self.hyper.noise_variance();
        let mut clamped = 0;
        let variance = (0..xq.nrows())
            .map(|q| {
                let var = prior - v.column(q).norm_squared();
                if var < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    var
                }
            })
            .collect();
        if clamped > 0 {
            log::warn!("{clamped} predictive variances clamped at zero");
        }
        Ok(Prediction {
            mean,
            variance,
            clamped,
        })
    }

    /// Posterior mean at one normalized query row.
    pub fn mean_at(&self, q: &[f64]) -> f64 {
        let d = self.inv_ls.len();
        let mut qs = [0.0f64; 64];
        let qs: &mut [f64] = if d <= 64 { &mut qs[..d] } else { &mut vec![0.0; d][..] };
        for j in 0..d {
            qs[j] = q[j] * self.inv_ls[j];
        }
        let mut acc = 0.0;
        for (row, w) in self.scaled_x.chunks_exact(d).zip(&self.weights) {
            let mut r2 = 0.0;
            for j in 0..d {
                let u = row[j] - qs[j];
                r2 += u * u;
            }
            acc += w * (-0.5 * r2).exp();
        }
        acc
    }

    /// Fits hyperparameters by Adam on the negative log marginal likelihood
    /// and returns the GP at the best iterate seen.
    pub fn train(
        x: DMatrix<f64>,
        y: DVector<f64>,
        cfg: &TrainConfig,
        seed: u64,
    ) -> Result<Self, GpError> {
        if x.nrows() < 2 {
            return Err(GpError::InvalidConfig("need at least 2 training rows".into()));
        }
        if cfg.n_max < 2 {
            return Err(GpError::InvalidConfig("n_max must be at least 2".into()));
        }
        let idx = subsample_indices(x.nrows(), cfg.n_max, seed);
        let (x, y) = if idx.len() < x.nrows() {
            (x.select_rows(idx.iter()), y.select_rows(idx.iter()))
        } else {
            (x, y)
        };
        let dim = x.ncols();
        let mut params = RbfHyperparams::init(dim).to_params(cfg.ard);
        let mut opt = Adam::new(cfg.optimizer.clone(), params.len());

        let mut best =
            ExactGp::fit(x.clone(), y.clone(), RbfHyperparams::from_params(&params, dim, cfg.ard))?;
        let mut best_loss = -best.log_marginal_likelihood();
        let mut current = best.clone();
        for step in 0..cfg.optimizer.steps {
            let grad = current.lml_gradient(cfg.ard);
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            opt.step(&mut params, &neg);
            let hyper = RbfHyperparams::from_params(&params, dim, cfg.ard);
            if !hyper.is_valid() {
                log::warn!("hyperparameters left the finite range at step {step}");
                break;
            }
            current = ExactGp::fit(x.clone(), y.clone(), hyper)?;
            let loss = -current.log_marginal_likelihood();
            if !loss.is_finite() {
                log::warn!("non-finite loss at step {step}; keeping best iterate");
                break;
            }
            if loss < best_loss {
                best_loss = loss;
                best = current.clone();
            }
            log::trace!("adam step {step}: loss {loss:.6}");
        }
        log::debug!("gp training done: best negative LML {best_loss:.4}");
        Ok(best)
    }
}

/// Evenly strided row subset of size `min(n, n_max)`, with a seed-chosen
/// phase within the first stride.
pub fn subsample_indices(n: usize, n_max: usize, seed: u64) -> Vec<usize> {
    if n <= n_max {
        return (0..n).collect();
    }
    let stride = n as f64 / n_max as f64;
    let phase: f64 = ChaCha8Rng::seed_from_u64(seed).random::<f64>() * stride;
    (0..n_max)
        .map(|i| ((phase + i as f64 * stride).floor() as usize).min(n - 1))
        .collect()
}
