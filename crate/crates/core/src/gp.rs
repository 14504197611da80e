//! Exact Gaussian-process regression with a Matérn-5/2 kernel.
//!
//! Inputs are stored as rows of an `n × d` matrix. Hyperparameters live in log
//! space; the noise variance is `NOISE_FLOOR + exp(raw_noise)`.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::nn::{AdamConfig, ScalarAdam};
use crate::{par, Error, Result};

pub const NOISE_FLOOR: f64 = 1e-6;
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-3;
/// Smallest reported predictive variance.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const POSTERIOR_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_lengthscale: f64,
    pub log_outputscale: f64,
    pub raw_noise: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams::new(0.5, 1.0, 1e-2)
    }
}

impl KernelParams {
    /// From natural values; `noise` is clamped to the floor.
    pub fn new(lengthscale: f64, outputscale: f64, noise: f64) -> Self {
        let extra = (noise - NOISE_FLOOR).max(1e-300);
        KernelParams {
            log_lengthscale: lengthscale.ln(),
            log_outputscale: outputscale.ln(),
            raw_noise: extra.ln(),
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn outputscale(&self) -> f64 {
        self.log_outputscale.exp()
    }

    pub fn noise(&self) -> f64 {
        NOISE_FLOOR + self.raw_noise.exp()
    }

    fn to_vec(self) -> [f64; 3] {
        [self.log_lengthscale, self.log_outputscale, self.raw_noise]
    }

    fn from_slice(v: &[f64]) -> Self {
        KernelParams {
            log_lengthscale: v[0],
            log_outputscale: v[1],
            raw_noise: v[2],
        }
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Gamma(shape, rate) prior on the lengthscale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        GammaPrior { shape: 3.0, rate: 6.0 }
    }
}

impl GammaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    /// Derivative of the log density with respect to `ln x`.
    pub fn dlog_density_dlog(&self, x: f64) -> f64 {
        (self.shape - 1.0) - self.rate * x
    }
}

/// Lanczos approximation (g = 7), accurate to ~1e-15 for positive arguments.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
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
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + a.ln()
}

/// `outputscale · (1 + √5 r + 5r²/3) · exp(−√5 r)`, `r = |a − b| / lengthscale`.
pub fn matern_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let r = sq_dist(a, b).sqrt() / params.lengthscale();
    params.outputscale() * matern_unit(r)
}

fn matern_unit(r: f64) -> f64 {
    (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Kernel matrix between the rows of `a` and the rows of `b`.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, params: &KernelParams) -> DMatrix<f64> {
    let inv_l = 1.0 / params.lengthscale();
    let s = params.outputscale();
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| s * matern_unit(sq_dist(&ra[i], &rb[j]).sqrt() * inv_l))
}

#[derive(Clone, Debug)]
struct Factor {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    l_inv: OnceLock<DMatrix<f64>>,
}

impl Factor {
    fn l_inv(&self) -> &DMatrix<f64> {
        self.l_inv.get_or_init(|| {
            let l = self.chol.l();
            let n = l.nrows();
            l.solve_lower_triangular(&DMatrix::identity(n, n))
                .expect("cholesky factor has a positive diagonal")
        })
    }
}

/// Cholesky of `k + jitter·I`, escalating the jitter from 1e-8 to 1e-3.
fn factorize(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    let mut jitter = JITTER_START;
    loop {
        let shifted = k + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(shifted) {
            if jitter > JITTER_START {
                log::debug!("gp: cholesky needed jitter {jitter:e}");
            }
            return Ok((c, jitter));
        }
        if jitter >= JITTER_MAX {
            return Err(Error::Cholesky { jitter });
        }
        jitter *= 10.0;
    }
}

/// Gradient of the log marginal likelihood (including the prior).
#[derive(Clone, Debug, PartialEq)]
pub struct MllGrad {
    pub mll: f64,
    /// With respect to `[log_lengthscale, log_outputscale, raw_noise]`.
    pub params: [f64; 3],
    /// With respect to each training input, `n × d`.
    pub inputs: DMatrix<f64>,
}

/// Training data, hyperparameters and the cached factorization.
#[derive(Clone, Debug)]
pub struct GpState {
    x: DMatrix<f64>,
    y: DVector<f64>,
    params: KernelParams,
    prior: Option<GammaPrior>,
    factor: Factor,
}

impl GpState {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, params: KernelParams, prior: Option<GammaPrior>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("gp training set"));
        }
        if x.nrows() != y.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gp training data"));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("kernel parameters"));
        }
        let factor = Self::factor_for(&x, &y, &params)?;
        Ok(GpState {
            x,
            y,
            params,
            prior,
            factor,
        })
    }

    fn factor_for(x: &DMatrix<f64>, y: &DVector<f64>, params: &KernelParams) -> Result<Factor> {
        let n = x.nrows();
        let k = kernel_matrix(x, x, params) + DMatrix::identity(n, n) * params.noise();
        let (chol, jitter) = factorize(&k)?;
        let alpha = chol.solve(y);
        Ok(Factor {
            chol,
            alpha,
            jitter,
            l_inv: OnceLock::new(),
        })
    }

    fn refactor(&mut self) -> Result<()> {
        self.factor = Self::factor_for(&self.x, &self.y, &self.params)?;
        Ok(())
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn prior(&self) -> Option<&GammaPrior> {
        self.prior.as_ref()
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn jitter(&self) -> f64 {
        self.factor.jitter
    }

    pub fn set_params(&mut self, params: KernelParams) -> Result<()> {
        if !params.is_finite() {
            return Err(Error::NonFinite("kernel parameters"));
        }
        let old = std::mem::replace(&mut self.params, params);
        self.refactor().inspect_err(|_| self.params = old)
    }

    /// Replaces the inputs (same count), e.g. after the encoder moved.
    pub fn set_inputs(&mut self, x: DMatrix<f64>) -> Result<()> {
        if x.shape() != self.x.shape() {
            return Err(Error::Shape(format!("inputs {:?}, expected {:?}", x.shape(), self.x.shape())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gp inputs"));
        }
        let old = std::mem::replace(&mut self.x, x);
        self.refactor().inspect_err(|_| self.x = old)
    }

    /// Appends training points.
    pub fn extend(&mut self, x: &DMatrix<f64>, y: &[f64]) -> Result<()> {
        if x.nrows() != y.len() || x.ncols() != self.x.ncols() {
            return Err(Error::Shape("appended points do not match the training set".into()));
        }
        let n = self.x.nrows();
        let old = (self.x.clone(), self.y.clone());
        self.x = self.x.clone().insert_rows(n, x.nrows(), 0.0);
        self.x.rows_mut(n, x.nrows()).copy_from(x);
        self.y = self.y.clone().insert_rows(n, y.len(), 0.0);
        self.y.rows_mut(n, y.len()).copy_from_slice(y);
        self.refactor().inspect_err(|_| (self.x, self.y) = old.clone())
    }

    fn prior_term(&self) -> (f64, f64) {
        match &self.prior {
            Some(p) => {
                let l = self.params.lengthscale();
                (p.log_density(l), p.dlog_density_dlog(l))
            }
            None => (0.0, 0.0),
        }
    }

    /// Log marginal likelihood plus the lengthscale prior's log density.
    pub fn mll(&self) -> f64 {
        let n = self.len() as f64;
        let log_det: f64 = self.factor.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * self.y.dot(&self.factor.alpha) - log_det - 0.5 * n * LN_2PI + self.prior_term().0
    }

    pub fn mll_grad(&self) -> MllGrad {
        let n = self.len();
        let d = self.input_dim();
        let s = self.params.outputscale();
        let l = self.params.lengthscale();
        let alpha = &self.factor.alpha;
        let k_inv = self.factor.chol.inverse();
        // W = ½(ααᵀ − K⁻¹), so dMLL/dθ = tr(W · dK/dθ)
        let w = (alpha * alpha.transpose() - k_inv) * 0.5;

        let (mut g_len, mut g_out) = (0.0, 0.0);
        let mut g_x = DMatrix::zeros(n, d);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&self.x, i)).collect();
        for i in 0..n {
            g_out += w[(i, i)] * s;
            for j in 0..i {
                let r = sq_dist(&rows[i], &rows[j]).sqrt() / l;
                let e = (-SQRT5 * r).exp();
                let k = s * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e;
                let dk_dlogl = 5.0 / 3.0 * s * r * r * (1.0 + SQRT5 * r) * e;
                let wij = 2.0 * w[(i, j)];
                g_out += wij * k;
                g_len += wij * dk_dlogl;
                // ∂k/∂x_i = −(5/3)s(1+√5r)e^{−√5r}(x_i − x_j)/ℓ²
                let c = -5.0 / 3.0 * s * (1.0 + SQRT5 * r) * e / (l * l) * wij;
                for t in 0..d {
                    let diff = rows[i][t] - rows[j][t];
                    g_x[(i, t)] += c * diff;
                    g_x[(j, t)] -= c * diff;
                }
            }
        }
        let g_noise = w.trace() * self.params.raw_noise.exp();
        g_len += self.prior_term().1;
        MllGrad {
            mll: self.mll(),
            params: [g_len, g_out, g_noise],
            inputs: g_x,
        }
    }

    /// Adam ascent on the log hyperparameters. Keeps the best iterate seen,
    /// so the returned state's mll is never below the starting one.
    pub fn fit(&mut self, steps: usize, lr: f64) -> Result<FitTrace> {
        let mut trace = FitTrace {
            initial_mll: self.mll(),
            final_mll: 0.0,
            steps: 0,
        };
        let mut best = (trace.initial_mll, self.params);
        let mut adam = ScalarAdam::new(3, AdamConfig::with_lr(lr));
        let mut theta = self.params.to_vec();
        for _ in 0..steps {
            let g = self.mll_grad();
            if !g.mll.is_finite() {
                return Err(Error::NonFinite("marginal log likelihood"));
            }
            let descent = g.params.map(|v| -v);
            adam.step(&mut theta, &descent)?;
            self.set_params(KernelParams::from_slice(&theta))?;
            trace.steps += 1;
            let m = self.mll();
            if m > best.0 {
                best = (m, self.params);
            }
        }
        if best.1 != self.params {
            self.set_params(best.1)?;
        }
        trace.final_mll = self.mll();
        Ok(trace)
    }

    /// Posterior mean and variance of the latent function at one point.
    pub fn posterior(&self, q: &[f64]) -> Result<(f64, f64)> {
        let m = DMatrix::from_row_slice(1, q.len(), q);
        Ok(self.posterior_batch(&m)?[0])
    }

    /// Posterior at every row of `q`.
    pub fn posterior_batch(&self, q: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        self.check_queries(q)?;
        let chunks: Vec<(usize, usize)> = (0..q.nrows())
            .step_by(POSTERIOR_CHUNK)
            .map(|s| (s, POSTERIOR_CHUNK.min(q.nrows() - s)))
            .collect();
        let l_inv = self.factor.l_inv();
        let parts = par::map(&chunks, |&(s, len)| self.posterior_block(l_inv, &q.rows(s, len).into_owned()));
        Ok(parts.into_iter().flatten().collect())
    }

    /// Same as [`posterior_batch`](Self::posterior_batch) on the calling thread.
    pub fn posterior_batch_seq(&self, q: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
        self.check_queries(q)?;
        Ok(self.posterior_block(self.factor.l_inv(), q))
    }

    fn check_queries(&self, q: &DMatrix<f64>) -> Result<()> {
        if q.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "query width {} but gp inputs have {}",
                q.ncols(),
                self.input_dim()
            )));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gp query"));
        }
        Ok(())
    }

    fn posterior_block(&self, l_inv: &DMatrix<f64>, q: &DMatrix<f64>) -> Vec<(f64, f64)> {
        let ks = kernel_matrix(&self.x, q, &self.params);
        let mean = ks.transpose() * &self.factor.alpha;
        let v = l_inv * &ks;
        let s = self.params.outputscale();
        (0..q.nrows())
            .map(|j| {
                let var = s - v.column(j).norm_squared();
                (mean[j], var.max(VARIANCE_FLOOR))
            })
            .collect()
    }

    /// Posterior means only (no variance).
    pub fn posterior_mean(&self, q: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.check_queries(q)?;
        let ks = kernel_matrix(&self.x, q, &self.params);
        Ok((ks.transpose() * &self.factor.alpha).iter().copied().collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitTrace {
    pub initial_mll: f64,
    pub final_mll: f64,
    pub steps: usize,
}
