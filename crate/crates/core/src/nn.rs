//! Small fully connected networks with hand-written reverse mode and Adam.
//!
//! Batches are column-major: a batch of `n` inputs of width `d` is a `d × n`
//! matrix. Hidden layers use ReLU, the last layer is linear.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "polaris-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Linear => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Weights `out × in` and biases per layer.
#[derive(Debug)]
pub struct NetworkParams {
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    generation: u64,
}

impl Clone for NetworkParams {
    fn clone(&self) -> Self {
        NetworkParams {
            sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
            generation: fresh_generation(),
        }
    }
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes
            && self.activations == other.activations
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

impl NetworkParams {
    /// ReLU between layers, linear output.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Shape(format!("layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let activations = (0..n)
            .map(|i| if i + 1 == n { Activation::Linear } else { Activation::Relu })
            .collect();
        Ok(NetworkParams {
            sizes: sizes.to_vec(),
            activations,
            weights: sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: sizes[1..].iter().map(|&s| DVector::zeros(s)).collect(),
            generation: fresh_generation(),
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        for w in &mut p.weights {
            let limit = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            // row-major fill keeps the draw order independent of storage layout
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = dist.sample(rng);
                }
            }
        }
        Ok(p)
    }

    pub fn from_parts(weights: Vec<DMatrix<f64>>, biases: Vec<DVector<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("need one bias per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != sizes[i] || b.len() != w.nrows() {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
            sizes.push(w.nrows());
        }
        let mut p = Self::zeros(&sizes)?;
        p.weights = weights;
        p.biases = biases;
        p.check_finite()?;
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Changes on every mutation; forward caches remember it.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable access to layer `i`. Invalidates outstanding caches.
    pub fn layer_mut(&mut self, i: usize) -> (&mut DMatrix<f64>, &mut DVector<f64>) {
        self.generation = fresh_generation();
        (&mut self.weights[i], &mut self.biases[i])
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite("network parameters"))
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input width {} but network expects {}",
                x.nrows(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(&self, i: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights[i] * x;
        for mut col in z.column_iter_mut() {
            col += &self.biases[i];
        }
        z
    }

    /// Forward pass keeping what backward needs.
    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ForwardCache)> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut h = x.clone();
        for i in 0..self.n_layers() {
            let z = self.affine(i, &h);
            let act = self.activations[i];
            let out = z.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        let cache = ForwardCache {
            inputs,
            pre,
            generation: self.generation,
        };
        Ok((h, cache))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for i in 0..self.n_layers() {
            let act = self.activations[i];
            h = self.affine(i, &h);
            h.apply(|v| *v = act.apply(*v));
        }
        Ok(h)
    }

    /// Gradients of `sum(grad_out ∘ output)` w.r.t. the parameters and the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Result<(Gradients, DMatrix<f64>)> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache);
        }
        let batch = cache.inputs[0].ncols();
        if grad_out.nrows() != self.output_dim() || grad_out.ncols() != batch {
            return Err(Error::Shape(format!(
                "output gradient is {}×{}, expected {}×{batch}",
                grad_out.nrows(),
                grad_out.ncols(),
                self.output_dim()
            )));
        }
        let mut gw = Vec::with_capacity(self.n_layers());
        let mut gb = Vec::with_capacity(self.n_layers());
        let mut g = grad_out.clone();
        for i in (0..self.n_layers()).rev() {
            let act = self.activations[i];
            g.zip_apply(&cache.pre[i], |gv, z| *gv *= act.derivative(z));
            gw.push(&g * cache.inputs[i].transpose());
            gb.push(g.column_sum());
            g = self.weights[i].transpose() * &g;
        }
        gw.reverse();
        gb.reverse();
        Ok((Gradients { weights: gw, biases: gb }, g))
    }

    fn to_record(&self) -> NetworkRecord {
        NetworkRecord {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sizes: self.sizes.clone(),
            activations: self.activations.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| (0..w.nrows()).flat_map(|r| w.row(r).iter().copied().collect::<Vec<_>>()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.iter().copied().collect()).collect(),
        }
    }

    fn from_record(r: NetworkRecord) -> Result<Self> {
        if r.format != CHECKPOINT_FORMAT || r.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported network checkpoint {} v{}", r.format, r.version)));
        }
        let n = r.sizes.len().saturating_sub(1);
        if n == 0 || r.weights.len() != n || r.biases.len() != n || r.activations.len() != n {
            return Err(Error::Format("network checkpoint layer count mismatch".into()));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for i in 0..n {
            let (rows, cols) = (r.sizes[i + 1], r.sizes[i]);
            if r.weights[i].len() != rows * cols || r.biases[i].len() != rows {
                return Err(Error::Format(format!("network checkpoint layer {i} has wrong length")));
            }
            weights.push(DMatrix::from_row_slice(rows, cols, &r.weights[i]));
            biases.push(DVector::from_vec(r.biases[i].clone()));
        }
        let mut p = Self::from_parts(weights, biases)?;
        p.activations = r.activations;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

#[derive(Serialize, Deserialize)]
struct NetworkRecord {
    format: String,
    version: u32,
    sizes: Vec<usize>,
    activations: Vec<Activation>,
    /// Row-major per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Serialize for NetworkParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = NetworkRecord::deserialize(d)?;
        NetworkParams::from_record(r).map_err(serde::de::Error::custom)
    }
}

/// Layer inputs and pre-activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    generation: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].ncols()
    }
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(p: &NetworkParams) -> Self {
        Gradients {
            weights: p.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: p.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, p: &NetworkParams) -> bool {
        self.weights.len() == p.weights.len()
            && self.weights.iter().zip(&p.weights).all(|(a, b)| a.shape() == b.shape())
            && self.biases.iter().zip(&p.biases).all(|(a, b)| a.len() == b.len())
    }

    pub fn max_abs(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

/// Scalar Adam update with bias correction; returns the parameter delta.
pub fn adam_update(cfg: &AdamConfig, step: u64, m: &mut f64, v: &mut f64, g: f64) -> f64 {
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
    let m_hat = *m / (1.0 - cfg.beta1.powf(step as f64));
    let v_hat = *v / (1.0 - cfg.beta2.powf(step as f64));
    -cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(params: &NetworkParams, config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut NetworkParams, grads: &Gradients) -> Result<()> {
        if !grads.matches(params) || !self.m.matches(params) {
            return Err(Error::Shape("gradient shapes do not match parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        params.generation = fresh_generation();
        for i in 0..params.weights.len() {
            let (w, m, v, g) = (&mut params.weights[i], &mut self.m.weights[i], &mut self.v.weights[i], &grads.weights[i]);
            for j in 0..w.len() {
                w[j] += adam_update(&cfg, t, &mut m[j], &mut v[j], g[j]);
            }
            let (b, m, v, g) = (&mut params.biases[i], &mut self.m.biases[i], &mut self.v.biases[i], &grads.biases[i]);
            for j in 0..b.len() {
                b[j] += adam_update(&cfg, t, &mut m[j], &mut v[j], g[j]);
            }
        }
        Ok(())
    }
}

/// Adam over a handful of free scalars (GP hyperparameters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarAdam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl ScalarAdam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        ScalarAdam {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) -> Result<()> {
        if x.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape("scalar adam length mismatch".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        for i in 0..x.len() {
            x[i] += adam_update(&self.config, self.step, &mut self.m[i], &mut self.v[i], grad[i]);
        }
        Ok(())
    }
}

/// Mean squared error over all entries and its gradient.
pub fn mse(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("mse {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.norm_squared() / n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mse"));
    }
    Ok((loss, diff * (2.0 / n)))
}

/// KL(N(mu, exp(logvar)) ‖ N(0, I)).
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::Shape("mu and logvar lengths differ".into()));
    }
    let kl = 0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
            .sum::<f64>();
    if kl.is_finite() {
        Ok(kl)
    } else {
        Err(Error::NonFinite("gaussian kl"))
    }
}

/// Gradients of [`gaussian_kl`] with respect to mu and logvar.
pub fn gaussian_kl_grad(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect())
}

/// `mu + exp(logvar / 2) · eps` with standard normal `eps`. Returns the sample and `eps`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = mu.iter().map(|_| StandardNormal.sample(rng)).collect();
    let z = mu
        .iter()
        .zip(logvar)
        .zip(&eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    (z, eps)
}

/// Column-major batch from row vectors.
pub fn batch_from_rows(rows: &[&[f64]]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged batch".into()));
    }
    Ok(DMatrix::from_fn(d, rows.len(), |r, c| rows[c][r]))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_batch(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        DMatrix::from_fn(d, n, |_, _| r.random_range(-1.0..1.0))
    }

    /// Plain nested-loop forward pass for one input.
    fn scalar_forward(p: &NetworkParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, (w, b)) in p.weights().iter().zip(p.biases()).enumerate() {
            let mut out = vec![0.0; w.nrows()];
            for r in 0..w.nrows() {
                let mut acc = b[r];
                for c in 0..w.ncols() {
                    acc += w[(r, c)] * h[c];
                }
                out[r] = if i + 1 < p.n_layers() { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = NetworkParams::zeros(&[5, 3, 2]).unwrap();
        let y = p.predict(&random_batch(5, 4, 0)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let p = NetworkParams::from_parts(vec![DMatrix::identity(3, 3)], vec![DVector::zeros(3)]).unwrap();
        let x = random_batch(3, 6, 1);
        assert_eq!(p.predict(&x).unwrap(), x);
    }

    #[test]
    fn matches_scalar_forward() {
        let p = NetworkParams::glorot(&[6, 5, 4, 3], &mut rng(2)).unwrap();
        let x = random_batch(6, 7, 3);
        let (y, _) = p.forward(&x).unwrap();
        for c in 0..7 {
            let col: Vec<f64> = x.column(c).iter().copied().collect();
            let expect = scalar_forward(&p, &col);
            for r in 0..3 {
                assert!((y[(r, c)] - expect[r]).abs() < 1e-12);
            }
        }
        assert_eq!(p.predict(&x).unwrap(), y);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = NetworkParams::zeros(&[4, 2]).unwrap();
        assert!(matches!(p.forward(&DMatrix::zeros(3, 1)), Err(Error::Shape(_))));
        assert!(NetworkParams::zeros(&[4]).is_err());
    }

    /// Loss = sum(c ∘ f(x)) for a fixed random c, so dL/dout = c.
    fn check_gradients(sizes: &[usize], seed: u64) {
        let mut p = NetworkParams::glorot(sizes, &mut rng(seed)).unwrap();
        // shift biases so no ReLU sits exactly on its kink
        for i in 0..p.n_layers() {
            let (_, b) = p.layer_mut(i);
            b.iter_mut().for_each(|v| *v = 0.05);
        }
        let n = 5;
        let x = random_batch(sizes[0], n, seed + 100);
        let c = random_batch(*sizes.last().unwrap(), n, seed + 200);
        let loss = |p: &NetworkParams, x: &DMatrix<f64>| p.predict(x).unwrap().component_mul(&c).sum();
        let (_, cache) = p.forward(&x).unwrap();
        let (g, gx) = p.backward(&cache, &c).unwrap();

        // relative error, with an absolute floor for gradients at round-off scale
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs().max(b.abs()) + 1e-6);
        let central = |p: &mut NetworkParams, get: &dyn Fn(&mut NetworkParams) -> &mut f64| {
            let v0 = *get(p);
            let h = 1e-4 * v0.abs().max(1e-2);
            *get(p) = v0 + h;
            let up = loss(p, &x);
            *get(p) = v0 - h;
            let down = loss(p, &x);
            *get(p) = v0;
            (up - down) / (2.0 * h)
        };
        for i in 0..p.n_layers() {
            let (rows, cols) = p.weights()[i].shape();
            // wide layers are spot-checked on an evenly strided subset
            let stride = (rows * cols / 300).max(1);
            for k in (0..rows * cols).step_by(stride) {
                let (r, c2) = (k / cols, k % cols);
                let fd = central(&mut p, &|p| &mut p.layer_mut(i).0[(r, c2)]);
                let e = rel(fd, g.weights[i][(r, c2)]);
                assert!(e < 1e-4, "w[{i}][{r},{c2}] fd {fd} vs {}", g.weights[i][(r, c2)]);
            }
            for r in 0..rows {
                let fd = central(&mut p, &|p| &mut p.layer_mut(i).1[r]);
                assert!(rel(fd, g.biases[i][r]) < 1e-4);
            }
        }
        for r in 0..x.nrows() {
            for c2 in 0..n {
                let mut xp = x.clone();
                let h = 1e-5;
                xp[(r, c2)] += h;
                let up = loss(&p, &xp);
                xp[(r, c2)] -= 2.0 * h;
                let down = loss(&p, &xp);
                let fd = (up - down) / (2.0 * h);
                assert!(rel(fd, gx[(r, c2)]) < 1e-4);
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        check_gradients(&[4, 3, 2], 1);
        check_gradients(&[7, 6, 5, 1], 2);
        // the repo's shapes: encoder, decoder, predictor
        check_gradients(&[40, 24, 12, 4], 3);
        check_gradients(&[2, 12, 24, 40], 4);
        check_gradients(&[2, 64, 256, 256, 64, 1], 5);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let p = NetworkParams::glorot(&[3, 4, 2], &mut rng(9)).unwrap();
        let x = random_batch(3, 4, 10);
        let (_, cache) = p.forward(&x).unwrap();
        let (g, gx) = p.backward(&cache, &DMatrix::zeros(2, 4)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert!(gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_mse_gradient_is_closed_form() {
        let w = DMatrix::from_row_slice(1, 3, &[0.3, -0.2, 0.5]);
        let p = NetworkParams::from_parts(vec![w.clone()], vec![DVector::zeros(1)]).unwrap();
        let x = random_batch(3, 8, 11);
        let y = random_batch(1, 8, 12);
        let (out, cache) = p.forward(&x).unwrap();
        let (_, dout) = mse(&out, &y).unwrap();
        let (g, _) = p.backward(&cache, &dout).unwrap();
        // 2·Xᵀ(Xw − y)/batch with X as rows
        let expect = (&w * &x - &y) * x.transpose() * (2.0 / 8.0);
        assert!((g.weights[0].clone() - expect).abs().max() < 1e-12);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = NetworkParams::glorot(&[3, 2], &mut rng(0)).unwrap();
        let (_, cache) = p.forward(&random_batch(3, 2, 0)).unwrap();
        let g = Gradients::zeros_like(&p);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        assert!(matches!(p.backward(&cache, &DMatrix::zeros(2, 2)), Err(Error::StaleCache)));
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut p = NetworkParams::glorot(&[3, 2], &mut rng(0)).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let g = Gradients::zeros_like(&p);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut adam = ScalarAdam::new(2, cfg);
        let mut x = [0.0, 0.0];
        let mut last = [0.0, 0.0];
        for _ in 0..200 {
            let before = x;
            adam.step(&mut x, &[3.0, -0.01]).unwrap();
            last = [x[0] - before[0], x[1] - before[1]];
        }
        assert!((last[0] + cfg.lr).abs() < 1e-9);
        assert!((last[1] - cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let cfg = AdamConfig::with_lr(0.1);
        let (mut m, mut v) = (0.0, 0.0);
        let g = 0.5;
        let d = adam_update(&cfg, 1, &mut m, &mut v, g);
        // m = 0.05, v = 0.00025, m̂ = 0.5, v̂ = 0.25, step = -0.1·0.5/(0.5+1e-8)
        assert!((m - 0.05).abs() < 1e-15);
        assert!((v - 0.00025).abs() < 1e-15);
        assert!((d - (-0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = NetworkParams::zeros(&[2, 1]).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.biases[0][0] = f64::NAN;
        let mut adam = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(adam.step(&mut p, &g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(gaussian_kl(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(gaussian_kl(&[f64::INFINITY], &[0.0]).is_err());
        assert!(gaussian_kl(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn kl_matches_quadrature() {
        let mut r = rng(4);
        for _ in 0..5 {
            let mu: f64 = r.random_range(-2.0..2.0);
            let lv: f64 = r.random_range(-1.5..1.5);
            let sd = (0.5 * lv).exp();
            // ∫ q log(q/p) by the midpoint rule
            let (lo, hi, n) = (mu - 12.0 * sd, mu + 12.0 * sd, 200_000);
            let dx = (hi - lo) / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x = lo + (i as f64 + 0.5) * dx;
                let log_q = -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                let log_p = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
                acc += log_q.exp() * (log_q - log_p) * dx;
            }
            let kl = gaussian_kl(&[mu], &[lv]).unwrap();
            assert!((kl - acc).abs() < 1e-6, "{kl} vs {acc}");
        }
    }

    #[test]
    fn kl_grad_matches_differences() {
        let (mu, lv) = ([0.3, -1.2], [0.4, -0.7]);
        let (gm, gl) = gaussian_kl_grad(&mu, &lv);
        let h = 1e-6;
        for i in 0..2 {
            let mut a = mu;
            a[i] += h;
            let mut b = mu;
            b[i] -= h;
            let fd = (gaussian_kl(&a, &lv).unwrap() - gaussian_kl(&b, &lv).unwrap()) / (2.0 * h);
            assert!((fd - gm[i]).abs() < 1e-8);
            let mut a = lv;
            a[i] += h;
            let mut b = lv;
            b[i] -= h;
            let fd = (gaussian_kl(&mu, &a).unwrap() - gaussian_kl(&mu, &b).unwrap()) / (2.0 * h);
            assert!((fd - gl[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn reparameterize_limits_and_moments() {
        let (z, _) = reparameterize(&[1.5, -2.0], &[-800.0, -800.0], &mut rng(0));
        assert_eq!(z, vec![1.5, -2.0]);
        let a = reparameterize(&[0.0], &[0.0], &mut rng(5));
        let b = reparameterize(&[0.0], &[0.0], &mut rng(5));
        assert_eq!(a, b);

        let (mu, lv) = (0.7, -0.4);
        let n = 100_000;
        let mut r = rng(6);
        let xs: Vec<f64> = (0..n).map(|_| reparameterize(&[mu], &[lv], &mut r).0[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let s2 = lv.exp();
        assert!((mean - mu).abs() < 3.0 * (s2 / n as f64).sqrt());
        // standard error of a normal sample variance is s²·√(2/(n−1))
        assert!((var - s2).abs() < 3.0 * s2 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = NetworkParams::glorot(&[40, 24, 12, 4], &mut rng(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        p.save(&path).unwrap();
        let q = NetworkParams::load(&path).unwrap();
        assert_eq!(p, q);
        for (a, b) in p.weights().iter().zip(q.weights()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn toy_regression_trains() {
        let mut r = rng(13);
        let x = DMatrix::from_fn(3, 256, |_, _| r.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(1, 256, |_, c| 0.5 * x[(0, c)] - x[(1, c)] + 0.25 * x[(2, c)] + 0.1);
        let mut p = NetworkParams::glorot(&[3, 16, 1], &mut rng(14)).unwrap();
        let mut adam = AdamState::new(&p, AdamConfig::with_lr(1e-2));
        let initial = mse(&p.predict(&x).unwrap(), &y).unwrap().0;
        for _ in 0..500 {
            let (out, cache) = p.forward(&x).unwrap();
            let (_, d) = mse(&out, &y).unwrap();
            let (g, _) = p.backward(&cache, &d).unwrap();
            adam.step(&mut p, &g).unwrap();
        }
        let fin = mse(&p.predict(&x).unwrap(), &y).unwrap().0;
        assert!(fin < 0.01 * initial, "{fin} vs {initial}");
    }
}
