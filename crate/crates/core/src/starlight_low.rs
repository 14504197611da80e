//! Source model: a variational autoencoder over design features with a
//! predictor head on the latent mean.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{gaussian_kl, gaussian_kl_grad, mse, AdamConfig, AdamState, NetworkParams};
use crate::oracle::Fidelity;
use crate::sampling::{Dataset, EdpSample, TargetKind, TargetScaler};
use crate::workload::{FeatureVector, FEATURE_DIM};
use crate::{hash, metrics, Error, Result};

pub const LATENT_DIM: usize = 2;
pub const ENCODER_SIZES: [usize; 4] = [FEATURE_DIM, 24, 12, 2 * LATENT_DIM];
pub const DECODER_SIZES: [usize; 4] = [LATENT_DIM, 12, 24, FEATURE_DIM];
pub const PREDICTOR_SIZES: [usize; 6] = [LATENT_DIM, 64, 256, 256, 64, 1];
pub const LOW_FORMAT: &str = "polaris-starlight-low";
pub const LOW_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pred: f64,
    pub recon: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pred: 1.0,
            recon: 1.0,
            kl: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLowConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub target: TargetKind,
    pub seed: u64,
}

impl Default for TrainLowConfig {
    fn default() -> Self {
        TrainLowConfig {
            epochs: 1000,
            batch_size: 256,
            lr: 1e-3,
            weights: LossWeights::default(),
            target: TargetKind::Edp,
            seed: 0,
        }
    }
}

/// Mean per-sample loss terms of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub pred: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowMeta {
    pub weights: LossWeights,
    pub seed: u64,
    pub epochs: usize,
    pub dataset_hash: String,
    pub scaler: TargetScaler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarlightLowModel {
    pub encoder: NetworkParams,
    pub decoder: NetworkParams,
    pub predictor: NetworkParams,
    pub meta: Option<LowMeta>,
}

/// Column-major feature batch.
pub fn feature_matrix<'a>(features: impl IntoIterator<Item = &'a FeatureVector>) -> DMatrix<f64> {
    let cols: Vec<&FeatureVector> = features.into_iter().collect();
    DMatrix::from_fn(FEATURE_DIM, cols.len(), |r, c| cols[c].0[r])
}

fn split_heads(h: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    (
        h.rows(0, LATENT_DIM).into_owned(),
        h.rows(LATENT_DIM, LATENT_DIM).into_owned(),
    )
}

impl StarlightLowModel {
    /// Untrained model with Glorot-initialized networks.
    pub fn new(rng: &mut impl Rng) -> Result<Self> {
        Ok(StarlightLowModel {
            encoder: NetworkParams::glorot(&ENCODER_SIZES, rng)?,
            decoder: NetworkParams::glorot(&DECODER_SIZES, rng)?,
            predictor: NetworkParams::glorot(&PREDICTOR_SIZES, rng)?,
            meta: None,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.meta.is_some()
    }

    pub fn scaler(&self) -> Result<&TargetScaler> {
        self.meta
            .as_ref()
            .map(|m| &m.scaler)
            .ok_or(Error::State("starlight-low model is untrained".into()))
    }

    /// Latent mean and log-variance per column (`2 × n` each).
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok(split_heads(&self.encoder.predict(x)?))
    }

    pub fn encode(&self, features: &FeatureVector) -> Result<([f64; 2], [f64; 2])> {
        let (mu, lv) = self.encode_batch(&feature_matrix([features]))?;
        Ok(([mu[0], mu[1]], [lv[0], lv[1]]))
    }

    /// Standardized log-target predictions from the latent mean.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (mu, _) = self.encode_batch(x)?;
        Ok(self.predictor.predict(&mu)?.iter().copied().collect())
    }

    pub fn predict_low(&self, features: &FeatureVector) -> Result<f64> {
        Ok(self.predict_batch(&feature_matrix([features]))?[0])
    }

    pub fn export_encoder(&self) -> Result<NetworkParams> {
        if !self.is_trained() {
            return Err(Error::State("cannot export the encoder of an untrained model".into()));
        }
        Ok(self.encoder.clone())
    }

    /// Reconstruction of each column from its latent mean.
    pub fn reconstruct(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (mu, _) = self.encode_batch(x)?;
        self.decoder.predict(&mu)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let doc = serde_json::json!({
            "format": LOW_FORMAT,
            "version": LOW_VERSION,
            "model": self,
        });
        std::fs::write(path.as_ref(), serde_json::to_vec(&doc)?)?;
        if let Some(meta) = &self.meta {
            std::fs::write(sidecar_path(path.as_ref()), serde_json::to_vec_pretty(meta)?)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            version: u32,
            model: StarlightLowModel,
        }
        let doc: Doc = serde_json::from_slice(&std::fs::read(path.as_ref())?)?;
        if doc.format != LOW_FORMAT || doc.version != LOW_VERSION {
            return Err(Error::Format(format!("not a starlight-low checkpoint ({} v{})", doc.format, doc.version)));
        }
        Ok(doc.model)
    }
}

/// `model.json` → `model.meta.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta.json")
}

struct Batch {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

/// Losses of one minibatch; applies one Adam step to every network.
fn train_step(
    model: &mut StarlightLowModel,
    opt: &mut [AdamState; 3],
    batch: &Batch,
    w: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<EpochLoss> {
    let n = batch.x.ncols();
    let (h, enc_cache) = model.encoder.forward(&batch.x)?;
    let (mu, lv) = split_heads(&h);

    let (pred, pred_cache) = model.predictor.forward(&mu)?;
    let (pred_loss, d_pred) = mse(&pred, &batch.y)?;
    let (g_pred, d_mu_pred) = model.predictor.backward(&pred_cache, &(d_pred * w.pred))?;

    let eps = DMatrix::from_fn(LATENT_DIM, n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let sd = lv.map(|v| (0.5 * v).exp());
    let z = &mu + sd.component_mul(&eps);
    let (recon, dec_cache) = model.decoder.forward(&z)?;
    let (recon_loss, d_recon) = mse(&recon, &batch.x)?;
    let (g_dec, dz) = model.decoder.backward(&dec_cache, &(d_recon * w.recon))?;

    let mut kl = 0.0;
    let mut d_h = DMatrix::zeros(2 * LATENT_DIM, n);
    for c in 0..n {
        let m: Vec<f64> = mu.column(c).iter().copied().collect();
        let l: Vec<f64> = lv.column(c).iter().copied().collect();
        kl += gaussian_kl(&m, &l)?;
        let (gm, gl) = gaussian_kl_grad(&m, &l);
        for k in 0..LATENT_DIM {
            let dz_k = dz[(k, c)];
            d_h[(k, c)] = d_mu_pred[(k, c)] + dz_k + w.kl * gm[k] / n as f64;
            d_h[(LATENT_DIM + k, c)] = dz_k * eps[(k, c)] * 0.5 * sd[(k, c)] + w.kl * gl[k] / n as f64;
        }
    }
    kl /= n as f64;
    let (g_enc, _) = model.encoder.backward(&enc_cache, &d_h)?;

    let total = w.pred * pred_loss + w.recon * recon_loss + w.kl * kl;
    if !total.is_finite() {
        return Err(Error::NonFinite("starlight-low loss"));
    }
    opt[0].step(&mut model.encoder, &g_enc)?;
    opt[1].step(&mut model.decoder, &g_dec)?;
    opt[2].step(&mut model.predictor, &g_pred)?;
    Ok(EpochLoss {
        epoch: 0,
        total,
        pred: pred_loss,
        recon: recon_loss,
        kl,
    })
}

/// Trains on the dataset's train split.
pub fn train_low(dataset: &Dataset, cfg: &TrainLowConfig) -> Result<(StarlightLowModel, Vec<EpochLoss>)> {
    if dataset.fidelity() != Fidelity::Low {
        return Err(Error::InvalidWorkload("starlight-low trains on a low-fidelity dataset".into()));
    }
    let train = dataset.train();
    train_low_on(&train, dataset.content_hash(), cfg)
}

pub fn train_low_on(
    train: &[EdpSample],
    dataset_hash: String,
    cfg: &TrainLowConfig,
) -> Result<(StarlightLowModel, Vec<EpochLoss>)> {
    if train.is_empty() {
        return Err(Error::Empty("starlight-low training split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::OutOfRange("batch size 0".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = StarlightLowModel::new(&mut init_rng)?;
    continue_training(model, train, dataset_hash, cfg)
}

/// Trains every network of `model` further on `train`, refitting the target
/// scaler to it. Used both from a fresh init and to fine-tune a trained
/// model on another fidelity.
pub fn continue_training(
    mut model: StarlightLowModel,
    train: &[EdpSample],
    dataset_hash: String,
    cfg: &TrainLowConfig,
) -> Result<(StarlightLowModel, Vec<EpochLoss>)> {
    if train.is_empty() {
        return Err(Error::Empty("starlight-low training split"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::OutOfRange("batch size 0".into()));
    }
    let scaler = TargetScaler::fit(train, cfg.target)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut opt = [
        AdamState::new(&model.encoder, adam),
        AdamState::new(&model.decoder, adam),
        AdamState::new(&model.predictor, adam),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f10);
    let x_all = feature_matrix(train.iter().map(|s| &s.features));
    let y_all: Vec<f64> = train.iter().map(|s| scaler.standardize(s)).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLoss {
            epoch,
            total: 0.0,
            pred: 0.0,
            recon: 0.0,
            kl: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch {
                x: x_all.select_columns(chunk),
                y: DMatrix::from_fn(1, chunk.len(), |_, c| y_all[chunk[c]]),
            };
            let l = train_step(&mut model, &mut opt, &batch, &cfg.weights, &mut rng)?;
            let f = chunk.len() as f64 / train.len() as f64;
            acc.total += f * l.total;
            acc.pred += f * l.pred;
            acc.recon += f * l.recon;
            acc.kl += f * l.kl;
        }
        history.push(acc);
    }
    model.meta = Some(LowMeta {
        weights: cfg.weights,
        seed: cfg.seed,
        epochs: cfg.epochs,
        dataset_hash,
        scaler,
    });
    Ok((model, history))
}

/// Spearman ρ between predicted and true log targets.
pub fn evaluate_low_model(model: &StarlightLowModel, test: &[EdpSample]) -> Result<f64> {
    let scaler = model.scaler()?;
    let pred = model.predict_batch(&feature_matrix(test.iter().map(|s| &s.features)))?;
    let truth: Vec<f64> = test.iter().map(|s| scaler.standardize(s)).collect();
    metrics::spearman_rho(&pred, &truth)
}

/// Spearman correlation between latent-mean distance and |Δ standardized target|
/// over `pairs` random pairs of `samples`. A collapsed encoder (every distance
/// equal) has no structure and scores 0.
pub fn latent_structure_rho(model: &StarlightLowModel, samples: &[EdpSample], pairs: usize, seed: u64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Empty("latent structure needs two samples"));
    }
    let scaler = model.scaler()?;
    let (mu, _) = model.encode_batch(&feature_matrix(samples.iter().map(|s| &s.features)))?;
    let y: Vec<f64> = samples.iter().map(|s| scaler.standardize(s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dist, mut diff) = (Vec::with_capacity(pairs), Vec::with_capacity(pairs));
    while dist.len() < pairs {
        let a = rng.random_range(0..samples.len());
        let b = rng.random_range(0..samples.len());
        if a == b {
            continue;
        }
        dist.push((mu.column(a) - mu.column(b)).norm());
        diff.push((y[a] - y[b]).abs());
    }
    if dist.iter().all(|d| *d == dist[0]) {
        log::warn!("latent means are identical for every sampled pair");
        return Ok(0.0);
    }
    metrics::spearman_rho(&dist, &diff)
}

/// Provenance hash of a trained model's weights.
pub fn model_hash(model: &StarlightLowModel) -> String {
    hash::json_hash(model)
}
