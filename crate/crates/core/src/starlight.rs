//! Deep-kernel surrogate: an encoder (usually transferred from Starlight-Low)
//! feeding an exact GP on its 2-D latent mean, trained jointly by marginal
//! likelihood on high-fidelity samples.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{GammaPrior, GpState, KernelParams};
use crate::metrics::{self, MetricsRecord};
use crate::nn::{AdamConfig, AdamState, NetworkParams, ScalarAdam};
use crate::oracle::Fidelity;
use crate::sampling::{EdpSample, TargetKind, TargetScaler};
use crate::starlight_low::{feature_matrix, ENCODER_SIZES, LATENT_DIM};
use crate::workload::{FeatureVector, FEATURE_DIM};
use crate::{hash, Error, Result};

pub const STARLIGHT_FORMAT: &str = "polaris-starlight";
pub const STARLIGHT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Transferred,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DklConfig {
    pub lr_gp: f64,
    pub lr_encoder: f64,
    /// Joint ascent steps after each online update.
    pub refit_steps: usize,
}

impl Default for DklConfig {
    fn default() -> Self {
        DklConfig {
            lr_gp: 1e-2,
            lr_encoder: 1e-3,
            refit_steps: 50,
        }
    }
}

impl DklConfig {
    /// Encoder rate tied to a tenth of the GP rate.
    pub fn with_lr(lr_gp: f64) -> Self {
        DklConfig {
            lr_gp,
            lr_encoder: lr_gp / 10.0,
            ..Self::default()
        }
    }
}

/// One evaluation-interval entry of joint training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPoint {
    pub epoch: usize,
    pub mll: f64,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StarlightModel {
    encoder: NetworkParams,
    gp: GpState,
    features: Vec<FeatureVector>,
    targets: Vec<f64>,
    scaler: TargetScaler,
    provenance: Provenance,
    config: DklConfig,
}

/// Latent means as rows (`n × 2`).
fn latent_rows(encoder: &NetworkParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let h = encoder.predict(x)?;
    Ok(h.rows(0, LATENT_DIM).transpose())
}

fn check_encoder(encoder: &NetworkParams) -> Result<()> {
    if encoder.input_dim() != FEATURE_DIM || encoder.output_dim() < LATENT_DIM {
        return Err(Error::Shape(format!(
            "encoder maps {} → {}, expected {FEATURE_DIM} → ≥{LATENT_DIM}",
            encoder.input_dim(),
            encoder.output_dim()
        )));
    }
    Ok(())
}

impl StarlightModel {
    /// Hard weight sharing: the encoder is copied verbatim, no decoder is kept.
    pub fn init_from_transfer(
        encoder: &NetworkParams,
        train: &[EdpSample],
        target: TargetKind,
        config: DklConfig,
    ) -> Result<Self> {
        Self::build(encoder.clone(), train, target, config, Provenance::Transferred)
    }

    /// Same architecture with a freshly initialized encoder.
    pub fn init_scratch(train: &[EdpSample], target: TargetKind, config: DklConfig, seed: u64) -> Result<Self> {
        let enc = NetworkParams::glorot(&ENCODER_SIZES, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Self::build(enc, train, target, config, Provenance::Scratch)
    }

    fn build(
        encoder: NetworkParams,
        train: &[EdpSample],
        target: TargetKind,
        config: DklConfig,
        provenance: Provenance,
    ) -> Result<Self> {
        check_encoder(&encoder)?;
        if train.is_empty() {
            return Err(Error::Empty("high-fidelity training split"));
        }
        if let Some(i) = train.iter().position(|s| s.fidelity != Fidelity::High) {
            return Err(Error::at(i, Error::InvalidWorkload("starlight trains on high-fidelity samples".into())));
        }
        let scaler = TargetScaler::fit(train, target)?;
        let (features, targets) = dedup(train.iter(), &scaler, &mut HashSet::new());
        let x = feature_matrix(&features);
        let z = latent_rows(&encoder, &x)?;
        let gp = GpState::new(
            z,
            DVector::from_vec(targets.clone()),
            KernelParams::default(),
            Some(GammaPrior::default()),
        )?;
        Ok(StarlightModel {
            encoder,
            gp,
            features,
            targets,
            scaler,
            provenance,
            config,
        })
    }

    pub fn encoder(&self) -> &NetworkParams {
        &self.encoder
    }

    pub fn gp(&self) -> &GpState {
        &self.gp
    }

    pub fn scaler(&self) -> &TargetScaler {
        &self.scaler
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn config(&self) -> &DklConfig {
        &self.config
    }

    pub fn set_config(&mut self, config: DklConfig) {
        self.config = config;
    }

    pub fn train_len(&self) -> usize {
        self.features.len()
    }

    pub fn encode(&self, features: &[FeatureVector]) -> Result<DMatrix<f64>> {
        latent_rows(&self.encoder, &feature_matrix(features))
    }

    /// Joint ascent on the MLL through the kernel into the encoder.
    pub fn train_joint(
        &mut self,
        epochs: usize,
        lr_encoder: f64,
        lr_gp: f64,
        test: Option<&[EdpSample]>,
        eval_interval: usize,
    ) -> Result<Vec<TrainPoint>> {
        let x = feature_matrix(&self.features);
        let mut enc_opt = AdamState::new(&self.encoder, AdamConfig::with_lr(lr_encoder));
        let mut gp_opt = ScalarAdam::new(3, AdamConfig::with_lr(lr_gp));
        let mut history = Vec::new();
        for epoch in 1..=epochs {
            self.joint_step(&x, &mut enc_opt, &mut gp_opt, lr_encoder > 0.0)?;
            if eval_interval > 0 && epoch % eval_interval == 0 {
                let rho = match test {
                    Some(t) if t.len() >= 2 => Some(self.spearman(t)?),
                    _ => None,
                };
                history.push(TrainPoint {
                    epoch,
                    mll: self.gp.mll(),
                    rho,
                });
            }
        }
        Ok(history)
    }

    fn joint_step(
        &mut self,
        x: &DMatrix<f64>,
        enc_opt: &mut AdamState,
        gp_opt: &mut ScalarAdam,
        move_encoder: bool,
    ) -> Result<()> {
        let g = self.gp.mll_grad();
        if !g.mll.is_finite() {
            return Err(Error::NonFinite("marginal log likelihood"));
        }
        let p = *self.gp.params();
        let mut theta = [p.log_lengthscale, p.log_outputscale, p.raw_noise];
        gp_opt.step(&mut theta, &g.params.map(|v| -v))?;
        let params = KernelParams {
            log_lengthscale: theta[0],
            log_outputscale: theta[1],
            raw_noise: theta[2],
        };
        if move_encoder {
            let (h, cache) = self.encoder.forward(x)?;
            let mut d_h = DMatrix::zeros(h.nrows(), h.ncols());
            for i in 0..g.inputs.nrows() {
                for k in 0..LATENT_DIM {
                    d_h[(k, i)] = -g.inputs[(i, k)];
                }
            }
            let (grads, _) = self.encoder.backward(&cache, &d_h)?;
            enc_opt.step(&mut self.encoder, &grads)?;
            let z = latent_rows(&self.encoder, x)?;
            self.gp = GpState::new(z, self.gp.targets().clone(), params, self.gp.prior().copied())?;
        } else {
            self.gp.set_params(params)?;
        }
        Ok(())
    }

    /// Standardized log-target mean and standard deviation per query.
    pub fn predict(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.encode(features)?;
        Ok(self
            .gp
            .posterior_batch(&z)?
            .into_iter()
            .map(|(m, v)| (m, v.sqrt()))
            .collect())
    }

    pub fn predict_seq(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
        let z = self.encode(features)?;
        Ok(self
            .gp
            .posterior_batch_seq(&z)?
            .into_iter()
            .map(|(m, v)| (m, v.sqrt()))
            .collect())
    }

    pub fn predict_mean(&self, features: &[FeatureVector]) -> Result<Vec<f64>> {
        if features.is_empty() {
            return Ok(Vec::new());
        }
        self.gp.posterior_mean(&self.encode(features)?)
    }

    /// Adds high-fidelity samples, then runs `refit_steps` joint steps.
    /// Returns how many samples were new.
    pub fn update(&mut self, samples: &[EdpSample], refit_steps: usize) -> Result<usize> {
        if let Some(i) = samples.iter().position(|s| s.fidelity != Fidelity::High) {
            return Err(Error::at(i, Error::InvalidWorkload("updates must be high-fidelity".into())));
        }
        let mut seen: HashSet<_> = self.features.iter().map(|f| f.bits_key()).collect();
        let (feats, ys) = dedup(samples.iter(), &self.scaler, &mut seen);
        if feats.len() < samples.len() {
            log::warn!("starlight: skipped {} duplicate sample(s)", samples.len() - feats.len());
        }
        if !feats.is_empty() {
            let z = self.encode(&feats)?;
            self.gp.extend(&z, &ys)?;
            self.features.extend(feats.iter().copied());
            self.targets.extend(ys);
        }
        if refit_steps > 0 {
            let cfg = self.config;
            self.train_joint(refit_steps, cfg.lr_encoder, cfg.lr_gp, None, 0)?;
        }
        Ok(feats.len())
    }

    pub fn spearman(&self, test: &[EdpSample]) -> Result<f64> {
        let feats: Vec<FeatureVector> = test.iter().map(|s| s.features).collect();
        let pred = self.predict_mean(&feats)?;
        let truth: Vec<f64> = test.iter().map(|s| self.scaler.standardize(s)).collect();
        metrics::spearman_rho(&pred, &truth)
    }

    /// Spearman ρ and Pearson r of predicted vs true standardized log targets.
    pub fn evaluate(&self, test: &[EdpSample], seed: u64, dataset_hash: &str, epochs: usize) -> Result<Vec<MetricsRecord>> {
        if test.len() < 2 {
            return Err(Error::Empty("test split needs at least two points"));
        }
        let feats: Vec<FeatureVector> = test.iter().map(|s| s.features).collect();
        let pred = self.predict_mean(&feats)?;
        let truth: Vec<f64> = test.iter().map(|s| self.scaler.standardize(s)).collect();
        let name = match self.provenance {
            Provenance::Transferred => "starlight",
            Provenance::Scratch => "dkl_scratch",
        };
        Ok(vec![
            MetricsRecord::new("spearman", name, metrics::spearman_rho(&pred, &truth)?, test.len(), seed)
                .with_dataset(dataset_hash)
                .tag("epochs", epochs),
            MetricsRecord::new("pearson", name, metrics::pearson_r(&pred, &truth)?, test.len(), seed)
                .with_dataset(dataset_hash)
                .tag("epochs", epochs),
        ])
    }

    fn to_record(&self) -> StarlightRecord {
        StarlightRecord {
            format: STARLIGHT_FORMAT.into(),
            version: STARLIGHT_VERSION,
            provenance: self.provenance,
            encoder: self.encoder.clone(),
            kernel: *self.gp.params(),
            prior: self.gp.prior().copied(),
            features: self.features.clone(),
            targets: self.targets.clone(),
            scaler: self.scaler,
            config: self.config,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.to_record())?)
    }

    pub fn hash(&self) -> String {
        hash::sha256_hex(&self.to_bytes().expect("serializable model"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: StarlightRecord = serde_json::from_slice(&std::fs::read(path)?)?;
        if r.format != STARLIGHT_FORMAT || r.version != STARLIGHT_VERSION {
            return Err(Error::Format(format!("not a starlight checkpoint ({} v{})", r.format, r.version)));
        }
        check_encoder(&r.encoder)?;
        let z = latent_rows(&r.encoder, &feature_matrix(&r.features))?;
        let gp = GpState::new(z, DVector::from_vec(r.targets.clone()), r.kernel, r.prior)?;
        Ok(StarlightModel {
            encoder: r.encoder,
            gp,
            features: r.features,
            targets: r.targets,
            scaler: r.scaler,
            provenance: r.provenance,
            config: r.config,
        })
    }
}

fn dedup<'a>(
    samples: impl Iterator<Item = &'a EdpSample>,
    scaler: &TargetScaler,
    seen: &mut HashSet<[u64; FEATURE_DIM]>,
) -> (Vec<FeatureVector>, Vec<f64>) {
    let mut feats = Vec::new();
    let mut ys = Vec::new();
    for s in samples {
        if seen.insert(s.features.bits_key()) {
            feats.push(s.features);
            ys.push(scaler.standardize(s));
        }
    }
    (feats, ys)
}

#[derive(Serialize, Deserialize)]
struct StarlightRecord {
    format: String,
    version: u32,
    provenance: Provenance,
    encoder: NetworkParams,
    kernel: KernelParams,
    prior: Option<GammaPrior>,
    features: Vec<FeatureVector>,
    targets: Vec<f64>,
    scaler: TargetScaler,
    config: DklConfig,
}

/// Transfer from a trained source model and fine-tune jointly.
pub fn train_starlight(
    encoder: &NetworkParams,
    train: &[EdpSample],
    test: &[EdpSample],
    target: TargetKind,
    epochs: usize,
    config: DklConfig,
    eval_interval: usize,
) -> Result<(StarlightModel, Vec<TrainPoint>)> {
    let mut m = StarlightModel::init_from_transfer(encoder, train, target, config)?;
    let hist = m.train_joint(epochs, config.lr_encoder, config.lr_gp, Some(test), eval_interval)?;
    Ok((m, hist))
}
