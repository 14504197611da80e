//! Comparison methods: Offline Random search over Starlight, an online GP
//! BO trained from scratch (Spotlight-like) and the surrogate ablations.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gp::{GammaPrior, GpState, KernelParams};
use crate::metrics::spearman_rho;
use crate::nn::{mse, AdamConfig, AdamState, NetworkParams};
use crate::optimizer::{
    random_feasible_hw, run_loop, BoConfig, EvalRecord, HistoryLine, HwTrial, LayerResult, LoopStyle, RunHeader,
    RunHistory, Surrogate,
};
use crate::oracle::{Fidelity, Oracle};
use crate::sampling::lattice::{sw_from_unit, SW_LATTICE_DIM};
use crate::sampling::{EdpSample, TargetKind, TargetScaler};
use crate::starlight::{DklConfig, StarlightModel};
use crate::starlight_low::{
    continue_training, evaluate_low_model, feature_matrix, StarlightLowModel, TrainLowConfig, LATENT_DIM,
    PREDICTOR_SIZES,
};
use crate::workload::{encode_unchecked, validate_fit, DesignPoint, FeatureVector, HwConfig, SwMapping, Workload};
use crate::{Error, Result};

pub const VANILLA_LABEL: &str = "vanilla_bo (Spotlight-like)";

/// Display name of a method in reports.
pub fn method_label(method: &str) -> &str {
    match method {
        "vanilla_bo" => VANILLA_LABEL,
        m => m,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    OfflineRandom,
    VanillaBo,
    DklScratch,
    TransferredNn,
    FinetuneLow,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "offline_random" => BaselineKind::OfflineRandom,
            "vanilla_bo" => BaselineKind::VanillaBo,
            "dkl_scratch" => BaselineKind::DklScratch,
            "transferred_nn" => BaselineKind::TransferredNn,
            "finetune_low" => BaselineKind::FinetuneLow,
            _ => return Err(Error::OutOfRange(format!("unknown baseline kind {s:?}"))),
        })
    }
}

// ---------------------------------------------------------------------------
// Offline Random
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OfflineRandomConfig {
    pub samples_per_layer: usize,
    /// Random HW configs the per-layer samples are split across.
    pub hw_groups: usize,
    pub seed: u64,
}

impl Default for OfflineRandomConfig {
    fn default() -> Self {
        OfflineRandomConfig {
            samples_per_layer: 48_000,
            hw_groups: 64,
            seed: 0,
        }
    }
}

/// Up to `count` uniformly drawn feasible mappings (duplicates allowed).
fn random_mappings(hw: &HwConfig, layer: &crate::workload::LayerShape, count: usize, rng: &mut ChaCha8Rng) -> Vec<SwMapping> {
    let mut out = Vec::with_capacity(count);
    let mut u = [0.0; SW_LATTICE_DIM];
    for _ in 0..count * 50 + 1000 {
        if out.len() == count {
            break;
        }
        rng.fill(&mut u[..]);
        let sw = sw_from_unit(&u, layer, Some(hw.array_dim)).canonical();
        if validate_fit(&DesignPoint { hw: *hw, sw, layer: *layer }) {
            out.push(sw);
        }
    }
    out
}

/// Scores random designs with Starlight's predicted mean and evaluates only
/// the predicted-best design, one high-fidelity call per layer.
pub fn offline_random(
    model: &StarlightModel,
    workload: &Workload,
    cfg: &OfflineRandomConfig,
    oracle: &dyn Oracle,
    on_line: &mut dyn FnMut(&HistoryLine) -> Result<()>,
) -> Result<RunHistory> {
    if cfg.samples_per_layer == 0 || cfg.hw_groups == 0 {
        return Err(Error::OutOfRange("offline random needs positive budgets".into()));
    }
    workload.validate()?;
    let layers = &workload.layers;
    let mut header = RunHeader::new(
        "offline_random",
        &workload.name,
        cfg.seed,
        layers.len(),
        serde_json::to_value(cfg)?,
    );
    header.surrogate_hash = model.hash();
    header.oracle = oracle.id();
    let mut history = RunHistory::new(header);
    on_line(&HistoryLine::Header(history.header.clone()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = cfg.hw_groups.min(cfg.samples_per_layer);
    let mut used = HashSet::new();
    // (total predicted cost, hw, per-layer (sw, standardized mean))
    let mut best: Option<(f64, HwConfig, Vec<(SwMapping, f64)>)> = None;
    for g in 0..groups {
        let hw = random_feasible_hw(layers, &mut rng, &used)?;
        used.insert(hw.space_index().expect("hw from the design space"));
        let count = cfg.samples_per_layer / groups + usize::from(g < cfg.samples_per_layer % groups);
        let mut total = 0.0;
        let mut picks = Vec::with_capacity(layers.len());
        for layer in layers {
            let maps = random_mappings(&hw, layer, count, &mut rng);
            let feats: Vec<FeatureVector> = maps
                .iter()
                .map(|sw| encode_unchecked(&DesignPoint { hw, sw: *sw, layer: *layer }))
                .collect();
            let means = model.predict_mean(&feats)?;
            match means.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((i, &m)) => {
                    total += model.scaler().to_raw(m);
                    picks.push((maps[i], m));
                }
                None => {
                    total = f64::INFINITY;
                    break;
                }
            }
        }
        if total.is_finite() && best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            best = Some((total, hw, picks));
        }
    }
    let (_, hw, picks) = best.ok_or(Error::Empty("feasible random designs"))?;
    let mut results = Vec::with_capacity(layers.len());
    let mut records = Vec::with_capacity(layers.len());
    for (li, (layer, (sw, mean))) in layers.iter().zip(picks).enumerate() {
        let cost = oracle
            .evaluate(&DesignPoint { hw, sw, layer: *layer })
            .map_err(|e| Error::context(format!("layer {li}"), e))?;
        records.push(EvalRecord {
            index: li,
            iteration: 0,
            layer: li,
            step: 0,
            hw,
            sw,
            acquisition: Some(-mean),
            energy_pj: cost.energy_pj,
            delay_cycles: cost.delay_cycles,
            edp: cost.edp,
            best_total_edp: None,
        });
        results.push(LayerResult {
            layer: li,
            sw,
            energy_pj: cost.energy_pj,
            delay_cycles: cost.delay_cycles,
            edp: cost.edp,
        });
    }
    let trial = HwTrial {
        iteration: 0,
        hw,
        acquisition: None,
        total_edp: results.iter().map(|r| r.edp).sum(),
        layers: results,
    };
    if let Some(last) = records.last_mut() {
        last.best_total_edp = Some(trial.total_edp);
    }
    for r in records {
        on_line(&HistoryLine::Eval(r.clone()))?;
        history.evaluations.push(r);
    }
    on_line(&HistoryLine::Trial(trial.clone()))?;
    history.push_trial(trial.clone());
    on_line(&HistoryLine::Incumbent(trial))?;
    Ok(history)
}

// ---------------------------------------------------------------------------
// Vanilla BO
// ---------------------------------------------------------------------------

/// Exact GP on the 40-D scaled features, standardized on the data seen so
/// far and refit from the previous hyperparameters after each observation.
#[derive(Clone, Debug)]
pub struct VanillaGp {
    target: TargetKind,
    lr: f64,
    params: KernelParams,
    features: Vec<FeatureVector>,
    logs: Vec<f64>,
    seen: HashSet<[u64; crate::workload::FEATURE_DIM]>,
    gp: Option<GpState>,
}

impl VanillaGp {
    pub fn new(target: TargetKind) -> Self {
        VanillaGp {
            target,
            lr: 1e-2,
            params: KernelParams::default(),
            features: Vec::new(),
            logs: Vec::new(),
            seen: HashSet::new(),
            gp: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    fn rows(features: &[FeatureVector]) -> DMatrix<f64> {
        DMatrix::from_fn(features.len(), crate::workload::FEATURE_DIM, |r, c| features[r].0[c])
    }
}

impl Surrogate for VanillaGp {
    fn name(&self) -> &str {
        VANILLA_LABEL
    }

    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
        match &self.gp {
            None => Ok(vec![(0.0, self.params.outputscale().sqrt()); features.len()]),
            Some(_) if features.is_empty() => Ok(Vec::new()),
            Some(gp) => Ok(gp
                .posterior_batch(&Self::rows(features))?
                .into_iter()
                .map(|(m, v)| (m, v.sqrt()))
                .collect()),
        }
    }

    fn observe(&mut self, samples: &[EdpSample], refit_steps: usize) -> Result<()> {
        if let Some(i) = samples.iter().position(|s| s.fidelity != Fidelity::High) {
            return Err(Error::at(i, Error::InvalidWorkload("updates must be high-fidelity".into())));
        }
        let before = self.features.len();
        for s in samples {
            if self.seen.insert(s.features.bits_key()) {
                self.features.push(s.features);
                self.logs.push(s.log_target(self.target));
            }
        }
        if self.features.len() == before {
            return Ok(());
        }
        let n = self.logs.len() as f64;
        let mean = self.logs.iter().sum::<f64>() / n;
        let var = self.logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        let y = DVector::from_iterator(self.logs.len(), self.logs.iter().map(|v| (v - mean) / std));
        let mut gp = GpState::new(Self::rows(&self.features), y, self.params, Some(GammaPrior::default()))?;
        if refit_steps > 0 {
            gp.fit(refit_steps, self.lr)?;
        }
        self.params = *gp.params();
        self.gp = Some(gp);
        Ok(())
    }
}

/// Same loop shape as co-design with a from-scratch GP surrogate: the first
/// HW is random and every layer starts with three random evaluations.
pub fn vanilla_bo(
    config: &BoConfig,
    workload: &Workload,
    target: TargetKind,
    oracle: &dyn Oracle,
    on_line: &mut dyn FnMut(&HistoryLine) -> Result<()>,
) -> Result<RunHistory> {
    let style = LoopStyle {
        random_first_hw: config.fix_hw.is_none(),
        random_per_layer: 3,
    };
    run_loop("vanilla_bo", config, workload, &mut VanillaGp::new(target), oracle, style, on_line)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Starlight,
    DklScratch,
    TransferredNn,
    FinetuneLow,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Starlight,
        Variant::DklScratch,
        Variant::TransferredNn,
        Variant::FinetuneLow,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Starlight => "starlight",
            Variant::DklScratch => "dkl_from_scratch",
            Variant::TransferredNn => "transferred_encoder_nn",
            Variant::FinetuneLow => "finetuned_starlight_low",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Absolute high-fidelity training-set sizes.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Joint epochs for the two deep-kernel variants.
    pub dkl_epochs: usize,
    pub dkl: DklConfig,
    pub nn_epochs: usize,
    pub nn_lr: f64,
    pub finetune_epochs: usize,
    pub target: TargetKind,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sizes: vec![64, 128, 256],
            seeds: (0..5).collect(),
            dkl_epochs: 1000,
            dkl: DklConfig::default(),
            nn_epochs: 1000,
            nn_lr: 1e-3,
            finetune_epochs: 1000,
            target: TargetKind::Edp,
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub train_size: usize,
    pub mean_rho: f64,
    pub std_rho: f64,
    pub rhos: Vec<f64>,
}

/// `size` training samples chosen by a seeded shuffle.
pub fn train_subset(train: &[EdpSample], size: usize, seed: u64) -> Result<Vec<EdpSample>> {
    if size > train.len() {
        return Err(Error::OutOfRange(format!(
            "training size {size} exceeds the {} available samples",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..size].iter().map(|&i| train[i].clone()).collect())
}

/// Transferred encoder with a fresh MLP head on the latent mean, trained
/// end to end with MSE. Returns test Spearman ρ.
pub fn transferred_nn_rho(
    encoder: &NetworkParams,
    train: &[EdpSample],
    test: &[EdpSample],
    target: TargetKind,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let scaler = TargetScaler::fit(train, target)?;
    let mut enc = encoder.clone();
    let mut head = NetworkParams::glorot(&PREDICTOR_SIZES, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let adam = AdamConfig::with_lr(lr);
    let mut enc_opt = AdamState::new(&enc, adam);
    let mut head_opt = AdamState::new(&head, adam);
    let x = feature_matrix(train.iter().map(|s| &s.features));
    let y = DMatrix::from_iterator(1, train.len(), train.iter().map(|s| scaler.standardize(s)));
    for _ in 0..epochs {
        let (h, enc_cache) = enc.forward(&x)?;
        let mu = h.rows(0, LATENT_DIM).into_owned();
        let (pred, head_cache) = head.forward(&mu)?;
        let (_, d_pred) = mse(&pred, &y)?;
        let (g_head, d_mu) = head.backward(&head_cache, &d_pred)?;
        let mut d_h = DMatrix::zeros(h.nrows(), h.ncols());
        d_h.rows_mut(0, LATENT_DIM).copy_from(&d_mu);
        let (g_enc, _) = enc.backward(&enc_cache, &d_h)?;
        head_opt.step(&mut head, &g_head)?;
        enc_opt.step(&mut enc, &g_enc)?;
    }
    let xt = feature_matrix(test.iter().map(|s| &s.features));
    let mu = enc.predict(&xt)?.rows(0, LATENT_DIM).into_owned();
    let pred: Vec<f64> = head.predict(&mu)?.iter().copied().collect();
    let truth: Vec<f64> = test.iter().map(|s| scaler.standardize(s)).collect();
    spearman_rho(&pred, &truth)
}

/// Test ρ of one variant trained on `train`.
pub fn variant_rho(
    variant: Variant,
    low: &StarlightLowModel,
    train: &[EdpSample],
    test: &[EdpSample],
    cfg: &AblationConfig,
    seed: u64,
) -> Result<f64> {
    match variant {
        Variant::Starlight => {
            let mut m = StarlightModel::init_from_transfer(&low.export_encoder()?, train, cfg.target, cfg.dkl)?;
            m.train_joint(cfg.dkl_epochs, cfg.dkl.lr_encoder, cfg.dkl.lr_gp, None, 0)?;
            m.spearman(test)
        }
        Variant::DklScratch => {
            let mut m = StarlightModel::init_scratch(train, cfg.target, cfg.dkl, seed)?;
            m.train_joint(cfg.dkl_epochs, cfg.dkl.lr_encoder, cfg.dkl.lr_gp, None, 0)?;
            m.spearman(test)
        }
        Variant::TransferredNn => {
            transferred_nn_rho(&low.export_encoder()?, train, test, cfg.target, cfg.nn_epochs, cfg.nn_lr, seed)
        }
        Variant::FinetuneLow => {
            let ft = TrainLowConfig {
                epochs: cfg.finetune_epochs,
                batch_size: train.len().clamp(1, 256),
                target: cfg.target,
                seed,
                ..TrainLowConfig::default()
            };
            let (m, _) = continue_training(low.clone(), train, String::new(), &ft)?;
            evaluate_low_model(&m, test)
        }
    }
}

/// Every variant × size × seed, aggregated to mean and sample std of ρ.
pub fn ablation_suite(
    low: &StarlightLowModel,
    train: &[EdpSample],
    test: &[EdpSample],
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    if cfg.seeds.is_empty() || cfg.sizes.is_empty() {
        return Err(Error::Empty("ablation sizes or seeds"));
    }
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let subsets: Vec<Vec<EdpSample>> =
            cfg.seeds.iter().map(|&s| train_subset(train, size, s)).collect::<Result<_>>()?;
        for &variant in &cfg.variants {
            let mut rhos = Vec::with_capacity(cfg.seeds.len());
            for (sub, &seed) in subsets.iter().zip(&cfg.seeds) {
                let rho = variant_rho(variant, low, sub, test, cfg, seed)
                    .map_err(|e| Error::context(format!("{} size {size} seed {seed}", variant.label()), e))?;
                log::info!("ablation {} n={size} seed={seed}: rho {rho:.4}", variant.label());
                rhos.push(rho);
            }
            let (mean_rho, std_rho) = mean_std(&rhos);
            rows.push(AblationRow {
                variant,
                train_size: size,
                mean_rho,
                std_rho,
                rhos,
            });
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn write_ablation_csv(path: impl AsRef<Path>, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_err)?;
    w.write_record(["variant", "train_size", "mean_rho", "std_rho", "trials"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.variant.label().to_string(),
            r.train_size.to_string(),
            format!("{:.6}", r.mean_rho),
            format!("{:.6}", r.std_rho),
            r.rhos.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
