//! Sobol sampling of the design space and oracle-labelled datasets.

pub mod lattice;
pub mod sobol;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::oracle::{CostBreakdown, Fidelity, Oracle};
use crate::workload::{encode_unchecked, feature_scales, validate_fit, DesignPoint, FeatureVector, LayerShape, Scale};
use crate::{hash, par, Error, Result};

pub use lattice::{lattice_map, LATTICE_DIM};
pub use sobol::{sobol_sequence, Sobol};

pub const DATASET_FORMAT: &str = "polaris-dataset";
pub const DATASET_VERSION: u32 = 1;
const MAX_REDRAWS_PER_SAMPLE: u64 = 100_000;
/// Sobol start offsets are drawn from `0..SOBOL_OFFSET_RANGE`.
pub const SOBOL_OFFSET_RANGE: u64 = 1 << 20;
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Which cost the models are trained to predict (as `log10`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    #[default]
    Edp,
    Delay,
}

impl TargetKind {
    pub fn log_value(&self, cost: &CostBreakdown) -> f64 {
        match self {
            TargetKind::Edp => cost.edp.log10(),
            TargetKind::Delay => cost.delay_cycles.log10(),
        }
    }
}

impl std::str::FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edp" => Ok(TargetKind::Edp),
            "delay" => Ok(TargetKind::Delay),
            other => Err(Error::Format(format!("unknown target {other:?} (edp|delay)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdpSample {
    pub features: FeatureVector,
    pub design: DesignPoint,
    pub energy_pj: f64,
    pub delay_cycles: f64,
    pub edp: f64,
    pub fidelity: Fidelity,
    /// Standardized log target, filled in at training time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

impl EdpSample {
    pub fn new(design: DesignPoint, cost: &CostBreakdown, fidelity: Fidelity) -> Self {
        EdpSample {
            features: encode_unchecked(&design),
            design,
            energy_pj: cost.energy_pj,
            delay_cycles: cost.delay_cycles,
            edp: cost.edp,
            fidelity,
            target: None,
        }
    }

    pub fn cost(&self) -> CostBreakdown {
        CostBreakdown {
            energy_pj: self.energy_pj,
            delay_cycles: self.delay_cycles,
            edp: self.edp,
            per_level_accesses: [[0; 3]; 3],
        }
    }

    pub fn log_target(&self, kind: TargetKind) -> f64 {
        kind.log_value(&self.cost())
    }
}

/// Per-component raw bounds of the min-max feature scaler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub log2: Vec<bool>,
}

impl ScalerState {
    pub fn design_space() -> Self {
        let scales = feature_scales();
        ScalerState {
            min: scales.iter().map(|s| s.bounds().0).collect(),
            max: scales.iter().map(|s| s.bounds().1).collect(),
            log2: scales.iter().map(|s| matches!(s, Scale::Log2 { .. })).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub oracle: String,
    pub fidelity: Fidelity,
    pub seed: u64,
    pub split_seed: u64,
    pub n: usize,
    pub sobol_start: u64,
    pub redraws: u64,
    pub cost_model_hash: String,
    pub layers_hash: String,
    pub scaler_state: ScalerState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<EdpSample>,
}

/// Disjoint train/test index sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/20 shuffled split of `n` items.
pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
    idx.shuffle(&mut rng);
    let test = idx.split_off(n * 4 / 5);
    Split { train: idx, test }
}

/// Feasible design points drawn from the Sobol lattice, round-robin over
/// `layers`. Infeasible lattice points are skipped and the next Sobol point
/// is drawn. Returns the points and the number of redraws.
pub fn draw_designs(layers: &[LayerShape], n: usize, start: u64) -> Result<(Vec<DesignPoint>, u64)> {
    if layers.is_empty() {
        return Err(Error::Empty("layer list"));
    }
    let mut sobol = Sobol::starting_at(LATTICE_DIM, start)?;
    let mut u = [0.0; LATTICE_DIM];
    let mut points = Vec::with_capacity(n);
    let mut redraws = 0u64;
    for i in 0..n {
        let layer = &layers[i % layers.len()];
        let mut tries = 0u64;
        loop {
            sobol.next_into(&mut u);
            let dp = lattice_map(&u, layer);
            if validate_fit(&dp) {
                points.push(dp);
                break;
            }
            tries += 1;
            if tries > MAX_REDRAWS_PER_SAMPLE {
                return Err(Error::at(i, Error::InvalidDesign("no feasible lattice point found".into())));
            }
        }
        redraws += tries;
    }
    Ok((points, redraws))
}

/// Sobol start offset derived from a seed.
pub fn sobol_start(seed: u64) -> u64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..SOBOL_OFFSET_RANGE)
}

/// Labels `n` Sobol-drawn design points with `oracle`.
pub fn collect_dataset(oracle: &dyn Oracle, layers: &[LayerShape], n: usize, seed: u64) -> Result<Dataset> {
    collect_dataset_with(oracle, layers, n, seed, String::new())
}

pub fn collect_dataset_with(
    oracle: &dyn Oracle,
    layers: &[LayerShape],
    n: usize,
    seed: u64,
    cost_model_hash: String,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("dataset size"));
    }
    let start = sobol_start(seed);
    let (points, redraws) = draw_designs(layers, n, start)?;
    if redraws > 0 {
        log::info!("dataset: {redraws} infeasible lattice points redrawn for {n} samples");
    }
    let fidelity = oracle.fidelity();
    let samples = par::try_map(&points, |dp| oracle.evaluate(dp).map(|c| EdpSample::new(*dp, &c, fidelity)))
        .map_err(|(i, e)| Error::at(i, e))?;
    Ok(Dataset {
        header: DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            oracle: oracle.id(),
            fidelity,
            seed,
            split_seed: seed,
            n,
            sobol_start: start,
            redraws,
            cost_model_hash,
            layers_hash: hash::json_hash(&layers),
            scaler_state: ScalerState::design_space(),
        },
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn fidelity(&self) -> Fidelity {
        self.header.fidelity
    }

    pub fn split(&self) -> Split {
        split_indices(self.samples.len(), self.header.split_seed)
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<EdpSample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn train(&self) -> Vec<EdpSample> {
        self.subset(&self.split().train)
    }

    pub fn test(&self) -> Vec<EdpSample> {
        self.subset(&self.split().test)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        buf
    }

    /// SHA-256 of the serialized file contents.
    pub fn content_hash(&self) -> String {
        hash::sha256_hex(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines.next().ok_or(Error::Empty("dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&header_line)?;
        if header.format != DATASET_FORMAT {
            return Err(Error::Format(format!("not a dataset file (format {:?})", header.format)));
        }
        if header.version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", header.version)));
        }
        let mut samples = Vec::with_capacity(header.n);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: EdpSample = serde_json::from_str(&line).map_err(|e| Error::at(i, e.into()))?;
            if s.fidelity != header.fidelity {
                return Err(Error::at(i, Error::Format("sample fidelity differs from header".into())));
            }
            samples.push(s);
        }
        if samples.len() != header.n {
            return Err(Error::Format(format!("header says {} samples, found {}", header.n, samples.len())));
        }
        Ok(Dataset { header, samples })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Dataset::read_from(BufReader::new(f)).map_err(|e| Error::context(path.as_ref().display().to_string(), e))
    }
}

/// Mean/std of log targets, fitted on a training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub kind: TargetKind,
    pub mean: f64,
    pub std: f64,
}

impl TargetScaler {
    pub fn fit(samples: &[EdpSample], kind: TargetKind) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let logs: Vec<f64> = samples.iter().map(|s| s.log_target(kind)).collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        if !mean.is_finite() || !std.is_finite() {
            return Err(Error::NonFinite("target statistics"));
        }
        Ok(TargetScaler { kind, mean, std })
    }

    pub fn standardize(&self, sample: &EdpSample) -> f64 {
        (sample.log_target(self.kind) - self.mean) / self.std
    }

    /// Back to the raw cost (EDP or delay).
    pub fn to_raw(&self, standardized: f64) -> f64 {
        10f64.powf(standardized * self.std + self.mean)
    }

    /// Fills each sample's `target` field.
    pub fn annotate(&self, samples: &mut [EdpSample]) {
        for s in samples {
            s.target = Some(self.standardize(s));
        }
    }
}
