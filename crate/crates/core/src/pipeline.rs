//! End-to-end experiment presets: data generation, both training stages,
//! every optimization method and the report files, written under one
//! output directory with a manifest of content hashes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{
    ablation_suite, offline_random, vanilla_bo, write_ablation_csv, AblationConfig, AblationRow,
    OfflineRandomConfig,
};
use crate::metrics::{
    kl_divergence_hist, summarize_all, write_comparison_csv, write_convergence_csv, write_metrics_csv,
    write_summary_csv, MetricsRecord, RunSummary, KL_BINS,
};
use crate::optimizer::{ignore_lines, run_codesign, run_sw_dse, BoConfig, RunHistory};
use crate::oracle::{evaluate_low, CostModel, HighOracle, LowOracle};
use crate::sampling::{collect_dataset_with, Dataset, TargetKind};
use crate::starlight::{train_starlight, DklConfig, StarlightModel, TrainPoint};
use crate::starlight_low::{
    evaluate_low_model, latent_structure_rho, model_hash, train_low, EpochLoss, StarlightLowModel, TrainLowConfig,
};
use crate::workload::{bundled_workload, bundled_workloads, unique_layers, HwConfig, Workload};
use crate::{hash, Error, Result};

pub const METHODS: [&str; 4] = ["polaris", "offline_random", "vanilla_bo", "polaris-sw"];

/// The HW the software-only runs are pinned to: a 16×16 array with a 64 KB
/// accumulator and a 256 KB scratchpad.
pub fn default_fixed_hw() -> HwConfig {
    HwConfig {
        array_dim: 16,
        acc_kb: 64,
        spad_kb: 256,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: String,
    pub seed: u64,
    pub target: TargetKind,
    pub n_low: usize,
    pub n_high: usize,
    pub low: TrainLowConfig,
    pub high_epochs: usize,
    pub eval_interval: usize,
    pub dkl: DklConfig,
    pub bo: BoConfig,
    pub trials: usize,
    pub offline: OfflineRandomConfig,
    /// Bundled workload names; empty means all.
    pub workloads: Vec<String>,
    /// HW for the software-only runs; `None` skips them.
    pub sw_dse_hw: Option<HwConfig>,
    pub ablation: Option<AblationConfig>,
}

impl PipelineConfig {
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let mut cfg = match name {
            "smoke" => PipelineConfig {
                preset: name.into(),
                seed,
                target: TargetKind::Edp,
                n_low: 512,
                n_high: 64,
                low: TrainLowConfig {
                    epochs: 5,
                    batch_size: 128,
                    ..TrainLowConfig::default()
                },
                high_epochs: 20,
                eval_interval: 10,
                dkl: DklConfig::default(),
                bo: BoConfig {
                    n_outer: 2,
                    m_inner: 2,
                    sw_pool_size: 100,
                    hw_score_mappings: 2,
                    refit_steps: 1,
                    m_inner_fixed_hw: 3,
                    ..BoConfig::default()
                },
                trials: 1,
                offline: OfflineRandomConfig {
                    samples_per_layer: 200,
                    hw_groups: 8,
                    seed,
                },
                workloads: vec!["resnet-like".into()],
                sw_dse_hw: Some(default_fixed_hw()),
                ablation: Some(AblationConfig {
                    sizes: vec![16],
                    seeds: vec![0],
                    dkl_epochs: 5,
                    nn_epochs: 5,
                    finetune_epochs: 2,
                    ..AblationConfig::default()
                }),
            },
            "desk" => PipelineConfig {
                preset: name.into(),
                seed,
                target: TargetKind::Edp,
                n_low: 1 << 12,
                n_high: 1 << 8,
                low: TrainLowConfig {
                    epochs: 1000,
                    ..TrainLowConfig::default()
                },
                high_epochs: 1000,
                eval_interval: 50,
                dkl: DklConfig::default(),
                bo: BoConfig {
                    sw_pool_size: 1000,
                    hw_score_mappings: 32,
                    refit_steps: 2,
                    ..BoConfig::default()
                },
                trials: 3,
                offline: OfflineRandomConfig {
                    seed,
                    ..OfflineRandomConfig::default()
                },
                workloads: Vec::new(),
                sw_dse_hw: Some(default_fixed_hw()),
                ablation: Some(AblationConfig {
                    sizes: vec![51, 204],
                    seeds: (0..5).collect(),
                    ..AblationConfig::default()
                }),
            },
            "full" => PipelineConfig {
                preset: name.into(),
                seed,
                target: TargetKind::Edp,
                n_low: 1 << 16,
                n_high: 1 << 10,
                low: TrainLowConfig::default(),
                high_epochs: 1000,
                eval_interval: 50,
                dkl: DklConfig::default(),
                bo: BoConfig::default(),
                trials: 3,
                offline: OfflineRandomConfig {
                    samples_per_layer: 480_000,
                    seed,
                    ..OfflineRandomConfig::default()
                },
                workloads: Vec::new(),
                sw_dse_hw: Some(default_fixed_hw()),
                ablation: Some(AblationConfig {
                    sizes: vec![204, 409, 819],
                    ..AblationConfig::default()
                }),
            },
            _ => return Err(Error::OutOfRange(format!("unknown preset {name:?} (smoke, desk, full)"))),
        };
        cfg.low.seed = seed;
        cfg.bo.seed = seed;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_low == 0 || self.n_high < 2 || self.trials == 0 {
            return Err(Error::OutOfRange("dataset sizes and trial count must be positive".into()));
        }
        self.bo.validate()?;
        self.resolve_workloads().map(|_| ())
    }

    pub fn resolve_workloads(&self) -> Result<Vec<Workload>> {
        if self.workloads.is_empty() {
            return Ok(bundled_workloads());
        }
        self.workloads
            .iter()
            .map(|n| bundled_workload(n).ok_or_else(|| Error::InvalidWorkload(format!("no bundled workload {n:?}"))))
            .collect()
    }

    pub fn hash(&self) -> String {
        hash::json_hash(self)
    }

    /// Seed of the `k`-th trial.
    pub fn trial_seed(&self, k: usize) -> u64 {
        self.seed.wrapping_add(k as u64)
    }
}

/// Where each artifact lives under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn low_data(&self) -> PathBuf {
        self.root.join("data/low.jsonl")
    }

    pub fn high_data(&self) -> PathBuf {
        self.root.join("data/high.jsonl")
    }

    pub fn low_model(&self) -> PathBuf {
        self.root.join("models/starlight-low.json")
    }

    pub fn starlight(&self) -> PathBuf {
        self.root.join("models/starlight.json")
    }

    pub fn low_history(&self) -> PathBuf {
        self.root.join("train/low_loss.csv")
    }

    pub fn high_history(&self) -> PathBuf {
        self.root.join("train/high_rho.csv")
    }

    pub fn run(&self, method: &str, workload: &str, seed: u64) -> PathBuf {
        self.root.join(format!("runs/{method}/{workload}-seed{seed}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn low_history_csv(history: &[EpochLoss]) -> Vec<u8> {
    let mut out = b"epoch,total,pred,recon,kl\n".to_vec();
    for e in history {
        writeln!(out, "{},{},{},{},{}", e.epoch, e.total, e.pred, e.recon, e.kl).expect("write to vec");
    }
    out
}

pub fn high_history_csv(history: &[TrainPoint]) -> Vec<u8> {
    let mut out = b"epoch,mll,rho\n".to_vec();
    for p in history {
        let rho = p.rho.map(|r| r.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{rho}", p.epoch, p.mll).expect("write to vec");
    }
    out
}

/// Binned KL between high- and low-fidelity log-EDP on the designs of a
/// high-fidelity dataset: over all points and over the lowest-EDP decile.
pub fn oracle_kl(high: &Dataset, model: &CostModel) -> Result<(f64, f64)> {
    let designs: Vec<_> = high.samples.iter().map(|s| s.design).collect();
    let low = crate::par::try_map(&designs, |dp| evaluate_low(dp, model)).map_err(|(i, e)| Error::at(i, e))?;
    let hi: Vec<f64> = high.samples.iter().map(|s| s.edp.log10()).collect();
    let lo: Vec<f64> = low.iter().map(|c| c.edp.log10()).collect();
    let overall = kl_divergence_hist(&hi, &lo, KL_BINS)?;
    let mut idx: Vec<usize> = (0..hi.len()).collect();
    idx.sort_by(|&a, &b| hi[a].total_cmp(&hi[b]));
    let k = (hi.len() / 10).max(2);
    let tail_hi: Vec<f64> = idx[..k].iter().map(|&i| hi[i]).collect();
    let tail_lo: Vec<f64> = idx[..k].iter().map(|&i| lo[i]).collect();
    Ok((overall, kl_divergence_hist(&tail_hi, &tail_lo, KL_BINS)?))
}

/// What a finished pipeline produced.
#[derive(Clone, Debug)]
pub struct PipelineReport {
    pub starlight_rho: f64,
    pub low_rho: f64,
    pub kl: (f64, f64),
    pub summaries: Vec<RunSummary>,
    pub ablation: Vec<AblationRow>,
    /// `(relative path, sha256)` of every file written, sorted by path.
    pub files: Vec<(String, String)>,
}

struct Writer<'a> {
    layout: &'a Layout,
    files: Vec<(String, String)>,
}

impl Writer<'_> {
    fn put(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_file(&path, bytes)?;
        let rel = path
            .strip_prefix(&self.layout.root)
            .unwrap_or(&path)
            .to_string_lossy()
            .replace('\\', "/");
        self.files.push((rel, hash::sha256_hex(bytes)));
        Ok(())
    }
}

/// Runs the whole chain under `out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, cost_model: &CostModel, out_dir: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    cost_model.validate()?;
    let workloads = cfg.resolve_workloads()?;
    let layers = unique_layers(&workloads);
    let layout = Layout::new(out_dir);
    let mut w = Writer {
        layout: &layout,
        files: Vec::new(),
    };
    let cm_hash = cost_model.hash();
    let low_oracle = LowOracle {
        model: cost_model.clone(),
    };
    let high_oracle = HighOracle {
        model: cost_model.clone(),
    };

    log::info!("[{}] generating {} low and {} high samples", cfg.preset, cfg.n_low, cfg.n_high);
    let low_ds = collect_dataset_with(&low_oracle, &layers, cfg.n_low, cfg.seed, cm_hash.clone())?;
    let high_ds = collect_dataset_with(&high_oracle, &layers, cfg.n_high, cfg.seed.wrapping_add(1), cm_hash)?;
    w.put(layout.low_data(), &low_ds.to_bytes())?;
    w.put(layout.high_data(), &high_ds.to_bytes())?;

    log::info!("[{}] training starlight-low for {} epochs", cfg.preset, cfg.low.epochs);
    let (low_model, low_hist) = train_low(&low_ds, &cfg.low)?;
    let low_path = layout.low_model();
    ensure_parent(&low_path)?;
    low_model.save(&low_path)?;
    for p in [low_path.clone(), crate::starlight_low::sidecar_path(&low_path)] {
        let bytes = std::fs::read(&p)?;
        w.put(p, &bytes)?;
    }
    w.put(layout.low_history(), &low_history_csv(&low_hist))?;

    log::info!("[{}] training starlight for {} epochs", cfg.preset, cfg.high_epochs);
    let (train, test) = (high_ds.train(), high_ds.test());
    let (starlight, high_hist) = train_starlight(
        &low_model.export_encoder()?,
        &train,
        &test,
        cfg.target,
        cfg.high_epochs,
        cfg.dkl,
        cfg.eval_interval,
    )?;
    w.put(layout.starlight(), &starlight.to_bytes()?)?;
    w.put(layout.high_history(), &high_history_csv(&high_hist))?;

    let mut records = starlight.evaluate(&test, cfg.seed, &high_ds.content_hash(), cfg.high_epochs)?;
    let low_rho = evaluate_low_model(&low_model, &low_ds.test())?;
    records.push(
        MetricsRecord::new("spearman", "starlight_low", low_rho, low_ds.test().len(), cfg.seed)
            .with_dataset(&low_ds.content_hash())
            .tag("model", hash::short(&model_hash(&low_model))),
    );
    let latent = latent_structure_rho(&low_model, &low_ds.test(), 500, cfg.seed)?;
    records.push(MetricsRecord::new("spearman", "latent_structure", latent, 500, cfg.seed).with_dataset(&low_ds.content_hash()));
    let kl = oracle_kl(&high_ds, cost_model)?;
    for (name, value, n) in [("oracle_low_vs_high", kl.0, high_ds.len()), ("oracle_low_vs_high_tail", kl.1, high_ds.len() / 10)] {
        records.push(
            MetricsRecord::new("kl_divergence", name, value, n, cfg.seed)
                .with_dataset(&high_ds.content_hash())
                .tag("bins", KL_BINS),
        );
    }

    let mut histories = run_methods(cfg, &workloads, &starlight, &high_oracle, &layout, &mut w)?;
    histories.sort_by_key(|h| (method_rank(&h.header.method), h.header.workload.clone(), h.header.seed));
    let summaries = summarize_all(&histories)?;
    w.put(layout.report("summary.csv"), &csv_bytes(|b| write_summary_csv(&summaries, b))?)?;
    w.put(layout.report("convergence.csv"), &csv_bytes(|b| write_convergence_csv(&summaries, b))?)?;
    let methods: Vec<&str> = METHODS
        .iter()
        .copied()
        .filter(|m| summaries.iter().any(|s| s.method == *m))
        .collect();
    w.put(layout.report("comparison.csv"), &csv_bytes(|b| write_comparison_csv(&summaries, &methods, b))?)?;

    let ablation = match &cfg.ablation {
        Some(a) => {
            log::info!("[{}] ablations", cfg.preset);
            let rows = ablation_suite(&low_model, &train, &test, a)?;
            let path = layout.report("ablation.csv");
            ensure_parent(&path)?;
            write_ablation_csv(&path, &rows)?;
            let bytes = std::fs::read(&path)?;
            w.put(path, &bytes)?;
            rows
        }
        None => Vec::new(),
    };
    w.put(layout.report("metrics.csv"), &csv_bytes(|b| write_metrics_csv(&records, b))?)?;

    w.files.sort();
    let manifest = serde_json::json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "config_hash": cfg.hash(),
        "cost_model_hash": cost_model.hash(),
        "files": w.files.iter().map(|(p, h)| serde_json::json!({"path": p, "sha256": h})).collect::<Vec<_>>(),
    });
    write_file(&layout.manifest(), &serde_json::to_vec_pretty(&manifest)?)?;

    let starlight_rho = records
        .iter()
        .find(|r| r.metric == "spearman" && r.name == "starlight")
        .map(|r| r.value)
        .unwrap_or(f64::NAN);
    Ok(PipelineReport {
        starlight_rho,
        low_rho,
        kl,
        summaries,
        ablation,
        files: w.files,
    })
}

fn method_rank(method: &str) -> usize {
    METHODS.iter().position(|m| *m == method).unwrap_or(METHODS.len())
}

fn run_methods(
    cfg: &PipelineConfig,
    workloads: &[Workload],
    starlight: &StarlightModel,
    oracle: &HighOracle,
    layout: &Layout,
    w: &mut Writer,
) -> Result<Vec<RunHistory>> {
    let mut out = Vec::new();
    for workload in workloads {
        for k in 0..cfg.trials {
            let seed = cfg.trial_seed(k);
            let bo = BoConfig { seed, ..cfg.bo.clone() };
            log::info!("[{}] {} trial {k}: polaris", cfg.preset, workload.name);
            let h = run_codesign(&bo, workload, &mut starlight.clone(), oracle, &mut ignore_lines)?;
            out.push(h);

            log::info!("[{}] {} trial {k}: offline random", cfg.preset, workload.name);
            let off = OfflineRandomConfig {
                seed,
                ..cfg.offline.clone()
            };
            out.push(offline_random(starlight, workload, &off, oracle, &mut ignore_lines)?);

            log::info!("[{}] {} trial {k}: vanilla bo", cfg.preset, workload.name);
            out.push(vanilla_bo(&bo, workload, cfg.target, oracle, &mut ignore_lines)?);

            if let Some(hw) = cfg.sw_dse_hw {
                log::info!("[{}] {} trial {k}: software-only", cfg.preset, workload.name);
                let sw = BoConfig {
                    fix_hw: Some(hw),
                    ..bo.clone()
                };
                out.push(run_sw_dse(&sw, workload, &mut starlight.clone(), oracle, &mut ignore_lines)?);
            }
        }
    }
    for h in &out {
        w.put(layout.run(&h.header.method, &h.header.workload, h.header.seed), &h.to_bytes())?;
    }
    Ok(out)
}

/// Loads the trained Starlight-Low checkpoint of a pipeline output.
pub fn load_low(layout: &Layout) -> Result<StarlightLowModel> {
    StarlightLowModel::load(layout.low_model())
}

/// Median final EDP of `method` on `workload`, if present.
pub fn median_of(summaries: &[RunSummary], method: &str, workload: &str) -> Option<f64> {
    summaries
        .iter()
        .find(|s| s.method == method && s.workload == workload)
        .map(|s| s.median_edp)
}
