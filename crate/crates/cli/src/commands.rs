use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use polaris_core::baselines::{
    ablation_suite, method_label, offline_random, vanilla_bo, write_ablation_csv, AblationConfig, OfflineRandomConfig,
    Variant,
};
use polaris_core::metrics::{
    summarize_all, write_comparison_csv, write_convergence_csv, write_metrics_csv, write_summary_csv, RunSummary,
};
use polaris_core::optimizer::{
    check_resumable, run_codesign, run_sw_dse, BoConfig, HistoryLine, HistoryWriter, ReplayOracle, RunHistory,
};
use polaris_core::oracle::{CostModel, Fidelity, HighOracle, LowOracle, Oracle};
use polaris_core::pipeline::{high_history_csv, low_history_csv, run_pipeline, Layout, PipelineConfig, METHODS};
use polaris_core::sampling::{collect_dataset_with, Dataset, TargetKind};
use polaris_core::starlight::{train_starlight, DklConfig, StarlightModel};
use polaris_core::starlight_low::{
    evaluate_low_model, sidecar_path, train_low, LossWeights, StarlightLowModel, TrainLowConfig,
};
use polaris_core::workload::{bundled_workload, bundled_workloads, load_workload, unique_layers, HwConfig, Workload};
use serde_json::json;

use crate::provenance::Provenance;
use crate::{
    Ablate, BaselineArg, BoArgs, Cli, Command, FidelityArg, GenData, Global, MakePaperFigures, Report, RunBaseline,
    RunDse, Target, TrainHigh, TrainLow, UsageError, VariantArg,
};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    set_jobs(g.jobs)?;
    std::fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::TrainLow(a) => cmd_train_low(g, a),
        Command::TrainHigh(a) => cmd_train_high(g, a),
        Command::RunDse(a) => run_dse(g, a),
        Command::RunBaseline(a) => run_baseline(g, a),
        Command::Ablate(a) => ablate(g, a),
        Command::Report(a) => report(g, a),
        Command::MakePaperFigures(a) => make_paper_figures(g, a),
    }
}

#[cfg(feature = "parallel")]
fn set_jobs(jobs: Option<u32>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| anyhow!("configuring {n} worker threads: {e}"))?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn set_jobs(jobs: Option<u32>) -> Result<()> {
    if jobs.is_some_and(|n| n > 1) {
        log::warn!("built without the `parallel` feature; --jobs is ignored");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shared inputs
// ---------------------------------------------------------------------------

fn resolve(g: &Global, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        g.out_dir.join(p)
    }
}

fn layout(g: &Global) -> Layout {
    Layout::new(&g.out_dir)
}

fn target(g: &Global) -> TargetKind {
    match g.target {
        Target::Edp => TargetKind::Edp,
        Target::Delay => TargetKind::Delay,
    }
}

fn cost_model(g: &Global, prov: Option<&mut Provenance>) -> Result<CostModel> {
    let model = match &g.cost_model {
        Some(p) => {
            let path = resolve(g, p);
            if let Some(prov) = prov {
                prov.input(&path)?;
            }
            CostModel::load(&path).with_context(|| format!("loading cost model {}", path.display()))?
        }
        None => CostModel::default(),
    };
    model.validate().context("invalid cost model")?;
    Ok(model)
}

fn workloads(g: &Global, prov: Option<&mut Provenance>) -> Result<Vec<Workload>> {
    let Some(spec) = &g.workload else {
        return Ok(bundled_workloads());
    };
    if let Some(w) = bundled_workload(spec) {
        return Ok(vec![w]);
    }
    let path = resolve(g, Path::new(spec));
    if !path.exists() {
        let names: Vec<String> = bundled_workloads().into_iter().map(|w| w.name).collect();
        return Err(usage(format!(
            "--workload {spec:?} is neither a bundled workload ({}) nor an existing file",
            names.join(", ")
        )));
    }
    if let Some(prov) = prov {
        prov.input(&path)?;
    }
    load_workload(&path).with_context(|| format!("loading workload {}", path.display()))
}

fn load_dataset(path: &Path, want: Fidelity, prov: &mut Provenance) -> Result<Dataset> {
    if !path.exists() {
        return Err(usage(format!(
            "dataset {} not found; create it with `gen-data --fidelity {want}`",
            path.display()
        )));
    }
    prov.input(path)?;
    let ds = Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    if ds.fidelity() != want {
        return Err(usage(format!(
            "{} holds {} fidelity samples, this command needs {want}",
            path.display(),
            ds.fidelity()
        )));
    }
    Ok(ds)
}

fn load_starlight(g: &Global, path: Option<&PathBuf>, prov: &mut Provenance) -> Result<StarlightModel> {
    let path = path.map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).starlight());
    if !path.exists() {
        return Err(usage(format!(
            "Starlight checkpoint {} not found; run `train-high` first or pass --model",
            path.display()
        )));
    }
    prov.input(&path)?;
    StarlightModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_low(g: &Global, path: Option<&PathBuf>, prov: &mut Provenance) -> Result<StarlightLowModel> {
    let path = path.map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).low_model());
    if !path.exists() {
        return Err(usage(format!(
            "low-fidelity checkpoint {} not found; run `train-low` first or pass --low",
            path.display()
        )));
    }
    prov.input(&path)?;
    StarlightLowModel::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn parse_hw(s: &str) -> Result<HwConfig> {
    s.parse::<HwConfig>()
        .map_err(|e| usage(format!("--fix-hw {s:?}: {e} (expected ARRAY,ACC_KB,SPAD_KB, e.g. 16,64,256)")))
}

fn bo_config(a: &BoArgs, seed: u64, fix_hw: Option<HwConfig>) -> Result<BoConfig> {
    let cfg = BoConfig {
        n_outer: a.n_outer,
        m_inner: a.m_inner,
        sw_pool_size: a.pool,
        beta: a.beta,
        seed,
        fix_hw,
        m_inner_fixed_hw: a.m_fixed,
        hw_score_mappings: a.hw_mappings,
        refit_steps: a.refit_steps,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> polaris_core::Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn gen_data(g: &Global, a: &GenData) -> Result<()> {
    let mut fidelities = a.fidelity.clone();
    fidelities.dedup();
    if a.output.is_some() && fidelities.len() > 1 {
        return Err(usage("--output takes a single --fidelity"));
    }
    let mut prov = Provenance::new(&g.out_dir, "gen-data", json!({}));
    let cm = cost_model(g, Some(&mut prov))?;
    let ws = workloads(g, Some(&mut prov))?;
    let layers = unique_layers(&ws);
    let n = a.n as usize;
    let mut config = json!({
        "n": n,
        "seed": g.seed,
        "workloads": ws.iter().map(|w| &w.name).collect::<Vec<_>>(),
        "cost_model_hash": cm.hash(),
    });
    for f in fidelities {
        let (oracle, path): (Box<dyn Oracle>, PathBuf) = match f {
            FidelityArg::Low => (Box::new(LowOracle { model: cm.clone() }), layout(g).low_data()),
            FidelityArg::High => (Box::new(HighOracle { model: cm.clone() }), layout(g).high_data()),
        };
        let path = a.output.as_ref().map(|p| resolve(g, p)).unwrap_or(path);
        log::info!("sampling {n} designs with the {} oracle", oracle.id());
        let ds = collect_dataset_with(oracle.as_ref(), &layers, n, g.seed, cm.hash())?;
        config["fidelity"] = json!(oracle.fidelity());
        let mut p = Provenance::new(&g.out_dir, "gen-data", config.clone());
        p.inputs_from(&prov);
        p.write(&path, &ds.to_bytes())?;
        p.commit()?;
        println!("{}: {} samples, sha256 {}", path.display(), ds.len(), ds.content_hash());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

fn cmd_train_low(g: &Global, a: &TrainLow) -> Result<()> {
    if a.epochs == 0 || a.batch_size == 0 || !(a.lr > 0.0) || !(a.lambda_pred >= 0.0) {
        return Err(usage("--epochs and --batch-size must be positive, --lr > 0, --lambda-pred >= 0"));
    }
    let cfg = TrainLowConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        weights: LossWeights {
            pred: a.lambda_pred,
            ..LossWeights::default()
        },
        target: target(g),
        seed: g.seed,
    };
    let mut prov = Provenance::new(&g.out_dir, "train-low", serde_json::to_value(cfg)?);
    let data = a.data.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).low_data());
    let ds = load_dataset(&data, Fidelity::Low, &mut prov)?;
    let out = a.output.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).low_model());

    let (model, hist) = train_low(&ds, &cfg)?;
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    model.save(&out)?;
    prov.output(&out);
    prov.output(&sidecar_path(&out));
    let hist_path = g.out_dir.join("train").join(format!("{}_loss.csv", stem(&out)));
    prov.write(&hist_path, &low_history_csv(&hist))?;
    prov.commit()?;

    let rho = evaluate_low_model(&model, &ds.test())?;
    println!("{}: trained {} epochs, test rho {rho:.4}", out.display(), cfg.epochs);
    Ok(())
}

fn cmd_train_high(g: &Global, a: &TrainHigh) -> Result<()> {
    if a.epochs == 0 || !(a.lr_gp > 0.0) || !(a.lr_encoder >= 0.0) {
        return Err(usage("--epochs must be positive, --lr-gp > 0, --lr-encoder >= 0"));
    }
    let dkl = DklConfig {
        lr_gp: a.lr_gp,
        lr_encoder: a.lr_encoder,
        ..DklConfig::default()
    };
    let config = json!({
        "epochs": a.epochs,
        "eval_interval": a.eval_interval,
        "dkl": dkl,
        "from_scratch": a.from_scratch,
        "target": target(g),
        "seed": g.seed,
    });
    let mut prov = Provenance::new(&g.out_dir, "train-high", config);
    let data = a.data.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).high_data());

    // Resolve the transfer source before touching data so a missing
    // checkpoint is reported as the usage error it is.
    let low = if a.from_scratch {
        None
    } else {
        let path = a.low.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).low_model());
        if !path.exists() {
            return Err(usage(format!(
                "train-high transfers from a low-fidelity checkpoint and {} does not exist; \
                 run `train-low`, pass --low <checkpoint>, or train with --from-scratch",
                path.display()
            )));
        }
        Some(load_low(g, a.low.as_ref(), &mut prov)?)
    };
    let ds = load_dataset(&data, Fidelity::High, &mut prov)?;
    let (train, test) = (ds.train(), ds.test());

    let (model, hist) = match &low {
        Some(low) => train_starlight(&low.export_encoder()?, &train, &test, target(g), a.epochs, dkl, a.eval_interval)?,
        None => {
            let mut m = StarlightModel::init_scratch(&train, target(g), dkl, g.seed)?;
            let hist = m.train_joint(a.epochs, dkl.lr_encoder, dkl.lr_gp, Some(&test), a.eval_interval)?;
            (m, hist)
        }
    };
    let default_out = if a.from_scratch {
        g.out_dir.join("models").join("dkl-scratch.json")
    } else {
        layout(g).starlight()
    };
    let out = a.output.as_ref().map(|p| resolve(g, p)).unwrap_or(default_out);
    prov.write(&out, &model.to_bytes()?)?;
    let name = stem(&out);
    prov.write(&g.out_dir.join("train").join(format!("{name}_rho.csv")), &high_history_csv(&hist))?;
    let records = model.evaluate(&test, g.seed, &ds.content_hash(), a.epochs)?;
    prov.write(
        &g.out_dir.join("train").join(format!("{name}_metrics.csv")),
        &csv_bytes(|b| write_metrics_csv(&records, b))?,
    )?;
    prov.commit()?;

    let rho = model.spearman(&test)?;
    println!("{}: trained {} epochs, test rho {rho:.4}", out.display(), a.epochs);
    Ok(())
}

// ---------------------------------------------------------------------------
// runs
// ---------------------------------------------------------------------------

/// Runs `f` with an observer that streams every history line to `path`.
fn streamed(
    path: &Path,
    f: impl FnOnce(&mut dyn FnMut(&HistoryLine) -> polaris_core::Result<()>) -> polaris_core::Result<RunHistory>,
) -> Result<RunHistory> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = HistoryWriter::new(BufWriter::new(file));
    let h = f(&mut |line| w.write(line))?;
    Ok(h)
}

fn summarize_into(g: &Global, method: &str, histories: &[RunHistory], prov: &mut Provenance) -> Result<()> {
    let summaries = summarize_all(histories)?;
    let l = layout(g);
    prov.write(&l.report(&format!("{method}-summary.csv")), &csv_bytes(|b| write_summary_csv(&summaries, b))?)?;
    prov.write(
        &l.report(&format!("{method}-convergence.csv")),
        &csv_bytes(|b| write_convergence_csv(&summaries, b))?,
    )?;
    for s in &summaries {
        println!(
            "{} {}: median EDP {:.4e} (min {:.4e}, max {:.4e}) over {} run(s)",
            method_label(&s.method),
            s.workload,
            s.median_edp,
            s.min_edp,
            s.max_edp,
            s.runs
        );
    }
    Ok(())
}

fn run_dse(g: &Global, a: &RunDse) -> Result<()> {
    let fix_hw = a.fix_hw.as_deref().map(parse_hw).transpose()?;
    let method = if fix_hw.is_some() { "polaris-sw" } else { "polaris" };
    let base = bo_config(&a.bo, g.seed, fix_hw)?;
    let mut prov = Provenance::new(&g.out_dir, "run-dse", serde_json::to_value(&base)?);
    let cm = cost_model(g, Some(&mut prov))?;
    let oracle = HighOracle { model: cm };
    let model = load_starlight(g, a.model.as_ref(), &mut prov)?;

    let run = |bo: &BoConfig, w: &Workload, oracle: &dyn Oracle, path: &Path| {
        let mut m = model.clone();
        streamed(path, |on_line| match bo.fix_hw {
            Some(_) => run_sw_dse(bo, w, &mut m, oracle, on_line),
            None => run_codesign(bo, w, &mut m, oracle, on_line),
        })
    };

    if let Some(resume) = &a.resume {
        let path = resolve(g, resume);
        prov.input(&path)?;
        let partial = RunHistory::load_partial(&path).with_context(|| format!("reading {}", path.display()))?;
        let workload = find_workload(g, &partial.header.workload)?;
        let bo = BoConfig {
            seed: partial.header.seed,
            ..base
        };
        check_resumable(&partial, method, &bo, &workload).map_err(|e| usage(e.to_string()))?;
        let done = partial.evaluations.len();
        let replay = ReplayOracle::new(&oracle, partial.evaluations);
        let tmp = path.with_extension("jsonl.tmp");
        let h = run(&bo, &workload, &replay, &tmp)?;
        if replay.replayed() < done {
            return Err(anyhow!("only {} of {done} recorded evaluations were replayed", replay.replayed()));
        }
        std::fs::rename(&tmp, &path)?;
        prov.output(&path);
        println!(
            "{}: resumed after {done} evaluations, {} total, final EDP {:.4e}",
            path.display(),
            h.evaluations.len(),
            h.final_edp().unwrap_or(f64::NAN)
        );
        prov.commit()?;
        return Ok(());
    }

    let ws = workloads(g, Some(&mut prov))?;
    let mut histories = Vec::new();
    for w in &ws {
        for k in 0..a.bo.trials {
            let bo = BoConfig {
                seed: g.seed.wrapping_add(k),
                ..base.clone()
            };
            let path = layout(g).run(method, &w.name, bo.seed);
            log::info!("{method} on {} seed {}", w.name, bo.seed);
            let h = run(&bo, w, &oracle, &path)?;
            prov.output(&path);
            histories.push(h);
        }
    }
    summarize_into(g, method, &histories, &mut prov)?;
    prov.commit()
}

fn find_workload(g: &Global, name: &str) -> Result<Workload> {
    workloads(g, None)?
        .into_iter()
        .find(|w| w.name == name)
        .ok_or_else(|| usage(format!("history is for workload {name:?}; pass it with --workload")))
}

fn run_baseline(g: &Global, a: &RunBaseline) -> Result<()> {
    let variant = match a.kind {
        BaselineArg::OfflineRandom | BaselineArg::VanillaBo => None,
        BaselineArg::DklScratch => Some(VariantArg::DklScratch),
        BaselineArg::TransferredNn => Some(VariantArg::TransferredNn),
        BaselineArg::FinetuneLow => Some(VariantArg::FinetuneLow),
    };
    if let Some(v) = variant {
        // The surrogate baselines are accuracy comparisons, not search runs.
        let ablate_args = Ablate {
            data: None,
            low: None,
            sizes: AblationConfig::default().sizes,
            seeds: 5,
            epochs: 1000,
            variants: vec![v],
            output: Some(PathBuf::from(format!("reports/ablation-{}.csv", variant_of(v).label()))),
        };
        return ablate(g, &ablate_args);
    }

    let fix_hw = a.fix_hw.as_deref().map(parse_hw).transpose()?;
    if fix_hw.is_some() && a.kind == BaselineArg::OfflineRandom {
        return Err(usage("--fix-hw applies to vanilla_bo only"));
    }
    let base = bo_config(&a.bo, g.seed, fix_hw)?;
    let off_base = OfflineRandomConfig {
        samples_per_layer: a.samples_per_layer,
        hw_groups: a.hw_groups,
        seed: g.seed,
    };
    if off_base.samples_per_layer == 0 || off_base.hw_groups == 0 {
        return Err(usage("--samples-per-layer and --hw-groups must be positive"));
    }
    let (method, config) = match a.kind {
        BaselineArg::OfflineRandom => ("offline_random", serde_json::to_value(&off_base)?),
        _ => ("vanilla_bo", serde_json::to_value(&base)?),
    };
    let mut prov = Provenance::new(&g.out_dir, "run-baseline", config);
    let cm = cost_model(g, Some(&mut prov))?;
    let oracle = HighOracle { model: cm };
    let model = match a.kind {
        BaselineArg::OfflineRandom => Some(load_starlight(g, a.model.as_ref(), &mut prov)?),
        _ => None,
    };
    let ws = workloads(g, Some(&mut prov))?;
    let mut histories = Vec::new();
    for w in &ws {
        for k in 0..a.bo.trials {
            let seed = g.seed.wrapping_add(k);
            let path = layout(g).run(method, &w.name, seed);
            log::info!("{method} on {} seed {seed}", w.name);
            let h = match &model {
                Some(m) => {
                    let cfg = OfflineRandomConfig { seed, ..off_base.clone() };
                    streamed(&path, |on_line| offline_random(m, w, &cfg, &oracle, on_line))?
                }
                None => {
                    let bo = BoConfig { seed, ..base.clone() };
                    streamed(&path, |on_line| vanilla_bo(&bo, w, target(g), &oracle, on_line))?
                }
            };
            prov.output(&path);
            histories.push(h);
        }
    }
    summarize_into(g, method, &histories, &mut prov)?;
    prov.commit()
}

fn variant_of(v: VariantArg) -> Variant {
    match v {
        VariantArg::Starlight => Variant::Starlight,
        VariantArg::DklScratch => Variant::DklScratch,
        VariantArg::TransferredNn => Variant::TransferredNn,
        VariantArg::FinetuneLow => Variant::FinetuneLow,
    }
}

fn ablate(g: &Global, a: &Ablate) -> Result<()> {
    if a.sizes.is_empty() || a.sizes.contains(&0) || a.seeds == 0 || a.epochs == 0 {
        return Err(usage("--sizes, --seeds and --epochs must be positive"));
    }
    let variants: Vec<Variant> = if a.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        a.variants.iter().map(|&v| variant_of(v)).collect()
    };
    let cfg = AblationConfig {
        sizes: a.sizes.clone(),
        seeds: (0..a.seeds).map(|k| g.seed.wrapping_add(k)).collect(),
        dkl_epochs: a.epochs,
        nn_epochs: a.epochs,
        finetune_epochs: a.epochs,
        target: target(g),
        variants,
        ..AblationConfig::default()
    };
    let mut prov = Provenance::new(&g.out_dir, "ablate", serde_json::to_value(&cfg)?);
    let low = load_low(g, a.low.as_ref(), &mut prov)?;
    let data = a.data.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).high_data());
    let ds = load_dataset(&data, Fidelity::High, &mut prov)?;
    let train = ds.train();
    if let Some(&big) = cfg.sizes.iter().find(|&&s| s > train.len()) {
        return Err(usage(format!(
            "training size {big} exceeds the {} training samples in {}",
            train.len(),
            data.display()
        )));
    }
    let rows = ablation_suite(&low, &train, &ds.test(), &cfg)?;
    let out = a.output.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| layout(g).report("ablation.csv"));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_ablation_csv(&out, &rows)?;
    prov.output(&out);
    prov.commit()?;
    for r in &rows {
        println!(
            "{:<24} n={:<5} rho {:.4} ± {:.4}",
            r.variant.label(),
            r.train_size,
            r.mean_rho,
            r.std_rho
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn history_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            history_files(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

fn report(g: &Global, a: &Report) -> Result<()> {
    let dir = a.runs.as_ref().map(|p| resolve(g, p)).unwrap_or_else(|| g.out_dir.join("runs"));
    if !dir.is_dir() {
        return Err(usage(format!("no run directory at {}; run `run-dse` or pass --runs", dir.display())));
    }
    let mut files = Vec::new();
    history_files(&dir, &mut files)?;
    files.sort();
    let mut prov = Provenance::new(&g.out_dir, "report", json!({ "compare": a.compare }));
    let mut histories = Vec::new();
    for f in &files {
        match RunHistory::load(f) {
            Ok(h) => {
                prov.input(f)?;
                histories.push(h);
            }
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if histories.is_empty() {
        return Err(usage(format!("no complete run histories under {}", dir.display())));
    }
    histories.sort_by(|x, y| {
        (rank(&x.header.method), &x.header.workload, x.header.seed).cmp(&(
            rank(&y.header.method),
            &y.header.workload,
            y.header.seed,
        ))
    });
    let summaries = summarize_all(&histories)?;
    let methods: Vec<String> = if a.compare.is_empty() {
        let mut m: Vec<String> = Vec::new();
        for s in &summaries {
            if !m.contains(&s.method) {
                m.push(s.method.clone());
            }
        }
        m
    } else {
        for m in &a.compare {
            if !summaries.iter().any(|s| &s.method == m) {
                return Err(usage(format!("--compare: no runs of method {m:?} under {}", dir.display())));
            }
        }
        a.compare.clone()
    };
    let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
    let l = layout(g);
    prov.write(&l.report("summary.csv"), &csv_bytes(|b| write_summary_csv(&summaries, b))?)?;
    prov.write(&l.report("convergence.csv"), &csv_bytes(|b| write_convergence_csv(&summaries, b))?)?;
    prov.write(&l.report("comparison.csv"), &csv_bytes(|b| write_comparison_csv(&summaries, &methods, b))?)?;
    prov.commit()?;
    print_comparison(&summaries, &methods);
    Ok(())
}

fn rank(method: &str) -> usize {
    METHODS.iter().position(|m| *m == method).unwrap_or(METHODS.len())
}

fn print_comparison(summaries: &[RunSummary], methods: &[&str]) {
    let table = polaris_core::metrics::comparison_table(summaries, methods);
    print!("{:<16}", "workload");
    for m in methods {
        print!(" {:>28}", method_label(m));
    }
    println!();
    for (w, row) in table {
        print!("{w:<16}");
        for (i, v) in row.iter().enumerate() {
            let cell = match (v, row[0]) {
                (Some(x), Some(base)) if i > 0 && base > 0.0 => format!("{x:.4e} ({:.2}x)", x / base),
                (Some(x), _) => format!("{x:.4e}"),
                (None, _) => "-".into(),
            };
            print!(" {cell:>28}");
        }
        println!();
    }
}

// ---------------------------------------------------------------------------
// make-paper-figures
// ---------------------------------------------------------------------------

fn make_paper_figures(g: &Global, a: &MakePaperFigures) -> Result<()> {
    let mut cfg = PipelineConfig::preset(&a.preset, g.seed).map_err(|e| usage(e.to_string()))?;
    cfg.target = target(g);
    cfg.low.target = cfg.target;
    if let Some(name) = &g.workload {
        if bundled_workload(name).is_none() {
            return Err(usage("make-paper-figures runs bundled workloads only; pass a bundled name to --workload"));
        }
        cfg.workloads = vec![name.clone()];
    }
    let cm = cost_model(g, None)?;
    let report = run_pipeline(&cfg, &cm, &g.out_dir)?;
    println!("starlight-low test rho {:.4}", report.low_rho);
    println!("starlight test rho     {:.4}", report.starlight_rho);
    println!("oracle KL              {:.4} (lowest decile {:.4})", report.kl.0, report.kl.1);
    let methods: Vec<&str> = METHODS
        .iter()
        .copied()
        .filter(|m| report.summaries.iter().any(|s| s.method == *m))
        .collect();
    print_comparison(&report.summaries, &methods);
    for r in &report.ablation {
        println!("{:<24} n={:<5} rho {:.4} ± {:.4}", r.variant.label(), r.train_size, r.mean_rho, r.std_rho);
    }
    println!("{} files under {}", report.files.len(), g.out_dir.display());
    Ok(())
}
