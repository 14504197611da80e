//! Two-level Bayesian optimization: an outer loop over hardware
//! configurations and an inner, layerwise loop over software mappings, both
//! driven by UCB on a surrogate and closed by high-fidelity evaluations.

mod history;

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use history::{EvalRecord, HistoryLine, HistoryWriter, HwTrial, LayerResult, RunHeader, RunHistory};

use crate::oracle::{CostBreakdown, Fidelity, Oracle};
use crate::sampling::lattice::{sw_from_unit, unroll_factor, SW_LATTICE_DIM};
use crate::sampling::sobol::Sobol;
use crate::sampling::{EdpSample, SOBOL_OFFSET_RANGE};
use crate::starlight::StarlightModel;
use crate::workload::{
    encode_unchecked, validate_fit, validate_mapping, DesignPoint, Dim, FeatureVector, HwConfig, LayerShape,
    SwMapping, Workload, HW_SPACE_SIZE,
};
use crate::{Error, Result};

/// HW configurations scored per prediction batch in [`select_hw_candidate`].
const HW_CHUNK: usize = 256;

/// Anything that predicts standardized log-cost with uncertainty and can
/// absorb new high-fidelity observations.
pub trait Surrogate {
    fn name(&self) -> &str;

    /// `(mean, std)` per query, in the surrogate's standardized space.
    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>>;

    fn observe(&mut self, samples: &[EdpSample], refit_steps: usize) -> Result<()>;

    /// Content hash of the starting state, recorded in run headers.
    fn state_hash(&self) -> String {
        String::new()
    }
}

impl Surrogate for StarlightModel {
    fn name(&self) -> &str {
        "starlight"
    }

    fn predict(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
        StarlightModel::predict(self, features)
    }

    fn observe(&mut self, samples: &[EdpSample], refit_steps: usize) -> Result<()> {
        self.update(samples, refit_steps).map(|_| ())
    }

    fn state_hash(&self) -> String {
        self.hash()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    pub n_outer: usize,
    pub m_inner: usize,
    pub sw_pool_size: usize,
    pub beta: f64,
    pub seed: u64,
    pub fix_hw: Option<HwConfig>,
    pub m_inner_fixed_hw: usize,
    /// Sobol mappings per layer paired with each HW config when scoring it.
    pub hw_score_mappings: usize,
    /// Joint surrogate steps after every observation.
    pub refit_steps: usize,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            n_outer: 8,
            m_inner: 6,
            sw_pool_size: 10_000,
            beta: 2.0,
            seed: 0,
            fix_hw: None,
            m_inner_fixed_hw: 20,
            hw_score_mappings: 64,
            refit_steps: 10,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_outer", self.n_outer),
            ("m_inner", self.m_inner),
            ("sw_pool_size", self.sw_pool_size),
            ("m_inner_fixed_hw", self.m_inner_fixed_hw),
            ("hw_score_mappings", self.hw_score_mappings),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::OutOfRange(format!("{name} must be at least 1")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::OutOfRange(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.n_outer > HW_SPACE_SIZE {
            return Err(Error::OutOfRange(format!("n_outer exceeds the {HW_SPACE_SIZE} HW configs")));
        }
        if let Some(hw) = self.fix_hw {
            if !hw.is_valid() {
                return Err(Error::InvalidDesign(format!("fixed hw {hw:?} is outside the design space")));
            }
        }
        Ok(())
    }

    /// High-fidelity evaluations a run on `n_layers` layers will make.
    pub fn budget(&self, n_layers: usize) -> usize {
        match self.fix_hw {
            Some(_) => self.m_inner_fixed_hw * n_layers,
            None => self.n_outer * self.m_inner * n_layers,
        }
    }
}

pub fn ucb_score(mean: f64, std: f64, beta: f64) -> f64 {
    -mean + beta * std
}

/// Index of the largest value; ties go to the lowest index, NaN never wins.
fn argmax(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// Mapping constraints every evaluated design must meet: exact-divisor
/// tiling, a footprint that fits the buffers and a utilization-maximizing
/// unroll of C and K onto the array.
pub fn satisfies_constraints(dp: &DesignPoint) -> bool {
    validate_mapping(&dp.sw, &dp.layer)
        && validate_fit(dp)
        && [Dim::C, Dim::K]
            .iter()
            .all(|&d| dp.sw.factor(0, d) == unroll_factor(dp.layer.dim(d), dp.hw.array_dim))
}

fn sobol_from(rng: &mut ChaCha8Rng) -> Sobol {
    Sobol::starting_at(SW_LATTICE_DIM, rng.random_range(0..SOBOL_OFFSET_RANGE)).expect("sw lattice dimension")
}

/// Up to `count` distinct feasible mappings of `layer` on `hw`, Sobol-drawn
/// from the constrained lattice. Gives up after `4 * count + 1000` draws.
pub fn generate_sw_candidates(hw: &HwConfig, layer: &LayerShape, count: usize, rng: &mut ChaCha8Rng) -> Vec<SwMapping> {
    let mut sobol = sobol_from(rng);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut u = vec![0.0; SW_LATTICE_DIM];
    for _ in 0..4 * count + 1000 {
        if out.len() == count {
            break;
        }
        sobol.next_into(&mut u);
        let sw = sw_from_unit(&u, layer, Some(hw.array_dim)).canonical();
        if !seen.insert(sw) {
            continue;
        }
        if validate_fit(&DesignPoint { hw: *hw, sw, layer: *layer }) {
            out.push(sw);
        }
    }
    if out.len() < count {
        log::warn!(
            "only {} of {count} feasible mappings found for layer {:?} on hw {:?}",
            out.len(),
            layer.dims(),
            hw
        );
    }
    out
}

/// Scores every HW configuration not in `exclude` by pairing it with
/// `mappings` Sobol mappings per layer: the best UCB per layer, summed over
/// layers. Returns the maximizer and its score.
pub fn select_hw_candidate(
    model: &dyn Surrogate,
    layers: &[LayerShape],
    mappings: usize,
    beta: f64,
    rng: &mut ChaCha8Rng,
    exclude: &HashSet<usize>,
) -> Result<(HwConfig, f64)> {
    let candidates: Vec<usize> = (0..HW_SPACE_SIZE).filter(|i| !exclude.contains(i)).collect();
    if candidates.is_empty() {
        return Err(Error::Empty("hardware space exhausted"));
    }
    let mut sobol = sobol_from(rng);
    let units: Vec<Vec<f64>> = (0..mappings).map(|_| sobol.next_point()).collect();

    // Mappings depend on the array side only; dedupe once per side and layer.
    let mut per_side: std::collections::HashMap<u32, Vec<Vec<SwMapping>>> = Default::default();
    let mut scores = Vec::with_capacity(candidates.len());
    for chunk in candidates.chunks(HW_CHUNK) {
        let mut feats = Vec::new();
        let mut owner = Vec::new();
        for (ci, &idx) in chunk.iter().enumerate() {
            let hw = HwConfig::from_space_index(idx);
            let maps = per_side.entry(hw.array_dim).or_insert_with(|| {
                layers
                    .iter()
                    .map(|l| {
                        let mut seen = HashSet::new();
                        units
                            .iter()
                            .map(|u| sw_from_unit(u, l, Some(hw.array_dim)).canonical())
                            .filter(|sw| seen.insert(*sw))
                            .collect()
                    })
                    .collect()
            });
            for (li, layer) in layers.iter().enumerate() {
                for sw in &maps[li] {
                    let dp = DesignPoint { hw, sw: *sw, layer: *layer };
                    if validate_fit(&dp) {
                        feats.push(encode_unchecked(&dp));
                        owner.push((ci, li));
                    }
                }
            }
        }
        let preds = model.predict(&feats)?;
        let mut best = vec![vec![f64::NEG_INFINITY; layers.len()]; chunk.len()];
        for (&(ci, li), &(m, s)) in owner.iter().zip(&preds) {
            let a = ucb_score(m, s, beta);
            if a > best[ci][li] {
                best[ci][li] = a;
            }
        }
        scores.extend(best.into_iter().map(|per_layer| per_layer.into_iter().sum::<f64>()));
    }
    match argmax(scores.iter().copied()) {
        Some((i, s)) if s > f64::NEG_INFINITY => Ok((HwConfig::from_space_index(candidates[i]), s)),
        _ => {
            log::warn!("no remaining HW config has sampled feasible mappings for every layer; taking the first");
            Ok((HwConfig::from_space_index(candidates[0]), f64::NEG_INFINITY))
        }
    }
}

/// One step of the inner loop as reported to observers.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub step: usize,
    pub sw: SwMapping,
    pub acquisition: Option<f64>,
    pub cost: CostBreakdown,
}

/// Parameters of one layerwise software search.
#[derive(Clone, Copy, Debug)]
pub struct LayerSearch {
    pub hw: HwConfig,
    pub layer: LayerShape,
    pub m: usize,
    pub pool: usize,
    pub beta: f64,
    pub refit_steps: usize,
    /// Leading steps that pick a pool member uniformly instead of by UCB.
    pub random_steps: usize,
}

/// Runs `search.m` acquisition steps for one layer and returns the
/// minimum-EDP evaluated mapping. `on_eval` sees every evaluation in order.
pub fn optimize_layer(
    model: &mut dyn Surrogate,
    oracle: &dyn Oracle,
    search: &LayerSearch,
    rng: &mut ChaCha8Rng,
    on_eval: &mut dyn FnMut(&Evaluated) -> Result<()>,
) -> Result<(SwMapping, CostBreakdown)> {
    if oracle.fidelity() != Fidelity::High {
        return Err(Error::State("the optimizer evaluates with the high-fidelity oracle".into()));
    }
    let mut evaluated: HashSet<SwMapping> = HashSet::new();
    let mut best: Option<(SwMapping, CostBreakdown)> = None;
    for step in 0..search.m {
        let pool = generate_sw_candidates(&search.hw, &search.layer, search.pool, rng);
        if pool.is_empty() {
            return Err(Error::InvalidDesign(format!(
                "no feasible mapping for layer {:?} on hw {:?}",
                search.layer.dims(),
                search.hw
            )));
        }
        let fresh: Vec<SwMapping> = pool.iter().copied().filter(|sw| !evaluated.contains(sw)).collect();
        let choices = if fresh.is_empty() { pool } else { fresh };
        let (sw, acquisition) = if step < search.random_steps {
            (choices[rng.random_range(0..choices.len())], None)
        } else {
            let feats: Vec<FeatureVector> = choices
                .iter()
                .map(|sw| {
                    encode_unchecked(&DesignPoint {
                        hw: search.hw,
                        sw: *sw,
                        layer: search.layer,
                    })
                })
                .collect();
            let preds = model.predict(&feats)?;
            let (i, a) = argmax(preds.iter().map(|&(m, s)| ucb_score(m, s, search.beta)))
                .ok_or(Error::NonFinite("acquisition values"))?;
            (choices[i], Some(a))
        };
        let dp = DesignPoint {
            hw: search.hw,
            sw,
            layer: search.layer,
        };
        let cost = oracle.evaluate(&dp)?;
        evaluated.insert(sw);
        on_eval(&Evaluated {
            step,
            sw,
            acquisition,
            cost,
        })?;
        model.observe(&[EdpSample::new(dp, &cost, Fidelity::High)], search.refit_steps)?;
        if best.as_ref().is_none_or(|(_, b)| cost.edp < b.edp) {
            best = Some((sw, cost));
        }
    }
    best.ok_or(Error::Empty("layer search budget"))
}

/// How the shared loop picks hardware and seeds each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopStyle {
    /// First HW config drawn at random (feasible for every layer) rather than by acquisition.
    pub random_first_hw: bool,
    /// Random evaluations per layer before acquisition takes over.
    pub random_per_layer: usize,
}

impl LoopStyle {
    pub const POLARIS: LoopStyle = LoopStyle {
        random_first_hw: false,
        random_per_layer: 0,
    };
}

/// Serves recorded results for the first evaluations of a resumed run,
/// checking that the design matches, then defers to the live oracle.
pub struct ReplayOracle<'a> {
    inner: &'a dyn Oracle,
    records: Vec<EvalRecord>,
    cursor: AtomicUsize,
}

impl<'a> ReplayOracle<'a> {
    pub fn new(inner: &'a dyn Oracle, records: Vec<EvalRecord>) -> Self {
        ReplayOracle {
            inner,
            records,
            cursor: AtomicUsize::new(0),
        }
    }

    pub fn replayed(&self) -> usize {
        self.cursor.load(Ordering::SeqCst).min(self.records.len())
    }
}

impl Oracle for ReplayOracle<'_> {
    fn fidelity(&self) -> Fidelity {
        self.inner.fidelity()
    }

    fn evaluate(&self, dp: &DesignPoint) -> Result<CostBreakdown> {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        match self.records.get(i) {
            Some(r) if r.hw == dp.hw && r.sw == dp.sw => Ok(r.cost()),
            Some(r) => Err(Error::State(format!(
                "resume diverged at evaluation {i}: recorded hw {:?}, proposed hw {:?}",
                r.hw, dp.hw
            ))),
            None => self.inner.evaluate(dp),
        }
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}

pub(crate) fn random_feasible_hw(layers: &[LayerShape], rng: &mut ChaCha8Rng, exclude: &HashSet<usize>) -> Result<HwConfig> {
    for _ in 0..10_000 {
        let idx = rng.random_range(0..HW_SPACE_SIZE);
        if exclude.contains(&idx) {
            continue;
        }
        let hw = HwConfig::from_space_index(idx);
        if layers.iter().all(|l| !generate_sw_candidates(&hw, l, 1, rng).is_empty()) {
            return Ok(hw);
        }
    }
    Err(Error::Empty("feasible hardware configurations"))
}

/// The shared optimization loop behind co-design, software-only DSE and the
/// online baselines. Every history line is passed to `on_line` as soon as it
/// is final.
pub fn run_loop(
    method: &str,
    config: &BoConfig,
    workload: &Workload,
    model: &mut dyn Surrogate,
    oracle: &dyn Oracle,
    style: LoopStyle,
    on_line: &mut dyn FnMut(&HistoryLine) -> Result<()>,
) -> Result<RunHistory> {
    config.validate()?;
    workload.validate()?;
    let layers = &workload.layers;
    let mut header = RunHeader::new(
        method,
        &workload.name,
        config.seed,
        layers.len(),
        serde_json::to_value(config)?,
    );
    header.surrogate_hash = model.state_hash();
    header.oracle = oracle.id();
    let mut history = RunHistory::new(header);
    on_line(&HistoryLine::Header(history.header.clone()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut used: HashSet<usize> = HashSet::new();
    let mut layer_evals = vec![0usize; layers.len()];
    let (iterations, m) = match config.fix_hw {
        Some(hw) => {
            let infeasible: Vec<usize> = (0..layers.len())
                .filter(|&i| generate_sw_candidates(&hw, &layers[i], 1, &mut rng).is_empty())
                .collect();
            if !infeasible.is_empty() {
                return Err(Error::InvalidDesign(format!(
                    "fixed hw {hw:?} has no feasible mapping for layer(s) {infeasible:?}"
                )));
            }
            (1, config.m_inner_fixed_hw)
        }
        None => (config.n_outer, config.m_inner),
    };

    for iteration in 0..iterations {
        let (hw, hw_acq) = if let Some(hw) = config.fix_hw {
            (hw, None)
        } else if iteration == 0 && style.random_first_hw {
            (random_feasible_hw(layers, &mut rng, &used)?, None)
        } else {
            let (hw, a) = select_hw_candidate(&*model, layers, config.hw_score_mappings, config.beta, &mut rng, &used)
                .map_err(|e| Error::context(format!("iteration {iteration}"), e))?;
            (hw, Some(a))
        };
        used.insert(hw.space_index().expect("hw from the design space"));
        log::info!("{method}: iteration {iteration}/{iterations} hw {hw:?}");

        let mut layer_best = Vec::with_capacity(layers.len());
        for (li, layer) in layers.iter().enumerate() {
            let search = LayerSearch {
                hw,
                layer: *layer,
                m,
                pool: config.sw_pool_size,
                beta: config.beta,
                refit_steps: config.refit_steps,
                random_steps: style.random_per_layer.saturating_sub(layer_evals[li]),
            };
            let last_layer = li + 1 == layers.len();
            let mut pending: Vec<EvalRecord> = Vec::new();
            let mut running_best: Option<(SwMapping, CostBreakdown)> = None;
            let mut emit = |e: &Evaluated| -> Result<()> {
                if running_best.as_ref().is_none_or(|(_, b)| e.cost.edp < b.edp) {
                    running_best = Some((e.sw, e.cost));
                }
                let mut rec = EvalRecord {
                    index: history.evaluations.len(),
                    iteration,
                    layer: li,
                    step: e.step,
                    hw,
                    sw: e.sw,
                    acquisition: e.acquisition,
                    energy_pj: e.cost.energy_pj,
                    delay_cycles: e.cost.delay_cycles,
                    edp: e.cost.edp,
                    best_total_edp: history.final_edp(),
                };
                if last_layer && e.step + 1 == m {
                    // this evaluation completes the trial
                    let (sw, c) = running_best.expect("at least one evaluation");
                    let mut results = layer_best.clone();
                    results.push(layer_result(li, sw, &c));
                    let trial = trial_of(iteration, hw, hw_acq, results);
                    rec.best_total_edp = Some(history.best_with(&trial));
                    on_line(&HistoryLine::Eval(rec.clone()))?;
                    on_line(&HistoryLine::Trial(trial))?;
                } else {
                    on_line(&HistoryLine::Eval(rec.clone()))?;
                }
                history.evaluations.push(rec);
                pending.push(history.evaluations.last().cloned().expect("just pushed"));
                Ok(())
            };
            let (sw, cost) = optimize_layer(model, oracle, &search, &mut rng, &mut emit)
                .map_err(|e| Error::context(format!("iteration {iteration}, layer {li}"), e))?;
            layer_evals[li] += pending.len();
            layer_best.push(layer_result(li, sw, &cost));
        }
        history.push_trial(trial_of(iteration, hw, hw_acq, layer_best));
    }
    let incumbent = history.incumbent.clone().ok_or(Error::Empty("optimization budget"))?;
    on_line(&HistoryLine::Incumbent(incumbent))?;
    Ok(history)
}

fn layer_result(layer: usize, sw: SwMapping, c: &CostBreakdown) -> LayerResult {
    LayerResult {
        layer,
        sw,
        energy_pj: c.energy_pj,
        delay_cycles: c.delay_cycles,
        edp: c.edp,
    }
}

fn trial_of(iteration: usize, hw: HwConfig, acquisition: Option<f64>, layers: Vec<LayerResult>) -> HwTrial {
    HwTrial {
        iteration,
        hw,
        acquisition,
        total_edp: layers.iter().map(|l| l.edp).sum(),
        layers,
    }
}

/// Full HW/SW co-design with a pre-trained Starlight surrogate. The model is
/// updated in place with every evaluation.
pub fn run_codesign(
    config: &BoConfig,
    workload: &Workload,
    model: &mut StarlightModel,
    oracle: &dyn Oracle,
    on_line: &mut dyn FnMut(&HistoryLine) -> Result<()>,
) -> Result<RunHistory> {
    if config.fix_hw.is_some() {
        return Err(Error::State("co-design takes no fixed hw; use run_sw_dse".into()));
    }
    run_loop("polaris", config, workload, model, oracle, LoopStyle::POLARIS, on_line)
}

/// Layerwise software optimization on the fixed HW in `config.fix_hw`.
pub fn run_sw_dse(
    config: &BoConfig,
    workload: &Workload,
    model: &mut StarlightModel,
    oracle: &dyn Oracle,
    on_line: &mut dyn FnMut(&HistoryLine) -> Result<()>,
) -> Result<RunHistory> {
    if config.fix_hw.is_none() {
        return Err(Error::State("software DSE needs a fixed hw".into()));
    }
    run_loop("polaris-sw", config, workload, model, oracle, LoopStyle::POLARIS, on_line)
}

/// Checks a partial history against the run about to resume it.
pub fn check_resumable(partial: &RunHistory, method: &str, config: &BoConfig, workload: &Workload) -> Result<()> {
    let h = &partial.header;
    let want = crate::hash::json_hash(&serde_json::to_value(config)?);
    if h.method != method || h.workload != workload.name || h.seed != config.seed || h.config_hash != want {
        return Err(Error::State(format!(
            "history was written by {} on {} (seed {}, config {}), not this run",
            h.method,
            h.workload,
            h.seed,
            crate::hash::short(&h.config_hash)
        )));
    }
    Ok(())
}

/// A no-op line observer.
pub fn ignore_lines(_: &HistoryLine) -> Result<()> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::HighOracle;
    use crate::workload::{micro_hw, micro_layer};

    /// Predicts a fixed function of the features; observation is a no-op.
    struct FixedSurrogate<F: Fn(&FeatureVector) -> (f64, f64)> {
        f: F,
        observed: usize,
    }

    impl<F: Fn(&FeatureVector) -> (f64, f64)> Surrogate for FixedSurrogate<F> {
        fn name(&self) -> &str {
            "fixed"
        }
        fn predict(&self, features: &[FeatureVector]) -> Result<Vec<(f64, f64)>> {
            Ok(features.iter().map(&self.f).collect())
        }
        fn observe(&mut self, samples: &[EdpSample], _: usize) -> Result<()> {
            self.observed += samples.len();
            Ok(())
        }
    }

    fn flat() -> FixedSurrogate<impl Fn(&FeatureVector) -> (f64, f64)> {
        FixedSurrogate {
            f: |_: &FeatureVector| (0.0, 1.0),
            observed: 0,
        }
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ucb_arithmetic() {
        assert_eq!(ucb_score(1.5, 0.5, 2.0), -0.5);
        assert_eq!(ucb_score(-1.0, 3.0, 0.0), 1.0);
        assert_eq!(ucb_score(0.25, 0.25, 1.0), 0.0);
        // equal means: larger std wins
        let a = [ucb_score(0.0, 0.1, 2.0), ucb_score(0.0, 0.3, 2.0)];
        assert_eq!(argmax(a).unwrap().0, 1);
        // beta = 0 picks the smallest mean
        let b = [ucb_score(0.3, 9.0, 0.0), ucb_score(-0.2, 0.0, 0.0), ucb_score(0.1, 1.0, 0.0)];
        assert_eq!(argmax(b).unwrap().0, 1);
    }

    #[test]
    fn argmax_breaks_ties_low_and_skips_nan() {
        assert_eq!(argmax([1.0, 3.0, 3.0]), Some((1, 3.0)));
        assert_eq!(argmax([f64::NAN, 0.0]), Some((1, 0.0)));
        assert_eq!(argmax(Vec::<f64>::new()), None);
    }

    #[test]
    fn candidates_respect_constraints() {
        let layer = LayerShape::new([1, 64, 64, 14, 14, 3, 3], 1, 1).unwrap();
        let hw = HwConfig::new(16, 64, 64).unwrap();
        let c = generate_sw_candidates(&hw, &layer, 300, &mut rng(1));
        assert!(!c.is_empty());
        for sw in &c {
            let dp = DesignPoint { hw, sw: *sw, layer };
            assert!(satisfies_constraints(&dp));
            assert_eq!(sw.factor(0, Dim::C), 16);
            assert_eq!(sw.factor(0, Dim::K), 16);
        }
        let unique: HashSet<_> = c.iter().collect();
        assert_eq!(unique.len(), c.len());
    }

    #[test]
    fn candidate_pool_exhausts() {
        let layer = micro_layer();
        let hw = HwConfig::new(32, 256, 256).unwrap();
        let c = generate_sw_candidates(&hw, &layer, 10_000, &mut rng(2));
        assert!(c.len() < 500, "{}", c.len());
        let again = generate_sw_candidates(&hw, &layer, 10_000, &mut rng(3));
        assert_eq!(c.len(), again.len(), "small lattices are fully enumerated");
    }

    #[test]
    fn forced_hw_choice() {
        let keep = HwConfig::new(20, 128, 64).unwrap();
        let k = keep.space_index().unwrap();
        let exclude: HashSet<usize> = (0..HW_SPACE_SIZE).filter(|&i| i != k).collect();
        let (hw, _) = select_hw_candidate(&flat(), &[micro_layer()], 4, 2.0, &mut rng(0), &exclude).unwrap();
        assert_eq!(hw, keep);
        let all: HashSet<usize> = (0..HW_SPACE_SIZE).collect();
        assert!(select_hw_candidate(&flat(), &[micro_layer()], 4, 2.0, &mut rng(0), &all).is_err());
    }

    #[test]
    fn hw_selection_follows_the_surrogate() {
        // lower mean for larger arrays and a mild preference for small buffers
        let s = FixedSurrogate {
            f: |f: &FeatureVector| (-f.0[0] + 0.1 * (f.0[1] + f.0[2]), 0.1),
            observed: 0,
        };
        let layers = [micro_layer(), LayerShape::new([1, 64, 32, 8, 8, 3, 3], 1, 1).unwrap()];
        let a = select_hw_candidate(&s, &layers, 8, 2.0, &mut rng(5), &HashSet::new()).unwrap();
        let b = select_hw_candidate(&s, &layers, 8, 2.0, &mut rng(5), &HashSet::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.array_dim, 32);
    }

    #[test]
    fn single_step_layer_search() {
        let mut s = flat();
        let oracle = HighOracle::default();
        let search = LayerSearch {
            hw: micro_hw(),
            layer: micro_layer(),
            m: 1,
            pool: 1,
            beta: 2.0,
            refit_steps: 0,
            random_steps: 0,
        };
        let mut seen = Vec::new();
        let (sw, cost) = optimize_layer(&mut s, &oracle, &search, &mut rng(0), &mut |e| {
            seen.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        assert_eq!(seen[0].sw, sw);
        assert_eq!(seen[0].cost, cost);
        assert_eq!(s.observed, 1);
    }

    #[test]
    fn random_steps_have_no_acquisition() {
        let mut s = flat();
        let search = LayerSearch {
            hw: micro_hw(),
            layer: micro_layer(),
            m: 5,
            pool: 50,
            beta: 2.0,
            refit_steps: 0,
            random_steps: 3,
        };
        let mut acq = Vec::new();
        optimize_layer(&mut s, &HighOracle::default(), &search, &mut rng(0), &mut |e| {
            acq.push(e.acquisition.is_some());
            Ok(())
        })
        .unwrap();
        assert_eq!(acq, [false, false, false, true, true]);
    }

    #[test]
    fn loop_budget_and_incumbent() {
        let workload = Workload {
            name: "pair".into(),
            layers: vec![micro_layer(), LayerShape::new([1, 16, 16, 8, 8, 3, 3], 1, 1).unwrap()],
        };
        let cfg = BoConfig {
            n_outer: 3,
            m_inner: 2,
            sw_pool_size: 40,
            hw_score_mappings: 2,
            refit_steps: 0,
            seed: 9,
            ..BoConfig::default()
        };
        let mut lines = Vec::new();
        let h = run_loop(
            "test",
            &cfg,
            &workload,
            &mut flat(),
            &HighOracle::default(),
            LoopStyle::POLARIS,
            &mut |l| {
                lines.push(l.clone());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(h.evaluations.len(), cfg.budget(2));
        assert_eq!(h.trials.len(), 3);
        let hws: HashSet<_> = h.trials.iter().map(|t| t.hw).collect();
        assert_eq!(hws.len(), 3);
        assert!(h.cummin_is_non_increasing());
        let best = h.trials.iter().map(|t| t.total_edp).fold(f64::INFINITY, f64::min);
        assert_eq!(h.final_edp(), Some(best));
        for e in &h.evaluations {
            let dp = DesignPoint { hw: e.hw, sw: e.sw, layer: workload.layers[e.layer] };
            assert!(satisfies_constraints(&dp));
        }
        // the streamed lines are exactly the serialized history
        assert_eq!(lines, h.lines());
    }

    #[test]
    fn replay_matches_and_diverges() {
        let workload = Workload {
            name: "micro".into(),
            layers: vec![micro_layer()],
        };
        let cfg = BoConfig {
            n_outer: 2,
            m_inner: 3,
            sw_pool_size: 30,
            hw_score_mappings: 2,
            refit_steps: 0,
            seed: 4,
            ..BoConfig::default()
        };
        let live = HighOracle::default();
        let full = run_loop("t", &cfg, &workload, &mut flat(), &live, LoopStyle::POLARIS, &mut ignore_lines).unwrap();
        let replay = ReplayOracle::new(&live, full.evaluations[..4].to_vec());
        let resumed = run_loop("t", &cfg, &workload, &mut flat(), &replay, LoopStyle::POLARIS, &mut ignore_lines).unwrap();
        assert_eq!(replay.replayed(), 4);
        assert_eq!(resumed.to_bytes(), full.to_bytes());
        check_resumable(&full, "t", &cfg, &workload).unwrap();
        let other = BoConfig { seed: 5, ..cfg.clone() };
        assert!(check_resumable(&full, "t", &other, &workload).is_err());
        let bad = ReplayOracle::new(&live, full.evaluations[..4].to_vec());
        assert!(run_loop("t", &other, &workload, &mut flat(), &bad, LoopStyle::POLARIS, &mut ignore_lines).is_err());
    }

    #[test]
    fn fixed_hw_runs_one_trial() {
        let workload = Workload {
            name: "micro".into(),
            layers: vec![micro_layer()],
        };
        let cfg = BoConfig {
            fix_hw: Some(micro_hw()),
            m_inner_fixed_hw: 5,
            sw_pool_size: 30,
            refit_steps: 0,
            ..BoConfig::default()
        };
        let h = run_loop("sw", &cfg, &workload, &mut flat(), &HighOracle::default(), LoopStyle::POLARIS, &mut ignore_lines)
            .unwrap();
        assert_eq!(h.evaluations.len(), 5);
        assert_eq!(h.trials.len(), 1);
        assert!(h.evaluations.iter().all(|e| e.hw == micro_hw()));
    }

    #[test]
    fn infeasible_fixed_hw_names_layers() {
        let workload = Workload {
            name: "big".into(),
            layers: vec![micro_layer(), LayerShape::new([16, 4096, 4096, 256, 256, 11, 11], 1, 1).unwrap()],
        };
        let cfg = BoConfig {
            fix_hw: Some(HwConfig::new(4, 8, 8).unwrap()),
            ..BoConfig::default()
        };
        let err = run_loop("sw", &cfg, &workload, &mut flat(), &HighOracle::default(), LoopStyle::POLARIS, &mut ignore_lines)
            .unwrap_err()
            .to_string();
        assert!(err.contains("[1]"), "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(BoConfig::default().validate().is_ok());
        assert!(BoConfig { m_inner: 0, ..Default::default() }.validate().is_err());
        assert!(BoConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!(BoConfig::default().budget(4), 192);
        assert_eq!(BoConfig { fix_hw: Some(micro_hw()), ..Default::default() }.budget(4), 80);
    }
}
