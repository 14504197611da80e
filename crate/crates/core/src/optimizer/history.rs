//! Run histories: every high-fidelity evaluation in order, per-hardware
//! trials and the incumbent, persisted as JSON lines.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::oracle::CostBreakdown;
use crate::workload::{HwConfig, SwMapping};
use crate::{Error, Result};

pub const HISTORY_FORMAT: &str = "polaris-history";
pub const HISTORY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub version: u32,
    pub method: String,
    pub workload: String,
    pub seed: u64,
    pub n_layers: usize,
    /// Fully resolved method configuration.
    pub config: serde_json::Value,
    pub config_hash: String,
    /// Hash of the surrogate the run started from (empty if trained online).
    pub surrogate_hash: String,
    pub oracle: String,
    pub tool_version: String,
}

impl RunHeader {
    pub fn new(method: &str, workload: &str, seed: u64, n_layers: usize, config: serde_json::Value) -> Self {
        RunHeader {
            format: HISTORY_FORMAT.into(),
            version: HISTORY_VERSION,
            method: method.into(),
            workload: workload.into(),
            seed,
            n_layers,
            config_hash: crate::hash::json_hash(&config),
            config,
            surrogate_hash: String::new(),
            oracle: String::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

/// One high-fidelity evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub iteration: usize,
    pub layer: usize,
    pub step: usize,
    pub hw: HwConfig,
    pub sw: SwMapping,
    /// `None` when the candidate was drawn at random.
    pub acquisition: Option<f64>,
    pub energy_pj: f64,
    pub delay_cycles: f64,
    pub edp: f64,
    /// Best complete-design total EDP after this evaluation.
    pub best_total_edp: Option<f64>,
}

impl EvalRecord {
    pub fn cost(&self) -> CostBreakdown {
        CostBreakdown {
            energy_pj: self.energy_pj,
            delay_cycles: self.delay_cycles,
            edp: self.edp,
            per_level_accesses: [[0; 3]; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerResult {
    pub layer: usize,
    pub sw: SwMapping,
    pub energy_pj: f64,
    pub delay_cycles: f64,
    pub edp: f64,
}

/// The best mapping per layer found for one hardware candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwTrial {
    pub iteration: usize,
    pub hw: HwConfig,
    pub acquisition: Option<f64>,
    pub layers: Vec<LayerResult>,
    pub total_edp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistoryLine {
    Header(RunHeader),
    Eval(EvalRecord),
    Trial(HwTrial),
    Incumbent(HwTrial),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunHistory {
    pub header: RunHeader,
    pub evaluations: Vec<EvalRecord>,
    pub trials: Vec<HwTrial>,
    pub incumbent: Option<HwTrial>,
}

impl RunHistory {
    pub fn new(header: RunHeader) -> Self {
        RunHistory {
            header,
            evaluations: Vec::new(),
            trials: Vec::new(),
            incumbent: None,
        }
    }

    pub fn final_edp(&self) -> Option<f64> {
        self.incumbent.as_ref().map(|t| t.total_edp)
    }

    pub fn cummin_series(&self) -> Vec<Option<f64>> {
        self.evaluations.iter().map(|e| e.best_total_edp).collect()
    }

    pub fn cummin_is_non_increasing(&self) -> bool {
        let vals: Vec<f64> = self.evaluations.iter().filter_map(|e| e.best_total_edp).collect();
        let started = self.evaluations.iter().position(|e| e.best_total_edp.is_some());
        let contiguous = started.is_none_or(|s| self.evaluations[s..].iter().all(|e| e.best_total_edp.is_some()));
        contiguous && vals.windows(2).all(|w| w[1] <= w[0])
    }

    /// Total EDP of the incumbent once `trial` is accounted for.
    pub fn best_with(&self, trial: &HwTrial) -> f64 {
        self.final_edp().map_or(trial.total_edp, |b| b.min(trial.total_edp))
    }

    /// Appends a completed hardware trial and updates the incumbent.
    pub fn push_trial(&mut self, trial: HwTrial) {
        if self.incumbent.as_ref().is_none_or(|b| trial.total_edp < b.total_edp) {
            self.incumbent = Some(trial.clone());
        }
        self.trials.push(trial);
    }

    pub fn lines(&self) -> Vec<HistoryLine> {
        let mut out = vec![HistoryLine::Header(self.header.clone())];
        let mut trials = self.trials.iter().peekable();
        for e in &self.evaluations {
            out.push(HistoryLine::Eval(e.clone()));
            // a trial line follows the evaluation that completed it
            while let Some(t) = trials.peek() {
                let last_of_trial = self
                    .evaluations
                    .iter()
                    .rfind(|x| x.iteration == t.iteration)
                    .map(|x| x.index);
                if last_of_trial == Some(e.index) {
                    out.push(HistoryLine::Trial((*t).clone()));
                    trials.next();
                } else {
                    break;
                }
            }
        }
        out.extend(trials.cloned().map(HistoryLine::Trial));
        if let Some(b) = &self.incumbent {
            out.push(HistoryLine::Incumbent(b.clone()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for l in self.lines() {
            serde_json::to_writer(&mut buf, &l).expect("serializable history");
            buf.push(b'\n');
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a history. With `partial`, an interrupted file (no incumbent
    /// line, possibly a torn last line) is accepted.
    pub fn read_from(r: impl BufRead, partial: bool) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or(Error::Empty("history file"))??;
        let header = match serde_json::from_str(&first)? {
            HistoryLine::Header(h) => h,
            _ => return Err(Error::Format("history must start with a header line".into())),
        };
        if header.format != HISTORY_FORMAT || header.version != HISTORY_VERSION {
            return Err(Error::Format(format!("unsupported history {} v{}", header.format, header.version)));
        }
        let mut h = RunHistory::new(header);
        let raw: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        for (i, line) in raw.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: HistoryLine = match serde_json::from_str(line) {
                Ok(l) => l,
                Err(_) if partial && i + 1 == raw.len() => break,
                Err(e) => return Err(Error::at(i + 1, e.into())),
            };
            match parsed {
                HistoryLine::Eval(e) => h.evaluations.push(e),
                HistoryLine::Trial(t) => h.trials.push(t),
                HistoryLine::Incumbent(t) => h.incumbent = Some(t),
                HistoryLine::Header(_) => return Err(Error::at(i + 1, Error::Format("second header".into()))),
            }
        }
        if !partial && h.incumbent.is_none() {
            return Err(Error::Format("history has no incumbent (interrupted run?)".into()));
        }
        Ok(h)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_from(BufReader::new(f), false).map_err(|e| Error::context(path.as_ref().display().to_string(), e))
    }

    pub fn load_partial(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_from(BufReader::new(f), true).map_err(|e| Error::context(path.as_ref().display().to_string(), e))
    }
}

/// Streams history lines to a writer as a run progresses.
pub struct HistoryWriter<W: Write> {
    out: W,
}

impl<W: Write> HistoryWriter<W> {
    pub fn new(out: W) -> Self {
        HistoryWriter { out }
    }

    pub fn write(&mut self, line: &HistoryLine) -> Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{micro_hw, micro_layer};

    fn eval(index: usize, iteration: usize, edp: f64) -> EvalRecord {
        EvalRecord {
            index,
            iteration,
            layer: 0,
            step: index,
            hw: micro_hw(),
            sw: SwMapping::identity(&micro_layer()),
            acquisition: Some(0.5),
            energy_pj: 1.0,
            delay_cycles: edp,
            edp,
            best_total_edp: None,
        }
    }

    fn trial(iteration: usize, total: f64) -> HwTrial {
        HwTrial {
            iteration,
            hw: micro_hw(),
            acquisition: None,
            layers: vec![],
            total_edp: total,
        }
    }

    fn sample() -> RunHistory {
        let mut h = RunHistory::new(RunHeader::new("polaris", "w", 1, 1, serde_json::json!({"n": 2})));
        h.evaluations.push(eval(0, 0, 5.0));
        let mut e = eval(1, 0, 4.0);
        e.best_total_edp = Some(h.best_with(&trial(0, 4.0)));
        h.evaluations.push(e);
        h.push_trial(trial(0, 4.0));
        for (i, edp) in [(2, 7.0), (3, 6.0)] {
            let mut e = eval(i, 1, edp);
            e.best_total_edp = Some(h.best_with(&trial(1, 6.0)));
            h.evaluations.push(e);
        }
        h.push_trial(trial(1, 6.0));
        h
    }

    #[test]
    fn incumbent_and_series() {
        let h = sample();
        assert_eq!(h.final_edp(), Some(4.0));
        assert_eq!(h.cummin_series(), vec![None, Some(4.0), Some(4.0), Some(4.0)]);
        assert!(h.cummin_is_non_increasing());
    }

    #[test]
    fn jsonl_round_trip() {
        let h = sample();
        let bytes = h.to_bytes();
        let back = RunHistory::read_from(&bytes[..], false).unwrap();
        assert_eq!(back, h);
        let text = String::from_utf8(bytes).unwrap();
        let kinds: Vec<&str> = text
            .lines()
            .map(|l| l.split('"').nth(1).unwrap())
            .collect();
        assert_eq!(kinds, ["header", "eval", "eval", "trial", "eval", "eval", "trial", "incumbent"]);
    }

    #[test]
    fn partial_files() {
        let h = sample();
        let bytes = h.to_bytes();
        let text = String::from_utf8(bytes).unwrap();
        let cut: String = text.lines().take(3).collect::<Vec<_>>().join("\n") + "\n{\"eval\":{\"ind";
        assert!(RunHistory::read_from(cut.as_bytes(), false).is_err());
        let p = RunHistory::read_from(cut.as_bytes(), true).unwrap();
        assert_eq!(p.evaluations.len(), 2);
        assert!(p.incumbent.is_none());
    }
}
