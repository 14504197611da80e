//! Cost oracles.
//!
//! [`low`] is the analytical loop-nest model (cheap, low fidelity) and
//! [`high`] the tile-schedule simulator (expensive, high fidelity). The
//! high-fidelity EDP is the analytical energy multiplied by the simulated
//! delay.

pub mod high;
pub mod low;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::workload::DesignPoint;
use crate::{hash, Error, Result};

pub use high::{evaluate_high, simulate_delay, SimTrace};
pub use low::{access_counts, batch_evaluate_low, batch_evaluate_low_seq, evaluate_low, AccessCounts};

/// Energy per element access (pJ) and per MAC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyTable {
    pub dram: f64,
    pub l2: f64,
    pub spad: f64,
    pub acc: f64,
    pub mac: f64,
    /// Scratchpad/accumulator access energy scales as `(kb / reference_kb)^exponent`.
    pub sram_reference_kb: f64,
    pub sram_size_exponent: f64,
}

impl Default for EnergyTable {
    fn default() -> Self {
        EnergyTable {
            dram: 128.0,
            l2: 16.0,
            spad: 4.0,
            acc: 2.0,
            mac: 0.5,
            sram_reference_kb: 64.0,
            sram_size_exponent: 0.5,
        }
    }
}

/// Sustained bandwidth in elements per cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Bandwidths {
    pub dram: f64,
    pub l2: f64,
    pub spad: f64,
}

impl Default for Bandwidths {
    fn default() -> Self {
        Bandwidths {
            dram: 4.0,
            l2: 8.0,
            spad: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConstants {
    /// Fixed cycles charged per DMA transfer.
    pub setup_cycles: u64,
    pub burst_bytes_per_cycle: u64,
}

impl Default for SimConstants {
    fn default() -> Self {
        SimConstants {
            setup_cycles: 64,
            burst_bytes_per_cycle: 8,
        }
    }
}

/// Constant table shared by both oracles; loadable from JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub energy: EnergyTable,
    pub bandwidth: Bandwidths,
    pub sim: SimConstants,
}

impl CostModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let model: CostModel = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.energy;
        let b = &self.bandwidth;
        let nonneg = [e.dram, e.l2, e.spad, e.acc, e.mac, e.sram_size_exponent];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::OutOfRange("energy constants must be finite and >= 0".into()));
        }
        let pos = [e.sram_reference_kb, b.dram, b.l2, b.spad];
        if pos.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::OutOfRange("bandwidths and reference size must be > 0".into()));
        }
        if self.sim.burst_bytes_per_cycle == 0 {
            return Err(Error::OutOfRange("burst bandwidth must be > 0".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash::json_hash(self)
    }
}

/// Energy, delay and their product for one design point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub energy_pj: f64,
    pub delay_cycles: f64,
    pub edp: f64,
    /// `[level][tensor]` element accesses; level 0 = operand deliveries to
    /// the array, 1 = scratchpad reads, 2 = DRAM reads.
    pub per_level_accesses: [[u64; 3]; 3],
}

impl CostBreakdown {
    pub fn new(energy_pj: f64, delay_cycles: f64, per_level_accesses: [[u64; 3]; 3]) -> Self {
        CostBreakdown {
            energy_pj,
            delay_cycles,
            edp: energy_pj * delay_cycles,
            per_level_accesses,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Low,
    High,
}

impl std::fmt::Display for Fidelity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fidelity::Low => "low",
            Fidelity::High => "high",
        })
    }
}

/// Something that prices a design point.
pub trait Oracle: Sync {
    fn fidelity(&self) -> Fidelity;
    fn evaluate(&self, dp: &DesignPoint) -> Result<CostBreakdown>;

    fn id(&self) -> String {
        format!("{}-fidelity", self.fidelity())
    }
}

#[derive(Clone, Debug, Default)]
pub struct LowOracle {
    pub model: CostModel,
}

impl Oracle for LowOracle {
    fn fidelity(&self) -> Fidelity {
        Fidelity::Low
    }

    fn evaluate(&self, dp: &DesignPoint) -> Result<CostBreakdown> {
        evaluate_low(dp, &self.model)
    }

    fn id(&self) -> String {
        "analytical-low".into()
    }
}

#[derive(Clone, Debug, Default)]
pub struct HighOracle {
    pub model: CostModel,
}

impl Oracle for HighOracle {
    fn fidelity(&self) -> Fidelity {
        Fidelity::High
    }

    fn evaluate(&self, dp: &DesignPoint) -> Result<CostBreakdown> {
        evaluate_high(dp, &self.model)
    }

    fn id(&self) -> String {
        "tile-sim-high".into()
    }
}

pub fn oracle_for(fidelity: Fidelity, model: CostModel) -> Box<dyn Oracle> {
    match fidelity {
        Fidelity::Low => Box::new(LowOracle { model }),
        Fidelity::High => Box::new(HighOracle { model }),
    }
}

/// Wraps an oracle and counts every call; the optimizers' budget ledger.
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicU64,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        CountingOracle {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn fidelity(&self) -> Fidelity {
        self.inner.fidelity()
    }

    fn evaluate(&self, dp: &DesignPoint) -> Result<CostBreakdown> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(dp)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
