//! Cycle-approximate tile-schedule simulator.
//!
//! The DRAM-level loops step through scratchpad tiles. For every tile the
//! array spends `A` cycles filling, the tile's compute rows, and `A` cycles
//! draining; a DMA transfer of `setup + bytes / burst` cycles brings the
//! tile's data in. When two tile working sets fit in the scratchpad the next
//! transfer overlaps the current compute, otherwise transfers and compute
//! serialize. DRAM traffic is spread evenly over the tiles.

use serde::{Deserialize, Serialize};

use crate::oracle::low::{access_counts_unchecked, array_utilization, low_energy};
use crate::oracle::{CostBreakdown, CostModel};
use crate::workload::{check_fit, spad_footprint_bytes, DesignPoint, ELEMENT_BYTES};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub delay_cycles: u64,
    pub n_tiles: u64,
    /// Fraction of DMA cycles hidden under compute.
    pub overlap_fraction: f64,
    pub double_buffered: bool,
    pub compute_per_tile: u64,
    pub dma_per_tile: u64,
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Whether the scratchpad holds two scratchpad-tile working sets.
pub fn double_buffered(dp: &DesignPoint) -> bool {
    2 * spad_footprint_bytes(dp) <= dp.hw.spad_bytes()
}

pub fn simulate_delay(dp: &DesignPoint, model: &CostModel) -> Result<SimTrace> {
    check_fit(dp)?;
    Ok(simulate_unchecked(dp, model))
}

pub(crate) fn simulate_unchecked(dp: &DesignPoint, model: &CostModel) -> SimTrace {
    let counts = access_counts_unchecked(dp);
    let a = dp.hw.array_dim as u64;
    let n_tiles: u64 = dp.sw.tiling[2].iter().product();
    let tile_macs: u64 = dp.sw.tile(1).iter().product();
    let util = array_utilization(dp);

    // Scratchpad reads cap the row rate the same way they cap the roofline.
    let spad_rows = (counts.level_total(1) as f64 / (n_tiles as f64 * model.bandwidth.spad)).ceil() as u64;
    let rows = ceil_div(tile_macs, util).max(spad_rows);
    let compute = 2 * a + rows;

    let bytes = counts.level_total(2) * ELEMENT_BYTES;
    let bytes_per_tile = ceil_div(bytes, n_tiles);
    let dma = model.sim.setup_cycles + ceil_div(bytes_per_tile, model.sim.burst_bytes_per_cycle);

    let overlap = double_buffered(dp);
    let (delay, hidden) = if overlap {
        (dma + (n_tiles - 1) * compute.max(dma) + compute, (n_tiles - 1) * compute.min(dma))
    } else {
        (n_tiles * (compute + dma), 0)
    };
    SimTrace {
        delay_cycles: delay,
        n_tiles,
        overlap_fraction: hidden as f64 / (n_tiles * dma) as f64,
        double_buffered: overlap,
        compute_per_tile: compute,
        dma_per_tile: dma,
    }
}

/// Analytical energy times simulated delay.
pub fn evaluate_high(dp: &DesignPoint, model: &CostModel) -> Result<CostBreakdown> {
    check_fit(dp)?;
    let counts = access_counts_unchecked(dp);
    let trace = simulate_unchecked(dp, model);
    Ok(CostBreakdown::new(
        low_energy(dp, &counts, model),
        trace.delay_cycles as f64,
        counts.elements,
    ))
}
