//! Maps unit-cube points onto the discrete design lattice.
//!
//! Coordinate layout (18 total): `[0..3)` array size, accumulator and
//! scratchpad indices; `[3]` loop-order index (Lehmer code over 7!); then two
//! coordinates per dimension `N..S` choosing the level-0 factor among the
//! divisors of the dimension and the level-1 factor among the divisors of
//! what remains. Level 2 takes the remainder, so the factor product always
//! equals the dimension.

use crate::workload::{
    divisors, loop_order_from_index, DesignPoint, Dim, HwConfig, LayerShape, SwMapping, ARRAY_DIMS,
    MEM_KB_CHOICES, MEM_KB_MIN, MEM_KB_STEP, NUM_DIMS, NUM_LOOP_ORDERS,
};

pub const LATTICE_DIM: usize = 18;
/// Software-only slice: loop order plus two tiling coordinates per dimension.
pub const SW_LATTICE_DIM: usize = 1 + 2 * NUM_DIMS;

/// Index into a list of `len` choices; values at or above 1 clamp to the last.
pub fn pick(u: f64, len: usize) -> usize {
    ((u.max(0.0) * len as f64) as usize).min(len - 1)
}

pub fn hw_from_unit(u: &[f64]) -> HwConfig {
    HwConfig {
        array_dim: ARRAY_DIMS[pick(u[0], ARRAY_DIMS.len())],
        acc_kb: MEM_KB_MIN + pick(u[1], MEM_KB_CHOICES) as u32 * MEM_KB_STEP,
        spad_kb: MEM_KB_MIN + pick(u[2], MEM_KB_CHOICES) as u32 * MEM_KB_STEP,
    }
}

/// Largest divisor of `dim` not exceeding the array side: the spatial
/// unroll factor that maximises utilization without an edge case.
pub fn unroll_factor(dim: u64, array_dim: u32) -> u64 {
    divisors(dim)
        .into_iter()
        .filter(|&d| d <= array_dim as u64)
        .max()
        .unwrap_or(1)
}

/// Builds a mapping from a [`SW_LATTICE_DIM`]-long slice. With `unroll_for`
/// set, the level-0 C and K factors are pinned to [`unroll_factor`] and
/// their level-0 coordinates are ignored.
pub fn sw_from_unit(u: &[f64], layer: &LayerShape, unroll_for: Option<u32>) -> SwMapping {
    let loop_order = loop_order_from_index(pick(u[0], NUM_LOOP_ORDERS));
    let mut tiling = [[1u64; NUM_DIMS]; 3];
    for (d, &dim) in layer.dims().iter().enumerate() {
        let pinned = match (unroll_for, Dim::from_index(d)) {
            (Some(a), Dim::C | Dim::K) => Some(unroll_factor(dim, a)),
            _ => None,
        };
        let t0 = pinned.unwrap_or_else(|| {
            let divs = divisors(dim);
            divs[pick(u[1 + 2 * d], divs.len())]
        });
        let rest = dim / t0;
        let divs = divisors(rest);
        let t1 = divs[pick(u[2 + 2 * d], divs.len())];
        tiling[0][d] = t0;
        tiling[1][d] = t1;
        tiling[2][d] = rest / t1;
    }
    SwMapping { loop_order, tiling }
}

/// Maps an [`LATTICE_DIM`]-long unit point onto a design point for `layer`.
pub fn lattice_map(u: &[f64], layer: &LayerShape) -> DesignPoint {
    assert!(u.len() >= LATTICE_DIM, "lattice point needs {LATTICE_DIM} coordinates");
    DesignPoint {
        hw: hw_from_unit(&u[0..3]),
        sw: sw_from_unit(&u[3..LATTICE_DIM], layer, None),
        layer: *layer,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::workload::{bundled_workloads, unique_layers, validate_mapping};

    fn layer() -> LayerShape {
        LayerShape::new([2, 64, 32, 14, 14, 3, 3], 1, 1).unwrap()
    }

    #[test]
    fn zeros_map_to_minimum_config() {
        let dp = lattice_map(&[0.0; LATTICE_DIM], &layer());
        assert_eq!(dp.hw, HwConfig::new(4, 8, 8).unwrap());
        assert_eq!(dp.sw, SwMapping::identity(&layer()));
    }

    #[test]
    fn near_ones_map_to_maximum_config() {
        let u = [1.0 - 1e-12; LATTICE_DIM];
        let dp = lattice_map(&u, &layer());
        assert_eq!(dp.hw, HwConfig::new(32, 256, 256).unwrap());
        assert_eq!(dp.sw.loop_order, [6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(dp.sw.tiling[0], layer().dims());
        assert_eq!(dp.sw.tiling[1], [1; NUM_DIMS]);
        assert_eq!(dp.sw.tiling[2], [1; NUM_DIMS]);
    }

    #[test]
    fn random_points_always_give_valid_mappings() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = unique_layers(&bundled_workloads());
        for i in 0..1000 {
            let u: Vec<f64> = (0..LATTICE_DIM).map(|_| rng.random::<f64>()).collect();
            let l = &layers[i % layers.len()];
            let dp = lattice_map(&u, l);
            assert!(validate_mapping(&dp.sw, l));
            assert!(dp.hw.is_valid());
        }
    }

    #[test]
    fn unroll_factor_prefers_full_array() {
        assert_eq!(unroll_factor(64, 16), 16);
        assert_eq!(unroll_factor(3, 16), 3);
        assert_eq!(unroll_factor(12, 8), 6);
        assert_eq!(unroll_factor(1, 32), 1);
    }

    #[test]
    fn pinned_unroll_overrides_coordinates() {
        let l = LayerShape::new([1, 64, 64, 8, 8, 1, 1], 1, 1).unwrap();
        let sw = sw_from_unit(&[0.9; SW_LATTICE_DIM], &l, Some(16));
        assert_eq!(sw.tiling[0][Dim::C.index()], 16);
        assert_eq!(sw.tiling[0][Dim::K.index()], 16);
        assert!(validate_mapping(&sw, &l));
    }
}
