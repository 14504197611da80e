//! Layer shapes, the discrete hardware/software design space and the
//! feature encoding shared by every model.
//!
//! A convolution is described by seven loop dimensions `N K C P Q R S`
//! (batch, output channels, input channels, output rows/cols, filter
//! rows/cols) plus stride and dilation. GEMMs are expressed as convolutions
//! with `Q = R = S = 1`.
//!
//! A software mapping splits every dimension into three tiling factors, one
//! per memory level (0 = accumulator/array, 1 = scratchpad, 2 = DRAM), and
//! orders the loops. The product of a dimension's factors over the three
//! levels must equal the layer dimension exactly.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_DIMS: usize = 7;
pub const NUM_LEVELS: usize = 3;
pub const FEATURE_DIM: usize = 40;
pub const ELEMENT_BYTES: u64 = 2;

pub const DIM_NAMES: [&str; NUM_DIMS] = ["N", "K", "C", "P", "Q", "R", "S"];

pub const ARRAY_DIMS: [u32; 8] = [4, 8, 12, 16, 20, 24, 28, 32];
pub const MEM_KB_MIN: u32 = 8;
pub const MEM_KB_MAX: u32 = 256;
pub const MEM_KB_STEP: u32 = 8;
pub const MEM_KB_CHOICES: usize = ((MEM_KB_MAX - MEM_KB_MIN) / MEM_KB_STEP + 1) as usize;
pub const HW_SPACE_SIZE: usize = ARRAY_DIMS.len() * MEM_KB_CHOICES * MEM_KB_CHOICES;

/// Largest encodable value per loop dimension, in `N K C P Q R S` order.
pub const DIM_MAX: [u64; NUM_DIMS] = [16, 4096, 4096, 256, 256, 11, 11];
pub const STRIDE_MAX: u64 = 4;
pub const DILATION_MAX: u64 = 4;

/// Number of loop orders (7!).
pub const NUM_LOOP_ORDERS: usize = 5040;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    N = 0,
    K = 1,
    C = 2,
    P = 3,
    Q = 4,
    R = 5,
    S = 6,
}

impl Dim {
    pub const ALL: [Dim; NUM_DIMS] = [Dim::N, Dim::K, Dim::C, Dim::P, Dim::Q, Dim::R, Dim::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Dim {
        Dim::ALL[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tensor {
    Weight = 0,
    Input = 1,
    Output = 2,
}

impl Tensor {
    pub const ALL: [Tensor; 3] = [Tensor::Weight, Tensor::Input, Tensor::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether loop dimension `d` indexes this tensor.
    pub fn indexed_by(self, d: Dim) -> bool {
        use Dim::*;
        match self {
            Tensor::Weight => matches!(d, K | C | R | S),
            Tensor::Input => matches!(d, N | C | P | Q | R | S),
            Tensor::Output => matches!(d, N | K | P | Q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerShape {
    #[serde(rename = "N")]
    pub n: u64,
    #[serde(rename = "K")]
    pub k: u64,
    #[serde(rename = "C")]
    pub c: u64,
    #[serde(rename = "P")]
    pub p: u64,
    #[serde(rename = "Q")]
    pub q: u64,
    #[serde(rename = "R")]
    pub r: u64,
    #[serde(rename = "S")]
    pub s: u64,
    pub stride: u64,
    pub dilation: u64,
}

impl LayerShape {
    pub fn new(dims: [u64; NUM_DIMS], stride: u64, dilation: u64) -> Result<Self> {
        let [n, k, c, p, q, r, s] = dims;
        let layer = LayerShape {
            n,
            k,
            c,
            p,
            q,
            r,
            s,
            stride,
            dilation,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn dims(&self) -> [u64; NUM_DIMS] {
        [self.n, self.k, self.c, self.p, self.q, self.r, self.s]
    }

    pub fn dim(&self, d: Dim) -> u64 {
        self.dims()[d.index()]
    }

    pub fn macs(&self) -> u64 {
        self.dims().iter().product()
    }

    /// Input extent covered by `out` output positions of a filter spanning `filt` taps.
    pub fn input_extent(&self, out: u64, filt: u64) -> u64 {
        (out - 1) * self.stride + (filt - 1) * self.dilation + 1
    }

    /// Checks positivity and the encodable bounds.
    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.dims().iter().enumerate() {
            if v == 0 {
                return Err(Error::InvalidLayer(format!("{} must be >= 1", DIM_NAMES[i])));
            }
            if v > DIM_MAX[i] {
                return Err(Error::InvalidLayer(format!(
                    "{}={} exceeds the encodable maximum {}",
                    DIM_NAMES[i], v, DIM_MAX[i]
                )));
            }
        }
        if self.stride == 0 || self.stride > STRIDE_MAX {
            return Err(Error::InvalidLayer(format!(
                "stride must be in 1..={STRIDE_MAX}, got {}",
                self.stride
            )));
        }
        if self.dilation == 0 || self.dilation > DILATION_MAX {
            return Err(Error::InvalidLayer(format!(
                "dilation must be in 1..={DILATION_MAX}, got {}",
                self.dilation
            )));
        }
        Ok(())
    }
}

/// Tiny layer whose constrained software lattice on [`micro_hw`] is small
/// enough to simulate exhaustively.
pub fn micro_layer() -> LayerShape {
    LayerShape {
        n: 2,
        k: 8,
        c: 8,
        p: 4,
        q: 4,
        r: 1,
        s: 1,
        stride: 1,
        dilation: 1,
    }
}

pub fn micro_hw() -> HwConfig {
    HwConfig {
        array_dim: 8,
        acc_kb: 8,
        spad_kb: 8,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HwConfig {
    pub array_dim: u32,
    pub acc_kb: u32,
    pub spad_kb: u32,
}

impl HwConfig {
    pub fn new(array_dim: u32, acc_kb: u32, spad_kb: u32) -> Result<Self> {
        let hw = HwConfig {
            array_dim,
            acc_kb,
            spad_kb,
        };
        if hw.is_valid() {
            Ok(hw)
        } else {
            Err(Error::InvalidDesign(format!("hardware config {hw} outside the design space")))
        }
    }

    pub fn is_valid(&self) -> bool {
        let mem_ok =
            |kb: u32| (MEM_KB_MIN..=MEM_KB_MAX).contains(&kb) && (kb - MEM_KB_MIN) % MEM_KB_STEP == 0;
        ARRAY_DIMS.contains(&self.array_dim) && mem_ok(self.acc_kb) && mem_ok(self.spad_kb)
    }

    pub fn acc_bytes(&self) -> u64 {
        self.acc_kb as u64 * 1024
    }

    pub fn spad_bytes(&self) -> u64 {
        self.spad_kb as u64 * 1024
    }

    /// Index into [`enumerate_hw_space`].
    pub fn space_index(&self) -> Option<usize> {
        if !self.is_valid() {
            return None;
        }
        let a = ARRAY_DIMS.iter().position(|&x| x == self.array_dim)?;
        let acc = ((self.acc_kb - MEM_KB_MIN) / MEM_KB_STEP) as usize;
        let spad = ((self.spad_kb - MEM_KB_MIN) / MEM_KB_STEP) as usize;
        Some((a * MEM_KB_CHOICES + acc) * MEM_KB_CHOICES + spad)
    }

    pub fn from_space_index(i: usize) -> HwConfig {
        let spad = i % MEM_KB_CHOICES;
        let acc = (i / MEM_KB_CHOICES) % MEM_KB_CHOICES;
        let a = i / (MEM_KB_CHOICES * MEM_KB_CHOICES);
        HwConfig {
            array_dim: ARRAY_DIMS[a],
            acc_kb: MEM_KB_MIN + acc as u32 * MEM_KB_STEP,
            spad_kb: MEM_KB_MIN + spad as u32 * MEM_KB_STEP,
        }
    }
}

impl std::fmt::Display for HwConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}/acc{}KB/spad{}KB", self.array_dim, self.array_dim, self.acc_kb, self.spad_kb)
    }
}

impl std::str::FromStr for HwConfig {
    type Err = Error;

    /// Parses `A,ACC_KB,SPAD_KB`, e.g. `16,64,128`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidDesign(format!("expected ARRAY,ACC_KB,SPAD_KB, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let nums: Vec<u32> = parts
            .iter()
            .map(|p| p.parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        HwConfig::new(nums[0], nums[1], nums[2])
    }
}

/// Every hardware configuration, sorted by `(array_dim, acc_kb, spad_kb)`.
pub fn enumerate_hw_space() -> Vec<HwConfig> {
    (0..HW_SPACE_SIZE).map(HwConfig::from_space_index).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SwMapping {
    /// Dimension index at each loop position, outermost first.
    pub loop_order: [u8; NUM_DIMS],
    /// `tiling[level][dim]`; level 0 is innermost.
    pub tiling: [[u64; NUM_DIMS]; NUM_LEVELS],
}

impl SwMapping {
    /// Identity loop order with the whole layer iterated at the outermost level.
    pub fn identity(layer: &LayerShape) -> Self {
        SwMapping {
            loop_order: [0, 1, 2, 3, 4, 5, 6],
            tiling: [[1; NUM_DIMS], [1; NUM_DIMS], layer.dims()],
        }
    }

    pub fn factor(&self, level: usize, d: Dim) -> u64 {
        self.tiling[level][d.index()]
    }

    /// Tile extent per dimension held at `level`: product of factors at levels `0..=level`.
    pub fn tile(&self, level: usize) -> [u64; NUM_DIMS] {
        let mut t = [1u64; NUM_DIMS];
        for l in 0..=level {
            for (d, td) in t.iter_mut().enumerate() {
                *td *= self.tiling[l][d];
            }
        }
        t
    }

    pub fn loop_order_is_permutation(&self) -> bool {
        let mut seen = [false; NUM_DIMS];
        for &d in &self.loop_order {
            let d = d as usize;
            if d >= NUM_DIMS || seen[d] {
                return false;
            }
            seen[d] = true;
        }
        true
    }

    /// Loop order with every dimension whose outer factors are all 1 moved to
    /// the innermost positions in ascending order. Such loops never advance,
    /// so both orders describe the same schedule.
    pub fn canonical(&self) -> SwMapping {
        let relevant = |d: u8| self.tiling[1][d as usize] > 1 || self.tiling[2][d as usize] > 1;
        let mut order = [0u8; NUM_DIMS];
        let mut i = 0;
        for &d in self.loop_order.iter().filter(|&&d| relevant(d)) {
            order[i] = d;
            i += 1;
        }
        for d in 0..NUM_DIMS as u8 {
            if !relevant(d) {
                order[i] = d;
                i += 1;
            }
        }
        SwMapping {
            loop_order: order,
            tiling: self.tiling,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DesignPoint {
    pub hw: HwConfig,
    pub sw: SwMapping,
    pub layer: LayerShape,
}

/// Elements of `tensor` covered by a tile with per-dimension extents `tile`.
pub fn tile_elements(layer: &LayerShape, tile: &[u64; NUM_DIMS], tensor: Tensor) -> u64 {
    let [n, k, c, p, q, r, s] = *tile;
    match tensor {
        Tensor::Weight => k * c * r * s,
        Tensor::Input => n * c * layer.input_extent(p, r) * layer.input_extent(q, s),
        Tensor::Output => n * k * p * q,
    }
}

/// Bytes held in the accumulator (level-0 output tile).
pub fn acc_footprint_bytes(dp: &DesignPoint) -> u64 {
    tile_elements(&dp.layer, &dp.sw.tile(0), Tensor::Output) * ELEMENT_BYTES
}

/// Bytes held in the scratchpad (level-1 weight + input + output tiles).
pub fn spad_footprint_bytes(dp: &DesignPoint) -> u64 {
    let tile = dp.sw.tile(1);
    Tensor::ALL
        .iter()
        .map(|&t| tile_elements(&dp.layer, &tile, t))
        .sum::<u64>()
        * ELEMENT_BYTES
}

/// True iff every dimension's factors multiply to the layer dimension and
/// the loop order is a permutation.
pub fn validate_mapping(sw: &SwMapping, layer: &LayerShape) -> bool {
    if !sw.loop_order_is_permutation() {
        return false;
    }
    let dims = layer.dims();
    (0..NUM_DIMS).all(|d| {
        let mut prod: u64 = 1;
        for l in 0..NUM_LEVELS {
            let f = sw.tiling[l][d];
            if f == 0 {
                return false;
            }
            prod = match prod.checked_mul(f) {
                Some(p) => p,
                None => return false,
            };
        }
        prod == dims[d]
    })
}

/// True iff the mapping is valid and its tiles fit the accumulator and scratchpad.
pub fn validate_fit(dp: &DesignPoint) -> bool {
    validate_mapping(&dp.sw, &dp.layer)
        && acc_footprint_bytes(dp) <= dp.hw.acc_bytes()
        && spad_footprint_bytes(dp) <= dp.hw.spad_bytes()
}

/// Full design-point validity check used by the oracles and the encoder.
pub fn check_design(dp: &DesignPoint) -> Result<()> {
    dp.layer.validate()?;
    if !dp.hw.is_valid() {
        return Err(Error::InvalidDesign(format!("hardware {} outside the design space", dp.hw)));
    }
    if !validate_mapping(&dp.sw, &dp.layer) {
        return Err(Error::InvalidDesign("tiling factors do not multiply to the layer shape".into()));
    }
    Ok(())
}

pub fn check_fit(dp: &DesignPoint) -> Result<()> {
    check_design(dp)?;
    if !validate_fit(dp) {
        return Err(Error::InvalidDesign(format!(
            "tiles do not fit {} (acc {} B, spad {} B)",
            dp.hw,
            acc_footprint_bytes(dp),
            spad_footprint_bytes(dp)
        )));
    }
    Ok(())
}

/// Sorted divisors of `n`.
pub fn divisors(n: u64) -> Vec<u64> {
    let mut small = Vec::new();
    let mut large = Vec::new();
    let mut i = 1;
    while i * i <= n {
        if n % i == 0 {
            small.push(i);
            if i * i != n {
                large.push(n / i);
            }
        }
        i += 1;
    }
    small.extend(large.into_iter().rev());
    small
}

/// Decodes a Lehmer index in `0..5040` into a loop order; index 0 is the identity.
pub fn loop_order_from_index(mut index: usize) -> [u8; NUM_DIMS] {
    let mut pool: Vec<u8> = (0..NUM_DIMS as u8).collect();
    let mut out = [0u8; NUM_DIMS];
    let mut radix: usize = (1..NUM_DIMS).product();
    for (i, slot) in out.iter_mut().enumerate() {
        let pick = index / radix;
        index %= radix;
        *slot = pool.remove(pick);
        if i + 1 < NUM_DIMS {
            radix /= NUM_DIMS - 1 - i;
        }
    }
    out
}

pub fn loop_order_index(order: &[u8; NUM_DIMS]) -> usize {
    let mut pool: Vec<u8> = (0..NUM_DIMS as u8).collect();
    let mut index = 0;
    let mut radix: usize = (1..NUM_DIMS).product();
    for (i, d) in order.iter().enumerate() {
        let pos = pool.iter().position(|x| x == d).expect("loop order is a permutation");
        pool.remove(pos);
        index += pos * radix;
        if i + 1 < NUM_DIMS {
            radix /= NUM_DIMS - 1 - i;
        }
    }
    index
}

// ---------------------------------------------------------------------------
// Feature encoding
// ---------------------------------------------------------------------------

pub const FEAT_HW: usize = 0;
pub const FEAT_LOOP_ORDER: usize = 3;
pub const FEAT_TILING: usize = 10;
pub const FEAT_LAYER: usize = 31;
pub const FEAT_STRIDE: usize = 38;
pub const FEAT_DILATION: usize = 39;

/// Per-component scaling rule applied to the raw layout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    /// `(x - min) / (max - min)`.
    Linear { min: f64, max: f64 },
    /// `log2(x) / log2(max)`; `x` ranges over `1..=max`.
    Log2 { max: f64 },
}

impl Scale {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Scale::Linear { min, max } => (x - min) / (max - min),
            Scale::Log2 { max } => x.log2() / max.log2(),
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        match *self {
            Scale::Linear { min, max } => min + y * (max - min),
            Scale::Log2 { max } => (y * max.log2()).exp2(),
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Scale::Linear { min, max } => (min, max),
            Scale::Log2 { max } => (1.0, max),
        }
    }
}

/// Index of tiling factor `(level, dim)` in the feature layout (dimension-major).
pub fn tiling_feature_index(level: usize, d: usize) -> usize {
    FEAT_TILING + d * NUM_LEVELS + level
}

/// Scaling rule for each of the 40 feature components.
pub fn feature_scales() -> [Scale; FEATURE_DIM] {
    let mut s = [Scale::Linear { min: 0.0, max: 1.0 }; FEATURE_DIM];
    s[FEAT_HW] = Scale::Linear {
        min: ARRAY_DIMS[0] as f64,
        max: ARRAY_DIMS[ARRAY_DIMS.len() - 1] as f64,
    };
    let mem = Scale::Linear {
        min: MEM_KB_MIN as f64,
        max: MEM_KB_MAX as f64,
    };
    s[FEAT_HW + 1] = mem;
    s[FEAT_HW + 2] = mem;
    for i in 0..NUM_DIMS {
        s[FEAT_LOOP_ORDER + i] = Scale::Linear {
            min: 0.0,
            max: (NUM_DIMS - 1) as f64,
        };
    }
    for d in 0..NUM_DIMS {
        let log = Scale::Log2 {
            max: DIM_MAX[d] as f64,
        };
        for l in 0..NUM_LEVELS {
            s[tiling_feature_index(l, d)] = log;
        }
        s[FEAT_LAYER + d] = log;
    }
    s[FEAT_STRIDE] = Scale::Linear {
        min: 1.0,
        max: STRIDE_MAX as f64,
    };
    s[FEAT_DILATION] = Scale::Linear {
        min: 1.0,
        max: DILATION_MAX as f64,
    };
    s
}

/// 40 scaled components in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(#[serde(with = "feature_array")] pub [f64; FEATURE_DIM]);

mod feature_array {
    use super::FEATURE_DIM;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; FEATURE_DIM], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; FEATURE_DIM], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| D::Error::custom(format!("expected {FEATURE_DIM} features, got {}", v.len())))
    }
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Exact-bit key for deduplication.
    pub fn bits_key(&self) -> [u64; FEATURE_DIM] {
        let mut k = [0u64; FEATURE_DIM];
        for (o, v) in k.iter_mut().zip(self.0.iter()) {
            *o = v.to_bits();
        }
        k
    }
}

/// Unscaled feature layout: the raw integer design parameters as floats.
pub fn raw_features(dp: &DesignPoint) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[FEAT_HW] = dp.hw.array_dim as f64;
    f[FEAT_HW + 1] = dp.hw.acc_kb as f64;
    f[FEAT_HW + 2] = dp.hw.spad_kb as f64;
    for (i, &d) in dp.sw.loop_order.iter().enumerate() {
        f[FEAT_LOOP_ORDER + i] = d as f64;
    }
    for l in 0..NUM_LEVELS {
        for d in 0..NUM_DIMS {
            f[tiling_feature_index(l, d)] = dp.sw.tiling[l][d] as f64;
        }
    }
    for (d, &v) in dp.layer.dims().iter().enumerate() {
        f[FEAT_LAYER + d] = v as f64;
    }
    f[FEAT_STRIDE] = dp.layer.stride as f64;
    f[FEAT_DILATION] = dp.layer.dilation as f64;
    f
}

/// Inverse of [`raw_features`].
pub fn decode_raw(raw: &[f64; FEATURE_DIM]) -> Result<DesignPoint> {
    let as_u64 = |x: f64| -> Result<u64> {
        let r = x.round();
        if !r.is_finite() || r < 0.0 || (x - r).abs() > 1e-6 {
            return Err(Error::InvalidDesign(format!("feature value {x} is not an integer")));
        }
        Ok(r as u64)
    };
    let hw = HwConfig::new(
        as_u64(raw[FEAT_HW])? as u32,
        as_u64(raw[FEAT_HW + 1])? as u32,
        as_u64(raw[FEAT_HW + 2])? as u32,
    )?;
    let mut loop_order = [0u8; NUM_DIMS];
    for (i, slot) in loop_order.iter_mut().enumerate() {
        *slot = as_u64(raw[FEAT_LOOP_ORDER + i])? as u8;
    }
    let mut tiling = [[0u64; NUM_DIMS]; NUM_LEVELS];
    for (l, row) in tiling.iter_mut().enumerate() {
        for (d, f) in row.iter_mut().enumerate() {
            *f = as_u64(raw[tiling_feature_index(l, d)])?;
        }
    }
    let mut dims = [0u64; NUM_DIMS];
    for (d, v) in dims.iter_mut().enumerate() {
        *v = as_u64(raw[FEAT_LAYER + d])?;
    }
    let layer = LayerShape::new(dims, as_u64(raw[FEAT_STRIDE])?, as_u64(raw[FEAT_DILATION])?)?;
    let dp = DesignPoint {
        hw,
        sw: SwMapping { loop_order, tiling },
        layer,
    };
    check_design(&dp)?;
    Ok(dp)
}

/// Encodes a design point into the scaled 40-component feature vector.
pub fn encode_features(dp: &DesignPoint) -> Result<FeatureVector> {
    check_design(dp)?;
    Ok(encode_unchecked(dp))
}

pub(crate) fn encode_unchecked(dp: &DesignPoint) -> FeatureVector {
    let raw = raw_features(dp);
    let scales = feature_scales();
    let mut out = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        out[i] = scales[i].apply(raw[i]);
    }
    FeatureVector(out)
}

/// Inverse of [`encode_features`] (rounds back onto the integer lattice).
pub fn decode_features(fv: &FeatureVector) -> Result<DesignPoint> {
    let scales = feature_scales();
    let mut raw = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        raw[i] = scales[i].invert(fv.0[i]).round();
    }
    decode_raw(&raw)
}

// ---------------------------------------------------------------------------
// Workload files
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub layers: Vec<LayerShape>,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidWorkload(format!("workload {:?} has no layers", self.name)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::context(format!("workload {:?} layer {i}", self.name), e))?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WorkloadFile {
    One(Workload),
    Many(Vec<Workload>),
}

/// Parses a workload document: one `{"name", "layers"}` object or an array of them.
pub fn parse_workloads(text: &str) -> Result<Vec<Workload>> {
    if text.trim().is_empty() {
        return Err(Error::InvalidWorkload("empty workload file".into()));
    }
    let parsed: WorkloadFile =
        serde_json::from_str(text).map_err(|e| Error::InvalidWorkload(format!("parse error: {e}")))?;
    let workloads = match parsed {
        WorkloadFile::One(w) => vec![w],
        WorkloadFile::Many(ws) => ws,
    };
    if workloads.is_empty() {
        return Err(Error::InvalidWorkload("no workloads in file".into()));
    }
    for w in &workloads {
        w.validate()?;
    }
    Ok(workloads)
}

pub fn load_workload(path: impl AsRef<Path>) -> Result<Vec<Workload>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_workloads(&text).map_err(|e| Error::context(path.display().to_string(), e))
}

const BUNDLED: [(&str, &str); 4] = [
    ("resnet-like", include_str!("../workloads/resnet-like.json")),
    ("unet-like", include_str!("../workloads/unet-like.json")),
    ("bert-like", include_str!("../workloads/bert-like.json")),
    ("retinanet-like", include_str!("../workloads/retinanet-like.json")),
];

/// The four workloads shipped with the crate.
pub fn bundled_workloads() -> Vec<Workload> {
    BUNDLED
        .iter()
        .map(|(_, text)| {
            parse_workloads(text)
                .expect("bundled workload parses")
                .remove(0)
        })
        .collect()
}

pub fn bundled_workload(name: &str) -> Option<Workload> {
    bundled_workloads().into_iter().find(|w| w.name == name)
}

/// Distinct layers across workloads, in first-seen order.
pub fn unique_layers(workloads: &[Workload]) -> Vec<LayerShape> {
    let mut seen = HashSet::new();
    workloads
        .iter()
        .flat_map(|w| w.layers.iter().copied())
        .filter(|l| seen.insert(*l))
        .collect()
}
