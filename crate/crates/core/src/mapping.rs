//! Weight-to-conductance mapping.
//!
//! Decomposes signed integer weight matrices into non-negative programmable
//! matrices under four schemes (offset subtraction and differential cells,
//! each with or without weight bit slicing), maps integers linearly onto
//! normalized conductances, and partitions tall matrices across arrays.
//!
//! Conductances are normalized so that `G_max = 1` throughout; physical
//! siemens never appear.

use std::fmt;
use std::ops::Range;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// All weights shifted by a constant so the programmed matrix is
    /// non-negative; the offset term is subtracted after accumulation.
    Offset,
    /// Signed weights as the difference of two cell conductances, subtracted
    /// in the analog domain.
    Differential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputAccumulation {
    /// Input bits accumulated by analog circuitry before a single ADC
    /// conversion.
    Analog,
    /// Each input bit digitized separately, then shift-and-add.
    Digital,
}

/// `G_max / G_min` of the memory cell. Serialized as a number or the string
/// `"inf"` (JSON has no infinity literal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnOffRatio(pub f64);

impl OnOffRatio {
    pub const INFINITE: OnOffRatio = OnOffRatio(f64::INFINITY);

    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }

    /// `G_min` in normalized units: `1 / ratio`, or 0 when infinite.
    pub fn g_min<R: Real>(&self) -> R {
        if self.0.is_infinite() {
            R::zero()
        } else {
            R::from_f(1.0 / self.0)
        }
    }
}

impl fmt::Display for OnOffRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for OnOffRatio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for OnOffRatio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = OnOffRatio;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a number > 1 or \"inf\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<OnOffRatio, E> {
                Ok(OnOffRatio(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<OnOffRatio, E> {
                Ok(OnOffRatio(v as f64))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<OnOffRatio, E> {
                Ok(OnOffRatio(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<OnOffRatio, E> {
                match v {
                    "inf" | "infinite" | "infinity" => Ok(OnOffRatio::INFINITE),
                    _ => v
                        .parse::<f64>()
                        .map(OnOffRatio)
                        .map_err(|_| E::custom(format!("bad on/off ratio {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// How a layer's weights map onto memory cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingConfig {
    pub scheme: Scheme,
    /// Network weight resolution in bits (signed).
    pub weight_bits: u32,
    /// Bits stored per cell (`B_W`). Unsliced: `weight_bits` for offset,
    /// `weight_bits - 1` for differential.
    pub bits_per_cell: u32,
    pub on_off_ratio: OnOffRatio,
    /// Maximum rows per array; taller matrices are partitioned evenly.
    pub max_rows: usize,
    pub input_accumulation: InputAccumulation,
    /// Offset scheme only: compute the offset term with an extra column of
    /// cells programmed to the center code, digitized and subtracted.
    #[serde(default)]
    pub unit_column: bool,
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.weight_bits) {
            return Err(Error::Mapping(format!(
                "weight_bits must be in [2, 16], got {}",
                self.weight_bits
            )));
        }
        if self.bits_per_cell == 0 {
            return Err(Error::Mapping("bits_per_cell must be >= 1".into()));
        }
        if self.max_rows == 0 {
            return Err(Error::Mapping("max_rows must be >= 1".into()));
        }
        if !(self.on_off_ratio.0 > 1.0) {
            return Err(Error::Mapping(format!(
                "on_off_ratio must be > 1 or infinite, got {}",
                self.on_off_ratio
            )));
        }
        match self.scheme {
            Scheme::Offset => {
                if self.bits_per_cell != self.weight_bits
                    && self.weight_bits % self.bits_per_cell != 0
                {
                    return Err(Error::Mapping(format!(
                        "offset scheme: weight_bits ({}) must equal or be divisible by \
                         bits_per_cell ({})",
                        self.weight_bits, self.bits_per_cell
                    )));
                }
            }
            Scheme::Differential => {
                if self.unit_column {
                    return Err(Error::Mapping(
                        "unit_column applies to the offset scheme only".into(),
                    ));
                }
                if self.bits_per_cell > self.weight_bits - 1 {
                    return Err(Error::Mapping(format!(
                        "differential scheme: bits_per_cell ({}) exceeds magnitude bits ({})",
                        self.bits_per_cell,
                        self.weight_bits - 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_differential(&self) -> bool {
        self.scheme == Scheme::Differential
    }

    pub fn is_sliced(&self) -> bool {
        self.slice_plan().slices > 1
    }

    /// Representable signed weight range: `[-(2^(wb-1)-1), 2^(wb-1)-1]`.
    /// The most negative two's-complement code is never used.
    pub fn weight_range(&self) -> (i64, i64) {
        let m = (1i64 << (self.weight_bits - 1)) - 1;
        (-m, m)
    }

    /// Offset added to weights under the offset scheme: `2^(wb-1)`.
    pub fn offset_code(&self) -> i64 {
        1i64 << (self.weight_bits - 1)
    }

    /// Input bits per ADC conversion given an activation resolution:
    /// all of them when accumulated in analog, one when digital.
    pub fn input_bits_per_conversion(&self, act_bits: u32) -> u32 {
        match self.input_accumulation {
            InputAccumulation::Analog => act_bits,
            InputAccumulation::Digital => 1,
        }
    }

    /// The slice decomposition implied by this config.
    pub fn slice_plan(&self) -> SlicePlan {
        match self.scheme {
            Scheme::Offset => {
                if self.bits_per_cell == self.weight_bits {
                    SlicePlan {
                        slices: 1,
                        shifts: vec![0],
                        v_max: (1u32 << self.weight_bits) - 1,
                    }
                } else {
                    let s = (self.weight_bits / self.bits_per_cell) as usize;
                    SlicePlan {
                        slices: s,
                        shifts: (0..s as u32).map(|i| i * self.bits_per_cell).collect(),
                        v_max: (1u32 << self.bits_per_cell) - 1,
                    }
                }
            }
            Scheme::Differential => {
                let mag_bits = self.weight_bits - 1;
                if self.bits_per_cell == mag_bits {
                    SlicePlan {
                        slices: 1,
                        shifts: vec![0],
                        v_max: (1u32 << mag_bits) - 1,
                    }
                } else {
                    let s = mag_bits.div_ceil(self.bits_per_cell) as usize;
                    SlicePlan {
                        slices: s,
                        shifts: (0..s as u32).map(|i| i * self.bits_per_cell).collect(),
                        v_max: (1u32 << self.bits_per_cell) - 1,
                    }
                }
            }
        }
    }
}

/// Per-slice significance and value range. Slice 0 is the least significant;
/// slice `s` carries weight `2^shifts[s]` and values in `[0, v_max]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SlicePlan {
    pub slices: usize,
    pub shifts: Vec<u32>,
    pub v_max: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// The single matrix of an offset-scheme slice.
    Single,
    /// Positive-magnitude cells of a differential pair.
    Plus,
    /// Negative-magnitude cells of a differential pair.
    Minus,
}

/// One programmable matrix: a `(partition, slice, polarity)` cell group.
/// When the stack has a unit column it is appended as the last column of
/// every offset array (`codes.ncols() == weight_cols + 1`).
#[derive(Debug, Clone, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct StackArray<R> {
    pub partition: usize,
    pub slice: usize,
    pub polarity: Polarity,
    /// Non-negative integer codes in `[0, v_max]`
    /// (offset unsliced: `[1, 2^wb - 1]`).
    pub codes: Array2<u32>,
    /// Target conductances, normalized to `G_max = 1`.
    pub conductance: Array2<R>,
}

/// The full set of programmable matrices for one weight matrix.
#[derive(Debug, Clone, Serialize)]
#[serde(bound(serialize = "R: Serialize"))]
pub struct ConductanceStack<R> {
    pub scheme: Scheme,
    pub plan: SlicePlan,
    /// `2^(weight_bits-1)` for the offset scheme.
    pub offset_code: Option<i64>,
    pub g_min: R,
    pub rows: usize,
    pub cols: usize,
    /// Row ranges of each partition, in original row order.
    pub partitions: Vec<Range<usize>>,
    /// Arrays ordered by `(partition, slice, polarity)`, polarity fastest.
    pub arrays: Vec<StackArray<R>>,
    pub has_unit_column: bool,
}

impl<R> ConductanceStack<R> {
    pub fn arrays_per_partition(&self) -> usize {
        self.plan.slices * if self.scheme == Scheme::Differential { 2 } else { 1 }
    }

    pub fn array(&self, partition: usize, slice: usize, polarity: Polarity) -> &StackArray<R> {
        let per = self.arrays_per_partition();
        let pol = match (self.scheme, polarity) {
            (Scheme::Offset, Polarity::Single) => 0,
            (Scheme::Differential, Polarity::Plus) => 0,
            (Scheme::Differential, Polarity::Minus) => 1,
            _ => panic!("polarity {polarity:?} not present in {:?} stack", self.scheme),
        };
        let idx = partition * per
            + slice * if self.scheme == Scheme::Differential { 2 } else { 1 }
            + pol;
        &self.arrays[idx]
    }
}

/// Split `rows` into `ceil(rows / max_rows)` contiguous blocks whose sizes
/// differ by at most one.
pub fn partition_rows(rows: usize, max_rows: usize) -> Vec<Range<usize>> {
    let parts = rows.div_ceil(max_rows).max(1);
    let base = rows / parts;
    let rem = rows % parts;
    let mut ranges = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < rem);
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

/// Split a matrix of non-negative integers into bit slices, least
/// significant first; slice `s` carries significance `2^(s*bits_per_slice)`.
pub fn bit_slices(values: &Array2<u32>, bits_per_slice: u32, slices: usize) -> Vec<Array2<u32>> {
    let v_max = (1u32 << bits_per_slice) - 1;
    (0..slices)
        .map(|s| values.mapv(|v| (v >> (s as u32 * bits_per_slice)) & v_max))
        .collect()
}

/// Linear integer-to-conductance map: `G = g_min + (v / v_max) * (1 - g_min)`.
/// Code 0 maps to the minimum conductance state, `v_max` to `G_max = 1`.
pub fn integers_to_conductance<R: Real>(
    values: &Array2<u32>,
    v_max: u32,
    g_min: R,
) -> Result<Array2<R>> {
    if g_min < R::zero() || g_min >= R::one() {
        return Err(Error::Mapping(format!("g_min must be in [0, 1), got {g_min}")));
    }
    if let Some(bad) = values.iter().find(|&&v| v > v_max) {
        return Err(Error::Mapping(format!(
            "code {bad} out of range [0, {v_max}]"
        )));
    }
    let span = R::one() - g_min;
    let inv = R::from_f(1.0 / v_max as f64);
    Ok(values.mapv(|v| g_min + R::from_f(v as f64) * inv * span))
}

/// Decompose a signed integer weight matrix into a [`ConductanceStack`]
/// under `cfg`. The stack satisfies the scheme's reconstruction identity
/// exactly in integer arithmetic; matrices taller than `cfg.max_rows` are
/// partitioned evenly.
pub fn decompose<R: Real>(w: &Array2<i32>, cfg: &MappingConfig) -> Result<ConductanceStack<R>> {
    cfg.validate()?;
    let (rows, cols) = w.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Mapping("empty weight matrix".into()));
    }
    let (w_min, w_max) = cfg.weight_range();
    if let Some(bad) = w.iter().find(|&&v| (v as i64) < w_min || (v as i64) > w_max) {
        return Err(Error::Mapping(format!(
            "weight {bad} outside representable range [{w_min}, {w_max}]"
        )));
    }

    let plan = cfg.slice_plan();
    let g_min = cfg.on_off_ratio.g_min::<R>();
    let partitions = partition_rows(rows, cfg.max_rows);
    let unit = cfg.unit_column && cfg.scheme == Scheme::Offset;
    let offset_code = (cfg.scheme == Scheme::Offset).then(|| cfg.offset_code());

    let mut arrays = Vec::new();
    for (pi, range) in partitions.iter().enumerate() {
        let part_rows = range.len();
        for (si, &shift) in plan.shifts.iter().enumerate() {
            match cfg.scheme {
                Scheme::Offset => {
                    let width = cols + usize::from(unit);
                    let mut codes = Array2::zeros((part_rows, width));
                    let unit_digit = slice_digit(cfg.offset_code() as u64, shift, plan.v_max);
                    for (r, row) in range.clone().enumerate() {
                        for c in 0..cols {
                            let prog = (w[[row, c]] as i64 + cfg.offset_code()) as u64;
                            codes[[r, c]] = slice_digit(prog, shift, plan.v_max);
                        }
                        if unit {
                            codes[[r, cols]] = unit_digit;
                        }
                    }
                    let conductance = integers_to_conductance(&codes, plan.v_max, g_min)?;
                    arrays.push(StackArray {
                        partition: pi,
                        slice: si,
                        polarity: Polarity::Single,
                        codes,
                        conductance,
                    });
                }
                Scheme::Differential => {
                    let mut plus = Array2::zeros((part_rows, cols));
                    let mut minus = Array2::zeros((part_rows, cols));
                    for (r, row) in range.clone().enumerate() {
                        for c in 0..cols {
                            let v = w[[row, c]] as i64;
                            let digit = slice_digit(v.unsigned_abs(), shift, plan.v_max);
                            if v >= 0 {
                                plus[[r, c]] = digit;
                            } else {
                                minus[[r, c]] = digit;
                            }
                        }
                    }
                    let plus_g = integers_to_conductance(&plus, plan.v_max, g_min)?;
                    let minus_g = integers_to_conductance(&minus, plan.v_max, g_min)?;
                    arrays.push(StackArray {
                        partition: pi,
                        slice: si,
                        polarity: Polarity::Plus,
                        codes: plus,
                        conductance: plus_g,
                    });
                    arrays.push(StackArray {
                        partition: pi,
                        slice: si,
                        polarity: Polarity::Minus,
                        codes: minus,
                        conductance: minus_g,
                    });
                }
            }
        }
    }

    // Differential arrays are interleaved (plus, minus) per slice; reorder to
    // (partition, slice, polarity) with polarity fastest -- already the case.
    let stack = ConductanceStack {
        scheme: cfg.scheme,
        plan,
        offset_code,
        g_min,
        rows,
        cols,
        partitions,
        arrays,
        has_unit_column: unit,
    };
    debug_assert!(stack_codes_in_range(&stack));
    Ok(stack)
}

#[inline]
fn slice_digit(value: u64, shift: u32, v_max: u32) -> u32 {
    ((value >> shift) as u32) & v_max
}

fn stack_codes_in_range<R>(stack: &ConductanceStack<R>) -> bool {
    stack
        .arrays
        .iter()
        .all(|a| a.codes.iter().all(|&v| v <= stack.plan.v_max))
}

/// Exact inverse of [`decompose`]: recovers the signed integer weight matrix
/// from the stack's integer codes.
pub fn reconstruct<R: Real>(stack: &ConductanceStack<R>) -> Result<Array2<i32>> {
    let mut w = Array2::<i32>::zeros((stack.rows, stack.cols));
    for array in &stack.arrays {
        let shift = stack.plan.shifts[array.slice];
        let range = &stack.partitions[array.partition];
        for (r, row) in range.clone().enumerate() {
            for c in 0..stack.cols {
                let contrib = (array.codes[[r, c]] as i64) << shift;
                let signed = match array.polarity {
                    Polarity::Minus => -contrib,
                    _ => contrib,
                };
                w[[row, c]] += signed as i32;
            }
        }
    }
    if let Some(off) = stack.offset_code {
        w.mapv_inplace(|v| v - off as i32);
    }
    Ok(w)
}

/// Mean target conductance per slice (polarities and partitions merged), as
/// a fraction of `G_max`. The unit column, when present, is excluded.
pub fn conductance_stats<R: Real>(stack: &ConductanceStack<R>) -> Vec<f64> {
    let mut sums = vec![0.0f64; stack.plan.slices];
    let mut counts = vec![0u64; stack.plan.slices];
    for array in &stack.arrays {
        for r in 0..array.conductance.nrows() {
            for c in 0..stack.cols {
                sums[array.slice] += array.conductance[[r, c]].to_f();
                counts[array.slice] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn cfg(scheme: Scheme, weight_bits: u32, bits_per_cell: u32) -> MappingConfig {
        MappingConfig {
            scheme,
            weight_bits,
            bits_per_cell,
            on_off_ratio: OnOffRatio::INFINITE,
            max_rows: 1152,
            input_accumulation: InputAccumulation::Analog,
            unit_column: false,
        }
    }

    #[test]
    fn six_bit_matrix_splits_into_two_three_bit_slices() {
        // [[12,58],[29,50]] = 2^3 [[1,7],[3,6]] + [[4,2],[5,2]]
        let w = array![[12u32, 58], [29, 50]];
        let slices = bit_slices(&w, 3, 2);
        assert_eq!(slices[1], array![[1u32, 7], [3, 6]]);
        assert_eq!(slices[0], array![[4u32, 2], [5, 2]]);
        // reconstruction weight of the high slice is 2^3
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!((slices[1][[r, c]] << 3) + slices[0][[r, c]], w[[r, c]]);
            }
        }
    }

    #[test]
    fn offset_unsliced_code_examples() {
        let c = cfg(Scheme::Offset, 8, 8);
        let w = array![[0i32, -127, 127]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        let codes = &stack.arrays[0].codes;
        assert_eq!(codes[[0, 0]], 128);
        assert_eq!(codes[[0, 1]], 1);
        assert_eq!(codes[[0, 2]], 255);
        // code 0 is left unused
        assert!(stack.arrays[0].codes.iter().all(|&v| v >= 1));
    }

    #[test]
    fn offset_two_bit_slice_examples() {
        let c = cfg(Scheme::Offset, 8, 2);
        let w = array![[0i32, -1]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        // w=0 -> 128 -> slices (W3,W2,W1,W0) = (2,0,0,0), stored low-first
        let digits_of = |col: usize| -> Vec<u32> {
            (0..4).map(|s| stack.array(0, s, Polarity::Single).codes[[0, col]]).collect()
        };
        assert_eq!(digits_of(0), vec![0, 0, 0, 2]);
        // w=-1 -> 127 -> (1,3,3,3)
        assert_eq!(digits_of(1), vec![3, 3, 3, 1]);
    }

    #[test]
    fn differential_unsliced_examples() {
        let c = cfg(Scheme::Differential, 8, 7);
        let w = array![[3i32, -5]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        let plus = &stack.array(0, 0, Polarity::Plus).codes;
        let minus = &stack.array(0, 0, Polarity::Minus).codes;
        assert_eq!((plus[[0, 0]], minus[[0, 0]]), (3, 0));
        assert_eq!((plus[[0, 1]], minus[[0, 1]]), (0, 5));
    }

    #[test]
    fn differential_pair_has_one_zero_cell_per_slice() {
        let c = cfg(Scheme::Differential, 8, 2);
        let mut rng = StdRng::seed_from_u64(5);
        let w = Array2::from_shape_fn((32, 8), |_| rng.random_range(-127i32..=127));
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        for s in 0..stack.plan.slices {
            let p = &stack.array(0, s, Polarity::Plus).codes;
            let m = &stack.array(0, s, Polarity::Minus).codes;
            for (a, b) in p.iter().zip(m.iter()) {
                assert!(*a == 0 || *b == 0);
            }
        }
    }

    #[test]
    fn differential_two_bit_slices_of_nine() {
        let c = cfg(Scheme::Differential, 8, 2);
        let w = array![[9i32]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        // 9 = 2^2*2 + 1: plus slices high->low (0,0,2,1)
        let plus: Vec<u32> =
            (0..4).rev().map(|s| stack.array(0, s, Polarity::Plus).codes[[0, 0]]).collect();
        assert_eq!(plus, vec![0, 0, 2, 1]);
        for s in 0..4 {
            assert_eq!(stack.array(0, s, Polarity::Minus).codes[[0, 0]], 0);
        }
    }

    #[test]
    fn conductance_map_endpoints() {
        let v = array![[0u32, 5, 10]];
        let g = integers_to_conductance::<f64>(&v, 10, 0.01).unwrap();
        assert!((g[[0, 0]] - 0.01).abs() < 1e-15);
        assert_eq!(g[[0, 2]], 1.0);
        let g0 = integers_to_conductance::<f64>(&array![[5u32]], 10, 0.0).unwrap();
        assert_eq!(g0[[0, 0]], 0.5);
    }

    #[test]
    fn conductance_map_rejects_out_of_range() {
        let v = array![[11u32]];
        assert!(integers_to_conductance::<f64>(&v, 10, 0.0).is_err());
    }

    #[test]
    fn stats_offset_zero_mean_near_half() {
        let mut rng = StdRng::seed_from_u64(11);
        let w = Array2::from_shape_fn((64, 64), |_| rng.random_range(-127i32..=127));
        let stack: ConductanceStack<f64> = decompose(&w, &cfg(Scheme::Offset, 8, 8)).unwrap();
        let stats = conductance_stats(&stack);
        assert!((stats[0] - 0.5).abs() < 0.02, "mean {}", stats[0]);
    }

    #[test]
    fn stats_differential_all_zero_is_zero() {
        let w = Array2::zeros((8, 8));
        let stack: ConductanceStack<f64> =
            decompose(&w, &cfg(Scheme::Differential, 8, 7)).unwrap();
        assert_eq!(conductance_stats(&stack)[0], 0.0);
    }

    #[test]
    fn stats_differential_gaussian_small_and_monotone() {
        // zero-peaked weights: differential mean << 0.1, and the most
        // significant slice mean <= least significant slice mean
        let mut rng = StdRng::seed_from_u64(3);
        let normal = Normal::new(0.0f64, 10.0).unwrap();
        let w = Array2::from_shape_fn((128, 64), |_| {
            (normal.sample(&mut rng).round() as i32).clamp(-127, 127)
        });
        let un = decompose::<f64>(&w, &cfg(Scheme::Differential, 8, 7)).unwrap();
        let stats = conductance_stats(&un);
        assert!(stats[0] < 0.1, "unsliced mean {}", stats[0]);
        let sl = decompose::<f64>(&w, &cfg(Scheme::Differential, 8, 2)).unwrap();
        let stats = conductance_stats(&sl);
        assert!(
            stats[stats.len() - 1] <= stats[0],
            "slice means not monotone: {stats:?}"
        );
    }

    #[test]
    fn differential_proportionality() {
        // with g_min = 0, G+ - G- = w / v_max exactly
        let c = cfg(Scheme::Differential, 8, 7);
        let w = array![[37i32, -101, 0]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        let p = &stack.array(0, 0, Polarity::Plus).conductance;
        let m = &stack.array(0, 0, Polarity::Minus).conductance;
        for col in 0..3 {
            let diff = p[[0, col]] - m[[0, col]];
            assert!((diff - w[[0, col]] as f64 / 127.0).abs() < 1e-15);
        }
    }

    #[test]
    fn partition_rows_even() {
        assert_eq!(partition_rows(1152, 72).len(), 16);
        assert_eq!(partition_rows(100, 64), vec![0..50, 50..100]);
        let parts = partition_rows(103, 25);
        assert_eq!(parts.len(), 5);
        let sizes: Vec<usize> = parts.iter().map(|r| r.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 103);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn unit_column_codes() {
        let mut c = cfg(Scheme::Offset, 8, 2);
        c.unit_column = true;
        let w = array![[5i32], [-9]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        assert!(stack.has_unit_column);
        // offset code 128 has 2-bit digits (2,0,0,0) high->low
        let unit: Vec<u32> =
            (0..4).map(|s| stack.array(0, s, Polarity::Single).codes[[0, 1]]).collect();
        assert_eq!(unit, vec![0, 0, 0, 2]);
        // reconstruct ignores the unit column
        let back = reconstruct(&stack).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn reconstruct_zero_stacks() {
        let diff = decompose::<f64>(&Array2::zeros((4, 4)), &cfg(Scheme::Differential, 8, 7))
            .unwrap();
        assert_eq!(reconstruct(&diff).unwrap(), Array2::<i32>::zeros((4, 4)));
        let off = decompose::<f64>(&Array2::zeros((4, 4)), &cfg(Scheme::Offset, 8, 8)).unwrap();
        assert!(off.arrays[0].codes.iter().all(|&v| v == 128));
        assert_eq!(reconstruct(&off).unwrap(), Array2::<i32>::zeros((4, 4)));
    }

    #[test]
    fn out_of_range_weight_rejected() {
        let w = array![[-128i32]];
        assert!(decompose::<f64>(&w, &cfg(Scheme::Offset, 8, 8)).is_err());
    }

    #[test]
    fn nine_bit_differential_range() {
        let c = cfg(Scheme::Differential, 9, 2);
        let w = array![[255i32, -255]];
        let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
        assert_eq!(reconstruct(&stack).unwrap(), w);
    }

    /// Pure-integer MVM through the stack codes, per the reconstruction
    /// identities (slice-weighted sums, polarity subtraction, offset
    /// subtraction). Independent of the analog simulation path.
    fn integer_stack_mvm<R: Real>(stack: &ConductanceStack<R>, x: &[i64]) -> Vec<i64> {
        let mut y = vec![0i64; stack.cols];
        for array in &stack.arrays {
            let shift = stack.plan.shifts[array.slice];
            let range = &stack.partitions[array.partition];
            for c in 0..stack.cols {
                let mut dot = 0i64;
                for (r, row) in range.clone().enumerate() {
                    dot += array.codes[[r, c]] as i64 * x[row];
                }
                let signed = if array.polarity == Polarity::Minus { -dot } else { dot };
                y[c] += signed << shift;
            }
        }
        if let Some(off) = stack.offset_code {
            let x_sum: i64 = x.iter().sum();
            for v in &mut y {
                *v -= off * x_sum;
            }
        }
        y
    }

    fn all_schemes() -> Vec<MappingConfig> {
        vec![
            cfg(Scheme::Offset, 8, 8),
            cfg(Scheme::Offset, 8, 2),
            cfg(Scheme::Differential, 8, 7),
            cfg(Scheme::Differential, 8, 2),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

        #[test]
        fn reconstruct_inverts_decompose(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..12) {
            let mut rng = StdRng::seed_from_u64(seed);
            let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-127i32..=127));
            for c in all_schemes() {
                let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
                prop_assert_eq!(reconstruct(&stack).unwrap(), w.clone());
            }
        }

        #[test]
        fn scheme_equivalence_integer_mvm(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let rows = rng.random_range(1usize..48);
            let cols = rng.random_range(1usize..8);
            let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-127i32..=127));
            let x: Vec<i64> = (0..rows).map(|_| rng.random_range(0i64..=255)).collect();
            let expect: Vec<i64> = (0..cols)
                .map(|c| (0..rows).map(|r| w[[r, c]] as i64 * x[r]).sum())
                .collect();
            for c in all_schemes() {
                let stack: ConductanceStack<f64> = decompose(&w, &c).unwrap();
                prop_assert_eq!(&integer_stack_mvm(&stack, &x), &expect);
            }
        }

        #[test]
        fn partitioned_mvm_matches_unpartitioned(seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let rows = rng.random_range(10usize..80);
            let w = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-127i32..=127));
            let x: Vec<i64> = (0..rows).map(|_| rng.random_range(0i64..=255)).collect();
            let mut whole = cfg(Scheme::Differential, 8, 2);
            whole.max_rows = rows;
            let mut parted = whole.clone();
            parted.max_rows = 7;
            let a: ConductanceStack<f64> = decompose(&w, &whole).unwrap();
            let b: ConductanceStack<f64> = decompose(&w, &parted).unwrap();
            prop_assert_eq!(integer_stack_mvm(&a, &x), integer_stack_mvm(&b, &x));
        }
    }
}
