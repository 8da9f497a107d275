//! ADC quantization, range calibration, and analog-resolution accounting.
//!
//! The quantizer is uniform mid-tread with end clipping. Ranges are either
//! the full possible output range of an array or calibrated to the inner
//! P% interval of outputs collected on a calibration set, per
//! `(layer, slice, partition)` group. For bit-sliced layers the calibrated
//! slice ranges can be constrained to differ only by powers of two so that
//! slice results aggregate by shift-and-add without extra scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{round_half_away, Real};

/// Ideal analog resolution `B_out`: the number of bits needed to give every
/// possible dot-product output its own level.
///
/// `b_w` is bits per cell, `b_in` input bits per conversion, `n` the number
/// of rows summed. Differential pairs double the signed output range, adding
/// one bit; the reduced "-1" branch applies when the effective weight bits
/// (sign included) or the input bits are 1.
pub fn fpg_bits(b_w: u32, b_in: u32, n: usize, differential: bool) -> f64 {
    assert!(b_w >= 1 && b_in >= 1 && n >= 1, "invalid fpg operands");
    let b_w_eff = b_w + u32::from(differential);
    let base = b_w_eff as f64 + b_in as f64 + (n as f64).log2();
    if b_w_eff == 1 || b_in == 1 {
        base - 1.0
    } else {
        base
    }
}

/// The ADC resolution satisfying the full precision guarantee.
pub fn fpg_adc_bits(b_w: u32, b_in: u32, n: usize, differential: bool) -> u32 {
    fpg_bits(b_w, b_in, n, differential).ceil() as u32
}

/// Uniform mid-tread quantizer with end clipping. Returns the digital code
/// and its dequantized value: `code = clamp(round((v - lo) / lsb))` with
/// `lsb = (hi - lo) / (2^bits - 1)`, dequantized `lo + code * lsb`.
pub fn quantize<R: Real>(v: R, lo: R, hi: R, bits: u32) -> Result<(u32, R)> {
    if !(hi > lo) {
        return Err(Error::Adc(format!("empty range [{lo}, {hi}]")));
    }
    if bits == 0 || bits > 30 {
        return Err(Error::Adc(format!("resolution {bits} bits out of range")));
    }
    let levels = R::from_f(((1u64 << bits) - 1) as f64);
    let t = (v - lo) / (hi - lo) * levels;
    let code = round_half_away(t).max(R::zero()).min(levels);
    let code_u = code.to_f() as u32;
    let deq = lo + code * (hi - lo) / levels;
    Ok((code_u, deq))
}

/// One ADC statistics/range group: a layer's weight slice on one partition.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct GroupKey {
    pub layer: usize,
    pub slice: usize,
    pub partition: usize,
}

#[derive(Debug, Clone)]
struct GroupStats<R> {
    samples: Vec<R>,
    max_abs: R,
    signed: bool,
}

/// Pre-ADC analog outputs collected per group on a calibration set.
/// Collection is mergeable: per-image accumulators merged in image order
/// give a deterministic result.
#[derive(Debug, Clone, Default)]
pub struct OutputStats<R> {
    groups: BTreeMap<GroupKey, GroupStats<R>>,
}

impl<R: Real> OutputStats<R> {
    pub fn new() -> Self {
        OutputStats {
            groups: BTreeMap::new(),
        }
    }

    /// Declare a group before collection; `max_abs` is the largest possible
    /// output magnitude (used for full-range fallbacks and degenerate
    /// floors).
    pub fn declare(&mut self, key: GroupKey, max_abs: R, signed: bool) {
        self.groups.entry(key).or_insert(GroupStats {
            samples: Vec::new(),
            max_abs,
            signed,
        });
    }

    pub fn record(&mut self, key: GroupKey, values: &[R]) {
        let group = self
            .groups
            .get_mut(&key)
            .expect("group must be declared before recording");
        group.samples.extend_from_slice(values);
    }

    pub fn merge(&mut self, other: OutputStats<R>) {
        for (key, mut stats) in other.groups {
            match self.groups.get_mut(&key) {
                Some(g) => g.samples.append(&mut stats.samples),
                None => {
                    self.groups.insert(key, stats);
                }
            }
        }
    }

    pub fn count(&self, key: &GroupKey) -> usize {
        self.groups.get(key).map_or(0, |g| g.samples.len())
    }

    pub fn keys(&self) -> impl Iterator<Item = &GroupKey> {
        self.groups.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.values().all(|g| g.samples.is_empty())
    }
}

/// Linearly interpolated quantile of sorted data, `q` in `[0, 1]`.
fn quantile_sorted<R: Real>(sorted: &[R], q: f64) -> R {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[i] + (sorted[i + 1] - sorted[i]) * R::from_f(frac)
    }
}

/// Calibrated per-group ADC ranges.
#[derive(Debug, Clone, Default)]
pub struct AdcRanges<R> {
    map: BTreeMap<GroupKey, (R, R)>,
}

impl<R: Real> AdcRanges<R> {
    pub fn new() -> Self {
        AdcRanges {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: GroupKey, lo: R, hi: R) {
        self.map.insert(key, (lo, hi));
    }

    pub fn get(&self, key: &GroupKey) -> Option<(R, R)> {
        self.map.get(key).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&GroupKey, &(R, R))> {
        self.map.iter()
    }

    /// Flat f64 view for serialization into run records.
    pub fn to_entries(&self) -> Vec<RangeEntry> {
        self.map
            .iter()
            .map(|(k, (lo, hi))| RangeEntry {
                layer: k.layer,
                slice: k.slice,
                partition: k.partition,
                lo: lo.to_f(),
                hi: hi.to_f(),
            })
            .collect()
    }

    pub fn from_entries(entries: &[RangeEntry]) -> Self {
        let mut ranges = AdcRanges::new();
        for e in entries {
            ranges.insert(
                GroupKey {
                    layer: e.layer,
                    slice: e.slice,
                    partition: e.partition,
                },
                R::from_f(e.lo),
                R::from_f(e.hi),
            );
        }
        ranges
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeEntry {
    pub layer: usize,
    pub slice: usize,
    pub partition: usize,
    pub lo: f64,
    pub hi: f64,
}

/// Range selection policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangePolicy {
    /// `[0, dV_max]` (or symmetric for signed outputs): no clipping, many
    /// wasted levels.
    FullRange,
    /// Tightest interval containing the inner P% of collected outputs.
    InnerPercentile,
}

/// ADC configuration: resolution, policy, and calibrated ranges.
#[derive(Debug, Clone)]
pub struct AdcConfig<R> {
    /// `None` disables the ADC entirely.
    pub bits: Option<u32>,
    pub policy: RangePolicy,
    /// Inner percentile P for [`RangePolicy::InnerPercentile`].
    pub percentile: f64,
    /// Constrain slice ranges within a layer to differ by powers of two.
    pub power_of_two_slices: bool,
    /// Collect calibration statistics with programming errors enabled
    /// (default false: calibration reflects nominal hardware).
    pub calibrate_with_errors: bool,
    pub ranges: AdcRanges<R>,
}

impl<R: Real> AdcConfig<R> {
    pub fn disabled() -> Self {
        AdcConfig {
            bits: None,
            policy: RangePolicy::FullRange,
            percentile: 99.98,
            power_of_two_slices: true,
            calibrate_with_errors: false,
            ranges: AdcRanges::new(),
        }
    }

    pub fn full_range(bits: u32) -> Self {
        AdcConfig {
            bits: Some(bits),
            ..AdcConfig::disabled()
        }
    }

    pub fn enabled(&self) -> bool {
        self.bits.is_some()
    }

    /// Resolve the quantization range for one group.
    ///
    /// `max_abs`/`signed` describe the group's full output range;
    /// `lattice_step` is the spacing of possible error-free analog outputs
    /// (`(1 - g_min) / v_max`). Full-range ADC levels are aligned to that
    /// lattice with an LSB of the smallest integer number of lattice steps
    /// that still spans the range, so that a resolution satisfying the full
    /// precision guarantee digitizes error-free outputs exactly.
    pub fn range_for(
        &self,
        key: &GroupKey,
        max_abs: R,
        signed: bool,
        lattice_step: R,
    ) -> Result<(R, R)> {
        match self.policy {
            RangePolicy::FullRange => {
                let bits = self
                    .bits
                    .ok_or_else(|| Error::Adc("full range needs a resolution".into()))?;
                let levels = (1u64 << bits) - 1;
                let span_levels = if signed { levels / 2 } else { levels };
                let units_needed = (max_abs / lattice_step).to_f();
                let k = (units_needed / span_levels as f64).ceil().max(1.0);
                let lsb = lattice_step * R::from_f(k);
                let lo = if signed {
                    -lsb * R::from_f(span_levels as f64)
                } else {
                    R::zero()
                };
                let hi = lo + lsb * R::from_f(levels as f64);
                Ok((lo, hi))
            }
            RangePolicy::InnerPercentile => self.ranges.get(key).ok_or_else(|| {
                Error::Adc(format!(
                    "no calibrated range for layer {} slice {} partition {}; run calibration",
                    key.layer, key.slice, key.partition
                ))
            }),
        }
    }
}

/// Calibrate per-group ranges to the tightest interval containing the inner
/// `p` percent of collected values (percentiles `(100-p)/2` and
/// `100-(100-p)/2`).
///
/// With `power_of_two_slices`, slice ranges within each `(layer, partition)`
/// are rescaled about their midpoints so each width equals the largest slice
/// width divided by the largest power of two that still covers that slice's
/// inner-P interval.
pub fn calibrate_ranges<R: Real>(
    stats: &OutputStats<R>,
    p: f64,
    power_of_two_slices: bool,
) -> Result<AdcRanges<R>> {
    if !(p > 50.0 && p <= 100.0) {
        return Err(Error::Adc(format!(
            "inner percentile must be in (50, 100], got {p}"
        )));
    }
    let mut ranges = AdcRanges::new();
    for (key, group) in &stats.groups {
        if group.samples.is_empty() {
            return Err(Error::Adc(format!(
                "no calibration statistics for layer {} slice {} partition {}",
                key.layer, key.slice, key.partition
            )));
        }
        let mut sorted = group.samples.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in outputs"));
        let tail = (100.0 - p) / 200.0;
        let mut lo = quantile_sorted(&sorted, tail);
        let mut hi = quantile_sorted(&sorted, 1.0 - tail);
        if !(hi > lo) {
            // degenerate distribution: epsilon floor relative to dV_max
            let floor = group.max_abs * R::from_f(1e-6);
            let floor = if floor > R::zero() {
                floor
            } else {
                R::from_f(1e-6)
            };
            hi = lo + floor;
            if group.signed {
                lo = lo - floor;
            }
        }
        ranges.insert(*key, lo, hi);
    }

    if power_of_two_slices {
        // group keys per (layer, partition)
        let mut by_lp: BTreeMap<(usize, usize), Vec<GroupKey>> = BTreeMap::new();
        for key in ranges.map.keys() {
            by_lp.entry((key.layer, key.partition)).or_default().push(*key);
        }
        for keys in by_lp.values() {
            if keys.len() < 2 {
                continue;
            }
            let widths: Vec<f64> = keys
                .iter()
                .map(|k| {
                    let (lo, hi) = ranges.map[k];
                    (hi - lo).to_f()
                })
                .collect();
            let w_max = widths.iter().cloned().fold(0.0, f64::max);
            for (k, w) in keys.iter().zip(&widths) {
                let pow = (w_max / w).log2().floor().max(0.0);
                let new_w = w_max / 2f64.powf(pow);
                let (lo, hi) = ranges.map[k];
                let mid = (lo + hi) * R::from_f(0.5);
                let half = R::from_f(new_w / 2.0);
                ranges.map.insert(*k, (mid - half, mid + half));
            }
        }
    }
    Ok(ranges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn fpg_reproduces_design_table() {
        // columns: b_w, b_in, n, differential, expected
        let cases = [
            (7u32, 8u32, 1152usize, true, 26.2f64),
            (1, 8, 1152, true, 20.2),
            (7, 8, 144, true, 23.2),
            (7, 1, 1152, true, 18.2),
            (2, 1, 72, false, 8.2),
        ];
        for (b_w, b_in, n, diff, want) in cases {
            let got = fpg_bits(b_w, b_in, n, diff);
            assert!(
                (got - want).abs() < 0.05,
                "fpg({b_w},{b_in},{n},{diff}) = {got}, want {want}"
            );
        }
        // ISAAC-style: 2 bits/cell, 1-bit inputs, 128 rows, offset -> 9.0
        assert!((fpg_bits(2, 1, 128, false) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn quantize_endpoints_and_clipping() {
        let (c0, d0) = quantize(0.0f64, 0.0, 255.0, 8).unwrap();
        assert_eq!((c0, d0), (0, 0.0));
        let (c1, d1) = quantize(255.0f64, 0.0, 255.0, 8).unwrap();
        assert_eq!((c1, d1), (255, 255.0));
        // above range clips to the top code
        let (c2, _) = quantize(400.0f64, 0.0, 255.0, 8).unwrap();
        assert_eq!(c2, 255);
        let (c3, _) = quantize(-10.0f64, 0.0, 255.0, 8).unwrap();
        assert_eq!(c3, 0);
        // interior value
        let (c4, d4) = quantize(100.4f64, 0.0, 255.0, 8).unwrap();
        assert_eq!(c4, 100);
        assert_eq!(d4, 100.0);
    }

    #[test]
    fn quantize_rejects_bad_range() {
        assert!(quantize(0.0f64, 1.0, 1.0, 8).is_err());
        assert!(quantize(0.0f64, 2.0, 1.0, 8).is_err());
    }

    proptest! {
        #[test]
        fn quantize_monotone_and_idempotent(
            a in -100.0f64..100.0, b in -100.0f64..100.0, bits in 1u32..12
        ) {
            prop_assume!(a < b);
            let vals: Vec<f64> = (0..200).map(|i| a - 5.0 + (b - a + 10.0) * i as f64 / 199.0).collect();
            let mut prev = 0u32;
            for (i, &v) in vals.iter().enumerate() {
                let (code, deq) = quantize(v, a, b, bits).unwrap();
                if i > 0 {
                    prop_assert!(code >= prev, "not monotone");
                }
                prev = code;
                // quantizing a dequantized value returns the same code
                let (code2, deq2) = quantize(deq, a, b, bits).unwrap();
                prop_assert_eq!(code, code2);
                prop_assert_eq!(deq.to_bits(), deq2.to_bits());
            }
        }
    }

    fn key(layer: usize, slice: usize, partition: usize) -> GroupKey {
        GroupKey {
            layer,
            slice,
            partition,
        }
    }

    #[test]
    fn full_percentile_covers_extremes() {
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 10.0, true);
        let data: Vec<f64> = (0..101).map(|i| -1.0 + 0.02 * i as f64).collect();
        stats.record(key(0, 0, 0), &data);
        let ranges = calibrate_ranges(&stats, 100.0, false).unwrap();
        let (lo, hi) = ranges.get(&key(0, 0, 0)).unwrap();
        assert!((lo - -1.0).abs() < 1e-12);
        assert!((hi - 1.0006).abs() < 0.01);
    }

    #[test]
    fn normal_quantiles_match_theory() {
        // 1e6 standard normals, P = 99.98 -> range ~ [-3.72, 3.72] +- 2%
        let mut rng = StdRng::seed_from_u64(123);
        let data: Vec<f64> = (0..1_000_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 100.0, true);
        stats.record(key(0, 0, 0), &data);
        let ranges = calibrate_ranges(&stats, 99.98, false).unwrap();
        let (lo, hi) = ranges.get(&key(0, 0, 0)).unwrap();
        // normal quantile at 99.99% is 3.719
        assert!((hi - 3.719).abs() / 3.719 < 0.02, "hi {hi}");
        assert!((lo + 3.719).abs() / 3.719 < 0.02, "lo {lo}");
        // oracle: direct sample quantiles
        let mut sorted = data.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let q_hi = quantile_sorted(&sorted, 1.0 - 0.0001);
        assert!((hi - q_hi).abs() < 1e-9);
    }

    #[test]
    fn coverage_of_inner_percentile() {
        let mut rng = StdRng::seed_from_u64(17);
        let data: Vec<f64> = (0..50_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 100.0, true);
        stats.record(key(0, 0, 0), &data);
        let p = 99.0;
        let ranges = calibrate_ranges(&stats, p, false).unwrap();
        let (lo, hi) = ranges.get(&key(0, 0, 0)).unwrap();
        let covered = data.iter().filter(|&&v| v >= lo && v <= hi).count();
        assert!(covered as f64 / data.len() as f64 >= p / 100.0 - 1e-3);
    }

    #[test]
    fn power_of_two_constraint_example() {
        // two slices with widths 1.0 and 0.3 -> widths 1.0 and 0.5
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 10.0, false);
        stats.declare(key(0, 1, 0), 10.0, false);
        let a: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        let b: Vec<f64> = (0..101).map(|i| 0.3 * i as f64 / 100.0).collect();
        stats.record(key(0, 0, 0), &a);
        stats.record(key(0, 1, 0), &b);
        let ranges = calibrate_ranges(&stats, 100.0, true).unwrap();
        let (lo0, hi0) = ranges.get(&key(0, 0, 0)).unwrap();
        let (lo1, hi1) = ranges.get(&key(0, 1, 0)).unwrap();
        assert!((hi0 - lo0 - 1.0).abs() < 1e-9);
        assert!((hi1 - lo1 - 0.5).abs() < 1e-9);
        // still covers the data
        assert!(lo1 <= 0.0 && hi1 >= 0.3);
    }

    #[test]
    fn degenerate_constant_zero_gets_floor() {
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 2048.0, false);
        stats.record(key(0, 0, 0), &vec![0.0; 100]);
        let ranges = calibrate_ranges(&stats, 99.98, false).unwrap();
        let (lo, hi) = ranges.get(&key(0, 0, 0)).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 2048.0 * 1e-6).abs() < 1e-12);
    }

    #[test]
    fn missing_group_stats_error() {
        let mut stats = OutputStats::<f64>::new();
        stats.declare(key(0, 0, 0), 1.0, false);
        assert!(calibrate_ranges(&stats, 99.98, false).is_err());
    }

    #[test]
    fn merge_is_order_preserving() {
        let mut a = OutputStats::<f64>::new();
        a.declare(key(0, 0, 0), 1.0, false);
        a.record(key(0, 0, 0), &[1.0, 2.0]);
        let mut b = OutputStats::<f64>::new();
        b.declare(key(0, 0, 0), 1.0, false);
        b.record(key(0, 0, 0), &[3.0]);
        a.merge(b);
        assert_eq!(a.count(&key(0, 0, 0)), 3);
    }

    #[test]
    fn range_entries_round_trip() {
        let mut r = AdcRanges::<f64>::new();
        r.insert(key(1, 2, 3), -0.5, 1.5);
        let entries = r.to_entries();
        let back = AdcRanges::<f64>::from_entries(&entries);
        assert_eq!(back.get(&key(1, 2, 3)), Some((-0.5, 1.5)));
    }
}
