//! Statistics and energy accounting.
//!
//! Pure op-count model per MVM configuration, an energy-per-op estimate from
//! user-supplied cost constants, a Monte-Carlo SNR experiment for bit
//! slicing under state-independent errors, and bit-line current statistics
//! of a mapped network.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{self, InputAccumulation, MappingConfig, OnOffRatio, Scheme};
use crate::netio::LayerKind;
use crate::pipeline::{quantize_activations, MappedNetwork, ProgrammedArrays};
use crate::scalar::Real;
use crate::xbar::{column_currents_ideal, InputBitPlanes};

/// Deterministic operation counts for one full MVM (one input vector through
/// all slices, polarities, and partitions of a weight matrix). Derived from
/// the configuration alone; `active_rows_per_bit` is the worst case (all
/// rows active per input bit).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub array_activations: u64,
    pub integrations: u64,
    pub adc_conversions: u64,
    pub shift_adds: u64,
    pub digital_subtractions: u64,
    pub cells_programmed: u64,
    pub slices: u64,
    pub partitions: u64,
    pub active_rows_per_bit: Vec<u64>,
}

/// Op counts for one `rows x cols` MVM under `cfg` with `b_act`-bit
/// activations.
///
/// ADC conversions per full MVM are `cols x slices x partitions`, times
/// `b_act` when input bits are accumulated digitally; differential pairs
/// subtract in analog before the ADC so the pair costs one conversion. The
/// unit column adds one extra digitized column per array.
pub fn count_ops(cfg: &MappingConfig, rows: usize, cols: usize, b_act: u32) -> Result<OpCounts> {
    cfg.validate()?;
    if rows == 0 || cols == 0 || b_act == 0 {
        return Err(Error::Analysis(
            "rows, cols, and b_act must be positive".into(),
        ));
    }
    let plan = cfg.slice_plan();
    let partitions = mapping::partition_rows(rows, cfg.max_rows).len() as u64;
    let slices = plan.slices as u64;
    let polarities = if cfg.scheme == Scheme::Differential { 2u64 } else { 1 };
    let unit_cols = u64::from(cfg.unit_column && cfg.scheme == Scheme::Offset);
    let conv_cols = cols as u64 + unit_cols;
    let conversions_per_column_set = match cfg.input_accumulation {
        InputAccumulation::Analog => 1,
        InputAccumulation::Digital => b_act as u64,
    };
    let groups = slices * partitions;

    let adc_conversions = conv_cols * groups * conversions_per_column_set;
    // One activation per array per applied input bit.
    let array_activations = groups * polarities * b_act as u64;
    // One integrator per (possibly pair-subtracted) column per input bit.
    let integrations = conv_cols * groups * b_act as u64;
    // Input-bit aggregation (digital only), weight-slice aggregation, and
    // partition summing.
    let input_sa = match cfg.input_accumulation {
        InputAccumulation::Digital => conv_cols * groups * b_act as u64,
        InputAccumulation::Analog => 0,
    };
    let slice_sa = cols as u64 * (slices - 1) * partitions;
    let partition_sa = cols as u64 * (partitions - 1);
    let shift_adds = input_sa + slice_sa + partition_sa;
    let digital_subtractions = if cfg.scheme == Scheme::Offset {
        cols as u64 * partitions
    } else {
        0
    };
    let cells_programmed = rows as u64 * (cols as u64 + unit_cols) * slices * polarities;

    Ok(OpCounts {
        array_activations,
        integrations,
        adc_conversions,
        shift_adds,
        digital_subtractions,
        cells_programmed,
        slices,
        partitions,
        active_rows_per_bit: vec![rows as u64; b_act as usize],
    })
}

/// Energy cost constants, one per counted operation class. The defaults are
/// order-of-magnitude placeholders, not measurements of any process node,
/// and exist only to exercise the model; supply real numbers for real
/// studies. Units: joules per op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    pub adc_conversion: f64,
    pub integration: f64,
    pub shift_add: f64,
    pub digital_subtraction: f64,
    /// Per array activation, scaled by `mean_conductance * rows` (row
    /// drivers and cell currents grow with both).
    pub array_activation_per_row: f64,
}

impl Default for CostTable {
    fn default() -> Self {
        // placeholders: 8-bit ADC ~ 1 pJ, integrator ~ 0.1 pJ, digital ops
        // ~ 10 fJ, array activation ~ 1 fJ per active row at mean G = 1
        CostTable {
            adc_conversion: 1e-12,
            integration: 1e-13,
            shift_add: 1e-14,
            digital_subtraction: 1e-14,
            array_activation_per_row: 1e-15,
        }
    }
}

impl CostTable {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.adc_conversion,
            self.integration,
            self.shift_add,
            self.digital_subtraction,
            self.array_activation_per_row,
        ];
        if all.iter().any(|c| *c < 0.0 || !c.is_finite()) {
            return Err(Error::Analysis("costs must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Energy per operation (1 MAC = 2 ops): `sum(count * cost) / (2 * macs)`.
/// `mean_conductance` scales the array-activation term.
pub fn energy_per_op(
    counts: &OpCounts,
    costs: &CostTable,
    macs: u64,
    mean_conductance: f64,
) -> Result<f64> {
    costs.validate()?;
    if macs == 0 {
        return Err(Error::Analysis("total MACs must be > 0".into()));
    }
    let rows_per_activation: f64 = counts
        .active_rows_per_bit
        .iter()
        .map(|&r| r as f64)
        .sum::<f64>()
        / counts.active_rows_per_bit.len().max(1) as f64;
    let total = counts.adc_conversions as f64 * costs.adc_conversion
        + counts.integrations as f64 * costs.integration
        + counts.shift_adds as f64 * costs.shift_add
        + counts.digital_subtractions as f64 * costs.digital_subtraction
        + counts.array_activations as f64
            * costs.array_activation_per_row
            * rows_per_activation
            * mean_conductance;
    Ok(total / (2.0 * macs as f64))
}

/// Result of the bit-slicing SNR experiment.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SnrResult {
    pub sliced_snr: f64,
    pub unsliced_snr: f64,
    /// `sliced_snr / unsliced_snr`; infinite when the error is zero.
    pub ratio: f64,
}

/// Monte-Carlo SNR of a bit-sliced offset-scheme dot product under
/// state-independent cell errors, relative to the unsliced baseline, with
/// the aggregate measured before the digital offset subtraction.
///
/// Weights are constructed so every slice holds the same matrix (equal
/// slice-wise dot products): each row's programmed value has identical
/// base-`2^bits_per_slice` digits. The same rows, inputs, and error samples
/// drive both the sliced stack and the unsliced baseline.
pub fn snr_experiment(
    bits_per_slice: u32,
    weight_bits: u32,
    alpha_ind: f64,
    rows: usize,
    trials: u64,
    seed: u64,
) -> Result<SnrResult> {
    use crate::devices::{sample_programmed, ErrorModel, SeededStream};

    if weight_bits % bits_per_slice != 0 {
        return Err(Error::Analysis(format!(
            "weight_bits {weight_bits} not divisible by bits_per_slice {bits_per_slice}"
        )));
    }
    if rows == 0 || trials == 0 {
        return Err(Error::Analysis("rows and trials must be positive".into()));
    }
    let slices = (weight_bits / bits_per_slice) as usize;
    let digit_max = (1u32 << bits_per_slice) - 1;
    let v_max_unsliced = (1u32 << weight_bits) - 1;
    // value with all digits equal to d: d * (2^0 + 2^b + 2^2b + ...)
    let repunit: u32 = (0..slices)
        .map(|s| 1u32 << (s as u32 * bits_per_slice))
        .sum();

    // deterministic per-row digits in [1, digit_max]
    let mut digit_rng = SeededStream::new(seed, 0, 0, 0).rng();
    use rand::Rng;
    let digits: Vec<u32> = (0..rows)
        .map(|_| digit_rng.random_range(1..=digit_max))
        .collect();

    let slice_targets =
        Array2::from_shape_fn((rows, 1), |(i, _)| digits[i] as f64 / digit_max as f64);
    let unsliced_targets = Array2::from_shape_fn((rows, 1), |(i, _)| {
        (digits[i] * repunit) as f64 / v_max_unsliced as f64
    });
    let model = ErrorModel::StateIndependent { alpha: alpha_ind };
    let active: Vec<u32> = (0..rows as u32).collect();

    let mut sliced = RunningMoments::default();
    let mut unsliced = RunningMoments::default();
    for t in 0..trials {
        // sliced aggregate: sum_s 2^(s*b) * v_max_slice^-1 ... in code units
        let mut agg = 0.0f64;
        for s in 0..slices {
            let prog = sample_programmed(
                &model,
                &slice_targets,
                &SeededStream::new(seed, t, 1, s as u64),
            )?;
            let current = column_currents_ideal(&prog, &active)[0];
            agg += ((1u64 << (s as u32 * bits_per_slice)) as f64) * current * digit_max as f64;
        }
        sliced.push(agg);
        let prog = sample_programmed(
            &model,
            &unsliced_targets,
            &SeededStream::new(seed, t, 2, 0),
        )?;
        let current = column_currents_ideal(&prog, &active)[0];
        unsliced.push(current * v_max_unsliced as f64);
    }

    let snr = |m: &RunningMoments| -> f64 {
        let std = m.std();
        if std == 0.0 {
            f64::INFINITY
        } else {
            m.mean() / std
        }
    };
    let sliced_snr = snr(&sliced);
    let unsliced_snr = snr(&unsliced);
    let ratio = if unsliced_snr.is_infinite() {
        if sliced_snr.is_infinite() {
            1.0
        } else {
            0.0
        }
    } else {
        sliced_snr / unsliced_snr
    };
    Ok(SnrResult {
        sliced_snr,
        unsliced_snr,
        ratio,
    })
}

#[derive(Debug, Default)]
struct RunningMoments {
    n: u64,
    sum: f64,
    sumsq: f64,
}

impl RunningMoments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.sumsq += v * v;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    fn std(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sumsq - self.sum * self.sum / n) / (n - 1.0)).max(0.0).sqrt()
    }
}

/// Mean bit-line current per input bit position for one layer, in units of
/// the maximum single-cell current, averaged over all columns, arrays, MVM
/// positions, and sample images (pre-subtraction for differential pairs).
#[derive(Debug, Clone, Serialize)]
pub struct BitlineStats {
    pub layer: usize,
    pub mean_current_per_bit: Vec<f64>,
}

/// Bit-line current statistics of a mapped network over a dataset sample.
/// Activations between layers advance with the exact digital reference, so
/// the pass is deterministic and cheap.
pub fn bitline_current_stats<R: Real>(
    net: &MappedNetwork<R>,
    arrays: &ProgrammedArrays<R>,
    images: &[ndarray::Array3<R>],
) -> Result<Vec<BitlineStats>> {
    use crate::pipeline::unroll_conv;

    if images.is_empty() {
        return Err(Error::Analysis("empty dataset sample".into()));
    }
    let n_layers = net.qnet.layers.len();
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    let mut counts: Vec<Vec<u64>> = vec![Vec::new(); n_layers];
    for image in images {
        let mut x = image.clone();
        for (li, layer) in net.qnet.layers.iter().enumerate() {
            let spec = &layer.spec;
            if !spec.kind.is_mvm() {
                x = crate::netio::pool_forward(spec, &x)?;
                continue;
            }
            let act = layer
                .act_in
                .as_ref()
                .ok_or_else(|| Error::Pipeline(format!("layer {li} not calibrated")))?;
            let stack = net.stacks[li].as_ref().expect("mvm layer mapped");
            if sums[li].is_empty() {
                sums[li] = vec![0.0; act.bits as usize];
                counts[li] = vec![0; act.bits as usize];
            }
            let q = quantize_activations(&x, act);
            let per = stack.arrays_per_partition();
            let mut record = |codes: &[u32]| {
                for (pi, range) in stack.partitions.iter().enumerate() {
                    let planes = InputBitPlanes::from_codes(&codes[range.clone()], act.bits);
                    for array in &arrays.layers[li][pi * per..(pi + 1) * per] {
                        for (b, plane) in planes.planes.iter().enumerate() {
                            let currents = column_currents_ideal(&array.g, plane);
                            sums[li][b] += currents.iter().map(|c| c.to_f()).sum::<f64>();
                            counts[li][b] += currents.len() as u64;
                        }
                    }
                }
            };
            match spec.kind {
                LayerKind::Dense => {
                    let codes: Vec<u32> = q.pos.iter().cloned().collect();
                    record(&codes);
                }
                LayerKind::Conv2d => {
                    let (patches, _) = unroll_conv(spec, &q.pos, 0u32)?;
                    for patch in &patches {
                        record(patch);
                    }
                }
                _ => unreachable!(),
            }
            x = advance_layer_digital(layer, &q)?;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (s, _))| !s.is_empty())
        .map(|(li, (s, c))| BitlineStats {
            layer: li,
            mean_current_per_bit: s
                .iter()
                .zip(&c)
                .map(|(&sum, &n)| if n > 0 { sum / n as f64 } else { 0.0 })
                .collect(),
        })
        .collect())
}

fn advance_layer_digital<R: Real>(
    layer: &crate::netio::QuantLayer<R>,
    q: &crate::pipeline::QuantizedActs,
) -> Result<ndarray::Array3<R>> {
    use crate::pipeline::{layer_epilogue, run_layer_ints};
    let (ints, (oh, ow)) = run_layer_ints(layer, q)?;
    let mut out = ndarray::Array3::zeros((oh, ow, layer.spec.n_oc));
    for i in 0..oh {
        for j in 0..ow {
            let ys = &ints[(i * ow + j) * layer.spec.n_oc..(i * ow + j + 1) * layer.spec.n_oc];
            let vals = layer_epilogue(layer, ys)?;
            for (oc, v) in vals.into_iter().enumerate() {
                out[[i, j, oc]] = v;
            }
        }
    }
    Ok(out)
}

/// Write a statistics table as headered CSV (one row per group).
pub fn write_stats_csv<W: std::io::Write>(
    writer: W,
    rows: &[Vec<(String, String)>],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(first) = rows.first() {
        w.write_record(first.iter().map(|(k, _)| k.as_str()))
            .map_err(|e| Error::Analysis(format!("csv: {e}")))?;
    }
    for row in rows {
        w.write_record(row.iter().map(|(_, v)| v.as_str()))
            .map_err(|e| Error::Analysis(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::Analysis(format!("csv: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(
        scheme: Scheme,
        bits_per_cell: u32,
        acc: InputAccumulation,
        max_rows: usize,
    ) -> MappingConfig {
        MappingConfig {
            scheme,
            weight_bits: 8,
            bits_per_cell,
            on_off_ratio: OnOffRatio::INFINITE,
            max_rows,
            input_accumulation: acc,
            unit_column: false,
        }
    }

    #[test]
    fn adc_conversion_ratio_analog_vs_digital_is_eight() {
        let analog = cfg(Scheme::Differential, 7, InputAccumulation::Analog, 1152);
        let digital = cfg(Scheme::Differential, 7, InputAccumulation::Digital, 1152);
        let a = count_ops(&analog, 1152, 256, 8).unwrap();
        let d = count_ops(&digital, 1152, 256, 8).unwrap();
        assert_eq!(d.adc_conversions / a.adc_conversions, 8);
        assert_eq!(d.adc_conversions % a.adc_conversions, 0);
    }

    #[test]
    fn design_e_vs_design_a_ratios() {
        // E: offset, 2 bits/cell (4 slices), 72-row arrays
        // A: differential, unsliced, 1152-row arrays
        let e = count_ops(
            &cfg(Scheme::Offset, 2, InputAccumulation::Digital, 72),
            1152,
            256,
            8,
        )
        .unwrap();
        let a = count_ops(
            &cfg(Scheme::Differential, 7, InputAccumulation::Analog, 1152),
            1152,
            256,
            8,
        )
        .unwrap();
        assert_eq!(e.slices / a.slices, 4);
        assert_eq!(e.partitions / a.partitions, 16);
        assert_eq!(a.partitions, 1);
    }

    #[test]
    fn single_conversion_case() {
        let c = cfg(Scheme::Offset, 8, InputAccumulation::Analog, 1152);
        let ops = count_ops(&c, 64, 1, 8).unwrap();
        assert_eq!(ops.adc_conversions, 1);
    }

    #[test]
    fn energy_model_basics() {
        let counts = count_ops(
            &cfg(Scheme::Differential, 7, InputAccumulation::Analog, 1152),
            1152,
            256,
            8,
        )
        .unwrap();
        let zero = CostTable {
            adc_conversion: 0.0,
            integration: 0.0,
            shift_add: 0.0,
            digital_subtraction: 0.0,
            array_activation_per_row: 0.0,
        };
        let macs = 1152 * 256;
        assert_eq!(energy_per_op(&counts, &zero, macs, 0.1).unwrap(), 0.0);

        // only ADC cost c, 1 conversion, 1 MAC -> c/2
        let one_conv = OpCounts {
            adc_conversions: 1,
            ..count_ops(&cfg(Scheme::Offset, 8, InputAccumulation::Analog, 8), 1, 1, 1).unwrap()
        };
        let mut costs = zero.clone();
        costs.adc_conversion = 3.0e-12;
        let mut counts1 = one_conv;
        counts1.integrations = 0;
        counts1.array_activations = 0;
        counts1.shift_adds = 0;
        counts1.digital_subtractions = 0;
        assert!((energy_per_op(&counts1, &costs, 1, 0.0).unwrap() - 1.5e-12).abs() < 1e-24);
    }

    #[test]
    fn energy_linearity_and_amortization() {
        let c = cfg(Scheme::Differential, 7, InputAccumulation::Analog, 4096);
        let costs = CostTable::default();
        let small = count_ops(&c, 128, 256, 8).unwrap();
        let large = count_ops(&c, 256, 256, 8).unwrap();
        let e_small = energy_per_op(&small, &costs, 128 * 256, 0.0).unwrap();
        let e_large = energy_per_op(&large, &costs, 256 * 256, 0.0).unwrap();
        // fixed per-array costs amortize over more MACs
        assert!(e_large < e_small);
        // scaling all costs by k scales energy/op by k
        let scaled = CostTable {
            adc_conversion: costs.adc_conversion * 3.0,
            integration: costs.integration * 3.0,
            shift_add: costs.shift_add * 3.0,
            digital_subtraction: costs.digital_subtraction * 3.0,
            array_activation_per_row: costs.array_activation_per_row * 3.0,
        };
        let e_scaled = energy_per_op(&small, &scaled, 128 * 256, 0.0).unwrap();
        assert!((e_scaled / e_small - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_macs_rejected() {
        let counts = count_ops(
            &cfg(Scheme::Offset, 8, InputAccumulation::Analog, 8),
            4,
            4,
            8,
        )
        .unwrap();
        assert!(energy_per_op(&counts, &CostTable::default(), 0, 0.5).is_err());
    }

    #[test]
    fn snr_four_two_bit_slices_near_theory() {
        // four 2-bit offset slices: ratio = 85 / sqrt(4096+256+16+1) = 1.286
        let r = snr_experiment(2, 8, 0.04, 32, 30_000, 77).unwrap();
        assert!(
            (r.ratio - 1.286).abs() / 1.286 < 0.03,
            "ratio {} vs 1.286",
            r.ratio
        );
    }

    #[test]
    fn snr_single_slice_is_unity() {
        let r = snr_experiment(8, 8, 0.04, 32, 20_000, 78).unwrap();
        assert!((r.ratio - 1.0).abs() < 0.03, "ratio {}", r.ratio);
    }

    #[test]
    fn snr_one_bit_slices_below_sqrt_three() {
        let r = snr_experiment(1, 8, 0.04, 32, 30_000, 79).unwrap();
        assert!(
            r.ratio < 3f64.sqrt() && r.ratio > 1.286,
            "ratio {}",
            r.ratio
        );
    }

    #[test]
    fn snr_zero_error_guard() {
        let r = snr_experiment(2, 8, 0.0, 16, 100, 80).unwrap();
        assert!(r.sliced_snr.is_infinite());
        assert_eq!(r.ratio, 1.0);
    }

    #[test]
    fn count_ops_matches_runtime_counters() {
        use crate::adc::AdcConfig;
        use crate::pipeline::execute_stack_mvm;
        use crate::xbar::{ArrayInstance, ArrayRole, OpCounters};
        use ndarray::Array2;
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};

        let mut rng = StdRng::seed_from_u64(5);
        let rows = 23usize;
        let cols = 3usize;
        let b_act = 8u32;
        let mut offset_cfg = cfg(Scheme::Offset, 2, InputAccumulation::Digital, 10);
        offset_cfg.unit_column = true;
        let diff_cfg = cfg(Scheme::Differential, 2, InputAccumulation::Analog, 10);
        for c in [offset_cfg, diff_cfg] {
            let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-127i32..=127));
            let x: Vec<u32> = (0..rows).map(|_| rng.random_range(0u32..256)).collect();
            let stack: mapping::ConductanceStack<f64> = mapping::decompose(&w, &c).unwrap();
            let arrays: Vec<ArrayInstance<f64>> = stack
                .arrays
                .iter()
                .map(|sa| ArrayInstance {
                    g: sa.conductance.clone(),
                    r_p: 0.0,
                    role: ArrayRole::Offset,
                    slice: sa.slice,
                })
                .collect();
            let adc = AdcConfig::full_range(24);
            let mut counters = OpCounters::default();
            execute_stack_mvm(&stack, &arrays, &c, &adc, 0, &x, b_act, &mut counters, None)
                .unwrap();
            let pred = count_ops(&c, rows, cols, b_act).unwrap();
            assert_eq!(counters.adc_conversions, pred.adc_conversions, "{c:?}");
            assert_eq!(counters.array_activations, pred.array_activations, "{c:?}");
            assert_eq!(counters.integrations, pred.integrations, "{c:?}");
            assert_eq!(counters.shift_adds, pred.shift_adds, "{c:?}");
            assert_eq!(
                counters.digital_subtractions,
                pred.digital_subtractions,
                "{c:?}"
            );
        }
    }

    #[test]
    fn csv_emission() {
        let rows = vec![
            vec![("a".to_string(), "1".to_string()), ("b".to_string(), "x".to_string())],
            vec![("a".to_string(), "2".to_string()), ("b".to_string(), "y".to_string())],
        ];
        let mut buf = Vec::new();
        write_stats_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "a,b\n1,x\n2,y\n");
    }
}
