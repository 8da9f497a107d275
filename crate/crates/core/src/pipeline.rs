//! End-to-end inference on mapped arrays.
//!
//! Orchestrates per-layer execution: activation quantization and bit-plane
//! extraction, convolution unrolling into sliding-window MVMs, per-partition
//! and per-slice array simulation, ADC conversion, digital aggregation
//! (shift-and-add, offset subtraction, partition sums), rescaling to float,
//! bias add, activation function, and requantization for the next layer.
//!
//! Digital operations (pooling, bias add, aggregation, activation) are
//! error-free. A pure-integer digital reference path
//! ([`run_digital_inference`]) computes the same quantized network without
//! any analog modeling, layer by layer with direct convolutions, and is the
//! oracle the error-free analog pipeline must match exactly.

use ndarray::Array3;
use rayon::prelude::*;

use crate::adc::{AdcConfig, GroupKey, OutputStats};
use crate::devices::{sample_programmed, ErrorModel, SeededStream};
use crate::error::{Error, Result};
use crate::mapping::{self, ConductanceStack, MappingConfig, Polarity, Scheme};
use crate::netio::{
    pool_forward, Activation, ActivationSpec, FloatNetwork, ImageBatch, LayerKind, LayerSpec,
    QuantLayer, QuantizedNetwork,
};
use crate::scalar::{round_half_away, Real};
use crate::xbar::{
    self, AdcMode, ArrayInstance, ArrayRole, CodeScale, InputBitPlanes, OpCounters,
};

// ---------------------------------------------------------------------------
// Activation range calibration

/// L1 error of clip-quantizing `values` to `m_bits` in `[lo, hi]`.
fn l1_clip_quant_error(values: &[f64], lo: f64, hi: f64, m_bits: u32) -> f64 {
    let levels = ((1u64 << m_bits) - 1) as f64;
    let step = (hi - lo) / levels;
    let mut err = 0.0;
    for &x in values {
        let xc = x.clamp(lo, hi);
        let q = lo + ((xc - lo) / step).round() * step;
        err += (x - q).abs();
    }
    err
}

/// Find the `(x_min, x_max)` range minimizing the L1 error of clipping and
/// quantizing `values` to `m_bits`. Searches a grid of percentile candidates
/// ({90, 99, 99.9, 99.99, 100}th at the top, mirrored at the bottom),
/// refined by a few rounds of coordinate descent on each end.
pub fn calibrate_activation_range<R: Real>(values: &[R], m_bits: u32) -> Result<(R, R)> {
    if values.is_empty() {
        return Err(Error::Pipeline("empty activation set".into()));
    }
    let mut sorted: Vec<f64> = values.iter().map(|v| v.to_f()).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let quant = |q: f64| -> f64 {
        let pos = (q * (n - 1) as f64).round() as usize;
        sorted[pos.min(n - 1)]
    };
    let data_lo = sorted[0];
    let data_hi = sorted[n - 1];
    if data_hi <= data_lo {
        // constant activations: epsilon width
        let eps = data_lo.abs().max(1.0) * 1e-6;
        return Ok((R::from_f(data_lo), R::from_f(data_lo + eps)));
    }

    let lo_candidates: Vec<f64> = [0.10, 0.01, 0.001, 0.0001, 0.0]
        .iter()
        .map(|&q| quant(q))
        .collect();
    let hi_candidates: Vec<f64> = [0.90, 0.99, 0.999, 0.9999, 1.0]
        .iter()
        .map(|&q| quant(q))
        .collect();

    let mut best = (data_lo, data_hi);
    let mut best_err = f64::INFINITY;
    for &lo in &lo_candidates {
        for &hi in &hi_candidates {
            if hi <= lo {
                continue;
            }
            let err = l1_clip_quant_error(&sorted, lo, hi, m_bits);
            if err < best_err {
                best_err = err;
                best = (lo, hi);
            }
        }
    }

    // Coordinate descent: refine each end over a shrinking local grid.
    for round in 0..3 {
        let span = (best.1 - best.0) / 4f64.powi(round);
        for end in 0..2 {
            for k in -4i32..=4 {
                let delta = span * k as f64 / 8.0;
                let (lo, hi) = if end == 0 {
                    ((best.0 + delta).max(data_lo), best.1)
                } else {
                    (best.0, (best.1 + delta).min(data_hi))
                };
                if hi <= lo {
                    continue;
                }
                let err = l1_clip_quant_error(&sorted, lo, hi, m_bits);
                if err < best_err {
                    best_err = err;
                    best = (lo, hi);
                }
            }
        }
    }
    Ok((R::from_f(best.0), R::from_f(best.1)))
}

/// Calibrate all MVM-layer input ranges from a float forward pass over the
/// calibration images, and attach [`ActivationSpec`]s to the quantized
/// network. `m_bits` is the L1-search resolution (default 12), `act_bits`
/// the inference activation resolution.
pub fn calibrate_network_activations<R: Real>(
    fnet: &FloatNetwork<R>,
    qnet: &mut QuantizedNetwork<R>,
    images: &[Array3<R>],
    m_bits: u32,
    act_bits: u32,
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Pipeline("empty calibration set".into()));
    }
    if !(2..=16).contains(&act_bits) {
        return Err(Error::Pipeline(format!(
            "activation bits must be in [2, 16], got {act_bits}"
        )));
    }
    let n_layers = fnet.layers.len();
    let mut collected: Vec<Vec<R>> = vec![Vec::new(); n_layers];
    for image in images {
        let trace = fnet.forward(image)?;
        for (li, input) in trace.layer_inputs.iter().enumerate() {
            if fnet.layers[li].spec.kind.is_mvm() {
                collected[li].extend(input.iter().cloned());
            }
        }
    }
    for (li, values) in collected.iter().enumerate() {
        if !qnet.layers[li].spec.kind.is_mvm() {
            continue;
        }
        let (lo, hi) = calibrate_activation_range(values, m_bits)?;
        qnet.layers[li].act_in = Some(ActivationSpec {
            bits: act_bits,
            lo,
            hi,
            signed: lo < R::zero(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Activation quantization

/// Quantized activations: unsigned codes, with a negative-part plane when
/// the layer input is signed (sign-split two-pass representation).
#[derive(Debug, Clone)]
pub struct QuantizedActs {
    pub pos: Array3<u32>,
    pub neg: Option<Array3<u32>>,
    pub bits: u32,
}

impl<R: Real> ActivationSpec<R> {
    pub fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Magnitude bound used for signed sign-split quantization.
    pub fn signed_magnitude(&self) -> R {
        self.lo.abs().max(self.hi.abs())
    }

    /// Dequantization step.
    pub fn step(&self) -> R {
        if self.signed {
            self.signed_magnitude() / R::from_f(self.levels() as f64)
        } else {
            (self.hi - self.lo) / R::from_f(self.levels() as f64)
        }
    }
}

/// Clip to the calibrated range and quantize to `spec.bits` unsigned codes.
/// Signed specs produce separate positive/negative magnitude codes sharing
/// one step size, so the net code is their difference.
pub fn quantize_activations<R: Real>(x: &Array3<R>, spec: &ActivationSpec<R>) -> QuantizedActs {
    let levels = spec.levels();
    let lv = R::from_f(levels as f64);
    let step = spec.step();
    if spec.signed {
        let quant_mag = |v: R| -> u32 {
            let t = round_half_away(v / step).max(R::zero()).min(lv);
            t.to_f() as u32
        };
        let pos = x.mapv(|v| quant_mag(v.max(R::zero())));
        let neg = x.mapv(|v| quant_mag((-v).max(R::zero())));
        QuantizedActs {
            pos,
            neg: Some(neg),
            bits: spec.bits,
        }
    } else {
        let pos = x.mapv(|v| {
            let c = v.max(spec.lo).min(spec.hi);
            let t = round_half_away((c - spec.lo) / step).max(R::zero()).min(lv);
            t.to_f() as u32
        });
        QuantizedActs {
            pos,
            neg: None,
            bits: spec.bits,
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution unrolling

/// Unroll a conv layer's input into one vector per output spatial position,
/// each of length `kx*ky*n_ic`, ordered `(kx, ky, ic)` to match the unrolled
/// weight matrix rows. Returns the vectors (positions in row-major `(oh,
/// ow)` order) and the output dims.
pub fn unroll_conv<T: Copy>(
    spec: &LayerSpec,
    input: &Array3<T>,
    pad: T,
) -> Result<(Vec<Vec<T>>, (usize, usize))> {
    let (h, w, c) = input.dim();
    if c != spec.n_ic {
        return Err(Error::Shape(format!(
            "conv input has {c} channels, layer expects {}",
            spec.n_ic
        )));
    }
    let (oh, ow) = spec.out_dims(h, w)?;
    let mut vectors = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let mut v = Vec::with_capacity(spec.unrolled_rows());
            for kx in 0..spec.kx {
                for ky in 0..spec.ky {
                    let ih = (i * spec.stride + kx) as isize - spec.padding as isize;
                    let iw = (j * spec.stride + ky) as isize - spec.padding as isize;
                    if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
                        v.extend(std::iter::repeat_n(pad, spec.n_ic));
                    } else {
                        for ic in 0..spec.n_ic {
                            v.push(input[[ih as usize, iw as usize, ic]]);
                        }
                    }
                }
            }
            vectors.push(v);
        }
    }
    Ok((vectors, (oh, ow)))
}

// ---------------------------------------------------------------------------
// Mapped network

/// A quantized network decomposed onto arrays, with its ADC configuration.
#[derive(Debug, Clone)]
pub struct MappedNetwork<R> {
    pub qnet: QuantizedNetwork<R>,
    pub mapping: MappingConfig,
    pub adc: AdcConfig<R>,
    /// Normalized bit-line parasitic resistance; 0 disables the ladder.
    pub r_p: R,
    /// Target stacks, parallel to `qnet.layers` (None for pool layers).
    pub stacks: Vec<Option<ConductanceStack<R>>>,
}

impl<R: Real> MappedNetwork<R> {
    /// Decompose every MVM layer of `qnet` under `mapping`. Activation specs
    /// must already be calibrated.
    pub fn build(
        qnet: QuantizedNetwork<R>,
        mapping: MappingConfig,
        adc: AdcConfig<R>,
        r_p: R,
    ) -> Result<Self> {
        mapping.validate()?;
        if r_p < R::zero() {
            return Err(Error::Pipeline(format!("r_p must be >= 0, got {r_p}")));
        }
        if mapping.weight_bits < qnet.weight_bits {
            return Err(Error::Pipeline(format!(
                "mapping weight_bits {} below network weight_bits {}",
                mapping.weight_bits, qnet.weight_bits
            )));
        }
        let mut stacks = Vec::with_capacity(qnet.layers.len());
        for (li, layer) in qnet.layers.iter().enumerate() {
            if !layer.spec.kind.is_mvm() {
                stacks.push(None);
                continue;
            }
            if layer.act_in.is_none() {
                return Err(Error::Pipeline(format!(
                    "layer {li}: activation range not calibrated"
                )));
            }
            stacks.push(Some(mapping::decompose(&layer.w_int, &mapping)?));
        }
        Ok(MappedNetwork {
            qnet,
            mapping,
            adc,
            r_p,
            stacks,
        })
    }

    /// Stack and quant layer of each MVM layer.
    pub fn mvm_layers(&self) -> impl Iterator<Item = (usize, &QuantLayer<R>, &ConductanceStack<R>)> {
        self.qnet
            .layers
            .iter()
            .enumerate()
            .filter_map(|(li, l)| self.stacks[li].as_ref().map(|s| (li, l, s)))
    }
}

/// Per-trial programmed arrays, parallel to each layer's stack arrays.
#[derive(Debug, Clone)]
pub struct ProgrammedArrays<R> {
    pub layers: Vec<Vec<ArrayInstance<R>>>,
}

fn role_of(scheme: Scheme, polarity: Polarity) -> ArrayRole {
    match (scheme, polarity) {
        (Scheme::Differential, Polarity::Plus) => ArrayRole::Plus,
        (Scheme::Differential, Polarity::Minus) => ArrayRole::Minus,
        _ => ArrayRole::Offset,
    }
}

/// Program all arrays for one Monte-Carlo trial: sample every cell's
/// conductance with the `(master, trial, layer, array)`-indexed stream.
pub fn program_network<R: Real>(
    net: &MappedNetwork<R>,
    model: &ErrorModel<R>,
    master_seed: u64,
    trial: u64,
) -> Result<ProgrammedArrays<R>> {
    let mut layers = Vec::with_capacity(net.qnet.layers.len());
    for (li, stack) in net.stacks.iter().enumerate() {
        let mut arrays = Vec::new();
        if let Some(stack) = stack {
            for (ai, sa) in stack.arrays.iter().enumerate() {
                let stream = SeededStream::new(master_seed, trial, li as u64, ai as u64);
                let g = sample_programmed(model, &sa.conductance, &stream)?;
                arrays.push(ArrayInstance {
                    g,
                    r_p: net.r_p,
                    role: role_of(stack.scheme, sa.polarity),
                    slice: sa.slice,
                });
            }
        }
        layers.push(arrays);
    }
    Ok(ProgrammedArrays { layers })
}

/// Arrays at their target conductances (no programming errors).
pub fn target_arrays<R: Real>(net: &MappedNetwork<R>) -> ProgrammedArrays<R> {
    let layers = net
        .stacks
        .iter()
        .map(|stack| match stack {
            Some(stack) => stack
                .arrays
                .iter()
                .map(|sa| ArrayInstance {
                    g: sa.conductance.clone(),
                    r_p: net.r_p,
                    role: role_of(stack.scheme, sa.polarity),
                    slice: sa.slice,
                })
                .collect(),
            None => Vec::new(),
        })
        .collect();
    ProgrammedArrays { layers }
}

// ---------------------------------------------------------------------------
// Core MVM execution through a stack

/// Run one integer input vector through one layer's full stack: per
/// partition and slice, xbar simulation, ADC, shift-and-add across weight
/// slices (and input bits when digitally accumulated), offset subtraction,
/// and partition summing. Returns exact-integer outputs in weight-code
/// units.
///
/// When `stats` is supplied, the ADC is bypassed and every pre-ADC analog
/// value is recorded under its `(layer, slice, partition)` group.
#[allow(clippy::too_many_arguments)]
pub fn execute_stack_mvm<R: Real>(
    stack: &ConductanceStack<R>,
    arrays: &[ArrayInstance<R>],
    mapping: &MappingConfig,
    adc: &AdcConfig<R>,
    layer_index: usize,
    codes: &[u32],
    act_bits: u32,
    counters: &mut OpCounters,
    mut stats: Option<&mut OutputStats<R>>,
) -> Result<Vec<i64>> {
    if codes.len() != stack.rows {
        return Err(Error::Shape(format!(
            "input vector has {} entries, stack has {} rows",
            codes.len(),
            stack.rows
        )));
    }
    let plan = &stack.plan;
    let scale = CodeScale {
        v_max: plan.v_max,
        g_min: stack.g_min,
    };
    let weight_cols = stack.cols;
    let differential = stack.scheme == Scheme::Differential;
    let bits_per_conv = mapping.input_bits_per_conversion(act_bits);
    let conv_max = ((1u64 << bits_per_conv) - 1) as f64;

    let mut y = vec![0i64; weight_cols];
    for (pi, range) in stack.partitions.iter().enumerate() {
        let planes = InputBitPlanes::from_codes(&codes[range.clone()], act_bits);
        let max_abs = R::from_f(range.len() as f64 * conv_max);
        let mut part = vec![0i64; weight_cols];
        let mut unit_acc = 0i64;
        for si in 0..plan.slices {
            let key = GroupKey {
                layer: layer_index,
                slice: si,
                partition: pi,
            };
            let collecting = stats.is_some();
            let adc_mode = if collecting || !adc.enabled() {
                AdcMode::Disabled
            } else {
                let lattice_step =
                    (R::one() - stack.g_min) / R::from_f(plan.v_max as f64);
                let (lo, hi) = adc.range_for(&key, max_abs, differential, lattice_step)?;
                AdcMode::Enabled {
                    lo,
                    hi,
                    bits: adc.bits.expect("enabled implies bits"),
                }
            };
            let mut buf: Option<Vec<R>> = collecting.then(Vec::new);
            let out_units = if differential {
                let plus = &arrays[array_index(stack, pi, si, Polarity::Plus)];
                let minus = &arrays[array_index(stack, pi, si, Polarity::Minus)];
                xbar::run_differential_mvm(
                    plus,
                    minus,
                    &planes,
                    mapping.input_accumulation,
                    adc_mode,
                    scale,
                    counters,
                    buf.as_mut(),
                )?
            } else {
                let array = &arrays[array_index(stack, pi, si, Polarity::Single)];
                xbar::run_array_mvm(
                    array,
                    &planes,
                    mapping.input_accumulation,
                    adc_mode,
                    scale,
                    counters,
                    buf.as_mut(),
                )?
            };
            if let (Some(sink), Some(buf)) = (stats.as_deref_mut(), buf) {
                sink.declare(key, max_abs, differential);
                sink.record(key, &buf);
            }
            let shift = plan.shifts[si];
            for c in 0..weight_cols {
                part[c] += out_units[c] << shift;
            }
            if stack.has_unit_column {
                unit_acc += out_units[weight_cols] << shift;
            }
            if si > 0 {
                counters.shift_adds += weight_cols as u64;
            }
        }
        let combined = if stack.scheme == Scheme::Offset {
            counters.digital_subtractions += weight_cols as u64;
            xbar::combine_offset(
                &part,
                planes.code_sum,
                stack.offset_code.expect("offset stack has offset code"),
                stack.has_unit_column.then_some(unit_acc),
            )
        } else {
            part
        };
        for c in 0..weight_cols {
            y[c] += combined[c];
        }
        if pi > 0 {
            counters.shift_adds += weight_cols as u64;
        }
    }
    Ok(y)
}

fn array_index<R>(
    stack: &ConductanceStack<R>,
    partition: usize,
    slice: usize,
    polarity: Polarity,
) -> usize {
    let per = stack.arrays_per_partition();
    let pol = match (stack.scheme, polarity) {
        (Scheme::Offset, Polarity::Single) => 0,
        (Scheme::Differential, Polarity::Plus) => 0,
        (Scheme::Differential, Polarity::Minus) => 1,
        _ => unreachable!("invalid polarity for scheme"),
    };
    partition * per + slice * if stack.scheme == Scheme::Differential { 2 } else { 1 } + pol
}

// ---------------------------------------------------------------------------
// Layer epilogue (shared by the analog and digital paths)

/// Convert integer MVM outputs to float pre-activations and apply the
/// activation function: `y = w_scale * (step * y_int + lo * row_sum) + bias`
/// (the affine term vanishes for sign-split signed inputs), then ReLU if
/// configured.
pub fn layer_epilogue<R: Real>(layer: &QuantLayer<R>, y_int: &[i64]) -> Result<Vec<R>> {
    let act = layer
        .act_in
        .as_ref()
        .ok_or_else(|| Error::Pipeline("layer missing activation spec".into()))?;
    let step = act.step();
    let mut out = Vec::with_capacity(y_int.len());
    for (oc, &yi) in y_int.iter().enumerate() {
        let mut v = step * R::from_f(yi as f64);
        if !act.signed {
            v = v + act.lo * R::from_f(layer.row_sums[oc] as f64);
        }
        let mut y = layer.w_scale * v + layer.bias[oc];
        if layer.spec.activation == Activation::Relu && y < R::zero() {
            y = R::zero();
        }
        out.push(y);
    }
    Ok(out)
}

/// Index of the maximum logit; ties resolve to the lowest index.
pub fn argmax<R: Real>(v: &[R]) -> usize {
    let mut best = 0;
    let mut best_v = R::neg_infinity();
    for (i, &x) in v.iter().enumerate() {
        if x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Analog image execution

fn flatten_codes(t: &Array3<u32>) -> Vec<u32> {
    t.iter().cloned().collect()
}

fn run_mvm_layer_analog<R: Real>(
    net: &MappedNetwork<R>,
    arrays: &ProgrammedArrays<R>,
    layer_index: usize,
    x: &Array3<R>,
    counters: &mut OpCounters,
    mut stats: Option<&mut OutputStats<R>>,
) -> Result<Array3<R>> {
    let layer = &net.qnet.layers[layer_index];
    let stack = net.stacks[layer_index]
        .as_ref()
        .expect("mvm layer has a stack");
    let layer_arrays = &arrays.layers[layer_index];
    let spec = &layer.spec;
    let act = layer
        .act_in
        .as_ref()
        .ok_or_else(|| Error::Pipeline(format!("layer {layer_index} not calibrated")))?;
    let q = quantize_activations(x, act);

    let run_codes = |codes: &[u32],
                     counters: &mut OpCounters,
                     stats: Option<&mut OutputStats<R>>|
     -> Result<Vec<i64>> {
        execute_stack_mvm(
            stack,
            layer_arrays,
            &net.mapping,
            &net.adc,
            layer_index,
            codes,
            act.bits,
            counters,
            stats,
        )
    };

    match spec.kind {
        LayerKind::Dense => {
            let pos = flatten_codes(&q.pos);
            let mut y_int = run_codes(&pos, counters, stats.as_deref_mut())?;
            if let Some(neg_t) = &q.neg {
                let neg = flatten_codes(neg_t);
                let y_neg = run_codes(&neg, counters, stats.as_deref_mut())?;
                counters.digital_subtractions += y_int.len() as u64;
                for (a, b) in y_int.iter_mut().zip(&y_neg) {
                    *a -= b;
                }
            }
            let out = layer_epilogue(layer, &y_int)?;
            Ok(Array3::from_shape_vec((1, 1, spec.n_oc), out).expect("epilogue length"))
        }
        LayerKind::Conv2d => {
            let (pos_patches, (oh, ow)) = unroll_conv(spec, &q.pos, 0u32)?;
            let neg_patches = match &q.neg {
                Some(neg_t) => Some(unroll_conv(spec, neg_t, 0u32)?.0),
                None => None,
            };
            let mut out = Array3::zeros((oh, ow, spec.n_oc));
            for (p, pos) in pos_patches.iter().enumerate() {
                let mut y_int = run_codes(pos, counters, stats.as_deref_mut())?;
                if let Some(negs) = &neg_patches {
                    let y_neg = run_codes(&negs[p], counters, stats.as_deref_mut())?;
                    counters.digital_subtractions += y_int.len() as u64;
                    for (a, b) in y_int.iter_mut().zip(&y_neg) {
                        *a -= b;
                    }
                }
                let vals = layer_epilogue(layer, &y_int)?;
                let (i, j) = (p / ow, p % ow);
                for (oc, v) in vals.into_iter().enumerate() {
                    out[[i, j, oc]] = v;
                }
            }
            Ok(out)
        }
        _ => unreachable!("pool layers are not mapped"),
    }
}

/// Run one image through the analog pipeline; returns the logits.
pub fn run_image_analog<R: Real>(
    net: &MappedNetwork<R>,
    arrays: &ProgrammedArrays<R>,
    image: &Array3<R>,
    counters: &mut OpCounters,
    mut stats: Option<&mut OutputStats<R>>,
) -> Result<Vec<R>> {
    let mut x = image.clone();
    for li in 0..net.qnet.layers.len() {
        let spec = &net.qnet.layers[li].spec;
        x = match spec.kind {
            LayerKind::AvgPool2d | LayerKind::MaxPool2d => pool_forward(spec, &x)?,
            _ => run_mvm_layer_analog(net, arrays, li, &x, counters, stats.as_deref_mut())?,
        };
    }
    Ok(x.iter().cloned().collect())
}

// ---------------------------------------------------------------------------
// Digital integer reference

/// Integer pre-activations of one layer computed by direct (non-unrolled)
/// convolution over signed net codes `pos - neg`. Returns the flat
/// `(oh*ow*n_oc)` integers and the output spatial dims.
pub fn run_layer_ints<R: Real>(
    layer: &QuantLayer<R>,
    q: &QuantizedActs,
) -> Result<(Vec<i64>, (usize, usize))> {
    let spec = &layer.spec;
    let (h, w, _) = q.pos.dim();
    let code_at = |i: usize, j: usize, c: usize| -> i64 {
        let p = q.pos[[i, j, c]] as i64;
        match &q.neg {
            Some(n) => p - n[[i, j, c]] as i64,
            None => p,
        }
    };
    match spec.kind {
        LayerKind::Dense => {
            let mut y = vec![0i64; spec.n_oc];
            let mut flat = Vec::with_capacity(spec.n_ic);
            for i in 0..h {
                for j in 0..w {
                    for c in 0..q.pos.dim().2 {
                        flat.push(code_at(i, j, c));
                    }
                }
            }
            for oc in 0..spec.n_oc {
                let mut acc = 0i64;
                for (r, &x) in flat.iter().enumerate() {
                    acc += layer.w_int[[r, oc]] as i64 * x;
                }
                y[oc] = acc;
            }
            Ok((y, (1, 1)))
        }
        LayerKind::Conv2d => {
            let (oh, ow) = spec.out_dims(h, w)?;
            let mut y = vec![0i64; oh * ow * spec.n_oc];
            for i in 0..oh {
                for j in 0..ow {
                    for oc in 0..spec.n_oc {
                        let mut acc = 0i64;
                        for kx in 0..spec.kx {
                            for ky in 0..spec.ky {
                                let ih = (i * spec.stride + kx) as isize - spec.padding as isize;
                                let iw = (j * spec.stride + ky) as isize - spec.padding as isize;
                                if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
                                    continue;
                                }
                                for ic in 0..spec.n_ic {
                                    let row = (kx * spec.ky + ky) * spec.n_ic + ic;
                                    acc += layer.w_int[[row, oc]] as i64
                                        * code_at(ih as usize, iw as usize, ic);
                                }
                            }
                        }
                        y[(i * ow + j) * spec.n_oc + oc] = acc;
                    }
                }
            }
            Ok((y, (oh, ow)))
        }
        _ => unreachable!(),
    }
}

/// Run one image through the pure-integer digital reference; returns the
/// logits. Shares quantization and epilogue semantics with the analog path
/// but computes every MVM with direct integer arithmetic.
pub fn run_image_digital<R: Real>(
    qnet: &QuantizedNetwork<R>,
    image: &Array3<R>,
) -> Result<Vec<R>> {
    let mut x = image.clone();
    for layer in &qnet.layers {
        let spec = &layer.spec;
        x = match spec.kind {
            LayerKind::AvgPool2d | LayerKind::MaxPool2d => pool_forward(spec, &x)?,
            _ => {
                let act = layer
                    .act_in
                    .as_ref()
                    .ok_or_else(|| Error::Pipeline("layer not calibrated".into()))?;
                let q = quantize_activations(&x, act);
                let (y_int, (oh, ow)) = run_layer_ints(layer, &q)?;
                let mut out = Array3::zeros((oh, ow, spec.n_oc));
                for i in 0..oh {
                    for j in 0..ow {
                        let ints = &y_int[(i * ow + j) * spec.n_oc..(i * ow + j + 1) * spec.n_oc];
                        let vals = layer_epilogue(layer, ints)?;
                        for (oc, v) in vals.into_iter().enumerate() {
                            out[[i, j, oc]] = v;
                        }
                    }
                }
                out
            }
        };
    }
    Ok(x.iter().cloned().collect())
}

/// Top-1 accuracy of the digital integer reference over a dataset.
pub fn run_digital_inference<R: Real>(
    qnet: &QuantizedNetwork<R>,
    data: &ImageBatch<R>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Pipeline("empty dataset".into()));
    }
    let correct: Result<Vec<u32>> = data
        .images
        .par_iter()
        .zip(&data.labels)
        .map(|(img, &label)| {
            let logits = run_image_digital(qnet, img)?;
            Ok(u32::from(argmax(&logits) == label as usize))
        })
        .collect();
    let correct: u64 = correct?.iter().map(|&c| c as u64).sum();
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Monte-Carlo inference

#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub per_trial_accuracy: Vec<f64>,
    pub mean: f64,
    /// Two sample standard deviations over trials.
    pub two_sigma: f64,
    /// Op counters summed over one full pass of the dataset (identical for
    /// every trial; counts are input-independent).
    pub counters_per_pass: OpCounters,
}

/// Monte-Carlo inference: per trial, re-sample all programmed conductances
/// with trial-indexed streams, classify every image, and report per-trial
/// top-1 accuracies with mean and +-2 sigma.
pub fn run_inference<R: Real>(
    net: &MappedNetwork<R>,
    model: &ErrorModel<R>,
    data: &ImageBatch<R>,
    trials: u64,
    master_seed: u64,
) -> Result<InferenceResult> {
    if trials == 0 {
        return Err(Error::Pipeline("trials must be >= 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Pipeline("empty dataset".into()));
    }
    let mut per_trial = Vec::with_capacity(trials as usize);
    let mut counters_per_pass = OpCounters::default();
    for trial in 0..trials {
        let arrays = program_network(net, model, master_seed, trial)?;
        let results: Result<Vec<(u32, OpCounters)>> = data
            .images
            .par_iter()
            .zip(&data.labels)
            .map(|(img, &label)| {
                let mut counters = OpCounters::default();
                let logits = run_image_analog(net, &arrays, img, &mut counters, None)?;
                Ok((u32::from(argmax(&logits) == label as usize), counters))
            })
            .collect();
        let results = results?;
        let correct: u64 = results.iter().map(|(c, _)| *c as u64).sum();
        if trial == 0 {
            for (_, c) in &results {
                counters_per_pass.add(c);
            }
        }
        per_trial.push(correct as f64 / data.len() as f64);
    }
    let mean = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    let var = if per_trial.len() > 1 {
        per_trial.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (per_trial.len() - 1) as f64
    } else {
        0.0
    };
    Ok(InferenceResult {
        per_trial_accuracy: per_trial,
        mean,
        two_sigma: 2.0 * var.sqrt(),
        counters_per_pass,
    })
}

/// Collect pre-ADC output statistics over a calibration set (nominal
/// hardware by default: supply `target_arrays` or errored arrays per the
/// calibration policy).
pub fn collect_adc_stats<R: Real>(
    net: &MappedNetwork<R>,
    arrays: &ProgrammedArrays<R>,
    images: &[Array3<R>],
) -> Result<OutputStats<R>> {
    if images.is_empty() {
        return Err(Error::Pipeline("empty calibration set".into()));
    }
    let mut stats = OutputStats::new();
    let mut counters = OpCounters::default();
    for image in images {
        run_image_analog(net, arrays, image, &mut counters, Some(&mut stats))?;
    }
    Ok(stats)
}
