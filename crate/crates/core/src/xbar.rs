//! Single-array analog MVM simulation.
//!
//! Models one memory array executing a bit-serial matrix-vector multiply:
//! per input bit, active rows drive current into the bit lines; currents are
//! either summed ideally or through the parasitic bit-line resistor ladder;
//! input bits are accumulated in analog (switched capacitor, one ADC
//! conversion) or digitally (one conversion per bit, then shift-and-add).
//! Differential pairs are subtracted in the analog domain before the ADC;
//! the offset term is subtracted digitally after it.
//!
//! Cell topology: gated cells with inputs on select gates that draw no
//! current; only bit-line parasitic resistance is modeled, the supply is an
//! ideal low-resistance network at `V_D = 1`. Inactive cells are open
//! circuits; `G_min` leakage applies only to active cells.

use ndarray::Array2;

use crate::adc;
use crate::error::{Error, Result};
use crate::mapping::InputAccumulation;
use crate::scalar::{round_half_away, Real};

/// How one array participates in a mapping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayRole {
    Plus,
    Minus,
    Offset,
    Unit,
}

/// One programmed analog array.
#[derive(Debug, Clone)]
pub struct ArrayInstance<R> {
    /// Programmed conductances, normalized to `G_max = 1`, rows x cols.
    pub g: Array2<R>,
    /// Bit-line parasitic resistance per cell segment, normalized to the
    /// minimum cell resistance `1/G_max`. Zero disables the ladder model.
    pub r_p: R,
    pub role: ArrayRole,
    pub slice: usize,
}

impl<R: Real> ArrayInstance<R> {
    pub fn rows(&self) -> usize {
        self.g.nrows()
    }

    pub fn cols(&self) -> usize {
        self.g.ncols()
    }

    /// Column currents for one applied input bit vector, dispatching on
    /// `r_p`.
    pub fn currents(&self, active_rows: &[u32]) -> Result<Vec<R>> {
        if self.r_p == R::zero() {
            Ok(column_currents_ideal(&self.g, active_rows))
        } else {
            column_currents_parasitic(&self.g, active_rows, self.r_p)
        }
    }
}

/// Active row indices of a binary input vector.
pub fn active_rows(bits: &[bool]) -> Vec<u32> {
    bits.iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i as u32))
        .collect()
}

/// Ideal column currents: `I_j = sum_i bits_i * G_ij` with `V_D = 1`.
pub fn column_currents_ideal<R: Real>(g: &Array2<R>, active_rows: &[u32]) -> Vec<R> {
    let mut acc = vec![R::zero(); g.ncols()];
    for &r in active_rows {
        let row = g.row(r as usize);
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    acc
}

/// Column currents through the parasitic bit-line ladder.
///
/// Per column, bit-line node `i` (1-based, node 1 adjacent to the grounded
/// periphery) joins its neighbors through `r_p`; an active cell at node `i`
/// conducts `G_ij` from the unit supply into the node; inactive cells are
/// open. Row index 0 maps to node 1. The returned current is `v_1 / r_p`,
/// solved by tridiagonal elimination per column.
pub fn column_currents_parasitic<R: Real>(
    g: &Array2<R>,
    active_rows: &[u32],
    r_p: R,
) -> Result<Vec<R>> {
    if r_p <= R::zero() {
        return Err(Error::Pipeline(format!("r_p must be > 0, got {r_p}")));
    }
    let (rows, cols) = g.dim();
    let inv_rp = R::one() / r_p;
    let mut active = vec![false; rows];
    for &r in active_rows {
        active[r as usize] = true;
    }

    // Reused per-column scratch for the Thomas algorithm.
    let mut diag = vec![R::zero(); rows];
    let mut rhs = vec![R::zero(); rows];
    let mut out = vec![R::zero(); cols];
    for j in 0..cols {
        for i in 0..rows {
            let gi = if active[i] { g[[i, j]] } else { R::zero() };
            let links = if i + 1 < rows {
                inv_rp + inv_rp
            } else {
                inv_rp
            };
            diag[i] = gi + links;
            rhs[i] = gi;
        }
        // forward elimination: off-diagonals are all -inv_rp
        for i in 1..rows {
            let m = -inv_rp / diag[i - 1];
            diag[i] = diag[i] + m * inv_rp;
            rhs[i] = rhs[i] - m * rhs[i - 1];
        }
        // back substitution down to node 1 (index 0)
        let mut v = rhs[rows - 1] / diag[rows - 1];
        for i in (0..rows - 1).rev() {
            v = (rhs[i] + inv_rp * v) / diag[i];
        }
        if !v.is_finite() {
            return Err(Error::Pipeline("singular bit-line ladder system".into()));
        }
        out[j] = v * inv_rp;
    }
    Ok(out)
}

/// Per-column analog values of one conversion, with the maximum possible
/// magnitude for full-range ADC bookkeeping.
#[derive(Debug, Clone)]
pub struct AnalogOutput<R> {
    pub values: Vec<R>,
    /// Largest possible `|value|`: `rows * (2^B_in - 1)` for analog input
    /// accumulation, `rows` per single bit.
    pub max_abs: R,
    /// Differential outputs are signed; offset and unit outputs are not.
    pub signed: bool,
}

/// Elementwise `plus - minus`, formed before ADC quantization.
pub fn combine_differential<R: Real>(
    plus: &AnalogOutput<R>,
    minus: &AnalogOutput<R>,
) -> Result<AnalogOutput<R>> {
    if plus.values.len() != minus.values.len() {
        return Err(Error::Shape(format!(
            "differential outputs have {} vs {} columns",
            plus.values.len(),
            minus.values.len()
        )));
    }
    Ok(AnalogOutput {
        values: plus
            .values
            .iter()
            .zip(&minus.values)
            .map(|(&p, &m)| p - m)
            .collect(),
        max_abs: plus.max_abs.max(minus.max_abs),
        signed: true,
    })
}

/// Digital offset subtraction: `y_j = col_j - 2^(wb-1) * x_sum`, or
/// `y_j = col_j - u` when a digitized unit-column output `u` is supplied
/// (the unit column is programmed to the center code, so its aggregated
/// output is the offset term itself).
pub fn combine_offset(
    columns: &[i64],
    x_sum: i64,
    offset_code: i64,
    unit_output: Option<i64>,
) -> Vec<i64> {
    let term = unit_output.unwrap_or(offset_code * x_sum);
    columns.iter().map(|&c| c - term).collect()
}

/// Binary input planes of a vector of unsigned activation codes, least
/// significant bit first. Plane `b` lists the active row indices.
#[derive(Debug, Clone)]
pub struct InputBitPlanes {
    pub n_rows: usize,
    pub bits: u32,
    pub planes: Vec<Vec<u32>>,
    /// `sum_i codes_i`, the digitally computed offset-term factor.
    pub code_sum: i64,
}

impl InputBitPlanes {
    pub fn from_codes(codes: &[u32], bits: u32) -> Self {
        let mut planes = vec![Vec::new(); bits as usize];
        let mut code_sum = 0i64;
        for (i, &c) in codes.iter().enumerate() {
            debug_assert!(c < (1u64 << bits) as u32);
            code_sum += c as i64;
            let mut rem = c;
            while rem != 0 {
                let b = rem.trailing_zeros();
                planes[b as usize].push(i as u32);
                rem &= rem - 1;
            }
        }
        InputBitPlanes {
            n_rows: codes.len(),
            bits,
            planes,
            code_sum,
        }
    }

    /// Inverse of `from_codes`.
    pub fn reconstruct(&self) -> Vec<u32> {
        let mut codes = vec![0u32; self.n_rows];
        for (b, plane) in self.planes.iter().enumerate() {
            for &r in plane {
                codes[r as usize] |= 1 << b;
            }
        }
        codes
    }

    /// Active rows per bit plane.
    pub fn active_counts(&self) -> Vec<usize> {
        self.planes.iter().map(|p| p.len()).collect()
    }

    /// `sum_b 2^b * |plane_b|`; equals `code_sum` by construction.
    pub fn weighted_active(&self) -> i64 {
        self.planes
            .iter()
            .enumerate()
            .map(|(b, p)| (p.len() as i64) << b)
            .sum()
    }
}

/// Conversion from analog units back to integer code units:
/// `codes = (analog - g_min * active_term) * v_max / (1 - g_min)`.
#[derive(Debug, Clone, Copy)]
pub struct CodeScale<R> {
    pub v_max: u32,
    pub g_min: R,
}

impl<R: Real> CodeScale<R> {
    #[inline]
    pub fn to_code_units(&self, analog: R, active_term: i64) -> R {
        (analog - self.g_min * R::from_f(active_term as f64)) * R::from_f(self.v_max as f64)
            / (R::one() - self.g_min)
    }
}

/// Op counters accumulated while simulating (one instance per image,
/// summed deterministically by the caller).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub array_activations: u64,
    pub integrations: u64,
    pub adc_conversions: u64,
    pub shift_adds: u64,
    pub digital_subtractions: u64,
}

impl OpCounters {
    pub fn add(&mut self, other: &OpCounters) {
        self.array_activations += other.array_activations;
        self.integrations += other.integrations;
        self.adc_conversions += other.adc_conversions;
        self.shift_adds += other.shift_adds;
        self.digital_subtractions += other.digital_subtractions;
    }
}

/// ADC applied to this MVM's conversions, if any.
#[derive(Debug, Clone, Copy)]
pub enum AdcMode<R> {
    Disabled,
    Enabled { lo: R, hi: R, bits: u32 },
}

/// A sink for pre-ADC analog values, used during range calibration.
pub type StatsSink<'a, R> = &'a mut Vec<R>;

/// Run one array's full bit-serial MVM and return per-column integers in
/// weight-code units (the offset term is *not* subtracted here).
///
/// With analog accumulation, input bits are summed `sum_b 2^b I_j(b)` by
/// ideal switched-capacitor circuitry before a single conversion per
/// column; with digital accumulation each bit plane is digitized separately
/// and aggregated by exact integer shift-and-add of the ADC codes.
pub fn run_array_mvm<R: Real>(
    array: &ArrayInstance<R>,
    planes: &InputBitPlanes,
    accumulation: InputAccumulation,
    adc_mode: AdcMode<R>,
    scale: CodeScale<R>,
    counters: &mut OpCounters,
    mut stats: Option<StatsSink<'_, R>>,
) -> Result<Vec<i64>> {
    if planes.n_rows != array.rows() {
        return Err(Error::Shape(format!(
            "input planes have {} rows, array has {}",
            planes.n_rows,
            array.rows()
        )));
    }
    let cols = array.cols();
    match accumulation {
        InputAccumulation::Analog => {
            let mut acc = vec![R::zero(); cols];
            for (b, plane) in planes.planes.iter().enumerate() {
                counters.array_activations += 1;
                counters.integrations += cols as u64;
                if plane.is_empty() {
                    continue;
                }
                let currents = array.currents(plane)?;
                let w = R::from_f((1u64 << b) as f64);
                for (a, &i) in acc.iter_mut().zip(&currents) {
                    *a += w * i;
                }
            }
            if let Some(sink) = stats.as_deref_mut() {
                sink.extend_from_slice(&acc);
            }
            let active_term = planes.weighted_active();
            let mut out = Vec::with_capacity(cols);
            for &v in &acc {
                let analog = match adc_mode {
                    AdcMode::Disabled => v,
                    AdcMode::Enabled { lo, hi, bits } => {
                        counters.adc_conversions += 1;
                        adc::quantize(v, lo, hi, bits)?.1
                    }
                };
                out.push(round_half_away(scale.to_code_units(analog, active_term)).to_f() as i64);
            }
            Ok(out)
        }
        InputAccumulation::Digital => {
            // Integer S&A over per-bit ADC codes; the shared range affine is
            // applied once after aggregation.
            let mut code_acc = vec![0i64; cols];
            let mut raw_acc = vec![R::zero(); cols];
            let mut weight_sum = 0i64;
            for (b, plane) in planes.planes.iter().enumerate() {
                counters.array_activations += 1;
                counters.integrations += cols as u64;
                let currents = if plane.is_empty() {
                    vec![R::zero(); cols]
                } else {
                    array.currents(plane)?
                };
                if let Some(sink) = stats.as_deref_mut() {
                    sink.extend_from_slice(&currents);
                }
                let w = 1i64 << b;
                weight_sum += w;
                match adc_mode {
                    AdcMode::Disabled => {
                        let wr = R::from_f(w as f64);
                        for (a, &i) in raw_acc.iter_mut().zip(&currents) {
                            *a += wr * i;
                        }
                    }
                    AdcMode::Enabled { lo, hi, bits } => {
                        counters.adc_conversions += cols as u64;
                        counters.shift_adds += cols as u64;
                        for (a, &i) in code_acc.iter_mut().zip(&currents) {
                            *a += w * adc::quantize(i, lo, hi, bits)?.0 as i64;
                        }
                    }
                }
            }
            let active_term = planes.weighted_active();
            let mut out = Vec::with_capacity(cols);
            for j in 0..cols {
                let analog = match adc_mode {
                    AdcMode::Disabled => raw_acc[j],
                    AdcMode::Enabled { lo, hi, bits } => {
                        let lsb = (hi - lo) / R::from_f(((1u64 << bits) - 1) as f64);
                        lo * R::from_f(weight_sum as f64) + lsb * R::from_f(code_acc[j] as f64)
                    }
                };
                out.push(round_half_away(scale.to_code_units(analog, active_term)).to_f() as i64);
            }
            Ok(out)
        }
    }
}

/// Differential variant of [`run_array_mvm`]: per input bit the minus-column
/// currents are subtracted from the plus-column currents in analog, then
/// accumulated and digitized exactly as in the single-array path. The
/// `g_min` leakage terms of the pair cancel in the subtraction.
pub fn run_differential_mvm<R: Real>(
    plus: &ArrayInstance<R>,
    minus: &ArrayInstance<R>,
    planes: &InputBitPlanes,
    accumulation: InputAccumulation,
    adc_mode: AdcMode<R>,
    scale: CodeScale<R>,
    counters: &mut OpCounters,
    mut stats: Option<StatsSink<'_, R>>,
) -> Result<Vec<i64>> {
    if plus.rows() != minus.rows() || plus.cols() != minus.cols() {
        return Err(Error::Shape(format!(
            "differential pair dims {}x{} vs {}x{}",
            plus.rows(),
            plus.cols(),
            minus.rows(),
            minus.cols()
        )));
    }
    if planes.n_rows != plus.rows() {
        return Err(Error::Shape(format!(
            "input planes have {} rows, arrays have {}",
            planes.n_rows,
            plus.rows()
        )));
    }
    let cols = plus.cols();
    // g_min leakage cancels in the pair subtraction, but the span factor
    // (1 - g_min) of the linear code map remains.
    match accumulation {
        InputAccumulation::Analog => {
            let mut acc = vec![R::zero(); cols];
            for (b, plane) in planes.planes.iter().enumerate() {
                counters.array_activations += 2;
                counters.integrations += cols as u64;
                if plane.is_empty() {
                    continue;
                }
                let ip = plus.currents(plane)?;
                let im = minus.currents(plane)?;
                let w = R::from_f((1u64 << b) as f64);
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += w * (ip[j] - im[j]);
                }
            }
            if let Some(sink) = stats.as_deref_mut() {
                sink.extend_from_slice(&acc);
            }
            let mut out = Vec::with_capacity(cols);
            for &v in &acc {
                let analog = match adc_mode {
                    AdcMode::Disabled => v,
                    AdcMode::Enabled { lo, hi, bits } => {
                        counters.adc_conversions += 1;
                        adc::quantize(v, lo, hi, bits)?.1
                    }
                };
                out.push(round_half_away(scale.to_code_units(analog, 0)).to_f() as i64);
            }
            Ok(out)
        }
        InputAccumulation::Digital => {
            let mut code_acc = vec![0i64; cols];
            let mut raw_acc = vec![R::zero(); cols];
            let mut weight_sum = 0i64;
            for (b, plane) in planes.planes.iter().enumerate() {
                counters.array_activations += 2;
                counters.integrations += cols as u64;
                let diffs: Vec<R> = if plane.is_empty() {
                    vec![R::zero(); cols]
                } else {
                    let ip = plus.currents(plane)?;
                    let im = minus.currents(plane)?;
                    ip.iter().zip(&im).map(|(&p, &m)| p - m).collect()
                };
                if let Some(sink) = stats.as_deref_mut() {
                    sink.extend_from_slice(&diffs);
                }
                let w = 1i64 << b;
                weight_sum += w;
                match adc_mode {
                    AdcMode::Disabled => {
                        let wr = R::from_f(w as f64);
                        for (a, &d) in raw_acc.iter_mut().zip(&diffs) {
                            *a += wr * d;
                        }
                    }
                    AdcMode::Enabled { lo, hi, bits } => {
                        counters.adc_conversions += cols as u64;
                        counters.shift_adds += cols as u64;
                        for (a, &d) in code_acc.iter_mut().zip(&diffs) {
                            *a += w * adc::quantize(d, lo, hi, bits)?.0 as i64;
                        }
                    }
                }
            }
            let mut out = Vec::with_capacity(cols);
            for j in 0..cols {
                let analog = match adc_mode {
                    AdcMode::Disabled => raw_acc[j],
                    AdcMode::Enabled { lo, hi, bits } => {
                        let lsb = (hi - lo) / R::from_f(((1u64 << bits) - 1) as f64);
                        lo * R::from_f(weight_sum as f64) + lsb * R::from_f(code_acc[j] as f64)
                    }
                };
                out.push(round_half_away(scale.to_code_units(analog, 0)).to_f() as i64);
            }
            Ok(out)
        }
    }
}
