//! Cell programming-error models.
//!
//! Given a target conductance, sample the conductance the write process
//! actually lands on. Two idealized models (state-independent and
//! state-proportional error) are normalized so that equal `alpha` values
//! produce the same error at the midpoint conductance `G = 0.5 * G_max`.
//! Measured devices are described by a monotone sigma(G) curve, either the
//! saturating-exponential family or a tabulated curve.
//!
//! Read noise and conductance drift are not modeled.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Accepted On/Off current ratio of the SONOS charge-trap cell.
pub const SONOS_ON_OFF_RATIO: f64 = 1e7;

/// Distribution family mapping target conductance to programming-error
/// standard deviation (all in units of `G_max`).
#[derive(Debug, Clone)]
pub enum ErrorModel<R> {
    /// No programming error; targets are hit exactly.
    Ideal,
    /// Constant error: `sigma = alpha / 2` at every conductance.
    StateIndependent { alpha: R },
    /// Error linear in the state: `sigma = alpha * g`.
    StateProportional { alpha: R },
    /// Saturating exponential `sigma(g) = sigma_sat * (1 - exp(-g / g_c))`,
    /// the family fit to measured charge-trap cells.
    SaturatingExp { sigma_sat: R, g_c: R },
    /// Sampled sigma(g) lookup table, linearly interpolated and clamped at
    /// the ends.
    Table(SigmaTable<R>),
}

impl<R: Real> ErrorModel<R> {
    pub fn is_ideal(&self) -> bool {
        matches!(self, ErrorModel::Ideal)
    }

    /// Programming-error standard deviation at target conductance `g`.
    pub fn sigma(&self, g: R) -> Result<R> {
        if g < R::zero() || g > R::one() {
            return Err(Error::Device(format!("conductance {g} outside [0, 1]")));
        }
        Ok(self.sigma_unchecked(g))
    }

    #[inline]
    fn sigma_unchecked(&self, g: R) -> R {
        match self {
            ErrorModel::Ideal => R::zero(),
            ErrorModel::StateIndependent { alpha } => *alpha * R::from_f(0.5),
            ErrorModel::StateProportional { alpha } => *alpha * g,
            ErrorModel::SaturatingExp { sigma_sat, g_c } => {
                *sigma_sat * (R::one() - (-g / *g_c).exp())
            }
            ErrorModel::Table(table) => table.interpolate(g),
        }
    }
}

/// Monotone sigma(g) lookup table on `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SigmaTable<R> {
    points: Vec<(R, R)>,
}

impl<R: Real> SigmaTable<R> {
    /// Build from `(g, sigma)` points. Points are sorted by `g`; sigma must
    /// be non-negative and non-decreasing in `g`.
    pub fn new(mut points: Vec<(R, R)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Device("sigma table is empty".into()));
        }
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN in sigma table"));
        for &(g, s) in &points {
            if g < R::zero() || g > R::one() {
                return Err(Error::Device(format!("table g {g} outside [0, 1]")));
            }
            if s < R::zero() {
                return Err(Error::Device(format!("negative sigma {s} in table")));
            }
        }
        for pair in points.windows(2) {
            if pair[1].1 < pair[0].1 {
                return Err(Error::Device(
                    "sigma table must be non-decreasing in g".into(),
                ));
            }
        }
        Ok(SigmaTable { points })
    }

    /// Load from a two-column CSV `(g, sigma)`; a non-numeric first row is
    /// treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::Device(format!("{}: {e}", path.display())))?;
        let mut points = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let record =
                record.map_err(|e| Error::Device(format!("{}: {e}", path.display())))?;
            if record.len() != 2 {
                return Err(Error::Device(format!(
                    "{}: row {} has {} columns, expected 2",
                    path.display(),
                    i + 1,
                    record.len()
                )));
            }
            let g = record[0].trim().parse::<f64>();
            let s = record[1].trim().parse::<f64>();
            match (g, s) {
                (Ok(g), Ok(s)) => points.push((R::from_f(g), R::from_f(s))),
                _ if i == 0 => continue, // header row
                _ => {
                    return Err(Error::Device(format!(
                        "{}: row {} is not numeric",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        SigmaTable::new(points)
    }

    fn interpolate(&self, g: R) -> R {
        let pts = &self.points;
        if g <= pts[0].0 {
            return pts[0].1;
        }
        if g >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let idx = pts.partition_point(|&(x, _)| x < g);
        let (g0, s0) = pts[idx - 1];
        let (g1, s1) = pts[idx];
        if g1 == g0 {
            return s0;
        }
        s0 + (s1 - s0) * (g - g0) / (g1 - g0)
    }
}

/// Default error model of the characterized SONOS cell, in units of
/// `G_max = I_max`: approximately state-proportional at low conductance
/// (sigma/g near 6%) and saturating around half scale. Override the
/// parameters through the experiment config when fitting other devices.
pub fn sonos_error_model<R: Real>() -> ErrorModel<R> {
    ErrorModel::SaturatingExp {
        sigma_sat: R::from_f(0.04),
        g_c: R::from_f(0.62),
    }
}

/// Target conductances of the SONOS cell used as an approximate 7-bit
/// memory: level 0 programmed into deep subthreshold (On/Off `1e7`), levels
/// 1..=127 linear up to `G_max`.
pub fn sonos_seven_bit_levels<R: Real>() -> Vec<R> {
    let g_min = R::from_f(1.0 / SONOS_ON_OFF_RATIO);
    let span = R::one() - g_min;
    (0u32..128)
        .map(|level| {
            if level == 0 {
                g_min
            } else {
                g_min + R::from_f(level as f64 / 127.0) * span
            }
        })
        .collect()
}

/// Deterministic hierarchical random stream. The same `(master, trial,
/// layer, array)` indices always yield the same sample sequence; distinct
/// indices yield independent streams, so sampling can run lock-free in
/// parallel across arrays and trials. Within one array, cells consume the
/// stream in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededStream {
    pub master: u64,
    pub trial: u64,
    pub layer: u64,
    pub array: u64,
}

impl SeededStream {
    pub fn new(master: u64, trial: u64, layer: u64, array: u64) -> Self {
        SeededStream {
            master,
            trial,
            layer,
            array,
        }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut state = splitmix64(self.master ^ 0x9E37_79B9_7F4A_7C15);
        for (i, idx) in [self.trial, self.layer, self.array].into_iter().enumerate() {
            state = splitmix64(state ^ idx.wrapping_add(1).rotate_left(17 * (i as u32 + 1)));
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}

#[inline]
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample programmed conductances: each cell independently gets
/// `target + Normal(0, sigma(target))`, clipped at zero (a negative
/// conductance is unphysical). Deterministic given the stream indices.
pub fn sample_programmed<R: Real>(
    model: &ErrorModel<R>,
    targets: &Array2<R>,
    stream: &SeededStream,
) -> Result<Array2<R>> {
    if model.is_ideal() {
        return Ok(targets.clone());
    }
    if let Some(bad) = targets.iter().find(|&&g| g < R::zero() || g > R::one()) {
        return Err(Error::Device(format!(
            "target conductance {bad} outside [0, 1]"
        )));
    }
    let mut rng = stream.rng();
    let mut out = targets.clone();
    for v in out.iter_mut() {
        let sigma = model.sigma_unchecked(*v);
        // draw unconditionally so the stream position does not depend on
        // sigma values
        let z: R = R::standard_normal(&mut rng);
        if sigma > R::zero() {
            *v = (*v + sigma * z).max(R::zero());
        }
    }
    Ok(out)
}
