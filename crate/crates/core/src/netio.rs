//! Model and dataset ingestion.
//!
//! Loads networks from a JSON manifest plus raw little-endian `f32` blobs,
//! loads IDX-format image datasets, folds batch normalization into weights,
//! and quantizes weights to signed integers.
//!
//! Manifest schema:
//!
//! ```json
//! {
//!   "name": "...",
//!   "input": { "height": 28, "width": 28, "channels": 1 },
//!   "layers": [
//!     { "kind": "conv2d", "shape": [3, 3, 1, 8], "stride": 1, "padding": 1,
//!       "activation": "relu", "weight_blob": "conv1.w.f32",
//!       "bias_blob": "conv1.b.f32", "bn_blob": "conv1.bn.f32" },
//!     { "kind": "maxpool2d", "shape": [2, 2], "stride": 2 },
//!     { "kind": "dense", "shape": [784, 10], "activation": "none",
//!       "weight_blob": "fc.w.f32", "bias_blob": "fc.b.f32" }
//!   ]
//! }
//! ```
//!
//! Conv weight blobs are row-major over `[kx][ky][ic][oc]`, which is exactly
//! the unrolled `(Kx*Ky*N_ic) x N_oc` matrix used for mapping. Dense blobs
//! are `[n_in][n_out]`. A `bn_blob` holds four consecutive `f32` vectors of
//! length `n_oc`: gamma, beta, running mean, running variance.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::scalar::{round_half_away, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    Dense,
    AvgPool2d,
    MaxPool2d,
}

impl LayerKind {
    pub fn is_mvm(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Dense)
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::AvgPool2d | LayerKind::MaxPool2d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// Static description of one layer. For dense layers `n_ic`/`n_oc` are the
/// input/output widths and `kx = ky = 1`. Pool layers carry no weights.
#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kx: usize,
    pub ky: usize,
    pub n_ic: usize,
    pub n_oc: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
    pub has_bias: bool,
    pub followed_by_batchnorm: bool,
}

impl LayerSpec {
    /// Rows of the unrolled weight matrix: `Kx * Ky * N_ic`.
    pub fn unrolled_rows(&self) -> usize {
        self.kx * self.ky * self.n_ic
    }

    /// Output spatial dims for a given input, `floor((d + 2p - k)/s) + 1`.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw, s, p) = (self.kx, self.ky, self.stride, self.padding);
        if h + 2 * p < kh || w + 2 * p < kw {
            return Err(Error::Shape(format!(
                "kernel {}x{} does not fit input {}x{} with padding {}",
                kh, kw, h, w, p
            )));
        }
        Ok(((h + 2 * p - kh) / s + 1, (w + 2 * p - kw) / s + 1))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<R> {
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub eps: R,
}

#[derive(Debug, Clone)]
pub struct FloatLayer<R> {
    pub spec: LayerSpec,
    /// Unrolled weight matrix, `(kx*ky*n_ic) x n_oc`. Empty for pools.
    pub weights: Array2<R>,
    pub bias: Vec<R>,
    pub bn: Option<BatchNorm<R>>,
}

/// A floating-point network: an ordered feed-forward chain of layers.
#[derive(Debug, Clone)]
pub struct FloatNetwork<R> {
    pub name: String,
    /// Input shape `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<FloatLayer<R>>,
}

/// Per-layer activation quantization parameters. `lo`/`hi` bound the input
/// of the layer; `signed` selects the sign-split input path.
#[derive(Debug, Clone, Copy)]
pub struct ActivationSpec<R> {
    pub bits: u32,
    pub lo: R,
    pub hi: R,
    pub signed: bool,
}

#[derive(Debug, Clone)]
pub struct QuantLayer<R> {
    pub spec: LayerSpec,
    /// Signed integer weights in `[-(2^(bw-1)-1), 2^(bw-1)-1]`. Empty for pools.
    pub w_int: Array2<i32>,
    /// `max|W_FP| / (2^(bw-1)-1)`.
    pub w_scale: R,
    /// Per-output-column sum of `w_int`, for the affine input-offset term.
    pub row_sums: Vec<i64>,
    /// Digital bias, kept in float and added after the MVM.
    pub bias: Vec<R>,
    /// Input quantization; populated by activation calibration.
    pub act_in: Option<ActivationSpec<R>>,
}

#[derive(Debug, Clone)]
pub struct QuantizedNetwork<R> {
    pub name: String,
    pub input_shape: (usize, usize, usize),
    pub weight_bits: u32,
    pub layers: Vec<QuantLayer<R>>,
}

/// A loaded dataset: images in `[0,1]` as `(h, w, c)` arrays plus labels.
#[derive(Debug, Clone)]
pub struct ImageBatch<R> {
    pub images: Vec<Array3<R>>,
    pub labels: Vec<u8>,
}

impl<R> ImageBatch<R> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Manifest loading

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    input: ManifestInput,
    layers: Vec<ManifestLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestInput {
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    kind: String,
    shape: Vec<usize>,
    #[serde(default = "default_stride")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    #[serde(default)]
    activation: Option<String>,
    #[serde(default)]
    weight_blob: Option<String>,
    #[serde(default)]
    bias_blob: Option<String>,
    #[serde(default)]
    bn_blob: Option<String>,
    #[serde(default)]
    bn_epsilon: Option<f64>,
}

fn default_stride() -> usize {
    1
}

fn read_f32_blob<R: Real>(dir: &Path, blob: &str, expect: usize, what: &str) -> Result<Vec<R>> {
    let path = dir.join(blob);
    let bytes = fs::read(&path).map_err(|e| {
        Error::Manifest(format!("missing blob {blob} for {what}: {e}"))
    })?;
    if bytes.len() != expect * 4 {
        return Err(Error::Shape(format!(
            "blob {blob} has {} bytes, expected {} ({} f32 values) for {what}",
            bytes.len(),
            expect * 4,
            expect
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| R::from_f(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

/// Load a [`FloatNetwork`] from a JSON manifest. Blob paths are resolved
/// relative to the manifest's directory. Validates the full shape chain.
pub fn load_model<R: Real>(manifest_path: &Path) -> Result<FloatNetwork<R>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut layers = Vec::with_capacity(manifest.layers.len());
    // Shape chain, updated layer by layer.
    let (mut h, mut w, mut c) = (
        manifest.input.height,
        manifest.input.width,
        manifest.input.channels,
    );
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Manifest("input shape must be non-zero".into()));
    }

    for (li, ml) in manifest.layers.iter().enumerate() {
        let activation = match ml.activation.as_deref() {
            Some("relu") => Activation::Relu,
            Some("none") | None => Activation::None,
            Some(other) => {
                return Err(Error::Manifest(format!(
                    "layer {li}: unsupported activation {other:?}"
                )))
            }
        };
        if ml.stride == 0 {
            return Err(Error::Manifest(format!("layer {li}: stride must be >= 1")));
        }

        let spec = match ml.kind.as_str() {
            "conv2d" => {
                let [kx, ky, n_ic, n_oc]: [usize; 4] =
                    ml.shape.as_slice().try_into().map_err(|_| {
                        Error::Manifest(format!(
                            "layer {li}: conv2d shape must be [kx, ky, n_ic, n_oc]"
                        ))
                    })?;
                if n_ic != c {
                    return Err(Error::Shape(format!(
                        "layer {li}: conv2d expects {n_ic} input channels, chain has {c}"
                    )));
                }
                LayerSpec {
                    kind: LayerKind::Conv2d,
                    kx,
                    ky,
                    n_ic,
                    n_oc,
                    stride: ml.stride,
                    padding: ml.padding,
                    activation,
                    has_bias: ml.bias_blob.is_some(),
                    followed_by_batchnorm: ml.bn_blob.is_some(),
                }
            }
            "dense" => {
                let [n_in, n_out]: [usize; 2] =
                    ml.shape.as_slice().try_into().map_err(|_| {
                        Error::Manifest(format!(
                            "layer {li}: dense shape must be [n_in, n_out]"
                        ))
                    })?;
                if n_in != h * w * c {
                    return Err(Error::Shape(format!(
                        "layer {li}: dense expects {n_in} inputs, chain has {}x{}x{} = {}",
                        h,
                        w,
                        c,
                        h * w * c
                    )));
                }
                LayerSpec {
                    kind: LayerKind::Dense,
                    kx: 1,
                    ky: 1,
                    n_ic: n_in,
                    n_oc: n_out,
                    stride: 1,
                    padding: 0,
                    activation,
                    has_bias: ml.bias_blob.is_some(),
                    followed_by_batchnorm: ml.bn_blob.is_some(),
                }
            }
            "avgpool2d" | "maxpool2d" => {
                let (kx, ky) = match ml.shape.as_slice() {
                    [k] => (*k, *k),
                    [kx, ky] => (*kx, *ky),
                    _ => {
                        return Err(Error::Manifest(format!(
                            "layer {li}: pool shape must be [k] or [kx, ky]"
                        )))
                    }
                };
                if ml.bn_blob.is_some() || ml.weight_blob.is_some() {
                    return Err(Error::Manifest(format!(
                        "layer {li}: pool layers take no weights or batch norm"
                    )));
                }
                let kind = if ml.kind == "avgpool2d" {
                    LayerKind::AvgPool2d
                } else {
                    LayerKind::MaxPool2d
                };
                LayerSpec {
                    kind,
                    kx,
                    ky,
                    n_ic: c,
                    n_oc: c,
                    stride: ml.stride,
                    padding: ml.padding,
                    activation,
                    has_bias: false,
                    followed_by_batchnorm: false,
                }
            }
            other => {
                return Err(Error::Manifest(format!(
                    "layer {li}: unsupported layer kind {other:?}"
                )))
            }
        };

        let (weights, bias, bn) = if spec.kind.is_mvm() {
            let rows = spec.unrolled_rows();
            let cols = spec.n_oc;
            let wb = ml.weight_blob.as_deref().ok_or_else(|| {
                Error::Manifest(format!("layer {li}: missing weight_blob"))
            })?;
            let wdata = read_f32_blob::<R>(dir, wb, rows * cols, &format!("layer {li} weights"))?;
            let weights = Array2::from_shape_vec((rows, cols), wdata)
                .expect("length checked by read_f32_blob");
            let bias = match ml.bias_blob.as_deref() {
                Some(bb) => read_f32_blob::<R>(dir, bb, cols, &format!("layer {li} bias"))?,
                None => vec![R::zero(); cols],
            };
            let bn = match ml.bn_blob.as_deref() {
                Some(nb) => {
                    let data =
                        read_f32_blob::<R>(dir, nb, 4 * cols, &format!("layer {li} batch norm"))?;
                    Some(BatchNorm {
                        gamma: data[0..cols].to_vec(),
                        beta: data[cols..2 * cols].to_vec(),
                        mean: data[2 * cols..3 * cols].to_vec(),
                        var: data[3 * cols..4 * cols].to_vec(),
                        eps: R::from_f(ml.bn_epsilon.unwrap_or(1e-5)),
                    })
                }
                None => None,
            };
            (weights, bias, bn)
        } else {
            (Array2::zeros((0, 0)), Vec::new(), None)
        };

        // Advance the shape chain.
        match spec.kind {
            LayerKind::Conv2d => {
                let (oh, ow) = spec.out_dims(h, w)?;
                h = oh;
                w = ow;
                c = spec.n_oc;
            }
            LayerKind::Dense => {
                h = 1;
                w = 1;
                c = spec.n_oc;
            }
            LayerKind::AvgPool2d | LayerKind::MaxPool2d => {
                let (oh, ow) = spec.out_dims(h, w)?;
                h = oh;
                w = ow;
            }
        }

        layers.push(FloatLayer {
            spec,
            weights,
            bias,
            bn,
        });
    }

    if layers.is_empty() {
        return Err(Error::Manifest("network has no layers".into()));
    }

    Ok(FloatNetwork {
        name: manifest.name,
        input_shape: (
            manifest.input.height,
            manifest.input.width,
            manifest.input.channels,
        ),
        layers,
    })
}

// ---------------------------------------------------------------------------
// Float forward pass (direct convolution; used for activation calibration and
// as the oracle for batch-norm folding).

/// Inputs seen by every layer during a float forward pass, plus the logits.
pub struct ForwardTrace<R> {
    /// `layer_inputs[i]` is the input tensor of `layers[i]`.
    pub layer_inputs: Vec<Array3<R>>,
    pub logits: Vec<R>,
}

impl<R: Real> FloatNetwork<R> {
    /// Float forward pass with direct (non-unrolled) convolutions.
    /// Batch norm, when present, is applied after the MVM + bias and before
    /// the activation function.
    pub fn forward(&self, image: &Array3<R>) -> Result<ForwardTrace<R>> {
        let (h0, w0, c0) = self.input_shape;
        if image.dim() != (h0, w0, c0) {
            return Err(Error::Shape(format!(
                "image dims {:?} do not match network input {:?}",
                image.dim(),
                self.input_shape
            )));
        }
        let mut x = image.clone();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layer_inputs.push(x.clone());
            x = layer.forward(&x)?;
        }
        let logits = x.iter().cloned().collect();
        Ok(ForwardTrace {
            layer_inputs,
            logits,
        })
    }
}

impl<R: Real> FloatLayer<R> {
    fn forward(&self, x: &Array3<R>) -> Result<Array3<R>> {
        let (h, w, c) = x.dim();
        let spec = &self.spec;
        let mut y = match spec.kind {
            LayerKind::Conv2d | LayerKind::Dense => {
                let (oh, ow) = if spec.kind == LayerKind::Dense {
                    (1, 1)
                } else {
                    spec.out_dims(h, w)?
                };
                let mut out = Array3::zeros((oh, ow, spec.n_oc));
                for i in 0..oh {
                    for j in 0..ow {
                        for oc in 0..spec.n_oc {
                            let mut acc = self.bias[oc];
                            for kx in 0..spec.kx {
                                for ky in 0..spec.ky {
                                    for ic in 0..spec.n_ic {
                                        let v = if spec.kind == LayerKind::Dense {
                                            // flattened h*w*c order
                                            let flat = ic;
                                            let (fh, rem) = (flat / (w * c), flat % (w * c));
                                            x[[fh, rem / c, rem % c]]
                                        } else {
                                            let ih = (i * spec.stride + kx) as isize
                                                - spec.padding as isize;
                                            let iw = (j * spec.stride + ky) as isize
                                                - spec.padding as isize;
                                            if ih < 0
                                                || iw < 0
                                                || ih as usize >= h
                                                || iw as usize >= w
                                            {
                                                R::zero()
                                            } else {
                                                x[[ih as usize, iw as usize, ic]]
                                            }
                                        };
                                        let row = (kx * spec.ky + ky) * spec.n_ic + ic;
                                        acc = acc + self.weights[[row, oc]] * v;
                                    }
                                }
                            }
                            out[[i, j, oc]] = acc;
                        }
                    }
                }
                out
            }
            LayerKind::AvgPool2d | LayerKind::MaxPool2d => pool_forward(spec, x)?,
        };

        if let Some(bn) = &self.bn {
            for mut lane in y.rows_mut() {
                for (oc, v) in lane.iter_mut().enumerate() {
                    let s = bn.gamma[oc] / (bn.var[oc] + bn.eps).sqrt();
                    *v = (*v - bn.mean[oc]) * s + bn.beta[oc];
                }
            }
        }
        if spec.activation == Activation::Relu {
            y.mapv_inplace(|v| if v > R::zero() { v } else { R::zero() });
        }
        Ok(y)
    }
}

/// Digital pooling over fixed windows (error-free float op).
pub fn pool_forward<R: Real>(spec: &LayerSpec, x: &Array3<R>) -> Result<Array3<R>> {
    let (h, w, c) = x.dim();
    let (oh, ow) = spec.out_dims(h, w)?;
    let mut out = Array3::zeros((oh, ow, c));
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut acc = if spec.kind == LayerKind::MaxPool2d {
                    R::neg_infinity()
                } else {
                    R::zero()
                };
                let mut count = 0usize;
                for kx in 0..spec.kx {
                    for ky in 0..spec.ky {
                        let ih = (i * spec.stride + kx) as isize - spec.padding as isize;
                        let iw = (j * spec.stride + ky) as isize - spec.padding as isize;
                        let v = if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= w {
                            R::zero()
                        } else {
                            x[[ih as usize, iw as usize, ch]]
                        };
                        match spec.kind {
                            LayerKind::MaxPool2d => {
                                if v > acc {
                                    acc = v;
                                }
                            }
                            _ => {
                                acc = acc + v;
                                count += 1;
                            }
                        }
                    }
                }
                out[[i, j, ch]] = if spec.kind == LayerKind::AvgPool2d {
                    acc / R::from_f(count as f64)
                } else {
                    acc
                };
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batch-norm folding

/// Fold batch-norm parameters into weights and biases. The returned network
/// has no batch-norm layers; its forward function is identical to within
/// float rounding. Per output channel: scale `gamma/sqrt(var+eps)` multiplies
/// the weight column, and `beta + (bias - mean) * scale` becomes the bias.
pub fn fold_batchnorm<R: Real>(net: &FloatNetwork<R>) -> Result<FloatNetwork<R>> {
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let mut folded = layer.clone();
        if let Some(bn) = &layer.bn {
            if !layer.spec.kind.is_mvm() {
                return Err(Error::Manifest(format!(
                    "layer {li}: batch norm on non-weighted layer"
                )));
            }
            for oc in 0..layer.spec.n_oc {
                let s = bn.gamma[oc] / (bn.var[oc] + bn.eps).sqrt();
                for r in 0..layer.weights.nrows() {
                    folded.weights[[r, oc]] = layer.weights[[r, oc]] * s;
                }
                folded.bias[oc] = bn.beta[oc] + (layer.bias[oc] - bn.mean[oc]) * s;
            }
            folded.bn = None;
            folded.spec.followed_by_batchnorm = false;
            folded.spec.has_bias = true;
        }
        layers.push(folded);
    }
    Ok(FloatNetwork {
        name: net.name.clone(),
        input_shape: net.input_shape,
        layers,
    })
}

// ---------------------------------------------------------------------------
// Weight quantization

/// Quantize weights to `weight_bits` signed integers per layer, scaled by the
/// per-layer maximum absolute value. Rounding is half-away-from-zero; the most
/// negative code `-2^(bw-1)` is never produced. Biases stay in float.
pub fn quantize_network<R: Real>(
    net: &FloatNetwork<R>,
    weight_bits: u32,
) -> Result<QuantizedNetwork<R>> {
    if !(2..=16).contains(&weight_bits) {
        return Err(Error::Quantize(format!(
            "weight_bits must be in [2, 16], got {weight_bits}"
        )));
    }
    let qmax = (1i64 << (weight_bits - 1)) - 1;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        if layer.bn.is_some() {
            return Err(Error::Quantize(format!(
                "layer {li}: fold batch norm before quantizing"
            )));
        }
        if !layer.spec.kind.is_mvm() {
            layers.push(QuantLayer {
                spec: layer.spec.clone(),
                w_int: Array2::zeros((0, 0)),
                w_scale: R::one(),
                row_sums: Vec::new(),
                bias: Vec::new(),
                act_in: None,
            });
            continue;
        }
        let max_abs = layer
            .weights
            .iter()
            .fold(R::zero(), |m, &v| if v.abs() > m { v.abs() } else { m });
        if max_abs == R::zero() {
            return Err(Error::Quantize(format!(
                "layer {li}: all-zero weight matrix, scale undefined"
            )));
        }
        let qmax_r = R::from_f(qmax as f64);
        let w_int = layer
            .weights
            .mapv(|v| round_half_away(v / max_abs * qmax_r).to_f() as i32);
        let row_sums = (0..layer.spec.n_oc)
            .map(|oc| w_int.column(oc).iter().map(|&v| v as i64).sum())
            .collect();
        layers.push(QuantLayer {
            spec: layer.spec.clone(),
            w_int,
            w_scale: max_abs / qmax_r,
            row_sums,
            bias: layer.bias.clone(),
            act_in: None,
        });
    }
    Ok(QuantizedNetwork {
        name: net.name.clone(),
        input_shape: net.input_shape,
        weight_bits,
        layers,
    })
}

// ---------------------------------------------------------------------------
// IDX dataset loading

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated file reading {what}")))
}

/// Load an IDX image/label pair (the MNIST container format). Pixels are
/// unsigned bytes scaled to `[0, 1]`.
pub fn load_idx_dataset<R: Real>(images_path: &Path, labels_path: &Path) -> Result<ImageBatch<R>> {
    let img_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let img_magic = read_be_u32(&img_bytes, 0, "image magic")?;
    if img_magic != 0x0000_0803 {
        return Err(Error::Idx(format!(
            "bad image magic {img_magic:#010x}, expected 0x00000803 (ubyte, 3 dims)"
        )));
    }
    let n = read_be_u32(&img_bytes, 4, "image count")? as usize;
    let h = read_be_u32(&img_bytes, 8, "image rows")? as usize;
    let w = read_be_u32(&img_bytes, 12, "image cols")? as usize;
    let expect = 16 + n * h * w;
    if img_bytes.len() != expect {
        return Err(Error::Idx(format!(
            "image file has {} bytes, expected {expect} for {n} images of {h}x{w}",
            img_bytes.len()
        )));
    }

    let lbl_magic = read_be_u32(&lbl_bytes, 0, "label magic")?;
    if lbl_magic != 0x0000_0801 {
        return Err(Error::Idx(format!(
            "bad label magic {lbl_magic:#010x}, expected 0x00000801 (ubyte, 1 dim)"
        )));
    }
    let n_lbl = read_be_u32(&lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + n_lbl {
        return Err(Error::Idx(format!(
            "label file has {} bytes, expected {}",
            lbl_bytes.len(),
            8 + n_lbl
        )));
    }
    if n != n_lbl {
        return Err(Error::Idx(format!(
            "count mismatch: {n} images vs {n_lbl} labels"
        )));
    }

    let scale = R::from_f(1.0 / 255.0);
    let images = (0..n)
        .map(|i| {
            let at = 16 + i * h * w;
            Array3::from_shape_vec(
                (h, w, 1),
                img_bytes[at..at + h * w]
                    .iter()
                    .map(|&b| R::from_f(b as f64) * scale)
                    .collect(),
            )
            .expect("length checked above")
        })
        .collect();
    let labels = lbl_bytes[8..].to_vec();
    Ok(ImageBatch { images, labels })
}
