//! Accumulator sweeps on a small image classifier.
//!
//! Inference runs in `f32` on the host; every matrix product (dense layers
//! and convolutions lowered with im2col) goes through [`gemm`] with the
//! kernel configuration under test, or through an FMA chain for the
//! baseline.
//!
//! Model files are JSON:
//!
//! ```json
//! {"name": "digits-cnn", "input": [1, 8, 8], "layers": [
//!   {"type": "conv2d", "in_channels": 1, "out_channels": 8, "kernel": 3,
//!    "stride": 1, "pad": 1, "weights": "<base64>", "bias": "<base64>"},
//!   {"type": "relu"}, {"type": "maxpool", "size": 2, "stride": 2},
//!   {"type": "flatten"},
//!   {"type": "dense", "in": 128, "out": 10, "weights": "<base64>", "bias": "<base64>"},
//!   {"type": "softmax"}]}
//! ```
//!
//! Tensors are base64 little-endian `f32`; dense weights are `[out][in]`,
//! convolution weights `[out_channels][in_channels][kernel][kernel]`.
//! Datasets are IDX files: unsigned-byte images (magic `0x00000803`,
//! dimensions count, rows, cols) with a separate label file (magic
//! `0x00000801`). Pixels are scaled by `1/255`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::Deserialize;

use super::report::SweepRow;
use super::ExperimentError;
use crate::accumulator::AccumulatorSpec;
use crate::fdp::{fma_reference, DotProductConfig};
use crate::formats::{cast, FormatSpec};
use crate::gemm::{gemm, KernelConfig, MatrixBuffer};

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerFile {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        weights: String,
        bias: String,
    },
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
        weights: String,
        bias: String,
    },
    Relu,
    Maxpool {
        size: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Flatten,
    Softmax,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
struct ModelFile {
    name: String,
    input: [usize; 3],
    layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Dense {
        inputs: usize,
        outputs: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Softmax,
}

/// A validated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    /// Input shape `(channels, height, width)`.
    pub input: (usize, usize, usize),
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Image(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn len(&self) -> usize {
        match *self {
            Shape::Image(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
        }
    }
}

fn floats(field: &str, text: &str, expected: usize) -> Result<Vec<f32>, ExperimentError> {
    let bytes = BASE64
        .decode(text.trim())
        .map_err(|e| ExperimentError::Model(format!("{field}: bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(ExperimentError::Model(format!(
            "{field}: expected {expected} floats, found {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Base64 of little-endian `f32`s, as stored in model files.
pub fn encode_floats(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    BASE64.encode(bytes)
}

impl Model {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| ExperimentError::Model(e.to_string()))?;
        let [c, h, w] = file.input;
        let mut shape = Shape::Image(c, h, w);
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let bad = |msg: String| ExperimentError::Model(format!("layer {i}: {msg}"));
            let layer = match l {
                LayerFile::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    weights,
                    bias,
                } => {
                    let Shape::Image(c, h, w) = shape else {
                        return Err(bad("conv2d needs an image input".into()));
                    };
                    if c != in_channels || kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
                        return Err(bad(format!("conv2d does not fit input {c}x{h}x{w}")));
                    }
                    shape = Shape::Image(
                        out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    );
                    Layer::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        pad,
                        weights: floats("weights", &weights, out_channels * in_channels * kernel * kernel)?,
                        bias: floats("bias", &bias, out_channels)?,
                    }
                }
                LayerFile::Dense {
                    inputs,
                    outputs,
                    weights,
                    bias,
                } => {
                    if shape != Shape::Flat(inputs) {
                        return Err(bad(format!("dense expects {inputs} flat inputs, got {shape:?}")));
                    }
                    shape = Shape::Flat(outputs);
                    Layer::Dense {
                        inputs,
                        outputs,
                        weights: floats("weights", &weights, outputs * inputs)?,
                        bias: floats("bias", &bias, outputs)?,
                    }
                }
                LayerFile::Relu => Layer::Relu,
                LayerFile::Maxpool { size, stride } => {
                    let stride = stride.unwrap_or(size);
                    let Shape::Image(c, h, w) = shape else {
                        return Err(bad("maxpool needs an image input".into()));
                    };
                    if size == 0 || stride == 0 || h < size || w < size {
                        return Err(bad(format!("maxpool {size} does not fit {h}x{w}")));
                    }
                    shape = Shape::Image(c, (h - size) / stride + 1, (w - size) / stride + 1);
                    Layer::MaxPool { size, stride }
                }
                LayerFile::Flatten => {
                    shape = Shape::Flat(shape.len());
                    Layer::Flatten
                }
                LayerFile::Softmax => Layer::Softmax,
            };
            layers.push(layer);
        }
        if !matches!(shape, Shape::Flat(_)) {
            return Err(ExperimentError::Model("network must end in a flat class vector".into()));
        }
        Ok(Model {
            name: file.name,
            input: (c, h, w),
            layers,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Labelled images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn parse(images: &[u8], labels: &[u8]) -> Result<Self, ExperimentError> {
        let bad = |m: &str| ExperimentError::Dataset(m.to_string());
        let be = |b: &[u8], i: usize| -> Option<usize> {
            b.get(i..i + 4).map(|s| u32::from_be_bytes(s.try_into().expect("4 bytes")) as usize)
        };
        if be(images, 0) != Some(0x0803) {
            return Err(bad("image file: expected IDX magic 0x00000803"));
        }
        if be(labels, 0) != Some(0x0801) {
            return Err(bad("label file: expected IDX magic 0x00000801"));
        }
        let (n, rows, cols) = match (be(images, 4), be(images, 8), be(images, 12)) {
            (Some(n), Some(r), Some(c)) => (n, r, c),
            _ => return Err(bad("image file: truncated header")),
        };
        let pixels = images
            .get(16..16 + n * rows * cols)
            .ok_or_else(|| bad("image file: truncated pixel data"))?
            .to_vec();
        let n_labels = be(labels, 4).ok_or_else(|| bad("label file: truncated header"))?;
        if n_labels != n {
            return Err(bad("image and label counts differ"));
        }
        let labels = labels
            .get(8..8 + n)
            .ok_or_else(|| bad("label file: truncated"))?
            .to_vec();
        Ok(Dataset {
            rows,
            cols,
            pixels,
            labels,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&std::fs::read(images)?, &std::fs::read(labels)?)
    }

    /// IDX encodings of the images and the labels.
    pub fn to_idx(&self) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::with_capacity(16 + self.pixels.len());
        for v in [0x0803, self.len() as u32, self.rows as u32, self.cols as u32] {
            images.extend_from_slice(&v.to_be_bytes());
        }
        images.extend_from_slice(&self.pixels);
        let mut labels = Vec::with_capacity(8 + self.len());
        labels.extend_from_slice(&0x0801u32.to_be_bytes());
        labels.extend_from_slice(&(self.len() as u32).to_be_bytes());
        labels.extend_from_slice(&self.labels);
        (images, labels)
    }
}

/// Label file next to an image file: `x.idx` -> `x.labels.idx`.
pub fn default_labels_path(images: &Path) -> PathBuf {
    let s = images.to_string_lossy();
    match s.strip_suffix(".idx") {
        Some(stem) => PathBuf::from(format!("{stem}.labels.idx")),
        None => PathBuf::from(format!("{s}.labels")),
    }
}

/// How matrix products are evaluated during inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Engine {
    /// Through the GEMM front door with this kernel.
    Tailored(KernelConfig),
    /// Left-to-right FMA chains in the given format.
    FmaReference(FormatSpec),
}

/// `a (m x k) * b (k x n)` in `f32`, row-major.
fn matmul(engine: &Engine, a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Result<Vec<f32>, ExperimentError> {
    let am = MatrixBuffer::from_f32(m, k, a)?;
    let bm = MatrixBuffer::from_f32(k, n, b)?;
    let host = FormatSpec::binary32();
    let words = match engine {
        Engine::Tailored(cfg) => {
            let c = MatrixBuffer::zeros(m, n, host);
            gemm(&am, &bm, &c, host.one(), host.zero(), cfg)?.words()
        }
        Engine::FmaReference(fmt) => {
            let a = am.cast_to(fmt);
            let bt = bm.transpose().cast_to(fmt);
            (0..m)
                .into_par_iter()
                .flat_map_iter(|i| {
                    let (a, bt) = (&a, &bt);
                    (0..n).map(move |j| {
                        let w = fma_reference(a.row(i), bt.row(j), fmt).expect("equal lengths");
                        cast(w, fmt, &host)
                    })
                })
                .collect()
        }
    };
    Ok(words.into_iter().map(|w| f32::from_bits(w as u32)).collect())
}

/// Activations for a whole batch.
struct Batch {
    n: usize,
    shape: Shape,
    data: Vec<f32>,
}

fn conv2d(
    engine: &Engine,
    x: &Batch,
    (out_channels, kernel, stride, pad): (usize, usize, usize, usize),
    weights: &[f32],
    bias: &[f32],
) -> Result<Batch, ExperimentError> {
    let Shape::Image(c, h, w) = x.shape else {
        unreachable!("validated at load time")
    };
    let oh = (h + 2 * pad - kernel) / stride + 1;
    let ow = (w + 2 * pad - kernel) / stride + 1;
    let patch = c * kernel * kernel;
    // im2col: one row per (sample, output position).
    let mut cols = vec![0f32; x.n * oh * ow * patch];
    for s in 0..x.n {
        let img = &x.data[s * c * h * w..(s + 1) * c * h * w];
        for y in 0..oh {
            for z in 0..ow {
                let row = &mut cols[((s * oh + y) * ow + z) * patch..][..patch];
                for ch in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (z * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                row[(ch * kernel + ky) * kernel + kx] = img[(ch * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    // weights are [oc][patch]; the product needs [patch][oc].
    let mut wt = vec![0f32; patch * out_channels];
    for o in 0..out_channels {
        for p in 0..patch {
            wt[p * out_channels + o] = weights[o * patch + p];
        }
    }
    let prod = matmul(engine, &cols, &wt, x.n * oh * ow, patch, out_channels)?;
    let mut data = vec![0f32; x.n * out_channels * oh * ow];
    for s in 0..x.n {
        for pos in 0..oh * ow {
            for o in 0..out_channels {
                data[(s * out_channels + o) * oh * ow + pos] = prod[(s * oh * ow + pos) * out_channels + o] + bias[o];
            }
        }
    }
    Ok(Batch {
        n: x.n,
        shape: Shape::Image(out_channels, oh, ow),
        data,
    })
}

fn dense(engine: &Engine, x: &Batch, outputs: usize, weights: &[f32], bias: &[f32]) -> Result<Batch, ExperimentError> {
    let inputs = x.shape.len();
    let mut wt = vec![0f32; inputs * outputs];
    for o in 0..outputs {
        for i in 0..inputs {
            wt[i * outputs + o] = weights[o * inputs + i];
        }
    }
    let mut data = matmul(engine, &x.data, &wt, x.n, inputs, outputs)?;
    for row in data.chunks_exact_mut(outputs) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(Batch {
        n: x.n,
        shape: Shape::Flat(outputs),
        data,
    })
}

fn max_pool(x: &Batch, size: usize, stride: usize) -> Batch {
    let Shape::Image(c, h, w) = x.shape else {
        unreachable!("validated at load time")
    };
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut data = Vec::with_capacity(x.n * c * oh * ow);
    for plane in x.data.chunks_exact(h * w) {
        for y in 0..oh {
            for z in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(plane[(y * stride + dy) * w + z * stride + dx]);
                    }
                }
                data.push(m);
            }
        }
    }
    Batch {
        n: x.n,
        shape: Shape::Image(c, oh, ow),
        data,
    }
}

fn softmax(x: &mut Batch) {
    let n = x.shape.len();
    for row in x.data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Class scores for every sample, row-major `(samples, classes)`.
pub fn infer(model: &Model, data: &Dataset, engine: &Engine) -> Result<(Vec<f32>, usize), ExperimentError> {
    let (c, h, w) = model.input;
    if c != 1 || h != data.rows || w != data.cols {
        return Err(ExperimentError::Invalid(format!(
            "model expects {c}x{h}x{w} inputs, dataset has 1x{}x{}",
            data.rows, data.cols
        )));
    }
    let mut x = Batch {
        n: data.len(),
        shape: Shape::Image(1, h, w),
        data: data.pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    };
    for layer in &model.layers {
        x = match layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                pad,
                weights,
                bias,
                ..
            } => conv2d(engine, &x, (*out_channels, *kernel, *stride, *pad), weights, bias)?,
            Layer::Dense {
                outputs, weights, bias, ..
            } => dense(engine, &x, *outputs, weights, bias)?,
            Layer::Relu => {
                for v in &mut x.data {
                    *v = v.max(0.0);
                }
                x
            }
            Layer::MaxPool { size, stride } => max_pool(&x, *size, *stride),
            Layer::Flatten => Batch {
                n: x.n,
                shape: Shape::Flat(x.shape.len()),
                data: x.data,
            },
            Layer::Softmax => {
                softmax(&mut x);
                x
            }
        };
    }
    let classes = x.shape.len();
    Ok((x.data, classes))
}

/// Class indices by decreasing score; ties (and NaNs, which rank last) are
/// broken by the lower index.
pub fn ranking(scores: &[f32]) -> Vec<usize> {
    let key = |v: f32| if v.is_nan() { f32::NEG_INFINITY } else { v };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
    idx
}

/// Outcome of running the classifier over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub top1: f64,
    pub top5: f64,
}

pub fn evaluate(model: &Model, data: &Dataset, engine: &Engine) -> Result<Evaluation, ExperimentError> {
    let (scores, classes) = infer(model, data, engine)?;
    let mut predictions = Vec::with_capacity(data.len());
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, &label) in scores.chunks_exact(classes).zip(&data.labels) {
        let rank = ranking(row);
        predictions.push(rank[0]);
        hit1 += (rank[0] == label as usize) as usize;
        hit5 += rank.iter().take(5).any(|&c| c == label as usize) as usize;
    }
    let pct = |h: usize| 100.0 * h as f64 / data.len().max(1) as f64;
    Ok(Evaluation {
        predictions,
        top1: pct(hit1),
        top5: pct(hit5),
    })
}

/// Which accumulator parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lsb,
    Msb,
    Ovf,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lsb => "lsb",
            SweepAxis::Msb => "msb",
            SweepAxis::Ovf => "ovf",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lsb" => Ok(SweepAxis::Lsb),
            "msb" => Ok(SweepAxis::Msb),
            "ovf" => Ok(SweepAxis::Ovf),
            other => Err(ExperimentError::Invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

/// `base` with `axis` replaced by each value in turn.
pub fn sweep_enumerate(axis: SweepAxis, base: AccumulatorSpec, values: &[i32]) -> Result<Vec<AccumulatorSpec>, ExperimentError> {
    values
        .iter()
        .map(|&v| {
            let (ovf, msb, lsb) = (base.ovf(), base.msb(), base.lsb());
            let spec = match axis {
                SweepAxis::Lsb => AccumulatorSpec::new(ovf, msb, v),
                SweepAxis::Msb => AccumulatorSpec::new(ovf, v, lsb),
                SweepAxis::Ovf => {
                    let ovf = u32::try_from(v)
                        .map_err(|_| ExperimentError::Invalid(format!("ovf must be non-negative, got {v}")))?;
                    AccumulatorSpec::new(ovf, msb, lsb)
                }
            };
            Ok(spec?)
        })
        .collect()
}

/// Parses `axis=v1,v2,...`.
pub fn parse_sweep(text: &str) -> Result<(SweepAxis, Vec<i32>), ExperimentError> {
    let (axis, values) = text
        .split_once('=')
        .ok_or_else(|| ExperimentError::Invalid(format!("sweep `{text}` is not <axis>=<v1>,<v2>,...")))?;
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| ExperimentError::Invalid(format!("sweep value `{v}` is not an integer")))
        })
        .collect::<Result<Vec<i32>, _>>()?;
    Ok((axis.parse()?, values))
}

/// Expands an accumulator pattern such as `9:6:*` (the `*` marks the swept
/// axis) over the sweep values.
pub fn expand_pattern(pattern: &str, axis: SweepAxis, values: &[i32]) -> Result<Vec<AccumulatorSpec>, ExperimentError> {
    let body = pattern.trim().strip_prefix("acc:").unwrap_or(pattern.trim());
    let parts: Vec<&str> = body.split(':').collect();
    if parts.len() != 3 {
        return Err(ExperimentError::Invalid(format!("accumulator pattern `{pattern}` is not <ovf>:<msb>:<lsb>")));
    }
    let slot = match axis {
        SweepAxis::Ovf => 0,
        SweepAxis::Msb => 1,
        SweepAxis::Lsb => 2,
    };
    let first = *values
        .first()
        .ok_or_else(|| ExperimentError::Invalid("empty sweep".into()))?;
    let fixed: Vec<String> = parts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == slot {
                if *p != "*" && p.parse::<i32>().is_err() {
                    return Err(ExperimentError::Invalid(format!("bad pattern field `{p}`")));
                }
                Ok(first.to_string())
            } else if *p == "*" {
                Err(ExperimentError::Invalid(format!("`*` in pattern `{pattern}` is not the swept axis {axis}")))
            } else {
                Ok(p.to_string())
            }
        })
        .collect::<Result<_, _>>()?;
    let base: AccumulatorSpec = fixed.join(":").parse()?;
    sweep_enumerate(axis, base, values)
}

/// Evaluates the FMA-chain baseline and every sweep point. The first row
/// is the baseline (accumulator fields empty).
pub fn ai_proxy_experiment(
    model: &Model,
    model_id: &str,
    data: &Dataset,
    dataset_id: &str,
    format: FormatSpec,
    points: &[AccumulatorSpec],
    template: &KernelConfig,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let row = |spec: Option<AccumulatorSpec>, e: &Evaluation| SweepRow {
        model: model_id.to_string(),
        dataset: dataset_id.to_string(),
        format: format.to_string(),
        ovf: spec.map(|s| s.ovf()),
        msb: spec.map(|s| s.msb()),
        lsb: spec.map(|s| s.lsb()),
        top1: e.top1,
        top5: e.top5,
    };
    let mut rows = vec![row(None, &evaluate(model, data, &Engine::FmaReference(format))?)];
    for &spec in points {
        let cfg = KernelConfig {
            dot_cfg: DotProductConfig::uniform(format, spec),
            ..*template
        };
        rows.push(row(Some(spec), &evaluate(model, data, &Engine::Tailored(cfg))?));
    }
    Ok(rows)
}
