//! Quantized inference through the array and the PE's activation
//! functions, scored against a real-arithmetic run of the same model.
//!
//! Fixed-point path per dense/conv layer: inputs are multiplied by the
//! layer's power-of-two `in_scale` and quantized to the MAC format,
//! weights are quantized per tensor to the LR rail, the product runs on the
//! array, the bias is added in accumulator units, and an integer
//! multiplier-and-shift maps the accumulator to acc * s_w / in_scale / 5.5 in
//! the AF format. Every dense/conv layer is followed by an activation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{parse_shape, shape_string, Container, ContainerError, Tensor};
use crate::cordic::{StagePlan, HR_RANGE, LR_RANGE, MAX_NORM};
use crate::fixedpoint::{quantize, sat_add_sub, AddSub, Fxp, QFormat};
use crate::pe::{softmax_run, AfSelect, CtrlOp, ExecMode, PeConfig, PeError, Precision};
use crate::systolic::{apply_af, im2col, systolic_gemm, weight_matrix, ArrayConfig, ConvShape, Matrix, SystolicError};

pub const MODEL_MAGIC: &str = "FLEXPE-MODEL";
pub const DATA_MAGIC: &str = "FLEXPE-DATA";
/// Calibrated accumulator peak, leaving one unit below the +/-8 rail.
pub const ACC_HEADROOM: f64 = 7.0;
pub const CALIBRATION: &str = "min-max";
/// Magnitude at which AF-format inputs, Q(N, N-3), saturate.
pub const AF_RAIL: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("model line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("shape mismatch between {first} and {second}: {detail}")]
    Shape {
        first: String,
        second: String,
        detail: String,
    },
    #[error("{0}")]
    Unsupported(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error(transparent)]
    Systolic(#[from] SystolicError),
    #[error(transparent)]
    Pe(#[from] PeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "op")]
pub enum LayerKind {
    Dense,
    Conv { stride: usize, pad: usize },
    Act { af: AfSelect },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    /// Tensor prefix for dense/conv (`<name>.w`, `<name>.b`); the AF name otherwise.
    pub name: String,
    /// Power-of-two input multiplier for dense/conv, 1 for activations.
    pub in_scale: f64,
    /// Fraction of the weight rail the layer's largest weight maps to
    /// (a power of two, at most 1).
    pub w_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input: Vec<usize>,
    pub layers: Vec<Layer>,
    pub tensors: BTreeMap<String, Tensor>,
    pub digest: String,
    /// Output shape of each layer.
    pub shapes: Vec<Vec<usize>>,
}

impl ModelSpec {
    pub fn weight(&self, layer: &Layer) -> &Tensor {
        &self.tensors[&format!("{}.w", layer.name)]
    }

    pub fn bias(&self, layer: &Layer) -> &Tensor {
        &self.tensors[&format!("{}.b", layer.name)]
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.iter().product())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = vec![format!("name {}", self.name), format!("input {}", shape_string(&self.input))];
        let mut order = Vec::new();
        for l in &self.layers {
            meta.push(match l.kind {
                LayerKind::Dense => format!("layer dense {} in_scale={} w_gain={}", l.name, l.in_scale, l.w_gain),
                LayerKind::Conv { stride, pad } => {
                    format!(
                        "layer conv {} stride={stride} pad={pad} in_scale={} w_gain={}",
                        l.name, l.in_scale, l.w_gain
                    )
                }
                LayerKind::Act { af } => format!("layer {}", af.name()),
            });
            if !matches!(l.kind, LayerKind::Act { .. }) {
                for suffix in ["w", "b"] {
                    let n = format!("{}.{suffix}", l.name);
                    order.push((n.clone(), &self.tensors[&n]));
                }
            }
        }
        let refs: Vec<(&str, &Tensor)> = order.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        Container::write(MODEL_MAGIC, &meta, &refs)
    }

    /// Builds and validates a model from parts (used by fixture tooling).
    pub fn from_parts(name: &str, input: Vec<usize>, layers: Vec<Layer>, tensors: BTreeMap<String, Tensor>) -> Result<Self, NnError> {
        let mut m = ModelSpec {
            name: name.to_string(),
            input,
            layers,
            tensors,
            digest: String::new(),
            shapes: Vec::new(),
        };
        m.shapes = compose(&m)?;
        Ok(m)
    }
}

fn kv(tok: &str, line: usize) -> Result<(&str, &str), NnError> {
    tok.split_once('=').ok_or(NnError::Parse {
        line,
        msg: format!("expected key=value, got '{tok}'"),
    })
}

pub fn load_model(bytes: &[u8]) -> Result<ModelSpec, NnError> {
    let c = Container::parse(bytes, MODEL_MAGIC)?;
    let mut name = String::new();
    let mut input = None;
    let mut layers = Vec::new();
    for (line, toks) in &c.meta {
        let line = *line;
        let perr = |msg: String| NnError::Parse { line, msg };
        match toks[0].as_str() {
            "name" => name = toks[1..].join(" "),
            "input" => {
                input = Some(
                    toks.get(1)
                        .and_then(|s| parse_shape(s))
                        .ok_or_else(|| perr("input needs a shape like 64 or 1x8x8".into()))?,
                )
            }
            "layer" => {
                let op = toks.get(1).ok_or_else(|| perr("layer needs an op".into()))?;
                let layer = match op.as_str() {
                    "dense" | "conv" => {
                        let lname = toks.get(2).ok_or_else(|| perr(format!("{op} layer needs a name")))?.clone();
                        let (mut stride, mut pad, mut in_scale, mut w_gain) = (1usize, 0usize, 1.0f64, 1.0f64);
                        for t in &toks[3..] {
                            let (k, v) = kv(t, line)?;
                            let bad = || perr(format!("bad {k} '{v}'"));
                            match (op.as_str(), k) {
                                ("conv", "stride") => stride = v.parse().map_err(|_| bad())?,
                                ("conv", "pad") => pad = v.parse().map_err(|_| bad())?,
                                (_, "in_scale") => in_scale = v.parse().map_err(|_| bad())?,
                                (_, "w_gain") => w_gain = v.parse().map_err(|_| bad())?,
                                _ => return Err(perr(format!("unknown {op} field '{k}'"))),
                            }
                        }
                        if !(in_scale.is_finite() && in_scale > 0.0) {
                            return Err(perr(format!("in_scale of {lname} must be positive")));
                        }
                        if !(w_gain > 0.0 && w_gain <= 1.0) {
                            return Err(perr(format!("w_gain of {lname} must be in (0, 1]")));
                        }
                        let kind = if op == "dense" {
                            LayerKind::Dense
                        } else {
                            LayerKind::Conv { stride, pad }
                        };
                        Layer {
                            kind,
                            name: lname,
                            in_scale,
                            w_gain,
                        }
                    }
                    other => {
                        let af: AfSelect = other.parse().map_err(perr)?;
                        if af == AfSelect::Exp {
                            return Err(perr("exp is not a layer activation".into()));
                        }
                        Layer {
                            kind: LayerKind::Act { af },
                            name: af.name().into(),
                            in_scale: 1.0,
            w_gain: 1.0,
                        }
                    }
                };
                layers.push(layer);
            }
            other => return Err(perr(format!("unknown header key '{other}'"))),
        }
    }
    let input = input.ok_or(NnError::Parse {
        line: 0,
        msg: "model has no input line".into(),
    })?;
    let mut m = ModelSpec::from_parts(&name, input, layers, c.tensors)?;
    m.digest = c.digest;
    Ok(m)
}

fn compose(m: &ModelSpec) -> Result<Vec<Vec<usize>>, NnError> {
    let mut cur = m.input.clone();
    let mut prev = "input".to_string();
    let mut shapes = Vec::new();
    let label = |l: &Layer| format!("{} '{}'", match l.kind {
        LayerKind::Dense => "dense",
        LayerKind::Conv { .. } => "conv",
        LayerKind::Act { .. } => "activation",
    }, l.name);
    let mismatch = |first: &str, second: &str, detail: String| NnError::Shape {
        first: first.to_string(),
        second: second.to_string(),
        detail,
    };
    for (i, l) in m.layers.iter().enumerate() {
        let this = label(l);
        let get = |suffix: &str| {
            let n = format!("{}.{suffix}", l.name);
            m.tensors.get(&n).ok_or(NnError::MissingTensor(n))
        };
        match l.kind {
            LayerKind::Dense | LayerKind::Conv { .. } => {
                if !matches!(m.layers.get(i + 1).map(|n| n.kind), Some(LayerKind::Act { .. })) {
                    return Err(NnError::Unsupported(format!("{this} must be followed by an activation")));
                }
            }
            LayerKind::Act { .. } => {}
        }
        cur = match l.kind {
            LayerKind::Dense => {
                let (w, b) = (get("w")?, get("b")?);
                let fan_in: usize = cur.iter().product();
                if w.shape.len() != 2 || w.shape[0] != fan_in {
                    return Err(mismatch(&prev, &this, format!(
                        "{prev} produces {} values, {this} weights are {}",
                        fan_in,
                        shape_string(&w.shape)
                    )));
                }
                if b.shape != [w.shape[1]] {
                    return Err(mismatch(&this, &this, format!("bias {} for {} outputs", shape_string(&b.shape), w.shape[1])));
                }
                vec![w.shape[1]]
            }
            LayerKind::Conv { stride, pad } => {
                let (w, b) = (get("w")?, get("b")?);
                if cur.len() != 3 || w.shape.len() != 4 || w.shape[1] != cur[0] || w.shape[2] != w.shape[3] {
                    return Err(mismatch(&prev, &this, format!(
                        "{prev} produces {}, {this} weights are {}",
                        shape_string(&cur),
                        shape_string(&w.shape)
                    )));
                }
                if b.shape != [w.shape[0]] {
                    return Err(mismatch(&this, &this, format!("bias {} for {} filters", shape_string(&b.shape), w.shape[0])));
                }
                let s = conv_shape(&cur, &w.shape, stride, pad).map_err(|e| mismatch(&prev, &this, e.to_string()))?;
                vec![s.c_out as usize, s.out_h() as usize, s.out_w() as usize]
            }
            LayerKind::Act { .. } => cur,
        };
        shapes.push(cur.clone());
        prev = this;
    }
    Ok(shapes)
}

fn conv_shape(input: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvShape, SystolicError> {
    ConvShape::new(input[1] as u64, input[2] as u64, input[0] as u64, w[0] as u64, w[2] as u64, stride as u64, pad as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub values: Vec<Fxp>,
    pub scale: f64,
}

/// The MAC-format magnitude weights are mapped onto.
pub fn weight_rail(p: Precision) -> f64 {
    LR_RANGE.min(p.mac_format().max_value())
}

/// Symmetric per-tensor quantization: scale = max|t| / rail, entries
/// round-half-even in the MAC format. All-zero tensors get scale 1.
pub fn quantize_tensor(t: &[f64], p: Precision) -> Result<QuantTensor, NnError> {
    quantize_tensor_to(t, p, weight_rail(p))
}

/// [`quantize_tensor`] against an explicit rail.
pub fn quantize_tensor_to(t: &[f64], p: Precision, rail: f64) -> Result<QuantTensor, NnError> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite);
    }
    let f = p.mac_format();
    let max_abs = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / rail };
    Ok(QuantTensor {
        values: t.iter().map(|v| quantize(v / scale, f)).collect(),
        scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input: Vec<usize>,
    pub classes: usize,
    /// Row-major, one sample per row.
    pub x: Vec<f32>,
    pub y: Vec<u32>,
    pub digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n: usize = self.input.iter().product();
        &self.x[i * n..(i + 1) * n]
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let w: usize = self.input.iter().product();
        Dataset {
            x: self.x[..n * w].to_vec(),
            y: self.y[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len();
        let mut shape = vec![n];
        shape.extend(&self.input);
        let x = Tensor::new(shape, self.x.clone());
        let y = Tensor::new(vec![n], self.y.iter().map(|&v| v as f32).collect());
        Container::write(
            DATA_MAGIC,
            &[
                format!("name {}", self.name),
                format!("input {}", shape_string(&self.input)),
                format!("classes {}", self.classes),
            ],
            &[("x", &x), ("y", &y)],
        )
    }
}

pub fn load_dataset(bytes: &[u8]) -> Result<Dataset, NnError> {
    let c = Container::parse(bytes, DATA_MAGIC)?;
    let derr = |m: String| NnError::Dataset(m);
    let (mut name, mut input, mut classes) = (String::new(), None, None);
    for (line, toks) in &c.meta {
        match toks[0].as_str() {
            "name" => name = toks[1..].join(" "),
            "input" => input = toks.get(1).and_then(|s| parse_shape(s)),
            "classes" => classes = toks.get(1).and_then(|s| s.parse::<usize>().ok()),
            other => {
                return Err(NnError::Parse {
                    line: *line,
                    msg: format!("unknown header key '{other}'"),
                })
            }
        }
    }
    let input = input.ok_or_else(|| derr("missing input shape".into()))?;
    let classes = classes.filter(|&c| c > 0).ok_or_else(|| derr("missing class count".into()))?;
    let x = c.tensors.get("x").ok_or(NnError::MissingTensor("x".into()))?;
    let y = c.tensors.get("y").ok_or(NnError::MissingTensor("y".into()))?;
    let n = y.len();
    if x.shape[0] != n || x.shape[1..] != input[..] {
        return Err(derr(format!("x is {}, expected {n}x{}", shape_string(&x.shape), shape_string(&input))));
    }
    let labels = y
        .data
        .iter()
        .map(|&v| (v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes).then_some(v as u32))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| derr(format!("labels must be integers in 0..{classes}")))?;
    Ok(Dataset {
        name,
        input,
        classes,
        x: x.data.clone(),
        y: labels,
        digest: c.digest,
    })
}

/// The scaled activation used by both paths: AF(clamp(z)) for the CORDIC
/// functions, plain ReLU. z is already divided by 5.5.
pub fn af_real(af: AfSelect, z: f64) -> f64 {
    let c = z.clamp(-HR_RANGE, HR_RANGE);
    match af {
        AfSelect::Sigmoid => 1.0 / (1.0 + (-c).exp()),
        AfSelect::Tanh => c.tanh(),
        AfSelect::Exp => c.exp(),
        AfSelect::Relu => z.max(0.0),
        AfSelect::Softmax => unreachable!("vector op"),
    }
}

pub fn softmax_real(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// A dense/conv output as the AF sees it: divided by 5.5, saturated at the
/// AF-format rail.
pub fn pre_activation(p: f64) -> f64 {
    (p / MAX_NORM).clamp(-AF_RAIL, AF_RAIL)
}

/// Real-arithmetic forward pass for one sample. Returns every layer's
/// output; pre-activations follow [`pre_activation`].
pub fn reference_forward(m: &ModelSpec, x: &[f64]) -> Vec<Vec<f64>> {
    let mut cur = x.to_vec();
    let mut dims = m.input.clone();
    let mut outs = Vec::with_capacity(m.layers.len());
    for (l, shape) in m.layers.iter().zip(&m.shapes) {
        cur = match l.kind {
            LayerKind::Dense => {
                let (w, b) = (m.weight(l), m.bias(l));
                let n = w.shape[1];
                (0..n)
                    .map(|j| {
                        let p: f64 = cur.iter().enumerate().map(|(i, a)| a * w.data[i * n + j] as f64).sum();
                        pre_activation(p + b.data[j] as f64)
                    })
                    .collect()
            }
            LayerKind::Conv { stride, pad } => {
                let (w, b) = (m.weight(l), m.bias(l));
                let s = conv_shape(&dims, &w.shape, stride, pad).expect("validated");
                conv_real(&cur, &w.data, &b.data, &s).into_iter().map(pre_activation).collect()
            }
            LayerKind::Act { af: AfSelect::Softmax } => softmax_real(&cur),
            LayerKind::Act { af } => cur.iter().map(|&z| af_real(af, z)).collect(),
        };
        dims = shape.clone();
        outs.push(cur.clone());
    }
    outs
}

fn conv_real(x: &[f64], w: &[f32], b: &[f32], s: &ConvShape) -> Vec<f64> {
    let (h, wd, ci, k) = (s.h as i64, s.w as i64, s.c_in as usize, s.k as usize);
    let mut out = Vec::with_capacity(s.ofmap_elems() as usize);
    for co in 0..s.c_out as usize {
        for oy in 0..s.out_h() as i64 {
            for ox in 0..s.out_w() as i64 {
                let mut p = b[co] as f64;
                for kh in 0..k {
                    for kw in 0..k {
                        let y = oy * s.stride as i64 + kh as i64 - s.pad as i64;
                        let xx = ox * s.stride as i64 + kw as i64 - s.pad as i64;
                        if !((0..h).contains(&y) && (0..wd).contains(&xx)) {
                            continue;
                        }
                        for c in 0..ci {
                            p += x[(c as i64 * h * wd + y * wd + xx) as usize] * w[((co * ci + c) * k + kh) * k + kw] as f64;
                        }
                    }
                }
                out.push(p);
            }
        }
    }
    out
}

/// Min-max calibration of every dense/conv layer's power-of-two input
/// scale: the largest 2^e (e <= 3) keeping every partial sum of the
/// accumulator, bias included, within [`ACC_HEADROOM`] over `inputs`.
/// Weights are taken at `w_gain` times the LR rail, which no precision
/// exceeds.
pub fn calibrate(m: &ModelSpec, inputs: &[Vec<f64>]) -> Vec<f64> {
    let acts: Vec<Vec<Vec<f64>>> = inputs.iter().map(|x| reference_forward(m, x)).collect();
    let mut scales = Vec::with_capacity(m.layers.len());
    let mut dims = m.input.clone();
    for (li, l) in m.layers.iter().enumerate() {
        let peak = match l.kind {
            LayerKind::Act { .. } => None,
            _ => {
                let (w, b) = (m.weight(l), m.bias(l));
                let max_abs = w.data.iter().fold(0.0f64, |a, v| a.max(v.abs() as f64));
                let sw = if max_abs == 0.0 { 1.0 } else { max_abs / (LR_RANGE * l.w_gain) };
                let mut peak = 0.0f64;
                for (si, sample) in acts.iter().enumerate() {
                    let input: &[f64] = if li == 0 { &inputs[si] } else { &sample[li - 1] };
                    let (a, wm, n) = gemm_operands(l, &dims, input, w);
                    for row in &a {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for (k, &v) in row.iter().enumerate() {
                                acc += v * wm[k * n + j] / sw;
                                peak = peak.max(acc.abs());
                            }
                            // gemm column j is the output channel for dense and conv alike
                            peak = peak.max((acc + b.data[j] as f64 / sw).abs());
                        }
                    }
                }
                Some(peak)
            }
        };
        scales.push(match peak {
            Some(p) if p > 0.0 => (ACC_HEADROOM / p).log2().floor().min(3.0).exp2(),
            _ => 1.0,
        });
        dims = m.shapes[li].clone();
    }
    scales
}

/// Rows of A and the row-major k x n weight matrix of one layer, in the
/// array's accumulation order.
fn gemm_operands(l: &Layer, dims: &[usize], input: &[f64], w: &Tensor) -> (Vec<Vec<f64>>, Vec<f64>, usize) {
    match l.kind {
        LayerKind::Dense => (vec![input.to_vec()], w.data.iter().map(|&v| v as f64).collect(), w.shape[1]),
        LayerKind::Conv { stride, pad } => {
            let s = conv_shape(dims, &w.shape, stride, pad).expect("validated");
            let f = QFormat::new(62, 40).expect("wide");
            let xs: Vec<Fxp> = input.iter().map(|&v| quantize(v, f)).collect();
            let wq: Vec<Fxp> = w.data.iter().map(|&v| quantize(v as f64, f)).collect();
            let a = im2col(&xs, &s, f).expect("validated");
            let wm = weight_matrix(&wq, &s, f).expect("validated");
            let rows = (0..a.rows()).map(|r| (0..a.cols()).map(|c| a.get(r, c).to_f64()).collect()).collect();
            (rows, wm.to_f64(), wm.cols())
        }
        LayerKind::Act { .. } => unreachable!(),
    }
}

fn rne_shift(v: i128, s: u32) -> i128 {
    if s == 0 {
        return v;
    }
    let q = v >> s;
    let rem = v - (q << s);
    let half = 1i128 << (s - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

const REQUANT_BITS: u32 = 30;

/// acc * m into `out` with an integer multiplier and a rounding shift.
pub fn requantize(acc: Fxp, m: f64, out: QFormat) -> Fxp {
    let mult = (m * (REQUANT_BITS as f64).exp2()).round() as i128;
    let shift = REQUANT_BITS as i64 + acc.format().frac_bits() as i64 - out.frac_bits() as i64;
    let prod = acc.raw() as i128 * mult;
    let raw = if shift >= 0 {
        rne_shift(prod, shift as u32)
    } else {
        prod << (-shift) as u32
    };
    Fxp::saturating_from_raw(raw, out)
}

/// Runs [`calibrate`] and stores the scales in the model. Each weight
/// tensor's `scale` becomes its real value per unit at the LR rail.
pub fn apply_calibration(m: &mut ModelSpec, inputs: &[Vec<f64>]) {
    let scales = calibrate(m, inputs);
    for (l, s) in m.layers.iter_mut().zip(scales) {
        l.in_scale = s;
        if let Some(w) = m.tensors.get_mut(&format!("{}.w", l.name)) {
            let max_abs = w.data.iter().fold(0.0f64, |a, v| a.max(v.abs() as f64));
            w.scale = Some(if max_abs == 0.0 { 1.0 } else { max_abs / (LR_RANGE * l.w_gain) });
        }
    }
}

pub const GAIN_CANDIDATES: [f64; 4] = [1.0, 0.5, 0.25, 0.125];

/// Per-layer weight/activation split: walks the dense/conv layers in order
/// and keeps the [`GAIN_CANDIDATES`] entry with the lowest mean logit error
/// on `data` at precision `p`, re-running min-max calibration for each
/// trial. Returns the final mean logit error.
pub fn calibrate_gains(m: &mut ModelSpec, data: &Dataset, p: Precision, plan: &StagePlan) -> Result<f64, NnError> {
    let inputs: Vec<Vec<f64>> = (0..data.len()).map(|i| data.sample(i).iter().map(|&v| v as f64).collect()).collect();
    let refs: Vec<Vec<f64>> = inputs.iter().map(|x| reference_logits(m, x)).collect();
    let score = |m: &ModelSpec| -> Result<f64, NnError> {
        let f = run_fixed(m, data, p, plan)?;
        Ok(logit_error(&f.logits, &refs))
    };
    apply_calibration(m, &inputs);
    let mut best = score(m)?;
    for li in 0..m.layers.len() {
        if matches!(m.layers[li].kind, LayerKind::Act { .. }) {
            continue;
        }
        let mut keep = m.layers[li].w_gain;
        for g in GAIN_CANDIDATES {
            if g == keep {
                continue;
            }
            let mut trial = m.clone();
            trial.layers[li].w_gain = g;
            apply_calibration(&mut trial, &inputs);
            let e = score(&trial)?;
            if e < best {
                best = e;
                keep = g;
            }
        }
        m.layers[li].w_gain = keep;
        apply_calibration(m, &inputs);
    }
    Ok(best)
}

/// The reference values the fixed path's logits are compared against.
pub fn reference_logits(m: &ModelSpec, x: &[f64]) -> Vec<f64> {
    let mut r = reference_forward(m, x);
    match m.layers.last().map(|l| l.kind) {
        Some(LayerKind::Act { af: AfSelect::Softmax }) if r.len() >= 2 => r.swap_remove(r.len() - 2),
        _ => r.pop().unwrap_or_default(),
    }
}

fn logit_error(fixed: &[Vec<Fxp>], refs: &[Vec<f64>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (f, r) in fixed.iter().zip(refs) {
        for (a, b) in f.iter().zip(r) {
            sum += (a.to_f64() - b).abs();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub precision: u32,
    pub hyp_stages: u32,
    pub lin_stages: u32,
    pub samples: usize,
    pub top1_fixed: f64,
    pub top1_reference: f64,
    /// (fixed - reference) in percentage points.
    pub delta: f64,
    /// Mean |fixed - reference| over the final layer's inputs, in AF units.
    pub mean_logit_err: f64,
    pub calibration: String,
    pub array_cycles: u64,
    pub model_digest: String,
    pub dataset_digest: String,
}

/// Fixed-point outputs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedRun {
    /// Final layer input per sample (the logits, AF format).
    pub logits: Vec<Vec<Fxp>>,
    pub outputs: Vec<Vec<Fxp>>,
    pub cycles: u64,
}

fn array_for(p: Precision, plan: &StagePlan) -> Result<ArrayConfig, NnError> {
    let pe = PeConfig::new(p, AfSelect::Relu, CtrlOp::Mac, ExecMode::Pipelined, *plan, false)?;
    Ok(ArrayConfig::new(8, 8, pe)?)
}

/// Runs a batch through the array and the PE.
pub fn run_fixed(m: &ModelSpec, data: &Dataset, p: Precision, plan: &StagePlan) -> Result<FixedRun, NnError> {
    if data.input != m.input {
        return Err(NnError::Dataset(format!(
            "samples are {}, model expects {}",
            shape_string(&data.input),
            shape_string(&m.input)
        )));
    }
    let cfg = array_for(p, plan)?;
    for l in &m.layers {
        if let LayerKind::Act { af } = l.kind {
            PeConfig::new(p, af, CtrlOp::Af, ExecMode::Pipelined, *plan, false)
                .map_err(|e| NnError::Unsupported(format!("layer {}: {e}", l.name)))?;
        }
    }
    let mac = p.mac_format();
    let af_fmt = p.af_format();
    let n = data.len();
    let mut acts: Vec<Vec<Fxp>> = (0..n)
        .map(|i| data.sample(i).iter().map(|&v| quantize(v as f64, af_fmt)).collect())
        .collect();
    let mut first_inputs: Option<Vec<Vec<f64>>> = Some((0..n).map(|i| data.sample(i).iter().map(|&v| v as f64).collect()).collect());
    let mut dims = m.input.clone();
    let mut logits = Vec::new();
    let mut cycles = 0;
    for (li, l) in m.layers.iter().enumerate() {
        let real_in = |acts: &Vec<Vec<Fxp>>, first: &Option<Vec<Vec<f64>>>, i: usize| -> Vec<f64> {
            match first {
                Some(x) => x[i].clone(),
                None => acts[i].iter().map(|v| v.to_f64()).collect(),
            }
        };
        acts = match l.kind {
            LayerKind::Dense | LayerKind::Conv { .. } => {
                let (w, b) = (m.weight(l), m.bias(l));
                let wq = quantize_tensor_to(&w.data.iter().map(|&v| v as f64).collect::<Vec<_>>(), p, weight_rail(p) * l.w_gain)?;
                let to_mac = |v: f64| quantize(v * l.in_scale, mac);
                // one accumulator LSB-unit is s_w / in_scale in real terms
                let unit = wq.scale / l.in_scale;
                let bias: Vec<Fxp> = b.data.iter().map(|&v| quantize(v as f64 / unit, mac)).collect();
                let (a, bm, per_sample) = match l.kind {
                    LayerKind::Dense => {
                        let k = w.shape[0];
                        let a = Matrix::from_fn(n, k, mac, |i, j| to_mac(real_in(&acts, &first_inputs, i)[j]))?;
                        let bm = Matrix::from_fn(k, w.shape[1], mac, |i, j| wq.values[i * w.shape[1] + j])?;
                        (a, bm, 1)
                    }
                    LayerKind::Conv { stride, pad } => {
                        let s = conv_shape(&dims, &w.shape, stride, pad).expect("validated");
                        let per = (s.out_h() * s.out_w()) as usize;
                        let mut rows = Vec::with_capacity(n * per);
                        for i in 0..n {
                            let x: Vec<Fxp> = real_in(&acts, &first_inputs, i).into_iter().map(to_mac).collect();
                            let cols = im2col(&x, &s, mac)?;
                            rows.push(cols);
                        }
                        let kdim = rows[0].cols();
                        let a = Matrix::from_fn(n * per, kdim, mac, |r, c| rows[r / per].get(r % per, c))?;
                        (a, weight_matrix(&wq.values, &s, mac)?, per)
                    }
                    LayerKind::Act { .. } => unreachable!(),
                };
                let (c, cyc) = systolic_gemm(&a, &bm, &cfg)?;
                cycles += cyc;
                let out_ch = bm.cols();
                let m_scale = unit / MAX_NORM;
                (0..n)
                    .map(|i| {
                        // conv outputs leave in [c_out][oh][ow] order
                        let mut z = Vec::with_capacity(per_sample * out_ch);
                        for (ch, &bch) in bias.iter().enumerate().take(out_ch) {
                            for r in 0..per_sample {
                                let acc = sat_add_sub(c.get(i * per_sample + r, ch), bch, AddSub::Add).expect("same format");
                                z.push(requantize(acc, m_scale, af_fmt));
                            }
                        }
                        z
                    })
                    .collect()
            }
            LayerKind::Act { af: AfSelect::Softmax } => {
                logits = acts.clone();
                acts.iter().map(|z| softmax_run(z, plan)).collect::<Result<Vec<_>, _>>()?
            }
            LayerKind::Act { af } => {
                let mut c = cfg;
                c.pe.op = CtrlOp::Af;
                acts.iter().map(|z| apply_af(z, af, &c)).collect::<Result<Vec<_>, _>>()?
            }
        };
        first_inputs = None;
        if li + 1 == m.layers.len() && !matches!(l.kind, LayerKind::Act { af: AfSelect::Softmax }) {
            logits = acts.clone();
        }
        dims = m.shapes[li].clone();
    }
    Ok(FixedRun {
        logits,
        outputs: acts,
        cycles,
    })
}

/// Index of the largest output; ties go to the larger logit, then the
/// lower index.
pub fn top1_fixed(outputs: &[Fxp], logits: &[Fxp]) -> usize {
    (0..outputs.len())
        .max_by_key(|&j| (outputs[j].raw(), logits[j].raw(), std::cmp::Reverse(j)))
        .unwrap_or(0)
}

pub fn top1_real(outputs: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in outputs.iter().enumerate() {
        if *v > outputs[best] {
            best = j;
        }
    }
    best
}

pub fn run_inference(m: &ModelSpec, data: &Dataset, p: Precision, plan: &StagePlan) -> Result<AccuracyReport, NnError> {
    if data.is_empty() {
        return Err(NnError::Dataset("no samples".into()));
    }
    let fixed = run_fixed(m, data, p, plan)?;
    let mut hit_fixed = 0usize;
    let mut hit_ref = 0usize;
    let mut refs = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x: Vec<f64> = data.sample(i).iter().map(|&v| v as f64).collect();
        let r = reference_forward(m, &x);
        let label = data.y[i] as usize;
        hit_ref += (top1_real(r.last().expect("non-empty model")) == label) as usize;
        hit_fixed += (top1_fixed(&fixed.outputs[i], &fixed.logits[i]) == label) as usize;
        refs.push(reference_logits(m, &x));
    }
    let n = data.len() as f64;
    let (tf, tr) = (hit_fixed as f64 / n, hit_ref as f64 / n);
    Ok(AccuracyReport {
        precision: p.bits(),
        hyp_stages: plan.hyperbolic_stages,
        lin_stages: plan.linear_stages,
        samples: data.len(),
        top1_fixed: tf,
        top1_reference: tr,
        delta: (tf - tr) * 100.0,
        mean_logit_err: logit_error(&fixed.logits, &refs),
        calibration: CALIBRATION.to_string(),
        array_cycles: fixed.cycles,
        model_digest: m.digest.clone(),
        dataset_digest: data.digest.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, f: impl Fn(usize) -> f32) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(f).collect())
    }

    fn mlp(hidden_in: usize) -> ModelSpec {
        let mut t = BTreeMap::new();
        t.insert("fc1.w".into(), tensor(vec![4, 3], |i| (i as f32 * 0.37).sin()));
        t.insert("fc1.b".into(), tensor(vec![3], |i| i as f32 * 0.1));
        t.insert("fc2.w".into(), tensor(vec![hidden_in, 2], |i| (i as f32 * 0.71).cos()));
        t.insert("fc2.b".into(), tensor(vec![2], |_| 0.0));
        let dense = |n: &str| Layer {
            kind: LayerKind::Dense,
            name: n.into(),
            in_scale: 1.0,
            w_gain: 1.0,
        };
        let act = |af: AfSelect| Layer {
            kind: LayerKind::Act { af },
            name: af.name().into(),
            in_scale: 1.0,
            w_gain: 1.0,
        };
        let layers = vec![dense("fc1"), act(AfSelect::Tanh), dense("fc2"), act(AfSelect::Softmax)];
        let mut m = ModelSpec {
            name: "tiny".into(),
            input: vec![4],
            layers,
            tensors: t,
            digest: String::new(),
            shapes: vec![],
        };
        if let Ok(s) = compose(&m) {
            m.shapes = s;
        }
        m
    }

    #[test]
    fn model_round_trip() {
        let m = mlp(3);
        let bytes = m.to_bytes();
        let back = load_model(&bytes).unwrap();
        assert_eq!(back.layers, m.layers);
        assert_eq!(back.tensors, m.tensors);
        assert_eq!(back.shapes, vec![vec![3], vec![3], vec![2], vec![2]]);
        assert_eq!(back.layers.iter().filter(|l| l.kind == LayerKind::Dense).count(), 2);
    }

    #[test]
    fn mismatched_shapes_name_both_layers() {
        let e = compose(&mlp(5)).unwrap_err();
        let s = e.to_string();
        assert!(s.contains("activation 'tanh'") && s.contains("dense 'fc2'"), "{s}");
    }

    #[test]
    fn missing_tensor() {
        let mut m = mlp(3);
        m.tensors.remove("fc2.b");
        assert_eq!(compose(&m).unwrap_err(), NnError::MissingTensor("fc2.b".into()));
    }

    #[test]
    fn quantize_tensor_examples() {
        let q = quantize_tensor(&[-1.0, 0.5], Precision::FxP8).unwrap();
        assert_eq!(q.values[0].raw(), Precision::FxP8.mac_format().min_raw() + 1);
        let lsb = Precision::FxP8.mac_format().lsb();
        for (v, x) in q.values.iter().zip([-1.0, 0.5]) {
            assert!((v.to_f64() * q.scale - x).abs() <= 0.5 * lsb * q.scale + 1e-12);
        }
        let z = quantize_tensor(&[0.0; 3], Precision::FxP16).unwrap();
        assert_eq!(z.scale, 1.0);
        assert!(z.values.iter().all(|v| v.raw() == 0));
        assert_eq!(quantize_tensor(&[f64::NAN], Precision::FxP8), Err(NnError::NonFinite));
    }

    #[test]
    fn requantize_rounds_half_even() {
        let f = QFormat::new(8, 4).unwrap();
        let out = QFormat::new(8, 5).unwrap();
        // 3/16 * 0.5 = 3/32 exactly
        assert_eq!(requantize(Fxp::from_raw(3, f).unwrap(), 0.5, out).raw(), 3);
        // 3/16 * 0.25 = 1.5/32 -> 2
        assert_eq!(requantize(Fxp::from_raw(3, f).unwrap(), 0.25, out).raw(), 2);
        assert_eq!(requantize(Fxp::from_raw(-3, f).unwrap(), 0.25, out).raw(), -2);
        assert_eq!(requantize(Fxp::from_raw(127, f).unwrap(), 4.0, out).raw(), 127);
    }

    #[test]
    fn single_sample_top1_is_binary() {
        let m = mlp(3);
        let d = Dataset {
            name: "one".into(),
            input: vec![4],
            classes: 2,
            x: vec![0.5, -0.25, 0.75, 0.0],
            y: vec![1],
            digest: String::new(),
        };
        for p in [Precision::FxP8, Precision::FxP16, Precision::FxP32] {
            let r = run_inference(&m, &d, p, &p.default_plan()).unwrap();
            assert!(r.top1_fixed == 0.0 || r.top1_fixed == 1.0);
            assert!(r.top1_reference == 0.0 || r.top1_reference == 1.0);
        }
        let e = run_inference(&m, &d, Precision::FxP4, &Precision::FxP4.default_plan()).unwrap_err();
        assert!(e.to_string().contains("softmax"), "{e}");
    }
}
