//! Small convolutional network engine in double precision.
//!
//! Supported layers: 2-D convolution, ReLU, max pooling, inverted dropout,
//! dense and a final softmax. Training minimises mean cross-entropy with
//! mini-batch SGD plus momentum. All parameters live in one flat vector in
//! layer order (weights, then biases), which is also the order written to
//! model files.

use std::fmt;
use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Magic line opening every model file.
pub const MODEL_MAGIC: &str = "RTNN1";

/// Lower clamp on the label probability inside the log.
pub const MIN_PROBABILITY: f64 = 1e-12;

// Samples per gradient work unit. Partial sums are reduced in unit order, so
// results do not depend on the number of threads.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Dense array with a channel-major `(c, h, w)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != shape.len() {
            return Err(NnError::Shape(format!(
                "{} values for shape {shape}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Shape("tensor contains non-finite values".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv2D {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        same: bool,
    },
    ReLU,
    MaxPool {
        size: usize,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn conv(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            same: false,
        }
    }

    pub fn conv_same(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            same: true,
        }
    }

    fn to_line(self) -> String {
        match self {
            LayerSpec::Conv2D {
                filters,
                kernel_h,
                kernel_w,
                stride,
                same,
            } => format!(
                "conv2d {filters} {kernel_h} {kernel_w} {stride} {}",
                if same { "same" } else { "valid" }
            ),
            LayerSpec::ReLU => "relu".into(),
            LayerSpec::MaxPool { size } => format!("maxpool {size}"),
            LayerSpec::Dropout { rate } => format!("dropout {rate}"),
            LayerSpec::Dense { units } => format!("dense {units}"),
            LayerSpec::Softmax => "softmax".into(),
        }
    }

    fn parse_line(line: &str) -> Result<Self, NnError> {
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = || NnError::Format(format!("bad layer line {line:?}"));
        let num = |i: usize| -> Result<usize, NnError> { toks.get(i).and_then(|t| t.parse().ok()).ok_or_else(bad) };
        Ok(match toks.first().copied() {
            Some("conv2d") => LayerSpec::Conv2D {
                filters: num(1)?,
                kernel_h: num(2)?,
                kernel_w: num(3)?,
                stride: num(4)?,
                same: match toks.get(5).copied() {
                    Some("same") => true,
                    Some("valid") => false,
                    _ => return Err(bad()),
                },
            },
            Some("relu") => LayerSpec::ReLU,
            Some("maxpool") => LayerSpec::MaxPool { size: num(1)? },
            Some("dropout") => LayerSpec::Dropout {
                rate: toks.get(1).and_then(|t| t.parse().ok()).ok_or_else(bad)?,
            },
            Some("dense") => LayerSpec::Dense { units: num(1)? },
            Some("softmax") => LayerSpec::Softmax,
            _ => return Err(bad()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
}

impl NetworkSpec {
    /// Default street-image classifier: three conv/ReLU/pool blocks (16, 32,
    /// 64 filters of 3x3), dropout, a 128-unit hidden layer and softmax.
    pub fn image_default(input: Shape, classes: usize, dropout: f64) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::conv(16, 3),
                LayerSpec::ReLU,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(32, 3),
                LayerSpec::ReLU,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::conv(64, 3),
                LayerSpec::ReLU,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Dense { units: 128 },
                LayerSpec::ReLU,
                LayerSpec::Dense { units: classes },
                LayerSpec::Softmax,
            ],
            classes,
        }
    }

    /// Default pixel classifier over a `1 x T x F` temporal-spectral stack.
    pub fn pixel_default(times: usize, features: usize, classes: usize, dropout: f64) -> Self {
        Self {
            input: Shape::new(1, times, features),
            layers: vec![
                LayerSpec::conv_same(16, 3),
                LayerSpec::ReLU,
                LayerSpec::conv_same(16, 3),
                LayerSpec::ReLU,
                LayerSpec::Dropout { rate: dropout },
                LayerSpec::Dense { units: 64 },
                LayerSpec::ReLU,
                LayerSpec::Dense { units: classes },
                LayerSpec::Softmax,
            ],
            classes,
        }
    }

    /// Same architecture with every dropout layer set to `rate`.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        for l in &mut self.layers {
            if let LayerSpec::Dropout { rate: r } = l {
                *r = rate;
            }
        }
        self
    }

    fn plan(&self) -> Result<Vec<LayerPlan>, NnError> {
        let invalid = |m: String| Err(NnError::InvalidSpec(m));
        if self.input.is_empty() {
            return invalid(format!("empty input shape {}", self.input));
        }
        if self.classes < 1 {
            return invalid("class count must be >= 1".into());
        }
        match self.layers.last() {
            Some(LayerSpec::Softmax) => {}
            _ => return invalid("final layer must be Softmax".into()),
        }
        let mut plans = Vec::with_capacity(self.layers.len());
        let mut shape = self.input;
        let mut offset = 0usize;
        for (i, &spec) in self.layers.iter().enumerate() {
            let mut plan = LayerPlan {
                spec,
                input: shape,
                output: shape,
                offset,
                n_weights: 0,
                n_bias: 0,
                pad_top: 0,
                pad_left: 0,
                padded: shape,
            };
            match spec {
                LayerSpec::Conv2D {
                    filters,
                    kernel_h,
                    kernel_w,
                    stride,
                    same,
                } => {
                    if filters == 0 || kernel_h == 0 || kernel_w == 0 || stride == 0 {
                        return invalid(format!("layer {i}: conv sizes must be >= 1"));
                    }
                    let (oh, ow, pt, pb, pl, pr) = if same {
                        let oh = shape.h.div_ceil(stride);
                        let ow = shape.w.div_ceil(stride);
                        let th = ((oh - 1) * stride + kernel_h).saturating_sub(shape.h);
                        let tw = ((ow - 1) * stride + kernel_w).saturating_sub(shape.w);
                        (oh, ow, th / 2, th - th / 2, tw / 2, tw - tw / 2)
                    } else {
                        if kernel_h > shape.h || kernel_w > shape.w {
                            return Err(NnError::Shape(format!(
                                "layer {i}: {kernel_h}x{kernel_w} kernel larger than {shape} input without padding"
                            )));
                        }
                        ((shape.h - kernel_h) / stride + 1, (shape.w - kernel_w) / stride + 1, 0, 0, 0, 0)
                    };
                    plan.output = Shape::new(filters, oh, ow);
                    plan.pad_top = pt;
                    plan.pad_left = pl;
                    plan.padded = Shape::new(shape.c, shape.h + pt + pb, shape.w + pl + pr);
                    plan.n_weights = filters * shape.c * kernel_h * kernel_w;
                    plan.n_bias = filters;
                }
                LayerSpec::ReLU => {}
                LayerSpec::MaxPool { size } => {
                    if size == 0 || size > shape.h || size > shape.w {
                        return Err(NnError::Shape(format!("layer {i}: pool size {size} does not fit {shape}")));
                    }
                    plan.output = Shape::new(shape.c, shape.h / size, shape.w / size);
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return invalid(format!("layer {i}: dropout rate {rate} outside [0, 1)"));
                    }
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return invalid(format!("layer {i}: dense units must be >= 1"));
                    }
                    plan.output = Shape::flat(units);
                    plan.n_weights = units * shape.len();
                    plan.n_bias = units;
                }
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return invalid("Softmax is only allowed as the final layer".into());
                    }
                    if shape.len() != self.classes {
                        return Err(NnError::Shape(format!(
                            "softmax over {} values but {} classes",
                            shape.len(),
                            self.classes
                        )));
                    }
                    plan.output = Shape::flat(shape.len());
                }
            }
            offset += plan.n_weights + plan.n_bias;
            shape = plan.output;
            plans.push(plan);
        }
        Ok(plans)
    }

    fn to_text(&self, n_params: usize) -> String {
        let mut s = format!(
            "{MODEL_MAGIC}\ninput {} {} {}\nclasses {}\n",
            self.input.c, self.input.h, self.input.w, self.classes
        );
        for l in &self.layers {
            s.push_str("layer ");
            s.push_str(&l.to_line());
            s.push('\n');
        }
        s.push_str(&format!("params {n_params}\nend\n"));
        s
    }
}

#[derive(Debug, Clone)]
struct LayerPlan {
    spec: LayerSpec,
    input: Shape,
    output: Shape,
    offset: usize,
    n_weights: usize,
    n_bias: usize,
    pad_top: usize,
    pad_left: usize,
    padded: Shape,
}

/// Whether dropout is active. Training passes carry the seed for the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Infer,
    Train { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    plans: Vec<LayerPlan>,
    params: Vec<f64>,
}

impl PartialEq for LayerPlan {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.offset == other.offset
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Padded(Vec<f64>),
    Argmax(Vec<usize>),
    Mask(Vec<f64>),
}

struct Trace {
    // acts[i] is the input of layer i; the last entry is the network output.
    acts: Vec<Vec<f64>>,
    aux: Vec<Aux>,
}

impl Network {
    /// Weights drawn uniformly from `+/- sqrt(6 / fan_in)`; biases start at 0.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        let plans = spec.plan()?;
        let total = plans.last().map_or(0, |p| p.offset + p.n_weights + p.n_bias);
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &plans {
            if p.n_weights == 0 {
                continue;
            }
            let fan_in = p.n_weights / p.n_bias;
            let limit = (6.0 / fan_in as f64).sqrt();
            for w in &mut params[p.offset..p.offset + p.n_weights] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(Self { spec, plans, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Index into the layer list and parameter range of every layer that
    /// has parameters.
    pub fn layer_params(&self) -> Vec<(usize, Range<usize>)> {
        self.plans
            .iter()
            .enumerate()
            .filter(|(_, p)| p.n_weights + p.n_bias > 0)
            .map(|(i, p)| (i, p.offset..p.offset + p.n_weights + p.n_bias))
            .collect()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        Ok(self.trace(&x.values, mode).acts.pop().unwrap())
    }

    /// Arg-max class and its probability in inference mode. Ties go to the
    /// lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64), NnError> {
        Ok(argmax(&self.forward(x, Mode::Infer)?))
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NnError> {
        if x.shape != self.spec.input {
            return Err(NnError::Shape(format!(
                "input is {} but the network expects {}",
                x.shape, self.spec.input
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<(), NnError> {
        if label >= self.spec.classes {
            return Err(NnError::Label {
                label,
                classes: self.spec.classes,
            });
        }
        Ok(())
    }

    fn trace(&self, input: &[f64], mode: Mode) -> Trace {
        let mut acts = Vec::with_capacity(self.plans.len() + 1);
        let mut aux = Vec::with_capacity(self.plans.len());
        acts.push(input.to_vec());
        let mut rng = match mode {
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Mode::Infer => None,
        };
        for p in &self.plans {
            let x = acts.last().unwrap();
            let (y, a) = match p.spec {
                LayerSpec::Conv2D { .. } => self.conv_forward(p, x),
                LayerSpec::ReLU => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
                LayerSpec::MaxPool { size } => maxpool_forward(p, size, x),
                LayerSpec::Dropout { rate } => match rng.as_mut() {
                    Some(rng) if rate > 0.0 => {
                        let keep = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                            .collect();
                        (x.iter().zip(&mask).map(|(v, m)| v * m).collect(), Aux::Mask(mask))
                    }
                    _ => (x.clone(), Aux::None),
                },
                LayerSpec::Dense { .. } => (self.dense_forward(p, x), Aux::None),
                LayerSpec::Softmax => (softmax(x), Aux::None),
            };
            acts.push(y);
            aux.push(a);
        }
        Trace { acts, aux }
    }

    fn conv_forward(&self, p: &LayerPlan, x: &[f64]) -> (Vec<f64>, Aux) {
        let LayerSpec::Conv2D {
            kernel_h: kh,
            kernel_w: kw,
            stride: s,
            ..
        } = p.spec
        else {
            unreachable!()
        };
        let padded = pad(p, x);
        let pin: &[f64] = padded.as_deref().unwrap_or(x);
        let (ic_n, ph, pw) = (p.padded.c, p.padded.h, p.padded.w);
        let (oc_n, oh, ow) = (p.output.c, p.output.h, p.output.w);
        let w = &self.params[p.offset..p.offset + p.n_weights];
        let b = &self.params[p.offset + p.n_weights..p.offset + p.n_weights + p.n_bias];
        let mut out = vec![0.0; p.output.len()];
        for oc in 0..oc_n {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.fill(b[oc]);
            for ic in 0..ic_n {
                let src = &pin[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[((oc * ic_n + ic) * kh + ky) * kw + kx];
                        for oy in 0..oh {
                            let row = &src[(oy * s + ky) * pw + kx..];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (d, v) in dst.iter_mut().zip(&row[..ow]) {
                                    *d += wv * v;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * row[ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, padded.map_or(Aux::None, Aux::Padded))
    }

    fn dense_forward(&self, p: &LayerPlan, x: &[f64]) -> Vec<f64> {
        let n_in = p.input.len();
        let w = &self.params[p.offset..p.offset + p.n_weights];
        let b = &self.params[p.offset + p.n_weights..p.offset + p.n_weights + p.n_bias];
        w.chunks_exact(n_in)
            .zip(b)
            .map(|(row, &bias)| bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    /// Adds this sample's parameter gradients into `grads` and returns its
    /// loss. The trace must end in softmax probabilities.
    fn backward(&self, trace: &Trace, label: usize, grads: &mut [f64]) -> f64 {
        let probs = trace.acts.last().unwrap();
        let loss = -probs[label].max(MIN_PROBABILITY).ln();
        // Softmax and cross-entropy combined: dL/dz = p - onehot.
        let mut g: Vec<f64> = probs.clone();
        g[label] -= 1.0;
        for (i, p) in self.plans.iter().enumerate().rev() {
            let x = &trace.acts[i];
            g = match p.spec {
                LayerSpec::Softmax => g,
                LayerSpec::ReLU => g.iter().zip(x).map(|(&d, &v)| if v > 0.0 { d } else { 0.0 }).collect(),
                LayerSpec::Dropout { .. } => match &trace.aux[i] {
                    Aux::Mask(m) => g.iter().zip(m).map(|(d, m)| d * m).collect(),
                    _ => g,
                },
                LayerSpec::MaxPool { .. } => {
                    let Aux::Argmax(arg) = &trace.aux[i] else { unreachable!() };
                    let mut dx = vec![0.0; p.input.len()];
                    for (&src, &d) in arg.iter().zip(&g) {
                        dx[src] += d;
                    }
                    dx
                }
                LayerSpec::Dense { .. } => self.dense_backward(p, x, &g, grads),
                LayerSpec::Conv2D { .. } => {
                    let pin: &[f64] = match &trace.aux[i] {
                        Aux::Padded(v) => v,
                        _ => x,
                    };
                    self.conv_backward(p, pin, &g, grads, i > 0)
                }
            };
        }
        loss
    }

    fn dense_backward(&self, p: &LayerPlan, x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let n_in = p.input.len();
        let w = &self.params[p.offset..p.offset + p.n_weights];
        let (gw, gb) = grads[p.offset..p.offset + p.n_weights + p.n_bias].split_at_mut(p.n_weights);
        let mut dx = vec![0.0; n_in];
        for (u, &d) in dy.iter().enumerate() {
            gb[u] += d;
            if d == 0.0 {
                continue;
            }
            let row = &w[u * n_in..(u + 1) * n_in];
            let grow = &mut gw[u * n_in..(u + 1) * n_in];
            for ((gw, dx), (&wv, &xv)) in grow.iter_mut().zip(dx.iter_mut()).zip(row.iter().zip(x)) {
                *gw += d * xv;
                *dx += d * wv;
            }
        }
        dx
    }

    fn conv_backward(&self, p: &LayerPlan, pin: &[f64], dy: &[f64], grads: &mut [f64], need_dx: bool) -> Vec<f64> {
        let LayerSpec::Conv2D {
            kernel_h: kh,
            kernel_w: kw,
            stride: s,
            ..
        } = p.spec
        else {
            unreachable!()
        };
        let (ic_n, ph, pw) = (p.padded.c, p.padded.h, p.padded.w);
        let (oc_n, oh, ow) = (p.output.c, p.output.h, p.output.w);
        let w = &self.params[p.offset..p.offset + p.n_weights];
        let (gw, gb) = grads[p.offset..p.offset + p.n_weights + p.n_bias].split_at_mut(p.n_weights);
        let mut dpin = if need_dx { vec![0.0; p.padded.len()] } else { Vec::new() };
        for oc in 0..oc_n {
            let dplane = &dy[oc * oh * ow..(oc + 1) * oh * ow];
            gb[oc] += dplane.iter().sum::<f64>();
            for ic in 0..ic_n {
                let src = &pin[ic * ph * pw..(ic + 1) * ph * pw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wi = ((oc * ic_n + ic) * kh + ky) * kw + kx;
                        let wv = w[wi];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let base = (oy * s + ky) * pw + kx;
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let row = &src[base..base + ow];
                                acc += drow.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                                if need_dx {
                                    let dst = &mut dpin[ic * ph * pw + base..ic * ph * pw + base + ow];
                                    for (dd, &d) in dst.iter_mut().zip(drow) {
                                        *dd += wv * d;
                                    }
                                }
                            } else {
                                for (ox, &d) in drow.iter().enumerate() {
                                    acc += d * src[base + ox * s];
                                    if need_dx {
                                        dpin[ic * ph * pw + base + ox * s] += wv * d;
                                    }
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
        if !need_dx {
            return Vec::new();
        }
        if p.padded == p.input {
            return dpin;
        }
        let mut dx = vec![0.0; p.input.len()];
        for c in 0..p.input.c {
            for y in 0..p.input.h {
                let src = (c * ph + y + p.pad_top) * pw + p.pad_left;
                let dst = (c * p.input.h + y) * p.input.w;
                dx[dst..dst + p.input.w].copy_from_slice(&dpin[src..src + p.input.w]);
            }
        }
        dx
    }

    /// Mean cross-entropy over `batch` and its gradient for every parameter.
    pub fn loss_and_gradients(&self, batch: &[(&Tensor, usize)], mode: Mode) -> Result<(f64, Vec<f64>), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyDataset("batch"));
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (k, (x, label)) in batch.iter().enumerate() {
            self.check_input(x)?;
            self.check_label(*label)?;
            let mode = match mode {
                Mode::Train { seed } => Mode::Train {
                    seed: mix_seed(seed, k as u64),
                },
                m => m,
            };
            let t = self.trace(&x.values, mode);
            loss += self.backward(&t, *label, &mut grads);
        }
        let n = batch.len() as f64;
        grads.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grads))
    }

    /// Loss of one sample in inference mode plus the activation pattern
    /// (ReLU signs and pooling winners) that produced it.
    fn loss_and_pattern(&self, x: &[f64], label: usize) -> (f64, Vec<u64>) {
        let t = self.trace(x, Mode::Infer);
        let loss = -t.acts.last().unwrap()[label].max(MIN_PROBABILITY).ln();
        let mut pattern = Vec::new();
        for (i, p) in self.plans.iter().enumerate() {
            match (&p.spec, &t.aux[i]) {
                (LayerSpec::ReLU, _) => pattern.extend(t.acts[i].iter().map(|&v| u64::from(v > 0.0))),
                (_, Aux::Argmax(a)) => pattern.extend(a.iter().map(|&v| v as u64)),
                _ => {}
            }
        }
        (loss, pattern)
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = self.spec.to_text(self.params.len()).into_bytes();
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, NnError> {
        let ferr = |m: &str| NnError::Format(m.to_string());
        let end_marker = b"\nend\n";
        let header_end = bytes
            .windows(end_marker.len())
            .position(|w| w == end_marker)
            .ok_or_else(|| ferr("missing end of spec block"))?
            + end_marker.len();
        let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| ferr("spec block is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some(MODEL_MAGIC) {
            return Err(ferr("bad magic"));
        }
        let mut input = None;
        let mut classes = None;
        let mut layers = Vec::new();
        let mut declared = None;
        for line in lines {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "input" => {
                    let v: Vec<usize> = rest.split_whitespace().filter_map(|t| t.parse().ok()).collect();
                    if v.len() != 3 {
                        return Err(ferr("bad input line"));
                    }
                    input = Some(Shape::new(v[0], v[1], v[2]));
                }
                "classes" => classes = Some(rest.trim().parse().map_err(|_| ferr("bad classes line"))?),
                "layer" => layers.push(LayerSpec::parse_line(rest)?),
                "params" => declared = Some(rest.trim().parse::<usize>().map_err(|_| ferr("bad params line"))?),
                "end" => break,
                _ => return Err(NnError::Format(format!("unexpected line {line:?}"))),
            }
        }
        let spec = NetworkSpec {
            input: input.ok_or_else(|| ferr("missing input line"))?,
            layers,
            classes: classes.ok_or_else(|| ferr("missing classes line"))?,
        };
        let declared = declared.ok_or_else(|| ferr("missing params line"))?;
        let mut net = Network::build(spec, 0).map_err(|e| NnError::Format(format!("spec block: {e}")))?;
        if declared != net.params.len() {
            return Err(NnError::Format(format!(
                "file declares {declared} weights but the spec needs {}",
                net.params.len()
            )));
        }
        let payload = &bytes[header_end..];
        if payload.len() != declared * 8 {
            return Err(NnError::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                declared * 8
            )));
        }
        for (p, chunk) in net.params.iter_mut().zip(payload.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(ferr("non-finite weight"));
        }
        Ok(net)
    }
}

fn pad(p: &LayerPlan, x: &[f64]) -> Option<Vec<f64>> {
    if p.padded == p.input {
        return None;
    }
    let (ph, pw) = (p.padded.h, p.padded.w);
    let mut out = vec![0.0; p.padded.len()];
    for c in 0..p.input.c {
        for y in 0..p.input.h {
            let dst = (c * ph + y + p.pad_top) * pw + p.pad_left;
            let src = (c * p.input.h + y) * p.input.w;
            out[dst..dst + p.input.w].copy_from_slice(&x[src..src + p.input.w]);
        }
    }
    Some(out)
}

fn maxpool_forward(p: &LayerPlan, size: usize, x: &[f64]) -> (Vec<f64>, Aux) {
    let (h, w) = (p.input.h, p.input.w);
    let (oh, ow) = (p.output.h, p.output.w);
    let mut out = Vec::with_capacity(p.output.len());
    let mut arg = Vec::with_capacity(p.output.len());
    for c in 0..p.input.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut best_v = f64::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (c * h + oy * size + dy) * w + ox * size + dx;
                        // Strict comparison keeps the first maximum in scan order.
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best);
            }
        }
    }
    (out, Aux::Argmax(arg))
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index and value of the largest entry; the first one wins ties.
pub fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn mix_seed(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            dropout_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss accumulated during the epoch.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_accuracy: f64,
    /// Inference-mode accuracy on the validation set after the epoch.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Mini-batch SGD with momentum over seeded shuffles. Deterministic for a
/// given seed regardless of the rayon pool size.
pub fn train(net: &mut Network, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainHistory, NnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(NnError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(NnError::EmptyDataset("validation"));
    }
    for s in train_set.iter().chain(val_set) {
        net.check_input(&s.input)?;
        net.check_label(s.label)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut velocity = vec![0.0; net.params.len()];
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let parts: Vec<(Vec<f64>, f64, usize)> = batch
                .par_chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(k, chunk)| {
                    let mut g = vec![0.0; net.params.len()];
                    let mut loss = 0.0;
                    let mut hits = 0usize;
                    for (j, &idx) in chunk.iter().enumerate() {
                        let pos = (b * cfg.batch_size + k * GRAD_CHUNK + j) as u64;
                        let seed = mix_seed(mix_seed(cfg.seed, epoch as u64), pos);
                        let s = &train_set[idx];
                        let t = net.trace(&s.input.values, Mode::Train { seed });
                        if argmax(t.acts.last().unwrap()).0 == s.label {
                            hits += 1;
                        }
                        loss += net.backward(&t, s.label, &mut g);
                    }
                    (g, loss, hits)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut grads = vec![0.0; net.params.len()];
            for (g, loss, hits) in parts {
                loss_sum += loss;
                correct += hits;
                for (a, b) in grads.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            if !loss_sum.is_finite() {
                return Err(NnError::Diverged { epoch });
            }
            for ((w, v), g) in net.params.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v = cfg.momentum * *v - cfg.learning_rate * g * scale;
                *w += *v;
            }
        }
        if net.params.iter().any(|w| !w.is_finite()) {
            return Err(NnError::Diverged { epoch });
        }
        let n = train_set.len() as f64;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            val_accuracy: accuracy(net, val_set)?,
        });
    }
    Ok(history)
}

/// Inference-mode predictions for every sample, in order.
pub fn predict_all(net: &Network, inputs: &[&Tensor]) -> Result<Vec<(usize, f64)>, NnError> {
    inputs.par_iter().map(|x| net.predict(x)).collect()
}

pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64, NnError> {
    if samples.is_empty() {
        return Err(NnError::EmptyDataset("evaluation"));
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| net.predict(&s.input).map(|(l, _)| l == s.label))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation moved a ReLU or pooling decision across
    /// a kink, where finite differences are meaningless.
    pub skipped: usize,
}

/// Compares backprop against central differences for every parameter, in
/// inference mode (dropout off).
pub fn gradient_check(net: &Network, input: &Tensor, label: usize, eps: f64) -> Result<GradCheckReport, NnError> {
    let all: Vec<usize> = (0..net.param_count()).collect();
    gradient_check_params(net, input, label, eps, &all)
}

/// [`gradient_check`] restricted to the given parameter indices.
pub fn gradient_check_params(
    net: &Network,
    input: &Tensor,
    label: usize,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport, NnError> {
    if let Some(&i) = indices.iter().find(|&&i| i >= net.param_count()) {
        return Err(NnError::InvalidConfig(format!(
            "parameter {i} out of range for {} parameters",
            net.param_count()
        )));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(NnError::InvalidConfig(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = net.loss_and_gradients(&[(input, label)], Mode::Infer)?;
    let (_, base_pattern) = net.loss_and_pattern(&input.values, label);
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &i in indices {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let (lp, pp) = probe.loss_and_pattern(&input.values, label);
        probe.params[i] = orig - eps;
        let (lm, pm) = probe.loss_and_pattern(&input.values, label);
        probe.params[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            report.skipped += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

pub fn serialize_model(net: &Network, path: impl AsRef<Path>) -> Result<(), NnError> {
    let path = path.as_ref();
    fs::write(path, net.serialize()).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn deserialize_model(path: impl AsRef<Path>) -> Result<Network, NnError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| NnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Network::deserialize(&bytes)
}
