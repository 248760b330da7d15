//! From-scratch CNN: tensors, sequential layers with hand-written
//! backward rules, softmax cross-entropy, He initialization.

pub mod kernels;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::canvas::Image;
use crate::error::{Error, Result};
use kernels::Window;

/// Input normalization: `(x / 255 - MEAN) / STD`.
pub const INPUT_MEAN: f32 = 0.5;
pub const INPUT_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid tensor shape {shape:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Pixels to a normalized CHW tensor.
pub fn image_to_input(image: &Image) -> Vec<f32> {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let px = image.pixels();
    let mut out = vec![0.0; w * h * ch];
    for c in 0..ch {
        for i in 0..w * h {
            out[c * w * h + i] = (px[i * ch + c] as f32 / 255.0 - INPUT_MEAN) / INPUT_STD;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Standalone layer operators

fn conv_window(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<(Window, usize)> {
    let [c, h, wd] = x.shape[..] else {
        return Err(Error::shape(format!("conv input must be CxHxW, got {:?}", x.shape)));
    };
    let [o, wc, k, k2] = w.shape[..] else {
        return Err(Error::shape(format!("conv weight must be OxCxKxK, got {:?}", w.shape)));
    };
    let win = Window { channels: c, in_h: h, in_w: wd, k, stride, pad };
    if wc != c || k != k2 || !win.valid() {
        return Err(Error::shape(format!("conv weight {:?} incompatible with input {:?}", w.shape, x.shape)));
    }
    Ok((win, o))
}

/// `y[o,i,j] = b[o] + sum_{c,u,v} w[o,c,u,v] * x_pad[c, i*stride+u, j*stride+v]`
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (win, o) = conv_window(x, w, stride, pad)?;
    if b.shape != [o] {
        return Err(Error::shape("conv bias must have one value per output channel"));
    }
    let mut col = Vec::new();
    kernels::im2col(&x.data, win, &mut col);
    let p = win.out_h() * win.out_w();
    let mut out = vec![0.0; o * p];
    for (row, &bv) in out.chunks_exact_mut(p).zip(&b.data) {
        row.fill(bv);
    }
    kernels::gemm_nn(o, win.channels * win.k * win.k, p, &w.data, &col, &mut out);
    Tensor::new(vec![o, win.out_h(), win.out_w()], out)
}

/// Returns `(grad_in, grad_weight, grad_bias)`.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor, stride: usize, pad: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (win, o) = conv_window(x, w, stride, pad)?;
    if grad_out.shape != [o, win.out_h(), win.out_w()] {
        return Err(Error::shape("conv grad_out does not match output shape"));
    }
    let mut col = Vec::new();
    kernels::im2col(&x.data, win, &mut col);
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; o];
    let mut gx = vec![0.0; x.len()];
    conv_backward_raw(&w.data, &col, &grad_out.data, win, o, &mut gw, &mut gb, Some(&mut gx));
    Ok((
        Tensor::new(x.shape.clone(), gx)?,
        Tensor::new(w.shape.clone(), gw)?,
        Tensor::new(vec![o], gb)?,
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_raw(w: &[f32], col: &[f32], g: &[f32], win: Window, o: usize, gw: &mut [f32], gb: &mut [f32], gx: Option<&mut [f32]>) {
    let p = win.out_h() * win.out_w();
    let ckk = win.channels * win.k * win.k;
    for (acc, row) in gb.iter_mut().zip(g.chunks_exact(p)) {
        *acc += kernels::sum(row);
    }
    kernels::gemm_nt(o, ckk, p, g, col, gw);
    if let Some(gx) = gx {
        let mut wt = vec![0.0; ckk * o];
        for oo in 0..o {
            for kk in 0..ckk {
                wt[kk * o + oo] = w[oo * ckk + kk];
            }
        }
        let mut dcol = vec![0.0; ckk * p];
        kernels::gemm_nn(ckk, o, p, &wt, g, &mut dcol);
        kernels::col2im(&dcol, win, gx);
    }
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Gradient passes where the input was strictly positive.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape != grad_out.shape {
        return Err(Error::shape("relu grad_out does not match input"));
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: relu_grad(&x.data, &grad_out.data),
    })
}

fn relu_grad(x: &[f32], g: &[f32]) -> Vec<f32> {
    x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect()
}

fn pool_window(x: &Tensor, k: usize, stride: usize) -> Result<Window> {
    let [c, h, w] = x.shape[..] else {
        return Err(Error::shape(format!("maxpool input must be CxHxW, got {:?}", x.shape)));
    };
    let win = Window { channels: c, in_h: h, in_w: w, k, stride, pad: 0 };
    if !win.valid() {
        return Err(Error::shape(format!("maxpool {k}/{stride} does not fit {:?}", x.shape)));
    }
    Ok(win)
}

pub fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let win = pool_window(x, k, stride)?;
    let n = win.channels * win.out_h() * win.out_w();
    let mut out = vec![0.0; n];
    let mut idx = vec![0u32; n];
    kernels::maxpool_forward(&x.data, win, &mut out, &mut idx);
    Tensor::new(vec![win.channels, win.out_h(), win.out_w()], out)
}

/// Routes each output gradient to its window's first maximum.
pub fn maxpool_backward(x: &Tensor, grad_out: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let win = pool_window(x, k, stride)?;
    let n = win.channels * win.out_h() * win.out_w();
    if grad_out.len() != n {
        return Err(Error::shape("maxpool grad_out does not match output"));
    }
    let mut out = vec![0.0; n];
    let mut idx = vec![0u32; n];
    kernels::maxpool_forward(&x.data, win, &mut out, &mut idx);
    let mut gx = vec![0.0; x.len()];
    for (&i, &g) in idx.iter().zip(&grad_out.data) {
        gx[i as usize] += g;
    }
    Tensor::new(x.shape.clone(), gx)
}

/// `y = W x + b` with `W` shaped `[out, in]`.
pub fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [out, inp] = w.shape[..] else {
        return Err(Error::shape("fc weight must be 2-D"));
    };
    if x.len() != inp || b.shape != [out] {
        return Err(Error::shape(format!("fc weight {:?} incompatible with input {:?}", w.shape, x.shape)));
    }
    let mut y = vec![0.0; out];
    fc_forward_raw(&x.data, &w.data, &b.data, &mut y);
    Tensor::new(vec![out], y)
}

fn fc_forward_raw(x: &[f32], w: &[f32], b: &[f32], y: &mut [f32]) {
    let inp = x.len();
    for (j, yv) in y.iter_mut().enumerate() {
        *yv = b[j] + kernels::dot(&w[j * inp..][..inp], x);
    }
}

/// Returns `(grad_in, grad_weight, grad_bias)`; the weight gradient is the
/// outer product of `grad_out` and `x`.
pub fn fc_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let [out, inp] = w.shape[..] else {
        return Err(Error::shape("fc weight must be 2-D"));
    };
    if x.len() != inp || grad_out.len() != out {
        return Err(Error::shape("fc shapes disagree"));
    }
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; out];
    let mut gx = vec![0.0; inp];
    fc_backward_raw(&x.data, &w.data, &grad_out.data, &mut gw, &mut gb, Some(&mut gx));
    Ok((
        Tensor::new(x.shape.clone(), gx)?,
        Tensor::new(w.shape.clone(), gw)?,
        Tensor::new(vec![out], gb)?,
    ))
}

fn fc_backward_raw(x: &[f32], w: &[f32], g: &[f32], gw: &mut [f32], gb: &mut [f32], gx: Option<&mut [f32]>) {
    let inp = x.len();
    for (j, &gj) in g.iter().enumerate() {
        gb[j] += gj;
        if gj != 0.0 {
            kernels::axpy(gj, x, &mut gw[j * inp..][..inp]);
        }
    }
    if let Some(gx) = gx {
        for (j, &gj) in g.iter().enumerate() {
            kernels::axpy(gj, &w[j * inp..][..inp], gx);
        }
    }
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient.
pub fn softmax_xent(logits: &[f32], target: usize) -> Result<(f32, Vec<f32>)> {
    if target >= logits.len() {
        return Err(Error::invalid(format!("target {target} outside {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() - (logits[target] - max) as f64;
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, &e)| (e / total - if i == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    Ok((loss as f32, grad))
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Sequential network

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d { out_ch: usize, k: usize, stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    Flatten,
    Fc { out_dim: usize },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Fc { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Layer {
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Weight tensor shape (`[O, C, k, k]` or `[out, in]`); empty if none.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.spec {
            LayerSpec::Conv2d { out_ch, k, .. } => vec![out_ch, self.in_shape[0], k, k],
            LayerSpec::Fc { out_dim } => vec![out_dim, self.in_shape.iter().product()],
            _ => Vec::new(),
        }
    }

    fn window(&self) -> Window {
        let (k, stride, pad) = match self.spec {
            LayerSpec::Conv2d { k, stride, pad, .. } => (k, stride, pad),
            LayerSpec::MaxPool { k, stride } => (k, stride, 0),
            _ => unreachable!("window of a non-spatial layer"),
        };
        Window {
            channels: self.in_shape[0],
            in_h: self.in_shape[1],
            in_w: self.in_shape[2],
            k,
            stride,
            pad,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    class_count: usize,
}

/// Activations kept by a training forward pass.
pub struct ForwardCache {
    /// `acts[i]` is the input of layer `i`; the last entry is the logits.
    acts: Vec<Vec<f32>>,
    cols: Vec<Vec<f32>>,
    argmax: Vec<Vec<u32>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f32] {
        self.acts.last().expect("non-empty cache")
    }
}

/// Per-layer parameter gradients, shaped like the network's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weight: Vec<Vec<f32>>,
    pub bias: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            weight: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weight.iter_mut().chain(self.bias.iter_mut()).zip(other.weight.iter().chain(other.bias.iter())) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()).flatten() {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).flatten().all(|v| v.is_finite())
    }
}

impl Network {
    /// Validate the layer stack against `input_shape` (C, H, W). Parameters
    /// start at zero.
    pub fn new(input_shape: [usize; 3], specs: &[LayerSpec], class_count: usize) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(Error::shape("input shape must be positive"));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, &spec) in specs.iter().enumerate() {
            let spatial = |s: &[usize]| -> Result<()> {
                if s.len() == 3 {
                    Ok(())
                } else {
                    Err(Error::shape(format!("layer {i} ({spec:?}) needs a CxHxW input, got {s:?}")))
                }
            };
            let (out, wlen, blen) = match spec {
                LayerSpec::Conv2d { out_ch, k, stride, pad } => {
                    spatial(&shape)?;
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k, stride, pad };
                    if out_ch == 0 || !win.valid() {
                        return Err(Error::shape(format!("layer {i}: conv k={k} stride={stride} pad={pad} collapses {shape:?}")));
                    }
                    (vec![out_ch, win.out_h(), win.out_w()], out_ch * shape[0] * k * k, out_ch)
                }
                LayerSpec::MaxPool { k, stride } => {
                    spatial(&shape)?;
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k, stride, pad: 0 };
                    if !win.valid() {
                        return Err(Error::shape(format!("layer {i}: maxpool {k}/{stride} collapses {shape:?}")));
                    }
                    (vec![shape[0], win.out_h(), win.out_w()], 0, 0)
                }
                LayerSpec::Relu => (shape.clone(), 0, 0),
                LayerSpec::Flatten => (vec![shape.iter().product()], 0, 0),
                LayerSpec::Fc { out_dim } => {
                    if shape.len() != 1 {
                        return Err(Error::shape(format!("layer {i}: fc needs a flattened input, got {shape:?}")));
                    }
                    if out_dim == 0 {
                        return Err(Error::shape(format!("layer {i}: fc with zero outputs")));
                    }
                    (vec![out_dim], out_dim * shape[0], out_dim)
                }
            };
            layers.push(Layer {
                spec,
                in_shape: shape.clone(),
                out_shape: out.clone(),
                weight: vec![0.0; wlen],
                bias: vec![0.0; blen],
            });
            shape = out;
        }
        if shape != [class_count] {
            return Err(Error::shape(format!("network ends in {shape:?}, expected [{class_count}]")));
        }
        Ok(Network { input_shape, layers, class_count })
    }

    /// conv3x3(16)/relu/pool2, conv3x3(32)/relu/pool2, conv3x3(64)/relu/pool2,
    /// flatten, fc(128)/relu, fc(classes).
    pub fn supernet_s_specs(class_count: usize) -> Vec<LayerSpec> {
        let conv = |out_ch| LayerSpec::Conv2d { out_ch, k: 3, stride: 1, pad: 1 };
        let pool = LayerSpec::MaxPool { k: 2, stride: 2 };
        vec![
            conv(16),
            LayerSpec::Relu,
            pool,
            conv(32),
            LayerSpec::Relu,
            pool,
            conv(64),
            LayerSpec::Relu,
            pool,
            LayerSpec::Flatten,
            LayerSpec::Fc { out_dim: 128 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_dim: class_count },
        ]
    }

    pub fn supernet_s(input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Self> {
        let mut net = Self::new(input_shape, &Self::supernet_s_specs(class_count), class_count)?;
        net.init_he(seed);
        Ok(net)
    }

    pub fn by_arch(arch: &str, input_shape: [usize; 3], class_count: usize, seed: u64) -> Result<Self> {
        match arch {
            "supernet-s" => Self::supernet_s(input_shape, class_count, seed),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }

    /// Weights ~ N(0, 2 / fan_in), biases zero.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            let fan_in = match layer.spec {
                LayerSpec::Conv2d { k, .. } => layer.in_shape[0] * k * k,
                LayerSpec::Fc { .. } => layer.in_shape[0],
                _ => continue,
            };
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for w in &mut layer.weight {
                *w = normal.sample(&mut rng) as f32;
            }
            layer.bias.fill(0.0);
        }
    }

    /// Zero the weights of the final layer. Under He init with
    /// non-centred inputs the initial logits are large enough to push most
    /// hidden units of the head into the dead ReLU region within a few
    /// updates; starting from zero logits avoids that.
    pub fn zero_classifier(&mut self) {
        if let Some(last) = self.layers.iter_mut().rev().find(|l| matches!(l.spec, LayerSpec::Fc { .. })) {
            last.weight.fill(0.0);
            last.bias.fill(0.0);
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Index of the flatten layer separating the spatial stack from the head.
    pub fn flatten_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.spec == LayerSpec::Flatten)
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        let n: usize = self.input_shape.iter().product();
        if x.len() != n {
            return Err(Error::shape(format!("input has {} values, network expects {n}", x.len())));
        }
        Ok(())
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let [c, h, w] = self.input_shape;
        if image.channels() != c || image.height() != h || image.width() != w {
            return Err(Error::shape(format!(
                "image is {}x{}x{}, network expects {w}x{h}x{c}",
                image.width(),
                image.height(),
                image.channels()
            )));
        }
        Ok(())
    }

    /// Logits for a canvas image.
    pub fn forward(&self, image: &Image) -> Result<Tensor> {
        self.check_image(image)?;
        let out = self.forward_range(image_to_input(image), 0, self.layers.len())?;
        Tensor::new(vec![self.class_count], out)
    }

    /// Run layers `start..end` on `x`, which must be shaped like layer
    /// `start`'s input.
    pub fn forward_range(&self, mut x: Vec<f32>, start: usize, end: usize) -> Result<Vec<f32>> {
        if start > end || end > self.layers.len() {
            return Err(Error::invalid("layer range out of bounds"));
        }
        if start < self.layers.len() && x.len() != self.layers[start].in_shape.iter().product::<usize>() {
            return Err(Error::shape("input does not match the first layer of the range"));
        }
        let mut col = Vec::new();
        for layer in &self.layers[start..end] {
            x = self.layer_forward(layer, &x, &mut col, None);
        }
        Ok(x)
    }

    fn layer_forward(&self, layer: &Layer, x: &[f32], col: &mut Vec<f32>, argmax: Option<&mut Vec<u32>>) -> Vec<f32> {
        let out_len: usize = layer.out_shape.iter().product();
        match layer.spec {
            LayerSpec::Conv2d { out_ch, .. } => {
                let win = layer.window();
                kernels::im2col(x, win, col);
                let p = win.out_h() * win.out_w();
                let mut out = vec![0.0; out_len];
                for (row, &bv) in out.chunks_exact_mut(p).zip(&layer.bias) {
                    row.fill(bv);
                }
                kernels::gemm_nn(out_ch, win.channels * win.k * win.k, p, &layer.weight, col, &mut out);
                out
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool { .. } => {
                let mut out = vec![0.0; out_len];
                let mut idx = vec![0u32; out_len];
                kernels::maxpool_forward(x, layer.window(), &mut out, &mut idx);
                if let Some(a) = argmax {
                    *a = idx;
                }
                out
            }
            LayerSpec::Flatten => x.to_vec(),
            LayerSpec::Fc { .. } => {
                let mut out = vec![0.0; out_len];
                fc_forward_raw(x, &layer.weight, &layer.bias, &mut out);
                out
            }
        }
    }

    /// Forward pass keeping what the backward pass needs.
    pub fn forward_cached(&self, x: &[f32]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut cols = vec![Vec::new(); n];
        let mut argmax = vec![Vec::new(); n];
        acts.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = self.layer_forward(layer, &acts[i], &mut cols[i], Some(&mut argmax[i]));
            acts.push(out);
        }
        Ok(ForwardCache { acts, cols, argmax })
    }

    /// Accumulate parameter gradients of a scalar loss whose gradient with
    /// respect to the logits is `grad_logits`. Returns the input gradient.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f32], grads: &mut Gradients) -> Result<Vec<f32>> {
        let n = self.layers.len();
        if cache.acts.len() != n + 1 || cache.cols.len() != n {
            return Err(Error::State("forward cache does not belong to this network".into()));
        }
        if grad_logits.len() != self.class_count {
            return Err(Error::shape("logit gradient length differs from class count"));
        }
        if grads.weight.len() != n {
            return Err(Error::shape("gradient buffers do not match the network"));
        }
        let mut g = grad_logits.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.acts[i];
            if x.len() != layer.in_shape.iter().product::<usize>() {
                return Err(Error::State(format!("cached input of layer {i} has the wrong size")));
            }
            g = match layer.spec {
                LayerSpec::Conv2d { out_ch, .. } => {
                    let win = layer.window();
                    if cache.cols[i].is_empty() {
                        return Err(Error::State(format!("missing im2col cache for layer {i}")));
                    }
                    let mut gx = vec![0.0; x.len()];
                    conv_backward_raw(
                        &layer.weight,
                        &cache.cols[i],
                        &g,
                        win,
                        out_ch,
                        &mut grads.weight[i],
                        &mut grads.bias[i],
                        Some(&mut gx),
                    );
                    gx
                }
                LayerSpec::Relu => relu_grad(x, &g),
                LayerSpec::MaxPool { .. } => {
                    let idx = &cache.argmax[i];
                    if idx.len() != g.len() {
                        return Err(Error::State(format!("missing argmax cache for layer {i}")));
                    }
                    let mut gx = vec![0.0; x.len()];
                    for (&j, &gv) in idx.iter().zip(&g) {
                        gx[j as usize] += gv;
                    }
                    gx
                }
                LayerSpec::Flatten => g,
                LayerSpec::Fc { .. } => {
                    let mut gx = vec![0.0; x.len()];
                    fc_backward_raw(x, &layer.weight, &g, &mut grads.weight[i], &mut grads.bias[i], Some(&mut gx));
                    gx
                }
            };
        }
        Ok(g)
    }

    /// Forward, cross-entropy and backward for one sample; returns the loss.
    pub fn accumulate_sample(&self, x: &[f32], target: usize, grads: &mut Gradients) -> Result<f32> {
        let cache = self.forward_cached(x)?;
        let (loss, g) = softmax_xent(cache.logits(), target)?;
        self.backward(&cache, &g, grads)?;
        Ok(loss)
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}
