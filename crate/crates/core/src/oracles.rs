//! Reference implementations for checking the production code.
//!
//! Everything here is a direct transcription of the definitions, computed
//! in `f64` with plain nested loops, and shares no code with the
//! production kernels.

use std::collections::HashMap;

use crate::alphabet::Alphabet;
use crate::canvas::{compose, GlyphFont, Image, LayoutSpec};
use crate::decoder::Classifier;
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::taskgen::LabeledScene;

/// Dense CHW array in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "oracle array shape");
        Array { shape, data }
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Self {
        Self::new(shape.to_vec(), data.iter().map(|&v| v as f64).collect())
    }
}

/// Six nested loops over (o, i, j, c, u, v).
pub fn naive_conv2d(x: &Array, w: &Array, b: &[f64], stride: usize, pad: usize) -> Result<Array> {
    let (c_in, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (o_n, wc, k) = (w.shape[0], w.shape[1], w.shape[2]);
    if wc != c_in || w.shape[3] != k || b.len() != o_n || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(Error::shape("oracle conv shapes disagree"));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; o_n * oh * ow];
    for o in 0..o_n {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = b[o];
                for c in 0..c_in {
                    for u in 0..k {
                        for v in 0..k {
                            let yy = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= wd as isize {
                                continue;
                            }
                            s += w.data[((o * c_in + c) * k + u) * k + v] * x.data[(c * h + yy as usize) * wd + xx as usize];
                        }
                    }
                }
                y[(o * oh + i) * ow + j] = s;
            }
        }
    }
    Ok(Array::new(vec![o_n, oh, ow], y))
}

pub fn naive_maxpool(x: &Array, k: usize, stride: usize) -> Result<Array> {
    let (c_n, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    if k == 0 || stride == 0 || h < k || w < k {
        return Err(Error::shape("oracle pool window does not fit"));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut y = vec![0.0; c_n * oh * ow];
    for c in 0..c_n {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for u in 0..k {
                    for v in 0..k {
                        m = m.max(x.data[(c * h + i * stride + u) * w + j * stride + v]);
                    }
                }
                y[(c * oh + i) * ow + j] = m;
            }
        }
    }
    Ok(Array::new(vec![c_n, oh, ow], y))
}

pub fn naive_fc(x: &[f64], w: &Array, b: &[f64]) -> Result<Vec<f64>> {
    let (out, inp) = (w.shape[0], w.shape[1]);
    if x.len() != inp || b.len() != out {
        return Err(Error::shape("oracle fc shapes disagree"));
    }
    Ok((0..out).map(|j| b[j] + (0..inp).map(|i| w.data[j * inp + i] * x[i]).sum::<f64>()).collect())
}

pub fn naive_relu(x: &Array) -> Array {
    Array::new(x.shape.clone(), x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
}

/// `-ln softmax(z)[target]`, evaluated as `ln sum exp(z - z_t)`.
pub fn naive_xent(z: &[f64], target: usize) -> f64 {
    z.iter().map(|&v| (v - z[target]).exp()).sum::<f64>().ln()
}

/// Central differences `(f(p + e) - f(p - e)) / 2e` per coordinate.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// `f64` copy of a network's layer list and parameters.
#[derive(Clone, Debug)]
pub struct OracleNet {
    pub input_shape: [usize; 3],
    pub specs: Vec<LayerSpec>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl OracleNet {
    pub fn from_network(net: &Network) -> Self {
        OracleNet {
            input_shape: net.input_shape(),
            specs: net.layers().iter().map(|l| l.spec).collect(),
            weights: net.layers().iter().map(|l| l.weight.iter().map(|&v| v as f64).collect()).collect(),
            biases: net.layers().iter().map(|l| l.bias.iter().map(|&v| v as f64).collect()).collect(),
        }
    }

    /// Outputs of the first `upto` layers.
    pub fn forward_upto(&self, x: &[f64], upto: usize) -> Result<Array> {
        let mut a = Array::new(self.input_shape.to_vec(), x.to_vec());
        for i in 0..upto {
            a = self.layer(i, a)?;
        }
        Ok(a)
    }

    fn layer(&self, i: usize, a: Array) -> Result<Array> {
        Ok(match self.specs[i] {
            LayerSpec::Conv2d { out_ch, k, stride, pad } => {
                let w = Array::new(vec![out_ch, a.shape[0], k, k], self.weights[i].clone());
                naive_conv2d(&a, &w, &self.biases[i], stride, pad)?
            }
            LayerSpec::Relu => naive_relu(&a),
            LayerSpec::MaxPool { k, stride } => naive_maxpool(&a, k, stride)?,
            LayerSpec::Flatten => Array::new(vec![a.data.len()], a.data),
            LayerSpec::Fc { out_dim } => {
                let w = Array::new(vec![out_dim, a.data.len()], self.weights[i].clone());
                let y = naive_fc(&a.data, &w, &self.biases[i])?;
                Array::new(vec![out_dim], y)
            }
        })
    }

    /// Which piece of the piecewise-linear network `x` falls in: the sign of
    /// every ReLU input and the argmax of every pooling window. Finite
    /// differences are only meaningful when both probes share a signature.
    pub fn kink_signature(&self, x: &[f64]) -> Result<Vec<usize>> {
        let mut sig = Vec::new();
        let mut a = Array::new(self.input_shape.to_vec(), x.to_vec());
        for i in 0..self.specs.len() {
            match self.specs[i] {
                LayerSpec::Relu => sig.extend(a.data.iter().map(|&v| usize::from(v > 0.0))),
                LayerSpec::MaxPool { k, stride } => {
                    let (c_n, h, w) = (a.shape[0], a.shape[1], a.shape[2]);
                    for c in 0..c_n {
                        for oy in 0..(h - k) / stride + 1 {
                            for ox in 0..(w - k) / stride + 1 {
                                let mut best = (f64::NEG_INFINITY, 0);
                                for u in 0..k {
                                    for v in 0..k {
                                        let val = a.data[(c * h + oy * stride + u) * w + ox * stride + v];
                                        if val > best.0 {
                                            best = (val, u * k + v);
                                        }
                                    }
                                }
                                sig.push(best.1);
                            }
                        }
                    }
                }
                _ => {}
            }
            a = self.layer(i, a)?;
        }
        Ok(sig)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_upto(x, self.specs.len())?.data)
    }

    pub fn loss(&self, x: &[f64], target: usize) -> Result<f64> {
        Ok(naive_xent(&self.logits(x)?, target))
    }
}

/// Normalized network input computed independently of the production path.
pub fn oracle_input(image: &Image) -> Vec<f64> {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = Vec::with_capacity(w * h * c);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.push((image.get(x, y, ch) as f64 / 255.0 - 0.5) / 0.25);
            }
        }
    }
    out
}

/// Error measure for gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Ground-truth classifier: one-hot for the next true character.
///
/// With scenes attached it also checks that every canvas it receives equals
/// the direct composition of the true prefix, and reports a contract error
/// otherwise.
pub struct OracleClassifier {
    alphabet: Alphabet,
    labels: HashMap<u64, Vec<char>>,
    canvases: Option<(HashMap<u64, Image>, LayoutSpec, GlyphFont)>,
    current: Option<u64>,
    step: usize,
}

impl OracleClassifier {
    pub fn new(alphabet: Alphabet, scenes: &[LabeledScene]) -> Self {
        OracleClassifier {
            alphabet,
            labels: scenes.iter().map(|s| (s.scene_id, s.label.clone())).collect(),
            canvases: None,
            current: None,
            step: 0,
        }
    }

    pub fn from_labels(alphabet: Alphabet, labels: HashMap<u64, Vec<char>>) -> Self {
        OracleClassifier { alphabet, labels, canvases: None, current: None, step: 0 }
    }

    pub fn checking(mut self, scenes: &[LabeledScene], layout: &LayoutSpec, font: &GlyphFont) -> Self {
        let images = scenes.iter().map(|s| (s.scene_id, s.image.clone())).collect();
        self.canvases = Some((images, layout.clone(), font.clone()));
        self
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

impl Classifier for OracleClassifier {
    fn class_count(&self) -> usize {
        self.alphabet.class_count()
    }

    fn begin(&mut self, scene_id: u64) -> Result<()> {
        if !self.labels.contains_key(&scene_id) {
            return Err(Error::Contract(format!("oracle has no label for scene {scene_id:016x}")));
        }
        self.current = Some(scene_id);
        self.step = 0;
        Ok(())
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        let id = self.current.ok_or_else(|| Error::Contract("oracle queried before begin".into()))?;
        let label = &self.labels[&id];
        let symbol = *label
            .get(self.step)
            .ok_or_else(|| Error::Contract(format!("oracle queried past the end of scene {id:016x}")))?;
        if let Some((images, layout, font)) = &self.canvases {
            let scene = images
                .get(&id)
                .ok_or_else(|| Error::Contract(format!("oracle has no image for scene {id:016x}")))?;
            if compose(scene, &label[..self.step], layout, font)? != *canvas {
                return Err(Error::Contract(format!(
                    "canvas at step {} of scene {id:016x} is not the composition of the true prefix",
                    self.step
                )));
            }
        }
        let mut out = vec![0.0; self.alphabet.class_count()];
        out[self.alphabet.class_of(symbol)?] = 1.0;
        self.step += 1;
        Ok(out)
    }
}
