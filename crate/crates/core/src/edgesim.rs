//! Coprocessor deployment emulation.
//!
//! The convolutional stack runs in int8 with int32 accumulation and
//! fixed-point requantization ("device half"); the fully connected tail
//! stays in float on the host. The two halves talk through a small framed
//! wire protocol over any reliable byte stream.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::Arc;

use crate::canvas::Image;
use crate::decoder::{decode, Classifier, DecodeConfig};
use crate::error::{Error, Result};
use crate::nn::kernels::{self, Window};
use crate::nn::{image_to_input, LayerSpec, Network, INPUT_MEAN, INPUT_STD};
use crate::supergen::Reader;
use crate::train::{checkpoint_from_bytes, checkpoint_to_bytes};

pub const QMAX: i32 = 127;

/// Symmetric per-tensor int8 quantization parameters (zero point 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub scale: f32,
}

impl QuantSpec {
    pub const BITS: u8 = 8;

    /// `max|x| / 127`, or 1 for an all-zero tensor.
    pub fn for_max_abs(max_abs: f32) -> Self {
        QuantSpec {
            scale: if max_abs > 0.0 { max_abs / QMAX as f32 } else { 1.0 },
        }
    }

    pub fn quantize(&self, v: f32) -> i8 {
        (v as f64 / self.scale as f64).round().clamp(-(QMAX as f64), QMAX as f64) as i8
    }

    pub fn dequantize(&self, q: i8) -> f32 {
        q as f32 * self.scale
    }
}

fn max_abs(x: &[f32]) -> f32 {
    x.iter().fold(0.0f32, |m, v| m.max(v.abs()))
}

pub fn quantize_tensor(x: &[f32]) -> Result<(Vec<i8>, QuantSpec)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cannot quantize a non-finite tensor".into()));
    }
    let spec = QuantSpec::for_max_abs(max_abs(x));
    Ok((x.iter().map(|&v| spec.quantize(v)).collect(), spec))
}

/// Fixed-point multiplier: `real ~= multiplier * 2^-shift` with the
/// multiplier in `[2^30, 2^31)`. A zero multiplier maps everything to 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Requant {
    pub multiplier: i32,
    pub shift: u8,
}

impl Requant {
    pub fn from_real(real: f64) -> Result<Self> {
        if !(real.is_finite() && real > 0.0) {
            return Err(Error::Numeric(format!("requantization scale {real} is not positive")));
        }
        let mut shift: i32 = 30 - real.log2().floor() as i32;
        let mut m = (real * 2f64.powi(shift)).round();
        while m >= 2f64.powi(31) {
            shift -= 1;
            m = (real * 2f64.powi(shift)).round();
        }
        while m < 2f64.powi(30) {
            shift += 1;
            m = (real * 2f64.powi(shift)).round();
        }
        if shift > 62 {
            return Ok(Requant { multiplier: 0, shift: 0 });
        }
        if shift < 1 {
            return Err(Error::Numeric(format!("requantization scale {real} is too large")));
        }
        Ok(Requant { multiplier: m as i32, shift: shift as u8 })
    }

    /// `round_half_up(acc * multiplier / 2^shift)`, saturated to int8.
    pub fn apply(&self, acc: i32) -> i8 {
        if self.multiplier == 0 {
            return 0;
        }
        let prod = acc as i64 * self.multiplier as i64;
        let v = (prod + (1i64 << (self.shift - 1))) >> self.shift;
        v.clamp(-(QMAX as i64), QMAX as i64) as i8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantLayer {
    Conv {
        out_ch: usize,
        in_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        relu: bool,
        weight: Vec<i8>,
        bias: Vec<i32>,
        w_scale: f32,
        in_scale: f32,
        out_scale: f32,
        requant: Requant,
    },
    Relu,
    MaxPool { k: usize, stride: usize },
}

/// Integer-only convolution stack up to the flatten boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceModel {
    input_shape: [usize; 3],
    input_scale: f32,
    lut: [i8; 256],
    layers: Vec<QuantLayer>,
    out_shape: [usize; 3],
    out_scale: f32,
}

fn input_lut(scale: f32) -> [i8; 256] {
    let spec = QuantSpec { scale };
    std::array::from_fn(|p| spec.quantize((p as f32 / 255.0 - INPUT_MEAN) / INPUT_STD))
}

impl DeviceModel {
    fn new(input_shape: [usize; 3], input_scale: f32, layers: Vec<QuantLayer>, out_scale: f32) -> Result<Self> {
        if !(input_scale.is_finite() && input_scale > 0.0 && out_scale.is_finite() && out_scale > 0.0) {
            return Err(Error::format("device scales must be positive"));
        }
        let mut shape = input_shape;
        for layer in &layers {
            shape = match *layer {
                QuantLayer::Conv { out_ch, in_ch, k, stride, pad, ref weight, ref bias, .. } => {
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k, stride, pad };
                    if in_ch != shape[0] || !win.valid() || weight.len() != out_ch * in_ch * k * k || bias.len() != out_ch || out_ch == 0 {
                        return Err(Error::shape("device conv layer does not fit its input"));
                    }
                    [out_ch, win.out_h(), win.out_w()]
                }
                QuantLayer::Relu => shape,
                QuantLayer::MaxPool { k, stride } => {
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k, stride, pad: 0 };
                    if !win.valid() {
                        return Err(Error::shape("device pooling window does not fit its input"));
                    }
                    [shape[0], win.out_h(), win.out_w()]
                }
            };
        }
        Ok(DeviceModel {
            input_shape,
            input_scale,
            lut: input_lut(input_scale),
            layers,
            out_shape: shape,
            out_scale,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn feature_count(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn out_scale(&self) -> f32 {
        self.out_scale
    }

    pub fn layers(&self) -> &[QuantLayer] {
        &self.layers
    }

    /// Raw interleaved pixels to int8 features and their scale.
    pub fn forward_pixels(&self, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<(Vec<i8>, f32)> {
        let [c, h, w] = self.input_shape;
        if (channels, height, width) != (c, h, w) || pixels.len() != c * h * w {
            return Err(Error::shape(format!("device expects {w}x{h}x{c}, got {width}x{height}x{channels}")));
        }
        let mut x = vec![0i8; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                x[ch * h * w + i] = self.lut[pixels[i * c + ch] as usize];
            }
        }
        let mut shape = self.input_shape;
        let mut col = Vec::new();
        for layer in &self.layers {
            match layer {
                QuantLayer::Conv { out_ch, k, stride, pad, relu, weight, bias, requant, .. } => {
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k: *k, stride: *stride, pad: *pad };
                    kernels::im2col_i8(&x, win, &mut col);
                    let p = win.out_h() * win.out_w();
                    let mut acc = vec![0i32; out_ch * p];
                    for (row, &b) in acc.chunks_exact_mut(p).zip(bias) {
                        row.fill(b);
                    }
                    kernels::gemm_i8(*out_ch, win.channels * k * k, p, weight, &col, &mut acc);
                    let floor = if *relu { 0 } else { i8::MIN };
                    x = acc.iter().map(|&a| requant.apply(a).max(floor)).collect();
                    shape = [*out_ch, win.out_h(), win.out_w()];
                }
                QuantLayer::Relu => x.iter_mut().for_each(|v| *v = (*v).max(0)),
                QuantLayer::MaxPool { k, stride } => {
                    let win = Window { channels: shape[0], in_h: shape[1], in_w: shape[2], k: *k, stride: *stride, pad: 0 };
                    let (oh, ow) = (win.out_h(), win.out_w());
                    let mut out = vec![0i8; shape[0] * oh * ow];
                    for ch in 0..shape[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut m = i8::MIN;
                                for u in 0..*k {
                                    for v in 0..*k {
                                        m = m.max(x[(ch * shape[1] + oy * stride + u) * shape[2] + ox * stride + v]);
                                    }
                                }
                                out[(ch * oh + oy) * ow + ox] = m;
                            }
                        }
                    }
                    x = out;
                    shape = [shape[0], oh, ow];
                }
            }
        }
        Ok((x, self.out_scale))
    }

    pub fn forward(&self, image: &Image) -> Result<(Vec<i8>, f32)> {
        self.forward_pixels(image.width(), image.height(), image.channels(), image.pixels())
    }
}

/// Device half plus the float host tail.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantNetwork {
    pub device: DeviceModel,
    /// Fully connected tail; its input is the flattened device output.
    pub head: Network,
}

/// Float activations of the layers before `flatten_index`.
pub fn float_features(net: &Network, image: &Image) -> Result<Vec<f32>> {
    let split = net.flatten_index().ok_or_else(|| Error::invalid("network has no flatten layer"))?;
    net.check_image(image)?;
    net.forward_range(image_to_input(image), 0, split)
}

/// Quantize the layers before the flatten boundary, calibrating activation
/// scales by max-abs over `calib`; the tail is copied in float.
pub fn quantize_model(net: &Network, calib: &[Image]) -> Result<QuantNetwork> {
    if calib.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let split = net.flatten_index().ok_or_else(|| Error::invalid("network has no flatten layer"))?;
    let layers = net.layers();
    let mut input_max = 0.0f32;
    let mut act_max = vec![0.0f32; split];
    for image in calib {
        net.check_image(image)?;
        let mut x = image_to_input(image);
        input_max = input_max.max(max_abs(&x));
        for (i, m) in act_max.iter_mut().enumerate() {
            x = net.forward_range(x, i, i + 1)?;
            *m = m.max(max_abs(&x));
        }
    }
    let input_scale = QuantSpec::for_max_abs(input_max).scale;
    let mut scale = input_scale;
    let mut qlayers = Vec::new();
    let mut i = 0;
    while i < split {
        let layer = &layers[i];
        match layer.spec {
            LayerSpec::Conv2d { out_ch, k, stride, pad } => {
                let relu = i + 1 < split && layers[i + 1].spec == LayerSpec::Relu;
                let last = if relu { i + 1 } else { i };
                let (weight, wspec) = quantize_tensor(&layer.weight)?;
                let out_scale = QuantSpec::for_max_abs(act_max[last]).scale;
                let acc_scale = wspec.scale as f64 * scale as f64;
                let bias = layer
                    .bias
                    .iter()
                    .map(|&b| (b as f64 / acc_scale).round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
                    .collect();
                qlayers.push(QuantLayer::Conv {
                    out_ch,
                    in_ch: layer.in_shape()[0],
                    k,
                    stride,
                    pad,
                    relu,
                    weight,
                    bias,
                    w_scale: wspec.scale,
                    in_scale: scale,
                    out_scale,
                    requant: Requant::from_real(acc_scale / out_scale as f64)?,
                });
                scale = out_scale;
                i = last + 1;
            }
            LayerSpec::Relu => {
                qlayers.push(QuantLayer::Relu);
                i += 1;
            }
            LayerSpec::MaxPool { k, stride } => {
                qlayers.push(QuantLayer::MaxPool { k, stride });
                i += 1;
            }
            LayerSpec::Flatten | LayerSpec::Fc { .. } => {
                return Err(Error::invalid("fully connected layer before the flatten boundary"));
            }
        }
    }
    let device = DeviceModel::new(net.input_shape(), input_scale, qlayers, scale)?;
    let head = head_of(net, split, device.feature_count())?;
    Ok(QuantNetwork { device, head })
}

fn head_of(net: &Network, split: usize, features: usize) -> Result<Network> {
    let specs: Vec<LayerSpec> = net.layers()[split..].iter().map(|l| l.spec).collect();
    let mut head = Network::new([features, 1, 1], &specs, net.class_count())?;
    for (dst, src) in head.layers_mut().iter_mut().zip(&net.layers()[split..]) {
        dst.weight.clone_from(&src.weight);
        dst.bias.clone_from(&src.bias);
    }
    Ok(head)
}

/// Host half: dequantize device features and run the float tail.
pub fn host_scores(head: &Network, features: &[i8], scale: f32) -> Result<Vec<f32>> {
    let x: Vec<f32> = features.iter().map(|&q| q as f32 * scale).collect();
    head.forward_range(x, 0, head.layers().len())
}

impl QuantNetwork {
    pub fn class_count(&self) -> usize {
        self.head.class_count()
    }

    /// Both halves in-process, without framing.
    pub fn scores(&self, image: &Image) -> Result<Vec<f32>> {
        let (f, s) = self.device.forward(image)?;
        host_scores(&self.head, &f, s)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let d = &self.device;
        let mut out = Vec::new();
        out.extend_from_slice(QMODEL_MAGIC);
        out.push(QMODEL_VERSION);
        for v in d.input_shape {
            put_u16(&mut out, v)?;
        }
        out.extend_from_slice(&d.input_scale.to_le_bytes());
        out.extend_from_slice(&d.out_scale.to_le_bytes());
        out.push(u8::try_from(d.layers.len()).map_err(|_| Error::invalid("too many device layers"))?);
        for layer in &d.layers {
            match layer {
                QuantLayer::Conv { out_ch, in_ch, k, stride, pad, relu, weight, bias, w_scale, in_scale, out_scale, requant } => {
                    out.push(1);
                    for &v in [out_ch, in_ch, k, stride, pad] {
                        put_u16(&mut out, v)?;
                    }
                    out.push(u8::from(*relu));
                    for s in [w_scale, in_scale, out_scale] {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                    out.extend_from_slice(&requant.multiplier.to_le_bytes());
                    out.push(requant.shift);
                    out.extend(weight.iter().map(|&w| w as u8));
                    for b in bias {
                        out.extend_from_slice(&b.to_le_bytes());
                    }
                }
                QuantLayer::Relu => out.push(2),
                QuantLayer::MaxPool { k, stride } => {
                    out.push(3);
                    put_u16(&mut out, *k)?;
                    put_u16(&mut out, *stride)?;
                }
            }
        }
        let head = checkpoint_to_bytes(&self.head)?;
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != QMODEL_MAGIC {
            return Err(Error::format("not a quantized model (bad magic)"));
        }
        let version = r.u8()?;
        if version != QMODEL_VERSION {
            return Err(Error::format(format!("unsupported quantized model version {version}")));
        }
        let input = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
        let input_scale = r.f32()?;
        let out_scale = r.f32()?;
        let count = r.u8()?;
        let mut layers = Vec::with_capacity(count as usize);
        for _ in 0..count {
            layers.push(match r.u8()? {
                1 => {
                    let d: Vec<usize> = (0..5).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?;
                    let relu = match r.u8()? {
                        0 => false,
                        1 => true,
                        other => return Err(Error::format(format!("bad relu flag {other}"))),
                    };
                    let (w_scale, in_scale, out_scale) = (r.f32()?, r.f32()?, r.f32()?);
                    let multiplier = r.u32()? as i32;
                    let shift = r.u8()?;
                    if multiplier < 0 || shift > 62 || (multiplier != 0 && shift == 0) {
                        return Err(Error::format("bad requantization constants"));
                    }
                    let weight = r.take(d[0] * d[1] * d[2] * d[2])?.iter().map(|&b| b as i8).collect();
                    let bias = (0..d[0]).map(|_| r.u32().map(|v| v as i32)).collect::<Result<_>>()?;
                    QuantLayer::Conv {
                        out_ch: d[0],
                        in_ch: d[1],
                        k: d[2],
                        stride: d[3],
                        pad: d[4],
                        relu,
                        weight,
                        bias,
                        w_scale,
                        in_scale,
                        out_scale,
                        requant: Requant { multiplier, shift },
                    }
                }
                2 => QuantLayer::Relu,
                3 => {
                    let k = r.u16()? as usize;
                    QuantLayer::MaxPool { k, stride: r.u16()? as usize }
                }
                other => return Err(Error::format(format!("unknown device layer kind {other}"))),
            });
        }
        let len = r.u32()? as usize;
        let head = checkpoint_from_bytes(r.take(len)?)?;
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after quantized model"));
        }
        let device = DeviceModel::new(input, input_scale, layers, out_scale).map_err(|e| Error::format(e.to_string()))?;
        if head.input_shape() != [device.feature_count(), 1, 1] {
            return Err(Error::format("host tail does not match the device output"));
        }
        Ok(QuantNetwork { device, head })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl Classifier for QuantNetwork {
    fn class_count(&self) -> usize {
        QuantNetwork::class_count(self)
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        QuantNetwork::scores(self, canvas)
    }
}

const QMODEL_MAGIC: &[u8; 4] = b"SOCQ";
const QMODEL_VERSION: u8 = 1;

fn put_u16(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} does not fit 16 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

// ---------------------------------------------------------------------------
// Wire protocol

pub const WIRE_MAGIC: &[u8; 4] = b"SOCR";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Largest accepted payload.
pub const MAX_PAYLOAD: u32 = 64 << 20;

/// Codes carried in error frames.
pub mod codes {
    pub const BAD_VERSION: u8 = 1;
    pub const BAD_TYPE: u8 = 2;
    pub const MALFORMED: u8 = 3;
    pub const SHAPE: u8 = 4;
    pub const BAD_MAGIC: u8 = 5;
    pub const TOO_LARGE: u8 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    InferRequest = 1,
    InferResponse = 2,
    Error = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(MsgType::InferRequest),
            2 => Some(MsgType::InferResponse),
            3 => Some(MsgType::Error),
            _ => None,
        }
    }
}

/// One frame as read off the wire, before any validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub magic: [u8; 4],
    pub version: u8,
    pub msg_type: u8,
    pub payload: Vec<u8>,
}

impl RawFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.magic);
        out.push(self.version);
        out.push(self.msg_type);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Parse exactly one frame occupying all of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol(format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len())));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Protocol(format!("truncated payload ({} of {len} bytes)", body.len())));
        }
        if body.len() > len {
            return Err(Error::Protocol(format!("{} bytes after the frame", body.len() - len)));
        }
        Ok(RawFrame {
            magic: bytes[..4].try_into().unwrap(),
            version: bytes[4],
            msg_type: bytes[5],
            payload: body.to_vec(),
        })
    }
}

/// Read one frame; `Ok(None)` on a clean end of stream.
pub fn read_raw(r: &mut impl Read) -> Result<Option<RawFrame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol(format!("stream ended inside a header ({got} of {HEADER_LEN} bytes)"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Transport(e.to_string())),
        }
    }
    let len = u32::from_le_bytes(header[6..10].try_into().unwrap());
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Protocol(format!("stream ended inside a {len}-byte payload")),
        _ => Error::Transport(e.to_string()),
    })?;
    Ok(Some(RawFrame {
        magic: header[..4].try_into().unwrap(),
        version: header[4],
        msg_type: header[5],
        payload,
    }))
}

/// A validated frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn encode(&self) -> Vec<u8> {
        self.raw().encode()
    }

    pub fn raw(&self) -> RawFrame {
        RawFrame {
            magic: *WIRE_MAGIC,
            version: WIRE_VERSION,
            msg_type: self.msg_type as u8,
            payload: self.payload.clone(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::from_raw(RawFrame::parse(bytes)?)
    }

    pub fn from_raw(raw: RawFrame) -> Result<Self> {
        if &raw.magic != WIRE_MAGIC {
            return Err(Error::Protocol("bad frame magic".into()));
        }
        if raw.version != WIRE_VERSION {
            return Err(Error::Protocol(format!("unsupported frame version {}", raw.version)));
        }
        let msg_type = MsgType::from_u8(raw.msg_type).ok_or_else(|| Error::Protocol(format!("unknown message type {}", raw.msg_type)))?;
        Ok(WireMessage { msg_type, payload: raw.payload })
    }

    pub fn request(image: &Image) -> Result<Self> {
        let mut p = Vec::with_capacity(5 + image.pixels().len());
        put_u16(&mut p, image.width())?;
        put_u16(&mut p, image.height())?;
        p.push(image.channels() as u8);
        p.extend_from_slice(image.pixels());
        Ok(WireMessage { msg_type: MsgType::InferRequest, payload: p })
    }

    pub fn response(features: &[i8], scale: f32) -> Self {
        let mut p = Vec::with_capacity(8 + features.len());
        p.extend_from_slice(&(features.len() as u32).to_le_bytes());
        p.extend_from_slice(&scale.to_le_bytes());
        p.extend(features.iter().map(|&f| f as u8));
        WireMessage { msg_type: MsgType::InferResponse, payload: p }
    }

    pub fn error(code: u8, message: &str) -> Self {
        let mut p = vec![code];
        p.extend_from_slice(message.as_bytes());
        WireMessage { msg_type: MsgType::Error, payload: p }
    }

    /// `(width, height, channels, pixels)` of a request.
    pub fn parse_request(&self) -> Result<(usize, usize, usize, &[u8])> {
        if self.msg_type != MsgType::InferRequest {
            return Err(Error::Protocol(format!("expected a request, got {:?}", self.msg_type)));
        }
        let p = &self.payload;
        if p.len() < 5 {
            return Err(Error::Protocol("request payload too short".into()));
        }
        let w = u16::from_le_bytes([p[0], p[1]]) as usize;
        let h = u16::from_le_bytes([p[2], p[3]]) as usize;
        let c = p[4] as usize;
        if p.len() - 5 != w * h * c {
            return Err(Error::Protocol(format!("request declares {w}x{h}x{c} but carries {} pixel bytes", p.len() - 5)));
        }
        Ok((w, h, c, &p[5..]))
    }

    /// Features and scale of a response; an error frame becomes
    /// [`Error::Remote`].
    pub fn parse_response(&self) -> Result<(Vec<i8>, f32)> {
        match self.msg_type {
            MsgType::Error => {
                let (code, msg) = self.payload.split_first().ok_or_else(|| Error::Protocol("empty error frame".into()))?;
                Err(Error::Remote { code: *code, message: String::from_utf8_lossy(msg).into_owned() })
            }
            MsgType::InferRequest => Err(Error::Protocol("expected a response, got a request".into())),
            MsgType::InferResponse => {
                let p = &self.payload;
                if p.len() < 8 {
                    return Err(Error::Protocol("response payload too short".into()));
                }
                let n = u32::from_le_bytes(p[..4].try_into().unwrap()) as usize;
                let scale = f32::from_le_bytes(p[4..8].try_into().unwrap());
                if p.len() - 8 != n {
                    return Err(Error::Protocol(format!("response declares {n} features but carries {}", p.len() - 8)));
                }
                if !(scale.is_finite() && scale > 0.0) {
                    return Err(Error::Protocol("response scale is not positive".into()));
                }
                Ok((p[8..].iter().map(|&b| b as i8).collect(), scale))
            }
        }
    }
}

/// Request handler of the emulated coprocessor.
#[derive(Clone, Debug)]
pub struct DeviceServer {
    model: Arc<DeviceModel>,
}

impl DeviceServer {
    pub fn new(model: DeviceModel) -> Self {
        DeviceServer { model: Arc::new(model) }
    }

    /// The reply to one frame. Every failure becomes an error frame.
    pub fn handle(&self, raw: RawFrame) -> WireMessage {
        if &raw.magic != WIRE_MAGIC {
            return WireMessage::error(codes::BAD_MAGIC, "bad frame magic");
        }
        if raw.version != WIRE_VERSION {
            return WireMessage::error(codes::BAD_VERSION, &format!("unsupported version {}", raw.version));
        }
        if raw.msg_type != MsgType::InferRequest as u8 {
            return WireMessage::error(codes::BAD_TYPE, &format!("cannot handle message type {}", raw.msg_type));
        }
        let msg = WireMessage { msg_type: MsgType::InferRequest, payload: raw.payload };
        let (w, h, c, pixels) = match msg.parse_request() {
            Ok(v) => v,
            Err(e) => return WireMessage::error(codes::MALFORMED, &e.to_string()),
        };
        match self.model.forward_pixels(w, h, c, pixels) {
            Ok((f, s)) => WireMessage::response(&f, s),
            Err(e) => WireMessage::error(codes::SHAPE, &e.to_string()),
        }
    }

    /// Frame bytes in, frame bytes out.
    pub fn handle_bytes(&self, bytes: &[u8]) -> Vec<u8> {
        match RawFrame::parse(bytes) {
            Ok(raw) => self.handle(raw).encode(),
            Err(e) => WireMessage::error(codes::MALFORMED, &e.to_string()).encode(),
        }
    }

    /// Serve one connection until the peer closes it. A frame that cannot
    /// be delimited gets an error frame and ends the connection.
    pub fn serve_connection<S: Read + Write>(&self, mut stream: S) -> Result<()> {
        loop {
            let raw = match read_raw(&mut stream) {
                Ok(Some(raw)) => raw,
                Ok(None) => return Ok(()),
                Err(e) => {
                    let code = if e.to_string().contains("exceeds") { codes::TOO_LARGE } else { codes::MALFORMED };
                    let _ = stream.write_all(&WireMessage::error(code, &e.to_string()).encode());
                    return Err(e);
                }
            };
            let bad_magic = &raw.magic != WIRE_MAGIC;
            let reply = self.handle(raw);
            stream.write_all(&reply.encode()).map_err(|e| Error::Transport(e.to_string()))?;
            stream.flush().map_err(|e| Error::Transport(e.to_string()))?;
            if bad_magic {
                return Err(Error::Protocol("bad frame magic; connection closed".into()));
            }
        }
    }

    /// Accept connections, one thread each; stops after `max_connections`
    /// if given.
    pub fn serve_tcp(&self, listener: TcpListener, max_connections: Option<usize>) -> Result<()> {
        let mut handles = Vec::new();
        for (n, conn) in listener.incoming().enumerate() {
            let stream = conn.map_err(|e| Error::Transport(e.to_string()))?;
            let server = self.clone();
            handles.push(std::thread::spawn(move || {
                let _ = server.serve_connection(stream);
            }));
            if max_connections.is_some_and(|m| n + 1 >= m) {
                break;
            }
        }
        for h in handles {
            let _ = h.join();
        }
        Ok(())
    }
}

/// Host-side link to a device.
pub trait DeviceChannel {
    fn infer(&mut self, image: &Image) -> Result<(Vec<i8>, f32)>;
}

/// Frames passed to a server in the same process.
pub struct InProcessChannel {
    server: DeviceServer,
}

impl InProcessChannel {
    pub fn new(server: DeviceServer) -> Self {
        InProcessChannel { server }
    }
}

impl DeviceChannel for InProcessChannel {
    fn infer(&mut self, image: &Image) -> Result<(Vec<i8>, f32)> {
        let reply = self.server.handle_bytes(&WireMessage::request(image)?.encode());
        WireMessage::decode(&reply)?.parse_response()
    }
}

/// Frames over a byte stream, one request in flight.
pub struct StreamChannel<S> {
    stream: S,
}

impl<S: Read + Write> StreamChannel<S> {
    pub fn new(stream: S) -> Self {
        StreamChannel { stream }
    }
}

impl StreamChannel<TcpStream> {
    pub fn connect(addr: &str) -> Result<Self> {
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("cannot resolve {addr:?}: {e}")))?
            .collect();
        let stream = TcpStream::connect(&addrs[..]).map_err(|e| Error::Transport(format!("cannot connect to {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        Ok(StreamChannel { stream })
    }
}

impl<S: Read + Write> DeviceChannel for StreamChannel<S> {
    fn infer(&mut self, image: &Image) -> Result<(Vec<i8>, f32)> {
        self.stream
            .write_all(&WireMessage::request(image)?.encode())
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::Transport(e.to_string()))?;
        let raw = read_raw(&mut self.stream)?.ok_or_else(|| Error::Transport("device closed the connection".into()))?;
        WireMessage::from_raw(raw)?.parse_response()
    }
}

/// Classifier whose convolutional half runs behind a channel.
pub struct DeviceClassifier<C> {
    channel: C,
    head: Network,
}

impl<C: DeviceChannel> DeviceClassifier<C> {
    pub fn new(channel: C, head: Network) -> Self {
        DeviceClassifier { channel, head }
    }
}

impl<C: DeviceChannel> Classifier for DeviceClassifier<C> {
    fn class_count(&self) -> usize {
        self.head.class_count()
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        let (features, scale) = self.channel.infer(canvas)?;
        if features.len() != self.head.input_shape()[0] {
            return Err(Error::Protocol(format!(
                "device returned {} features, host expects {}",
                features.len(),
                self.head.input_shape()[0]
            )));
        }
        host_scores(&self.head, &features, scale)
    }
}

/// Decode one scene with the device behind `channel`.
pub fn host_decode_via_device(scene: &Image, scene_id: u64, channel: impl DeviceChannel, head: &Network, cfg: &DecodeConfig) -> Result<Vec<char>> {
    decode(scene, scene_id, &mut DeviceClassifier::new(channel, head.clone()), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_endpoints_and_zero() {
        let (q, s) = quantize_tensor(&[-1.0, 0.5, 1.0]).unwrap();
        assert_eq!(s.scale, 1.0 / 127.0);
        assert_eq!(q, vec![-127, 64, 127]);
        let (q, s) = quantize_tensor(&[0.0; 4]).unwrap();
        assert_eq!((q, s.scale), (vec![0; 4], 1.0));
        assert!(matches!(quantize_tensor(&[f32::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn requant_matches_real_scale() {
        for real in [0.5, 0.0123, 3.7e-5, 1.0, 0.999_999] {
            let r = Requant::from_real(real).unwrap();
            assert!((1 << 30..1i64 << 31).contains(&(r.multiplier as i64)));
            for acc in [-100_000, -513, -1, 0, 1, 77, 4096, 250_000] {
                let want = (acc as f64 * real + 0.5).floor().clamp(-127.0, 127.0);
                assert!((r.apply(acc) as f64 - want).abs() <= 1.0, "real {real} acc {acc}");
            }
        }
        assert_eq!(Requant::from_real(1e-30).unwrap().apply(1 << 30), 0);
        assert!(Requant::from_real(0.0).is_err());
    }

    #[test]
    fn frame_round_trip_and_truncation() {
        let msg = WireMessage::response(&[1, -2, 127], 0.25);
        let bytes = msg.encode();
        assert_eq!(&bytes[..4], b"SOCR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 2);
        assert_eq!(WireMessage::decode(&bytes).unwrap(), msg);
        for cut in 0..bytes.len() {
            assert!(matches!(WireMessage::decode(&bytes[..cut]), Err(Error::Protocol(_))));
        }
        let mut bad = bytes.clone();
        bad[5] = 9;
        assert!(matches!(WireMessage::decode(&bad), Err(Error::Protocol(_))));
    }
}
