//! Mini-batch SGD with momentum, a stepped learning-rate schedule,
//! checkpoints and training curves.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{argmax, image_to_input, Gradients, LayerSpec, Network};
use crate::supergen::{Reader, SampleArchive};

/// Samples per gradient chunk. Chunks are summed in index order, so the
/// batch gradient does not depend on the worker count.
const CHUNK: usize = 4;

/// A batch loss above this multiple of the chance-level loss `ln(classes)`
/// counts as divergence.
pub const DIVERGENCE_FACTOR: f32 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub lr_drop: f32,
    pub drop_interval: u64,
    pub batch_size: usize,
    pub max_iters: u64,
    pub seed: u64,
    /// Iterations between validation passes; 0 disables them.
    pub val_every: u64,
    /// Iterations averaged into one training-loss curve point.
    pub log_every: u64,
    /// Stop once validation accuracy reaches this fraction.
    pub stop_at_val_acc: Option<f32>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 7e-4,
            lr_drop: 0.99,
            drop_interval: 5000,
            batch_size: 32,
            max_iters: 60_000,
            seed: 0,
            val_every: 1000,
            log_every: 100,
            stop_at_val_acc: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return Err(Error::invalid("lr_drop must lie in (0, 1]"));
        }
        if self.drop_interval == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::invalid("drop_interval, batch_size and log_every must be at least 1"));
        }
        if let Some(t) = self.stop_at_val_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::invalid("stop_at_val_acc must be a fraction"));
            }
        }
        Ok(())
    }
}

/// `base_lr * lr_drop^floor(iter / drop_interval)`
pub fn lr_at(cfg: &OptimConfig, iter: u64) -> f32 {
    let drops = (iter / cfg.drop_interval.max(1)) as i32;
    (cfg.base_lr as f64 * (cfg.lr_drop as f64).powi(drops)) as f32
}

/// Iteration counter and one velocity buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub iteration: u64,
    pub velocity: Gradients,
}

impl OptimState {
    pub fn new(net: &Network) -> Self {
        OptimState {
            iteration: 0,
            velocity: Gradients::zeros_like(net),
        }
    }
}

fn check_like(net: &Network, g: &Gradients, what: &str) -> Result<()> {
    let ok = g.weight.len() == net.layers().len()
        && g.bias.len() == net.layers().len()
        && net.layers().iter().enumerate().all(|(i, l)| g.weight[i].len() == l.weight.len() && g.bias[i].len() == l.bias.len());
    if ok {
        Ok(())
    } else {
        Err(Error::shape(format!("{what} do not match the network parameters")))
    }
}

/// `v <- momentum*v - lr*(g + weight_decay*w); w <- w + v`, applied to
/// every weight and bias. A non-finite gradient aborts before any update.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut OptimState, cfg: &OptimConfig) -> Result<()> {
    check_like(net, grads, "gradients")?;
    check_like(net, &state.velocity, "velocity buffers")?;
    if !grads.all_finite() {
        return Err(Error::Numeric(format!("non-finite gradient at iteration {}", state.iteration)));
    }
    let lr = lr_at(cfg, state.iteration);
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        let pairs = [
            (&mut layer.weight, &grads.weight[i], &mut state.velocity.weight[i]),
            (&mut layer.bias, &grads.bias[i], &mut state.velocity.bias[i]),
        ];
        for (w, g, v) in pairs {
            for ((wv, &gv), vv) in w.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vv = mu * *vv - lr * (gv + wd * *wv);
                *wv += *vv;
            }
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Mean loss and mean gradient over `indices`.
pub fn batch_gradient(net: &Network, archive: &SampleArchive, indices: &[usize]) -> Result<(f32, Gradients)> {
    if indices.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let parts: Vec<(f64, Gradients)> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Gradients::zeros_like(net);
            let mut loss = 0.0f64;
            for &i in chunk {
                let s = &archive.samples[i];
                loss += net.accumulate_sample(&image_to_input(&s.image), s.target_class, &mut g)? as f64;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut parts = parts.into_iter();
    let (mut loss, mut total) = parts.next().expect("at least one chunk");
    for (l, g) in parts {
        loss += l;
        total.add(&g);
    }
    let n = indices.len() as f32;
    total.scale(1.0 / n);
    Ok(((loss / n as f64) as f32, total))
}

/// Fraction of samples whose argmax matches the target class.
pub fn sample_accuracy(net: &Network, archive: &SampleArchive) -> Result<f32> {
    if archive.is_empty() {
        return Err(Error::invalid("empty validation archive"));
    }
    let correct = archive
        .samples
        .par_iter()
        .map(|s| Ok(usize::from(argmax(net.forward(&s.image)?.data()) == s.target_class)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f32 / archive.len() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub iter: u64,
    pub loss: f32,
    pub lr: f32,
    pub val_acc: Option<f32>,
}

/// Training curve; serialized as CSV `iter,loss,lr,val_acc`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveLog {
    pub points: Vec<CurvePoint>,
}

impl CurveLog {
    pub const HEADER: &'static str = "iter,loss,lr,val_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for p in &self.points {
            let val = p.val_acc.map(|v| format!("{v:?}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:?},{:?},{val}", p.iter, p.loss, p.lr);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::format("curve log header missing"));
        }
        let bad = |line: &str| Error::format(format!("bad curve log row {line:?}"));
        let mut points = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            points.push(CurvePoint {
                iter: f[0].parse().map_err(|_| bad(line))?,
                loss: f[1].parse().map_err(|_| bad(line))?,
                lr: f[2].parse().map_err(|_| bad(line))?,
                val_acc: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad(line))?) },
            });
        }
        Ok(CurveLog { points })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Network,
    /// Highest-validation model, or the last one if validation never ran.
    pub best: Network,
    pub best_val_acc: Option<f32>,
    pub iterations: u64,
    pub curve: CurveLog,
}

/// Step-wise training driver. A failed step leaves the network untouched,
/// so [`Trainer::network`] is always the last good model.
pub struct Trainer<'a> {
    net: Network,
    state: OptimState,
    cfg: OptimConfig,
    archive: &'a SampleArchive,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    curve: CurveLog,
    window_loss: f64,
    window_len: u64,
    best: Option<(f32, Network)>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: Network, cfg: OptimConfig, archive: &'a SampleArchive) -> Result<Self> {
        cfg.validate()?;
        if archive.is_empty() {
            return Err(Error::invalid("training archive is empty"));
        }
        check_archive(&net, archive)?;
        Ok(Trainer {
            state: OptimState::new(&net),
            net,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            archive,
            order: Vec::new(),
            cursor: 0,
            curve: CurveLog::default(),
            window_loss: 0.0,
            window_len: 0,
            best: None,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn iteration(&self) -> u64 {
        self.state.iteration
    }

    pub fn curve(&self) -> &CurveLog {
        &self.curve
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        while batch.len() < self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.archive.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One mini-batch update; returns the batch loss.
    pub fn step(&mut self) -> Result<f32> {
        let batch = self.next_batch();
        let (loss, grads) = batch_gradient(&self.net, self.archive, &batch)?;
        // Stable log-sum-exp keeps a diverging loss finite, so also stop
        // once it is far beyond chance level.
        let limit = DIVERGENCE_FACTOR * (self.net.class_count() as f32).ln().max(1.0);
        if !loss.is_finite() || loss > limit {
            return Err(Error::Numeric(format!("training loss {loss} diverged at iteration {}", self.state.iteration)));
        }
        let lr = lr_at(&self.cfg, self.state.iteration);
        sgd_step(&mut self.net, &grads, &mut self.state, &self.cfg)?;
        if !self.net.all_finite() {
            return Err(Error::Numeric(format!("parameters diverged at iteration {}", self.state.iteration)));
        }
        self.window_loss += loss as f64;
        self.window_len += 1;
        if self.state.iteration % self.cfg.log_every == 0 {
            self.flush(lr, None);
        }
        Ok(loss)
    }

    fn flush(&mut self, lr: f32, val_acc: Option<f32>) {
        let loss = if self.window_len == 0 { f32::NAN } else { (self.window_loss / self.window_len as f64) as f32 };
        let iter = self.state.iteration;
        match self.curve.points.last_mut() {
            Some(p) if p.iter == iter => p.val_acc = p.val_acc.or(val_acc),
            _ => self.curve.points.push(CurvePoint { iter, loss, lr, val_acc }),
        }
        if self.window_len > 0 {
            self.window_loss = 0.0;
            self.window_len = 0;
        }
    }

    /// Validate, record the point and keep the best model.
    pub fn validate(&mut self, val: &SampleArchive) -> Result<f32> {
        let acc = sample_accuracy(&self.net, val)?;
        let lr = lr_at(&self.cfg, self.state.iteration.saturating_sub(1));
        self.flush(lr, Some(acc));
        if self.best.as_ref().map_or(true, |(b, _)| acc > *b) {
            self.best = Some((acc, self.net.clone()));
        }
        Ok(acc)
    }

    /// Train until `max_iters` or the validation stop threshold.
    pub fn run(mut self, val: Option<&SampleArchive>, progress: impl FnMut(&CurvePoint)) -> Result<TrainOutcome> {
        self.advance(val, progress)?;
        Ok(self.finish())
    }

    /// Like [`Trainer::run`] but keeps the trainer, so the last good model
    /// stays reachable after an error.
    pub fn advance(&mut self, val: Option<&SampleArchive>, mut progress: impl FnMut(&CurvePoint)) -> Result<()> {
        if let Some(v) = val {
            check_archive(&self.net, v)?;
        }
        while self.state.iteration < self.cfg.max_iters {
            self.step()?;
            let it = self.state.iteration;
            let mut stop = false;
            if let Some(v) = val {
                if self.cfg.val_every > 0 && (it % self.cfg.val_every == 0 || it == self.cfg.max_iters) {
                    let acc = self.validate(v)?;
                    stop = self.cfg.stop_at_val_acc.is_some_and(|t| acc >= t);
                }
            }
            if it % self.cfg.log_every == 0 || stop {
                if let Some(p) = self.curve.points.last() {
                    progress(p);
                }
            }
            if stop {
                break;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> TrainOutcome {
        if self.window_len > 0 {
            self.flush(lr_at(&self.cfg, self.state.iteration.saturating_sub(1)), None);
        }
        let (best_val_acc, best) = match self.best.take() {
            Some((a, n)) => (Some(a), n),
            None => (None, self.net.clone()),
        };
        TrainOutcome {
            iterations: self.state.iteration,
            last: self.net,
            best,
            best_val_acc,
            curve: self.curve,
        }
    }
}

fn check_archive(net: &Network, archive: &SampleArchive) -> Result<()> {
    let [c, h, w] = net.input_shape();
    if archive.channels != c || archive.canvas_h != h || archive.canvas_w != w {
        return Err(Error::shape("sample archive canvas does not match the network input"));
    }
    if archive.class_count != net.class_count() {
        return Err(Error::invalid(format!(
            "archive has {} classes, network has {}",
            archive.class_count,
            net.class_count()
        )));
    }
    Ok(())
}

/// Train `net` on `archive`, validating on `val`.
pub fn train_loop(archive: &SampleArchive, net: Network, cfg: &OptimConfig, val: &SampleArchive) -> Result<TrainOutcome> {
    Trainer::new(net, cfg.clone(), archive)?.run(Some(val), |_| {})
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 4] = b"SOCM";
const CKPT_VERSION: u8 = 1;

const KIND_INPUT: u8 = 0;
const KIND_CONV: u8 = 1;
const KIND_RELU: u8 = 2;
const KIND_MAXPOOL: u8 = 3;
const KIND_FLATTEN: u8 = 4;
const KIND_FC: u8 = 5;

fn push_u16(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::invalid(format!("dimension {v} exceeds the checkpoint limit")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Entry 0 is an input-shape record (kind 0); the network layers follow.
pub fn checkpoint_to_bytes(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * net.param_count());
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    push_u16(&mut out, net.class_count())?;
    let count = u8::try_from(net.layers().len() + 1).map_err(|_| Error::invalid("too many layers for a checkpoint"))?;
    out.push(count);
    out.push(KIND_INPUT);
    for d in net.input_shape() {
        push_u16(&mut out, d)?;
    }
    for layer in net.layers() {
        match layer.spec {
            LayerSpec::Conv2d { out_ch, k, stride, pad } => {
                out.push(KIND_CONV);
                for d in [out_ch, layer.in_shape()[0], k, stride, pad] {
                    push_u16(&mut out, d)?;
                }
            }
            LayerSpec::Relu => out.push(KIND_RELU),
            LayerSpec::MaxPool { k, stride } => {
                out.push(KIND_MAXPOOL);
                push_u16(&mut out, k)?;
                push_u16(&mut out, stride)?;
            }
            LayerSpec::Flatten => out.push(KIND_FLATTEN),
            LayerSpec::Fc { out_dim } => {
                out.push(KIND_FC);
                push_u16(&mut out, out_dim)?;
                push_u16(&mut out, layer.in_shape()[0])?;
            }
        }
        for v in layer.weight.iter().chain(&layer.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::format("not a model checkpoint (bad magic)"));
    }
    let version = r.u8()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let class_count = r.u16()? as usize;
    let count = r.u8()? as usize;
    if count == 0 || r.u8()? != KIND_INPUT {
        return Err(Error::format("checkpoint does not start with an input record"));
    }
    let input = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
    let mut specs = Vec::with_capacity(count - 1);
    let mut declared_in = Vec::with_capacity(count - 1);
    let mut offsets = Vec::with_capacity(count - 1);
    for _ in 1..count {
        let kind = r.u8()?;
        let (spec, din) = match kind {
            KIND_CONV => {
                let d: Vec<usize> = (0..5).map(|_| r.u16().map(usize::from)).collect::<Result<_>>()?;
                (LayerSpec::Conv2d { out_ch: d[0], k: d[2], stride: d[3], pad: d[4] }, Some(d[1]))
            }
            KIND_RELU => (LayerSpec::Relu, None),
            KIND_MAXPOOL => {
                let k = r.u16()? as usize;
                (LayerSpec::MaxPool { k, stride: r.u16()? as usize }, None)
            }
            KIND_FLATTEN => (LayerSpec::Flatten, None),
            KIND_FC => {
                let out_dim = r.u16()? as usize;
                (LayerSpec::Fc { out_dim }, Some(r.u16()? as usize))
            }
            other => return Err(Error::format(format!("unknown layer kind {other}"))),
        };
        let n = match spec {
            LayerSpec::Conv2d { out_ch, k, .. } => out_ch * din.unwrap_or(0) * k * k + out_ch,
            LayerSpec::Fc { out_dim } => out_dim * din.unwrap_or(0) + out_dim,
            _ => 0,
        };
        offsets.push(r.pos);
        r.take(4 * n)?;
        specs.push(spec);
        declared_in.push(din);
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    let mut net = Network::new(input, &specs, class_count).map_err(|e| Error::format(format!("checkpoint describes an invalid network: {e}")))?;
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        if let Some(din) = declared_in[i] {
            if layer.in_shape()[0] != din {
                return Err(Error::format(format!("layer {i} declares {din} inputs, network gives {}", layer.in_shape()[0])));
            }
        }
        let mut rr = Reader { bytes, pos: offsets[i] };
        for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *v = rr.f32()?;
        }
    }
    Ok(net)
}

pub fn checkpoint_save(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(net)?)?;
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<Network> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
