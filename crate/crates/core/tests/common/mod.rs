//! Measurements shared by the integration tests and the acceptance harness.
//! Every routine returns what it measured; callers decide what passes.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use superocr::canvas::{compose, GlyphFont, Image, LayoutSpec};
use superocr::cli::{ExperimentConfig, Split};
use superocr::decoder::{decode, DecodeConfig};
use superocr::eval::{count, evaluate_subsets, format_hundredths, lcr_ar, sequence_accuracy, Counts, EvalResult};
use superocr::nn::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax_xent, Gradients,
    LayerSpec, Network, Tensor,
};
use superocr::oracles::{fd_gradient, naive_conv2d, naive_fc, naive_maxpool, naive_relu, naive_xent, oracle_input, relative_error, Array, OracleClassifier, OracleNet};
use superocr::supergen::{build_training_set, meter_reading};
use superocr::taskgen::{gen_split, write_dataset, Preset};
use superocr::train::{checkpoint_to_bytes, Trainer};
use superocr::Alphabet;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-2;
/// Recheck step for probes that cross a kink at `FD_EPS`.
pub const FD_SMALL_EPS: f64 = 1e-5;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Loss `sum(r * y)` with fixed random `r`, so every output contributes.
fn probe(y: &[f64], r: &[f32]) -> f64 {
    y.iter().zip(r).map(|(&a, &b)| a * b as f64).sum()
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    /// Probes that crossed a kink at `FD_EPS` and agreed at `FD_SMALL_EPS`.
    pub rechecked: usize,
    /// Probes that crossed a kink even at `FD_SMALL_EPS`.
    pub skipped: usize,
    pub failures: Vec<String>,
}

impl GradReport {
    fn compare(&mut self, analytic: &[f32], numeric: &[f64], what: &str) {
        if analytic.len() != numeric.len() {
            self.failures.push(format!("{what}: {} analytic vs {} numeric values", analytic.len(), numeric.len()));
            return;
        }
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            self.one(a as f64, n, &format!("{what}[{i}]"));
        }
    }

    fn one(&mut self, a: f64, n: f64, what: &str) {
        let e = relative_error(a, n, FD_FLOOR);
        self.checked += 1;
        self.worst = self.worst.max(e);
        if !(e < FD_TOL) {
            self.failures.push(format!("{what}: analytic {a} numeric {n} rel {e}"));
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.worst = self.worst.max(other.worst);
        self.checked += other.checked;
        self.rechecked += other.rechecked;
        self.skipped += other.skipped;
        self.failures.extend(other.failures);
    }

    /// At most one probe in ten may go unverified.
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0 && self.skipped * 10 < self.checked + self.rechecked
    }
}

pub fn conv_gradients(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &(c, h, w, o, k, stride, pad) in &[(2, 5, 6, 3, 3, 1, 1), (1, 7, 7, 2, 3, 2, 0), (3, 4, 4, 2, 2, 1, 1), (2, 6, 5, 1, 1, 1, 0), (1, 9, 8, 2, 5, 2, 2)] {
        let x = rand_vec(&mut rng, c * h * w);
        let wt = rand_vec(&mut rng, o * c * k * k);
        let b = rand_vec(&mut rng, o);
        let xt = Tensor::new(vec![c, h, w], x.clone()).unwrap();
        let wtt = Tensor::new(vec![o, c, k, k], wt.clone()).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let r = rand_vec(&mut rng, o * oh * ow);
        let (gx, gw, gb) = conv2d_backward(&xt, &wtt, &Tensor::new(vec![o, oh, ow], r.clone()).unwrap(), stride, pad).unwrap();

        let wa = Array::from_f32(&[o, c, k, k], &wt);
        let f_x = |p: &[f64]| probe(&naive_conv2d(&Array::new(vec![c, h, w], p.to_vec()), &wa, &f64s(&b), stride, pad).unwrap().data, &r);
        rep.compare(gx.data(), &fd_gradient(f_x, &f64s(&x), FD_EPS), "conv dx");
        let xa = Array::from_f32(&[c, h, w], &x);
        let f_w = |p: &[f64]| probe(&naive_conv2d(&xa, &Array::new(vec![o, c, k, k], p.to_vec()), &f64s(&b), stride, pad).unwrap().data, &r);
        rep.compare(gw.data(), &fd_gradient(f_w, &f64s(&wt), FD_EPS), "conv dw");
        let f_b = |p: &[f64]| probe(&naive_conv2d(&xa, &wa, p, stride, pad).unwrap().data, &r);
        rep.compare(gb.data(), &fd_gradient(f_b, &f64s(&b), FD_EPS), "conv db");
    }
    rep
}

pub fn fc_gradients(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (inp, out) in [(13, 5), (1, 1), (40, 16)] {
        let x = rand_vec(&mut rng, inp);
        let w = rand_vec(&mut rng, out * inp);
        let b = rand_vec(&mut rng, out);
        let r = rand_vec(&mut rng, out);
        let (gx, gw, gb) = fc_backward(
            &Tensor::new(vec![inp], x.clone()).unwrap(),
            &Tensor::new(vec![out, inp], w.clone()).unwrap(),
            &Tensor::new(vec![out], r.clone()).unwrap(),
        )
        .unwrap();
        let wa = Array::from_f32(&[out, inp], &w);
        rep.compare(gx.data(), &fd_gradient(|p| probe(&naive_fc(p, &wa, &f64s(&b)).unwrap(), &r), &f64s(&x), FD_EPS), "fc dx");
        let f_w = |p: &[f64]| probe(&naive_fc(&f64s(&x), &Array::new(vec![out, inp], p.to_vec()), &f64s(&b)).unwrap(), &r);
        rep.compare(gw.data(), &fd_gradient(f_w, &f64s(&w), FD_EPS), "fc dw");
        rep.compare(gb.data(), &fd_gradient(|p| probe(&naive_fc(&f64s(&x), &wa, p).unwrap(), &r), &f64s(&b), FD_EPS), "fc db");
    }
    rep
}

/// Inputs are kept at least 0.05 from zero and pairwise distinct, so a
/// +-1e-3 probe never crosses a ReLU kink or reorders a pooling window.
pub fn relu_pool_gradients(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f32> = (0..2 * 6 * 6)
        .map(|i| {
            let v: f32 = rng.gen_range(0.05..1.0);
            let jitter = i as f32 * 0.011;
            if rng.gen_bool(0.5) {
                v + jitter
            } else {
                -v - jitter
            }
        })
        .collect();
    let xt = Tensor::new(vec![2, 6, 6], x.clone()).unwrap();
    let r = rand_vec(&mut rng, 72);
    let g = relu_backward(&xt, &Tensor::new(vec![2, 6, 6], r.clone()).unwrap()).unwrap();
    let f = |p: &[f64]| probe(&naive_relu(&Array::new(vec![2, 6, 6], p.to_vec())).data, &r);
    rep.compare(g.data(), &fd_gradient(f, &f64s(&x), FD_EPS), "relu dx");

    for (k, stride) in [(2, 2), (3, 1), (3, 2)] {
        let oh = (6 - k) / stride + 1;
        let r = rand_vec(&mut rng, 2 * oh * oh);
        let g = maxpool_backward(&xt, &Tensor::new(vec![2, oh, oh], r.clone()).unwrap(), k, stride).unwrap();
        let f = |p: &[f64]| probe(&naive_maxpool(&Array::new(vec![2, 6, 6], p.to_vec()), k, stride).unwrap().data, &r);
        rep.compare(g.data(), &fd_gradient(f, &f64s(&x), FD_EPS), "maxpool dx");
    }
    rep
}

pub fn xent_gradients(seed: u64) -> GradReport {
    let mut rep = GradReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for target in 0..6 {
        let z: Vec<f32> = rand_vec(&mut rng, 6).iter().map(|v| v * 4.0).collect();
        let (loss, g) = softmax_xent(&z, target).unwrap();
        let want = naive_xent(&f64s(&z), target);
        if (loss as f64 - want).abs() > 1e-5 {
            rep.failures.push(format!("xent loss {loss} vs oracle {want}"));
        }
        rep.compare(&g, &fd_gradient(|p| naive_xent(p, target), &f64s(&z), FD_EPS), "xent dz");
    }
    rep
}

pub fn layer_gradients() -> GradReport {
    let mut rep = conv_gradients(11);
    rep.merge(fc_gradients(12));
    rep.merge(relu_pool_gradients(13));
    rep.merge(xent_gradients(14));
    rep
}

/// Checks `probes` evenly strided entries of every weight and bias tensor of
/// the full network on input `x`, against the f64 oracle.
pub fn network_gradients(net: &Network, x: &[f32], target: usize, probes: usize) -> GradReport {
    let mut rep = GradReport::default();
    let mut grads = Gradients::zeros_like(net);
    net.accumulate_sample(x, target, &mut grads).unwrap();
    let base = OracleNet::from_network(net);
    let xd = f64s(x);
    for (li, layer) in net.layers().iter().enumerate() {
        if !layer.spec.is_parametric() {
            continue;
        }
        for is_bias in [false, true] {
            let (analytic, values) = if is_bias { (&grads.bias[li], &base.biases[li]) } else { (&grads.weight[li], &base.weights[li]) };
            let stride = (values.len() / probes).max(1);
            for idx in (0..values.len()).step_by(stride) {
                let with = |v: f64| {
                    let mut o = base.clone();
                    if is_bias {
                        o.biases[li][idx] = v;
                    } else {
                        o.weights[li][idx] = v;
                    }
                    o
                };
                let w0 = values[idx];
                let central = |eps: f64| {
                    let (lo, hi) = (with(w0 - eps), with(w0 + eps));
                    let n = (hi.loss(&xd, target).unwrap() - lo.loss(&xd, target).unwrap()) / (2.0 * eps);
                    (n, lo.kink_signature(&xd).unwrap() != hi.kink_signature(&xd).unwrap())
                };
                let a = analytic[idx] as f64;
                let what = format!("layer {li} {} [{idx}]", if is_bias { "bias" } else { "weight" });
                let (n, crossed) = central(FD_EPS);
                if relative_error(a, n, FD_FLOOR) < FD_TOL || !crossed {
                    rep.one(a, n, &what);
                    continue;
                }
                // The probe crossed a ReLU kink or reordered a pooling
                // window, so the loss is not smooth over it. Recheck on a
                // step small enough to stay on one linear piece.
                match central(FD_SMALL_EPS) {
                    (n, false) => {
                        rep.rechecked += 1;
                        if relative_error(a, n, FD_FLOOR) >= FD_TOL {
                            rep.failures.push(format!("{what}: analytic {a} numeric {n} at small step"));
                        }
                    }
                    (_, true) => rep.skipped += 1,
                }
            }
        }
    }
    rep
}

/// The default architecture at a reduced 8x8 input, with a random input.
pub fn small_network_gradients() -> GradReport {
    let net = Network::supernet_s([1, 8, 8], 6, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_vec(&mut rng, 64);
    network_gradients(&net, &x, 4, 24)
}

/// The default architecture at the desk canvas size, on a real composed
/// canvas with a two-character prefix.
pub fn desk_network_gradients(probes: usize) -> GradReport {
    let cfg = ExperimentConfig::desk(21);
    let net = Network::by_arch(&cfg.arch, [1, 96, 96], 16, 21).unwrap();
    let scene = superocr::taskgen::gen_scene(&cfg.task(Preset::Clean), 3).unwrap();
    let dc = cfg.decode_config().unwrap();
    let canvas = compose(&scene.image, &scene.label[..2], &dc.layout, &dc.font).unwrap();
    let x: Vec<f32> = oracle_input(&canvas).iter().map(|&v| v as f32).collect();
    let target = dc.alphabet.class_of(scene.label[2]).unwrap();
    network_gradients(&net, &x, target, probes)
}

#[derive(Clone, Debug, Default)]
pub struct EquivReport {
    pub cases: usize,
    pub comparisons: usize,
    pub worst_abs: f64,
    /// `|got - want| / max(1, m)` where `m` is the sum of the absolute
    /// values of the terms accumulated into the element. Rounding error of
    /// an f32 sum is proportional to `m`, not to the result.
    pub worst_scaled: f64,
    pub worst_at: String,
    pub failures: Vec<String>,
}

impl EquivReport {
    fn compare(&mut self, got: &[f32], want: &[f64], mag: &[f64], what: &str) {
        if got.len() != want.len() || mag.len() != want.len() {
            self.failures.push(format!("{what}: length {} vs {}", got.len(), want.len()));
            return;
        }
        for ((&g, &w), &m) in got.iter().zip(want).zip(mag) {
            let e = (g as f64 - w).abs();
            self.comparisons += 1;
            self.worst_abs = self.worst_abs.max(e);
            let scaled = e / m.max(1.0);
            if scaled > self.worst_scaled {
                self.worst_scaled = scaled;
                self.worst_at = format!("{what}: {g} vs {w} (magnitude {m:.3})");
            }
        }
    }
}

fn abs64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x.abs() as f64).collect()
}

/// Production forward passes against the naive-loop oracle on `cases`
/// random shapes. Each case covers conv, ReLU, max-pool, FC and a random
/// small network end to end.
pub fn forward_equivalence(cases: usize, seed: u64) -> EquivReport {
    let mut rep = EquivReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let c = rng.gen_range(1..=4);
        let h = rng.gen_range(3..=12);
        let w = rng.gen_range(3..=12);
        let o = rng.gen_range(1..=6);
        let pad = rng.gen_range(0..=2);
        let k = rng.gen_range(1..=h.min(w) + 2 * pad).min(5);
        let stride = rng.gen_range(1..=3);
        let x = rand_vec(&mut rng, c * h * w);
        let wt = rand_vec(&mut rng, o * c * k * k);
        let b = rand_vec(&mut rng, o);
        let xt = Tensor::new(vec![c, h, w], x.clone()).unwrap();
        let xa = Array::from_f32(&[c, h, w], &x);
        let got = conv2d_forward(&xt, &Tensor::new(vec![o, c, k, k], wt.clone()).unwrap(), &Tensor::new(vec![o], b.clone()).unwrap(), stride, pad).unwrap();
        let want = naive_conv2d(&xa, &Array::from_f32(&[o, c, k, k], &wt), &f64s(&b), stride, pad).unwrap();
        let mag = naive_conv2d(&Array::new(vec![c, h, w], abs64(&x)), &Array::new(vec![o, c, k, k], abs64(&wt)), &abs64(&b), stride, pad).unwrap();
        if got.shape() != want.shape.as_slice() {
            rep.failures.push(format!("case {case}: conv shape {:?} vs {:?}", got.shape(), want.shape));
        }
        rep.compare(got.data(), &want.data, &mag.data, &format!("case {case} conv"));

        let want = naive_relu(&xa).data;
        rep.compare(relu_forward(&xt).data(), &want, &want, &format!("case {case} relu"));

        let pk = rng.gen_range(1..=h.min(w).min(3));
        let ps = rng.gen_range(1..=pk);
        let got = maxpool_forward(&xt, pk, ps).unwrap();
        let want = naive_maxpool(&xa, pk, ps).unwrap();
        if got.shape() != want.shape.as_slice() {
            rep.failures.push(format!("case {case}: pool shape {:?} vs {:?}", got.shape(), want.shape));
        }
        rep.compare(got.data(), &want.data, &want.data, &format!("case {case} pool"));

        let n_in = c * h * w;
        let fo = rng.gen_range(1..=20);
        let fw = rand_vec(&mut rng, fo * n_in);
        let fb = rand_vec(&mut rng, fo);
        let got = fc_forward(&Tensor::new(vec![n_in], x.clone()).unwrap(), &Tensor::new(vec![fo, n_in], fw.clone()).unwrap(), &Tensor::new(vec![fo], fb.clone()).unwrap()).unwrap();
        let want = naive_fc(&f64s(&x), &Array::from_f32(&[fo, n_in], &fw), &f64s(&fb)).unwrap();
        let mag = naive_fc(&abs64(&x), &Array::new(vec![fo, n_in], abs64(&fw)), &abs64(&fb)).unwrap();
        rep.compare(got.data(), &want, &mag, &format!("case {case} fc"));

        let specs = [
            LayerSpec::Conv2d { out_ch: o, k: k.min(3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::Fc { out_dim: 7 },
            LayerSpec::Relu,
            LayerSpec::Fc { out_dim: fo },
        ];
        let mut net = Network::new([c, h.max(4), w.max(4)], &specs, fo).unwrap();
        net.init_he(seed ^ case as u64);
        for l in net.layers_mut() {
            for v in l.bias.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let [nc, nh, nw] = net.input_shape();
        let nx = rand_vec(&mut rng, nc * nh * nw);
        let got = net.forward_range(nx.clone(), 0, net.layers().len()).unwrap();
        let oracle = OracleNet::from_network(&net);
        let want = oracle.logits(&f64s(&nx)).unwrap();
        // Same network with every parameter and input replaced by its
        // absolute value bounds the magnitude of every partial sum.
        let mut abs_net = oracle.clone();
        abs_net.weights.iter_mut().chain(abs_net.biases.iter_mut()).flatten().for_each(|v| *v = v.abs());
        let mag = abs_net.logits(&abs64(&nx)).unwrap();
        rep.compare(&got, &want, &mag, &format!("case {case} network"));
        rep.cases += 1;
    }
    rep
}

fn layout_and_alphabet(i: usize) -> (LayoutSpec, Alphabet) {
    match i % 3 {
        0 => (LayoutSpec::desk(), Alphabet::desk16()),
        1 => (LayoutSpec::ccpd(), Alphabet::plate()),
        _ => (LayoutSpec::wnr(), Alphabet::meter()),
    }
}

/// Number of random (scene, prefix, symbol) triples for which drawing the
/// symbol into the next slot of `compose(scene, prefix)` differs from
/// `compose(scene, prefix + [symbol])`.
pub fn compose_identity(triples: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fonts: Vec<(LayoutSpec, Alphabet, GlyphFont)> = (0..3)
        .map(|i| {
            let (l, a) = layout_and_alphabet(i);
            let f = GlyphFont::builtin(&a);
            (l, a, f)
        })
        .collect();
    let mut mismatches = 0;
    for t in 0..triples {
        let (layout, alphabet, font) = &fonts[t % 3];
        let layout = layout.clone().with_channels(if rng.gen_bool(0.3) { 3 } else { 1 }).unwrap();
        let (w, h) = (rng.gen_range(4..=160), rng.gen_range(4..=120));
        let px: Vec<u8> = (0..w * h * layout.channels()).map(|_| rng.gen()).collect();
        let scene = Image::from_pixels(w, h, layout.channels(), px).unwrap();
        let plen = rng.gen_range(0..layout.slot_count());
        let syms = alphabet.symbols();
        let prefix: Vec<char> = (0..plen).map(|_| syms[rng.gen_range(0..syms.len())]).collect();
        let s = syms[rng.gen_range(0..syms.len())];
        let mut incremental = compose(&scene, &prefix, &layout, font).unwrap();
        layout.draw_slot(&mut incremental, font, plen, s).unwrap();
        let mut longer = prefix.clone();
        longer.push(s);
        if incremental != compose(&scene, &longer, &layout, font).unwrap() {
            mismatches += 1;
        }
    }
    mismatches
}

/// Scenes decoded correctly by the ground-truth classifier, which also
/// verifies every canvas it is shown. Cycles through every preset.
pub fn loop_closure(n: usize, seed: u64) -> (usize, usize) {
    let cfg = ExperimentConfig::desk(seed);
    let dc = cfg.decode_config().unwrap();
    let per = n.div_ceil(Preset::ALL.len());
    let mut recovered = 0;
    let mut total = 0;
    for p in Preset::ALL {
        let take = per.min(n - total);
        if take == 0 {
            break;
        }
        let scenes = gen_split(&cfg.task(p), take, Split::Test.offset()).unwrap();
        let mut oracle = OracleClassifier::new(dc.alphabet.clone(), &scenes).checking(&scenes, &dc.layout, &dc.font);
        for s in &scenes {
            if decode(&s.image, s.scene_id, &mut oracle, &dc).map(|p| p == s.label).unwrap_or(false) {
                recovered += 1;
            }
        }
        total += scenes.len();
    }
    (recovered, total)
}

/// Hand-counted fixtures: predictions, labels, LCR and AR to two decimals.
pub const METRIC_FIXTURES: [(&[&str], &[&str], &str, &str); 10] = [
    (&["ABCDE"], &["ABCDE"], "100.00", "100.00"),
    (&["ABCDX"], &["ABCDE"], "0.00", "80.00"),
    (&["AAAAA", "BBBBB", "CCCCX"], &["AAAAA", "BBBBB", "CCCCC"], "66.67", "93.33"),
    (&["ABCDE", "ABCDE", "ABCDE", "XXXXX"], &["ABCDE", "ABCDE", "ABCDE", "ABCDE"], "75.00", "75.00"),
    (
        &["12345", "12345", "12345", "12345", "12345", "12345", "12300"],
        &["12345", "12345", "12345", "12345", "12345", "12345", "12345"],
        "85.71",
        "94.29",
    ),
    (&["A", "B", "C"], &["A", "B", "D"], "66.67", "66.67"),
    (
        &["X1111", "2X222", "33X33", "444X4", "5555X", "X6666", "7X777", "88X88"],
        &["11111", "22222", "33333", "44444", "55555", "66666", "77777", "88888"],
        "0.00",
        "80.00",
    ),
    (
        &["AB12345", "AB12345", "AB12345", "AB12345", "AB12345", "XY02345"],
        &["AB12345", "AB12345", "AB12345", "AB12345", "AB12345", "AB12345"],
        "83.33",
        "92.86",
    ),
    (
        &["00000", "00000", "00000", "00000", "00000", "00000", "00000", "00000", "99999"],
        &["00000", "00000", "00000", "00000", "00000", "00000", "00000", "00000", "00000"],
        "88.89",
        "88.89",
    ),
    (&["ABCDE", "ABCDX", "XBCDE"], &["ABCDE", "ABCDE", "ABCDE"], "33.33", "86.67"),
];

fn chars(v: &[&str]) -> Vec<Vec<char>> {
    v.iter().map(|s| s.chars().collect()).collect()
}

/// Descriptions of fixtures whose computed metrics differ from the hand count.
pub fn metric_fixture_failures() -> Vec<String> {
    let mut out = Vec::new();
    for (i, (p, l, lcr_want, ar_want)) in METRIC_FIXTURES.iter().enumerate() {
        let (p, l) = (chars(p), chars(l));
        let c = count(&p, &l).unwrap();
        let (lcr, ar) = lcr_ar(&p, &l).unwrap();
        let seq = sequence_accuracy(&p, &l).unwrap();
        let got = [
            format_hundredths(c.lcr_hundredths()),
            format_hundredths(c.ar_hundredths()),
            format!("{lcr:.2}"),
            format!("{ar:.2}"),
            format!("{seq:.2}"),
        ];
        let want = [*lcr_want, *ar_want, *lcr_want, *ar_want, *lcr_want];
        if got.iter().zip(want).any(|(g, w)| g != w) {
            out.push(format!("fixture {i}: got {got:?}, want {want:?}"));
        }
        if let Some(e) = invariant_violation(&c) {
            out.push(format!("fixture {i}: {e}"));
        }
    }
    out
}

/// LCR must equal sequence accuracy (it is computed from the same counts)
/// and AR can never fall below LCR.
pub fn invariant_violation(c: &Counts) -> Option<String> {
    let seq = if c.images == 0 { 0.0 } else { 100.0 * c.correct_images as f64 / c.images as f64 };
    if c.lcr() != seq {
        return Some(format!("LCR {} differs from sequence accuracy {seq}", c.lcr()));
    }
    if c.ar_hundredths() < c.lcr_hundredths() || c.ar() < c.lcr() {
        return Some(format!("AR {} below LCR {}", c.ar(), c.lcr()));
    }
    None
}

pub fn result_invariant_violations(r: &EvalResult) -> Vec<String> {
    std::iter::once(("overall", &r.overall))
        .chain(r.subsets.iter().map(|(n, c)| (n.as_str(), c)))
        .filter_map(|(n, c)| invariant_violation(c).map(|e| format!("{n}: {e}")))
        .collect()
}

/// Reading of each meter class as a single digit (non-end positions) and
/// as the final digit (end position).
pub const METER_TABLE: [(usize, &str, &str); 20] = [
    (0, "0", "0"),
    (1, "1", "1"),
    (2, "2", "2"),
    (3, "3", "3"),
    (4, "4", "4"),
    (5, "5", "5"),
    (6, "6", "6"),
    (7, "7", "7"),
    (8, "8", "8"),
    (9, "9", "9"),
    (10, "0", "0.5"),
    (11, "1", "1.5"),
    (12, "2", "2.5"),
    (13, "3", "3.5"),
    (14, "4", "4.5"),
    (15, "5", "5.5"),
    (16, "6", "6.5"),
    (17, "7", "7.5"),
    (18, "8", "8.5"),
    (19, "9", "9.5"),
];

pub fn meter_failures() -> Vec<String> {
    let mut out = Vec::new();
    let mut check = |classes: &[usize], want: String| match meter_reading(classes) {
        Ok(got) if got == want => {}
        other => out.push(format!("{classes:?}: got {other:?}, want {want}")),
    };
    check(&[0, 1, 8, 1, 16], "01816.5".into());
    for &(c, mid, end) in &METER_TABLE {
        for pos in 0..4 {
            let mut cls = [2usize; 5];
            cls[pos] = c;
            let mut want: Vec<String> = vec!["2".into(); 4];
            want[pos] = mid.into();
            check(&cls, format!("{}2", want.concat()));
        }
        check(&[7, 7, 7, 7, c], format!("7777{end}"));
    }
    for bad in [vec![20, 0, 0, 0, 0], vec![0, 0, 0, 0], vec![0; 6]] {
        if meter_reading(&bad).is_ok() {
            out.push(format!("{bad:?} accepted"));
        }
    }
    out
}

/// Small but complete configuration for fast end-to-end runs.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(seed);
    cfg.train_scenes = 24;
    cfg.val_scenes = 4;
    cfg.test_scenes = 6;
    cfg.optim.max_iters = 12;
    cfg.optim.val_every = 6;
    cfg.optim.log_every = 3;
    cfg.optim.base_lr = 1e-3;
    cfg
}

/// Every artifact of one small run, as bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunArtifacts {
    pub dataset_hash: String,
    pub samples: Vec<u8>,
    pub checkpoint: Vec<u8>,
    pub curves: String,
    pub metrics: String,
}

pub fn run_pipeline(cfg: &ExperimentConfig, dir: &std::path::Path) -> RunArtifacts {
    let dc: DecodeConfig = cfg.decode_config().unwrap();
    let train = gen_split(&cfg.task(Preset::Clean), cfg.train_scenes, Split::Train.offset()).unwrap();
    let dataset_hash = write_dataset(dir, &train).unwrap();
    let archive = build_training_set(&train, &dc.layout, &dc.font, &dc.alphabet).unwrap();
    let val_scenes = gen_split(&cfg.task(Preset::Clean), cfg.val_scenes, Split::Val.offset()).unwrap();
    let val = build_training_set(&val_scenes, &dc.layout, &dc.font, &dc.alphabet).unwrap();
    let out = Trainer::new(cfg.network().unwrap(), cfg.optim.clone(), &archive).unwrap().run(Some(&val), |_| {}).unwrap();
    let subsets: Vec<(String, Vec<_>)> = cfg
        .subsets
        .iter()
        .map(|s| (s.clone(), gen_split(&cfg.task(Preset::parse(s).unwrap()), cfg.test_scenes, Split::Test.offset()).unwrap()))
        .collect();
    let best = out.best.clone();
    let (result, _) = evaluate_subsets(|| Ok(best.clone()), &subsets, &dc).unwrap();
    RunArtifacts {
        dataset_hash,
        samples: archive.to_bytes().unwrap(),
        checkpoint: checkpoint_to_bytes(&out.best).unwrap(),
        curves: out.curve.to_csv(),
        metrics: result.metrics_csv(),
    }
}

/// Names of the artifacts that differ between two default runs and between
/// a one-thread and a four-thread run.
pub fn determinism_failures(seed: u64) -> Vec<String> {
    let cfg = tiny_config(seed);
    let tmp = tempfile::tempdir().unwrap();
    let run = |threads: usize, name: &str| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let dir = tmp.path().join(name);
        pool.install(|| run_pipeline(&cfg, &dir))
    };
    let a = run(4, "a");
    let b = run(4, "b");
    let serial = run(1, "serial");
    let mut out = Vec::new();
    for (label, other) in [("repeat", &b), ("serial", &serial)] {
        let pairs = [
            ("dataset archive", a.dataset_hash.as_bytes(), other.dataset_hash.as_bytes()),
            ("sample archive", &a.samples[..], &other.samples[..]),
            ("checkpoint", &a.checkpoint[..], &other.checkpoint[..]),
            ("curves", a.curves.as_bytes(), other.curves.as_bytes()),
            ("metrics", a.metrics.as_bytes(), other.metrics.as_bytes()),
        ];
        for (what, x, y) in pairs {
            if x != y {
                out.push(format!("{what} differs ({label})"));
            }
        }
    }
    out
}
