//! Dense f32 kernels behind the layers.
//!
//! Every reduction runs in a fixed order that does not depend on the CPU
//! features used, so the AVX paths are bit-identical to the portable path.
//! Products and sums are never fused.

const LANES: usize = 16;
const COL_TILE: usize = 32;
const ROW_BLOCK: usize = 4;

macro_rules! dispatch {
    ($generic:ident, $avx2:ident, $avx512:ident, ($($arg:ident : $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx2($($arg: $ty),*) {
            $generic($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx512f")]
        unsafe fn $avx512($($arg: $ty),*) {
            $generic($($arg),*)
        }
    };
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Level {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

fn level() -> Level {
    use std::sync::OnceLock;
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            if std::env::var_os("SUPEROCR_PORTABLE_KERNELS").is_none() {
                if is_x86_feature_detected!("avx512f") {
                    return Level::Avx512;
                }
                if is_x86_feature_detected!("avx2") {
                    return Level::Avx2;
                }
            }
        }
        Level::Portable
    })
}

/// `c[m][n] += sum_k a[m][k] * b[k][n]`, accumulating over `k` in order.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: feature presence checked in `level`.
        Level::Avx512 => unsafe { gemm_nn_avx512(m, k, n, a, b, c) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Level::Avx2 => unsafe { gemm_nn_avx2(m, k, n, a, b, c) },
        Level::Portable => gemm_nn_generic(m, k, n, a, b, c),
    }
}

dispatch!(gemm_nn_generic, gemm_nn_avx2, gemm_nn_avx512, (m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]));

#[inline(always)]
fn gemm_nn_generic(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    let mut n0 = 0;
    while n0 < n {
        let nw = COL_TILE.min(n - n0);
        let mut m0 = 0;
        while m0 < m {
            let mh = ROW_BLOCK.min(m - m0);
            if mh == ROW_BLOCK && nw == COL_TILE {
                let mut acc = [[0f32; COL_TILE]; ROW_BLOCK];
                for (r, row) in acc.iter_mut().enumerate() {
                    row.copy_from_slice(&c[(m0 + r) * n + n0..][..COL_TILE]);
                }
                let a0 = &a[m0 * k..][..k];
                let a1 = &a[(m0 + 1) * k..][..k];
                let a2 = &a[(m0 + 2) * k..][..k];
                let a3 = &a[(m0 + 3) * k..][..k];
                for kk in 0..k {
                    let brow: &[f32; COL_TILE] = b[kk * n + n0..][..COL_TILE].try_into().unwrap();
                    let (w0, w1, w2, w3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                    for j in 0..COL_TILE {
                        acc[0][j] += w0 * brow[j];
                        acc[1][j] += w1 * brow[j];
                        acc[2][j] += w2 * brow[j];
                        acc[3][j] += w3 * brow[j];
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(m0 + r) * n + n0..][..COL_TILE].copy_from_slice(row);
                }
            } else {
                for r in m0..m0 + mh {
                    let crow = &mut c[r * n + n0..][..nw];
                    for kk in 0..k {
                        let w = a[r * k + kk];
                        let brow = &b[kk * n + n0..][..nw];
                        for j in 0..nw {
                            crow[j] += w * brow[j];
                        }
                    }
                }
            }
            m0 += mh;
        }
        n0 += nw;
    }
}

/// `c[m][k] += sum_n a[m][n] * b[k][n]` (row-by-row dot products).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: feature presence checked in `level`.
        Level::Avx512 => unsafe { gemm_nt_avx512(m, k, n, a, b, c) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Level::Avx2 => unsafe { gemm_nt_avx2(m, k, n, a, b, c) },
        Level::Portable => gemm_nt_generic(m, k, n, a, b, c),
    }
}

dispatch!(gemm_nt_generic, gemm_nt_avx2, gemm_nt_avx512, (m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]));

#[inline(always)]
fn gemm_nt_generic(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    const KB: usize = 4;
    let full = n / LANES * LANES;
    let mut r = 0;
    while r < m {
        let rh = ROW_BLOCK.min(m - r);
        let mut kk = 0;
        while kk < k {
            let kh = KB.min(k - kk);
            if rh == ROW_BLOCK && kh == KB {
                let rows: [&[f32]; ROW_BLOCK] = std::array::from_fn(|i| &a[(r + i) * n..][..n]);
                let cols: [&[f32]; KB] = std::array::from_fn(|i| &b[(kk + i) * n..][..n]);
                let mut acc = [[0f32; LANES]; ROW_BLOCK * KB];
                let mut j = 0;
                while j < full {
                    let b0 = lanes(cols[0], j);
                    let b1 = lanes(cols[1], j);
                    let b2 = lanes(cols[2], j);
                    let b3 = lanes(cols[3], j);
                    for (i, row) in rows.iter().enumerate() {
                        let ac = lanes(row, j);
                        madd(&mut acc[i * KB], ac, b0);
                        madd(&mut acc[i * KB + 1], ac, b1);
                        madd(&mut acc[i * KB + 2], ac, b2);
                        madd(&mut acc[i * KB + 3], ac, b3);
                    }
                    j += LANES;
                }
                for (i, row) in rows.iter().enumerate() {
                    for (q, col) in cols.iter().enumerate() {
                        let mut s = reduce_lanes(&acc[i * KB + q]);
                        for t in full..n {
                            s += row[t] * col[t];
                        }
                        c[(r + i) * k + kk + q] += s;
                    }
                }
            } else {
                for i in r..r + rh {
                    for q in kk..kk + kh {
                        c[i * k + q] += dot_generic(&a[i * n..][..n], &b[q * n..][..n]);
                    }
                }
            }
            kk += kh;
        }
        r += rh;
    }
}

#[inline(always)]
fn lanes(v: &[f32], j: usize) -> &[f32; LANES] {
    v[j..j + LANES].try_into().unwrap()
}

#[inline(always)]
fn madd(acc: &mut [f32; LANES], a: &[f32; LANES], b: &[f32; LANES]) {
    for l in 0..LANES {
        acc[l] += a[l] * b[l];
    }
}

#[inline(always)]
fn reduce_lanes(acc: &[f32; LANES]) -> f32 {
    let mut v = *acc;
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            v[l] += v[l + width];
        }
        width /= 2;
    }
    v[0]
}

#[inline(always)]
fn dot_generic(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let full = n / LANES * LANES;
    let mut acc = [0f32; LANES];
    let mut j = 0;
    while j < full {
        madd(&mut acc, lanes(a, j), lanes(b, j));
        j += LANES;
    }
    let mut s = reduce_lanes(&acc);
    for t in full..n {
        s += a[t] * b[t];
    }
    s
}

/// Lane-split dot product with a fixed reduction tree.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: feature presence checked in `level`.
        Level::Avx512 => unsafe { dot_avx512(a, b) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Level::Avx2 => unsafe { dot_avx2(a, b) },
        Level::Portable => dot_generic(a, b),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_generic(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn dot_avx512(a: &[f32], b: &[f32]) -> f32 {
    dot_generic(a, b)
}

/// Lane-split sum with the same reduction tree as [`dot`].
pub fn sum(a: &[f32]) -> f32 {
    let full = a.len() / LANES * LANES;
    let mut acc = [0f32; LANES];
    for chunk in a[..full].chunks_exact(LANES) {
        for l in 0..LANES {
            acc[l] += chunk[l];
        }
    }
    let mut s = reduce_lanes(&acc);
    for &v in &a[full..] {
        s += v;
    }
    s
}

/// `y += alpha * x`
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: feature presence checked in `level`.
        Level::Avx512 => unsafe { axpy_avx512(alpha, x, y) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Level::Avx2 => unsafe { axpy_avx2(alpha, x, y) },
        Level::Portable => axpy_generic(alpha, x, y),
    }
}

dispatch!(axpy_generic, axpy_avx2, axpy_avx512, (alpha: f32, x: &[f32], y: &mut [f32]));

#[inline(always)]
fn axpy_generic(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Geometry of one 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.k >= 1 && self.stride >= 1 && self.in_h + 2 * self.pad >= self.k && self.in_w + 2 * self.pad >= self.k
    }
}

/// Unfold `x` (C x H x W) into rows ordered by (c, u, v), one column per
/// output position.
pub fn im2col(x: &[f32], win: Window, col: &mut Vec<f32>) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let p = oh * ow;
    let rows = win.channels * win.k * win.k;
    col.clear();
    col.resize(rows * p, 0.0);
    for c in 0..win.channels {
        let plane = &x[c * win.in_h * win.in_w..][..win.in_h * win.in_w];
        for u in 0..win.k {
            for v in 0..win.k {
                let row = &mut col[((c * win.k + u) * win.k + v) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + u) as isize - win.pad as isize;
                    let dst = &mut row[oy * ow..][..ow];
                    if iy < 0 || iy >= win.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * win.in_w..][..win.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * win.stride + v) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < win.in_w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`] into `dx`.
pub fn col2im(dcol: &[f32], win: Window, dx: &mut [f32]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let p = oh * ow;
    for c in 0..win.channels {
        let plane = &mut dx[c * win.in_h * win.in_w..][..win.in_h * win.in_w];
        for u in 0..win.k {
            for v in 0..win.k {
                let row = &dcol[((c * win.k + u) * win.k + v) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + u) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * win.in_w..][..win.in_w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride + v) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < win.in_w {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling; `argmax` receives the flat input index of each winner
/// (first index on ties). Padding is not supported.
pub fn maxpool_forward(x: &[f32], win: Window, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    for c in 0..win.channels {
        let base = c * win.in_h * win.in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + oy * win.stride * win.in_w + ox * win.stride;
                for u in 0..win.k {
                    for v in 0..win.k {
                        let i = base + (oy * win.stride + u) * win.in_w + ox * win.stride + v;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_i as u32;
            }
        }
    }
}

/// `c[m][n] += sum_k a[m][k] * b[k][n]` over int8 inputs with int32
/// accumulation. Integer sums are exact, so order does not matter.
pub fn gemm_i8(m: usize, k: usize, n: usize, a: &[i8], b: &[i8], c: &mut [i32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    match level() {
        #[cfg(target_arch = "x86_64")]
        // SAFETY: feature presence checked in `level`.
        Level::Avx512 => unsafe { gemm_i8_avx512(m, k, n, a, b, c) },
        #[cfg(target_arch = "x86_64")]
        // SAFETY: as above.
        Level::Avx2 => unsafe { gemm_i8_avx2(m, k, n, a, b, c) },
        Level::Portable => gemm_i8_generic(m, k, n, a, b, c),
    }
}

dispatch!(gemm_i8_generic, gemm_i8_avx2, gemm_i8_avx512, (m: usize, k: usize, n: usize, a: &[i8], b: &[i8], c: &mut [i32]));

#[inline(always)]
fn gemm_i8_generic(m: usize, k: usize, n: usize, a: &[i8], b: &[i8], c: &mut [i32]) {
    let mut n0 = 0;
    while n0 < n {
        let nw = (4 * COL_TILE).min(n - n0);
        for r in 0..m {
            let crow = &mut c[r * n + n0..][..nw];
            for kk in 0..k {
                let w = a[r * k + kk] as i32;
                if w == 0 {
                    continue;
                }
                let brow = &b[kk * n + n0..][..nw];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += w * bv as i32;
                }
            }
        }
        n0 += nw;
    }
}

/// [`im2col`] over int8 planes; padding reads as zero.
pub fn im2col_i8(x: &[i8], win: Window, col: &mut Vec<i8>) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let p = oh * ow;
    col.clear();
    col.resize(win.channels * win.k * win.k * p, 0);
    for c in 0..win.channels {
        let plane = &x[c * win.in_h * win.in_w..][..win.in_h * win.in_w];
        for u in 0..win.k {
            for v in 0..win.k {
                let row = &mut col[((c * win.k + u) * win.k + v) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * win.stride + u) as isize - win.pad as isize;
                    if iy < 0 || iy >= win.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * win.in_w..][..win.in_w];
                    for (ox, d) in row[oy * ow..][..ow].iter_mut().enumerate() {
                        let ix = (ox * win.stride + v) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < win.in_w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        for i in 0..m {
            for j in 0..n {
                let mut s = c[i * n + j];
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                c[i * n + j] = s;
            }
        }
    }

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                (s >> 8) as f32 / (1u32 << 24) as f32 - 0.5
            })
            .collect()
    }

    #[test]
    fn gemm_nn_matches_sequential_order_exactly() {
        for &(m, k, n) in &[(1, 1, 1), (4, 9, 32), (5, 7, 70), (16, 9, 96), (9, 33, 65)] {
            let a = pseudo(m * k, 1);
            let b = pseudo(k * n, 2);
            let init = pseudo(m * n, 3);
            let mut c1 = init.clone();
            let mut c2 = init.clone();
            gemm_nn(m, k, n, &a, &b, &mut c1);
            naive_nn(m, k, n, &a, &b, &mut c2);
            assert_eq!(c1, c2, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn dispatched_paths_agree_with_portable() {
        let (m, k, n) = (8, 19, 77);
        let a = pseudo(m * k, 4);
        let b = pseudo(k * n, 5);
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c1);
        gemm_nn_generic(m, k, n, &a, &b, &mut c2);
        assert_eq!(c1, c2);
        let bt = pseudo(k * n, 6);
        let a2 = pseudo(m * n, 7);
        let mut d1 = vec![0.0; m * k];
        let mut d2 = vec![0.0; m * k];
        gemm_nt(m, k, n, &a2, &bt, &mut d1);
        gemm_nt_generic(m, k, n, &a2, &bt, &mut d2);
        assert_eq!(d1, d2);
    }

    #[test]
    fn gemm_nt_close_to_f64() {
        let (m, k, n) = (6, 5, 83);
        let a = pseudo(m * n, 8);
        let b = pseudo(k * n, 9);
        let mut c = vec![0.0; m * k];
        gemm_nt(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..k {
                let s: f64 = (0..n).map(|t| a[i * n + t] as f64 * b[j * n + t] as f64).sum();
                assert!((c[i * k + j] as f64 - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window { channels: 2, in_h: 5, in_w: 6, k: 3, stride: 2, pad: 1 };
        let x = pseudo(2 * 5 * 6, 10);
        let mut col = Vec::new();
        im2col(&x, win, &mut col);
        let y = pseudo(col.len(), 11);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| *a as f64 * *b as f64).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, win, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let win = Window { channels: 1, in_h: 2, in_w: 2, k: 2, stride: 2, pad: 0 };
        let mut out = [0.0];
        let mut idx = [9];
        maxpool_forward(&[1.0, 3.0, 3.0, 2.0], win, &mut out, &mut idx);
        assert_eq!((out[0], idx[0]), (3.0, 1));
    }
    #[test]
    fn gemm_i8_matches_naive() {
        let (m, k, n) = (5, 27, 300);
        let a: Vec<i8> = (0..m * k).map(|i| ((i * 37 + 11) % 255) as u8 as i8).collect();
        let b: Vec<i8> = (0..k * n).map(|i| ((i * 91 + 3) % 255) as u8 as i8).collect();
        let mut c = vec![7i32; m * n];
        gemm_i8(m, k, n, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..n {
                let s: i32 = (0..k).map(|t| a[i * k + t] as i32 * b[t * n + j] as i32).sum();
                assert_eq!(c[i * n + j], s + 7);
            }
        }
    }

    #[test]
    fn im2col_i8_matches_float_path() {
        let win = Window { channels: 2, in_h: 5, in_w: 6, k: 3, stride: 2, pad: 1 };
        let x: Vec<i8> = (0..60).map(|i| (i as i8).wrapping_mul(13)).collect();
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let (mut ci, mut cf) = (Vec::new(), Vec::new());
        im2col_i8(&x, win, &mut ci);
        im2col(&xf, win, &mut cf);
        assert_eq!(ci.iter().map(|&v| v as f32).collect::<Vec<_>>(), cf);
    }
}
