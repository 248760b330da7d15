//! Deterministic 8-bit image primitives and SuperOCR canvas composition.
//!
//! Everything here is integer-exact or uses `f64` with a fixed evaluation
//! order, so identical inputs give identical bytes on every platform.

mod font;
mod layout;
mod pnm;

pub use font::{draw_glyph, GlyphFont, GLYPH_CELL_H, GLYPH_CELL_W};
pub use layout::{compose, LayoutSpec};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm};

use crate::error::{Error, Result};

/// Rectangular 8-bit pixel grid, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("channels", &self.channels)
            .finish_non_exhaustive()
    }
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, fill: u8) -> Result<Self> {
        check_dims(width, height, channels)?;
        Ok(Image {
            width,
            height,
            channels,
            pixels: vec![fill; width * height * channels],
        })
    }

    pub fn from_pixels(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        check_dims(width, height, channels)?;
        if pixels.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "{} pixel bytes for a {width}x{height}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Single-channel image.
    pub fn gray(width: usize, height: usize, fill: u8) -> Result<Self> {
        Self::new(width, height, 1, fill)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Fill every channel of `rect` with `value`.
    pub fn fill_rect(&mut self, rect: Rect, value: u8) -> Result<()> {
        self.check_rect(rect)?;
        let ch = self.channels;
        for y in rect.y..rect.y + rect.h {
            let row = (y * self.width + rect.x) * ch;
            self.pixels[row..row + rect.w * ch].fill(value);
        }
        Ok(())
    }

    /// Copy `src` into this image with its top-left corner at `rect`'s origin.
    pub fn blit(&mut self, src: &Image, x: usize, y: usize) -> Result<()> {
        if src.channels != self.channels {
            return Err(Error::invalid("channel count mismatch in blit"));
        }
        self.check_rect(Rect::new(x, y, src.width, src.height))?;
        let ch = self.channels;
        for row in 0..src.height {
            let dst = ((y + row) * self.width + x) * ch;
            let s = row * src.width * ch;
            self.pixels[dst..dst + src.width * ch].copy_from_slice(&src.pixels[s..s + src.width * ch]);
        }
        Ok(())
    }

    pub fn check_rect(&self, rect: Rect) -> Result<()> {
        if rect.is_inside(self.width, self.height) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{rect:?} does not fit a {}x{} image",
                self.width, self.height
            )))
        }
    }

    pub fn min_max(&self) -> (u8, u8) {
        self.pixels
            .iter()
            .fold((u8::MAX, u8::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn check_dims(width: usize, height: usize, channels: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid(format!("zero image dimension {width}x{height}")));
    }
    if channels != 1 && channels != 3 {
        return Err(Error::invalid(format!("unsupported channel count {channels}")));
    }
    Ok(())
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    pub fn is_inside(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Bilinear resize with half-pixel centers; results round half up.
pub fn resize(src: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid(format!("zero resize target {out_w}x{out_h}")));
    }
    if out_w == src.width && out_h == src.height {
        return Ok(src.clone());
    }
    let ch = src.channels;
    let xs = sample_axis(src.width, out_w);
    let ys = sample_axis(src.height, out_h);
    let mut out = vec![0u8; out_w * out_h * ch];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..ch {
                let p = |x: usize, y: usize| src.pixels[(y * src.width + x) * ch + c] as f64;
                let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * fx;
                let bottom = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * fx;
                let v = top + (bottom - top) * fy;
                out[(oy * out_w + ox) * ch + c] = round_half_up(v);
            }
        }
    }
    Image::from_pixels(out_w, out_h, ch, out)
}

/// Source indices and blend weight for each output coordinate.
fn sample_axis(src_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let ratio = src_len as f64 / out_len as f64;
    let last = (src_len - 1) as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::gray(10, 10, 77).unwrap();
        let out = resize(&img, 3, 5).unwrap();
        assert_eq!((out.width(), out.height()), (3, 5));
        assert!(out.pixels().iter().all(|&v| v == 77));
    }

    #[test]
    fn resize_same_size_is_copy() {
        let px: Vec<u8> = (0..48).map(|i| (i * 5) as u8).collect();
        let img = Image::from_pixels(8, 6, 1, px).unwrap();
        assert_eq!(resize(&img, 8, 6).unwrap(), img);
    }

    #[test]
    fn resize_checkerboard_to_single_pixel() {
        let img = Image::from_pixels(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        let out = resize(&img, 1, 1).unwrap();
        assert_eq!(out.pixels(), &[128]);
    }

    #[test]
    fn resize_rejects_zero_dimension() {
        let img = Image::gray(4, 4, 0).unwrap();
        assert!(matches!(resize(&img, 0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(resize(&img, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn resize_keeps_channels() {
        let img = Image::new(5, 4, 3, 9).unwrap();
        let out = resize(&img, 7, 2).unwrap();
        assert_eq!(out.channels(), 3);
        assert!(out.pixels().iter().all(|&v| v == 9));
    }

    #[test]
    fn image_rejects_bad_lengths() {
        assert!(Image::from_pixels(2, 2, 1, vec![0; 3]).is_err());
        assert!(Image::gray(0, 2, 0).is_err());
        assert!(Image::new(2, 2, 2, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn resize_stays_in_envelope(
            w in 1usize..12, h in 1usize..12, ow in 1usize..20, oh in 1usize..20,
            seed in proptest::collection::vec(proptest::num::u8::ANY, 144),
        ) {
            let px: Vec<u8> = (0..w * h).map(|i| seed[i % seed.len()]).collect();
            let img = Image::from_pixels(w, h, 1, px).unwrap();
            let (lo, hi) = img.min_max();
            let out = resize(&img, ow, oh).unwrap();
            let (olo, ohi) = out.min_max();
            proptest::prop_assert!(olo >= lo && ohi <= hi);
        }
    }
}
