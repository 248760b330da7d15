use std::collections::BTreeMap;

use super::{Image, Rect};
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};

pub const GLYPH_CELL_W: usize = 5;
pub const GLYPH_CELL_H: usize = 7;

// 5x7 rows, bit 4 is the leftmost column.
const DIGIT_ROWS: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

const LETTER_ROWS: [[u8; 7]; 26] = [
    [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
    [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
    [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
    [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
    [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
    [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
    [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
    [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
    [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
    [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
    [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
    [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
    [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
    [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
    [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
    [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
    [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
    [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
    [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
    [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
];

/// Monochrome bitmap font with one fixed-size cell per symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphFont {
    cell_w: usize,
    cell_h: usize,
    glyphs: BTreeMap<char, Vec<bool>>,
}

impl GlyphFont {
    pub fn new(cell_w: usize, cell_h: usize) -> Result<Self> {
        if cell_w == 0 || cell_h == 0 {
            return Err(Error::invalid("empty glyph cell"));
        }
        Ok(GlyphFont {
            cell_w,
            cell_h,
            glyphs: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, symbol: char, bits: Vec<bool>) -> Result<()> {
        if bits.len() != self.cell_w * self.cell_h {
            return Err(Error::invalid(format!("glyph for {symbol:?} has {} bits", bits.len())));
        }
        self.glyphs.insert(symbol, bits);
        Ok(())
    }

    /// Built-in 5x7 font covering every symbol of `alphabet`.
    ///
    /// Digits and Latin capitals use fixed bitmaps, watermeter mid-states
    /// show the lower half of `d` above the upper half of `d+1`, and any
    /// other symbol gets a distinct pseudo-random pattern derived from its
    /// code point.
    pub fn builtin(alphabet: &Alphabet) -> Self {
        let mut font = GlyphFont::new(GLYPH_CELL_W, GLYPH_CELL_H).expect("non-empty cell");
        let mut used: Vec<[u8; 7]> = Vec::new();
        let mut synthetic = Vec::new();
        for (class, &sym) in alphabet.symbols().iter().enumerate() {
            let rows = if alphabet.is_mid_state(class) {
                Some(mid_state_rows((class - 10) % 10))
            } else {
                latin_rows(sym)
            };
            match rows {
                Some(r) => {
                    used.push(r);
                    font.insert(sym, rows_to_bits(&r)).expect("cell sized");
                }
                None => synthetic.push(sym),
            }
        }
        for sym in synthetic {
            let mut salt = 0u64;
            let rows = loop {
                let r = synthetic_rows(sym, salt);
                if !used.contains(&r) {
                    break r;
                }
                salt += 1;
            };
            used.push(rows);
            font.insert(sym, rows_to_bits(&rows)).expect("cell sized");
        }
        font
    }

    pub fn cell_w(&self) -> usize {
        self.cell_w
    }

    pub fn cell_h(&self) -> usize {
        self.cell_h
    }

    pub fn glyph(&self, symbol: char) -> Result<&[bool]> {
        self.glyphs.get(&symbol).map(Vec::as_slice).ok_or(Error::MissingGlyph(symbol))
    }

    pub fn covers(&self, alphabet: &Alphabet) -> bool {
        alphabet.symbols().iter().all(|s| self.glyphs.contains_key(s))
    }

    /// Largest aspect-preserving scaled size that fits in `w` x `h`.
    pub fn fitted_size(&self, w: usize, h: usize) -> (usize, usize) {
        // Compare cross products to keep this exact.
        if w * self.cell_h <= h * self.cell_w {
            (w, (self.cell_h * w / self.cell_w).max(1))
        } else {
            ((self.cell_w * h / self.cell_h).max(1), h)
        }
    }

    /// Paint `symbol` scaled to `gw` x `gh` with top-left at (x, y).
    /// Only set bits are written; the caller owns the background.
    pub fn paint(&self, image: &mut Image, symbol: char, x: usize, y: usize, gw: usize, gh: usize, fg: u8) -> Result<()> {
        let bits = self.glyph(symbol)?;
        for dy in 0..gh {
            let sy = dy * self.cell_h / gh;
            let py = y + dy;
            if py >= image.height() {
                break;
            }
            for dx in 0..gw {
                let sx = dx * self.cell_w / gw;
                let px = x + dx;
                if px >= image.width() {
                    break;
                }
                if bits[sy * self.cell_w + sx] {
                    for c in 0..image.channels() {
                        image.set(px, py, c, fg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Fill `slot` with `bg` and draw the glyph for `symbol` centered at the
/// largest scale that fits, painting set bits with `fg`.
pub fn draw_glyph(canvas: &mut Image, font: &GlyphFont, symbol: char, slot: Rect, fg: u8, bg: u8) -> Result<()> {
    font.glyph(symbol)?;
    canvas.check_rect(slot)?;
    canvas.fill_rect(slot, bg)?;
    let (gw, gh) = font.fitted_size(slot.w, slot.h);
    let x = slot.x + (slot.w - gw) / 2;
    let y = slot.y + (slot.h - gh) / 2;
    font.paint(canvas, symbol, x, y, gw, gh, fg)
}

fn latin_rows(sym: char) -> Option<[u8; 7]> {
    match sym {
        '0'..='9' => Some(DIGIT_ROWS[sym as usize - '0' as usize]),
        'A'..='Z' => Some(LETTER_ROWS[sym as usize - 'A' as usize]),
        _ => None,
    }
}

fn mid_state_rows(lower_digit: usize) -> [u8; 7] {
    let upper = DIGIT_ROWS[lower_digit];
    let next = DIGIT_ROWS[(lower_digit + 1) % 10];
    let mut rows = [0u8; 7];
    rows[..3].copy_from_slice(&upper[4..]);
    rows[3..].copy_from_slice(&next[..4]);
    rows
}

fn synthetic_rows(sym: char, salt: u64) -> [u8; 7] {
    let mut state = (sym as u64) << 8 | salt;
    let mut rows = [0u8; 7];
    for row in rows.iter_mut() {
        state = crate::taskgen::splitmix64(state);
        *row = (state & 0x1F) as u8;
    }
    // A frame keeps synthetic glyphs visually dense like CJK characters.
    rows[0] |= 0x1F;
    rows[6] |= 0x11;
    rows
}

fn rows_to_bits(rows: &[u8; 7]) -> Vec<bool> {
    rows.iter()
        .flat_map(|&r| (0..GLYPH_CELL_W).map(move |c| r >> (GLYPH_CELL_W - 1 - c) & 1 == 1))
        .collect()
}
