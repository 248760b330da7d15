use super::font::draw_glyph;
use super::{resize, GlyphFont, Image, Rect};
use crate::error::{Error, Result};

/// Geometry of a SuperOCR image: the resized scene on top and `N - 1`
/// character slots in the strip below it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSpec {
    canvas_w: usize,
    canvas_h: usize,
    channels: usize,
    scene_region: Rect,
    slots: Vec<Rect>,
    pub fg: u8,
    pub bg: u8,
}

impl LayoutSpec {
    /// Validated layout with explicit slot rectangles.
    pub fn new(canvas_w: usize, canvas_h: usize, scene_region: Rect, slots: Vec<Rect>, fg: u8, bg: u8) -> Result<Self> {
        if canvas_w == 0 || canvas_h == 0 {
            return Err(Error::invalid("empty canvas"));
        }
        if !scene_region.is_inside(canvas_w, canvas_h) {
            return Err(Error::invalid("scene region outside canvas"));
        }
        for (i, s) in slots.iter().enumerate() {
            if !s.is_inside(canvas_w, canvas_h) {
                return Err(Error::invalid(format!("slot {i} outside canvas")));
            }
            if s.intersects(&scene_region) {
                return Err(Error::invalid(format!("slot {i} overlaps the scene region")));
            }
            if let Some(prev) = i.checked_sub(1).map(|p| &slots[p]) {
                if s.x <= prev.x {
                    return Err(Error::invalid("slots must be ordered left to right"));
                }
            }
            if slots[..i].iter().any(|o| o.intersects(s)) {
                return Err(Error::invalid(format!("slot {i} overlaps another slot")));
            }
        }
        if slots.len() > u8::MAX as usize {
            return Err(Error::invalid("too many slots"));
        }
        Ok(LayoutSpec {
            canvas_w,
            canvas_h,
            channels: 1,
            scene_region,
            slots,
            fg,
            bg,
        })
    }

    /// Scene across the top `scene_h` rows; the strip below is split into
    /// `slot_count` equal, gapless, full-height slots centered horizontally.
    pub fn strip(canvas_w: usize, canvas_h: usize, scene_h: usize, slot_count: usize) -> Result<Self> {
        if scene_h == 0 || scene_h > canvas_h {
            return Err(Error::invalid("scene height must be in 1..=canvas height"));
        }
        let strip_h = canvas_h - scene_h;
        if slot_count > 0 && strip_h == 0 {
            return Err(Error::invalid("no room below the scene for slots"));
        }
        let slot_w = if slot_count == 0 { 0 } else { canvas_w / slot_count };
        if slot_count > 0 && slot_w == 0 {
            return Err(Error::invalid("canvas too narrow for the requested slots"));
        }
        let x0 = (canvas_w - slot_w * slot_count) / 2;
        let slots = (0..slot_count)
            .map(|i| Rect::new(x0 + i * slot_w, scene_h, slot_w, strip_h))
            .collect();
        Self::new(canvas_w, canvas_h, Rect::new(0, 0, canvas_w, scene_h), slots, 0, 255)
    }

    /// 331x331 canvas, 331x305 scene, six slots (seven-character plates).
    pub fn ccpd() -> Self {
        Self::strip(331, 331, 305, 6).expect("valid preset")
    }

    /// 224x224 canvas, 224x150 scene, four slots (five-digit meters).
    pub fn wnr() -> Self {
        Self::strip(224, 224, 150, 4).expect("valid preset")
    }

    /// 96x96 canvas, 96x64 scene, four slots.
    pub fn desk() -> Self {
        Self::strip(96, 96, 64, 4).expect("valid preset")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ccpd" => Ok(Self::ccpd()),
            "wnr" => Ok(Self::wnr()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::invalid(format!("unknown layout preset {other:?}"))),
        }
    }

    /// Same geometry with three-channel canvases.
    pub fn with_channels(mut self, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        self.channels = channels;
        Ok(self)
    }

    pub fn canvas_w(&self) -> usize {
        self.canvas_w
    }

    pub fn canvas_h(&self) -> usize {
        self.canvas_h
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn scene_region(&self) -> Rect {
        self.scene_region
    }

    pub fn slots(&self) -> &[Rect] {
        &self.slots
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// String length this layout serves.
    pub fn string_len(&self) -> usize {
        self.slots.len() + 1
    }

    /// Draw `symbol` into slot `index` of an already composed canvas.
    pub fn draw_slot(&self, canvas: &mut Image, font: &GlyphFont, index: usize, symbol: char) -> Result<()> {
        let slot = *self.slots.get(index).ok_or(Error::Capacity {
            len: index + 1,
            capacity: self.slots.len(),
        })?;
        draw_glyph(canvas, font, symbol, slot, self.fg, self.bg)
    }
}

/// Build a SuperOCR image: `scene` resized into the scene region and each
/// prefix symbol drawn into its slot, left to right.
pub fn compose(scene: &Image, prefix: &[char], layout: &LayoutSpec, font: &GlyphFont) -> Result<Image> {
    if prefix.len() > layout.slot_count() {
        return Err(Error::Capacity {
            len: prefix.len(),
            capacity: layout.slot_count(),
        });
    }
    if scene.channels() != layout.channels {
        return Err(Error::invalid(format!(
            "scene has {} channels, layout expects {}",
            scene.channels(),
            layout.channels
        )));
    }
    for &s in prefix {
        font.glyph(s)?;
    }
    let mut canvas = Image::new(layout.canvas_w, layout.canvas_h, layout.channels, layout.bg)?;
    let region = layout.scene_region;
    let resized = resize(scene, region.w, region.h)?;
    canvas.blit(&resized, region.x, region.y)?;
    for (i, &s) in prefix.iter().enumerate() {
        layout.draw_slot(&mut canvas, font, i, s)?;
    }
    Ok(canvas)
}
