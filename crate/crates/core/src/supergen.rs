//! Expansion of labeled scenes into prefix-classification samples, the
//! packed sample archive, and watermeter reading interpretation.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use crate::alphabet::Alphabet;
use crate::canvas::{compose, GlyphFont, Image, LayoutSpec};
use crate::error::{Error, Result};
use crate::taskgen::LabeledScene;

/// One training instance: a composed canvas holding the first `prefix_len`
/// true characters, labeled with the class of the next one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixSample {
    pub image: Image,
    pub prefix_len: usize,
    pub target_class: usize,
    /// Source scene; not persisted, so samples read from disk carry 0.
    pub scene_id: u64,
}

/// All `N` prefix samples of one scene, in prefix-length order.
pub fn expand(scene: &LabeledScene, layout: &LayoutSpec, font: &GlyphFont, alphabet: &Alphabet) -> Result<Vec<PrefixSample>> {
    let n = scene.label.len();
    if n != layout.string_len() {
        return Err(Error::invalid(format!(
            "label has {n} characters, layout serves {}",
            layout.string_len()
        ))
        .in_scene(scene.scene_id));
    }
    let classes = alphabet.encode(&scene.label).map_err(|e| e.in_scene(scene.scene_id))?;
    let mut canvas = compose(&scene.image, &[], layout, font).map_err(|e| e.in_scene(scene.scene_id))?;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            layout
                .draw_slot(&mut canvas, font, k - 1, scene.label[k - 1])
                .map_err(|e| e.in_scene(scene.scene_id))?;
        }
        out.push(PrefixSample {
            image: canvas.clone(),
            prefix_len: k,
            target_class: classes[k],
            scene_id: scene.scene_id,
        });
    }
    Ok(out)
}

/// Interpret five watermeter classes as a reading. A mid-state `C` in the
/// last position reads as `C - 9.5`, elsewhere as `C - 10`.
pub fn meter_reading(classes: &[usize]) -> Result<String> {
    if classes.len() != 5 {
        return Err(Error::invalid(format!("meter reading needs 5 classes, got {}", classes.len())));
    }
    let mut out = String::with_capacity(7);
    for (i, &c) in classes.iter().enumerate() {
        let digit = match c {
            0..=9 => c,
            10..=19 => c - 10,
            _ => return Err(Error::invalid(format!("meter class {c} outside 0..=19"))),
        };
        out.push(char::from(b'0' + digit as u8));
        if i == classes.len() - 1 && c >= 10 {
            out.push_str(".5");
        }
    }
    Ok(out)
}

const ARCHIVE_MAGIC: &[u8; 4] = b"SOCR";
const ARCHIVE_VERSION: u8 = 1;

/// Pre-composed training samples sharing one canvas geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleArchive {
    pub canvas_w: usize,
    pub canvas_h: usize,
    pub channels: usize,
    pub class_count: usize,
    pub samples: Vec<PrefixSample>,
}

impl SampleArchive {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for s in &self.samples {
            h[s.target_class] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let px = self.canvas_w * self.canvas_h * self.channels;
        let mut out = Vec::with_capacity(16 + self.samples.len() * (px + 3));
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.push(ARCHIVE_VERSION);
        out.extend_from_slice(&u16_field(self.canvas_w, "canvas width")?.to_le_bytes());
        out.extend_from_slice(&u16_field(self.canvas_h, "canvas height")?.to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&u16_field(self.class_count, "class count")?.to_le_bytes());
        let count = u32::try_from(self.samples.len()).map_err(|_| Error::invalid("too many samples"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for s in &self.samples {
            if s.image.pixels().len() != px {
                return Err(Error::shape("sample image does not match archive geometry"));
            }
            out.extend_from_slice(&(s.target_class as u16).to_le_bytes());
            out.push(u8::try_from(s.prefix_len).map_err(|_| Error::invalid("prefix too long"))?);
            out.extend_from_slice(s.image.pixels());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::format("not a sample archive"));
        }
        let version = r.u8()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::format(format!("unsupported sample archive version {version}")));
        }
        let canvas_w = r.u16()? as usize;
        let canvas_h = r.u16()? as usize;
        let channels = r.u8()? as usize;
        let class_count = r.u16()? as usize;
        let count = r.u32()? as usize;
        let px = canvas_w * canvas_h * channels;
        let mut samples = Vec::with_capacity(count.min(bytes.len() / (px + 3).max(1)));
        for _ in 0..count {
            let target_class = r.u16()? as usize;
            let prefix_len = r.u8()? as usize;
            if target_class >= class_count {
                return Err(Error::format(format!("target class {target_class} >= {class_count}")));
            }
            let image = Image::from_pixels(canvas_w, canvas_h, channels, r.take(px)?.to_vec())
                .map_err(|e| Error::format(e.to_string()))?;
            samples.push(PrefixSample {
                image,
                prefix_len,
                target_class,
                scene_id: 0,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("trailing bytes after sample archive"));
        }
        Ok(SampleArchive {
            canvas_w,
            canvas_h,
            channels,
            class_count,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit 16 bits")))
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Expand every scene. Inputs carry only images and label strings.
pub fn build_training_set(scenes: &[LabeledScene], layout: &LayoutSpec, font: &GlyphFont, alphabet: &Alphabet) -> Result<SampleArchive> {
    let n = layout.string_len();
    let bad: Vec<String> = scenes
        .iter()
        .filter(|s| s.label.len() != n)
        .map(|s| format!("{:016x}", s.scene_id))
        .collect();
    if !bad.is_empty() {
        return Err(Error::invalid(format!(
            "labels must have {n} characters; offending scenes: {}",
            bad.join(", ")
        )));
    }
    let per_scene: Vec<Vec<PrefixSample>> = scenes
        .par_iter()
        .map(|s| expand(s, layout, font, alphabet))
        .collect::<Result<_>>()?;
    Ok(SampleArchive {
        canvas_w: layout.canvas_w(),
        canvas_h: layout.canvas_h(),
        channels: layout.channels(),
        class_count: alphabet.class_count(),
        samples: per_scene.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_split, Preset, TaskConfig};
    use proptest::prelude::*;

    fn plate_scene(label: &str) -> LabeledScene {
        LabeledScene {
            image: Image::gray(60, 20, 180).unwrap(),
            label: label.chars().collect(),
            scene_id: 99,
        }
    }

    #[test]
    fn seven_character_plate_expands_to_seven_samples() {
        let a = Alphabet::plate();
        let font = GlyphFont::builtin(&a);
        let layout = LayoutSpec::ccpd();
        let scene = plate_scene("皖AD1238");
        let samples = expand(&scene, &layout, &font, &a).unwrap();
        assert_eq!(samples.len(), 7);
        let last = &samples[6];
        assert_eq!(last.target_class, a.class_of('8').unwrap());
        assert_eq!(last.prefix_len, 6);
        let expect = compose(&scene.image, &scene.label[..6], &layout, &font).unwrap();
        assert_eq!(last.image, expect);
        for (k, s) in samples.iter().enumerate() {
            assert_eq!(s.image, compose(&scene.image, &scene.label[..k], &layout, &font).unwrap());
        }
    }

    #[test]
    fn single_character_layout() {
        let a = Alphabet::desk16();
        let font = GlyphFont::builtin(&a);
        let layout = LayoutSpec::strip(32, 32, 32, 0).unwrap();
        let scene = LabeledScene {
            image: Image::gray(8, 8, 3).unwrap(),
            label: vec!['C'],
            scene_id: 1,
        };
        let s = expand(&scene, &layout, &font, &a).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].prefix_len, 0);
        assert_eq!(s[0].image, compose(&scene.image, &[], &layout, &font).unwrap());
    }

    #[test]
    fn expand_errors() {
        let a = Alphabet::desk16();
        let font = GlyphFont::builtin(&a);
        let layout = LayoutSpec::desk();
        let short = LabeledScene {
            image: Image::gray(8, 8, 3).unwrap(),
            label: vec!['1', '2'],
            scene_id: 5,
        };
        assert!(matches!(expand(&short, &layout, &font, &a).unwrap_err().root(), Error::InvalidArgument(_)));
        let unknown = LabeledScene {
            label: "12Z45".chars().collect(),
            ..short
        };
        let err = expand(&unknown, &layout, &font, &a).unwrap_err();
        assert!(matches!(err, Error::Scene { scene_id: 5, .. }));
        assert!(matches!(err.root(), Error::MissingClass('Z')));
    }

    #[test]
    fn meter_reading_examples() {
        assert_eq!(meter_reading(&[0, 1, 8, 1, 16]).unwrap(), "01816.5");
        assert_eq!(meter_reading(&[10, 0, 0, 0, 0]).unwrap(), "00000");
        assert_eq!(meter_reading(&[0, 0, 0, 0, 10]).unwrap(), "00000.5");
        assert_eq!(meter_reading(&[19, 12, 3, 4, 5]).unwrap(), "92345");
        assert!(meter_reading(&[0, 0, 0, 0]).is_err());
        assert!(meter_reading(&[0, 0, 0, 0, 20]).is_err());
    }

    #[test]
    fn training_set_counts_and_histogram() {
        let a = Alphabet::desk16();
        let font = GlyphFont::builtin(&a);
        let layout = LayoutSpec::strip(48, 48, 32, 4).unwrap();
        let cfg = TaskConfig::preset(Preset::Clean, a.clone(), 5, 48, 24, 3);
        let scenes = gen_split(&cfg, 100, 0).unwrap();
        let archive = build_training_set(&scenes, &layout, &font, &a).unwrap();
        assert_eq!(archive.len(), 500);
        assert_eq!(archive.class_histogram().iter().sum::<usize>(), 500);
        let again = build_training_set(&scenes, &layout, &font, &a).unwrap();
        let h1 = Sha256::digest(archive.to_bytes().unwrap());
        let h2 = Sha256::digest(again.to_bytes().unwrap());
        assert_eq!(h1, h2);
    }

    #[test]
    fn wrong_length_labels_list_scene_ids() {
        let a = Alphabet::desk16();
        let font = GlyphFont::builtin(&a);
        let layout = LayoutSpec::desk();
        let scenes = vec![
            LabeledScene { image: Image::gray(4, 4, 0).unwrap(), label: vec!['1'; 5], scene_id: 1 },
            LabeledScene { image: Image::gray(4, 4, 0).unwrap(), label: vec!['1'; 4], scene_id: 0xabc },
            LabeledScene { image: Image::gray(4, 4, 0).unwrap(), label: vec!['1'; 6], scene_id: 0xdef },
        ];
        let msg = build_training_set(&scenes, &layout, &font, &a).unwrap_err().to_string();
        assert!(msg.contains("0000000000000abc") && msg.contains("0000000000000def"), "{msg}");
    }

    #[test]
    fn archive_rejects_corruption() {
        let archive = SampleArchive {
            canvas_w: 2,
            canvas_h: 2,
            channels: 1,
            class_count: 3,
            samples: vec![PrefixSample { image: Image::gray(2, 2, 1).unwrap(), prefix_len: 0, target_class: 2, scene_id: 0 }],
        };
        let bytes = archive.to_bytes().unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 2 + 2 + 1 + 2 + 4 + 2 + 1 + 4);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(SampleArchive::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(SampleArchive::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(SampleArchive::from_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn archive_round_trip(classes in prop::collection::vec((0usize..20, 0usize..5, any::<u8>()), 0..12)) {
            let samples = classes
                .iter()
                .map(|&(t, p, v)| PrefixSample { image: Image::gray(3, 2, v).unwrap(), prefix_len: p, target_class: t, scene_id: 0 })
                .collect();
            let a = SampleArchive { canvas_w: 3, canvas_h: 2, channels: 1, class_count: 20, samples };
            let bytes = a.to_bytes().unwrap();
            let back = SampleArchive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }

        #[test]
        fn meter_reading_suffix_iff_last_is_mid_state(cs in prop::collection::vec(0usize..20, 5)) {
            let r = meter_reading(&cs).unwrap();
            let digits = r.chars().filter(|c| c.is_ascii_digit()).count();
            if cs[4] >= 10 {
                prop_assert!(r.ends_with(".5"));
                prop_assert_eq!(digits, 6);
            } else {
                prop_assert!(!r.contains('.'));
                prop_assert_eq!(digits, 5);
            }
        }

        #[test]
        fn consecutive_samples_differ_only_in_one_slot(seed in any::<u64>()) {
            let a = Alphabet::desk16();
            let font = GlyphFont::builtin(&a);
            let layout = LayoutSpec::desk();
            let cfg = TaskConfig::preset(Preset::Clean, a.clone(), 5, 96, 48, seed);
            let scene = crate::taskgen::gen_scene(&cfg, 0).unwrap();
            let s = expand(&scene, &layout, &font, &a).unwrap();
            for k in 0..4 {
                let slot = layout.slots()[k];
                for y in 0..96 {
                    for x in 0..96 {
                        if !slot.contains(x, y) {
                            prop_assert_eq!(s[k].image.get(x, y, 0), s[k + 1].image.get(x, y, 0));
                        }
                    }
                }
            }
        }
    }
}
