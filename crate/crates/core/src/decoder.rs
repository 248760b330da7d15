//! Greedy iterative decoding: classify the canvas, draw the predicted
//! character into the next slot, repeat until the string is complete.
//!
//! Nothing here takes or returns a character position inside the scene.

use crate::alphabet::Alphabet;
use crate::canvas::{compose, GlyphFont, Image, LayoutSpec};
use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::taskgen::LabeledScene;

/// Next-character predictor over SuperOCR canvases.
pub trait Classifier {
    fn class_count(&self) -> usize;

    /// Called once before the first canvas of each scene.
    fn begin(&mut self, _scene_id: u64) -> Result<()> {
        Ok(())
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>>;
}

impl Classifier for Network {
    fn class_count(&self) -> usize {
        Network::class_count(self)
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        Ok(self.forward(canvas)?.into_data())
    }
}

impl Classifier for &Network {
    fn class_count(&self) -> usize {
        Network::class_count(self)
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        Ok(self.forward(canvas)?.into_data())
    }
}

impl<C: Classifier + ?Sized> Classifier for Box<C> {
    fn class_count(&self) -> usize {
        (**self).class_count()
    }

    fn begin(&mut self, scene_id: u64) -> Result<()> {
        (**self).begin(scene_id)
    }

    fn scores(&mut self, canvas: &Image) -> Result<Vec<f32>> {
        (**self).scores(canvas)
    }
}

/// Everything the loop needs besides the scene and the classifier.
#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub layout: LayoutSpec,
    pub font: GlyphFont,
    pub alphabet: Alphabet,
    pub string_len: usize,
}

impl DecodeConfig {
    pub fn new(layout: LayoutSpec, font: GlyphFont, alphabet: Alphabet, string_len: usize) -> Result<Self> {
        let cfg = DecodeConfig { layout, font, alphabet, string_len };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.string_len == 0 || self.string_len != self.layout.string_len() {
            return Err(Error::invalid(format!(
                "string length {} does not match a layout with {} slots",
                self.string_len,
                self.layout.slot_count()
            )));
        }
        if !self.font.covers(&self.alphabet) {
            return Err(Error::invalid("font does not cover the alphabet"));
        }
        Ok(())
    }
}

/// Canvas and predictions after `step` classifications.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    pub canvas: Image,
    pub predicted: Vec<char>,
    pub step: usize,
}

fn classify(clf: &mut dyn Classifier, canvas: &Image, alphabet: &Alphabet) -> Result<usize> {
    let scores = clf.scores(canvas)?;
    if scores.len() != alphabet.class_count() {
        return Err(Error::Contract(format!(
            "classifier returned {} scores for {} classes",
            scores.len(),
            alphabet.class_count()
        )));
    }
    Ok(argmax(&scores))
}

/// Decode with a hook that sees the state before every classification.
pub fn decode_traced(
    scene: &Image,
    scene_id: u64,
    clf: &mut dyn Classifier,
    cfg: &DecodeConfig,
    mut observe: impl FnMut(&DecodeState),
) -> Result<Vec<char>> {
    cfg.validate()?;
    if clf.class_count() != cfg.alphabet.class_count() {
        return Err(Error::Contract(format!(
            "classifier has {} classes, alphabet has {}",
            clf.class_count(),
            cfg.alphabet.class_count()
        )));
    }
    clf.begin(scene_id)?;
    let mut state = DecodeState {
        canvas: compose(scene, &[], &cfg.layout, &cfg.font)?,
        predicted: Vec::with_capacity(cfg.string_len),
        step: 0,
    };
    while state.step < cfg.string_len {
        observe(&state);
        let class = classify(clf, &state.canvas, &cfg.alphabet)?;
        let symbol = cfg.alphabet.symbol(class).expect("argmax below class count");
        if state.step + 1 < cfg.string_len {
            cfg.layout.draw_slot(&mut state.canvas, &cfg.font, state.step, symbol)?;
        }
        state.predicted.push(symbol);
        state.step += 1;
    }
    Ok(state.predicted)
}

/// Predict `cfg.string_len` characters for one scene.
pub fn decode(scene: &Image, scene_id: u64, clf: &mut dyn Classifier, cfg: &DecodeConfig) -> Result<Vec<char>> {
    decode_traced(scene, scene_id, clf, cfg, |_| {})
}

/// Per-position accuracy with ground-truth prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    pub correct: Vec<usize>,
    pub total: usize,
}

impl TeacherForced {
    pub fn per_position(&self) -> Vec<f64> {
        self.correct.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    pub fn overall(&self) -> f64 {
        self.correct.iter().sum::<usize>() as f64 / (self.total * self.correct.len()) as f64
    }
}

/// Classify `compose(scene, label[..n])` against `label[n]` for every `n`.
pub fn teacher_forced_accuracy(scenes: &[LabeledScene], clf: &mut dyn Classifier, cfg: &DecodeConfig) -> Result<TeacherForced> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let mut correct = vec![0; cfg.string_len];
    for scene in scenes {
        let mut run = || -> Result<()> {
            if scene.label.len() != cfg.string_len {
                return Err(Error::invalid(format!("label length {} differs from {}", scene.label.len(), cfg.string_len)));
            }
            let truth = cfg.alphabet.encode(&scene.label)?;
            clf.begin(scene.scene_id)?;
            for (n, &want) in truth.iter().enumerate() {
                let canvas = compose(&scene.image, &scene.label[..n], &cfg.layout, &cfg.font)?;
                if classify(clf, &canvas, &cfg.alphabet)? == want {
                    correct[n] += 1;
                }
            }
            Ok(())
        };
        run().map_err(|e| e.in_scene(scene.scene_id))?;
    }
    Ok(TeacherForced { correct, total: scenes.len() })
}
