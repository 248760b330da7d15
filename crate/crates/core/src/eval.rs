//! Line- and character-level accuracy, per-subset evaluation and report
//! files (`metrics.csv`, `curves.csv`, `curves.svg`).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::decoder::{decode, Classifier, DecodeConfig};
use crate::error::{Error, Result};
use crate::taskgen::LabeledScene;
use crate::train::CurveLog;

/// Raw counts; every percentage is derived from these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub images: usize,
    pub correct_images: usize,
    pub chars: usize,
    pub correct_chars: usize,
}

impl Counts {
    pub fn merge(&mut self, other: &Counts) {
        self.images += other.images;
        self.correct_images += other.correct_images;
        self.chars += other.chars;
        self.correct_chars += other.correct_chars;
    }

    /// Line correct rate in hundredths of a percent, rounded half up.
    pub fn lcr_hundredths(&self) -> u64 {
        hundredths(self.correct_images, self.images)
    }

    /// Character accuracy rate in hundredths of a percent, rounded half up.
    pub fn ar_hundredths(&self) -> u64 {
        hundredths(self.correct_chars, self.chars)
    }

    pub fn lcr(&self) -> f64 {
        pct(self.correct_images, self.images)
    }

    pub fn ar(&self) -> f64 {
        pct(self.correct_chars, self.chars)
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// `round_half_up(10000 * num / den)` in exact integer arithmetic.
pub fn hundredths(num: usize, den: usize) -> u64 {
    if den == 0 {
        return 0;
    }
    let (num, den) = (num as u128, den as u128);
    ((num * 20_000 + den) / (2 * den)) as u64
}

/// `1234` -> `"12.34"`.
pub fn format_hundredths(h: u64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

pub fn parse_hundredths(text: &str) -> Result<u64> {
    let bad = || Error::format(format!("bad percentage {text:?}"));
    let (int, frac) = text.split_once('.').ok_or_else(bad)?;
    if frac.len() != 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    Ok(int.parse::<u64>().map_err(|_| bad())? * 100 + frac.parse::<u64>().map_err(|_| bad())?)
}

/// Counts for equal-length prediction/label pairs.
pub fn count(preds: &[Vec<char>], labels: &[Vec<char>]) -> Result<Counts> {
    if preds.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut c = Counts::default();
    for (i, (p, l)) in preds.iter().zip(labels).enumerate() {
        if p.len() != l.len() {
            return Err(Error::invalid(format!("item {i}: prediction length {} vs label length {}", p.len(), l.len())));
        }
        let hits = p.iter().zip(l).filter(|(a, b)| a == b).count();
        c.images += 1;
        c.chars += l.len();
        c.correct_chars += hits;
        c.correct_images += usize::from(hits == l.len());
    }
    Ok(c)
}

/// Percentage of items whose whole string is correct.
pub fn sequence_accuracy(preds: &[Vec<char>], labels: &[Vec<char>]) -> Result<f64> {
    Ok(count(preds, labels)?.lcr())
}

/// `(LCR, AR)` as percentages.
pub fn lcr_ar(preds: &[Vec<char>], labels: &[Vec<char>]) -> Result<(f64, f64)> {
    let c = count(preds, labels)?;
    Ok((c.lcr(), c.ar()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalResult {
    pub overall: Counts,
    /// In evaluation order.
    pub subsets: Vec<(String, Counts)>,
}

impl EvalResult {
    pub fn subset(&self, name: &str) -> Option<&Counts> {
        self.subsets.iter().find(|(n, _)| n == name).map(|(_, c)| c)
    }

    pub fn add_subset(&mut self, name: &str, counts: Counts) {
        self.overall.merge(&counts);
        match self.subsets.iter_mut().find(|(n, _)| n == name) {
            Some((_, c)) => c.merge(&counts),
            None => self.subsets.push((name.to_string(), counts)),
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        let rows = self.subsets.iter().map(|(n, c)| (n.as_str(), c)).chain([("overall", &self.overall)]);
        for (name, c) in rows {
            let lcr = format_hundredths(c.lcr_hundredths());
            let _ = writeln!(out, "{name},{},{lcr},{lcr},{}", c.images, format_hundredths(c.ar_hundredths()));
        }
        out
    }
}

pub const METRICS_HEADER: &str = "subset,images,seq_acc,lcr,ar";

/// One parsed `metrics.csv` row; percentages in hundredths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetricsRow {
    pub subset: String,
    pub images: usize,
    pub seq_acc: u64,
    pub lcr: u64,
    pub ar: u64,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics header missing"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::format(format!("bad metrics row {line:?}")));
            }
            Ok(MetricsRow {
                subset: f[0].to_string(),
                images: f[1].parse().map_err(|_| Error::format(format!("bad image count in {line:?}")))?,
                seq_acc: parse_hundredths(f[2])?,
                lcr: parse_hundredths(f[3])?,
                ar: parse_hundredths(f[4])?,
            })
        })
        .collect()
}

/// Predictions of one subset, in scene order.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPredictions {
    pub name: String,
    pub scene_ids: Vec<u64>,
    pub predictions: Vec<Vec<char>>,
    pub labels: Vec<Vec<char>>,
}

/// Decode every scene of every subset. `make_classifier` builds one
/// classifier per worker.
pub fn evaluate_subsets<C, F>(make_classifier: F, subsets: &[(String, Vec<LabeledScene>)], cfg: &DecodeConfig) -> Result<(EvalResult, Vec<SubsetPredictions>)>
where
    C: Classifier,
    F: Fn() -> Result<C> + Sync,
{
    cfg.validate()?;
    if subsets.is_empty() {
        return Err(Error::invalid("no subsets to evaluate"));
    }
    let mut result = EvalResult::default();
    let mut all = Vec::with_capacity(subsets.len());
    for (name, scenes) in subsets {
        if scenes.is_empty() {
            return Err(Error::invalid(format!("subset {name:?} has no scenes")));
        }
        // Surface setup failures with their own error kind.
        drop(make_classifier()?);
        let predictions = scenes
            .par_iter()
            .map_init(
                &make_classifier,
                |clf, scene| {
                    let clf = clf.as_mut().map_err(|e| Error::Transport(format!("classifier setup failed: {e}")))?;
                    decode(&scene.image, scene.scene_id, clf, cfg).map_err(|e| e.in_scene(scene.scene_id))
                },
            )
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_subset(name))?;
        let labels: Vec<Vec<char>> = scenes.iter().map(|s| s.label.clone()).collect();
        result.add_subset(name, count(&predictions, &labels)?);
        all.push(SubsetPredictions {
            name: name.clone(),
            scene_ids: scenes.iter().map(|s| s.scene_id).collect(),
            predictions,
            labels,
        });
    }
    Ok((result, all))
}

/// Line chart of training loss and validation accuracy against iteration.
pub fn curves_svg(curve: &CurveLog) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const M: f64 = 40.0;
    let max_iter = curve.points.iter().map(|p| p.iter).max().unwrap_or(1).max(1) as f64;
    let max_loss = curve
        .points
        .iter()
        .map(|p| p.loss as f64)
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max)
        .max(1e-9);
    let x = |it: u64| M + (W - 2.0 * M) * it as f64 / max_iter;
    let y = |frac: f64| H - M - (H - 2.0 * M) * frac.clamp(0.0, 1.0);
    let series = |pts: Vec<(f64, f64)>| pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect::<Vec<_>>().join(" ");
    let loss = series(
        curve
            .points
            .iter()
            .filter(|p| p.loss.is_finite())
            .map(|p| (x(p.iter), y(p.loss as f64 / max_loss)))
            .collect(),
    );
    let acc = series(
        curve
            .points
            .iter()
            .filter_map(|p| p.val_acc.map(|a| (x(p.iter), y(a as f64))))
            .collect(),
    );
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(out, r#"  <rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"  <line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = writeln!(out, r#"  <line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    let _ = writeln!(out, r#"  <text x="{M}" y="20" font-size="12">loss (max {max_loss:.4}, blue) and validation accuracy (0..1, red) vs iteration (max {max_iter})</text>"#);
    let _ = writeln!(out, r#"  <polyline id="loss" fill="none" stroke="blue" points="{loss}"/>"#);
    let _ = writeln!(out, r#"  <polyline id="val_acc" fill="none" stroke="red" points="{acc}"/>"#);
    out.push_str("</svg>\n");
    out
}

/// Write `metrics.csv`, `curves.csv` and `curves.svg` into `out_dir`.
pub fn emit_report(result: &EvalResult, curve: &CurveLog, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let files = [
        ("metrics.csv", result.metrics_csv()),
        ("curves.csv", curve.to_csv()),
        ("curves.svg", curves_svg(curve)),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body)?;
        paths.push(path);
    }
    Ok(paths)
}
