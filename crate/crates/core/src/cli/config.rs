//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::alphabet::Alphabet;
use crate::canvas::{GlyphFont, LayoutSpec};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::taskgen::{Preset, TaskConfig};
use crate::train::OptimConfig;

/// Scene index offset of each split; splits never overlap below 10^8 scenes.
pub const SPLIT_STRIDE: u64 = 100_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }

    pub fn offset(self) -> u64 {
        self as u64 * SPLIT_STRIDE
    }
}

/// Everything an experiment depends on besides its input files.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub alphabet: String,
    pub string_len: usize,
    pub scene_w: usize,
    pub scene_h: usize,
    pub layout: String,
    pub arch: String,
    pub optim: OptimConfig,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub calib_samples: usize,
    pub subsets: Vec<String>,
    pub out_dir: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "seed",
    "alphabet",
    "string_len",
    "scene_w",
    "scene_h",
    "layout",
    "arch",
    "base_lr",
    "momentum",
    "weight_decay",
    "lr_drop",
    "drop_interval",
    "batch_size",
    "max_iters",
    "val_every",
    "log_every",
    "stop_at_val_acc",
    "train_scenes",
    "val_scenes",
    "test_scenes",
    "calib_samples",
    "subsets",
    "out_dir",
];

impl ExperimentConfig {
    /// Desk-scale defaults for everything except the seed.
    pub fn desk(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            alphabet: "desk16".into(),
            string_len: 5,
            scene_w: 96,
            scene_h: 48,
            layout: "desk".into(),
            arch: "supernet-s".into(),
            optim: OptimConfig { seed, batch_size: 5, ..OptimConfig::default() },
            train_scenes: 20_000,
            val_scenes: 200,
            test_scenes: 1_000,
            calib_samples: 256,
            subsets: vec!["clean".into(), "rotate".into()],
            out_dir: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::invalid(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::invalid(format!("config line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let seed: u64 = need(&map, "seed")?.ok_or_else(|| Error::invalid("config must set seed"))?;
        let mut cfg = ExperimentConfig::desk(seed);
        macro_rules! set {
            ($($key:literal => $field:expr),* $(,)?) => {
                $(if let Some(v) = need(&map, $key)? { $field = v; })*
            };
        }
        set! {
            "alphabet" => cfg.alphabet,
            "string_len" => cfg.string_len,
            "scene_w" => cfg.scene_w,
            "scene_h" => cfg.scene_h,
            "layout" => cfg.layout,
            "arch" => cfg.arch,
            "base_lr" => cfg.optim.base_lr,
            "momentum" => cfg.optim.momentum,
            "weight_decay" => cfg.optim.weight_decay,
            "lr_drop" => cfg.optim.lr_drop,
            "drop_interval" => cfg.optim.drop_interval,
            "batch_size" => cfg.optim.batch_size,
            "max_iters" => cfg.optim.max_iters,
            "val_every" => cfg.optim.val_every,
            "log_every" => cfg.optim.log_every,
            "train_scenes" => cfg.train_scenes,
            "val_scenes" => cfg.val_scenes,
            "test_scenes" => cfg.test_scenes,
            "calib_samples" => cfg.calib_samples,
        }
        if let Some(v) = need::<f32>(&map, "stop_at_val_acc")? {
            cfg.optim.stop_at_val_acc = Some(v);
        }
        if let Some(v) = map.get("subsets") {
            cfg.subsets = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        }
        if let Some(v) = map.get("out_dir") {
            cfg.out_dir = Some(PathBuf::from(v));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let o = &self.optim;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("alphabet", self.alphabet.clone());
        kv("string_len", self.string_len.to_string());
        kv("scene_w", self.scene_w.to_string());
        kv("scene_h", self.scene_h.to_string());
        kv("layout", self.layout.clone());
        kv("arch", self.arch.clone());
        kv("base_lr", format!("{:?}", o.base_lr));
        kv("momentum", format!("{:?}", o.momentum));
        kv("weight_decay", format!("{:?}", o.weight_decay));
        kv("lr_drop", format!("{:?}", o.lr_drop));
        kv("drop_interval", o.drop_interval.to_string());
        kv("batch_size", o.batch_size.to_string());
        kv("max_iters", o.max_iters.to_string());
        kv("val_every", o.val_every.to_string());
        kv("log_every", o.log_every.to_string());
        if let Some(t) = o.stop_at_val_acc {
            kv("stop_at_val_acc", format!("{t:?}"));
        }
        kv("train_scenes", self.train_scenes.to_string());
        kv("val_scenes", self.val_scenes.to_string());
        kv("test_scenes", self.test_scenes.to_string());
        kv("calib_samples", self.calib_samples.to_string());
        kv("subsets", self.subsets.join(","));
        if let Some(d) = &self.out_dir {
            kv("out_dir", d.display().to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.alphabet()?;
        let layout = self.layout()?;
        if layout.string_len() != self.string_len {
            return Err(Error::invalid(format!(
                "layout {:?} decodes {} characters, config asks for {}",
                self.layout,
                layout.string_len(),
                self.string_len
            )));
        }
        for s in &self.subsets {
            Preset::parse(s)?;
        }
        if self.subsets.is_empty() {
            return Err(Error::invalid("at least one subset required"));
        }
        for (name, v) in [
            ("train_scenes", self.train_scenes),
            ("val_scenes", self.val_scenes),
            ("test_scenes", self.test_scenes),
            ("calib_samples", self.calib_samples),
            ("scene_w", self.scene_w),
            ("scene_h", self.scene_h),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if self.optim.seed != self.seed {
            return Err(Error::invalid("optimizer seed must equal the experiment seed"));
        }
        self.optim.validate()?;
        self.network()?;
        self.task(Preset::Clean).validate()
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::by_name(&self.alphabet)
    }

    pub fn layout(&self) -> Result<LayoutSpec> {
        LayoutSpec::by_name(&self.layout)
    }

    pub fn task(&self, preset: Preset) -> TaskConfig {
        let alpha = self.alphabet().unwrap_or_else(|_| Alphabet::desk16());
        TaskConfig::preset(preset, alpha, self.string_len, self.scene_w, self.scene_h, self.seed)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let alpha = self.alphabet()?;
        let font = GlyphFont::builtin(&alpha);
        DecodeConfig::new(self.layout()?, font, alpha, self.string_len)
    }

    /// Freshly initialized network for this experiment: He init with a
    /// zeroed classifier layer.
    pub fn network(&self) -> Result<Network> {
        let layout = self.layout()?;
        let input = [layout.channels(), layout.canvas_h(), layout.canvas_w()];
        let mut net = Network::by_arch(&self.arch, input, self.alphabet()?.class_count(), self.seed)?;
        net.zero_classifier();
        Ok(net)
    }
}

fn need<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<Option<T>> {
    map.get(key)
        .map(|v| v.parse().map_err(|_| Error::invalid(format!("config key {key}: cannot parse {v:?}"))))
        .transpose()
}
