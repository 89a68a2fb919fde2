//! Training configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! lr0 = 0.0005
//! widths = 16,32,64,128
//! use_tde = false
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::AdamConfig;
use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::kernels::attention::SoftmaxAxis;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    /// Horizon of the polynomial schedule.
    pub max_iteration: u64,
    /// Stop after this many updates even though the schedule has not
    /// reached zero. `None` runs to `max_iteration`.
    pub stop_at: Option<u64>,
    pub power: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_interval: u64,
    /// Write `checkpoint.bin` every this many steps (0: only at the end).
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            batch_size: 8,
            max_iteration: 40_000,
            stop_at: Some(500),
            power: 0.9,
            adam: AdamConfig::default(),
            seed: 0,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            eval_interval: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe: batch 32, the whole 40 000-iteration schedule.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 32,
            stop_at: None,
            ..Self::default()
        }
    }

    /// Number of updates a run performs.
    pub fn total_steps(&self) -> u64 {
        self.stop_at.map_or(self.max_iteration, |s| s.min(self.max_iteration))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.power > 0.0) {
            return bad(format!("power must be positive, got {}", self.power));
        }
        if self.max_iteration == 0 {
            return bad("max_iteration must be positive".into());
        }
        if self.stop_at == Some(0) {
            return bad("stop_at must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        for (name, p) in [
            ("flip_prob", self.augment.flip_prob),
            ("crop_prob", self.augment.crop_prob),
            ("swap_prob", self.augment.swap_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        self.model.validate()
    }

    /// Sets one key; the same names are used in files and CLI overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lr0" => self.lr0 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_iteration" => self.max_iteration = parse(key, v)?,
            "stop_at" => {
                let s: u64 = parse(key, v)?;
                self.stop_at = (s > 0).then_some(s);
            }
            "power" => self.power = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "adam_eps" => self.adam.eps = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "decoupled_weight_decay" => self.adam.decoupled = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "widths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.model.widths = parts
                    .try_into()
                    .map_err(|_| Error::Config("widths needs four comma-separated values".into()))?;
            }
            "vocab" => self.model.vocab = parse(key, v)?,
            "text_dim" => self.model.text_dim = parse(key, v)?,
            "use_ifr" => self.model.flags.use_ifr = parse_bool(key, v)?,
            "use_tde" => self.model.flags.use_tde = parse_bool(key, v)?,
            "use_itff" => self.model.flags.use_itff = parse_bool(key, v)?,
            "use_text" => self.model.flags.use_text = parse_bool(key, v)?,
            "softmax_axis" => {
                self.model.softmax_axis = match v {
                    "channel" => SoftmaxAxis::Channel,
                    "spatial" => SoftmaxAxis::Spatial,
                    _ => return Err(Error::Config(format!("softmax_axis: expected channel or spatial, got `{v}`"))),
                }
            }
            "itff_reduction" => self.model.itff_reduction = parse(key, v)?,
            "spatial_kernel" => self.model.spatial_kernel = parse(key, v)?,
            "flip_prob" => self.augment.flip_prob = parse(key, v)?,
            "crop_size" => {
                let c: usize = parse(key, v)?;
                self.augment.crop_size = (c > 0).then_some(c);
            }
            "crop_prob" => self.augment.crop_prob = parse(key, v)?,
            "swap_prob" => self.augment.swap_prob = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip(&e))))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// The configuration in the file format, one key per line.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let f = m.flags;
        let w = m.widths;
        let axis = match m.softmax_axis {
            SoftmaxAxis::Channel => "channel",
            SoftmaxAxis::Spatial => "spatial",
        };
        let lines = [
            format!("lr0 = {}", self.lr0),
            format!("batch_size = {}", self.batch_size),
            format!("max_iteration = {}", self.max_iteration),
            format!("stop_at = {}", self.stop_at.unwrap_or(0)),
            format!("power = {}", self.power),
            format!("beta1 = {}", self.adam.beta1),
            format!("beta2 = {}", self.adam.beta2),
            format!("adam_eps = {}", self.adam.eps),
            format!("weight_decay = {}", self.adam.weight_decay),
            format!("decoupled_weight_decay = {}", self.adam.decoupled),
            format!("seed = {}", self.seed),
            format!("widths = {},{},{},{}", w[0], w[1], w[2], w[3]),
            format!("vocab = {}", m.vocab),
            format!("text_dim = {}", m.text_dim),
            format!("use_ifr = {}", f.use_ifr),
            format!("use_tde = {}", f.use_tde),
            format!("use_itff = {}", f.use_itff),
            format!("use_text = {}", f.use_text),
            format!("softmax_axis = {axis}"),
            format!("itff_reduction = {}", m.itff_reduction),
            format!("spatial_kernel = {}", m.spatial_kernel),
            format!("flip_prob = {}", self.augment.flip_prob),
            format!("crop_size = {}", self.augment.crop_size.unwrap_or(0)),
            format!("crop_prob = {}", self.augment.crop_prob),
            format!("swap_prob = {}", self.augment.swap_prob),
            format!("eval_interval = {}", self.eval_interval),
            format!("checkpoint_interval = {}", self.checkpoint_interval),
        ];
        lines.join("\n") + "\n"
    }
}

fn strip(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{}: cannot parse `{v}`: {e}", key.trim())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected a boolean, got `{v}`", key.trim()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# desk run\nlr0 = 0.001\nwidths = 8, 16, 32, 64  # small\nuse_tde = false\ncrop_size = 48\n")
            .unwrap();
        assert_eq!(cfg.lr0, 0.001);
        assert_eq!(cfg.model.widths, [8, 16, 32, 64]);
        assert!(!cfg.model.flags.use_tde);
        assert_eq!(cfg.augment.crop_size, Some(48));
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let mut cfg = TrainConfig::default();
        let e = cfg.apply_text("lr0 = 0.1\nbogus = 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("bogus"), "{e}");
        let e = cfg.apply_text("widths = 1,2\n").unwrap_err();
        assert!(e.to_string().contains("four"), "{e}");
        assert!(cfg.apply_text("no equals sign\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().total_steps(), 500);
        assert_eq!(TrainConfig::full_scale().total_steps(), 40_000);
        let mut c = TrainConfig::default();
        c.adam.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.set("use_text", "false").unwrap();
        assert!(c.validate().is_err(), "TDE without text must be rejected");
    }
}
