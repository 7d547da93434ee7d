//! Run configuration file: one `key = value` per line, `#` starts a comment.
//! Keys that are absent take their defaults; unknown or repeated keys are
//! rejected.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{NpsConfig, RoiPlacement};
use crate::models::{DiscriminatorConfig, GeneratorConfig};
use crate::training::{GeneratorLoss, L1Domain, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got {s:?}")),
        }
    }
}

impl fmt::Display for L1Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            L1Domain::Wavelet => "wavelet",
            L1Domain::Image => "image",
        })
    }
}

impl FromStr for L1Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wavelet" => Ok(L1Domain::Wavelet),
            "image" => Ok(L1Domain::Image),
            _ => Err(format!("expected wavelet or image, got {s:?}")),
        }
    }
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Minimax => "minimax",
        })
    }
}

impl FromStr for GeneratorLoss {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "minimax" => Ok(GeneratorLoss::Minimax),
            _ => Err(format!("expected non_saturating or minimax, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub nps: NpsConfig,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            nps: NpsConfig::default(),
            precision: Precision::default(),
        }
    }
}

fn parse_value<V: FromStr>(key: &str, raw: &str, line: usize) -> Result<V>
where
    V::Err: fmt::Display,
{
    raw.parse().map_err(|e| Error::Config(format!("line {line}: bad value for {key}: {e}")))
}

impl RunConfig {
    /// Every key with its current value, in file order.
    fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, g, d, n) = (&self.train, &self.generator, &self.discriminator, &self.nps);
        let nps_seed = match &n.placement {
            RoiPlacement::Seeded(s) => s.to_string(),
            RoiPlacement::Explicit(_) => "explicit".to_string(),
        };
        vec![
            ("precision", self.precision.to_string()),
            ("image_size", g.input_size.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lambda_l1", t.lambda_l1.to_string()),
            ("steps", t.steps.to_string()),
            ("seed", t.seed.to_string()),
            ("eval_every", t.eval_every.to_string()),
            ("history_buffer_on", t.history_buffer_on.to_string()),
            ("mbd_on", t.mbd_on.to_string()),
            ("haar_on", t.haar_on.to_string()),
            ("gan_on", t.gan_on.to_string()),
            ("l1_domain", t.l1_domain.to_string()),
            ("generator_loss", t.generator_loss.to_string()),
            ("gen_base_channels", g.base_channels.to_string()),
            ("gen_res_blocks", g.n_res_blocks.to_string()),
            ("gen_se_reduction", g.se_reduction.to_string()),
            ("gen_depth", g.depth.to_string()),
            ("gen_noise_std", g.noise_std.to_string()),
            ("disc_convs", d.n_conv.to_string()),
            ("disc_base_channels", d.base_channels.to_string()),
            ("mbd_kernels", d.mbd_kernels.to_string()),
            ("mbd_dim", d.mbd_dim.to_string()),
            ("condition_on_source", d.condition_on_source.to_string()),
            ("nps_roi_size", n.roi_size.to_string()),
            ("nps_n_roi", n.n_roi.to_string()),
            ("nps_seed", nps_seed),
        ]
    }

    fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let (t, g, d, n) = (&mut self.train, &mut self.generator, &mut self.discriminator, &mut self.nps);
        match key {
            "precision" => self.precision = parse_value(key, raw, line)?,
            "image_size" => g.input_size = parse_value(key, raw, line)?,
            "batch_size" => t.batch_size = parse_value(key, raw, line)?,
            "lr" => t.lr = parse_value(key, raw, line)?,
            "lambda_l1" => t.lambda_l1 = parse_value(key, raw, line)?,
            "steps" => t.steps = parse_value(key, raw, line)?,
            "seed" => t.seed = parse_value(key, raw, line)?,
            "eval_every" => t.eval_every = parse_value(key, raw, line)?,
            "history_buffer_on" => t.history_buffer_on = parse_value(key, raw, line)?,
            "mbd_on" => t.mbd_on = parse_value(key, raw, line)?,
            "haar_on" => t.haar_on = parse_value(key, raw, line)?,
            "gan_on" => t.gan_on = parse_value(key, raw, line)?,
            "l1_domain" => t.l1_domain = parse_value(key, raw, line)?,
            "generator_loss" => t.generator_loss = parse_value(key, raw, line)?,
            "gen_base_channels" => g.base_channels = parse_value(key, raw, line)?,
            "gen_res_blocks" => g.n_res_blocks = parse_value(key, raw, line)?,
            "gen_se_reduction" => g.se_reduction = parse_value(key, raw, line)?,
            "gen_depth" => g.depth = parse_value(key, raw, line)?,
            "gen_noise_std" => g.noise_std = parse_value(key, raw, line)?,
            "disc_convs" => d.n_conv = parse_value(key, raw, line)?,
            "disc_base_channels" => d.base_channels = parse_value(key, raw, line)?,
            "mbd_kernels" => d.mbd_kernels = parse_value(key, raw, line)?,
            "mbd_dim" => d.mbd_dim = parse_value(key, raw, line)?,
            "condition_on_source" => d.condition_on_source = parse_value(key, raw, line)?,
            "nps_roi_size" => n.roi_size = parse_value(key, raw, line)?,
            "nps_n_roi" => n.n_roi = parse_value(key, raw, line)?,
            "nps_seed" => n.placement = RoiPlacement::Seeded(parse_value(key, raw, line)?),
            _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got {content:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key:?}")));
            }
            cfg.set(key, value.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.nps.validate()
    }

    /// Canonical text listing every key; `parse(echo())` gives back `self`.
    pub fn echo(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.echo())
    }
}
