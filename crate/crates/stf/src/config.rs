//! Run configuration: model, optimizer, data and stream settings loaded from
//! key=value text and overridden by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stf_core::layers::TdfVariant;
use stf_core::network::ModelConfig;
use stf_core::streams::Stream;
use stf_core::train::TrainConfig;

use crate::error::{CliError, Result};
use crate::text::parse_key_values;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub streams: Vec<Stream>,
    pub fusion_weights: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            streams: vec![Stream::Joint],
            fusion_weights: vec![1.0],
        }
    }
}

/// Components removable with `--ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    Mcf,
    Tdf,
    Mask,
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{key}: invalid list element '{v}'")))
        })
        .collect()
}

fn scalar<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("{key}: invalid value '{value}'")))
}

fn join<T: ToString>(items: &[T]) -> String {
    if items.is_empty() {
        return "none".into();
    }
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_tdf(value: &str) -> Result<TdfVariant> {
    match value {
        "off" => Ok(TdfVariant::Off),
        "plain" => Ok(TdfVariant::Plain),
        "motion" => Ok(TdfVariant::Motion),
        other => Err(CliError::Usage(format!(
            "tdf: expected off, plain or motion, got '{other}'"
        ))),
    }
}

fn tdf_name(v: TdfVariant) -> &'static str {
    match v {
        TdfVariant::Off => "off",
        TdfVariant::Plain => "plain",
        TdfVariant::Motion => "motion",
    }
}

pub fn parse_streams(value: &str) -> Result<Vec<Stream>> {
    let streams = value
        .split(',')
        .map(|s| s.trim().parse::<Stream>())
        .collect::<stf_core::Result<Vec<_>>>()?;
    if streams.is_empty() {
        return Err(CliError::Usage("at least one stream is required".into()));
    }
    Ok(streams)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "layout" => m.layout = value.to_string(),
            "channels" => m.channels = list(key, value)?,
            "mcf_layers" => m.mcf_layers = list(key, value)?,
            "grains" => m.grains_used = scalar(key, value)?,
            "tdf" => m.tdf = parse_tdf(value)?,
            "tdf_kernel" => m.tdf_kernel = scalar(key, value)?,
            "tdf_reduction" => m.tdf_reduction = scalar(key, value)?,
            "tdf_group_width" => m.tdf_group_width = scalar(key, value)?,
            "mask" => m.mask = scalar(key, value)?,
            "alpha" => m.alpha = scalar(key, value)?,
            "tcn_kernel" => m.tcn_kernel = scalar(key, value)?,
            "tcn_groups" => m.tcn_groups = scalar(key, value)?,
            "strided_blocks" => m.strided_blocks = list(key, value)?,
            "num_classes" => m.num_classes = scalar(key, value)?,
            "in_channels" => m.in_channels = scalar(key, value)?,
            "data_bn" => m.data_bn = scalar(key, value)?,
            "lr" => t.schedule.base = scalar(key, value)?,
            "lr_decay_epochs" => t.schedule.decay_epochs = list(key, value)?,
            "lr_factor" => t.schedule.factor = scalar(key, value)?,
            "momentum" => t.sgd.momentum = scalar(key, value)?,
            "weight_decay" => t.sgd.weight_decay = scalar(key, value)?,
            "epochs" => t.epochs = scalar(key, value)?,
            "batch_size" => t.batch_size = scalar(key, value)?,
            "seed" => t.seed = scalar(key, value)?,
            "frames" => t.frames = scalar(key, value)?,
            "streams" => self.streams = parse_streams(value)?,
            "fusion_weights" => self.fusion_weights = list(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        if !map.contains_key("fusion_weights") {
            cfg.fusion_weights = vec![1.0; cfg.streams.len()];
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_map(&parse_key_values(path, &text)?)
    }

    /// Canonical key=value rendering; `from_map` of its parse reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("layout", m.layout.clone());
        kv("channels", join(&m.channels));
        kv("mcf_layers", join(&m.mcf_layers));
        kv("grains", m.grains_used.to_string());
        kv("tdf", tdf_name(m.tdf).into());
        kv("tdf_kernel", m.tdf_kernel.to_string());
        kv("tdf_reduction", m.tdf_reduction.to_string());
        kv("tdf_group_width", m.tdf_group_width.to_string());
        kv("mask", m.mask.to_string());
        kv("alpha", m.alpha.to_string());
        kv("tcn_kernel", m.tcn_kernel.to_string());
        kv("tcn_groups", m.tcn_groups.to_string());
        kv("strided_blocks", join(&m.strided_blocks));
        kv("num_classes", m.num_classes.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("data_bn", m.data_bn.to_string());
        kv("lr", t.schedule.base.to_string());
        kv("lr_decay_epochs", join(&t.schedule.decay_epochs));
        kv("lr_factor", t.schedule.factor.to_string());
        kv("momentum", t.sgd.momentum.to_string());
        kv("weight_decay", t.sgd.weight_decay.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        kv("frames", t.frames.to_string());
        kv("streams", join(&self.streams));
        kv("fusion_weights", join(&self.fusion_weights));
        s
    }

    pub fn ablate(&mut self, what: Ablation) {
        match what {
            Ablation::Mcf => self.model.mcf_layers.clear(),
            Ablation::Tdf => self.model.tdf = TdfVariant::Off,
            Ablation::Mask => self.model.mask = false,
        }
    }

    /// Checks everything that does not need the layout.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.fusion_weights.len() != self.streams.len() {
            return Err(CliError::Usage(format!(
                "{} fusion weights for {} streams",
                self.fusion_weights.len(),
                self.streams.len()
            )));
        }
        if self.model.tdf_kernel.is_multiple_of(2) {
            return Err(CliError::Usage(format!(
                "tdf_kernel must be odd, got {}",
                self.model.tdf_kernel
            )));
        }
        Ok(())
    }
}
