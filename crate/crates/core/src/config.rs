//! Flat `key = value` run configuration shared by the command-line tools.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::losses::LossWeights;
use crate::train::TrainConfig;

/// Every key a config file may set.
pub const KEYS: &[&str] = &[
    "n_layers",
    "rank",
    "lambda_photo",
    "lambda_geo",
    "lambda_temp",
    "lambda_occ",
    "lambda_bins",
    "lambda_tv",
    "patch_size",
    "angular_res",
    "lr",
    "lr_d",
    "epochs",
    "iterations",
    "seed",
    "provider.kind",
    "provider.depth_dir",
    "provider.flow_dir",
    "provider.a",
    "provider.b",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Oracle,
    Files,
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(ProviderKind::Oracle),
            "files" => Ok(ProviderKind::Files),
            other => Err(Error::Config(format!("provider.kind must be oracle or files, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub depth_dir: Option<PathBuf>,
    pub flow_dir: Option<PathBuf>,
    /// Depth-to-disparity map for file providers; unset falls back to the
    /// scene recipe when one is present.
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self { kind: ProviderKind::Oracle, depth_dir: None, flow_dir: None, a: None, b: None }
    }
}

/// Resolved settings. Fields left `None` keep the default of whichever
/// phase consumes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_layers: usize,
    pub rank: Option<usize>,
    pub weights: LossWeights,
    pub patch_size: usize,
    pub angular_res: usize,
    pub lr: Option<f64>,
    pub lr_d: Option<f64>,
    pub epochs: Option<usize>,
    pub iterations: Option<usize>,
    pub seed: u64,
    pub provider: ProviderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            rank: None,
            weights: LossWeights::default(),
            patch_size: 32,
            angular_res: 7,
            lr: None,
            lr_d: None,
            epochs: None,
            iterations: None,
            seed: 0,
            provider: ProviderConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

/// Raw entries of a config file, in key order.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {key:?} set twice", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "n_layers" => self.n_layers = parse_value(key, value)?,
            "rank" => self.rank = Some(parse_value(key, value)?),
            "lambda_photo" => w.photo = parse_value(key, value)?,
            "lambda_geo" => w.geo = parse_value(key, value)?,
            "lambda_temp" => w.temp = parse_value(key, value)?,
            "lambda_occ" => w.occ = parse_value(key, value)?,
            "lambda_bins" => w.bins = parse_value(key, value)?,
            "lambda_tv" => w.tv = parse_value(key, value)?,
            "patch_size" => self.patch_size = parse_value(key, value)?,
            "angular_res" => self.angular_res = parse_value(key, value)?,
            "lr" => self.lr = Some(parse_value(key, value)?),
            "lr_d" => self.lr_d = Some(parse_value(key, value)?),
            "epochs" => self.epochs = Some(parse_value(key, value)?),
            "iterations" => self.iterations = Some(parse_value(key, value)?),
            "seed" => self.seed = parse_value(key, value)?,
            "provider.kind" => self.provider.kind = value.parse()?,
            "provider.depth_dir" => self.provider.depth_dir = Some(PathBuf::from(value)),
            "provider.flow_dir" => self.provider.flow_dir = Some(PathBuf::from(value)),
            "provider.a" => self.provider.a = Some(parse_value(key, value)?),
            "provider.b" => self.provider.b = Some(parse_value(key, value)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (k, v) in parse_entries(text)? {
            config.set(&k, &v)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.rank == Some(0) {
            return Err(Error::Config("n_layers and rank must be positive".into()));
        }
        if self.angular_res % 2 == 0 || self.angular_res == 0 {
            return Err(Error::Config(format!("angular_res must be odd, got {}", self.angular_res)));
        }
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return Err(Error::Config(format!("patch_size must be a positive multiple of 4, got {}", self.patch_size)));
        }
        if self.provider.a.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::Config("provider.a must be positive".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// `key = value` text that parses back to `self`.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut lines = vec![
            format!("n_layers = {}", self.n_layers),
            format!("lambda_photo = {}", w.photo),
            format!("lambda_geo = {}", w.geo),
            format!("lambda_temp = {}", w.temp),
            format!("lambda_occ = {}", w.occ),
            format!("lambda_bins = {}", w.bins),
            format!("lambda_tv = {}", w.tv),
            format!("patch_size = {}", self.patch_size),
            format!("angular_res = {}", self.angular_res),
            format!("seed = {}", self.seed),
            format!("provider.kind = {}", if self.provider.kind == ProviderKind::Oracle { "oracle" } else { "files" }),
        ];
        let optional = [
            ("rank", self.rank.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lr_d", self.lr_d.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("provider.a", self.provider.a.map(|v| v.to_string())),
            ("provider.b", self.provider.b.map(|v| v.to_string())),
            ("provider.depth_dir", self.provider.depth_dir.as_ref().map(|p| p.display().to_string())),
            ("provider.flow_dir", self.provider.flow_dir.as_ref().map(|p| p.display().to_string())),
        ];
        lines.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| format!("{k} = {v}"))));
        lines.join("\n") + "\n"
    }

    pub fn fit_config(&self) -> FitConfig {
        let base = FitConfig::default();
        FitConfig {
            iterations: self.iterations.unwrap_or(base.iterations),
            lr: self.lr.unwrap_or(base.lr),
            lr_d: self.lr_d.unwrap_or(base.lr_d),
            layers: self.n_layers,
            rank: self.rank.unwrap_or(base.rank),
            weights: self.weights,
            seed: self.seed,
            ..base
        }
    }

    /// Overrides the schedule of `c` and leaves its architecture alone.
    pub fn apply_schedule(&self, c: &mut TrainConfig) {
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.lr = self.lr.unwrap_or(c.lr);
        c.seed = self.seed;
        c.weights = self.weights;
    }

    /// `base` (a phase default) overridden by the settings present here.
    pub fn train_config(&self, base: TrainConfig) -> Result<TrainConfig> {
        let mut c = base;
        self.apply_schedule(&mut c);
        c.grid = crate::lf::AngularGrid::square(self.angular_res)?;
        c.synthesis.layers = self.n_layers;
        c.displacement.layers = self.n_layers;
        c.synthesis.rank = self.rank.unwrap_or(c.synthesis.rank);
        c.refinement.patch = self.patch_size;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_keys() {
        let text = "# run\nn_layers = 3\nrank=12\nlambda_occ = 0.4 # stronger\n\nprovider.kind = files\nprovider.depth_dir = /d\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.rank, Some(12));
        assert_eq!(c.weights.occ, 0.4);
        assert_eq!(c.provider.kind, ProviderKind::Files);
        assert_eq!(c.provider.depth_dir, Some(PathBuf::from("/d")));
    }

    #[test]
    fn rejects_unknown_repeated_and_malformed() {
        assert!(RunConfig::parse("lambda_phot = 1").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("seed = one").is_err());
        assert!(RunConfig::parse("angular_res = 4").is_err());
        assert!(RunConfig::parse("provider.kind = magic").is_err());
    }

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.003").unwrap();
        c.set("provider.flow_dir", "flows").unwrap();
        c.set("lambda_tv", "0.25").unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn overrides_reach_the_phase_configs() {
        let c = RunConfig::parse("rank = 6\nepochs = 2\nangular_res = 5\nlambda_temp = 0").unwrap();
        let t = c.train_config(TrainConfig::selfsup()).unwrap();
        assert_eq!((t.synthesis.rank, t.epochs, t.grid.len(), t.lr), (6, 2, 25, 1e-4));
        assert_eq!(t.weights.temp, 0.0);
        let f = c.fit_config();
        assert_eq!((f.rank, f.weights.temp), (6, 0.0));
    }
}
