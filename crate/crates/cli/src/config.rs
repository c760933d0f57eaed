//! Plain-text `key=value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, `--config` file, `--set`
//! overrides, dedicated command-line flags. The effective configuration is
//! written to `config.txt` in every run directory and can be passed back
//! through `--config` to repeat the run.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use downscale::evaluation::CarbonConfig;
use downscale::fields::ChannelMask;
use downscale::models::{ModelKind, ModelSpec, ResnetSpec, VitSpec};
use downscale::training::{LossConfig, MassConvention, MassUnits, TrainConfig};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.txt";

const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "run"),
    ("data.train", ""),
    ("data.val", ""),
    ("data.test", ""),
    ("synth.n", "8"),
    ("synth.ny", "64"),
    ("synth.nx", "64"),
    ("synth.profile", "default"),
    ("synth.spacing_km", "25"),
    ("model.kind", "vit"),
    ("model.scale", "2"),
    ("vit.patch", "2"),
    ("vit.window", "4"),
    ("vit.dim", "96"),
    ("vit.heads", "4"),
    ("vit.blocks", "4"),
    ("resnet.channels", "64"),
    ("resnet.blocks", "16"),
    ("resnet.large_kernel", "9"),
    ("resnet.small_kernel", "3"),
    ("train.lr", "0.0001"),
    ("train.epochs", "50"),
    ("train.batch_size", "8"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "0.00000001"),
    ("train.channels", "surface"),
    ("train.precision", "f64"),
    ("loss.use_mass_loss", "false"),
    ("loss.mass_weight", "1"),
    ("loss.mass_convention", "mean_preserving"),
    ("loss.per_variable", "true"),
    ("loss.mass_units", "physical"),
    ("eval.checkpoints", ""),
    ("eval.sample", "0"),
    ("eval.heatmap_var", "t2m"),
    ("carbon.power_watts", "100"),
    ("carbon.emission_factor", "0.7"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// `key=value` from `--set`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(CliError::UnknownKey {
                key: key.to_string(),
            }),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.raw(key).parse().map_err(|e: T::Err| CliError::BadValue {
            key: key.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(CliError::Usage(format!("{key} is not set")));
        }
        Ok(PathBuf::from(v))
    }

    pub fn optional_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn channels(&self) -> Result<ChannelMask, CliError> {
        self.get("train.channels")
    }

    pub fn model_spec(&self) -> Result<ModelSpec, CliError> {
        let kind: ModelKind = self.get("model.kind")?;
        let in_channels = self.channels()?.variables().len();
        let spec = ModelSpec {
            kind,
            in_channels,
            scale: self.get("model.scale")?,
            vit: VitSpec {
                patch: self.get("vit.patch")?,
                window: self.get("vit.window")?,
                dim: self.get("vit.dim")?,
                heads: self.get("vit.heads")?,
                blocks: self.get("vit.blocks")?,
            },
            resnet: ResnetSpec {
                channels: self.get("resnet.channels")?,
                blocks: self.get("resnet.blocks")?,
                large_kernel: self.get("resnet.large_kernel")?,
                small_kernel: self.get("resnet.small_kernel")?,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            lr: self.get("train.lr")?,
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            seed: self.get("seed")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            eps: self.get("train.eps")?,
            channels: self.channels()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> Result<LossConfig, CliError> {
        let cfg = LossConfig {
            use_mass_loss: self.get("loss.use_mass_loss")?,
            mass_weight: self.get("loss.mass_weight")?,
            mass_convention: self.get::<MassConvention>("loss.mass_convention")?,
            per_variable: self.get("loss.per_variable")?,
            mass_units: self.get::<MassUnits>("loss.mass_units")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn carbon(&self) -> Result<CarbonConfig, CliError> {
        let cfg = CarbonConfig {
            device_power_watts: self.get("carbon.power_watts")?,
            emission_factor_kg_per_kwh: self.get("carbon.emission_factor")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let mut c = RunConfig::default();
        let err = c.merge_text("train.lr=0.1\nbogus.key=1\n", "f").unwrap_err();
        assert!(err.to_string().contains("bogus.key"));
        assert!(c.set_pair("nope=1").is_err());
    }

    #[test]
    fn rendered_config_reloads_identically() {
        let mut c = RunConfig::default();
        c.set_pair("train.epochs=3").unwrap();
        c.set("data.train", "/tmp/x").unwrap();
        let mut d = RunConfig::default();
        d.merge_text(&c.render(), "echo").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn typed_views_match_library_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.loss_config().unwrap(), LossConfig::default());
        assert_eq!(c.model_spec().unwrap(), ModelSpec::vit(4));
        assert_eq!(c.carbon().unwrap(), CarbonConfig::default());
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut c = RunConfig::default();
        c.set("train.epochs", "many").unwrap();
        let err = c.train_config().unwrap_err();
        assert!(err.to_string().contains("train.epochs"));
    }
}
