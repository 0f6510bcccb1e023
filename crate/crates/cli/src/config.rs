//! Flat `key=value` run configuration.
//!
//! A config file holds one `key = value` pair per line; blank lines and lines
//! starting with `#` are ignored. Command-line flags are merged on top of the
//! file, so a flag always wins over the same key in the file. Unknown keys are
//! rejected so that typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use evadv_core::attack::{AttackConfig, AttackMode, NullConfig};
use evadv_core::dataset::SynthConfig;
use evadv_core::experiment::{AdvTrainConfig, AttackSetup};
use evadv_core::grid::{GridSpec, Projection};
use evadv_core::kernel::{KernelParams, MlpKernel};
use evadv_core::synth::SceneConfig;
use evadv_core::TrainConfig;

/// Every key a run config may set, with its default.
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("out", "out"),
    ("jobs", "0"),
    ("data", "data"),
    ("checkpoint", "out/model.ckpt"),
    ("checkpoints", ""),
    // synthetic data
    ("synth.train", "500"),
    ("synth.test", "200"),
    ("synth.width", "32"),
    ("synth.height", "32"),
    ("synth.steps", "600"),
    ("synth.contrast", "0.15"),
    ("synth.motion_frequency", "2.0"),
    ("synth.amplitude", "4.0"),
    ("synth.duration", "0.3"),
    // representation
    ("grid.bins", "5"),
    ("grid.kernel", "trilinear"),
    ("grid.projection", "est"),
    // training
    ("train.epochs", "15"),
    ("train.lr", "3e-3"),
    ("train.lr_decay", "0.5"),
    ("train.decay_every", "5"),
    ("train.batch_size", "16"),
    // attacks
    ("attack.mode", "combined"),
    ("attack.epsilon", ""),
    ("attack.alpha", "0.5"),
    ("attack.iterations", "3"),
    ("attack.frequency", "1.0"),
    ("attack.cap", "0.1"),
    ("attack.lambda", "1e-5"),
    ("attack.targeted", "false"),
    ("attack.save", "false"),
    ("null.copies", "5"),
    ("null.top_fraction", "0.01"),
    ("null.epsilon", "0.1"),
    ("null.alpha", "0.01"),
    ("null.iterations", "10"),
    ("null.lambda", "1e-5"),
    // adversarial training
    ("adv.epochs", "5"),
    ("adv.lr", "1e-5"),
    ("adv.lr_decay", "1.0"),
    ("adv.batch_size", "16"),
    // sweeps
    ("sweep.epsilons", "0,0.05,0.1,0.15,0.2,0.25"),
    ("sweep.frequencies", "1.0,0.5"),
    // rendering
    ("render.index", "0"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected `key = value`, got `{l}`", i + 1))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

impl RunConfig {
    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => bail!("unknown config key `{key}`"),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("undeclared key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{raw}`: {e}"))
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| anyhow!("config key `{key}`: cannot parse `{s}`: {e}")))
            .collect()
    }

    pub fn path(&self, key: &str) -> PathBuf {
        PathBuf::from(self.raw(key))
    }

    /// The whole configuration as `key=value` lines, sorted by key.
    pub fn dump(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            train: self.get("synth.train")?,
            test: self.get("synth.test")?,
            scene: SceneConfig {
                width: self.get("synth.width")?,
                height: self.get("synth.height")?,
                contrast_threshold: self.get("synth.contrast")?,
                motion_frequency: self.get("synth.motion_frequency")?,
                amplitude: self.get("synth.amplitude")?,
                duration: self.get("synth.duration")?,
                steps: self.get("synth.steps")?,
                ..SceneConfig::default()
            },
            seed: self.seed()?,
        })
    }

    /// Representation for a `width × height` sensor.
    pub fn grid(&self, width: u16, height: u16) -> Result<GridSpec> {
        let bins: usize = self.get("grid.bins")?;
        if bins == 0 {
            bail!("grid.bins must be at least 1");
        }
        let tau = 1.0 / bins as f64;
        let kernel = match self.raw("grid.kernel") {
            "trilinear" => KernelParams::trilinear(tau),
            "exponential" => KernelParams::exponential(tau),
            "mlp" => KernelParams::mlp(tau, MlpKernel::fitted_trilinear(self.seed()?)),
            other => bail!("unknown kernel `{other}` (trilinear, exponential, mlp)"),
        };
        let projection = Projection::parse(self.raw("grid.projection"))
            .ok_or_else(|| anyhow!("unknown projection `{}`", self.raw("grid.projection")))?;
        let spec = GridSpec::est(width, height, bins).with_kernel(kernel).with_projection(projection);
        spec.validate()?;
        Ok(spec)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            lr: self.get("train.lr")?,
            lr_decay: self.get("train.lr_decay")?,
            decay_every: self.get("train.decay_every")?,
            seed: self.seed()?,
        })
    }

    pub fn attack(&self) -> Result<AttackSetup> {
        let mode = AttackMode::parse(self.raw("attack.mode"))
            .ok_or_else(|| anyhow!("unknown attack mode `{}` (none, shift, generate, combined)", self.raw("attack.mode")))?;
        let mut shift = AttackConfig {
            alpha: self.get("attack.alpha")?,
            iterations: self.get("attack.iterations")?,
            frequency: self.get("attack.frequency")?,
            cap: self.get("attack.cap")?,
            lambda: self.get("attack.lambda")?,
            ..AttackConfig::default()
        };
        shift.epsilon = self.optional("attack.epsilon")?;
        shift.validate()?;
        let null = NullConfig {
            copies: self.get("null.copies")?,
            top_fraction: self.get("null.top_fraction")?,
            epsilon: self.get("null.epsilon")?,
            alpha: self.get("null.alpha")?,
            iterations: self.get("null.iterations")?,
            lambda: self.get("null.lambda")?,
        };
        null.validate()?;
        Ok(AttackSetup {
            mode,
            shift,
            null,
            targeted: self.get("attack.targeted")?,
            seed: self.seed()?,
        })
    }

    pub fn adv_train(&self) -> Result<AdvTrainConfig> {
        Ok(AdvTrainConfig {
            epochs: self.get("adv.epochs")?,
            lr: self.get("adv.lr")?,
            lr_decay: self.get("adv.lr_decay")?,
            batch_size: self.get("adv.batch_size")?,
            attack: self.attack()?,
            seed: self.seed()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nseed = 3\ntrain.epochs=2\n\ngrid.bins = 9\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[("seed".into(), "11".into())]).unwrap();
        assert_eq!(cfg.seed().unwrap(), 11);
        assert_eq!(cfg.train().unwrap().epochs, 2);
        assert_eq!(cfg.grid(8, 8).unwrap().bins, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        assert!(RunConfig::load(None, &[("bogus".into(), "1".into())]).is_err());
        let cfg = RunConfig::load(None, &[("train.epochs".into(), "many".into())]).unwrap();
        assert!(cfg.train().is_err());
        let cfg = RunConfig::load(None, &[("attack.mode".into(), "sideways".into())]).unwrap();
        assert!(cfg.attack().is_err());
    }

    #[test]
    fn optional_epsilon() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.attack().unwrap().shift.epsilon, None);
        let cfg = RunConfig::load(None, &[("attack.epsilon".into(), "0.2".into())]).unwrap();
        assert_eq!(cfg.attack().unwrap().shift.epsilon, Some(0.2));
        assert_eq!(cfg.list::<f64>("sweep.frequencies").unwrap(), vec![1.0, 0.5]);
    }
}
