//! Flat `key=value` configuration with namespaced keys. Every key has a
//! default; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use evfuse_core::fusion::DEFAULT_EPS_CONFLICT;
use evfuse_core::losses::LossConfig;
use evfuse_core::pipeline::TrainConfig;
use evfuse_core::synth::{PerturbSpec, SynthParams, DEFAULT_BOX};

use crate::error::{CliError, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
}

fn defaults() -> Vec<(&'static str, String)> {
    let t = TrainConfig::toy();
    let s = SynthParams::default();
    let s_ = |v: &dyn Display| v.to_string();
    vec![
        ("anneal.beta0", s_(&t.beta0)),
        ("fuse.eps_conflict", s_(&DEFAULT_EPS_CONFLICT)),
        ("gradcheck.loss", "all".into()),
        ("gradcheck.seed", "0".into()),
        ("gradcheck.step", s_(&evfuse_core::gradcheck::DEFAULT_STEP)),
        ("gradcheck.tolerance", "0.0001".into()),
        ("gradcheck.trials", "100".into()),
        ("loss.detach_uncertainty", s_(&t.loss.detach_uncertainty)),
        ("loss.smooth", s_(&t.loss.smooth)),
        ("sweep.box", s_(&DEFAULT_BOX)),
        ("sweep.ct", "true".into()),
        ("sweep.kind", "noise".into()),
        ("sweep.levels", "0,0.1,0.2,0.3".into()),
        ("sweep.pet", "true".into()),
        ("sweep.seed", "0".into()),
        ("synth.count", "20".into()),
        ("synth.ct_decoys", s_(&s.ct_decoys)),
        ("synth.ct_noise_hu", s_(&s.ct_noise_hu)),
        ("synth.height", "64".into()),
        ("synth.negative_ratio", s_(&s.negative_ratio)),
        ("synth.organs", s_(&s.organs)),
        ("synth.pet_decoy", s_(&s.pet_decoy)),
        ("synth.pet_noise", s_(&s.pet_noise)),
        ("synth.seed", "0".into()),
        ("synth.tumor_contrast_hu", s_(&s.tumor_contrast_hu)),
        ("synth.tumor_radius_max", s_(&s.tumor_radius.1)),
        ("synth.tumor_radius_min", s_(&s.tumor_radius.0)),
        ("synth.tumor_uptake_max", s_(&s.tumor_uptake.1)),
        ("synth.tumor_uptake_min", s_(&s.tumor_uptake.0)),
        ("synth.width", "64".into()),
        ("train.adam_eps", s_(&t.adam_eps)),
        ("train.batch_size", s_(&t.batch_size)),
        ("train.beta1", s_(&t.beta1)),
        ("train.beta2", s_(&t.beta2)),
        ("train.detach_fusion", s_(&t.detach_fusion)),
        ("train.epochs", s_(&t.epochs)),
        ("train.hidden", s_(&t.hidden)),
        ("train.lr", s_(&t.learning_rate)),
        ("train.seed", s_(&t.seed)),
    ]
}

impl Default for Config {
    fn default() -> Self {
        Self { values: defaults().into_iter().collect() }
    }
}

impl Config {
    /// Defaults overlaid with the lines of `text`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.overlay(text)?;
        Ok(cfg)
    }

    pub fn overlay(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::parse(&fsio::read_text(p)?),
            None => Ok(Self::default()),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = self.values.iter_mut().find(|(k, _)| **k == key).map(|(_, v)| v);
        match slot {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(CliError::usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key=value` overrides from the command line.
    pub fn set_all(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p.split_once('=').ok_or_else(|| CliError::usage(format!("--set expects key=value, got {p:?}")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("contract violation: unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::usage(format!("bad value {raw:?} for {key}")))
    }

    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| CliError::usage(format!("bad number {s:?} in {key}"))))
            .collect()
    }

    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            learning_rate: self.get("train.lr")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            adam_eps: self.get("train.adam_eps")?,
            epochs: self.get("train.epochs")?,
            beta0: self.get("anneal.beta0")?,
            batch_size: self.get("train.batch_size")?,
            hidden: self.get("train.hidden")?,
            seed: self.get("train.seed")?,
            detach_fusion: self.get("train.detach_fusion")?,
            loss: LossConfig { smooth: self.get("loss.smooth")?, detach_uncertainty: self.get("loss.detach_uncertainty")? },
        };
        cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn synth(&self) -> Result<SynthParams> {
        let p = SynthParams {
            tumor_radius: (self.get("synth.tumor_radius_min")?, self.get("synth.tumor_radius_max")?),
            tumor_contrast_hu: self.get("synth.tumor_contrast_hu")?,
            tumor_uptake: (self.get("synth.tumor_uptake_min")?, self.get("synth.tumor_uptake_max")?),
            organs: self.get("synth.organs")?,
            ct_decoys: self.get("synth.ct_decoys")?,
            pet_decoy: self.get("synth.pet_decoy")?,
            negative_ratio: self.get("synth.negative_ratio")?,
            ct_noise_hu: self.get("synth.ct_noise_hu")?,
            pet_noise: self.get("synth.pet_noise")?,
        };
        p.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(p)
    }

    pub fn sweep_specs(&self) -> Result<Vec<PerturbSpec>> {
        let side: usize = self.get("sweep.box")?;
        let specs: Vec<PerturbSpec> = match self.raw("sweep.kind") {
            "noise" => self.list("sweep.levels")?.into_iter().map(PerturbSpec::noise).collect(),
            "mask" => self.list("sweep.levels")?.into_iter().map(|r| PerturbSpec::Mask { ratio: r, side }).collect(),
            other => return Err(CliError::usage(format!("sweep.kind must be noise or mask, got {other:?}"))),
        };
        for s in &specs {
            s.validate().map_err(|e| CliError::usage(e.to_string()))?;
        }
        Ok(specs)
    }
}
