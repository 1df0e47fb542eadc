//! One TOML document configuring every stage of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{LossWeights, DEFAULT_HIDDEN};
use crate::diversity::EigenSign;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{CounterfactualGrad, EncoderConfig, GnnConfig, ModelConfig};
use crate::sampler::SamplerConfig;
use crate::synth::GenConfig;
use crate::trainer::{Precision, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eigen_sign: EigenSign,
    pub counterfactual_grad: CounterfactualGrad,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            eigen_sign: EigenSign::Printed,
            counterfactual_grad: CounterfactualGrad::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: DEFAULT_HIDDEN }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GenConfig,
    pub encoder: EncoderConfig,
    pub gnn: GnnConfig,
    pub sampler: SamplerConfig,
    pub classifier: ClassifierConfig,
    pub loss: LossConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn check(ok: bool, path: &str, value: impl std::fmt::Display, rule: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(path, format!("{value} is out of range ({rule})")))
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            gnn: self.gnn.clone(),
            sampler: self.sampler.clone(),
            classifier_hidden: self.classifier.hidden,
            loss: LossWeights {
                alpha: self.loss.alpha,
                beta: self.loss.beta,
                gamma: self.loss.gamma,
            },
            eigen_sign: self.loss.eigen_sign,
            counterfactual_grad: self.loss.counterfactual_grad,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sampler;
        check(
            s.kappa > 0.0 && s.kappa <= 1.0,
            "sampler.kappa",
            s.kappa,
            "0 < kappa <= 1",
        )?;
        check(s.m >= 1, "sampler.m", s.m, ">= 1")?;
        check(s.temperature > 0.0, "sampler.temperature", s.temperature, "> 0")?;
        check(s.weight_eps > 0.0, "sampler.weight_eps", s.weight_eps, "> 0")?;

        let e = &self.encoder;
        check(e.dim >= 1, "encoder.dim", e.dim, ">= 1")?;
        check(
            (1..=24).contains(&e.vocab_bits),
            "encoder.vocab_bits",
            e.vocab_bits,
            "1..=24",
        )?;

        let g = &self.gnn;
        check(g.layers >= 1, "gnn.layers", g.layers, ">= 1")?;
        check(
            (0.0..1.0).contains(&g.dropout),
            "gnn.dropout",
            g.dropout,
            "0 <= dropout < 1",
        )?;
        check(g.leaky_slope >= 0.0, "gnn.leaky_slope", g.leaky_slope, ">= 0")?;

        check(
            self.classifier.hidden >= 1,
            "classifier.hidden",
            self.classifier.hidden,
            ">= 1",
        )?;

        for (name, v) in [
            ("loss.alpha", self.loss.alpha),
            ("loss.beta", self.loss.beta),
            ("loss.gamma", self.loss.gamma),
        ] {
            check((0.0..=2.0).contains(&v), name, v, "0 <= weight <= 2")?;
        }

        let t = &self.trainer;
        check(t.batch_size >= 1, "trainer.batch_size", t.batch_size, ">= 1")?;
        check(t.learning_rate > 0.0, "trainer.learning_rate", t.learning_rate, "> 0")?;
        check(t.epochs_max >= 1, "trainer.epochs_max", t.epochs_max, ">= 1")?;
        check(t.patience >= 1, "trainer.patience", t.patience, ">= 1")?;
        if t.precision != Precision::F64 {
            return Err(invalid("trainer.precision", "only \"f64\" is supported"));
        }

        let v = &self.eval;
        check(v.folds >= 2, "eval.folds", v.folds, ">= 2")?;
        check(
            v.threshold > 0.0 && v.threshold < 1.0,
            "eval.threshold",
            v.threshold,
            "0 < threshold < 1",
        )?;
        if let Some(d) = v.deadlines_min.iter().find(|d| !(**d >= 0.0)) {
            return Err(invalid("eval.deadlines_min", format!("{d} is negative")));
        }
        if let Some(s) = v.sigmas.iter().find(|s| !(**s >= 0.0)) {
            return Err(invalid("eval.sigmas", format!("{s} is negative")));
        }
        check(
            (0.0..=1.0).contains(&v.edge_rate),
            "eval.edge_rate",
            v.edge_rate,
            "0 <= rate <= 1",
        )?;

        self.generator
            .validate()
            .map_err(|e| invalid("generator", e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| invalid("<document>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
}

/// Parse `text`, then apply `section.key=value` overrides before validating.
/// Values are read as TOML scalars or arrays; anything that does not parse
/// is taken as a bare string.
pub fn config_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| invalid("<document>", e.message().to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| invalid(item, "override must look like section.key=value"))?;
        let key = key.trim();
        let value = parse_value(raw.trim());
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts
            .pop()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| invalid(key, "empty key"))?;
        let mut table = &mut doc;
        for part in parts {
            table = table
                .entry(part)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| invalid(key, format!("{part} is not a section")))?;
        }
        table.insert(leaf.to_string(), value);
    }
    RunConfig::from_toml_str(&toml::to_string(&doc).map_err(|e| invalid("<overrides>", e.to_string()))?)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.trainer.batch_size, 128);
        assert_eq!(cfg.trainer.learning_rate, 0.005);
        assert_eq!(cfg.trainer.patience, 15);
        assert_eq!(cfg.encoder.dim, 64);
        assert_eq!(cfg.gnn.dropout, 0.5);
        assert_eq!(cfg.gnn.layers, 2);
        assert_eq!((cfg.sampler.m, cfg.sampler.kappa), (4, 0.3));
        assert_eq!((cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma), (1.0, 1.0, 1.0));
    }

    #[test]
    fn validation_names_the_path() {
        let err = RunConfig::from_toml_str("[sampler]\nkappa = 1.5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("sampler.kappa"), "{err}");
        let err = RunConfig::from_toml_str("[trainer]\nprecision = \"f32\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("trainer.precision"), "{err}");
        let err = RunConfig::from_toml_str("[loss]\ngamma = 3.0\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("loss.gamma"), "{err}");
        assert!(RunConfig::from_toml_str("[sampler]\nbogus = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let base = "[sampler]\nm = 3\n";
        let cfg = config_with_overrides(base, &[]).unwrap();
        assert_eq!(cfg.sampler.m, 3);
        let cfg = config_with_overrides(
            base,
            &[
                "sampler.kappa=0.5".into(),
                "loss.eigen_sign=flipped".into(),
                "eval.sigmas=[0.0, 2.0]".into(),
                "trainer.seed = 9".into(),
            ],
        )
        .unwrap();
        assert_eq!((cfg.sampler.m, cfg.sampler.kappa, cfg.trainer.seed), (3, 0.5, 9));
        assert_eq!(cfg.loss.eigen_sign, EigenSign::Flipped);
        assert_eq!(cfg.eval.sigmas, vec![0.0, 2.0]);
        let err = config_with_overrides("", &["sampler.kappa=2".into()])
            .unwrap_err()
            .to_string();
        assert!(err.contains("sampler.kappa"), "{err}");
        assert!(config_with_overrides("", &["kappa".into()]).is_err());
        assert!(config_with_overrides("", &["sampler.nope=1".into()]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.sampler.m = 3;
        cfg.loss.eigen_sign = EigenSign::Flipped;
        cfg.eval.deadlines_min = vec![0.0, 30.5];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        assert_eq!(load_config(&path).unwrap(), cfg);
    }
}
