//! The JSON run configuration.
//!
//! One document holds the corpus, pretraining, finetuning and probe
//! settings. Unknown keys are rejected and omitted keys take the defaults
//! of the corresponding core types.

use std::path::Path;

use pcrl_core::downstream::{FinetuneConfig, ProbeConfig};
use pcrl_core::pretrain::{Ablation, PretrainConfig};
use pcrl_core::synthdata::SynthSpec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthSpec,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.dims != self.pretrain.network.dims {
            return Err(Error::Config(format!(
                "corpus is {}D but the network is {}D",
                u8::from(self.data.dims),
                u8::from(self.pretrain.network.dims)
            )));
        }
        if self.probe.grid < 2 || self.probe.batch_size == 0 || !(self.probe.lr > 0.0) {
            return Err(Error::Config("probe needs grid >= 2, a positive batch size and lr".into()));
        }
        Ok(())
    }

    /// Uses `seed` for the corpus and every run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self.probe.seed = seed;
        self
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.pretrain.ablation = ablation;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcrl_core::transforms::Dims;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::parse("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse(r#"{"pretrian": {}}"#), Err(Error::Config(_))));
        assert!(RunConfig::parse(r#"{"pretrain": {"lr": 0.1, "momemtum": 0.5}}"#).is_err());
        assert!(RunConfig::parse(r#"{"pretrain": {"network": {"depth": 3}}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::parse(r#"{"pretrain": {"tau": 0.5, "ablation": "contra_only"}, "finetune": {"label_fraction": 0.1}}"#)
            .unwrap();
        assert_eq!(c.pretrain.tau, 0.5);
        assert_eq!(c.pretrain.ablation, Ablation::ContraOnly);
        assert_eq!(c.pretrain.batch_size, PretrainConfig::default().batch_size);
        assert_eq!(c.finetune.label_fraction, 0.1);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut c = RunConfig::default();
        c.data = SynthSpec::desk(Dims::Three);
        assert!(c.validate().is_err());
    }

    #[test]
    fn three_d_round_trip() {
        let mut c = RunConfig::default();
        c.data = SynthSpec::desk(Dims::Three);
        c.pretrain = PretrainConfig::desk(Dims::Three);
        let again = RunConfig::parse(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
    }

    proptest::proptest! {
        #[test]
        fn json_round_trip_is_exact(seed in 0u64..u64::MAX, tau in 0.01f64..2.0, lr in 1e-6f64..1.0, frac in 0.01f64..1.0) {
            let mut c = RunConfig::default().with_seed(seed);
            c.pretrain.tau = tau;
            c.pretrain.lr = lr;
            c.finetune.label_fraction = frac;
            let again = RunConfig::parse(&c.to_json()).unwrap();
            proptest::prop_assert_eq!(&again, &c);
            proptest::prop_assert_eq!(again.to_json(), c.to_json());
        }
    }
}
