//! Run configuration: strict JSON, dotted `key=value` overrides, and
//! resolution into a model [`Architecture`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::GeneratorConfig;
use crate::error::{ComeError, Result};
use crate::losses::LossConfig;
use crate::model::{Architecture, ClusterStrategy, ClusteringConfig, ModelKind};
use crate::numerics::AdamWConfig;
use crate::router::RouterConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    /// Directory written by `gen-data`; when absent the data is generated
    /// in memory from `generator`.
    pub path: Option<String>,
    /// Generator seed; defaults to the run seed.
    pub seed: Option<u64>,
    /// Train on every source but this one and test on it alone.
    pub holdout_source: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub heads: usize,
    /// Routed experts `M'`.
    pub experts: usize,
    pub expert_hidden: usize,
    /// Hidden width of the dense baseline; matched to the COME layer's
    /// active parameter count when absent.
    pub dense_hidden: Option<usize>,
    /// Seeds of the frozen structure and semantic experts.
    pub frozen_seeds: [u64; 2],
    pub clustering: ClusteringConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Come,
            heads: 4,
            experts: 8,
            expert_hidden: 128,
            dense_hidden: None,
            frozen_seeds: [0x5354_4531, 0x5345_4531],
            clustering: ClusteringConfig::default(),
        }
    }
}

/// Component switches for the ablation study.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_ste: bool,
    pub no_see: bool,
    /// Drops both shared experts.
    pub no_dse: bool,
    pub no_clustering: bool,
    pub no_tb: bool,
    /// Drops the routed experts.
    pub no_s2e: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Metrics are logged every this many steps and after the last one.
    pub log_every: usize,
    /// Test batches evaluated at each log step (0 = whole test split).
    pub log_eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            log_every: 100,
            log_eval_batches: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub router: RouterConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub optim: AdamWConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.seed)
    }

    /// Parses a config, or a run manifest whose `config` field is one.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let cfg = match v.get("kind").and_then(Value::as_str) {
            Some("manifest") => v
                .get("config")
                .cloned()
                .ok_or_else(|| ComeError::InvalidConfig("manifest has no config".into()))?,
            _ => v,
        };
        Ok(serde_json::from_value(cfg)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ComeError::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `a.b.c=value` overrides. The key must already exist; the
    /// value is parsed as JSON and falls back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ComeError::InvalidConfig(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| ComeError::InvalidConfig(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| ComeError::InvalidConfig(format!("override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 {
            return Err(ComeError::InvalidConfig("batch_size and log_every must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(ComeError::InvalidConfig(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(h) = self.data.holdout_source {
            if h >= self.data.generator.sources {
                return Err(ComeError::InvalidConfig(format!(
                    "holdout source {h} outside [0, {})",
                    self.data.generator.sources
                )));
            }
        }
        self.architecture(&self.data.generator).map(|_| ())
    }

    /// Resolves the model against data dimensions and ablation switches.
    pub fn architecture(&self, data: &GeneratorConfig) -> Result<Architecture> {
        let a = &self.ablation;
        let mut clustering = self.model.clustering;
        if a.no_clustering {
            clustering.strategy = ClusterStrategy::None;
        }
        let mut arch = Architecture {
            kind: self.model.kind,
            width: data.width,
            classes: data.classes,
            sources: data.sources,
            heads: self.model.heads,
            experts: self.model.experts,
            expert_hidden: self.model.expert_hidden,
            dense_hidden: 0,
            router: self.router,
            loss: self.loss,
            clustering,
            use_ste: !(a.no_ste || a.no_dse),
            use_see: !(a.no_see || a.no_dse),
            use_routed: !a.no_s2e,
            use_traceability: !a.no_tb,
            frozen_seeds: self.model.frozen_seeds,
        };
        arch.dense_hidden = self.model.dense_hidden.unwrap_or_else(|| arch.matched_dense_hidden());
        if self.model.kind == ModelKind::Dense && *a != Ablation::default() {
            return Err(ComeError::InvalidConfig("ablation switches apply to the COME model only".into()));
        }
        if a.no_s2e && (a.no_tb || a.no_clustering) {
            return Err(ComeError::InvalidConfig(
                "no_tb and no_clustering have no effect without routed experts".into(),
            ));
        }
        // Validated by building it once.
        crate::model::Model::init(arch.clone(), 0)?;
        Ok(arch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"router": {"topk": 2}}"#).is_err());
        let c = RunConfig::default();
        assert!(c.with_overrides(&["router.topk=2"]).is_err());
        assert!(c.with_overrides(&["router.top_k"]).is_err());
    }

    #[test]
    fn overrides_apply_by_path() {
        let c = RunConfig::default()
            .with_overrides(&[
                "router.top_k=3",
                "seed=9",
                "model.clustering.strategy=multistep",
                "data.generator.weights=[1,1,1,1]",
                "ablation.no_tb=true",
            ])
            .unwrap();
        assert_eq!(c.router.top_k, 3);
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.clustering.strategy, ClusterStrategy::Multistep);
        assert_eq!(c.data.generator.weights, vec![1.0; 4]);
        assert!(c.ablation.no_tb);
        assert!(c.with_overrides(&["router.top_k=\"x\""]).is_err());
    }

    #[test]
    fn manifest_is_accepted_as_config() {
        let c = RunConfig::default().with_overrides(&["seed=4"]).unwrap();
        let manifest = serde_json::json!({"kind": "manifest", "config": c, "digests": {}});
        assert_eq!(RunConfig::from_json(&manifest.to_string()).unwrap(), c);
    }

    #[test]
    fn ablation_switches_resolve() {
        let mut c = RunConfig::default();
        c.ablation.no_dse = true;
        let a = c.architecture(&c.data.generator).unwrap();
        assert!(!a.use_ste && !a.use_see && a.use_routed);
        c.ablation = Ablation {
            no_clustering: true,
            ..Default::default()
        };
        let a = c.architecture(&c.data.generator).unwrap();
        assert_eq!(a.clustering.strategy, ClusterStrategy::None);
        c.ablation = Ablation {
            no_s2e: true,
            no_dse: true,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for o in [
            "model.heads=5",
            "router.top_k=9",
            "model.experts=3",
            "train.batch_size=0",
            "optim.lr=0",
            "data.holdout_source=4",
            "data.generator.width=0",
        ] {
            let c = RunConfig::default().with_overrides(&[o]).unwrap();
            assert!(c.validate().is_err(), "{o} accepted");
        }
    }
}
