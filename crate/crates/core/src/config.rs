//! Flat TOML run configuration.
//!
//! Every key lives at the top level; unknown keys are rejected. Omitted keys
//! take the defaults of [`RunConfig::default`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::{arch_spec, ArchSpec};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::layer::{InferOptions, LambdaSource};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Architecture.
    pub vocab: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_expert: usize,
    pub max_loops: usize,
    pub shared_expert: bool,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
    pub init_std: f64,
    /// Overrides the counted base parameters in the budget table.
    pub base_params_millions: Option<f64>,

    // Optimization.
    pub steps: u64,
    pub batch: usize,
    pub seq: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub lr_floor_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub aux_weight: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_decay_frac: f64,
    pub soft_mode: bool,
    pub seed: u64,

    // Inference.
    pub lambda_threshold: f64,
    pub lambda_source: LambdaSource,

    // Data. Without `corpus` the synthetic difficulty corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synth_bytes: usize,
    pub synth_seed: u64,
    pub synth_easy_min: usize,
    pub synth_easy_max: usize,
    pub synth_hard_min: usize,
    pub synth_hard_max: usize,
    pub eval_frac: f64,
    pub eval_batch: usize,
    /// 0 evaluates every window.
    pub eval_max_windows: usize,

    // Output.
    pub out_dir: PathBuf,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Wall-clock throughput in metrics records; makes the file
    /// non-reproducible.
    pub log_throughput: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SyntheticSpec::default();
        Self {
            vocab: m.vocab,
            d_model: m.d_model,
            d_hidden: m.d_hidden,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            max_seq: m.max_seq,
            n_experts: m.n_experts,
            top_k: m.top_k,
            d_expert: m.d_expert,
            max_loops: m.max_loops,
            shared_expert: m.shared_expert,
            tie_embeddings: m.tie_embeddings,
            norm_eps: m.norm_eps,
            init_std: m.init_std,
            base_params_millions: None,
            steps: t.steps,
            batch: t.batch,
            seq: t.seq,
            peak_lr: t.peak_lr,
            warmup_frac: t.warmup_frac,
            lr_floor_frac: t.lr_floor_frac,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            aux_weight: t.aux_weight,
            tau_init: t.tau_init,
            tau_min: t.tau_min,
            tau_decay_frac: t.tau_decay_frac,
            soft_mode: t.soft_mode,
            seed: t.seed,
            lambda_threshold: 0.0,
            lambda_source: LambdaSource::Hard,
            corpus: None,
            synth_bytes: s.bytes,
            synth_seed: s.seed,
            synth_easy_min: s.easy_min,
            synth_easy_max: s.easy_max,
            synth_hard_min: s.hard_min,
            synth_hard_max: s.hard_max,
            eval_frac: 0.1,
            eval_batch: 8,
            eval_max_windows: 0,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_throughput: false,
        }
    }
}

impl RunConfig {
    /// Parses and validates; the error names the offending key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = unknown_field(&message).unwrap_or_else(|| "<toml>".into());
            Error::config(field, message)
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate(&self.model())?;
        self.synthetic().validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("synth_{field}"), message),
            e => e,
        })?;
        if !(0.0..1.0).contains(&self.eval_frac) {
            return Err(Error::config("eval_frac", "must lie in [0, 1)"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_threshold) {
            return Err(Error::config("lambda_threshold", "must lie in [0, 1]"));
        }
        if let Some(b) = self.base_params_millions {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::config("base_params_millions", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            vocab: self.vocab,
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq: self.max_seq,
            n_experts: self.n_experts,
            top_k: self.top_k,
            d_expert: self.d_expert,
            max_loops: self.max_loops,
            shared_expert: self.shared_expert,
            tie_embeddings: self.tie_embeddings,
            norm_eps: self.norm_eps,
            init_std: self.init_std,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch: self.batch,
            seq: self.seq,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            lr_floor_frac: self.lr_floor_frac,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            aux_weight: self.aux_weight,
            tau_init: self.tau_init,
            tau_min: self.tau_min,
            tau_decay_frac: self.tau_decay_frac,
            soft_mode: self.soft_mode,
            seed: self.seed,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            bytes: self.synth_bytes,
            seed: self.synth_seed,
            easy_min: self.synth_easy_min,
            easy_max: self.synth_easy_max,
            hard_min: self.synth_hard_min,
            hard_max: self.synth_hard_max,
        }
    }

    pub fn infer(&self) -> InferOptions {
        InferOptions {
            tau_min: self.tau_min,
            lambda_threshold: self.lambda_threshold,
            lambda_source: self.lambda_source,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            batch: self.eval_batch,
            seq: self.seq,
            max_windows: (self.eval_max_windows > 0).then_some(self.eval_max_windows),
            infer: self.infer(),
        }
    }

    pub fn arch(&self) -> ArchSpec {
        let mut spec = arch_spec(&self.model());
        if let Some(b) = self.base_params_millions {
            spec.base_params = b;
        }
        spec
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!((c.n_experts, c.top_k, c.max_loops), (8, 2, 4));
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn errors_name_the_key() {
        let field = |text: &str| match RunConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field("top_k = 9"), "top_k");
        assert_eq!(field("bogus_key = 1"), "bogus_key");
        assert_eq!(field("d_expert = 256"), "d_expert");
        assert_eq!(field("seq = 100"), "seq");
        assert_eq!(field("tau_min = 0.0"), "tau_min");
        assert_eq!(field("synth_easy_min = 0"), "synth_easy_min");
        assert_eq!(field("lambda_source = \"medium\""), "<toml>");
    }

    #[test]
    fn base_override_feeds_the_budget() {
        let c = RunConfig::from_toml("base_params_millions = 354.71").unwrap();
        assert_eq!(c.arch().base_params, 354.71);
    }
}
