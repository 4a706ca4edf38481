//! Run configuration: one JSON document with sections `model`,
//! `behavior_policy`, `simulate`, `train` and `evaluate`. Unknown keys are
//! rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_path_to_error::Segment;

use crate::error::Error;
use crate::evaluator::DEFAULT_KL_SAMPLES;
use crate::model::{ExtendedState, ModelSpec};
use crate::policy::GaussianMixturePolicy;
use crate::rng::{substream, Purpose};
use crate::simulator::{ActionMode, InitialStates};
use crate::trainer::TrainingConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },

    /// `pointer` is an RFC 6901 JSON pointer into the document.
    #[error("config error at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("config error in /{section}: {source}")]
    Invalid {
        section: &'static str,
        #[source]
        source: Error,
    },
}

impl ConfigError {
    pub fn pointer(&self) -> String {
        match self {
            ConfigError::Read { .. } => String::new(),
            ConfigError::Schema { pointer, .. } => pointer.clone(),
            ConfigError::Invalid { section, .. } => format!("/{section}"),
        }
    }
}

/// Randomly drawn constant-mean mixture with equal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomPolicyConfig {
    pub n_components: usize,
    pub mean_range: (f64, f64),
    pub variance_range: (f64, f64),
    pub seed: u64,
}

impl Default for RandomPolicyConfig {
    fn default() -> Self {
        RandomPolicyConfig {
            n_components: 2,
            mean_range: (-0.5, 0.5),
            variance_range: (0.2, 0.4),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorPolicyConfig {
    Explicit(GaussianMixturePolicy),
    Random(RandomPolicyConfig),
}

impl BehaviorPolicyConfig {
    pub fn resolve(&self, spec: &ModelSpec) -> crate::Result<GaussianMixturePolicy> {
        let policy = match self {
            BehaviorPolicyConfig::Explicit(p) => GaussianMixturePolicy::new(p.weights.clone(), p.components.clone())?,
            BehaviorPolicyConfig::Random(r) => {
                if r.n_components == 0 {
                    return Err(Error::invalid("n_components", "must be >= 1"));
                }
                let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
                if !ok(r.mean_range) || !ok(r.variance_range) || !(r.variance_range.0 > 0.0) {
                    return Err(Error::invalid("range", "need finite lo <= hi and positive variances"));
                }
                let mut rng = substream(r.seed, Purpose::BehaviorPolicy, 0);
                GaussianMixturePolicy::random_constant(
                    spec.action_dim,
                    r.n_components,
                    r.mean_range,
                    r.variance_range,
                    &mut rng,
                )?
            }
        };
        policy.validate(spec)?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_trajectories: usize,
    pub seed: u64,
    pub initial_states: InitialStates,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            n_trajectories: 10_000,
            seed: 0,
            initial_states: InitialStates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub n_kl: usize,
    pub action_mode: ActionMode,
    /// Defaults to the mean initial state with `C = 0`, `t = 0`.
    pub start: Option<ExtendedState>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            n_paths: 5_000,
            seed: 1,
            n_kl: DEFAULT_KL_SAMPLES,
            action_mode: ActionMode::Effective,
            start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub behavior_policy: BehaviorPolicyConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub train: TrainingConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
}

/// A parsed configuration with the behavioral policy materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub raw: RunConfig,
    pub policy: GaussianMixturePolicy,
}

impl ResolvedConfig {
    pub fn spec(&self) -> &ModelSpec {
        &self.raw.model
    }

    pub fn start_state(&self) -> ExtendedState {
        self.raw.evaluate.start.clone().unwrap_or_else(|| {
            ExtendedState::new(self.raw.simulate.initial_states.mean(self.raw.model.state_dim), 0.0, 0.0)
        })
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        let token = match seg {
            Segment::Seq { index } => index.to_string(),
            Segment::Map { key } => key.replace('~', "~0").replace('/', "~1"),
            Segment::Enum { variant } => variant.clone(),
            Segment::Unknown => continue,
        };
        out.push('/');
        out.push_str(&token);
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub fn parse_config(text: &str) -> Result<ResolvedConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        pointer: pointer_of(e.path()),
        message: e.inner().to_string(),
    })?;
    let invalid = |section: &'static str| move |source: Error| ConfigError::Invalid { section, source };
    raw.model.validate().map_err(invalid("model"))?;
    let policy = raw.behavior_policy.resolve(&raw.model).map_err(invalid("behavior_policy"))?;
    raw.simulate
        .initial_states
        .validate(raw.model.state_dim)
        .map_err(invalid("simulate"))?;
    raw.train.validate().map_err(invalid("train"))?;
    if raw.evaluate.n_kl == 0 {
        return Err(invalid("evaluate")(Error::invalid("n_kl", "must be >= 1")));
    }
    if let Some(s) = &raw.evaluate.start {
        crate::error::check_dim("evaluate.start.x", raw.model.state_dim, s.x.len()).map_err(invalid("evaluate"))?;
    }
    Ok(ResolvedConfig { raw, policy })
}

pub fn load_config(path: &Path) -> Result<ResolvedConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}
