//! Run configuration shared by every CLI subcommand.
//!
//! A [`RunConfig`] is read from TOML, patched with `key=value` overrides
//! addressed by dotted paths and echoed back to the output directory, so a
//! run can be repeated from its echo alone.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentConfig, AgentKind, AgentSpec, Localizer};
use crate::episodes::EpisodeParams;
use crate::eval::BenchmarkConfig;
use crate::floorgrid::SceneParams;
use crate::policy::{PlanView, PolicyConfig, TrainConfig, Variant};
use crate::simulator::{OrientationNoise, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected key=value")]
    OverrideSyntax(String),
    #[error("override key {0:?} does not name a config field")]
    UnknownKey(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
    pub furniture_density: f64,
    pub params: SceneParams,
}

impl Default for SceneSection {
    fn default() -> Self {
        Self {
            small: 20,
            medium: 0,
            large: 0,
            furniture_density: 0.15,
            params: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    /// Demonstrations per scene; 0 uses the size-class count divided by
    /// `factor`.
    pub per_scene: usize,
    pub factor: u32,
    pub params: EpisodeParams,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self {
            per_scene: 20,
            factor: 1,
            params: EpisodeParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub pairs_per_scene: usize,
    pub keep_logs: bool,
    pub agent: AgentConfig,
    pub methods: Vec<AgentSpec>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let noisy = Localizer::Noisy {
            pos_var: 0.3,
            orientation: OrientationNoise::Keep,
        };
        Self {
            pairs_per_scene: 10,
            keep_logs: false,
            agent: AgentConfig::default(),
            methods: vec![
                AgentSpec::new("loc_astar_gt", AgentKind::LocAstar, Localizer::GroundTruth),
                AgentSpec::new("loc_astar_noisy", AgentKind::LocAstar, noisy),
                AgentSpec::new("loc_flodiff_gt", AgentKind::FloDiffLoc, Localizer::GroundTruth),
                AgentSpec::new("loc_flodiff_noisy", AgentKind::FloDiffLoc, noisy),
                AgentSpec::new("naive_flodiff", AgentKind::FloDiffNaive, Localizer::GroundTruth),
                AgentSpec::new("random_walk", AgentKind::RandomWalk, Localizer::GroundTruth),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it by purpose.
    pub seed: u64,
    /// Worker threads for training and benchmarking.
    pub workers: usize,
    /// Variant trained by `train`.
    pub variant: Variant,
    pub sim: SimConfig,
    pub scenes: SceneSection,
    pub episodes: EpisodeSection,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    /// Desk-scale profile: a compact network with the local plan view and a
    /// learning rate suited to a few hundred demonstrations.
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            variant: Variant::Loc,
            sim: SimConfig::default(),
            scenes: SceneSection::default(),
            episodes: EpisodeSection::default(),
            policy: PolicyConfig {
                ctx_dim: 32,
                enc_hidden: 64,
                layers: 2,
                heads: 4,
                plan_side: 16,
                eps_width: 128,
                eps_blocks: 2,
                head_hidden: 32,
                plan_view: PlanView::Local,
                ..PolicyConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 20,
                ..TrainConfig::default()
            },
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable in TOML")
    }

    /// Applies `key=value` overrides in order. Keys are dotted paths into
    /// the TOML layout (`train.lr`, `sim.tau_c`); values use TOML syntax and
    /// fall back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::OverrideSyntax(o.to_string()))?;
            let key = key.trim();
            let path: Vec<&str> = key.split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::OverrideSyntax(o.to_string()));
            }
            let (last, parents) = path.split_last().expect("split yields at least one part");
            let mut table = &mut root;
            for p in parents {
                table = match table.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                };
            }
            let slot = table
                .get_mut(*last)
                .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            *slot = parse_value(raw.trim());
        }
        let text = toml::to_string(&root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Parse(m));
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        if let Err(e) = self.sim.validate() {
            return bad(e);
        }
        if let Err(e) = self.policy.validate() {
            return bad(e.to_string());
        }
        if self.policy.rays != self.sim.rays {
            return bad(format!(
                "policy.rays {} differs from sim.rays {}",
                self.policy.rays, self.sim.rays
            ));
        }
        if let Err(e) = self.train_config().validate() {
            return bad(e.to_string());
        }
        let mut names: Vec<&str> = self.eval.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("eval method names must be unique".into());
        }
        Ok(())
    }

    /// Training settings with the run-level seed and worker count applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            workers: self.workers,
            ..self.train.clone()
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            pairs_per_scene: self.eval.pairs_per_scene,
            sim: self.sim.clone(),
            agent: self.eval.agent.clone(),
            episodes: self.episodes.params.clone(),
            workers: self.workers,
            keep_logs: self.eval.keep_logs,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
