//! Engine configuration: one TOML file with a section per module.

use serde::{Deserialize, Serialize};

use crate::editor::EditorConfig;
use crate::error::{MeloError, Result};
use crate::hostnet::{HostConfig, LayerHookConfig, PretrainOptions};
use crate::rng::sub_seed;
use crate::taskgen::{StreamConfig, TaskConfig};

/// Benchmark shape; label count and vocabulary come from the host section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub num_facts: usize,
    pub templates_per_fact: usize,
    pub frame_slots: usize,
    pub frame_tokens: usize,
    pub relation_tokens: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskConfig::default();
        Self {
            num_facts: t.num_facts,
            templates_per_fact: t.templates_per_fact,
            frame_slots: t.frame_slots,
            frame_tokens: t.frame_tokens,
            relation_tokens: t.relation_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: u64,
    pub host: HostConfig,
    pub pretrain: PretrainOptions,
    pub task: TaskSection,
    pub stream: StreamConfig,
    pub editor: EditorConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            host: HostConfig::default(),
            pretrain: PretrainOptions::default(),
            task: TaskSection::default(),
            stream: StreamConfig::default(),
            editor: EditorConfig::default(),
        }
    }
}

/// Independent seeds for each stochastic stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSeeds {
    pub host: u64,
    pub task: u64,
    pub stream: u64,
    pub adapters: u64,
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MeloError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            num_facts: self.task.num_facts,
            num_labels: self.host.labels,
            vocab_size: self.host.vocab,
            templates_per_fact: self.task.templates_per_fact,
            frame_slots: self.task.frame_slots,
            frame_tokens: self.task.frame_tokens,
            relation_tokens: self.task.relation_tokens,
        }
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            host: sub_seed(self.seed, 1),
            task: sub_seed(self.seed, 2),
            stream: sub_seed(self.seed, 3),
            adapters: sub_seed(self.seed, 4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.host.validate()?;
        LayerHookConfig::new(self.editor.key_layer, self.editor.lora_layers.clone(), self.host.layers)?;
        let e = &self.editor;
        if e.partial_rank == 0 {
            return Err(MeloError::Config("editor.partial_rank must be at least 1".into()));
        }
        if e.rank == 0 || !e.rank.is_multiple_of(e.partial_rank) {
            return Err(MeloError::Config(format!(
                "editor.rank {} must be a positive multiple of editor.partial_rank {}",
                e.rank, e.partial_rank
            )));
        }
        // zero is allowed: it is the degenerate point of the radius sweep
        if !(e.r_init.is_finite() && e.r_init >= 0.0) {
            return Err(MeloError::Config(format!("editor.r_init {} must be finite and >= 0", e.r_init)));
        }
        if !(e.lr.is_finite() && e.lr > 0.0) {
            return Err(MeloError::Config(format!("editor.lr {} must be positive", e.lr)));
        }
        if !e.alpha.is_finite() {
            return Err(MeloError::Config("editor.alpha must be finite".into()));
        }
        if !(self.pretrain.lr.is_finite() && self.pretrain.lr > 0.0) {
            return Err(MeloError::Config("pretrain.lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.target_accuracy) {
            return Err(MeloError::Config("pretrain.target_accuracy must be in [0,1]".into()));
        }
        if self.task_config().seq_len() > self.host.max_len {
            return Err(MeloError::Config(format!(
                "task sequences of length {} exceed host.max_len {}",
                self.task_config().seq_len(),
                self.host.max_len
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = EngineConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("[editor]"));
        assert_eq!(EngineConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = EngineConfig::from_toml("seed = 7\n[editor]\nr_init = 2.0\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.editor.r_init, 2.0);
        assert_eq!(cfg.editor.partial_rank, EditorConfig::default().partial_rank);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = EngineConfig::from_toml("[editor]\nradius = 2.0\n").unwrap_err();
        assert!(matches!(&err, MeloError::Config(m) if m.contains("radius")), "{err}");
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[editor]\nkey_layer = 3\nlora_layers = [2, 3]\n",
            "[editor]\nrank = 5\npartial_rank = 2\n",
            "[editor]\npartial_rank = 0\n",
            "[editor]\nr_init = -1.0\n",
            "[host]\nlabels = 1\n",
            "[host]\nmax_len = 2\n",
        ] {
            assert!(matches!(EngineConfig::from_toml(text), Err(MeloError::Config(_))), "{text}");
        }
        assert!(EngineConfig::from_toml("[editor]\nr_init = 0.0\n").is_ok());
    }

    #[test]
    fn stage_seeds_differ() {
        let s = EngineConfig::default().seeds();
        let all = [s.host, s.task, s.stream, s.adapters];
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(all[i], all[j]);
            }
        }
    }
}
