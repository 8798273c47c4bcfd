//! Experiment configuration: a single JSON file with sections
//! {seed, world, model, train, search, paths}. Unknown keys are rejected,
//! missing keys take the documented defaults, and every artifact embeds the
//! digest of the fully resolved config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::infer::{ActionMode, SearchConfig, TieBreak};
use crate::model::{EmbedKind, FreezeMode, ModelConfig};
use crate::sim::WorldConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixEntry {
    pub eps: f64,
    pub frac: f64,
}

impl Default for MixEntry {
    fn default() -> Self {
        Self {
            eps: 0.1,
            frac: 0.5,
        }
    }
}

/// World physics plus behavior-data generation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub n_users: usize,
    pub n_items: usize,
    pub d_f: usize,
    pub k: usize,
    pub max_steps: usize,
    pub quit_patience: usize,
    pub quit_threshold_frac: f64,
    pub r_max: f64,
    pub reward_scale: f64,
    pub noise_sigma: f64,
    pub repeat_decay: f64,
    /// 0 means "derive from the experiment seed".
    pub world_seed: u64,
    /// Total episodes to generate, split over `mix` by fraction.
    pub episodes: usize,
    pub mix: Vec<MixEntry>,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            n_users: w.n_users,
            n_items: w.n_items,
            d_f: w.d_f,
            k: w.k,
            max_steps: w.max_steps,
            quit_patience: w.quit_patience,
            quit_threshold_frac: w.quit_threshold_frac,
            r_max: w.r_max,
            reward_scale: w.reward_scale,
            noise_sigma: w.noise_sigma,
            repeat_decay: w.repeat_decay,
            world_seed: 0,
            episodes: 400,
            mix: vec![
                MixEntry {
                    eps: 0.1,
                    frac: 0.5,
                },
                MixEntry {
                    eps: 0.8,
                    frac: 0.5,
                },
            ],
        }
    }
}

impl WorldSection {
    pub fn to_world_config(&self) -> WorldConfig {
        WorldConfig {
            n_users: self.n_users,
            n_items: self.n_items,
            d_f: self.d_f,
            k: self.k,
            max_steps: self.max_steps,
            quit_patience: self.quit_patience,
            quit_threshold_frac: self.quit_threshold_frac,
            r_max: self.r_max,
            reward_scale: self.reward_scale,
            noise_sigma: self.noise_sigma,
            repeat_decay: self.repeat_decay,
            world_seed: self.world_seed,
        }
    }

    pub fn state_dim(&self) -> usize {
        2 * self.d_f
    }

    /// (eps, episodes) slices for the mixed-quality corpus.
    pub fn mix_episodes(&self) -> Vec<(f64, usize)> {
        self.mix
            .iter()
            .map(|m| (m.eps, (self.episodes as f64 * m.frac).round() as usize))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub t_max: usize,
    pub n_bins: usize,
    pub dropout: f64,
    pub embed: EmbedKind,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub freeze: FreezeMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            t_max: 20,
            n_bins: 32,
            dropout: 0.1,
            embed: EmbedKind::Mlp,
            lora_rank: 4,
            lora_alpha: 4.0,
            freeze: FreezeMode::Lora,
        }
    }
}

impl ModelSection {
    /// Full model configuration; dataset-derived pieces are passed in.
    pub fn to_model_config(
        &self,
        state_dim: usize,
        n_items: usize,
        return_bin_edges: Vec<f64>,
        rtg_scale: f64,
        lm_vocab: usize,
    ) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            t_max: self.t_max,
            state_dim,
            n_items,
            n_bins: return_bin_edges.len().saturating_sub(1),
            dropout: self.dropout,
            embed_kind: self.embed,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            freeze_mode: self.freeze,
            lm_vocab,
            return_bin_edges,
            rtg_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub lambda: f64,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub aux_language: bool,
    pub max_head: bool,
    pub max_head_stop_grad: bool,
    pub lang_batch: usize,
    pub lang_window: usize,
    /// Language-prior pretraining knobs.
    pub lm_steps: usize,
    pub lm_lr: f64,
    pub lm_batch: usize,
    pub lm_window: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            lambda: 0.1,
            lr: 3e-4,
            batch: 64,
            steps: 20_000,
            grad_clip: 1.0,
            checkpoint_every: 0,
            aux_language: true,
            max_head: true,
            max_head_stop_grad: false,
            lang_batch: 8,
            lang_window: 48,
            lm_steps: 2000,
            lm_lr: 1e-3,
            lm_batch: 8,
            lm_window: 48,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            lambda: self.lambda,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
            grad_clip: self.grad_clip,
            seed,
            checkpoint_every: self.checkpoint_every,
            aux_language: self.aux_language,
            max_head: self.max_head,
            max_head_stop_grad: self.max_head_stop_grad,
            lang_batch: self.lang_batch,
            lang_window: self.lang_window,
        }
    }

    pub fn to_pretrain_config(&self, seed: u64) -> crate::lm::PretrainConfig {
        crate::lm::PretrainConfig {
            steps: self.lm_steps,
            lr: self.lm_lr,
            batch: self.lm_batch,
            window_len: self.lm_window,
            grad_clip: self.grad_clip,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub delta: usize,
    pub kappa: f64,
    pub action_mode: ActionMode,
    pub tie_break: TieBreak,
    pub n_envs: usize,
    pub episodes_per_env: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            delta: 2,
            kappa: 10.0,
            action_mode: ActionMode::Greedy,
            tie_break: TieBreak::Longest,
            n_envs: 100,
            episodes_per_env: 1,
        }
    }
}

impl SearchSection {
    pub fn to_search_config(&self, use_max_head: bool) -> SearchConfig {
        SearchConfig {
            delta: self.delta,
            kappa: self.kappa,
            action_mode: self.action_mode,
            tie_break: self.tie_break,
            use_max_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    /// Optional explicit paths; anything unset resolves under `out_dir`.
    pub dataset: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// Text file for the LM corpus; unset uses the bundled text.
    pub corpus: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            dataset: None,
            prior: None,
            model: None,
            metrics: None,
            report: None,
            corpus: None,
        }
    }
}

impl PathsSection {
    pub fn dataset(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn prior(&self) -> PathBuf {
        self.prior
            .clone()
            .unwrap_or_else(|| self.out_dir.join("prior.ckpt"))
    }

    pub fn model(&self) -> PathBuf {
        self.model
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.metrics
            .clone()
            .unwrap_or_else(|| self.out_dir.join("metrics.jsonl"))
    }

    pub fn report(&self) -> PathBuf {
        self.report
            .clone()
            .unwrap_or_else(|| self.out_dir.join("report.json"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub search: SearchSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    /// Fill derived defaults (world seed from the experiment seed).
    pub fn resolve(&mut self) {
        if self.world.world_seed == 0 {
            self.world.world_seed = self.seed.wrapping_add(1);
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        format!("{:x}", h.finalize())[..16].to_string()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Load a config file (default config when no path), apply dotted-path
/// overrides, then resolve. Unknown keys anywhere are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                record: 0,
                message: format!("config {}: {e}", p.display()),
            })?
        }
        None => serde_json::to_value(ExperimentConfig::default())?,
    };
    for (key, raw) in overrides {
        set_dotted(&mut value, key, raw)?;
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.resolve();
    Ok(cfg)
}

/// Set `value[a][b][...] = parsed(raw)` for a dotted path "a.b.c".
pub fn set_dotted(value: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cursor = value;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!("config path {path} does not address an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}
