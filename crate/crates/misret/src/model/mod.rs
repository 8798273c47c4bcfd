//! The policy network: a causal transformer over interleaved
//! (state, return, action) tokens with MLP (or linear) per-modality
//! embeddings, four output heads, optional LoRA adapters on the attention
//! projections, and optional language-model input/output projections that
//! share the backbone.

pub mod checkpoint;
pub mod forward;
pub mod lora;

use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Mlp,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    /// Backbone base weights frozen; LoRA adapters, heads, and embeddings
    /// train.
    Lora,
    /// Backbone frozen entirely, no adapters; heads and embeddings train.
    Frozen,
    /// Everything trains.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Context length in steps.
    pub t_max: usize,
    pub state_dim: usize,
    pub n_items: usize,
    /// Return-distribution bins.
    pub n_bins: usize,
    pub dropout: f64,
    pub embed_kind: EmbedKind,
    /// 0 disables adapters.
    pub lora_rank: usize,
    /// Adapter scale numerator; the effective delta is (alpha/r) * B A.
    pub lora_alpha: f64,
    pub freeze_mode: FreezeMode,
    /// Language-model vocabulary size; 0 disables the LM projections.
    pub lm_vocab: usize,
    /// B+1 bin edges for the return distribution head.
    pub return_bin_edges: Vec<f64>,
    /// Divisor applied to raw returns-to-go before the return embedding.
    pub rtg_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            t_max: 20,
            state_dim: 16,
            n_items: 50,
            n_bins: 32,
            dropout: 0.1,
            embed_kind: EmbedKind::Mlp,
            lora_rank: 4,
            lora_alpha: 4.0,
            freeze_mode: FreezeMode::Full,
            lm_vocab: 0,
            return_bin_edges: (0..=32).map(|i| i as f64 / 32.0).collect(),
            rtg_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        if self.lora_rank >= self.d_model {
            return Err(Error::Config(format!(
                "lora_rank {} must be < d_model {}",
                self.lora_rank, self.d_model
            )));
        }
        if self.freeze_mode == FreezeMode::Lora && self.lora_rank == 0 {
            return Err(Error::Config(
                "freeze_mode=lora requires lora_rank >= 1".into(),
            ));
        }
        if self.return_bin_edges.len() != self.n_bins + 1 {
            return Err(Error::Config(format!(
                "expected {} bin edges, got {}",
                self.n_bins + 1,
                self.return_bin_edges.len()
            )));
        }
        if !self.return_bin_edges.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("bin edges must be strictly increasing".into()));
        }
        if self.rtg_scale <= 0.0 {
            return Err(Error::Config("rtg_scale must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn bin_center(&self, idx: usize) -> f64 {
        0.5 * (self.return_bin_edges[idx] + self.return_bin_edges[idx + 1])
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.bin_center(i)).collect()
    }

    pub fn bin_index(&self, value: f64) -> usize {
        let b = self.n_bins;
        match self
            .return_bin_edges
            .binary_search_by(|e| e.partial_cmp(&value).expect("finite"))
        {
            Ok(i) => i.min(b - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(b - 1),
        }
    }

    pub fn bin_range(&self) -> (f64, f64) {
        (
            *self.return_bin_edges.first().expect("edges"),
            *self.return_bin_edges.last().expect("edges"),
        )
    }

    /// Maximum token count of the language path.
    pub fn lm_max_len(&self) -> usize {
        3 * self.t_max
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct TensorSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn spec(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> TensorSpec {
    TensorSpec {
        name: name.into(),
        rows,
        cols,
        init,
    }
}

const W_STD: f64 = 0.02;

/// Full tensor layout for a configuration (adapters listed only when
/// `with_lora`). Registration order is the checkpoint order.
fn layout(cfg: &ModelConfig, with_lora: bool) -> Vec<TensorSpec> {
    let d = cfg.d_model;
    let n = Init::Normal(W_STD);
    let mut out = Vec::new();

    let modality = |name: &str, in_dim: usize, out_vec: &mut Vec<TensorSpec>| {
        out_vec.push(spec(format!("embed.{name}.w1"), in_dim, d, n));
        out_vec.push(spec(format!("embed.{name}.b1"), 1, d, Init::Zeros));
        if cfg.embed_kind == EmbedKind::Mlp {
            out_vec.push(spec(format!("embed.{name}.w2"), d, d, n));
            out_vec.push(spec(format!("embed.{name}.b2"), 1, d, Init::Zeros));
        }
    };
    modality("state", cfg.state_dim, &mut out);
    modality("return", 1, &mut out);
    modality("action", cfg.n_items, &mut out);
    out.push(spec("embed.pos", cfg.t_max, d, n));
    out.push(spec("embed.pad", 1, d, n));

    for l in 0..cfg.n_layers {
        let p = format!("backbone.l{l}");
        out.push(spec(format!("{p}.ln1.g"), 1, d, Init::Ones));
        out.push(spec(format!("{p}.ln1.b"), 1, d, Init::Zeros));
        for m in ["wq", "wk", "wv"] {
            out.push(spec(format!("{p}.attn.{m}"), d, d, n));
            out.push(spec(format!("{p}.attn.b{}", &m[1..]), 1, d, Init::Zeros));
            if with_lora && cfg.lora_rank > 0 {
                out.push(spec(
                    format!("{p}.attn.{m}.lora_a"),
                    cfg.lora_rank,
                    d,
                    n,
                ));
                out.push(spec(format!("{p}.attn.{m}.lora_b"), d, cfg.lora_rank, Init::Zeros));
            }
        }
        out.push(spec(format!("{p}.attn.wo"), d, d, n));
        out.push(spec(format!("{p}.attn.bo"), 1, d, Init::Zeros));
        out.push(spec(format!("{p}.ln2.g"), 1, d, Init::Ones));
        out.push(spec(format!("{p}.ln2.b"), 1, d, Init::Zeros));
        out.push(spec(format!("{p}.ff.w1"), d, cfg.d_ff, n));
        out.push(spec(format!("{p}.ff.b1"), 1, cfg.d_ff, Init::Zeros));
        out.push(spec(format!("{p}.ff.w2"), cfg.d_ff, d, n));
        out.push(spec(format!("{p}.ff.b2"), 1, d, Init::Zeros));
    }
    out.push(spec("backbone.ln_f.g", 1, d, Init::Ones));
    out.push(spec("backbone.ln_f.b", 1, d, Init::Zeros));

    out.push(spec("head.bin.w", d, cfg.n_bins, n));
    out.push(spec("head.bin.b", 1, cfg.n_bins, Init::Zeros));
    out.push(spec("head.expectile.w", d, 1, n));
    out.push(spec("head.expectile.b", 1, 1, Init::Zeros));
    out.push(spec("head.theta_s.w", d, d, n));
    out.push(spec("head.theta_s.b", 1, d, Init::Zeros));
    out.push(spec("head.theta_a.w", d, d, n));
    out.push(spec("head.theta_a.b", 1, d, Init::Zeros));
    out.push(spec("head.ne.w1", 2 * d, d, n));
    out.push(spec("head.ne.b1", 1, d, Init::Zeros));
    out.push(spec("head.ne.w2", d, 1, n));
    out.push(spec("head.ne.b2", 1, 1, Init::Zeros));
    out.push(spec("head.ng.w", d + 1, cfg.n_items, n));
    out.push(spec("head.ng.b", 1, cfg.n_items, Init::Zeros));

    if cfg.lm_vocab > 0 {
        out.push(spec("lm.tok", cfg.lm_vocab, d, n));
        out.push(spec("lm.pos", cfg.lm_max_len(), d, n));
        out.push(spec("lm.head.w", d, cfg.lm_vocab, n));
        out.push(spec("lm.head.b", 1, cfg.lm_vocab, Init::Zeros));
    }
    out
}

/// Is this tensor part of the shared transformer backbone (LoRA adapters
/// excluded)?
pub fn is_backbone_base(name: &str) -> bool {
    name.starts_with("backbone.") && !name.contains(".lora_")
}

pub fn is_lora_adapter(name: &str) -> bool {
    name.contains(".lora_")
}

fn trainable_under(mode: FreezeMode, name: &str) -> bool {
    match mode {
        FreezeMode::Full => true,
        FreezeMode::Frozen => !is_backbone_base(name),
        FreezeMode::Lora => !is_backbone_base(name) || is_lora_adapter(name),
    }
}

pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// LM vocabulary (chars, in id order) when the LM projections exist.
    pub vocab: Option<Vec<char>>,
    pub lora_attached: bool,
    forward_count: AtomicU64,
}

impl Clone for PolicyModel {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            vocab: self.vocab.clone(),
            lora_attached: self.lora_attached,
            forward_count: AtomicU64::new(self.forward_count.load(Ordering::Relaxed)),
        }
    }
}

impl PolicyModel {
    /// Fresh model; backbone and LM projections are copied from
    /// `prior` when given, embeddings and heads are always newly drawn.
    /// LoRA adapters are attached when cfg asks for them (zero-initialized,
    /// so the initial forward equals the prior's backbone exactly).
    pub fn init(
        cfg: ModelConfig,
        prior: Option<&checkpoint::Checkpoint>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let with_lora = cfg.freeze_mode == FreezeMode::Lora && cfg.lora_rank > 0;
        let mut rng = rng_for(seed, Stream::ParamInit);
        let mut params = ParamStore::new();
        for t in layout(&cfg, with_lora) {
            match t.init {
                Init::Normal(std) => {
                    params.add_normal(&t.name, t.rows, t.cols, std, &mut rng);
                }
                Init::Zeros => {
                    params.add_zeros(&t.name, t.rows, t.cols);
                }
                Init::Ones => {
                    params.add(
                        &t.name,
                        ndarray::Array2::from_elem((t.rows, t.cols), 1.0),
                        true,
                    );
                }
            }
        }
        let mut vocab = None;
        if let Some(ck) = prior {
            let mut mismatched = Vec::new();
            for (name, tensor) in ck.tensors_with_prefix(&["backbone.", "lm."]) {
                match params.id_of(name) {
                    Some(id) => {
                        if params.get(id).dim() != tensor.dim() {
                            mismatched.push(format!(
                                "{name} (checkpoint {:?}, model {:?})",
                                tensor.dim(),
                                params.get(id).dim()
                            ));
                        } else {
                            params.get_mut(id).assign(tensor);
                        }
                    }
                    None => mismatched.push(format!("{name} (not in model)")),
                }
            }
            if !mismatched.is_empty() {
                return Err(Error::DimMismatch { names: mismatched });
            }
            if cfg.lm_vocab > 0 {
                vocab = ck.vocab.clone();
            }
        }
        let mode = cfg.freeze_mode;
        params.set_trainable_by(|name| trainable_under(mode, name));
        Ok(Self {
            cfg,
            params,
            vocab,
            lora_attached: with_lora,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn apply_freeze(&mut self) {
        let mode = self.cfg.freeze_mode;
        self.params.set_trainable_by(|name| trainable_under(mode, name));
    }

    pub fn backbone_checksum(&self) -> String {
        self.params.checksum_where(is_backbone_base)
    }

    pub fn adapter_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, e)| is_lora_adapter(&e.name))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    /// Trainable / total / adapter scalar counts, for reporting.
    pub fn param_report(&self) -> (usize, usize, usize) {
        (
            self.params.trainable_scalars(),
            self.params.total_scalars(),
            self.adapter_scalars(),
        )
    }

    pub fn note_forward(&self) {
        self.forward_count.fetch_add(1, Ordering::Relaxed);
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    /// Names (with shapes) this model is expected to contain; used to
    /// validate checkpoints.
    pub(crate) fn expected_shapes(
        cfg: &ModelConfig,
        with_lora: bool,
    ) -> Vec<(String, (usize, usize))> {
        layout(cfg, with_lora)
            .into_iter()
            .map(|t| (t.name, (t.rows, t.cols)))
            .collect()
    }
}
