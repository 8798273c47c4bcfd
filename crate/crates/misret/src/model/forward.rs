//! Token assembly and the causal forward pass.
//!
//! A window of T steps linearizes to 3T tokens in (s, R, a) order. Left-pad
//! slots contribute a learned pad embedding that is masked out of attention,
//! so a padded window computes exactly what the trimmed window computes.
//! Positions count real steps within the window, which makes a truncated
//! history look like a fresh short episode — the property the
//! history-length search relies on.
//!
//! Head placement per step t:
//! - return-bin logits and the maximal-return estimate read the s_t token
//!   (context up to and including s_t, before the conditioning target);
//! - the state/action features theta_s, theta_a read the R_t token, the
//!   reward estimate is N_e([s_p, a_p]), and the action logits are
//!   N_g([r_hat, a_p]) — available only once R_t is placed.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{EmbedKind, ModelConfig, PolicyModel};
use crate::data::ContextWindow;
use crate::error::{Error, Result};
use crate::nn::{Tape, Tx};

/// A window ready for the network. `rtgs`/`actions` may be one shorter than
/// `states` so queries can end at the newest state token (history-length
/// search) or at the newest return token (action selection).
#[derive(Debug, Clone)]
pub struct WindowInput {
    pub states: Vec<Vec<f64>>,
    pub rtgs: Vec<f64>,
    pub actions: Vec<u32>,
    pub pad_left: usize,
}

impl WindowInput {
    /// Complete training window in (s, R, a) triples.
    pub fn training(window: &ContextWindow) -> Self {
        Self {
            states: window
                .steps
                .iter()
                .map(|s| s.state.iter().map(|&v| v as f64).collect())
                .collect(),
            rtgs: window.rtg.clone(),
            actions: window.steps.iter().map(|s| s.action).collect(),
            pad_left: window.pad_left,
        }
    }

    /// Query ending at the newest state token: `states` has one more entry
    /// than `rtgs`/`actions`.
    pub fn ending_at_state(states: Vec<Vec<f64>>, rtgs: Vec<f64>, actions: Vec<u32>) -> Self {
        debug_assert_eq!(states.len(), rtgs.len() + 1);
        debug_assert_eq!(rtgs.len(), actions.len());
        Self {
            states,
            rtgs,
            actions,
            pad_left: 0,
        }
    }

    /// Query ending at the newest return token (conditioning placed, action
    /// not yet chosen).
    pub fn ending_at_return(states: Vec<Vec<f64>>, rtgs: Vec<f64>, actions: Vec<u32>) -> Self {
        debug_assert_eq!(states.len(), rtgs.len());
        debug_assert_eq!(states.len(), actions.len() + 1);
        Self {
            states,
            rtgs,
            actions,
            pad_left: 0,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    pub fn total_len(&self) -> usize {
        self.pad_left + self.states.len()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let l = self.states.len();
        if l == 0 {
            return Err(Error::EmptyTrajectory);
        }
        if self.total_len() > cfg.t_max {
            return Err(Error::WindowTooLong {
                len: self.total_len(),
                t_max: cfg.t_max,
            });
        }
        if !(self.rtgs.len() == l || self.rtgs.len() + 1 == l) {
            return Err(Error::InvalidArgument(format!(
                "{} returns for {l} states",
                self.rtgs.len()
            )));
        }
        if self.actions.len() > self.rtgs.len() || self.actions.len() + 1 < l {
            return Err(Error::InvalidArgument(format!(
                "{} actions for {l} states / {} returns",
                self.actions.len(),
                self.rtgs.len()
            )));
        }
        for s in &self.states {
            if s.len() != cfg.state_dim {
                return Err(Error::InvalidArgument(format!(
                    "state dim {} != {}",
                    s.len(),
                    cfg.state_dim
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "window states".into(),
                });
            }
        }
        if self.rtgs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "window returns".into(),
            });
        }
        for &a in &self.actions {
            if a as usize >= cfg.n_items {
                return Err(Error::InvalidArgument(format!(
                    "action {a} outside catalog {}",
                    cfg.n_items
                )));
            }
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ForwardOpts<'r> {
    pub dropout_rng: Option<&'r mut ChaCha12Rng>,
    pub stop_grad_expectile: bool,
}

/// Tape handles for the loss terms; row counts follow the input layout.
pub struct ForwardHandles {
    /// [n_rtg, n_items] — read at R tokens.
    pub action_logits: Tx,
    /// [n_rtg, 1]
    pub reward_est: Tx,
    /// [n_rtg, d_model]
    pub state_feat: Tx,
    /// [n_rtg, d_model]
    pub action_feat: Tx,
    /// [n_steps, n_bins] — read at s tokens.
    pub bin_logits: Tx,
    /// [n_steps, 1]
    pub expectile: Tx,
    pub n_steps: usize,
    pub n_rtg: usize,
    pub n_act: usize,
}

/// Plain-array outputs for inference and tests.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub action_logits: Vec<Vec<f64>>,
    pub reward_est: Vec<f64>,
    pub state_feat: Vec<Vec<f64>>,
    pub action_feat: Vec<Vec<f64>>,
    pub bin_logits: Vec<Vec<f64>>,
    pub expectile_seq: Vec<f64>,
}

impl ForwardOutput {
    /// The maximal-return estimate at the newest state token.
    pub fn expectile_value(&self) -> f64 {
        *self.expectile_seq.last().expect("non-empty window")
    }

    /// Normalized return distribution at the newest state token.
    pub fn bin_probs_last(&self) -> Vec<f64> {
        let row = self.bin_logits.last().expect("non-empty window");
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|v| v / sum).collect()
    }

    pub fn action_logits_last(&self) -> &[f64] {
        self.action_logits.last().expect("window has a return token")
    }
}

struct TokenPlan {
    /// stacked-row index per token.
    perm: Vec<usize>,
    /// positional id per token (real step index; 0 for pads).
    pos_ids: Vec<usize>,
    /// pad token count (3 per pad slot).
    n_pad_tokens: usize,
    s_rows: Vec<usize>,
    r_rows: Vec<usize>,
}

fn plan_tokens(input: &WindowInput) -> TokenPlan {
    let l = input.states.len();
    let n_rtg = input.rtgs.len();
    let n_act = input.actions.len();
    let p3 = 3 * input.pad_left;
    // Stacked layout: [pad rows (p3), states (l), returns (n_rtg), actions (n_act)]
    let mut perm = Vec::with_capacity(p3 + l + n_rtg + n_act);
    let mut pos_ids = Vec::with_capacity(perm.capacity());
    let mut s_rows = Vec::with_capacity(l);
    let mut r_rows = Vec::with_capacity(n_rtg);
    for i in 0..p3 {
        perm.push(i);
        pos_ids.push(0);
    }
    for j in 0..l {
        s_rows.push(perm.len());
        perm.push(p3 + j);
        pos_ids.push(j);
        if j < n_rtg {
            r_rows.push(perm.len());
            perm.push(p3 + l + j);
            pos_ids.push(j);
        }
        if j < n_act {
            perm.push(p3 + l + n_rtg + j);
            pos_ids.push(j);
        }
    }
    TokenPlan {
        perm,
        pos_ids,
        n_pad_tokens: p3,
        s_rows,
        r_rows,
    }
}

impl PolicyModel {
    fn id(&self, name: &str) -> crate::nn::ParamId {
        self.params
            .id_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Per-modality embedding: 2-layer MLP or single affine map.
    fn embed_modality(&self, tape: &mut Tape, x: Tx, name: &str) -> Tx {
        let h = tape.affine(x, self.id(&format!("embed.{name}.w1")), self.id(&format!("embed.{name}.b1")));
        match self.cfg.embed_kind {
            EmbedKind::Linear => h,
            EmbedKind::Mlp => {
                let g = tape.gelu(h);
                tape.affine(
                    g,
                    self.id(&format!("embed.{name}.w2")),
                    self.id(&format!("embed.{name}.b2")),
                )
            }
        }
    }

    /// Action embedding: row lookup in w1 is the affine map over one-hot
    /// input.
    fn embed_actions(&self, tape: &mut Tape, ids: &[u32]) -> Tx {
        let table = tape.param(self.id("embed.action.w1"));
        let rows = tape.gather(table, ids.iter().map(|&a| a as usize).collect());
        let b1 = tape.param(self.id("embed.action.b1"));
        let h = tape.add_row(rows, b1);
        match self.cfg.embed_kind {
            EmbedKind::Linear => h,
            EmbedKind::Mlp => {
                let g = tape.gelu(h);
                tape.affine(g, self.id("embed.action.w2"), self.id("embed.action.b2"))
            }
        }
    }

    /// Build the [n_tokens, d_model] embedded sequence (token + positional).
    fn build_tokens(&self, tape: &mut Tape, input: &WindowInput, plan: &TokenPlan) -> Tx {
        let l = input.states.len();
        let d_s = self.cfg.state_dim;
        let mut parts = Vec::new();
        if plan.n_pad_tokens > 0 {
            let pad = tape.param(self.id("embed.pad"));
            let pads = tape.gather(pad, vec![0; plan.n_pad_tokens]);
            parts.push(pads);
        }
        let mut sm = Array2::zeros((l, d_s));
        for (j, s) in input.states.iter().enumerate() {
            for (k, &v) in s.iter().enumerate() {
                sm[(j, k)] = v;
            }
        }
        let s_in = tape.input(sm);
        parts.push(self.embed_modality(tape, s_in, "state"));
        if !input.rtgs.is_empty() {
            let rv = Array2::from_shape_vec(
                (input.rtgs.len(), 1),
                input.rtgs.iter().map(|&r| r / self.cfg.rtg_scale).collect(),
            )
            .expect("column shape");
            let r_in = tape.input(rv);
            parts.push(self.embed_modality(tape, r_in, "return"));
        }
        if !input.actions.is_empty() {
            parts.push(self.embed_actions(tape, &input.actions));
        }
        let stacked = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            tape.concat_rows(parts)
        };
        let tokens = tape.gather(stacked, plan.perm.clone());
        let pos_table = tape.param(self.id("embed.pos"));
        let pos = tape.gather(pos_table, plan.pos_ids.clone());
        tape.add(tokens, pos)
    }

    /// Attention Q/K/V weight with the LoRA delta when adapters are attached.
    fn qkv_weight(&self, tape: &mut Tape, layer: usize, which: &str) -> Tx {
        let base = tape.param(self.id(&format!("backbone.l{layer}.attn.{which}")));
        if !self.lora_attached {
            return base;
        }
        let a = tape.param(self.id(&format!("backbone.l{layer}.attn.{which}.lora_a")));
        let b = tape.param(self.id(&format!("backbone.l{layer}.attn.{which}.lora_b")));
        let delta = tape.matmul(b, a);
        let scaled = tape.scale(delta, self.cfg.lora_alpha / self.cfg.lora_rank as f64);
        tape.add(base, scaled)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: Tx,
        rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Tx {
        let p = self.cfg.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let dim = tape.value(x).dim();
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        tape.dropout(x, mask)
    }

    /// Shared transformer trunk over an embedded token sequence.
    fn run_backbone(
        &self,
        tape: &mut Tape,
        mut x: Tx,
        allowed: &Array2<bool>,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Tx {
        let d = self.cfg.d_model;
        let dh = d / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.cfg.n_layers {
            let p = format!("backbone.l{l}");
            let ln1g = tape.param(self.id(&format!("{p}.ln1.g")));
            let ln1b = tape.param(self.id(&format!("{p}.ln1.b")));
            let h = tape.layer_norm(x, ln1g, ln1b);
            let wq = self.qkv_weight(tape, l, "wq");
            let wk = self.qkv_weight(tape, l, "wk");
            let wv = self.qkv_weight(tape, l, "wv");
            let bq = tape.param(self.id(&format!("{p}.attn.bq")));
            let bk = tape.param(self.id(&format!("{p}.attn.bk")));
            let bv = tape.param(self.id(&format!("{p}.attn.bv")));
            let q = tape.matmul(h, wq);
            let q = tape.add_row(q, bq);
            let k = tape.matmul(h, wk);
            let k = tape.add_row(k, bk);
            let v = tape.matmul(h, wv);
            let v = tape.add_row(v, bv);
            let mut heads = Vec::with_capacity(self.cfg.n_heads);
            for hd in 0..self.cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let masked = tape.attn_mask(scores, allowed);
                let probs = tape.softmax(masked);
                heads.push(tape.matmul(probs, vh));
            }
            let ctx = if heads.len() == 1 {
                heads.pop().expect("one head")
            } else {
                tape.concat_cols(heads)
            };
            let proj = tape.affine(
                ctx,
                self.id(&format!("{p}.attn.wo")),
                self.id(&format!("{p}.attn.bo")),
            );
            let proj = self.maybe_dropout(tape, proj, &mut dropout_rng);
            x = tape.add(x, proj);

            let ln2g = tape.param(self.id(&format!("{p}.ln2.g")));
            let ln2b = tape.param(self.id(&format!("{p}.ln2.b")));
            let h2 = tape.layer_norm(x, ln2g, ln2b);
            let f1 = tape.affine(
                h2,
                self.id(&format!("{p}.ff.w1")),
                self.id(&format!("{p}.ff.b1")),
            );
            let f1 = tape.gelu(f1);
            let f2 = tape.affine(
                f1,
                self.id(&format!("{p}.ff.w2")),
                self.id(&format!("{p}.ff.b2")),
            );
            let f2 = self.maybe_dropout(tape, f2, &mut dropout_rng);
            x = tape.add(x, f2);
        }
        let lng = tape.param(self.id("backbone.ln_f.g"));
        let lnb = tape.param(self.id("backbone.ln_f.b"));
        tape.layer_norm(x, lng, lnb)
    }

    /// Record the full forward computation on `tape`.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        input: &WindowInput,
        opts: ForwardOpts,
    ) -> Result<ForwardHandles> {
        input.validate(&self.cfg)?;
        let plan = plan_tokens(input);
        let n = plan.perm.len();
        // Causal mask; pad tokens are hidden from everyone else and see
        // only themselves (their outputs are never read).
        let allowed = Array2::from_shape_fn((n, n), |(qi, ki)| {
            ki <= qi && (ki >= plan.n_pad_tokens || ki == qi)
        });
        let tokens = self.build_tokens(tape, input, &plan);
        let x = self.run_backbone(tape, tokens, &allowed, opts.dropout_rng);

        let s_tokens = tape.gather(x, plan.s_rows.clone());
        let bin_logits = tape.affine(s_tokens, self.id("head.bin.w"), self.id("head.bin.b"));
        let exp_in = if opts.stop_grad_expectile {
            tape.stop_grad(s_tokens)
        } else {
            s_tokens
        };
        let expectile = tape.affine(exp_in, self.id("head.expectile.w"), self.id("head.expectile.b"));

        let (action_logits, reward_est, state_feat, action_feat) = if plan.r_rows.is_empty() {
            // Length-1 query ending at the state token: no return token yet.
            let empty = tape.input(Array2::zeros((0, self.cfg.n_items)));
            let empty_r = tape.input(Array2::zeros((0, 1)));
            let empty_f = tape.input(Array2::zeros((0, self.cfg.d_model)));
            (empty, empty_r, empty_f, empty_f)
        } else {
            let r_tokens = tape.gather(x, plan.r_rows.clone());
            let s_p = tape.affine(r_tokens, self.id("head.theta_s.w"), self.id("head.theta_s.b"));
            let a_p = tape.affine(r_tokens, self.id("head.theta_a.w"), self.id("head.theta_a.b"));
            let ne_in = tape.concat_cols(vec![s_p, a_p]);
            let ne_h = tape.affine(ne_in, self.id("head.ne.w1"), self.id("head.ne.b1"));
            let ne_h = tape.gelu(ne_h);
            let r_hat = tape.affine(ne_h, self.id("head.ne.w2"), self.id("head.ne.b2"));
            let ng_in = tape.concat_cols(vec![r_hat, a_p]);
            let logits = tape.affine(ng_in, self.id("head.ng.w"), self.id("head.ng.b"));
            (logits, r_hat, s_p, a_p)
        };

        Ok(ForwardHandles {
            action_logits,
            reward_est,
            state_feat,
            action_feat,
            bin_logits,
            expectile,
            n_steps: input.n_steps(),
            n_rtg: input.rtgs.len(),
            n_act: input.actions.len(),
        })
    }

    /// Pure evaluation forward (no dropout); counts as one model call.
    pub fn forward(&self, input: &WindowInput) -> Result<ForwardOutput> {
        self.note_forward();
        let mut tape = Tape::new(&self.params);
        let h = self.build_forward(&mut tape, input, ForwardOpts::default())?;
        let to_rows = |t: Tx| -> Vec<Vec<f64>> {
            tape.value(t)
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect()
        };
        let col = |t: Tx| -> Vec<f64> { tape.value(t).column(0).to_vec() };
        Ok(ForwardOutput {
            action_logits: to_rows(h.action_logits),
            reward_est: col(h.reward_est),
            state_feat: to_rows(h.state_feat),
            action_feat: to_rows(h.action_feat),
            bin_logits: to_rows(h.bin_logits),
            expectile_seq: col(h.expectile),
        })
    }

    /// Embedded token sequence (token + positional, before the backbone):
    /// 3T rows for a complete window of T slots.
    pub fn embed_window(&self, input: &WindowInput) -> Result<Array2<f64>> {
        input.validate(&self.cfg)?;
        let plan = plan_tokens(input);
        let mut tape = Tape::new(&self.params);
        let tokens = self.build_tokens(&mut tape, input, &plan);
        Ok(tape.value(tokens).clone())
    }

    /// Next-token logits of the language path over `ids[..len-1]`.
    pub fn build_lm_logits(&self, tape: &mut Tape, ids: &[usize]) -> Result<Tx> {
        if self.cfg.lm_vocab == 0 {
            return Err(Error::Config("model has no LM projections".into()));
        }
        if ids.len() < 2 {
            return Err(Error::InvalidArgument(
                "language window needs at least 2 tokens".into(),
            ));
        }
        let n = ids.len() - 1;
        if n > self.cfg.lm_max_len() {
            return Err(Error::WindowTooLong {
                len: n,
                t_max: self.cfg.lm_max_len(),
            });
        }
        for &id in ids {
            if id >= self.cfg.lm_vocab {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocab {}",
                    self.cfg.lm_vocab
                )));
            }
        }
        let tok_table = tape.param(self.id("lm.tok"));
        let toks = tape.gather(tok_table, ids[..n].to_vec());
        let pos_table = tape.param(self.id("lm.pos"));
        let pos = tape.gather(pos_table, (0..n).collect());
        let x = tape.add(toks, pos);
        let allowed = Array2::from_shape_fn((n, n), |(q, k)| k <= q);
        let x = self.run_backbone(tape, x, &allowed, None);
        Ok(tape.affine(x, self.id("lm.head.w"), self.id("lm.head.b")))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{EmbedKind, FreezeMode};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            t_max: 4,
            state_dim: 3,
            n_items: 5,
            n_bins: 4,
            dropout: 0.0,
            embed_kind: EmbedKind::Mlp,
            lora_rank: 0,
            lora_alpha: 0.0,
            freeze_mode: FreezeMode::Full,
            lm_vocab: 0,
            return_bin_edges: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            rtg_scale: 1.0,
        }
    }

    fn window(states: &[[f64; 3]], rtgs: &[f64], actions: &[u32]) -> WindowInput {
        WindowInput {
            states: states.iter().map(|s| s.to_vec()).collect(),
            rtgs: rtgs.to_vec(),
            actions: actions.to_vec(),
            pad_left: 0,
        }
    }

    #[test]
    fn embed_window_has_3t_tokens() {
        let m = PolicyModel::init(tiny_cfg(), None, 3).unwrap();
        let w = window(
            &[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
            &[1.0, 0.5],
            &[0, 1],
        );
        let e = m.embed_window(&w).unwrap();
        assert_eq!(e.nrows(), 6);
        assert_eq!(e.ncols(), 16);
    }

    #[test]
    fn identical_windows_embed_identically() {
        let m = PolicyModel::init(tiny_cfg(), None, 3).unwrap();
        let w = window(&[[0.1, 0.2, 0.3]], &[1.0], &[2]);
        assert_eq!(m.embed_window(&w).unwrap(), m.embed_window(&w).unwrap());
    }

    #[test]
    fn zeroed_second_layer_embeds_to_bias() {
        let mut m = PolicyModel::init(tiny_cfg(), None, 3).unwrap();
        let w2 = m.params.id_of("embed.state.w2").unwrap();
        m.params.get_mut(w2).fill(0.0);
        let b2 = m.params.id_of("embed.state.b2").unwrap();
        let bias = m.params.get(b2).row(0).to_vec();
        // Kill positional embedding so the state token is the bias alone.
        let pos = m.params.id_of("embed.pos").unwrap();
        m.params.get_mut(pos).fill(0.0);
        let w = window(&[[0.7, -0.4, 0.2]], &[1.0], &[2]);
        let e = m.embed_window(&w).unwrap();
        for (c, &b) in bias.iter().enumerate() {
            assert!((e[(0, c)] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_blocks_future_influence() {
        let m = PolicyModel::init(tiny_cfg(), None, 7).unwrap();
        let base = window(
            &[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9]],
            &[1.5, 1.0, 0.5],
            &[0, 1, 2],
        );
        let mut bumped = base.clone();
        bumped.states[2][0] += 0.5;
        let a = m.forward(&base).unwrap();
        let b = m.forward(&bumped).unwrap();
        for j in 0..2 {
            assert_eq!(a.bin_logits[j], b.bin_logits[j]);
            assert_eq!(a.expectile_seq[j], b.expectile_seq[j]);
            assert_eq!(a.action_logits[j], b.action_logits[j]);
            assert_eq!(a.reward_est[j], b.reward_est[j]);
        }
        assert_ne!(a.bin_logits[2], b.bin_logits[2]);
    }

    #[test]
    fn bin_probs_normalize_and_expectile_finite() {
        let m = PolicyModel::init(tiny_cfg(), None, 11).unwrap();
        let w = window(&[[0.3, -0.2, 0.8], [0.0, 0.1, 0.2]], &[1.0, 0.8], &[3, 4]);
        let out = m.forward(&w).unwrap();
        let probs = out.bin_probs_last();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(out.expectile_value().is_finite());
        assert_eq!(out.action_logits.len(), 2);
        assert_eq!(out.action_logits[0].len(), 5);
        assert_eq!(out.bin_logits.len(), 2);
        assert_eq!(out.reward_est.len(), 2);
    }

    #[test]
    fn padded_window_matches_trimmed_window() {
        let m = PolicyModel::init(tiny_cfg(), None, 5).unwrap();
        let mut padded = window(&[[0.3, 0.1, -0.2], [0.5, 0.5, 0.5]], &[0.9, 0.4], &[1, 2]);
        padded.pad_left = 2;
        let trimmed = window(&[[0.3, 0.1, -0.2], [0.5, 0.5, 0.5]], &[0.9, 0.4], &[1, 2]);
        let a = m.forward(&padded).unwrap();
        let b = m.forward(&trimmed).unwrap();
        for (x, y) in a.bin_logits.iter().zip(&b.bin_logits) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        for (x, y) in a.expectile_seq.iter().zip(&b.expectile_seq) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in a.action_logits.iter().zip(&b.action_logits) {
            for (u, v) in x.iter().zip(y) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn partial_windows_shape_reads() {
        let m = PolicyModel::init(tiny_cfg(), None, 5).unwrap();
        // Ends at the newest state: no action logits for the final step.
        let q = WindowInput::ending_at_state(
            vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]],
            vec![1.0],
            vec![2],
        );
        let out = m.forward(&q).unwrap();
        assert_eq!(out.bin_logits.len(), 2);
        assert_eq!(out.action_logits.len(), 1);
        // Ends at the newest return: action logits available there.
        let q = WindowInput::ending_at_return(
            vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]],
            vec![1.0, 0.7],
            vec![2],
        );
        let out = m.forward(&q).unwrap();
        assert_eq!(out.action_logits.len(), 2);
        // Single state, nothing else.
        let q = WindowInput::ending_at_state(vec![vec![0.1, 0.2, 0.3]], vec![], vec![]);
        let out = m.forward(&q).unwrap();
        assert_eq!(out.bin_logits.len(), 1);
        assert!(out.action_logits.is_empty());
    }

    #[test]
    fn window_too_long_rejected() {
        let m = PolicyModel::init(tiny_cfg(), None, 5).unwrap();
        let w = window(
            &[[0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3], [0.0; 3]],
            &[1.0; 5],
            &[0; 5],
        );
        assert!(matches!(m.forward(&w), Err(Error::WindowTooLong { .. })));
    }

    #[test]
    fn forward_counter_increments() {
        let m = PolicyModel::init(tiny_cfg(), None, 5).unwrap();
        let w = window(&[[0.1, 0.2, 0.3]], &[1.0], &[0]);
        m.reset_forward_count();
        m.forward(&w).unwrap();
        m.forward(&w).unwrap();
        assert_eq!(m.forward_count(), 2);
    }
}
