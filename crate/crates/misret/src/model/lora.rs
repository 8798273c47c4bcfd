//! Low-rank adaptation of the attention projections: each Q/K/V matrix W
//! gains a delta (alpha/r) * B A with B zero-initialized, so attaching
//! adapters leaves the forward pass unchanged until training moves them.

use super::{FreezeMode, PolicyModel};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::{rng_for, Stream};

/// Attach rank-`r` adapters to every attention Q/K/V matrix.
pub fn lora_attach(model: &mut PolicyModel, r: usize, alpha_scale: f64, seed: u64) -> Result<()> {
    if model.lora_attached {
        return Err(Error::LoraAlreadyAttached);
    }
    if r == 0 || r >= model.cfg.d_model {
        return Err(Error::Config(format!(
            "lora rank {r} must be in 1..d_model ({})",
            model.cfg.d_model
        )));
    }
    let mut rng = rng_for(seed, Stream::ParamInit);
    let d = model.cfg.d_model;
    for l in 0..model.cfg.n_layers {
        for m in ["wq", "wk", "wv"] {
            let base = format!("backbone.l{l}.attn.{m}");
            model
                .params
                .add_normal(&format!("{base}.lora_a"), r, d, 0.02, &mut rng);
            model.params.add_zeros(&format!("{base}.lora_b"), d, r);
        }
    }
    model.cfg.lora_rank = r;
    model.cfg.lora_alpha = alpha_scale;
    model.lora_attached = true;
    model.apply_freeze();
    Ok(())
}

/// Fold W + (alpha/r) B A into plain matrices and drop the adapters.
pub fn lora_merge(model: PolicyModel) -> PolicyModel {
    if !model.lora_attached {
        return model;
    }
    let scale = model.cfg.lora_alpha / model.cfg.lora_rank as f64;
    let mut merged = ParamStore::new();
    for (_, e) in model.params.iter() {
        if super::is_lora_adapter(&e.name) {
            continue;
        }
        let mut value = e.value.clone();
        let a_name = format!("{}.lora_a", e.name);
        let b_name = format!("{}.lora_b", e.name);
        if let (Some(a), Some(b)) = (model.params.id_of(&a_name), model.params.id_of(&b_name)) {
            let delta = model.params.get(b).dot(model.params.get(a));
            value.scaled_add(scale, &delta);
        }
        merged.add(&e.name, value, e.trainable);
    }
    let mut cfg = model.cfg.clone();
    cfg.lora_rank = 0;
    cfg.lora_alpha = 0.0;
    if cfg.freeze_mode == FreezeMode::Lora {
        cfg.freeze_mode = FreezeMode::Frozen;
    }
    let mut out = PolicyModel {
        cfg,
        params: merged,
        vocab: model.vocab.clone(),
        lora_attached: false,
        forward_count: Default::default(),
    };
    out.apply_freeze();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{tests::tiny_cfg, WindowInput};
    use crate::model::PolicyModel;
    use rand::Rng;

    fn rand_window(rng: &mut impl Rng) -> WindowInput {
        let l = rng.random_range(1..=3usize);
        WindowInput {
            states: (0..l)
                .map(|_| (0..3).map(|_| rng.random::<f64>() - 0.5).collect())
                .collect(),
            rtgs: (0..l).map(|_| rng.random::<f64>()).collect(),
            actions: (0..l).map(|_| rng.random_range(0..5)).collect(),
            pad_left: 0,
        }
    }

    #[test]
    fn zero_init_attach_is_identity() {
        for seed in [1u64, 2, 3] {
            let mut m = PolicyModel::init(tiny_cfg(), None, seed).unwrap();
            let mut rng = crate::rng::stream_rng(seed, 99);
            let w = rand_window(&mut rng);
            let before = m.forward(&w).unwrap();
            lora_attach(&mut m, 2, 2.0, seed).unwrap();
            let after = m.forward(&w).unwrap();
            for (a, b) in before.bin_logits.iter().zip(&after.bin_logits) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
            for (a, b) in before.action_logits.iter().zip(&after.action_logits) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn merge_matches_adapter_forward() {
        for seed in [5u64, 6] {
            let mut m = PolicyModel::init(tiny_cfg(), None, seed).unwrap();
            lora_attach(&mut m, 2, 2.0, seed).unwrap();
            // Give the adapters non-trivial values.
            let mut rng = crate::rng::stream_rng(seed, 123);
            for i in 0..m.params.len() {
                let id = crate::nn::ParamId(i);
                if crate::model::is_lora_adapter(&m.params.entry(id).name) {
                    m.params
                        .get_mut(id)
                        .mapv_inplace(|_| (rng.random::<f64>() - 0.5) * 0.2);
                }
            }
            let w = rand_window(&mut rng);
            let with_adapters = m.forward(&w).unwrap();
            let merged = lora_merge(m);
            assert!(!merged.lora_attached);
            assert!(merged.params.id_of("backbone.l0.attn.wq.lora_a").is_none());
            let folded = merged.forward(&w).unwrap();
            for (a, b) in with_adapters
                .action_logits
                .iter()
                .zip(&folded.action_logits)
            {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-5);
                }
            }
            for (x, y) in with_adapters
                .expectile_seq
                .iter()
                .zip(&folded.expectile_seq)
            {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn double_attach_rejected() {
        let mut m = PolicyModel::init(tiny_cfg(), None, 1).unwrap();
        lora_attach(&mut m, 2, 2.0, 1).unwrap();
        assert!(matches!(
            lora_attach(&mut m, 2, 2.0, 1),
            Err(Error::LoraAlreadyAttached)
        ));
    }

    #[test]
    fn adapter_fraction_below_ten_percent_at_default_size() {
        // Default-scale backbone: d_model=64, 2 layers, r=4.
        let mut cfg = crate::model::ModelConfig::default();
        cfg.state_dim = 16;
        cfg.lm_vocab = 30;
        cfg.freeze_mode = crate::model::FreezeMode::Lora;
        cfg.lora_rank = 4;
        cfg.lora_alpha = 4.0;
        let m = PolicyModel::init(cfg, None, 2).unwrap();
        let (_, total, adapters) = m.param_report();
        assert!(adapters > 0);
        assert!(
            (adapters as f64) < 0.10 * total as f64,
            "adapters {adapters} / total {total}"
        );
    }
}
