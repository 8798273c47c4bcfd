//! Command implementations behind the `misret` binary: data generation, LM
//! pretraining, policy training (with ablation flags), evaluation, the
//! stitching demo, and single-knob sweeps.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::infer::{
    act, estimate_max_returns, rollout_eval, ActContext, EvalReport, HistStep, SearchConfig,
};
use crate::lm::{builtin_corpus, pretrain_lm, tokenize_corpus, TextCorpus};
use crate::model::checkpoint::{load_checkpoint, load_model, save_model_tagged};
use crate::model::{EmbedKind, FreezeMode, PolicyModel};
use crate::rng::{rng_for, Stream};
use crate::sim::stitch::{build_stitch_toy, ToyEnv, ToyState};
use crate::sim::{gen_mixed_dataset, LatentWorld};
use crate::train::{train, write_metrics_jsonl};

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.out_dir)?;
    Ok(())
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct DataSidecar<'a> {
    config_digest: String,
    config: &'a ExperimentConfig,
    toy: bool,
    n_trajectories: usize,
    total_steps: usize,
}

/// Write the training dataset (mixed-quality behavior data, or the
/// two-trajectory stitching toy) plus a provenance sidecar.
pub fn cmd_gen_data(cfg: &ExperimentConfig, toy: bool, force: bool) -> Result<PathBuf> {
    ensure_out_dir(cfg)?;
    let path = cfg.paths.dataset();
    refuse_existing(&path, force)?;
    let ds = if toy {
        build_stitch_toy()
    } else {
        let world = Arc::new(LatentWorld::generate(cfg.world.to_world_config())?);
        gen_mixed_dataset(&world, &cfg.world.mix_episodes(), cfg.seed, cfg.model.n_bins)?
    };
    save_dataset(&ds, &path)?;
    let sidecar = DataSidecar {
        config_digest: cfg.digest(),
        config: cfg,
        toy,
        n_trajectories: ds.trajectories.len(),
        total_steps: ds.total_steps(),
    };
    let sidecar_path = path.with_extension("meta.json");
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?)?;
    println!(
        "wrote {} ({} trajectories, {} steps) + {}",
        path.display(),
        ds.trajectories.len(),
        ds.total_steps(),
        sidecar_path.display()
    );
    Ok(path)
}

fn load_corpus(cfg: &ExperimentConfig) -> Result<TextCorpus> {
    match &cfg.paths.corpus {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("corpus {}: {e}", p.display()))
            })?;
            tokenize_corpus(&text)
        }
        None => Ok(builtin_corpus()),
    }
}

/// Pretrain the language prior and save its checkpoint. Returns the
/// held-out NLL (before, after).
pub fn cmd_pretrain_lm(cfg: &ExperimentConfig) -> Result<(f64, f64)> {
    ensure_out_dir(cfg)?;
    let corpus = load_corpus(cfg)?;
    // Dataset-derived fields are irrelevant to the prior; only the backbone
    // and the LM projections are consumed downstream.
    let template = cfg.model.to_model_config(
        cfg.world.state_dim(),
        cfg.world.n_items,
        (0..=cfg.model.n_bins).map(|i| i as f64).collect(),
        1.0,
        0,
    );
    let pcfg = cfg.train.to_pretrain_config(cfg.seed);
    let out = pretrain_lm(&template, &corpus, &pcfg)?;
    let path = cfg.paths.prior();
    save_model_tagged(&out.model, &path, "lm-prior")?;
    println!(
        "pretrained LM prior: held-out NLL {:.4} -> {:.4} ({} steps, vocab {}); wrote {}",
        out.heldout_before,
        out.heldout_after,
        pcfg.steps,
        corpus.vocab_size(),
        path.display()
    );
    Ok((out.heldout_before, out.heldout_after))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainFlags {
    pub ablate_lm: bool,
    pub ablate_max: bool,
    pub embed: Option<EmbedKind>,
    pub freeze: Option<FreezeMode>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub variant: String,
    pub trainable: usize,
    pub total: usize,
    pub adapters: usize,
    pub final_loss: f64,
}

fn variant_name(flags: &TrainFlags) -> String {
    match (flags.ablate_lm, flags.ablate_max) {
        (false, false) => "full".into(),
        (true, false) => "no-lm".into(),
        (false, true) => "no-max".into(),
        (true, true) => "no-lm+no-max".into(),
    }
}

fn rtg_scale_of(ds: &Dataset) -> f64 {
    ds.bin_min().abs().max(ds.bin_max().abs()).max(1.0)
}

/// Train a policy on the generated dataset. The full model initializes the
/// backbone from the LM prior and keeps the auxiliary language loss;
/// --ablate-lm switches to random init with the auxiliary loss off, and
/// --ablate-max disables the maximal-return head (the checkpoint tag tells
/// evaluation to skip the history search).
pub fn cmd_train(cfg: &ExperimentConfig, flags: &TrainFlags) -> Result<TrainSummary> {
    ensure_out_dir(cfg)?;
    let ds_path = cfg.paths.dataset();
    let ds = load_dataset(&ds_path).map_err(|e| {
        Error::Config(format!(
            "dataset {} not loadable ({e}); run `misret gen-data` first",
            ds_path.display()
        ))
    })?;

    let mut model_section = cfg.model.clone();
    if let Some(embed) = flags.embed {
        model_section.embed = embed;
    }
    if let Some(freeze) = flags.freeze {
        model_section.freeze = freeze;
    }

    let aux_language = cfg.train.aux_language && !flags.ablate_lm;
    let max_head = cfg.train.max_head && !flags.ablate_max;

    let (prior, corpus) = if flags.ablate_lm {
        (None, None)
    } else {
        let prior_path = cfg.paths.prior();
        let ck = load_checkpoint(&prior_path).map_err(|e| {
            Error::Config(format!(
                "LM prior {} not loadable ({e}); run `misret pretrain-lm` first",
                prior_path.display()
            ))
        })?;
        let corpus = if aux_language {
            let corpus = load_corpus(cfg)?;
            match &ck.vocab {
                Some(v) if *v == corpus.vocab => {}
                _ => {
                    return Err(Error::Config(
                        "corpus vocabulary does not match the LM prior checkpoint".into(),
                    ))
                }
            }
            Some(corpus)
        } else {
            None
        };
        (Some(ck), corpus)
    };

    let lm_vocab = prior.as_ref().map_or(0, |ck| ck.cfg.lm_vocab);
    let mcfg = model_section.to_model_config(
        ds.state_dim,
        ds.catalog_size,
        ds.return_bins.clone(),
        rtg_scale_of(&ds),
        lm_vocab,
    );
    let mut model = PolicyModel::init(mcfg, prior.as_ref(), cfg.seed)?;

    let mut tcfg = cfg.train.to_train_config(cfg.seed);
    tcfg.aux_language = aux_language;
    tcfg.max_head = max_head;

    let log = train(&mut model, &ds, corpus.as_ref(), &tcfg, Some(&cfg.paths.out_dir))?;
    write_metrics_jsonl(&log, &cfg.paths.metrics())?;

    let variant = variant_name(flags);
    let tag = format!(
        "variant={variant};embed={:?};freeze={:?};max_head={max_head};aux={aux_language};digest={}",
        model_section.embed,
        model_section.freeze,
        cfg.digest()
    );
    let ckpt = cfg.paths.model();
    save_model_tagged(&model, &ckpt, &tag)?;

    let (trainable, total, adapters) = model.param_report();
    let final_loss = log.last().map_or(f64::NAN, |m| m.l_total);
    println!(
        "trained variant {variant} ({} steps): final loss {final_loss:.4}; \
         {trainable}/{total} trainable params ({adapters} in adapters); wrote {}",
        tcfg.steps,
        ckpt.display()
    );
    Ok(TrainSummary {
        checkpoint: ckpt,
        variant,
        trainable,
        total,
        adapters,
        final_loss,
    })
}

/// Evaluate a checkpoint on fresh parallel environments and write the
/// metrics report.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    episodes_override: Option<usize>,
) -> Result<EvalReport> {
    ensure_out_dir(cfg)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.model());
    let ck = load_checkpoint(&ckpt_path)?;
    let model = load_model(&ckpt_path)?;
    let world = Arc::new(LatentWorld::generate(cfg.world.to_world_config())?);
    if model.cfg.state_dim != world.state_dim() || model.cfg.n_items != world.cfg.n_items {
        return Err(Error::DimMismatch {
            names: vec![format!(
                "checkpoint expects d_s={} x {} items, world provides d_s={} x {}",
                model.cfg.state_dim,
                model.cfg.n_items,
                world.state_dim(),
                world.cfg.n_items
            )],
        });
    }
    let episodes = match episodes_override {
        Some(0) => {
            return Err(Error::InvalidArgument(
                "--episodes must be >= 1".into(),
            ))
        }
        Some(n) => n,
        None => cfg.search.episodes_per_env,
    };
    let use_max_head = !ck.tag.contains("max_head=false");
    let scfg = cfg.search.to_search_config(use_max_head);
    let mut report = rollout_eval(
        &model,
        &world,
        cfg.search.n_envs,
        episodes,
        &scfg,
        cfg.seed,
    )?;
    report.config_digest = cfg.digest();
    std::fs::write(
        cfg.paths.report(),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "eval ({} envs x {} episodes): R_cumu {:.4} +/- {:.4}, R_avg {:.4} +/- {:.4}, Length {:.2}",
        report.n_envs,
        report.episodes_per_env,
        report.r_cumu.mean,
        report.r_cumu.std,
        report.r_avg.mean,
        report.r_avg.std,
        report.length_mean
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyEpisode {
    pub start: String,
    pub t_star_at_mid: usize,
    pub terminal: String,
    pub episode_return: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StitchSeedResult {
    pub seed: u64,
    pub rhat_t1_at_mid: f64,
    pub rhat_t2_b_prefix: f64,
    pub from_b0: ToyEpisode,
    pub from_a0: ToyEpisode,
    pub pass: bool,
}

fn toy_state_name(s: ToyState) -> String {
    format!("{s:?}")
}

fn run_toy_episode(
    model: &PolicyModel,
    scfg: &SearchConfig,
    start: ToyState,
    seed: u64,
) -> Result<ToyEpisode> {
    let mut env = ToyEnv::reset(start)?;
    let mut rng = rng_for(seed, Stream::ActSampler(start.index() as u64));
    let mut ctx = ActContext {
        past: Vec::new(),
        current_state: start.one_hot_f64(),
    };
    let mut episode_return = 0.0;
    let mut t_star_at_mid = 0;
    loop {
        let at_mid = env.state == ToyState::Mid;
        let outcome = act(model, &ctx, scfg, &mut rng)?;
        if at_mid {
            t_star_at_mid = outcome.t_star;
        }
        let (next, reward, done) = env.step(outcome.action)?;
        ctx.past.push(HistStep {
            state: std::mem::take(&mut ctx.current_state),
            rtg_used: outcome.conditioned_return,
            action: outcome.action,
            reward,
        });
        ctx.current_state = next.one_hot_f64();
        episode_return += reward;
        if done {
            return Ok(ToyEpisode {
                start: toy_state_name(start),
                t_star_at_mid,
                terminal: toy_state_name(next),
                episode_return,
            });
        }
    }
}

/// Train a small model per seed on the two-trajectory toy, then check that
/// inference stitches: from B0 the search truncates to T*=1 at the shared
/// middle state and the rollout attains the out-of-dataset return 1.5; from
/// A0 the tie rule keeps the longer history and the return stays 1.0.
pub fn cmd_stitch_demo(cfg: &ExperimentConfig, seeds: u64) -> Result<Vec<StitchSeedResult>> {
    let ds = build_stitch_toy();
    let mut results = Vec::new();
    for seed in 0..seeds {
        let mcfg = crate::model::ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            t_max: 2,
            state_dim: ds.state_dim,
            n_items: ds.catalog_size,
            n_bins: ds.n_bins(),
            dropout: 0.0,
            embed_kind: EmbedKind::Mlp,
            lora_rank: 0,
            lora_alpha: 0.0,
            freeze_mode: FreezeMode::Full,
            lm_vocab: 0,
            return_bin_edges: ds.return_bins.clone(),
            rtg_scale: 1.0,
        };
        let mut model = PolicyModel::init(mcfg, None, seed)?;
        let tcfg = crate::train::TrainConfig {
            alpha: cfg.train.alpha,
            lambda: 0.0,
            lr: 3e-3,
            batch: 16,
            steps: 2500,
            grad_clip: 1.0,
            seed,
            checkpoint_every: 0,
            aux_language: false,
            max_head: true,
            max_head_stop_grad: false,
            lang_batch: 0,
            lang_window: 8,
        };
        train(&mut model, &ds, None, &tcfg, None)?;

        let scfg = cfg.search.to_search_config(true);
        // Estimator checks on the dataset contexts.
        let mid_alone = ActContext {
            past: Vec::new(),
            current_state: ToyState::Mid.one_hot_f64(),
        };
        let ests = estimate_max_returns(&model, &mid_alone, &scfg)?;
        let rhat_t1 = ests
            .iter()
            .find(|(t, _)| *t == 1)
            .expect("grid contains 1")
            .1;
        let b_prefix = ActContext {
            past: vec![HistStep {
                state: ToyState::B0.one_hot_f64(),
                rtg_used: 0.5,
                action: 0,
                reward: 0.5,
            }],
            current_state: ToyState::Mid.one_hot_f64(),
        };
        let ests_b = estimate_max_returns(&model, &b_prefix, &scfg)?;
        let rhat_t2_b = ests_b
            .iter()
            .find(|(t, _)| *t == 2)
            .expect("grid contains 2")
            .1;

        let from_b0 = run_toy_episode(&model, &scfg, ToyState::B0, seed)?;
        let from_a0 = run_toy_episode(&model, &scfg, ToyState::A0, seed)?;

        let pass = (0.9..=1.1).contains(&rhat_t1)
            && (-0.1..=0.1).contains(&rhat_t2_b)
            && from_b0.t_star_at_mid == 1
            && from_b0.terminal == "A1"
            && (from_b0.episode_return - 1.5).abs() < 1e-9
            && from_a0.t_star_at_mid == 2
            && from_a0.terminal == "A1"
            && (from_a0.episode_return - 1.0).abs() < 1e-9;
        println!(
            "seed {seed}: R^(T=1|mid)={rhat_t1:.3} R^(T=2|B-prefix)={rhat_t2_b:.3} \
             B0->[T*={} {} ret {:.2}] A0->[T*={} {} ret {:.2}] {}",
            from_b0.t_star_at_mid,
            from_b0.terminal,
            from_b0.episode_return,
            from_a0.t_star_at_mid,
            from_a0.terminal,
            from_a0.episode_return,
            if pass { "PASS" } else { "FAIL" }
        );
        results.push(StitchSeedResult {
            seed,
            rhat_t1_at_mid: rhat_t1,
            rhat_t2_b_prefix: rhat_t2_b,
            from_b0,
            from_a0,
            pass,
        });
    }
    let passed = results.iter().filter(|r| r.pass).count();
    println!("stitch demo: {passed}/{} seeds pass", results.len());
    Ok(results)
}

/// Train + eval once per value of a single dotted config key, isolating
/// artifacts per value under out_dir/sweep/.
pub fn cmd_sweep(
    config_path: Option<&Path>,
    key: &str,
    values: &[String],
    flags: &TrainFlags,
) -> Result<Vec<(String, EvalReport)>> {
    let mut out = Vec::new();
    for value in values {
        let mut cfg = crate::config::load_config(
            config_path,
            &[(key.to_string(), value.clone())],
        )?;
        let base = crate::config::load_config(config_path, &[])?;
        let sweep_dir = base
            .paths
            .out_dir
            .join("sweep")
            .join(format!("{}={}", key.replace('.', "_"), value));
        // Data and prior are shared from the base run; per-value artifacts
        // land in the sweep directory.
        cfg.paths.dataset = Some(base.paths.dataset());
        cfg.paths.prior = Some(base.paths.prior());
        cfg.paths.model = Some(sweep_dir.join("model.ckpt"));
        cfg.paths.metrics = Some(sweep_dir.join("metrics.jsonl"));
        cfg.paths.report = Some(sweep_dir.join("report.json"));
        cfg.paths.out_dir = sweep_dir;
        ensure_out_dir(&cfg)?;
        println!("=== sweep {key} = {value} ===");
        cmd_train(&cfg, flags)?;
        let report = cmd_eval(&cfg, None, None)?;
        out.push((value.clone(), report));
    }
    println!("sweep {key}: value, R_cumu, R_avg, Length");
    for (v, r) in &out {
        println!(
            "  {v}: {:.4} +/- {:.4}, {:.4} +/- {:.4}, {:.2}",
            r.r_cumu.mean, r.r_cumu.std, r.r_avg.mean, r.r_avg.std, r.length_mean
        );
    }
    Ok(out)
}
