//! Outer loop: two-route meta-gradient steps, meta-training with validation
//! checkpoints, and meta-test evaluation.
//!
//! Episodes within a batch run on parallel workers, each with its own tape
//! and a read-only view of the meta-state; gradients are collected in slot
//! order and averaged serially, so results are independent of scheduling.

use crate::config::{AblationSetting, TrainConfig};
use crate::episodes::{sample_episode, ClassDataset, Episode, Split};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::rng;
use crate::selftrain::{
    apply_group, run_episode, EpisodeEval, MetaGrads, MetaState, RunOptions, TAG_META_EPISODE,
    TAG_VAL_EPISODE,
};
use rayon::prelude::*;

/// Route masks for the meta update (normal training leaves both off; the
/// routing tests flip them to prove the two query losses update disjoint
/// parameter groups).
#[derive(Clone, Copy, Debug, Default)]
pub struct MetaStepOptions {
    /// Suppress the θ_m-route update (the SWN).
    pub mask_theta_m_route: bool,
    /// Suppress the θ_T-route update (scale-shift and classifier init).
    pub mask_theta_t_route: bool,
}

/// Aggregate statistics of one meta-batch (recorded before the update's
/// iteration counter advances).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub iteration: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub query_accuracy: f64,
    pub query_loss_t: f64,
    pub query_loss_m: f64,
    /// Mean stage-1 pseudo-label accuracy over the batch (None when no
    /// episode in the batch pseudo-labeled anything).
    pub pl_accuracy: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    xs.sum::<f64>() / n as f64
}

/// Average per-episode meta-gradients in slot order.
fn mean_grads(evals: &[EpisodeEval]) -> Result<MetaGrads> {
    let mut iter = evals.iter().map(|e| {
        e.grads
            .as_ref()
            .ok_or_else(|| Error::Contract("meta_step episode ran without gradients".into()))
    });
    let first = iter.next().ok_or_else(|| {
        Error::Contract("meta_step needs at least one episode".into())
    })??;
    let mut swn = first.swn.clone();
    let mut scale_shift = first.scale_shift.clone();
    let mut theta_prime = first.theta_prime.clone();
    for g in iter {
        let g = g?;
        for (acc, add) in swn
            .iter_mut()
            .chain(scale_shift.iter_mut())
            .chain(theta_prime.iter_mut())
            .zip(g.swn.iter().chain(g.scale_shift.iter()).chain(g.theta_prime.iter()))
        {
            for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / evals.len() as f64;
    for arr in swn
        .iter_mut()
        .chain(scale_shift.iter_mut())
        .chain(theta_prime.iter_mut())
    {
        for v in arr.data_mut() {
            *v *= inv;
        }
    }
    Ok(MetaGrads {
        swn,
        scale_shift,
        theta_prime,
    })
}

/// One outer update over a batch of episodes: the SWN moves along the
/// batch-averaged gradient of the query loss at θ_m; scale-shift and the
/// classifier init move along the gradient of the query loss at θ_T. The β
/// schedule advances afterwards.
pub fn meta_step(
    backbone: &Backbone,
    state: &mut MetaState,
    episodes: &[Episode],
    cfg: &TrainConfig,
    opts: MetaStepOptions,
) -> Result<BatchStats> {
    if episodes.is_empty() {
        return Err(Error::Contract("meta_step needs at least one episode".into()));
    }
    let run = RunOptions::train(cfg);
    let snapshot: &MetaState = state;
    let evals: Vec<EpisodeEval> = episodes
        .par_iter()
        .map(|e| run_episode(backbone, snapshot, e, cfg, run))
        .collect::<Result<_>>()?;
    let grads = mean_grads(&evals)?;

    let (beta1, beta2) = state.betas(cfg);
    let iteration = state.iteration;
    if !opts.mask_theta_m_route {
        apply_group(
            state.swn_params_mut(),
            &grads.swn,
            beta1,
            "soft-weighting-network",
            iteration,
        )?;
    }
    if !opts.mask_theta_t_route {
        apply_group(
            state.scale_shift_params_mut(),
            &grads.scale_shift,
            beta2,
            "scale-shift",
            iteration,
        )?;
        apply_group(
            state.theta_prime_params_mut(),
            &grads.theta_prime,
            beta2,
            "classifier-init",
            iteration,
        )?;
    }
    state.iteration += 1;

    let n = evals.len();
    let pl: Vec<f64> = evals
        .iter()
        .filter_map(|e| e.outcome.stages.first().and_then(|s| s.subset_pl_accuracy))
        .collect();
    Ok(BatchStats {
        iteration,
        beta1,
        beta2,
        query_accuracy: mean_of(evals.iter().map(|e| e.outcome.query_accuracy), n),
        query_loss_t: mean_of(evals.iter().map(|e| e.outcome.query_loss_t), n),
        query_loss_m: mean_of(evals.iter().map(|e| e.outcome.query_loss_m), n),
        pl_accuracy: if pl.is_empty() {
            None
        } else {
            Some(pl.iter().sum::<f64>() / pl.len() as f64)
        },
    })
}

/// One validation (or test) measurement during meta-training.
#[derive(Clone, Debug)]
pub struct EvalPoint {
    pub iteration: usize,
    pub val_accuracy: f64,
    pub val_ci95: Option<f64>,
    pub val_pl_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct MetaTrainResult {
    /// State after the last iteration.
    pub state: MetaState,
    /// State at the best validation accuracy (the final state when validation
    /// is disabled).
    pub best_state: MetaState,
    pub best_iteration: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<BatchStats>,
    pub evals: Vec<EvalPoint>,
}

/// Meta-train from `init` until the iteration counter reaches
/// `cfg.meta_iterations`, evaluating on fixed meta-validation episodes every
/// `eval_interval` iterations (plus at entry and exit) and tracking the best
/// validation state.
pub fn meta_train(
    backbone: &Backbone,
    ds: &ClassDataset,
    cfg: &TrainConfig,
    init: MetaState,
) -> Result<MetaTrainResult> {
    let mut state = init;
    let mut history = Vec::new();
    let mut evals: Vec<EvalPoint> = Vec::new();
    let mut best_state = state.clone();
    let mut best_iteration = state.iteration;
    let mut best_val = f64::NEG_INFINITY;
    let do_eval = cfg.val_episodes > 0;
    let target = cfg.meta_iterations;
    let epcfg = cfg.episode_config();

    loop {
        let i = state.iteration;
        let boundary = i >= target || (cfg.eval_interval > 0 && i % cfg.eval_interval == 0);
        if do_eval && boundary && evals.last().map(|e| e.iteration) != Some(i) {
            let report = meta_test(
                backbone,
                &state,
                ds,
                cfg,
                Split::MetaVal,
                cfg.ablation,
                cfg.val_episodes,
                cfg.meta_stages,
                TAG_VAL_EPISODE,
            )?;
            let point = EvalPoint {
                iteration: i,
                val_accuracy: report.mean_accuracy,
                val_ci95: report.ci95,
                val_pl_accuracy: report.stage_pl_means.first().copied().flatten(),
            };
            if point.val_accuracy > best_val {
                best_val = point.val_accuracy;
                best_state = state.clone();
                best_iteration = i;
            }
            evals.push(point);
        }
        if i >= target {
            break;
        }
        let mut batch = Vec::with_capacity(cfg.meta_batch);
        for slot in 0..cfg.meta_batch {
            let seed = rng::mix(cfg.seed, &[TAG_META_EPISODE, i as u64, slot as u64]);
            batch.push(sample_episode(ds, Split::MetaTrain, &epcfg, seed)?);
        }
        history.push(meta_step(backbone, &mut state, &batch, cfg, MetaStepOptions::default())?);
    }

    if !do_eval {
        best_state = state.clone();
        best_iteration = state.iteration;
        best_val = f64::NAN;
    }
    Ok(MetaTrainResult {
        state,
        best_state,
        best_iteration,
        best_val_accuracy: best_val,
        history,
        evals,
    })
}

/// Per-episode evaluation record; pairing across settings relies on the
/// episode seed being a pure function of (config seed, seed tag, index).
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub query_loss: f64,
    pub stage_subset_pl: Vec<Option<f64>>,
    pub stage_selected_pl: Vec<Option<f64>>,
    pub selected_total: usize,
    pub shortfall_classes: usize,
}

#[derive(Clone, Debug)]
pub struct TestReport {
    pub setting: AblationSetting,
    pub split: Split,
    pub episodes: usize,
    pub mean_accuracy: f64,
    /// 95% CI half-width (normal approximation); None for a single episode.
    pub ci95: Option<f64>,
    pub mean_query_loss: f64,
    /// Per-stage mean pseudo-label accuracy over the drawn subsets.
    pub stage_pl_means: Vec<Option<f64>>,
    /// Per-stage mean pseudo-label accuracy over the retained samples.
    pub stage_selected_pl_means: Vec<Option<f64>>,
    pub records: Vec<EpisodeRecord>,
}

/// Mean and 95% half-width (1.96·s/√n with the n−1 sample deviation);
/// the interval is undefined for fewer than two values.
pub fn mean_and_ci95(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(1.96 * var.sqrt() / (n as f64).sqrt()))
}

fn stage_means(per_episode: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    let stages = per_episode.iter().map(|v| v.len()).max().unwrap_or(0);
    (0..stages)
        .map(|s| {
            let vals: Vec<f64> = per_episode
                .iter()
                .filter_map(|v| v.get(s).copied().flatten())
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect()
}

/// Evaluate a setting over freshly sampled episodes of `split`. Episode i's
/// seed is `mix(cfg.seed, [seed_tag, i])`, so two settings evaluated with the
/// same tag see identical episodes (paired comparisons).
#[allow(clippy::too_many_arguments)]
pub fn meta_test(
    backbone: &Backbone,
    state: &MetaState,
    ds: &ClassDataset,
    cfg: &TrainConfig,
    split: Split,
    setting: AblationSetting,
    episodes: usize,
    stages: usize,
    seed_tag: u64,
) -> Result<TestReport> {
    if episodes == 0 {
        return Err(Error::Contract("meta_test needs at least one episode".into()));
    }
    let run = RunOptions::evaluate(setting, stages);
    let epcfg = cfg.episode_config();
    let evals: Vec<(u64, EpisodeEval)> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let seed = rng::mix(cfg.seed, &[seed_tag, i as u64]);
            let episode = sample_episode(ds, split, &epcfg, seed)?;
            run_episode(backbone, state, &episode, cfg, run).map(|ev| (seed, ev))
        })
        .collect::<Result<_>>()?;

    let records: Vec<EpisodeRecord> = evals
        .iter()
        .enumerate()
        .map(|(index, (seed, ev))| EpisodeRecord {
            index,
            seed: *seed,
            accuracy: ev.outcome.query_accuracy,
            query_loss: ev.outcome.query_loss_t,
            stage_subset_pl: ev
                .outcome
                .stages
                .iter()
                .map(|s| s.subset_pl_accuracy)
                .collect(),
            stage_selected_pl: ev
                .outcome
                .stages
                .iter()
                .map(|s| s.selected_pl_accuracy)
                .collect(),
            selected_total: ev.outcome.stages.iter().map(|s| s.selected).sum(),
            shortfall_classes: ev.outcome.stages.iter().map(|s| s.shortfall_classes).sum(),
        })
        .collect();

    let accs: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (mean_accuracy, ci95) = mean_and_ci95(&accs);
    let subset_pl: Vec<Vec<Option<f64>>> =
        records.iter().map(|r| r.stage_subset_pl.clone()).collect();
    let selected_pl: Vec<Vec<Option<f64>>> =
        records.iter().map(|r| r.stage_selected_pl.clone()).collect();
    Ok(TestReport {
        setting,
        split,
        episodes,
        mean_accuracy,
        ci95,
        mean_query_loss: mean_of(records.iter().map(|r| r.query_loss), records.len()),
        stage_pl_means: stage_means(&subset_pl),
        stage_selected_pl_means: stage_means(&selected_pl),
        records,
    })
}
