//! Inner-loop self-training on a single episode.
//!
//! The whole episode lives on one tape: meta-parameters are staged as
//! leaves, support/query/pool features are computed once per stage, and each
//! classifier update appends its own gradient nodes. Pseudo-labeling and
//! hard selection are discrete reads of taped values — labels and indices
//! are data, not graph nodes — so no gradient flows through them, while the
//! selected samples' features and soft weights stay on the tape and keep
//! their gradient paths.

use crate::autodiff::{Array, NodeId, Tape};
use crate::config::{AblationSetting, TrainConfig};
use crate::episodes::{draw_unlabeled_subset, mixing_pool, Episode};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, classify, features, prototypes, stage_backbone, stage_scale_shift, stage_swn,
    swn_weight_matrix, Backbone,
};
use crate::rng;
use crate::selftrain::{MetaState, TAG_SUBSET_DRAW};

/// Classifier parameters staged on a tape: (weights, bias).
pub type Theta = (NodeId, NodeId);

/// A pseudo-labeled (or label-revealed) batch ready for re-training.
pub struct PseudoBatch {
    /// Taped features of the retained samples, [n_p, embed].
    pub feats: NodeId,
    /// One label per retained sample (pseudo or revealed true label).
    pub labels: Vec<usize>,
    /// Optional SWN weight matrix, [n_p, way]; `None` means plain CE.
    pub weights: Option<NodeId>,
}

/// Mean support cross-entropy at θ.
pub fn support_loss(tape: &mut Tape, feats_s: NodeId, y_s: &[usize], theta: Theta) -> Result<NodeId> {
    let logits = classify(tape, feats_s, theta.0, theta.1)?;
    let ce = tape.cross_entropy_rows(logits, y_s)?;
    tape.mean(ce)
}

/// Mixed re-training loss over S ∪ R^p: support terms are plain CE, pseudo
/// terms are CE of the weighted logits, and the total is the mean over the
/// union. With no pseudo batch this *is* `support_loss` — the same calls in
/// the same order — so an empty R^p degenerates bit-exactly to a
/// support-only step.
pub fn mixed_loss(
    tape: &mut Tape,
    feats_s: NodeId,
    y_s: &[usize],
    pseudo: Option<&PseudoBatch>,
    theta: Theta,
) -> Result<NodeId> {
    let Some(batch) = pseudo else {
        return support_loss(tape, feats_s, y_s, theta);
    };
    let n_s = tape.value(feats_s).rows();
    let n_p = batch.labels.len();
    let logits_s = classify(tape, feats_s, theta.0, theta.1)?;
    let ce_s = tape.cross_entropy_rows(logits_s, y_s)?;
    let logits_p = classify(tape, batch.feats, theta.0, theta.1)?;
    let ce_p = match batch.weights {
        Some(w) => {
            let weighted = tape.mul(w, logits_p)?;
            tape.cross_entropy_rows(weighted, &batch.labels)?
        }
        None => tape.cross_entropy_rows(logits_p, &batch.labels)?,
    };
    let sum_s = tape.sum(ce_s)?;
    let sum_p = tape.sum(ce_p)?;
    let total = tape.add(sum_s, sum_p)?;
    tape.scale(total, 1.0 / (n_s + n_p) as f64)
}

/// One SGD step on the classifier. In first-order mode the gradient is
/// wrapped in stop-gradient, so outer backward passes treat the update as a
/// constant; values are identical either way.
pub fn theta_step(
    tape: &mut Tape,
    loss: NodeId,
    theta: Theta,
    alpha: f64,
    first_order: bool,
) -> Result<Theta> {
    let g = tape.grad_nodes(loss, &[theta.0, theta.1])?;
    let (gw, gb) = if first_order {
        (tape.stop_gradient(g[0]), tape.stop_gradient(g[1]))
    } else {
        (g[0], g[1])
    };
    let dw = tape.scale(gw, alpha)?;
    let db = tape.scale(gb, alpha)?;
    Ok((tape.sub(theta.0, dw)?, tape.sub(theta.1, db)?))
}

#[derive(Debug)]
pub struct FitResult {
    pub theta: Theta,
    /// Loss at the parameters each step starts from; length = steps.
    pub losses: Vec<f64>,
}

/// Plain gradient descent on the support set for `steps` steps from `theta0`.
pub fn fit_on_support(
    tape: &mut Tape,
    feats_s: NodeId,
    y_s: &[usize],
    theta0: Theta,
    steps: usize,
    alpha: f64,
    first_order: bool,
) -> Result<FitResult> {
    let mut theta = theta0;
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let loss = support_loss(tape, feats_s, y_s, theta)
            .map_err(|e| Error::Numeric(format!("support fit step {step}: {e}")))?;
        losses.push(tape.value_scalar(loss));
        theta = theta_step(tape, loss, theta, alpha, first_order)
            .map_err(|e| Error::Numeric(format!("support fit step {step}: {e}")))?;
    }
    Ok(FitResult { theta, losses })
}

/// Argmax pseudo-labels with max-softmax confidences (a plain read of logit
/// values — selection carries no gradient). Ties resolve to the lowest class
/// index; confidences lie in [1/N, 1].
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
}

pub fn pseudo_label(logits: &Array) -> PseudoLabels {
    let (n, way) = (logits.rows(), logits.cols());
    let mut labels = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    for i in 0..n {
        let row = logits.row_slice(i);
        let label = logits.argmax_row(i);
        let max = row[label];
        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        labels.push(label);
        confidences.push(1.0 / denom);
        debug_assert!(way == 0 || (1.0 / denom) >= 1.0 / way as f64 - 1e-12);
    }
    PseudoLabels { labels, confidences }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shortfall {
    pub class: usize,
    pub wanted: usize,
    pub kept: usize,
}

/// Hard selection outcome. `indices` are positions into the labeled batch
/// (class-major; confidence-descending within each class).
pub struct Selection {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub shortfalls: Vec<Shortfall>,
}

/// Keep the top-`z` most confident samples per predicted class (ties broken
/// by lower sample index). Classes with fewer than `z` members — including
/// zero — keep what they have and record a shortfall. `z = None` keeps every
/// sample (the no-selection setting) and records nothing.
pub fn hard_select(pl: &PseudoLabels, way: usize, z: Option<usize>) -> Selection {
    let mut indices = Vec::new();
    let mut labels = Vec::new();
    let mut confidences = Vec::new();
    let mut shortfalls = Vec::new();
    for class in 0..way {
        let mut group: Vec<usize> = (0..pl.labels.len())
            .filter(|&i| pl.labels[i] == class)
            .collect();
        group.sort_by(|&a, &b| {
            pl.confidences[b]
                .total_cmp(&pl.confidences[a])
                .then(a.cmp(&b))
        });
        let keep = match z {
            Some(z) => {
                if group.len() < z {
                    shortfalls.push(Shortfall {
                        class,
                        wanted: z,
                        kept: group.len(),
                    });
                }
                group.len().min(z)
            }
            None => group.len(),
        };
        for &i in &group[..keep] {
            indices.push(i);
            labels.push(class);
            confidences.push(pl.confidences[i]);
        }
    }
    Selection {
        indices,
        labels,
        confidences,
        shortfalls,
    }
}

/// Per-stage bookkeeping (everything here is evaluation-only; hidden labels
/// never touch a gradient).
#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: usize,
    /// Unlabeled samples drawn this stage.
    pub drawn: usize,
    /// Samples retained after selection (or label reveal).
    pub selected: usize,
    /// Predicted classes that came up short of Z.
    pub shortfall_classes: usize,
    /// Pseudo-label accuracy over the whole drawn subset (distractor rows
    /// count as wrong — they have no correct episode label).
    pub subset_pl_accuracy: Option<f64>,
    /// Pseudo-label accuracy over the retained samples only.
    pub selected_pl_accuracy: Option<f64>,
    /// Inner loss at the start of each step; length T.
    pub step_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub query_accuracy: f64,
    /// Query loss at θ_T (drives the scale-shift / classifier-init route).
    pub query_loss_t: f64,
    /// Query loss at θ_m of the final stage (drives the SWN route).
    pub query_loss_m: f64,
    /// Labeler trajectory losses (empty when no labeler fit ran).
    pub support_fit_losses: Vec<f64>,
    pub stages: Vec<StageResult>,
    /// Final-stage snapshots, for degeneration and purity checks.
    pub theta_m: (Array, Array),
    pub theta_t: (Array, Array),
}

/// Meta-gradients in canonical parameter order (SWN: w1,b1,w2,b2;
/// scale-shift: scale,shift per layer; classifier init: w,b).
pub struct MetaGrads {
    pub swn: Vec<Array>,
    pub scale_shift: Vec<Array>,
    pub theta_prime: Vec<Array>,
}

pub struct EpisodeEval {
    pub outcome: EpisodeOutcome,
    pub grads: Option<MetaGrads>,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub setting: AblationSetting,
    pub stages: usize,
    pub first_order: bool,
    pub want_grads: bool,
}

impl RunOptions {
    /// Evaluation: no outer gradients. First-order inner updates keep the
    /// tape small; trajectory values are bit-identical across modes.
    pub fn evaluate(setting: AblationSetting, stages: usize) -> Self {
        RunOptions {
            setting,
            stages,
            first_order: true,
            want_grads: false,
        }
    }

    /// Meta-training: gradients for both outer routes.
    pub fn train(cfg: &TrainConfig) -> Self {
        RunOptions {
            setting: cfg.ablation,
            stages: cfg.meta_stages,
            first_order: cfg.meta_grad_mode == crate::config::MetaGradMode::FirstOrder,
            want_grads: true,
        }
    }
}

fn gather_pool_rows(episode: &Episode, indices: &[usize]) -> Result<Array> {
    let dim = episode.pool_x.cols();
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        if i >= episode.pool_x.rows() {
            return Err(Error::Contract(format!(
                "pool row {i} out of range ({} rows)",
                episode.pool_x.rows()
            )));
        }
        data.extend_from_slice(episode.pool_x.row_slice(i));
    }
    Array::new(indices.len(), dim, data)
}

/// Fraction of `rows` whose hidden label matches the assigned label;
/// distractor rows (no hidden label) always count as wrong.
fn hidden_label_accuracy(episode: &Episode, rows: &[usize], labels: &[usize]) -> f64 {
    debug_assert_eq!(rows.len(), labels.len());
    let correct = rows
        .iter()
        .zip(labels)
        .filter(|&(&r, &l)| episode.pool_hidden[r] == Some(l))
        .count();
    correct as f64 / rows.len().max(1) as f64
}

/// Run one full episode: labeler fit, per-stage pseudo-labeling and
/// cherry-picking, the m re-train / T−m fine-tune schedule with stage
/// continuation, query evaluation, and (optionally) both outer gradient
/// routes.
pub fn run_episode(
    backbone: &Backbone,
    state: &MetaState,
    episode: &Episode,
    cfg: &TrainConfig,
    opts: RunOptions,
) -> Result<EpisodeEval> {
    let way = cfg.way;
    if episode.way != way {
        return Err(Error::Contract(format!(
            "episode is {}-way but config expects {way}-way",
            episode.way
        )));
    }
    let t_steps = cfg.t_steps;
    let m_steps = cfg.m_steps;
    if m_steps > t_steps {
        return Err(Error::Contract(format!(
            "m_steps {m_steps} exceeds t_steps {t_steps}"
        )));
    }

    // Degeneration guard: without re-train steps, with nothing selectable, or
    // with nothing drawn, the method *is* the supervised baseline — one round
    // of plain support fitting, no labeler, no recursion.
    let selection_possible = !opts.setting.hard_selection() || cfg.z > 0;
    let use_pseudo = opts.setting.uses_unlabeled()
        && m_steps > 0
        && selection_possible
        && cfg.draw_per_class > 0;
    let effective_stages = if use_pseudo { opts.stages.max(1) } else { 1 };
    let needs_labeler = use_pseudo && !opts.setting.oracle_labels();
    let subset_seed = rng::mix(episode.seed, &[TAG_SUBSET_DRAW]);

    let mut tape = Tape::new();
    let bb = stage_backbone(&mut tape, backbone);
    let ss = stage_scale_shift(&mut tape, &state.scale_shift);
    let swn = stage_swn(&mut tape, &state.swn);
    let theta0: Theta = (
        tape.leaf(state.theta_prime.w.clone()),
        tape.leaf(state.theta_prime.b.clone()),
    );
    let sx = tape.leaf(episode.support_x.clone());
    let feats_s = features(&mut tape, sx, &bb, &ss)?;
    let qx = tape.leaf(episode.query_x.clone());
    let feats_q = features(&mut tape, qx, &bb, &ss)?;

    // Labeler for stage 1: the classifier fit on the support set alone.
    let mut support_fit_losses = Vec::new();
    let mut labeler: Option<Theta> = None;
    if needs_labeler {
        let fit = fit_on_support(
            &mut tape,
            feats_s,
            &episode.support_y,
            theta0,
            t_steps,
            cfg.alpha,
            opts.first_order,
        )?;
        support_fit_losses = fit.losses;
        labeler = Some(fit.theta);
    }

    let mut protos_node: Option<NodeId> = None;
    let mut theta = theta0;
    let mut theta_m_last = theta0;
    let mut stage_results = Vec::with_capacity(effective_stages);

    for stage in 1..=effective_stages {
        let mut drawn = 0usize;
        let mut selected = 0usize;
        let mut shortfall_classes = 0usize;
        let mut subset_pl_accuracy = None;
        let mut selected_pl_accuracy = None;

        let pseudo: Option<PseudoBatch> = if !use_pseudo {
            None
        } else {
            let subset = if opts.setting.mixing() {
                mixing_pool(episode, cfg.stages, cfg.draw_per_class, subset_seed)?
            } else {
                draw_unlabeled_subset(episode, stage, cfg.draw_per_class, subset_seed)?
            };
            drawn = subset.indices.len();
            if subset.indices.is_empty() {
                None
            } else if opts.setting.oracle_labels() {
                // Upper bound: true labels revealed, distractor rows dropped.
                let kept: Vec<(usize, usize)> = subset
                    .indices
                    .iter()
                    .filter_map(|&i| episode.pool_hidden[i].map(|c| (i, c)))
                    .collect();
                selected = kept.len();
                if kept.is_empty() {
                    None
                } else {
                    let rows: Vec<usize> = kept.iter().map(|&(i, _)| i).collect();
                    let labels: Vec<usize> = kept.iter().map(|&(_, c)| c).collect();
                    let xs = tape.leaf(gather_pool_rows(episode, &rows)?);
                    let feats_r = features(&mut tape, xs, &bb, &ss)?;
                    Some(PseudoBatch {
                        feats: feats_r,
                        labels,
                        weights: None,
                    })
                }
            } else {
                let labeler_theta =
                    labeler.expect("semi-supervised stage always has a labeler");
                let xs = tape.leaf(gather_pool_rows(episode, &subset.indices)?);
                let feats_r = features(&mut tape, xs, &bb, &ss)?;
                let logits_r = classify(&mut tape, feats_r, labeler_theta.0, labeler_theta.1)?;
                let pl = pseudo_label(tape.value(logits_r));
                subset_pl_accuracy =
                    Some(hidden_label_accuracy(episode, &subset.indices, &pl.labels));
                let z = if opts.setting.hard_selection() {
                    Some(cfg.z)
                } else {
                    None
                };
                let sel = hard_select(&pl, way, z);
                shortfall_classes = sel.shortfalls.len();
                selected = sel.indices.len();
                if sel.indices.is_empty() {
                    None
                } else {
                    let sel_rows: Vec<usize> =
                        sel.indices.iter().map(|&i| subset.indices[i]).collect();
                    selected_pl_accuracy =
                        Some(hidden_label_accuracy(episode, &sel_rows, &sel.labels));
                    let sel_feats = tape.gather_rows(feats_r, &sel.indices)?;
                    let weights = if opts.setting.soft_weighting() {
                        let protos = match protos_node {
                            Some(p) => p,
                            None => {
                                let p = prototypes(&mut tape, feats_s, &episode.support_y, way)?;
                                protos_node = Some(p);
                                p
                            }
                        };
                        Some(swn_weight_matrix(&mut tape, sel_feats, protos, &swn)?)
                    } else {
                        None
                    };
                    Some(PseudoBatch {
                        feats: sel_feats,
                        labels: sel.labels,
                        weights,
                    })
                }
            }
        };

        // m re-train steps on S ∪ R^p, then T−m fine-tune steps on S,
        // continuing θ across stages.
        let mut step_losses = Vec::with_capacity(t_steps);
        for step in 0..m_steps {
            let loss = mixed_loss(&mut tape, feats_s, &episode.support_y, pseudo.as_ref(), theta)
                .map_err(|e| Error::Numeric(format!("stage {stage} re-train step {step}: {e}")))?;
            step_losses.push(tape.value_scalar(loss));
            theta = theta_step(&mut tape, loss, theta, cfg.alpha, opts.first_order)
                .map_err(|e| Error::Numeric(format!("stage {stage} re-train step {step}: {e}")))?;
        }
        let theta_m = theta;
        for step in m_steps..t_steps {
            let loss = support_loss(&mut tape, feats_s, &episode.support_y, theta)
                .map_err(|e| Error::Numeric(format!("stage {stage} fine-tune step {step}: {e}")))?;
            step_losses.push(tape.value_scalar(loss));
            theta = theta_step(&mut tape, loss, theta, cfg.alpha, opts.first_order)
                .map_err(|e| Error::Numeric(format!("stage {stage} fine-tune step {step}: {e}")))?;
        }
        theta_m_last = theta_m;
        if needs_labeler {
            // The fine-tuned θ_T labels the next stage's fresh subset.
            labeler = Some(theta);
        }
        stage_results.push(StageResult {
            stage,
            drawn,
            selected,
            shortfall_classes,
            subset_pl_accuracy,
            selected_pl_accuracy,
            step_losses,
        });
    }
    let theta_t = theta;

    // Query evaluation and the two outer losses.
    let logits_q_t = classify(&mut tape, feats_q, theta_t.0, theta_t.1)?;
    let ce_q_t = tape.cross_entropy_rows(logits_q_t, &episode.query_y)?;
    let l_q_t = tape.mean(ce_q_t)?;
    let logits_q_m = classify(&mut tape, feats_q, theta_m_last.0, theta_m_last.1)?;
    let ce_q_m = tape.cross_entropy_rows(logits_q_m, &episode.query_y)?;
    let l_q_m = tape.mean(ce_q_m)?;
    let query_accuracy = accuracy(tape.value(logits_q_t), &episode.query_y);

    let grads = if opts.want_grads {
        let swn_ids = [swn.w1, swn.b1, swn.w2, swn.b2];
        let g_swn = tape
            .grad_arrays(l_q_m, &swn_ids)
            .map_err(|e| Error::Numeric(format!("soft-weighting-network meta-gradient: {e}")))?;
        let mut ids: Vec<NodeId> = Vec::with_capacity(2 * ss.scales.len() + 2);
        for (s, h) in ss.scales.iter().zip(ss.shifts.iter()) {
            ids.push(*s);
            ids.push(*h);
        }
        ids.push(theta0.0);
        ids.push(theta0.1);
        let mut g = tape.grad_arrays(l_q_t, &ids).map_err(|e| {
            Error::Numeric(format!("scale-shift/classifier-init meta-gradient: {e}"))
        })?;
        let theta_prime = g.split_off(g.len() - 2);
        Some(MetaGrads {
            swn: g_swn,
            scale_shift: g,
            theta_prime,
        })
    } else {
        None
    };

    Ok(EpisodeEval {
        outcome: EpisodeOutcome {
            query_accuracy,
            query_loss_t: tape.value_scalar(l_q_t),
            query_loss_m: tape.value_scalar(l_q_m),
            support_fit_losses,
            stages: stage_results,
            theta_m: (
                tape.value(theta_m_last.0).clone(),
                tape.value(theta_m_last.1).clone(),
            ),
            theta_t: (tape.value(theta_t.0).clone(), tape.value(theta_t.1).clone()),
        },
        grads,
    })
}
