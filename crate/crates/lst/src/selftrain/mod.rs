//! The self-training meta-learner.
//!
//! `inner` holds everything that happens inside one episode: fitting the
//! classifier on the support set, pseudo-labeling an unlabeled subset,
//! cherry-picking (hard top-Z selection plus soft SWN weights), the mixed
//! re-train / fine-tune schedule, and the recursive stage loop. `meta` drives
//! the outer loop: two-route meta-gradient steps, meta-training with
//! validation checkpoints, and meta-test evaluation with confidence
//! intervals.
//!
//! One episode lives on one tape. Meta-parameters (scale-shift, classifier
//! init, SWN) are staged as leaves; the inner loop appends its own gradient
//! nodes, so differentiating the query loss through the unrolled updates is
//! just one more backward pass over the same tape. In first-order mode the
//! inner updates are wrapped in stop-gradient instead, which leaves all
//! values bit-identical and only changes what the outer gradients see.

mod inner;
mod meta;

pub use inner::{
    fit_on_support, hard_select, mixed_loss, pseudo_label, run_episode, support_loss, theta_step,
    EpisodeEval, EpisodeOutcome, FitResult, MetaGrads, PseudoBatch, PseudoLabels, RunOptions,
    Selection, Shortfall, StageResult, Theta,
};
pub use meta::{
    mean_and_ci95, meta_step, meta_test, meta_train, BatchStats, EpisodeRecord, EvalPoint,
    MetaStepOptions, MetaTrainResult, TestReport,
};

use crate::autodiff::Array;
use crate::config::{AblationSetting, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Backbone, Classifier, ScaleShift, Swn};
use crate::rng;

pub(crate) const TAG_SWN_INIT: u64 = 0x5357_4e49;
pub(crate) const TAG_SUBSET_DRAW: u64 = 0x5355_4244;
pub(crate) const TAG_META_EPISODE: u64 = 0x4d45_5045;
pub(crate) const TAG_VAL_EPISODE: u64 = 0x5641_4c45;
pub(crate) const TAG_TEST_EPISODE: u64 = 0x5445_5345;

/// Everything the outer loop learns: scale-shift over the frozen backbone,
/// the classifier initialization, and the soft weighting network, plus the
/// iteration counter that drives the β schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub scale_shift: ScaleShift,
    pub theta_prime: Classifier,
    pub swn: Swn,
    pub iteration: usize,
}

impl MetaState {
    /// Meta-iteration 0 state: identity scale-shift (the frozen backbone is
    /// exactly recovered), zero classifier init (uniform predictions), and a
    /// freshly initialized SWN.
    pub fn initial(backbone: &Backbone, cfg: &TrainConfig) -> Self {
        MetaState {
            scale_shift: ScaleShift::identity(backbone),
            theta_prime: Classifier::zeros(backbone.embed_dim(), cfg.way),
            swn: Swn::init(
                backbone.embed_dim(),
                cfg.swn_hidden,
                rng::mix(cfg.seed, &[TAG_SWN_INIT]),
            ),
            iteration: 0,
        }
    }

    /// Current (β₁, β₂) under the halving schedule.
    pub fn betas(&self, cfg: &TrainConfig) -> (f64, f64) {
        cfg.betas_at(self.iteration)
    }

    /// Parameter arrays of the scale-shift group in canonical order
    /// (scale then shift, layer by layer).
    pub(crate) fn scale_shift_params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        let layers = self.scale_shift.scales.len();
        let (scales, shifts) = (&mut self.scale_shift.scales, &mut self.scale_shift.shifts);
        for (s, h) in scales.iter_mut().zip(shifts.iter_mut()) {
            out.push(s);
            out.push(h);
        }
        debug_assert_eq!(out.len(), 2 * layers);
        out
    }

    pub(crate) fn swn_params_mut(&mut self) -> Vec<&mut Array> {
        vec![
            &mut self.swn.w1,
            &mut self.swn.b1,
            &mut self.swn.w2,
            &mut self.swn.b2,
        ]
    }

    pub(crate) fn theta_prime_params_mut(&mut self) -> Vec<&mut Array> {
        vec![&mut self.theta_prime.w, &mut self.theta_prime.b]
    }
}

/// Stage count a setting runs at meta-test: the recursive variant and the
/// fully-supervised upper bound consume the full stage budget (the latter so
/// it sees exactly the data the recursive method would); every other setting
/// is a single round. Mixing is a single round too — its subset is the union
/// of all stage draws.
pub fn stages_for(setting: AblationSetting, cfg: &TrainConfig) -> usize {
    if setting.recursive() || setting.oracle_labels() {
        cfg.stages
    } else {
        1
    }
}

/// `p -= lr * g` with a finiteness check that names the parameter group.
pub(crate) fn apply_group(
    params: Vec<&mut Array>,
    grads: &[Array],
    lr: f64,
    group: &str,
    iteration: usize,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "parameter group '{group}' has {} arrays but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.into_iter().zip(grads) {
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite meta-gradient for parameter group '{group}' at meta-iteration {iteration}"
            )));
        }
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "parameter group '{group}': gradient shape {:?} does not match parameter shape {:?}",
                g.shape_vec(),
                p.shape_vec()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Tape};
    use crate::config::MetaGradMode;
    use crate::episodes::{sample_episode, ClassDataset, Episode, Split};
    use crate::model::{
        features, pretrain_backbone, stage_backbone, stage_scale_shift, Backbone,
    };
    use once_cell::sync::Lazy;
    use rand::Rng as _;

    struct Fixture {
        cfg: TrainConfig,
        ds: ClassDataset,
        backbone: Backbone,
        state: MetaState,
    }

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.classes = 24;
        cfg.train_classes = 10;
        cfg.val_classes = 7;
        cfg.test_classes = 7;
        cfg.samples_per_class = 140;
        cfg.query = 10;
        cfg.distractors = 2;
        cfg.draw_per_class = 12;
        cfg.z = 8;
        cfg.stages = 3;
        cfg.t_steps = 12;
        cfg.m_steps = 4;
        cfg.pretrain_steps = 500;
        cfg.meta_iterations = 0;
        cfg.val_episodes = 0;
        cfg.validate().expect("fixture config is valid");
        cfg
    }

    static FIX: Lazy<Fixture> = Lazy::new(|| {
        let cfg = small_config();
        let ds = ClassDataset::build(cfg.dataset_spec(), cfg.seed).expect("dataset");
        let (backbone, report) =
            pretrain_backbone(&ds, &cfg.pretrain_config(), cfg.seed).expect("pretrain");
        assert!(
            report.holdout_accuracy > 0.5,
            "fixture backbone too weak: {}",
            report.holdout_accuracy
        );
        let state = MetaState::initial(&backbone, &cfg);
        Fixture {
            cfg,
            ds,
            backbone,
            state,
        }
    });

    fn test_episode(seed: u64) -> Episode {
        sample_episode(
            &FIX.ds,
            Split::MetaTest,
            &FIX.cfg.episode_config(),
            rng::mix(FIX.cfg.seed, &[0x7e57, seed]),
        )
        .expect("episode")
    }

    fn run(
        episode: &Episode,
        cfg: &TrainConfig,
        setting: AblationSetting,
        stages: usize,
    ) -> EpisodeOutcome {
        run_episode(
            &FIX.backbone,
            &FIX.state,
            episode,
            cfg,
            RunOptions::evaluate(setting, stages),
        )
        .expect("episode run")
        .outcome
    }

    // ---- pseudo-labeling and selection -----------------------------------

    #[test]
    fn pseudo_label_uniform_logits_tie_to_lowest_index_at_one_over_n() {
        let logits = Array::zeros(3, 5);
        let pl = pseudo_label(&logits);
        assert_eq!(pl.labels, vec![0, 0, 0]);
        for c in pl.confidences {
            assert_eq!(c, 0.2);
        }
    }

    #[test]
    fn pseudo_label_matches_argmax_and_confidence_bounds() {
        let mut r = rng::stream(11, &[1]);
        let logits = Array::new(50, 5, (0..250).map(|_| r.gen_range(-3.0..3.0)).collect()).unwrap();
        let pl = pseudo_label(&logits);
        for i in 0..50 {
            assert_eq!(pl.labels[i], logits.argmax_row(i));
            assert!(pl.confidences[i] >= 0.2 - 1e-12 && pl.confidences[i] <= 1.0);
            // Oracle: direct stable softmax of the row.
            let row = logits.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let expect = (row[pl.labels[i]] - max).exp() / denom;
            assert!((pl.confidences[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_select_keeps_top_z_breaks_ties_low_and_logs_shortfalls() {
        let pl = PseudoLabels {
            labels: vec![0, 0, 0, 1, 1, 2],
            confidences: vec![0.9, 0.9, 0.5, 0.7, 0.8, 0.6],
        };
        let sel = hard_select(&pl, 4, Some(2));
        // Class 0: tie at 0.9 → lower index first; 0.5 dropped.
        // Class 1: 0.8 (idx 4) then 0.7 (idx 3).
        // Class 2: only one member → shortfall. Class 3: empty → shortfall.
        assert_eq!(sel.indices, vec![0, 1, 4, 3, 5]);
        assert_eq!(sel.labels, vec![0, 0, 1, 1, 2]);
        assert_eq!(
            sel.shortfalls,
            vec![
                Shortfall { class: 2, wanted: 2, kept: 1 },
                Shortfall { class: 3, wanted: 2, kept: 0 },
            ]
        );
    }

    #[test]
    fn hard_select_without_z_is_identity_on_groups() {
        let pl = PseudoLabels {
            labels: vec![2, 0, 1, 0],
            confidences: vec![0.5, 0.6, 0.7, 0.8],
        };
        let sel = hard_select(&pl, 3, None);
        assert_eq!(sel.indices, vec![3, 1, 2, 0]);
        assert!(sel.shortfalls.is_empty());
        // And a generous Z is the identity too.
        let sel2 = hard_select(&pl, 3, Some(10));
        assert_eq!(sel2.indices, sel.indices);
    }

    #[test]
    fn hard_select_degenerate_single_predicted_class() {
        let pl = PseudoLabels {
            labels: vec![1; 30],
            confidences: (0..30).map(|i| 0.5 + 0.01 * i as f64).collect(),
        };
        let sel = hard_select(&pl, 5, Some(20));
        assert_eq!(sel.indices.len(), 20);
        assert!(sel.labels.iter().all(|&l| l == 1));
        // Highest confidences are the later indices here.
        assert_eq!(sel.indices[0], 29);
        assert_eq!(sel.shortfalls.len(), 4);
    }

    // ---- losses -----------------------------------------------------------

    #[test]
    fn mixed_loss_without_pseudo_is_support_loss_bit_exact() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Array::new(4, 3, vec![
            0.5, -1.0, 2.0, 1.5, 0.3, -0.7, -0.2, 0.9, 1.1, 0.0, -0.4, 0.8,
        ]).unwrap());
        let theta: Theta = (
            tape.leaf(Array::new(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap()),
            tape.leaf(Array::new(1, 2, vec![0.05, -0.05]).unwrap()),
        );
        let y = vec![0, 1, 0, 1];
        let a = support_loss(&mut tape, feats, &y, theta).unwrap();
        let b = mixed_loss(&mut tape, feats, &y, None, theta).unwrap();
        assert_eq!(tape.value_scalar(a).to_bits(), tape.value_scalar(b).to_bits());
    }

    #[test]
    fn mixed_loss_ones_weights_equal_plain_ce_and_union_mean_oracle() {
        let mut tape = Tape::new();
        let feats_s = tape.leaf(Array::new(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.2]).unwrap());
        let feats_p = tape.leaf(Array::new(3, 3, vec![
            0.3, -0.8, 1.2, -0.6, 0.4, 0.9, 1.0, 1.0, -1.0,
        ]).unwrap());
        let theta: Theta = (
            tape.leaf(Array::new(3, 2, vec![0.2, -0.1, 0.4, 0.3, -0.2, 0.1]).unwrap()),
            tape.leaf(Array::zeros(1, 2)),
        );
        let y_s = vec![0, 1];
        let y_p = vec![1, 0, 1];
        let ones = tape.leaf(Array::ones(3, 2));
        let with_ones = {
            let batch = PseudoBatch { feats: feats_p, labels: y_p.clone(), weights: Some(ones) };
            mixed_loss(&mut tape, feats_s, &y_s, Some(&batch), theta).unwrap()
        };
        let without = {
            let batch = PseudoBatch { feats: feats_p, labels: y_p.clone(), weights: None };
            mixed_loss(&mut tape, feats_s, &y_s, Some(&batch), theta).unwrap()
        };
        assert_eq!(
            tape.value_scalar(with_ones).to_bits(),
            tape.value_scalar(without).to_bits()
        );
        // Union-mean oracle: mean of the five per-row CE values.
        let logits_s = crate::model::classify(&mut tape, feats_s, theta.0, theta.1).unwrap();
        let ce_s = tape.cross_entropy_rows(logits_s, &y_s).unwrap();
        let logits_p = crate::model::classify(&mut tape, feats_p, theta.0, theta.1).unwrap();
        let ce_p = tape.cross_entropy_rows(logits_p, &y_p).unwrap();
        let oracle = (tape.value(ce_s).data().iter().sum::<f64>()
            + tape.value(ce_p).data().iter().sum::<f64>())
            / 5.0;
        assert!((tape.value_scalar(without) - oracle).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_preserve_argmax_predictions() {
        let mut tape = Tape::new();
        let mut r = rng::stream(5, &[2]);
        let logits = tape.leaf(Array::new(6, 5, (0..30).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap());
        let uniform = tape.leaf(Array::filled(6, 5, 0.2));
        let scaled = tape.mul(uniform, logits).unwrap();
        for i in 0..6 {
            assert_eq!(
                tape.value(logits).argmax_row(i),
                tape.value(scaled).argmax_row(i)
            );
        }
    }

    // ---- support fitting ----------------------------------------------------

    #[test]
    fn fit_zero_steps_and_zero_alpha_leave_theta_unchanged() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Array::new(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap());
        let w0 = Array::new(2, 2, vec![0.3, -0.3, 0.1, 0.6]).unwrap();
        let b0 = Array::new(1, 2, vec![0.01, -0.02]).unwrap();
        let theta0: Theta = (tape.leaf(w0.clone()), tape.leaf(b0.clone()));
        let fit0 = fit_on_support(&mut tape, feats, &[0, 1], theta0, 0, 0.1, true).unwrap();
        assert!(fit0.losses.is_empty());
        assert_eq!(tape.value(fit0.theta.0), &w0);
        let fit_a0 = fit_on_support(&mut tape, feats, &[0, 1], theta0, 5, 0.0, true).unwrap();
        assert_eq!(fit_a0.losses.len(), 5);
        assert_eq!(tape.value(fit_a0.theta.0), &w0);
        assert_eq!(tape.value(fit_a0.theta.1), &b0);
    }

    #[test]
    fn fit_reaches_full_accuracy_on_separable_support() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Array::new(4, 2, vec![
            2.0, 0.0, 1.5, 0.3, 0.0, 2.0, 0.2, 1.7,
        ]).unwrap());
        let y = vec![0, 0, 1, 1];
        let theta0: Theta = (tape.leaf(Array::zeros(2, 2)), tape.leaf(Array::zeros(1, 2)));
        let fit = fit_on_support(&mut tape, feats, &y, theta0, 100, 0.5, true).unwrap();
        let logits = crate::model::classify(&mut tape, feats, fit.theta.0, fit.theta.1).unwrap();
        assert_eq!(crate::model::accuracy(tape.value(logits), &y), 1.0);
        assert!(fit.losses[99] < fit.losses[0]);
    }

    #[test]
    fn divergent_fit_names_the_step() {
        let mut tape = Tape::new();
        let feats = tape.leaf(Array::new(1, 2, vec![1e200, 1e200]).unwrap());
        let theta0: Theta = (
            tape.leaf(Array::filled(2, 2, 1e155)),
            tape.leaf(Array::zeros(1, 2)),
        );
        let err = fit_on_support(&mut tape, feats, &[0], theta0, 3, 0.01, true).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("support fit step 0"), "{msg}");
    }

    // ---- degenerations (bit-exact) ----------------------------------------

    #[test]
    fn m_zero_equals_supervised_fit_bit_exact() {
        let episode = test_episode(1);
        let mut cfg = FIX.cfg.clone();
        cfg.m_steps = 0;
        let supervised = run(&episode, &cfg, AblationSetting::SupervisedOnly, 1);
        for setting in [
            AblationSetting::Hard,
            AblationSetting::HardSoft,
            AblationSetting::RecursiveHardSoft,
            AblationSetting::MixingHardSoft,
            AblationSetting::FullySupervised,
        ] {
            let other = run(&episode, &cfg, setting, cfg.stages);
            assert_eq!(other.theta_t.0, supervised.theta_t.0, "{setting:?}");
            assert_eq!(other.theta_t.1, supervised.theta_t.1, "{setting:?}");
            assert_eq!(
                other.query_loss_t.to_bits(),
                supervised.query_loss_t.to_bits(),
                "{setting:?}"
            );
            assert_eq!(other.query_accuracy, supervised.query_accuracy, "{setting:?}");
        }
    }

    #[test]
    fn z_zero_and_empty_draw_degenerate_to_supervised_bit_exact() {
        let episode = test_episode(2);
        let supervised = run(&episode, &FIX.cfg, AblationSetting::SupervisedOnly, 1);
        let mut zz = FIX.cfg.clone();
        zz.z = 0;
        let z_zero = run(&episode, &zz, AblationSetting::RecursiveHardSoft, zz.stages);
        assert_eq!(z_zero.theta_t.0, supervised.theta_t.0);
        assert_eq!(z_zero.query_loss_t.to_bits(), supervised.query_loss_t.to_bits());
        let mut dd = FIX.cfg.clone();
        dd.draw_per_class = 0;
        dd.z = 0;
        let no_draw = run(&episode, &dd, AblationSetting::HardSoft, 1);
        assert_eq!(no_draw.theta_t.0, supervised.theta_t.0);
        assert_eq!(no_draw.query_accuracy, supervised.query_accuracy);
    }

    #[test]
    fn one_stage_recursion_equals_single_inner_loop_bit_exact() {
        let episode = test_episode(3);
        let single = run(&episode, &FIX.cfg, AblationSetting::HardSoft, 1);
        let recursive = run(&episode, &FIX.cfg, AblationSetting::RecursiveHardSoft, 1);
        assert_eq!(single.theta_t.0, recursive.theta_t.0);
        assert_eq!(single.theta_t.1, recursive.theta_t.1);
        assert_eq!(single.query_loss_t.to_bits(), recursive.query_loss_t.to_bits());
        assert_eq!(single.stages.len(), 1);
        assert_eq!(recursive.stages.len(), 1);
    }

    #[test]
    fn fine_tune_steps_ignore_pseudo_set_replay_bit_exact() {
        // Replay the fine-tune phase from θ_m on a fresh tape with no pseudo
        // machinery at all; it must land exactly on θ_T.
        let episode = test_episode(4);
        let cfg = &FIX.cfg;
        let full = run(&episode, cfg, AblationSetting::HardSoft, 1);
        assert!(full.stages[0].selected > 0, "fixture episode selected nothing");

        let mut tape = Tape::new();
        let bb = stage_backbone(&mut tape, &FIX.backbone);
        let ss = stage_scale_shift(&mut tape, &FIX.state.scale_shift);
        let sx = tape.leaf(episode.support_x.clone());
        let feats_s = features(&mut tape, sx, &bb, &ss).unwrap();
        let theta_m: Theta = (
            tape.leaf(full.theta_m.0.clone()),
            tape.leaf(full.theta_m.1.clone()),
        );
        let fit = fit_on_support(
            &mut tape,
            feats_s,
            &episode.support_y,
            theta_m,
            cfg.t_steps - cfg.m_steps,
            cfg.alpha,
            true,
        )
        .unwrap();
        assert_eq!(tape.value(fit.theta.0), &full.theta_t.0);
        assert_eq!(tape.value(fit.theta.1), &full.theta_t.1);
    }

    #[test]
    fn step_loss_lists_have_length_t_and_theta_m_at_step_m() {
        let episode = test_episode(5);
        let out = run(&episode, &FIX.cfg, AblationSetting::RecursiveHardSoft, FIX.cfg.stages);
        assert_eq!(out.stages.len(), FIX.cfg.stages);
        for s in &out.stages {
            assert_eq!(s.step_losses.len(), FIX.cfg.t_steps);
            assert!(s.drawn > 0 && s.selected > 0);
        }
        // θ_m differs from both θ′ and θ_T (m strictly inside (0, T)).
        assert_ne!(out.theta_m.0, FIX.state.theta_prime.w);
        assert_ne!(out.theta_m.0, out.theta_t.0);
    }

    // ---- gradient routing ---------------------------------------------------

    #[test]
    fn first_order_swn_gradient_is_exactly_zero_and_unrolled_is_not() {
        let episode = test_episode(6);
        let mut cfg = FIX.cfg.clone();
        cfg.ablation = AblationSetting::HardSoft;
        cfg.meta_stages = 1;
        cfg.meta_grad_mode = MetaGradMode::FirstOrder;
        let fo = run_episode(
            &FIX.backbone,
            &FIX.state,
            &episode,
            &cfg,
            RunOptions::train(&cfg),
        )
        .unwrap();
        let g = fo.grads.expect("gradients requested");
        for arr in &g.swn {
            assert!(arr.data().iter().all(|&v| v == 0.0), "first-order SWN gradient must vanish");
        }
        // Scale-shift still gets gradient through the query features.
        assert!(g.scale_shift.iter().any(|a| a.data().iter().any(|&v| v != 0.0)));
        assert!(g.theta_prime.iter().any(|a| a.data().iter().any(|&v| v != 0.0)));

        cfg.meta_grad_mode = MetaGradMode::Unrolled;
        let un = run_episode(
            &FIX.backbone,
            &FIX.state,
            &episode,
            &cfg,
            RunOptions::train(&cfg),
        )
        .unwrap();
        let g = un.grads.expect("gradients requested");
        assert!(
            g.swn.iter().any(|a| a.data().iter().any(|&v| v != 0.0)),
            "unrolled SWN gradient should be nonzero"
        );
        // Values are identical across modes; only derivatives differ.
        assert_eq!(un.outcome.query_loss_t.to_bits(), fo.outcome.query_loss_t.to_bits());
    }

    #[test]
    fn meta_step_routes_updates_by_mask() {
        let mut cfg = FIX.cfg.clone();
        cfg.ablation = AblationSetting::HardSoft;
        cfg.meta_stages = 1;
        cfg.meta_grad_mode = MetaGradMode::Unrolled;
        let episodes: Vec<Episode> = (0..2)
            .map(|i| {
                sample_episode(
                    &FIX.ds,
                    Split::MetaTrain,
                    &cfg.episode_config(),
                    rng::mix(cfg.seed, &[0x11, i]),
                )
                .unwrap()
            })
            .collect();

        // Mask the θ_m route: SWN frozen, scale-shift/θ′ move.
        let mut s1 = FIX.state.clone();
        meta_step(&FIX.backbone, &mut s1, &episodes, &cfg, MetaStepOptions {
            mask_theta_m_route: true,
            mask_theta_t_route: false,
        })
        .unwrap();
        assert_eq!(s1.swn, FIX.state.swn);
        assert_ne!(s1.scale_shift, FIX.state.scale_shift);
        assert_ne!(s1.theta_prime, FIX.state.theta_prime);
        assert_eq!(s1.iteration, FIX.state.iteration + 1);

        // Mask the θ_T route: SWN moves, the rest frozen.
        let mut s2 = FIX.state.clone();
        meta_step(&FIX.backbone, &mut s2, &episodes, &cfg, MetaStepOptions {
            mask_theta_m_route: false,
            mask_theta_t_route: true,
        })
        .unwrap();
        assert_ne!(s2.swn, FIX.state.swn);
        assert_eq!(s2.scale_shift, FIX.state.scale_shift);
        assert_eq!(s2.theta_prime, FIX.state.theta_prime);
    }

    #[test]
    fn meta_step_with_zero_betas_changes_nothing() {
        let mut cfg = FIX.cfg.clone();
        cfg.ablation = AblationSetting::HardSoft;
        cfg.meta_stages = 1;
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        cfg.beta_floor = 0.0;
        let episodes = vec![test_episode(7)];
        let mut state = FIX.state.clone();
        meta_step(&FIX.backbone, &mut state, &episodes, &cfg, MetaStepOptions::default()).unwrap();
        assert_eq!(state.swn, FIX.state.swn);
        assert_eq!(state.scale_shift, FIX.state.scale_shift);
        assert_eq!(state.theta_prime, FIX.state.theta_prime);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn apply_group_rejects_non_finite_gradients_naming_the_group() {
        let mut p = Array::zeros(2, 2);
        let g = Array::filled(2, 2, f64::NAN);
        let err = apply_group(vec![&mut p], &[g], 0.1, "scale-shift", 7).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("scale-shift") && msg.contains("meta-iteration 7"), "{msg}");
    }

    // ---- meta-train / meta-test ---------------------------------------------

    #[test]
    fn meta_train_zero_iterations_returns_initial_state() {
        let mut cfg = FIX.cfg.clone();
        cfg.meta_iterations = 0;
        cfg.val_episodes = 2;
        cfg.ablation = AblationSetting::HardSoft;
        let out = meta_train(&FIX.backbone, &FIX.ds, &cfg, FIX.state.clone()).unwrap();
        assert_eq!(out.state, FIX.state);
        assert!(out.history.is_empty());
        assert_eq!(out.evals.len(), 1, "exactly one entry/exit evaluation");
        assert_eq!(out.best_iteration, 0);
    }

    #[test]
    fn meta_train_is_deterministic_and_tracks_best_checkpoint() {
        let mut cfg = FIX.cfg.clone();
        cfg.ablation = AblationSetting::HardSoft;
        cfg.meta_grad_mode = MetaGradMode::Unrolled;
        cfg.meta_iterations = 6;
        cfg.eval_interval = 3;
        cfg.val_episodes = 3;
        let a = meta_train(&FIX.backbone, &FIX.ds, &cfg, FIX.state.clone()).unwrap();
        let b = meta_train(&FIX.backbone, &FIX.ds, &cfg, FIX.state.clone()).unwrap();
        assert_eq!(a.state, b.state);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.evals.len(), 3); // iterations 0, 3, 6
        assert_eq!(
            a.evals.iter().map(|e| e.iteration).collect::<Vec<_>>(),
            vec![0, 3, 6]
        );
        let best = a
            .evals
            .iter()
            .cloned()
            .fold(None::<EvalPoint>, |acc, e| match acc {
                Some(best) if best.val_accuracy >= e.val_accuracy => Some(best),
                _ => Some(e),
            })
            .unwrap();
        assert_eq!(a.best_iteration, best.iteration);
        assert_eq!(a.best_val_accuracy, best.val_accuracy);
        for (ha, hb) in a.history.iter().zip(&b.history) {
            assert_eq!(ha.query_accuracy, hb.query_accuracy);
            assert_eq!(ha.query_loss_t.to_bits(), hb.query_loss_t.to_bits());
        }
        // The β schedule is recorded per step.
        assert_eq!(a.history[0].beta1, cfg.beta1);
    }

    #[test]
    fn meta_test_single_episode_has_no_interval() {
        let report = meta_test(
            &FIX.backbone,
            &FIX.state,
            &FIX.ds,
            &FIX.cfg,
            Split::MetaTest,
            AblationSetting::HardSoft,
            1,
            1,
            0x99,
        )
        .unwrap();
        assert_eq!(report.episodes, 1);
        assert!(report.ci95.is_none());
        assert!((0.0..=1.0).contains(&report.mean_accuracy));
    }

    #[test]
    fn meta_test_is_deterministic_and_pairs_by_seed() {
        let go = || {
            meta_test(
                &FIX.backbone,
                &FIX.state,
                &FIX.ds,
                &FIX.cfg,
                Split::MetaTest,
                AblationSetting::Hard,
                6,
                1,
                0x42,
            )
            .unwrap()
        };
        let a = go();
        let b = go();
        assert_eq!(a.mean_accuracy.to_bits(), b.mean_accuracy.to_bits());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra.seed, rb.seed);
            assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
        }
        assert!(a.ci95.unwrap() >= 0.0);
        // A different setting on the same tag sees the same episode seeds.
        let c = meta_test(
            &FIX.backbone,
            &FIX.state,
            &FIX.ds,
            &FIX.cfg,
            Split::MetaTest,
            AblationSetting::SupervisedOnly,
            6,
            1,
            0x42,
        )
        .unwrap();
        assert_eq!(
            a.records.iter().map(|r| r.seed).collect::<Vec<_>>(),
            c.records.iter().map(|r| r.seed).collect::<Vec<_>>()
        );
    }

    #[test]
    fn meta_test_stage_bookkeeping_matches_setting() {
        let recursive = meta_test(
            &FIX.backbone,
            &FIX.state,
            &FIX.ds,
            &FIX.cfg,
            Split::MetaTest,
            AblationSetting::RecursiveHardSoft,
            3,
            FIX.cfg.stages,
            0x43,
        )
        .unwrap();
        assert_eq!(recursive.stage_pl_means.len(), FIX.cfg.stages);
        assert!(recursive.stage_pl_means.iter().all(|m| m.is_some()));
        for r in &recursive.records {
            assert_eq!(r.stage_subset_pl.len(), FIX.cfg.stages);
        }
        let supervised = meta_test(
            &FIX.backbone,
            &FIX.state,
            &FIX.ds,
            &FIX.cfg,
            Split::MetaTest,
            AblationSetting::SupervisedOnly,
            3,
            1,
            0x43,
        )
        .unwrap();
        assert_eq!(supervised.stage_pl_means, vec![None]);
        let oracle = meta_test(
            &FIX.backbone,
            &FIX.state,
            &FIX.ds,
            &FIX.cfg,
            Split::MetaTest,
            AblationSetting::FullySupervised,
            3,
            FIX.cfg.stages,
            0x43,
        )
        .unwrap();
        assert!(oracle.stage_pl_means.iter().all(|m| m.is_none()));
        assert!(oracle.records.iter().all(|r| r.selected_total > 0));
    }

    #[test]
    fn mean_and_ci95_oracle() {
        let (m, ci) = mean_and_ci95(&[0.5]);
        assert_eq!(m, 0.5);
        assert!(ci.is_none());
        // Five values with known mean 0.6 and sample std 0.158113883…
        let xs = [0.4, 0.5, 0.6, 0.7, 0.8];
        let (m, ci) = mean_and_ci95(&xs);
        assert!((m - 0.6).abs() < 1e-15);
        let expect = 1.96 * 0.15811388300841897 / 5f64.sqrt();
        assert!((ci.unwrap() - expect).abs() < 1e-12);
    }
}
