//! Synthetic class datasets and semi-supervised few-shot episode sampling.
//!
//! Class identity lives in a low-dimensional signal subspace: centers are
//! drawn inside a fixed random orthonormal subspace spanning half the input
//! dimensions, samples add unit-variance noise inside that subspace plus
//! stronger "nuisance" noise in the orthogonal complement, and the whole
//! dataset is pushed through a fixed random nonlinear warp. A feature
//! extractor can therefore learn (from the meta-train classes alone) to
//! suppress the nuisance directions, and that remains useful for novel
//! classes — while in raw input space the nuisance noise dominates distances.
//! Classes are split disjointly into meta-train / meta-validation /
//! meta-test. An episode draws N classes from one split, takes K labeled
//! support and Q_sz labeled query samples per class, and builds an unlabeled
//! pool of P samples per class — optionally contaminated by pools from extra
//! "distractor" classes that never appear in the support or query sets.

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

// Stream tags for seed derivation; distinct per purpose.
const TAG_CENTER: u64 = 0xC1;
const TAG_SAMPLES: u64 = 0xC2;
const TAG_WARP: u64 = 0xC3;
const TAG_BASIS: u64 = 0xC4;
const TAG_EPISODE_CLASSES: u64 = 0xE1;
const TAG_CLASS_DRAW: u64 = 0xE2;
const TAG_SUBSET_PERM: u64 = 0xE3;
const TAG_SUBSET_REDRAW: u64 = 0xE4;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Split {
    MetaTrain,
    MetaVal,
    MetaTest,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Split::MetaTrain => "meta-train",
            Split::MetaVal => "meta-val",
            Split::MetaTest => "meta-test",
        };
        f.write_str(s)
    }
}

/// Generator parameters for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    /// Expected distance between two class centers is `sqrt(2) * separation`;
    /// centers live in the signal subspace (the first `dim / 2` directions of
    /// a fixed random orthonormal basis).
    pub separation: f64,
    /// Standard deviation of the noise in the nuisance subspace (signal-
    /// subspace noise is fixed at 1).
    pub nuisance: f64,
    /// Strength of the fixed nonlinear warp applied to every sample.
    pub warp_strength: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

/// All samples of all classes, generated once and immutable afterwards.
#[derive(Clone, Debug)]
pub struct ClassDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// Per class: [samples_per_class, dim].
    data: Vec<Array>,
    split_of: Vec<Split>,
}

impl ClassDataset {
    pub fn build(spec: DatasetSpec, seed: u64) -> Result<Self> {
        if spec.dim < 2 {
            return Err(Error::Config(format!(
                "dataset dim must be at least 2, got {}",
                spec.dim
            )));
        }
        if spec.train_classes + spec.val_classes + spec.test_classes != spec.classes {
            return Err(Error::Config(format!(
                "split sizes {}+{}+{} do not cover {} classes",
                spec.train_classes, spec.val_classes, spec.test_classes, spec.classes
            )));
        }
        if spec.samples_per_class == 0 || spec.classes == 0 {
            return Err(Error::Config("dataset must be non-empty".into()));
        }

        let d = spec.dim;
        // Fixed warp shared by all classes: x -> x + strength * A tanh(B x).
        let scale = 1.0 / (d as f64).sqrt();
        let mut warp_rng = rng::stream(seed, &[TAG_WARP]);
        let mat = |rng: &mut rand_chacha::ChaCha8Rng| -> Array {
            let data: Vec<f64> = (0..d * d)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            Array::from_vec_unchecked(d, d, data)
        };
        let warp_a = mat(&mut warp_rng);
        let warp_b = mat(&mut warp_rng);

        // Fixed orthonormal basis; the first `signal` columns span the
        // subspace that carries class identity.
        let mut basis_rng = rng::stream(seed, &[TAG_BASIS]);
        let basis = orthonormal_basis(d, &mut basis_rng);
        let signal = d / 2;

        let center_scale = spec.separation / (signal as f64).sqrt();
        let mut data = Vec::with_capacity(spec.classes);
        for class in 0..spec.classes {
            let mut crng = rng::stream(seed, &[TAG_CENTER, class as u64]);
            // Center coordinates in the basis: signal dims only.
            let center_coords: Vec<f64> = (0..signal)
                .map(|_| crng.sample::<f64, _>(StandardNormal) * center_scale)
                .collect();
            let mut srng = rng::stream(seed, &[TAG_SAMPLES, class as u64]);
            let mut rows = Vec::with_capacity(spec.samples_per_class * d);
            for _ in 0..spec.samples_per_class {
                // Sample coordinates: center + unit noise in the signal
                // subspace, pure nuisance noise elsewhere.
                let coords: Vec<f64> = (0..d)
                    .map(|i| {
                        if i < signal {
                            center_coords[i] + srng.sample::<f64, _>(StandardNormal)
                        } else {
                            srng.sample::<f64, _>(StandardNormal) * spec.nuisance
                        }
                    })
                    .collect();
                // Rotate into input space: x = basis * coords.
                let raw: Vec<f64> = (0..d)
                    .map(|r| (0..d).map(|c| basis.at(r, c) * coords[c]).sum())
                    .collect();
                rows.extend(warp(&raw, &warp_a, &warp_b, spec.warp_strength));
            }
            data.push(Array::new(spec.samples_per_class, d, rows)?);
        }

        let mut split_of = Vec::with_capacity(spec.classes);
        split_of.extend(std::iter::repeat(Split::MetaTrain).take(spec.train_classes));
        split_of.extend(std::iter::repeat(Split::MetaVal).take(spec.val_classes));
        split_of.extend(std::iter::repeat(Split::MetaTest).take(spec.test_classes));

        Ok(Self {
            spec,
            seed,
            data,
            split_of,
        })
    }

    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        (0..self.spec.classes)
            .filter(|&c| self.split_of[c] == split)
            .collect()
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.split_of[class]
    }

    pub fn class_data(&self, class: usize) -> &Array {
        &self.data[class]
    }

    pub fn sample(&self, class: usize, index: usize) -> &[f64] {
        self.data[class].row_slice(index)
    }
}

/// Random orthonormal d x d basis: Gram-Schmidt over seeded Gaussian columns.
fn orthonormal_basis(d: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Array {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= dot * ui;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // Retry in the (measure-zero) event of a degenerate draw.
        if norm < 1e-8 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut data = Vec::with_capacity(d * d);
    for r in 0..d {
        for col in &cols {
            data.push(col[r]);
        }
    }
    Array::from_vec_unchecked(d, d, data)
}

fn warp(x: &[f64], a: &Array, b: &Array, strength: f64) -> Vec<f64> {
    let d = x.len();
    let mut bx = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += b.at(i, j) * x[j];
        }
        bx[i] = acc.tanh();
    }
    let mut out = x.to_vec();
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += a.at(i, j) * bx[j];
        }
        out[i] += strength * acc;
    }
    out
}

/// Identity of one dataset sample, used for disjointness bookkeeping.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct SampleRef {
    pub class: usize,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub pool_per_class: usize,
    pub distractors: usize,
}

/// One few-shot task: labeled support and query sets over N classes plus an
/// unlabeled pool that may also contain distractor-class samples.
#[derive(Clone, Debug)]
pub struct Episode {
    pub seed: u64,
    pub way: usize,
    pub pool_per_class: usize,
    /// Dataset-global ids of the N episode classes; position = episode label.
    pub classes: Vec<usize>,
    pub distractor_classes: Vec<usize>,
    pub support_x: Array,
    pub support_y: Vec<usize>,
    pub support_refs: Vec<SampleRef>,
    pub query_x: Array,
    pub query_y: Vec<usize>,
    pub query_refs: Vec<SampleRef>,
    /// [(way + distractors) * pool_per_class, dim], class slices contiguous:
    /// episode classes first (in label order), then distractor classes.
    pub pool_x: Array,
    pub pool_refs: Vec<SampleRef>,
    /// Episode-local label of each pool row; None marks a distractor sample.
    /// Evaluation-only: the algorithm never reads these for training.
    pub pool_hidden: Vec<Option<usize>>,
}

impl Episode {
    pub fn pool_len(&self) -> usize {
        self.pool_refs.len()
    }

    pub fn pool_class_count(&self) -> usize {
        self.classes.len() + self.distractor_classes.len()
    }
}

/// References into an episode pool for one self-training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSubset {
    pub stage: usize,
    /// Row indices into `Episode::pool_x`.
    pub indices: Vec<usize>,
}

pub fn sample_episode(
    ds: &ClassDataset,
    split: Split,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    if cfg.way == 0 || cfg.shot == 0 {
        return Err(Error::Config("way and shot must be positive".into()));
    }
    let split_classes = ds.classes_in(split);
    if split_classes.len() < cfg.way + cfg.distractors {
        return Err(Error::Sampling(format!(
            "{split} has {} classes; episode needs {} (way {} + distractors {})",
            split_classes.len(),
            cfg.way + cfg.distractors,
            cfg.way,
            cfg.distractors
        )));
    }
    let needed = cfg.shot + cfg.query + cfg.pool_per_class;
    if needed > ds.spec.samples_per_class {
        // Report the first affected class for a concrete error message.
        return Err(Error::Sampling(format!(
            "class {} has {} samples; episode needs {} (shot {} + query {} + pool {})",
            split_classes[0], ds.spec.samples_per_class, needed, cfg.shot, cfg.query, cfg.pool_per_class
        )));
    }

    // Shuffle the split's classes once: the first `way` are episode classes
    // and the next `distractors` are contaminants. Growing the distractor
    // count therefore never changes the support/query content for a seed.
    let mut order = split_classes;
    order.shuffle(&mut rng::stream(seed, &[TAG_EPISODE_CLASSES]));
    let classes: Vec<usize> = order[..cfg.way].to_vec();
    let distractor_classes: Vec<usize> = order[cfg.way..cfg.way + cfg.distractors].to_vec();

    let dim = ds.spec.dim;
    let mut support_rows = Vec::with_capacity(cfg.way * cfg.shot * dim);
    let mut support_y = Vec::new();
    let mut support_refs = Vec::new();
    let mut query_rows = Vec::with_capacity(cfg.way * cfg.query * dim);
    let mut query_y = Vec::new();
    let mut query_refs = Vec::new();
    let mut pool_rows = Vec::with_capacity((cfg.way + cfg.distractors) * cfg.pool_per_class * dim);
    let mut pool_refs = Vec::new();
    let mut pool_hidden = Vec::new();

    for (label, &class) in classes.iter().enumerate() {
        let mut perm: Vec<usize> = (0..ds.spec.samples_per_class).collect();
        perm.shuffle(&mut rng::stream(seed, &[TAG_CLASS_DRAW, class as u64]));
        for &idx in &perm[..cfg.shot] {
            support_rows.extend_from_slice(ds.sample(class, idx));
            support_y.push(label);
            support_refs.push(SampleRef { class, index: idx });
        }
        for &idx in &perm[cfg.shot..cfg.shot + cfg.query] {
            query_rows.extend_from_slice(ds.sample(class, idx));
            query_y.push(label);
            query_refs.push(SampleRef { class, index: idx });
        }
        for &idx in &perm[cfg.shot + cfg.query..needed] {
            pool_rows.extend_from_slice(ds.sample(class, idx));
            pool_refs.push(SampleRef { class, index: idx });
            pool_hidden.push(Some(label));
        }
    }
    for &class in &distractor_classes {
        let mut perm: Vec<usize> = (0..ds.spec.samples_per_class).collect();
        perm.shuffle(&mut rng::stream(seed, &[TAG_CLASS_DRAW, class as u64]));
        for &idx in &perm[..cfg.pool_per_class] {
            pool_rows.extend_from_slice(ds.sample(class, idx));
            pool_refs.push(SampleRef { class, index: idx });
            pool_hidden.push(None);
        }
    }

    Ok(Episode {
        seed,
        way: cfg.way,
        pool_per_class: cfg.pool_per_class,
        classes,
        distractor_classes,
        support_x: Array::new(cfg.way * cfg.shot, dim, support_rows)?,
        support_y,
        support_refs,
        query_x: Array::new(cfg.way * cfg.query, dim, query_rows)?,
        query_y,
        query_refs,
        pool_x: Array::new(pool_refs.len(), dim, pool_rows)?,
        pool_refs,
        pool_hidden,
    })
}

/// Per-stage unlabeled draw: `per_class_draw` samples from every pool class
/// (episode classes and distractors alike). Stages walk a fixed per-class
/// permutation, so consecutive stages are disjoint until the pool slice is
/// exhausted; past that point samples are redrawn with replacement.
pub fn draw_unlabeled_subset(
    episode: &Episode,
    stage: usize,
    per_class_draw: usize,
    seed: u64,
) -> Result<UnlabeledSubset> {
    if stage == 0 {
        return Err(Error::Contract("subset stages are 1-based".into()));
    }
    let p = episode.pool_per_class;
    if per_class_draw > p {
        return Err(Error::Config(format!(
            "per-stage draw {per_class_draw} exceeds pool per-class size {p}"
        )));
    }
    let mut indices = Vec::with_capacity(per_class_draw * episode.pool_class_count());
    for class_slot in 0..episode.pool_class_count() {
        let base = class_slot * p;
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng::stream(seed, &[TAG_SUBSET_PERM, class_slot as u64]));
        let start = (stage - 1) * per_class_draw;
        let mut redraw = rng::stream(seed, &[TAG_SUBSET_REDRAW, class_slot as u64, stage as u64]);
        for k in 0..per_class_draw {
            let local = match perm.get(start + k) {
                Some(&i) => i,
                None => redraw.gen_range(0..p),
            };
            indices.push(base + local);
        }
    }
    Ok(UnlabeledSubset { stage, indices })
}

/// The distinct union of the subsets the recursive schedule would draw over
/// `stages` rounds, capped at the pool (for one combined re-training round).
pub fn mixing_pool(
    episode: &Episode,
    stages: usize,
    per_class_draw: usize,
    seed: u64,
) -> Result<UnlabeledSubset> {
    if stages == 0 {
        return Err(Error::Contract("mixing needs at least one stage".into()));
    }
    let p = episode.pool_per_class;
    if per_class_draw > p {
        return Err(Error::Config(format!(
            "per-stage draw {per_class_draw} exceeds pool per-class size {p}"
        )));
    }
    let take = (stages * per_class_draw).min(p);
    let mut indices = Vec::with_capacity(take * episode.pool_class_count());
    for class_slot in 0..episode.pool_class_count() {
        let base = class_slot * p;
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut rng::stream(seed, &[TAG_SUBSET_PERM, class_slot as u64]));
        indices.extend(perm[..take].iter().map(|&i| base + i));
    }
    Ok(UnlabeledSubset { stage: 1, indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn spec20() -> DatasetSpec {
        DatasetSpec {
            classes: 20,
            samples_per_class: 200,
            dim: 16,
            separation: 3.0,
            nuisance: 2.0,
            warp_strength: 0.5,
            train_classes: 8,
            val_classes: 2,
            test_classes: 10,
        }
    }

    fn ep_cfg() -> EpisodeConfig {
        EpisodeConfig {
            way: 5,
            shot: 1,
            query: 15,
            pool_per_class: 100,
            distractors: 0,
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = ClassDataset::build(spec20(), 7).unwrap();
        let b = ClassDataset::build(spec20(), 7).unwrap();
        for c in 0..20 {
            assert_eq!(a.class_data(c), b.class_data(c));
        }
        let c = ClassDataset::build(spec20(), 8).unwrap();
        assert_ne!(a.class_data(0), c.class_data(0));
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let tr = ds.classes_in(Split::MetaTrain);
        let va = ds.classes_in(Split::MetaVal);
        let te = ds.classes_in(Split::MetaTest);
        assert_eq!((tr.len(), va.len(), te.len()), (8, 2, 10));
        let all: HashSet<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        assert_eq!(all.len(), 20);
    }

    /// Nearest-centroid accuracy on raw inputs, the calibration oracle for
    /// dataset difficulty: centroids from the first half of each class,
    /// evaluation on the second half.
    fn centroid_accuracy(ds: &ClassDataset) -> f64 {
        let n = ds.spec.samples_per_class;
        let d = ds.spec.dim;
        let half = n / 2;
        let mut centroids = Vec::new();
        for c in 0..ds.spec.classes {
            let mut acc = vec![0.0; d];
            for i in 0..half {
                for (j, v) in ds.sample(c, i).iter().enumerate() {
                    acc[j] += v;
                }
            }
            for v in &mut acc {
                *v /= half as f64;
            }
            centroids.push(acc);
        }
        let mut correct = 0;
        let mut total = 0;
        for c in 0..ds.spec.classes {
            for i in half..n {
                let x = ds.sample(c, i);
                let mut best = (f64::INFINITY, 0);
                for (k, cen) in centroids.iter().enumerate() {
                    let d2: f64 = x.iter().zip(cen).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d2 < best.0 {
                        best = (d2, k);
                    }
                }
                correct += usize::from(best.1 == c);
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn centroid_oracle_in_calibrated_band() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let acc = centroid_accuracy(&ds);
        assert!(
            (0.60..=0.95).contains(&acc),
            "centroid oracle accuracy {acc} outside calibration band"
        );
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let mut spec = spec20();
        spec.separation = 0.0;
        let ds = ClassDataset::build(spec, 7).unwrap();
        let acc = centroid_accuracy(&ds);
        assert!(
            (acc - 0.05).abs() <= 0.03,
            "expected chance-level accuracy, got {acc}"
        );
    }

    #[test]
    fn episode_counts_match_protocol() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let ep = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        assert_eq!(ep.support_x.rows(), 5);
        assert_eq!(ep.query_x.rows(), 75);
        assert_eq!(ep.pool_x.rows(), 500);
        assert_eq!(ep.support_y, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn distractors_extend_pool_without_touching_support() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let base = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        let cfg3 = EpisodeConfig {
            distractors: 3,
            ..ep_cfg()
        };
        let ep = sample_episode(&ds, Split::MetaTest, &cfg3, 11).unwrap();
        assert_eq!(ep.pool_x.rows(), 800);
        assert_eq!(ep.distractor_classes.len(), 3);
        assert_eq!(ep.pool_hidden.iter().filter(|h| h.is_none()).count(), 300);
        // Same episode classes and sets as the distractor-free draw.
        assert_eq!(ep.classes, base.classes);
        assert_eq!(ep.support_x, base.support_x);
        assert_eq!(ep.query_x, base.query_x);
        for (&c, &d) in ep.classes.iter().zip(ep.distractor_classes.iter()) {
            assert_ne!(c, d);
        }
    }

    #[test]
    fn episode_is_deterministic() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let cfg = EpisodeConfig {
            way: 2,
            shot: 1,
            query: 1,
            pool_per_class: 2,
            distractors: 0,
        };
        let a = sample_episode(&ds, Split::MetaTrain, &cfg, 3).unwrap();
        let b = sample_episode(&ds, Split::MetaTrain, &cfg, 3).unwrap();
        assert_eq!(a.support_x, b.support_x);
        assert_eq!(a.query_x, b.query_x);
        assert_eq!(a.pool_x, b.pool_x);
        assert_eq!(a.pool_refs, b.pool_refs);
    }

    #[test]
    fn too_few_classes_is_an_error() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let cfg = EpisodeConfig {
            way: 5,
            distractors: 6,
            ..ep_cfg()
        };
        let err = sample_episode(&ds, Split::MetaTest, &cfg, 1).unwrap_err();
        assert!(err.to_string().contains("distractors"));
    }

    #[test]
    fn insufficient_samples_names_a_class() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let cfg = EpisodeConfig {
            pool_per_class: 190,
            ..ep_cfg()
        };
        let err = sample_episode(&ds, Split::MetaTest, &cfg, 1).unwrap_err();
        assert!(err.to_string().contains("class"));
        assert!(err.to_string().contains("206"));
    }

    #[test]
    fn subsets_disjoint_until_exhaustion() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let ep = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        let s1 = draw_unlabeled_subset(&ep, 1, 30, ep.seed).unwrap();
        let s2 = draw_unlabeled_subset(&ep, 2, 30, ep.seed).unwrap();
        let s3 = draw_unlabeled_subset(&ep, 3, 30, ep.seed).unwrap();
        assert_eq!(s1.indices.len(), 150);
        let all: HashSet<usize> = s1
            .indices
            .iter()
            .chain(&s2.indices)
            .chain(&s3.indices)
            .copied()
            .collect();
        assert_eq!(all.len(), 450, "stages 1-3 must be pairwise disjoint");
    }

    #[test]
    fn exhausted_pool_redraws_with_replacement() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let ep = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        let s1 = draw_unlabeled_subset(&ep, 1, 100, ep.seed).unwrap();
        let distinct: HashSet<usize> = s1.indices.iter().copied().collect();
        assert_eq!(distinct.len(), 500, "stage 1 at full draw covers the pool");
        let s2 = draw_unlabeled_subset(&ep, 2, 100, ep.seed).unwrap();
        assert_eq!(s2.indices.len(), 500);
        for &i in &s2.indices {
            assert!(i < ep.pool_len());
        }
    }

    #[test]
    fn subset_draws_are_deterministic() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let ep = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        let a = draw_unlabeled_subset(&ep, 1, 30, ep.seed).unwrap();
        let b = draw_unlabeled_subset(&ep, 1, 30, ep.seed).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mixing_is_the_distinct_union_of_recursive_draws() {
        let ds = ClassDataset::build(spec20(), 7).unwrap();
        let ep = sample_episode(&ds, Split::MetaTest, &ep_cfg(), 11).unwrap();
        let mixed = mixing_pool(&ep, 3, 30, ep.seed).unwrap();
        assert_eq!(mixed.indices.len(), 450); // 90 per class x 5 classes
        let union: HashSet<usize> = (1..=3)
            .flat_map(|s| draw_unlabeled_subset(&ep, s, 30, ep.seed).unwrap().indices)
            .collect();
        let mixed_set: HashSet<usize> = mixed.indices.iter().copied().collect();
        assert_eq!(mixed_set, union);

        // Capacity cap: 6 stages x 30 from a pool of 100 -> all 100 per class.
        let capped = mixing_pool(&ep, 6, 30, ep.seed).unwrap();
        assert_eq!(capped.indices.len(), 500);
        let capped_set: HashSet<usize> = capped.indices.iter().copied().collect();
        assert_eq!(capped_set.len(), 500);

        // One stage degenerates to the stage-1 draw.
        let one = mixing_pool(&ep, 1, 30, ep.seed).unwrap();
        let s1: HashSet<usize> = draw_unlabeled_subset(&ep, 1, 30, ep.seed)
            .unwrap()
            .indices
            .into_iter()
            .collect();
        let one_set: HashSet<usize> = one.indices.iter().copied().collect();
        assert_eq!(one_set, s1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn episode_invariants_hold(seed in 0u64..1_000_000, distractors in 0usize..4) {
            let ds = ClassDataset::build(spec20(), 7).unwrap();
            let cfg = EpisodeConfig { distractors, pool_per_class: 40, ..ep_cfg() };
            let ep = sample_episode(&ds, Split::MetaTest, &cfg, seed).unwrap();

            // Disjointness by sample identity.
            let s: HashSet<SampleRef> = ep.support_refs.iter().copied().collect();
            let q: HashSet<SampleRef> = ep.query_refs.iter().copied().collect();
            let p: HashSet<SampleRef> = ep.pool_refs.iter().copied().collect();
            prop_assert!(s.is_disjoint(&q));
            prop_assert!(s.is_disjoint(&p));
            prop_assert!(q.is_disjoint(&p));

            // Split hygiene and distractor exclusion.
            for &c in ep.classes.iter().chain(&ep.distractor_classes) {
                prop_assert_eq!(ds.split_of(c), Split::MetaTest);
            }
            for &dc in &ep.distractor_classes {
                prop_assert!(!ep.classes.contains(&dc));
            }

            // Exact counts.
            prop_assert_eq!(ep.support_refs.len(), 5);
            prop_assert_eq!(ep.query_refs.len(), 75);
            prop_assert_eq!(ep.pool_refs.len(), (5 + distractors) * 40);
        }
    }
}
