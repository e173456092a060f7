//! The differentiable model stack: frozen pretrained backbone, meta-learned
//! scale-shift modulation, per-episode linear classifier, and the soft
//! weighting network (SWN) that scores pseudo-labeled samples against class
//! prototypes.
//!
//! Parameters live as plain [`Array`]s between episodes; each episode stages
//! the relevant ones onto a [`Tape`] as leaves and assembles the forward pass
//! from taped ops, so gradients flow (or are deliberately withheld) exactly
//! as the training mode demands.

use crate::autodiff::{Array, NodeId, Tape};
use crate::episodes::{ClassDataset, Split};
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

const TAG_INIT: u64 = 0xB1;
const TAG_ORDER: u64 = 0xB2;
const TAG_SWN_INIT: u64 = 0xB3;

/// Frozen fully-connected feature extractor. Layers apply relu except the
/// last, whose output is the embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    /// (weights [in, out], bias [1, out]) per layer.
    pub layers: Vec<(Array, Array)>,
}

impl Backbone {
    pub fn dims(input: usize, hidden: usize, embed: usize) -> Vec<(usize, usize)> {
        vec![(input, hidden), (hidden, hidden), (hidden, embed)]
    }

    pub fn init(input: usize, hidden: usize, embed: usize, seed: u64) -> Self {
        let layers = Self::dims(input, hidden, embed)
            .into_iter()
            .enumerate()
            .map(|(l, (fan_in, fan_out))| {
                let mut r = rng::stream(seed, &[TAG_INIT, l as u64]);
                let std = (2.0 / fan_in as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| r.sample::<f64, _>(StandardNormal) * std)
                    .collect();
                (
                    Array::new(fan_in, fan_out, w).expect("finite init"),
                    Array::zeros(1, fan_out),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.layers.last().expect("nonempty backbone").0.cols()
    }
}

/// Meta-learned modulation of the frozen backbone: elementwise weight scaling
/// (initialized to 1) and bias shifting (initialized to 0), mirroring the
/// backbone's shapes layer for layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleShift {
    pub scales: Vec<Array>,
    pub shifts: Vec<Array>,
}

impl ScaleShift {
    pub fn identity(backbone: &Backbone) -> Self {
        let scales = backbone
            .layers
            .iter()
            .map(|(w, _)| Array::ones(w.rows(), w.cols()))
            .collect();
        let shifts = backbone
            .layers
            .iter()
            .map(|(_, b)| Array::zeros(b.rows(), b.cols()))
            .collect();
        Self { scales, shifts }
    }
}

/// Episode classifier θ: embedding -> N-way logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub w: Array,
    pub b: Array,
}

impl Classifier {
    /// Zero initialization: uniform predictions before any adaptation.
    pub fn zeros(embed: usize, way: usize) -> Self {
        Self {
            w: Array::zeros(embed, way),
            b: Array::zeros(1, way),
        }
    }
}

/// Soft weighting network: [feature; prototype] (2E) -> hidden -> 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Swn {
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl Swn {
    pub fn init(embed: usize, hidden: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[TAG_SWN_INIT]);
        let layer = |fan_in: usize, fan_out: usize, r: &mut rand_chacha::ChaCha8Rng| {
            let std = (2.0 / fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| r.sample::<f64, _>(StandardNormal) * std)
                .collect();
            Array::new(fan_in, fan_out, w).expect("finite init")
        };
        Self {
            w1: layer(2 * embed, hidden, &mut r),
            b1: Array::zeros(1, hidden),
            w2: layer(hidden, 1, &mut r),
            b2: Array::zeros(1, 1),
        }
    }
}

/// Node ids of backbone parameters staged on a tape.
#[derive(Clone, Debug)]
pub struct TapedBackbone {
    pub layers: Vec<(NodeId, NodeId)>,
}

pub fn stage_backbone(tape: &mut Tape, bb: &Backbone) -> TapedBackbone {
    TapedBackbone {
        layers: bb
            .layers
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct TapedScaleShift {
    pub scales: Vec<NodeId>,
    pub shifts: Vec<NodeId>,
}

pub fn stage_scale_shift(tape: &mut Tape, ss: &ScaleShift) -> TapedScaleShift {
    TapedScaleShift {
        scales: ss.scales.iter().map(|a| tape.leaf(a.clone())).collect(),
        shifts: ss.shifts.iter().map(|a| tape.leaf(a.clone())).collect(),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TapedSwn {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub fn stage_swn(tape: &mut Tape, swn: &Swn) -> TapedSwn {
    TapedSwn {
        w1: tape.leaf(swn.w1.clone()),
        b1: tape.leaf(swn.b1.clone()),
        w2: tape.leaf(swn.w2.clone()),
        b2: tape.leaf(swn.b2.clone()),
    }
}

/// Forward through dense layers with relu between (never after the last).
pub fn mlp_forward(tape: &mut Tape, x: NodeId, layers: &[(NodeId, NodeId)]) -> Result<NodeId> {
    let mut h = x;
    for (l, &(w, b)) in layers.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add(z, b)?;
        if l + 1 < layers.len() {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Embeddings from the scale-shifted backbone: layer weights are multiplied
/// elementwise by their scale arrays and biases get their shifts added. The
/// backbone node values themselves are never updated (frozen contract: they
/// are simply absent from every trainable-parameter set).
pub fn features(
    tape: &mut Tape,
    x: NodeId,
    bb: &TapedBackbone,
    ss: &TapedScaleShift,
) -> Result<NodeId> {
    if bb.layers.len() != ss.scales.len() || bb.layers.len() != ss.shifts.len() {
        return Err(Error::Contract(format!(
            "scale-shift has {} scales / {} shifts for {} backbone layers",
            ss.scales.len(),
            ss.shifts.len(),
            bb.layers.len()
        )));
    }
    let mut effective = Vec::with_capacity(bb.layers.len());
    for (l, &(w, b)) in bb.layers.iter().enumerate() {
        let w_eff = tape.mul(w, ss.scales[l])?;
        let b_eff = tape.add(b, ss.shifts[l])?;
        effective.push((w_eff, b_eff));
    }
    mlp_forward(tape, x, &effective)
}

/// N-way logits from embeddings.
pub fn classify(tape: &mut Tape, feats: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = tape.matmul(feats, w)?;
    tape.add(z, b)
}

/// Per-class mean of support features. With K=1 the prototype is the sample
/// feature itself. Every class in 0..way must appear in `support_y`.
pub fn prototypes(
    tape: &mut Tape,
    support_feats: NodeId,
    support_y: &[usize],
    way: usize,
) -> Result<NodeId> {
    let n = tape.value(support_feats).rows();
    if support_y.len() != n {
        return Err(Error::Contract(format!(
            "{} support labels for {} feature rows",
            support_y.len(),
            n
        )));
    }
    let mut counts = vec![0usize; way];
    for &y in support_y {
        if y >= way {
            return Err(Error::Contract(format!(
                "support label {y} out of range for way {way}"
            )));
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!(
            "class {missing} has no support samples"
        )));
    }
    let mut avg = Array::zeros(way, n);
    for (j, &y) in support_y.iter().enumerate() {
        avg.set(y, j, 1.0 / counts[y] as f64);
    }
    let avg = tape.leaf(avg);
    tape.matmul(avg, support_feats)
}

/// Per-sample, per-class soft weights: the SWN scores each [feature;
/// prototype_c] pair and the scores are softmax-normalized over the N classes
/// of the episode. Output shape [m, way]; rows sum to 1.
pub fn swn_weight_matrix(
    tape: &mut Tape,
    feats: NodeId,
    protos: NodeId,
    swn: &TapedSwn,
) -> Result<NodeId> {
    let m = tape.value(feats).rows();
    let way = tape.value(protos).rows();
    if tape.value(feats).cols() != tape.value(protos).cols() {
        return Err(Error::ShapeMismatch {
            op: "swn-weights",
            lhs: tape.value(feats).shape_vec(),
            rhs: tape.value(protos).shape_vec(),
        });
    }
    // Row (i, c) of the pair matrix is [feature_i ; prototype_c].
    let sample_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(way)).collect();
    let proto_idx: Vec<usize> = (0..m).flat_map(|_| 0..way).collect();
    let fs = tape.gather_rows(feats, &sample_idx)?;
    let ps = tape.gather_rows(protos, &proto_idx)?;
    let pairs = tape.concat_cols(fs, ps)?;
    let h = mlp_forward(tape, pairs, &[(swn.w1, swn.b1)])?;
    let h = tape.relu(h)?;
    let score = mlp_forward(tape, h, &[(swn.w2, swn.b2)])?;
    let scores = tape.reshape(score, m, way)?;
    tape.softmax_rows(scores)
}

/// Cross-entropy of softmax(weights ⊙ logits) against targets, one value per
/// row. With `weights` = ones this is exactly the unweighted cross-entropy
/// (multiplication by 1.0 is the identity on every float).
pub fn weighted_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    weights: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let weighted = tape.mul(weights, logits)?;
    tape.cross_entropy_rows(weighted, targets)
}

/// Argmax accuracy of logits (or any score matrix) against labels; ties
/// resolve to the lowest class index.
pub fn accuracy(scores: &Array, targets: &[usize]) -> f64 {
    let correct = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| scores.argmax_row(i) == t)
        .count();
    correct as f64 / targets.len().max(1) as f64
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub hidden: usize,
    pub embed: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of each class held out for the accuracy report.
    pub holdout_frac: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 32,
            steps: 1500,
            batch: 64,
            lr: 0.05,
            holdout_frac: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Train the backbone plus a temporary classification head on the whole
/// meta-train split (one big classification task over all its classes), then
/// drop the head and freeze the backbone.
pub fn pretrain_backbone(
    ds: &ClassDataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Backbone, PretrainReport)> {
    let classes = ds.classes_in(Split::MetaTrain);
    if classes.is_empty() {
        return Err(Error::Config("dataset has no meta-train split".into()));
    }
    let n_cls = classes.len();
    let per = ds.spec.samples_per_class;
    let holdout = ((per as f64 * cfg.holdout_frac) as usize).clamp(1, per - 1);
    let train_per = per - holdout;

    // (class slot, sample index) pairs for training; holdout tail per class.
    let train_items: Vec<(usize, usize)> = (0..n_cls)
        .flat_map(|slot| (0..train_per).map(move |i| (slot, i)))
        .collect();

    let mut backbone = Backbone::init(ds.spec.dim, cfg.hidden, cfg.embed, seed);
    let mut head_r = rng::stream(seed, &[TAG_INIT, 99]);
    let head_std = (2.0 / cfg.embed as f64).sqrt();
    let mut head_w = Array::new(
        cfg.embed,
        n_cls,
        (0..cfg.embed * n_cls)
            .map(|_| head_r.sample::<f64, _>(StandardNormal) * head_std)
            .collect(),
    )?;
    let mut head_b = Array::zeros(1, n_cls);

    let mut order = train_items.clone();
    let mut cursor = order.len(); // force reshuffle at step 0
    let mut epoch = 0u64;
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        if cursor + cfg.batch > order.len() {
            order.shuffle(&mut rng::stream(seed, &[TAG_ORDER, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let batch = &order[cursor..cursor + cfg.batch];
        cursor += cfg.batch;

        let dim = ds.spec.dim;
        let mut rows = Vec::with_capacity(cfg.batch * dim);
        let mut ys = Vec::with_capacity(cfg.batch);
        for &(slot, i) in batch {
            rows.extend_from_slice(ds.sample(classes[slot], i));
            ys.push(slot);
        }

        let mut tape = Tape::new();
        let x = tape.leaf(Array::new(cfg.batch, dim, rows)?);
        let bb_nodes = stage_backbone(&mut tape, &backbone);
        let hw = tape.leaf(head_w.clone());
        let hb = tape.leaf(head_b.clone());
        let run = (|| -> Result<(f64, Vec<Array>)> {
            let feats = mlp_forward(&mut tape, x, &bb_nodes.layers)?;
            let logits = classify(&mut tape, feats, hw, hb)?;
            let ce = tape.cross_entropy_rows(logits, &ys)?;
            let loss = tape.mean(ce)?;
            let mut wrt: Vec<NodeId> = bb_nodes
                .layers
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .collect();
            wrt.push(hw);
            wrt.push(hb);
            let grads = tape.grad_arrays(loss, &wrt)?;
            Ok((tape.value_scalar(loss), grads))
        })();
        let (loss, grads) = run.map_err(|e| match e {
            Error::NonFinite { .. } => Error::Numeric(format!(
                "pre-training diverged (non-finite loss) at step {step}; try a smaller pretrain_lr"
            )),
            other => other,
        })?;
        final_loss = loss;

        let mut gi = 0;
        for (w, b) in backbone.layers.iter_mut() {
            sgd_step(w, &grads[gi], cfg.lr);
            sgd_step(b, &grads[gi + 1], cfg.lr);
            gi += 2;
        }
        sgd_step(&mut head_w, &grads[gi], cfg.lr);
        sgd_step(&mut head_b, &grads[gi + 1], cfg.lr);
    }

    let eval = |items: &[(usize, usize)]| -> Result<f64> {
        let dim = ds.spec.dim;
        let mut rows = Vec::with_capacity(items.len() * dim);
        let mut ys = Vec::with_capacity(items.len());
        for &(slot, i) in items {
            rows.extend_from_slice(ds.sample(classes[slot], i));
            ys.push(slot);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Array::new(items.len(), dim, rows)?);
        let bb_nodes = stage_backbone(&mut tape, &backbone);
        let hw = tape.leaf(head_w.clone());
        let hb = tape.leaf(head_b.clone());
        let feats = mlp_forward(&mut tape, x, &bb_nodes.layers)?;
        let logits = classify(&mut tape, feats, hw, hb)?;
        Ok(accuracy(tape.value(logits), &ys))
    };
    let holdout_items: Vec<(usize, usize)> = (0..n_cls)
        .flat_map(|slot| (train_per..per).map(move |i| (slot, i)))
        .collect();
    let report = PretrainReport {
        steps: cfg.steps,
        final_loss,
        train_accuracy: eval(&train_items)?,
        holdout_accuracy: eval(&holdout_items)?,
    };
    Ok((backbone, report))
}

fn sgd_step(param: &mut Array, grad: &Array, lr: f64) {
    debug_assert_eq!(param.shape(), grad.shape());
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}
