//! Versioned checkpoints: named parameter arrays plus the full configuration
//! that produced them.
//!
//! The format is JSON with shortest-roundtrip float rendering, so a
//! save → load → save cycle is byte-identical and every stored value is
//! recovered bit-exactly. The embedded config echo parses back through the
//! ordinary config reader.

use crate::autodiff::Array;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Backbone, Classifier, ScaleShift, Swn};
use crate::selftrain::MetaState;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major 64-bit values.
    pub values: Vec<f64>,
}

impl NamedArray {
    fn from_array(name: &str, a: &Array) -> Self {
        NamedArray {
            name: name.to_string(),
            rows: a.rows(),
            cols: a.cols(),
            values: a.data().to_vec(),
        }
    }

    fn to_array(&self) -> Result<Array> {
        Array::new(self.rows, self.cols, self.values.clone()).map_err(|e| {
            Error::Contract(format!("checkpoint array '{}' is malformed: {e}", self.name))
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// "backbone" or "meta-state".
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    /// Meta-iteration counter (0 for backbone checkpoints).
    pub iteration: usize,
    /// Canonical `key=value` echo of the configuration.
    pub config: String,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    fn new(kind: &str, cfg: &TrainConfig, iteration: usize, arrays: Vec<NamedArray>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            iteration,
            config: cfg.canonical_text(),
            arrays,
        }
    }

    pub fn parse_config(&self) -> Result<TrainConfig> {
        TrainConfig::from_str_source(&self.config, "checkpoint config echo")
    }

    fn index(&self) -> BTreeMap<&str, &NamedArray> {
        self.arrays.iter().map(|a| (a.name.as_str(), a)).collect()
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    fn read(path: &Path, expect_kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("checkpoint {} is not valid: {e}", path.display()))
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint {} has version {}, expected {CHECKPOINT_VERSION}",
                path.display(),
                ckpt.version
            )));
        }
        if ckpt.kind != expect_kind {
            return Err(Error::Config(format!(
                "checkpoint {} holds a '{}' state, expected '{expect_kind}'",
                path.display(),
                ckpt.kind
            )));
        }
        Ok(ckpt)
    }
}

fn get<'a>(
    index: &BTreeMap<&str, &'a NamedArray>,
    name: &str,
    path: &Path,
) -> Result<&'a NamedArray> {
    index.get(name).copied().ok_or_else(|| {
        Error::Contract(format!(
            "checkpoint {} is missing array '{name}'",
            path.display()
        ))
    })
}

pub fn save_backbone(path: &Path, backbone: &Backbone, cfg: &TrainConfig) -> Result<()> {
    let mut arrays = Vec::new();
    for (l, (w, b)) in backbone.layers.iter().enumerate() {
        arrays.push(NamedArray::from_array(&format!("backbone.layer{l}.w"), w));
        arrays.push(NamedArray::from_array(&format!("backbone.layer{l}.b"), b));
    }
    Checkpoint::new("backbone", cfg, 0, arrays).write(path)
}

pub fn load_backbone(path: &Path) -> Result<(Backbone, Checkpoint)> {
    let ckpt = Checkpoint::read(path, "backbone")?;
    let index = ckpt.index();
    let mut layers = Vec::new();
    for l in 0.. {
        let wname = format!("backbone.layer{l}.w");
        if !index.contains_key(wname.as_str()) {
            break;
        }
        let w = get(&index, &wname, path)?.to_array()?;
        let b = get(&index, &format!("backbone.layer{l}.b"), path)?.to_array()?;
        layers.push((w, b));
    }
    if layers.is_empty() {
        return Err(Error::Contract(format!(
            "checkpoint {} holds no backbone layers",
            path.display()
        )));
    }
    Ok((Backbone { layers }, ckpt))
}

pub fn save_meta_state(path: &Path, state: &MetaState, cfg: &TrainConfig) -> Result<()> {
    let mut arrays = Vec::new();
    for (l, s) in state.scale_shift.scales.iter().enumerate() {
        arrays.push(NamedArray::from_array(&format!("scale_shift.layer{l}.scale"), s));
    }
    for (l, h) in state.scale_shift.shifts.iter().enumerate() {
        arrays.push(NamedArray::from_array(&format!("scale_shift.layer{l}.shift"), h));
    }
    arrays.push(NamedArray::from_array("theta_prime.w", &state.theta_prime.w));
    arrays.push(NamedArray::from_array("theta_prime.b", &state.theta_prime.b));
    arrays.push(NamedArray::from_array("swn.w1", &state.swn.w1));
    arrays.push(NamedArray::from_array("swn.b1", &state.swn.b1));
    arrays.push(NamedArray::from_array("swn.w2", &state.swn.w2));
    arrays.push(NamedArray::from_array("swn.b2", &state.swn.b2));
    Checkpoint::new("meta-state", cfg, state.iteration, arrays).write(path)
}

pub fn load_meta_state(path: &Path) -> Result<(MetaState, Checkpoint)> {
    let ckpt = Checkpoint::read(path, "meta-state")?;
    let index = ckpt.index();
    let mut scales = Vec::new();
    let mut shifts = Vec::new();
    for l in 0.. {
        let sname = format!("scale_shift.layer{l}.scale");
        if !index.contains_key(sname.as_str()) {
            break;
        }
        scales.push(get(&index, &sname, path)?.to_array()?);
        shifts.push(get(&index, &format!("scale_shift.layer{l}.shift"), path)?.to_array()?);
    }
    if scales.is_empty() {
        return Err(Error::Contract(format!(
            "checkpoint {} holds no scale-shift layers",
            path.display()
        )));
    }
    let state = MetaState {
        scale_shift: ScaleShift { scales, shifts },
        theta_prime: Classifier {
            w: get(&index, "theta_prime.w", path)?.to_array()?,
            b: get(&index, "theta_prime.b", path)?.to_array()?,
        },
        swn: Swn {
            w1: get(&index, "swn.w1", path)?.to_array()?,
            b1: get(&index, "swn.b1", path)?.to_array()?,
            w2: get(&index, "swn.w2", path)?.to_array()?,
            b2: get(&index, "swn.b2", path)?.to_array()?,
        },
        iteration: ckpt.iteration,
    };
    Ok((state, ckpt))
}

/// Check that a loaded meta-state structurally fits the current run: layer
/// shapes against the backbone, classifier width against the episode way,
/// SWN input against the embedding.
pub fn validate_meta_state(
    state: &MetaState,
    backbone: &Backbone,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.scale_shift.scales.len() != backbone.layers.len() {
        return Err(Error::Contract(format!(
            "meta-state has {} scale-shift layers for a {}-layer backbone",
            state.scale_shift.scales.len(),
            backbone.layers.len()
        )));
    }
    for (l, ((w, b), (s, h))) in backbone
        .layers
        .iter()
        .zip(state.scale_shift.scales.iter().zip(&state.scale_shift.shifts))
        .enumerate()
    {
        if w.shape() != s.shape() || b.shape() != h.shape() {
            return Err(Error::Contract(format!(
                "meta-state scale-shift layer {l} shapes {:?}/{:?} do not match backbone {:?}/{:?}",
                s.shape_vec(),
                h.shape_vec(),
                w.shape_vec(),
                b.shape_vec()
            )));
        }
    }
    let embed = backbone.embed_dim();
    if state.theta_prime.w.shape() != [embed, cfg.way] {
        return Err(Error::Contract(format!(
            "meta-state classifier init is {:?}, current run needs [{embed}, {}]",
            state.theta_prime.w.shape_vec(),
            cfg.way
        )));
    }
    if state.swn.w1.rows() != 2 * embed {
        return Err(Error::Contract(format!(
            "meta-state SWN expects input {} but the embedding pairs are {}",
            state.swn.w1.rows(),
            2 * embed
        )));
    }
    Ok(())
}
