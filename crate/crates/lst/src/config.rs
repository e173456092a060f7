//! Flat key=value experiment configuration.
//!
//! Every run is fully described by a [`TrainConfig`]; the canonical sorted
//! `key=value` rendering is hashed (SHA-256) and embedded in all artifacts so
//! results can be traced back to exact settings. Unknown keys are errors —
//! a typo must never silently fall back to a default.

use crate::episodes::{DatasetSpec, EpisodeConfig};
use crate::error::{Error, Result};
use crate::model::PretrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum MetaGradMode {
    /// Inner-loop updates are wrapped in stop-gradient: cheap, but the soft
    /// weighting network receives no meta-gradient (its only path to the
    /// query loss runs through the stopped updates).
    FirstOrder,
    /// Differentiate through the unrolled inner loop exactly.
    Unrolled,
}

impl MetaGradMode {
    pub fn tag(self) -> &'static str {
        match self {
            MetaGradMode::FirstOrder => "first-order",
            MetaGradMode::Unrolled => "unrolled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first-order" => Ok(MetaGradMode::FirstOrder),
            "unrolled" => Ok(MetaGradMode::Unrolled),
            other => Err(Error::Config(format!(
                "meta_grad_mode must be 'first-order' or 'unrolled', got '{other}'"
            ))),
        }
    }
}

/// Inner-loop variant, the row label of the ablation table.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AblationSetting {
    /// No unlabeled data at all: plain fit on the support set.
    SupervisedOnly,
    /// All pseudo-labeled samples, unweighted.
    NoSelection,
    /// Top-Z per predicted class, unweighted.
    Hard,
    /// All pseudo-labeled samples, SWN-weighted.
    Soft,
    /// Top-Z per predicted class, SWN-weighted (one stage).
    HardSoft,
    /// Hard + soft across multiple recursive stages on fresh subsets.
    RecursiveHardSoft,
    /// Hard + soft with all recursive subsets mixed into one round.
    MixingHardSoft,
    /// Upper bound: pool labels revealed (distractors dropped).
    FullySupervised,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 8] = [
        AblationSetting::SupervisedOnly,
        AblationSetting::NoSelection,
        AblationSetting::Hard,
        AblationSetting::Soft,
        AblationSetting::HardSoft,
        AblationSetting::RecursiveHardSoft,
        AblationSetting::MixingHardSoft,
        AblationSetting::FullySupervised,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationSetting::SupervisedOnly => "supervised-only",
            AblationSetting::NoSelection => "no-selection",
            AblationSetting::Hard => "hard",
            AblationSetting::Soft => "soft",
            AblationSetting::HardSoft => "hard-soft",
            AblationSetting::RecursiveHardSoft => "recursive-hard-soft",
            AblationSetting::MixingHardSoft => "mixing-hard-soft",
            AblationSetting::FullySupervised => "fully-supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|a| a.tag() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|a| a.tag()).collect();
                Error::Config(format!(
                    "unknown ablation setting '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }

    pub fn uses_unlabeled(self) -> bool {
        self != AblationSetting::SupervisedOnly
    }

    pub fn hard_selection(self) -> bool {
        matches!(
            self,
            AblationSetting::Hard
                | AblationSetting::HardSoft
                | AblationSetting::RecursiveHardSoft
                | AblationSetting::MixingHardSoft
        )
    }

    pub fn soft_weighting(self) -> bool {
        matches!(
            self,
            AblationSetting::Soft
                | AblationSetting::HardSoft
                | AblationSetting::RecursiveHardSoft
                | AblationSetting::MixingHardSoft
        )
    }

    pub fn recursive(self) -> bool {
        self == AblationSetting::RecursiveHardSoft
    }

    pub fn mixing(self) -> bool {
        self == AblationSetting::MixingHardSoft
    }

    pub fn oracle_labels(self) -> bool {
        self == AblationSetting::FullySupervised
    }
}

/// The complete experiment configuration (flat, documented, hashable).
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    // Dataset.
    pub classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub nuisance: f64,
    pub warp_strength: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    // Episode protocol.
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub pool_per_class: usize,
    pub distractors: usize,
    // Backbone and pre-training.
    pub hidden: usize,
    pub embed: usize,
    pub swn_hidden: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub pretrain_holdout: f64,
    // Inner self-training loop.
    pub draw_per_class: usize,
    pub z: usize,
    pub stages: usize,
    pub t_steps: usize,
    pub m_steps: usize,
    pub alpha: f64,
    // Outer meta-optimization.
    pub beta1: f64,
    pub beta2: f64,
    pub beta_halve_every: usize,
    pub beta_floor: f64,
    pub meta_batch: usize,
    pub meta_iterations: usize,
    pub meta_stages: usize,
    pub meta_grad_mode: MetaGradMode,
    pub eval_interval: usize,
    pub val_episodes: usize,
    // Harness.
    pub test_episodes: usize,
    pub seed: u64,
    pub ablation: AblationSetting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes: 40,
            samples_per_class: 200,
            dim: 16,
            separation: 6.0,
            nuisance: 3.0,
            warp_strength: 0.5,
            train_classes: 20,
            val_classes: 8,
            test_classes: 12,
            way: 5,
            shot: 1,
            query: 15,
            pool_per_class: 100,
            distractors: 3,
            hidden: 64,
            embed: 32,
            swn_hidden: 8,
            pretrain_steps: 1500,
            pretrain_batch: 64,
            pretrain_lr: 0.05,
            pretrain_holdout: 0.2,
            draw_per_class: 30,
            z: 20,
            stages: 6,
            t_steps: 40,
            m_steps: 10,
            alpha: 0.01,
            beta1: 0.001,
            beta2: 0.001,
            beta_halve_every: 1000,
            beta_floor: 0.0001,
            meta_batch: 2,
            meta_iterations: 600,
            meta_stages: 1,
            meta_grad_mode: MetaGradMode::FirstOrder,
            eval_interval: 100,
            val_episodes: 40,
            test_episodes: 300,
            seed: 7,
            ablation: AblationSetting::RecursiveHardSoft,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident: $kind:ident),+ $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),+];

            /// Canonical `key=value` lines, sorted by key.
            pub fn canonical_lines(&self) -> Vec<String> {
                let mut lines = vec![$(format!("{}={}", stringify!($key), render!(self, $key, $kind))),+];
                lines.sort();
                lines
            }

            fn set_key(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => { assign!(self, $key, $kind, value, at); Ok(()) })+
                    _ => Err(Error::Config(format!(
                        "unknown config key '{key}' {at}; known keys: {}",
                        Self::KEYS.join(", ")
                    ))),
                }
            }
        }
    };
}

macro_rules! render {
    ($self:ident, $key:ident, usize) => {
        $self.$key.to_string()
    };
    ($self:ident, $key:ident, u64) => {
        $self.$key.to_string()
    };
    ($self:ident, $key:ident, f64) => {
        format!("{}", $self.$key)
    };
    ($self:ident, $key:ident, mode) => {
        $self.$key.tag().to_string()
    };
    ($self:ident, $key:ident, ablation) => {
        $self.$key.tag().to_string()
    };
}

macro_rules! assign {
    ($self:ident, $key:ident, usize, $value:ident, $at:ident) => {
        $self.$key = $value.parse::<usize>().map_err(|_| {
            Error::Config(format!(
                "config key '{}' expects a nonnegative integer, got '{}' {}",
                stringify!($key),
                $value,
                $at
            ))
        })?
    };
    ($self:ident, $key:ident, u64, $value:ident, $at:ident) => {
        $self.$key = $value.parse::<u64>().map_err(|_| {
            Error::Config(format!(
                "config key '{}' expects a nonnegative integer, got '{}' {}",
                stringify!($key),
                $value,
                $at
            ))
        })?
    };
    ($self:ident, $key:ident, f64, $value:ident, $at:ident) => {
        $self.$key = $value.parse::<f64>().map_err(|_| {
            Error::Config(format!(
                "config key '{}' expects a number, got '{}' {}",
                stringify!($key),
                $value,
                $at
            ))
        })?
    };
    ($self:ident, $key:ident, mode, $value:ident, $at:ident) => {
        $self.$key = MetaGradMode::parse($value)?
    };
    ($self:ident, $key:ident, ablation, $value:ident, $at:ident) => {
        $self.$key = AblationSetting::parse($value)?
    };
}

config_keys! {
    classes: usize,
    samples_per_class: usize,
    dim: usize,
    separation: f64,
    nuisance: f64,
    warp_strength: f64,
    train_classes: usize,
    val_classes: usize,
    test_classes: usize,
    way: usize,
    shot: usize,
    query: usize,
    pool_per_class: usize,
    distractors: usize,
    hidden: usize,
    embed: usize,
    swn_hidden: usize,
    pretrain_steps: usize,
    pretrain_batch: usize,
    pretrain_lr: f64,
    pretrain_holdout: f64,
    draw_per_class: usize,
    z: usize,
    stages: usize,
    t_steps: usize,
    m_steps: usize,
    alpha: f64,
    beta1: f64,
    beta2: f64,
    beta_halve_every: usize,
    beta_floor: f64,
    meta_batch: usize,
    meta_iterations: usize,
    meta_stages: usize,
    meta_grad_mode: mode,
    eval_interval: usize,
    val_episodes: usize,
    test_episodes: usize,
    seed: u64,
    ablation: ablation,
}

impl TrainConfig {
    /// Parse a config file: one `key=value` per line, `#` comments, blank
    /// lines ignored. Keys may appear at most once.
    pub fn from_str_source(text: &str, source: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("({source}:{})", lineno + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected key=value, got '{line}' {at}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "duplicate config key '{key}' {at}"
                )));
            }
            cfg.set_key(key, value, &at)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_source(&text, &path.display().to_string())
    }

    /// Apply `key=value` override strings (e.g. from repeated CLI flags).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, ov) in overrides.iter().enumerate() {
            let at = format!("(override #{})", i + 1);
            let (key, value) = ov.split_once('=').ok_or_else(|| {
                Error::Config(format!("override must be key=value, got '{ov}' {at}"))
            })?;
            self.set_key(key.trim(), value.trim(), &at)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.train_classes + self.val_classes + self.test_classes != self.classes {
            return fail(format!(
                "train_classes + val_classes + test_classes = {} must equal classes = {}",
                self.train_classes + self.val_classes + self.test_classes,
                self.classes
            ));
        }
        if self.way < 2 {
            return fail(format!("way must be at least 2, got {}", self.way));
        }
        if self.shot == 0 || self.query == 0 {
            return fail("shot and query must be positive".into());
        }
        if self.m_steps > self.t_steps {
            return fail(format!(
                "m_steps = {} must not exceed t_steps = {}",
                self.m_steps, self.t_steps
            ));
        }
        if self.z > self.draw_per_class {
            return fail(format!(
                "z = {} must not exceed draw_per_class = {}",
                self.z, self.draw_per_class
            ));
        }
        if self.draw_per_class > self.pool_per_class {
            return fail(format!(
                "draw_per_class = {} must not exceed pool_per_class = {}",
                self.draw_per_class, self.pool_per_class
            ));
        }
        if self.shot + self.query + self.pool_per_class > self.samples_per_class {
            return fail(format!(
                "shot + query + pool_per_class = {} exceeds samples_per_class = {}",
                self.shot + self.query + self.pool_per_class,
                self.samples_per_class
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta_floor", self.beta_floor),
            ("pretrain_lr", self.pretrain_lr),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(format!("{name} must be a positive number, got {v}"));
            }
        }
        if self.stages == 0 || self.meta_stages == 0 {
            return fail("stages and meta_stages must be at least 1".into());
        }
        if self.meta_batch == 0 {
            return fail("meta_batch must be at least 1".into());
        }
        if self.hidden == 0 || self.embed == 0 || self.swn_hidden == 0 {
            return fail("hidden, embed, and swn_hidden must be positive".into());
        }
        if self.separation < 0.0 || !self.separation.is_finite() {
            return fail(format!("separation must be nonnegative, got {}", self.separation));
        }
        if self.nuisance < 0.0 || !self.nuisance.is_finite() {
            return fail(format!("nuisance must be nonnegative, got {}", self.nuisance));
        }
        let need = self.way + self.distractors;
        for (name, have, active) in [
            ("train_classes", self.train_classes, true),
            ("val_classes", self.val_classes, self.val_episodes > 0),
            ("test_classes", self.test_classes, true),
        ] {
            if active && have < need {
                return fail(format!(
                    "{name} = {have} cannot host episodes of way {} with {} distractors",
                    self.way, self.distractors
                ));
            }
        }
        Ok(())
    }

    /// Effective β₁/β₂ at a meta-iteration: halve every `beta_halve_every`
    /// iterations, never below `beta_floor`.
    pub fn betas_at(&self, iteration: usize) -> (f64, f64) {
        let halvings = if self.beta_halve_every == 0 {
            0
        } else {
            iteration / self.beta_halve_every
        };
        let factor = 0.5f64.powi(halvings.min(64) as i32);
        (
            (self.beta1 * factor).max(self.beta_floor),
            (self.beta2 * factor).max(self.beta_floor),
        )
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            dim: self.dim,
            separation: self.separation,
            nuisance: self.nuisance,
            warp_strength: self.warp_strength,
            train_classes: self.train_classes,
            val_classes: self.val_classes,
            test_classes: self.test_classes,
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            way: self.way,
            shot: self.shot,
            query: self.query,
            pool_per_class: self.pool_per_class,
            distractors: self.distractors,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            hidden: self.hidden,
            embed: self.embed,
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            holdout_frac: self.pretrain_holdout,
        }
    }

    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for line in self.canonical_lines() {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// SHA-256 of the canonical rendering; stable under key reordering in the
    /// source file because rendering is sorted.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        hex
    }
}
