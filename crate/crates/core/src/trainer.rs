//! Joint training of the encoder, clustering head and calibration head.
//!
//! Each batch runs in a fixed order: no-grad calibrated predictions on a weak
//! augmentation drive pseudo-label selection; no-grad embeddings are split
//! into K-means mini-clusters whose mean clustering predictions become the
//! calibration targets; then every sub-batch gets one clustering update
//! (encoder and clustering head) followed by one calibration update
//! (calibration head only).

use std::fmt::Write as _;
use std::ops::Range;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::{calibration_loss, partition_targets, MiniClusterPartition, DEFAULT_W_EN};
use crate::error::{Error, Result};
use crate::heads::{AdamState, EncoderMode, EncoderParams, HeadParams, Mode, DEFAULT_HIDDEN};
use crate::kmeans::{kmeans, DEFAULT_TOL};
use crate::metrics::{evaluate, hungarian_acc, DEFAULT_ECE_BINS};
use crate::numerics::{argmax_rows, l2_normalize_rows, softmax_rows, standard_normal, Matrix, RngState};
use crate::protoinit::{init_head, init_report, InitReport};
use crate::selection::{clu_loss, PseudoLabel, PseudoLabelSet, SelectionRule};

const INIT_STREAM: u64 = 0x1;
const TRAIN_STREAM: u64 = 0x2;
const REPORT_STREAM: u64 = 0x3;
const CAL_INIT_STREAM: u64 = 0x4;
const SHUFFLE_STREAM: u64 = 0x10;
const BATCH_STREAM_BASE: u64 = 0x1000;
const WEAK_STREAM: u64 = 0x20;
const PARTITION_STREAM: u64 = 0x21;
const SUB_STREAM_BASE: u64 = 0x100;

/// Every training knob. `Display` renders the canonical `key = value` text
/// that is hashed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sub_batch: usize,
    pub mini_clusters: usize,
    pub classes: usize,
    pub hidden: usize,
    pub encoder: EncoderMode,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub w_en: f64,
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub drop_strong: f64,
    pub seed: u64,
    pub ece_bins: usize,
    /// Row-normalize features before the encoder.
    pub normalize_inputs: bool,
    /// Orthogonalize prototype weights after initialization.
    pub orthogonalize: bool,
    pub kmeans_iters: usize,
    /// Train only the clustering head; it also drives selection.
    pub single_head: bool,
    /// Random head initialization instead of prototypes.
    pub no_init: bool,
    /// Select by a fixed confidence threshold instead of class budgets.
    pub fixed_threshold: Option<f64>,
    /// Let the calibration gradient reach the encoder.
    pub no_stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1000,
            sub_batch: 256,
            mini_clusters: 100,
            classes: 10,
            hidden: DEFAULT_HIDDEN,
            encoder: EncoderMode::Adapter,
            lr_encoder: 5e-5,
            lr_head: 1e-4,
            w_en: DEFAULT_W_EN,
            sigma_weak: 0.05,
            sigma_strong: 0.2,
            drop_strong: 0.1,
            seed: 0,
            ece_bins: DEFAULT_ECE_BINS,
            normalize_inputs: true,
            orthogonalize: true,
            kmeans_iters: 50,
            single_head: false,
            no_init: false,
            fixed_threshold: None,
            no_stop_gradient: false,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "sub_batch",
    "mini_clusters",
    "classes",
    "hidden",
    "encoder",
    "lr_encoder",
    "lr_head",
    "w_en",
    "sigma_weak",
    "sigma_strong",
    "drop_strong",
    "seed",
    "ece_bins",
    "normalize_inputs",
    "orthogonalize",
    "kmeans_iters",
    "single_head",
    "no_init",
    "fixed_threshold",
    "no_stop_gradient",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Validation(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "sub_batch" => self.sub_batch.to_string(),
            "mini_clusters" => self.mini_clusters.to_string(),
            "classes" => self.classes.to_string(),
            "hidden" => self.hidden.to_string(),
            "encoder" => match self.encoder {
                EncoderMode::Identity => "identity".into(),
                EncoderMode::Adapter => "adapter".into(),
            },
            "lr_encoder" => format!("{:?}", self.lr_encoder),
            "lr_head" => format!("{:?}", self.lr_head),
            "w_en" => format!("{:?}", self.w_en),
            "sigma_weak" => format!("{:?}", self.sigma_weak),
            "sigma_strong" => format!("{:?}", self.sigma_strong),
            "drop_strong" => format!("{:?}", self.drop_strong),
            "seed" => self.seed.to_string(),
            "ece_bins" => self.ece_bins.to_string(),
            "normalize_inputs" => self.normalize_inputs.to_string(),
            "orthogonalize" => self.orthogonalize.to_string(),
            "kmeans_iters" => self.kmeans_iters.to_string(),
            "single_head" => self.single_head.to_string(),
            "no_init" => self.no_init.to_string(),
            "fixed_threshold" => match self.fixed_threshold {
                None => "none".into(),
                Some(t) => format!("{t:?}"),
            },
            "no_stop_gradient" => self.no_stop_gradient.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "sub_batch" => self.sub_batch = parse_value(key, v)?,
            "mini_clusters" => self.mini_clusters = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "encoder" => {
                self.encoder = match v {
                    "identity" => EncoderMode::Identity,
                    "adapter" => EncoderMode::Adapter,
                    _ => {
                        return Err(Error::Validation(format!(
                            "encoder must be identity or adapter, got {v:?}"
                        )))
                    }
                }
            }
            "lr_encoder" => self.lr_encoder = parse_value(key, v)?,
            "lr_head" => self.lr_head = parse_value(key, v)?,
            "w_en" => self.w_en = parse_value(key, v)?,
            "sigma_weak" => self.sigma_weak = parse_value(key, v)?,
            "sigma_strong" => self.sigma_strong = parse_value(key, v)?,
            "drop_strong" => self.drop_strong = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "ece_bins" => self.ece_bins = parse_value(key, v)?,
            "normalize_inputs" => self.normalize_inputs = parse_value(key, v)?,
            "orthogonalize" => self.orthogonalize = parse_value(key, v)?,
            "kmeans_iters" => self.kmeans_iters = parse_value(key, v)?,
            "single_head" => self.single_head = parse_value(key, v)?,
            "no_init" => self.no_init = parse_value(key, v)?,
            "fixed_threshold" => {
                self.fixed_threshold = match v {
                    "none" | "" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "no_stop_gradient" => self.no_stop_gradient = parse_value(key, v)?,
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Validation(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Validation(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Canonical text: every key in a fixed order.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    /// SHA-256 of [`Self::canonical_text`].
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical_text().as_bytes()).into()
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.classes < 2 {
            return bad(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.sub_batch < 2 {
            return bad("sub_batch must be at least 2 for batch norm".into());
        }
        if self.sub_batch > self.batch_size {
            return bad(format!(
                "sub_batch {} exceeds batch_size {}",
                self.sub_batch, self.batch_size
            ));
        }
        if self.batch_size < self.classes {
            return bad(format!(
                "batch_size {} is smaller than classes {}",
                self.batch_size, self.classes
            ));
        }
        if self.mini_clusters == 0 || self.mini_clusters > self.batch_size {
            return bad(format!(
                "mini_clusters must lie in 1..={}, got {}",
                self.batch_size, self.mini_clusters
            ));
        }
        if self.hidden == 0 || self.ece_bins == 0 || self.kmeans_iters == 0 {
            return bad("hidden, ece_bins and kmeans_iters must be positive".into());
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_head", self.lr_head),
            ("w_en", self.w_en),
            ("sigma_weak", self.sigma_weak),
            ("sigma_strong", self.sigma_strong),
            ("drop_strong", self.drop_strong),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.drop_strong >= 1.0 {
            return bad("drop_strong must be below 1".into());
        }
        if let Some(t) = self.fixed_threshold {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("fixed_threshold must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }

    /// Checks the data-dependent preconditions.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if n < self.batch_size {
            return Err(Error::invalid(format!(
                "{n} samples are fewer than batch_size {}",
                self.batch_size
            )));
        }
        if self.hidden > n {
            return Err(Error::invalid(format!(
                "hidden {} exceeds the {n} samples available for prototypes",
                self.hidden
            )));
        }
        Ok(())
    }

    pub fn selection_rule(&self) -> SelectionRule {
        match self.fixed_threshold {
            Some(t) => SelectionRule::FixedThreshold(t),
            None => SelectionRule::Dynamic,
        }
    }

    pub fn final_head(&self) -> HeadKind {
        if self.single_head {
            HeadKind::Clustering
        } else {
            HeadKind::Calibration
        }
    }
}

impl std::fmt::Display for TrainConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Clustering,
    Calibration,
}

/// Feature-space stand-ins for image augmentations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    None,
    /// Additive isotropic Gaussian noise.
    Weak {
        sigma: f64,
    },
    /// Additive Gaussian noise, then inverted dropout with rate `drop`.
    Strong {
        sigma: f64,
        drop: f64,
    },
}

impl Augmentation {
    pub fn weak(cfg: &TrainConfig) -> Self {
        Augmentation::Weak { sigma: cfg.sigma_weak }
    }

    pub fn strong(cfg: &TrainConfig) -> Self {
        Augmentation::Strong {
            sigma: cfg.sigma_strong,
            drop: cfg.drop_strong,
        }
    }
}

pub fn augment(x: &Matrix, kind: Augmentation, rng: &mut RngState) -> Matrix {
    let mut out = x.clone();
    let (sigma, drop) = match kind {
        Augmentation::None => return out,
        Augmentation::Weak { sigma } => (sigma, 0.0),
        Augmentation::Strong { sigma, drop } => (sigma, drop),
    };
    if sigma > 0.0 {
        for v in out.data_mut() {
            *v += sigma * standard_normal(rng);
        }
    }
    if drop > 0.0 {
        let keep = 1.0 / (1.0 - drop);
        for v in out.data_mut() {
            *v = if rng.next_f64() < drop { 0.0 } else { *v * keep };
        }
    }
    out
}

/// Complete training state. Also the persisted checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    /// Root of every training substream.
    pub rng: RngState,
    pub encoder: EncoderParams,
    pub clu: HeadParams,
    pub clu_adam: AdamState,
    pub cal: HeadParams,
    pub cal_adam: AdamState,
    pub enc_adam: AdamState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitOutcome {
    pub checkpoint: Checkpoint,
    /// `None` for random initialization.
    pub alignment_rate: Option<f64>,
    pub orthogonalized: [bool; 2],
    /// Present when labels were supplied.
    pub report: Option<InitReport>,
}

/// Permutes the output units of `head` so its eval-mode predictions on `z`
/// agree with `reference` as often as possible. Both heads are initialized
/// independently, and their cluster orderings are arbitrary; selection reads
/// class `c` of one head as class `c` of the other.
fn align_outputs(reference: &HeadParams, head: &mut HeadParams, z: &Matrix) -> Result<()> {
    let classes = head.w2.rows();
    let want = argmax_rows(&reference.forward(z, Mode::Eval)?.0);
    let have = argmax_rows(&head.forward(z, Mode::Eval)?.0);
    let matched = hungarian_acc(&have, &want)?;
    let mut target: Vec<Option<usize>> = vec![None; classes];
    for &(from, to) in &matched.mapping {
        target[from] = Some(to);
    }
    let mut free = (0..classes).filter(|t| !matched.mapping.iter().any(|m| m.1 == *t));
    let perm: Vec<usize> = target
        .iter()
        .map(|t| t.unwrap_or_else(|| free.next().unwrap()))
        .collect();
    let (w2, b2) = (head.w2.clone(), head.b2.clone());
    for (from, &to) in perm.iter().enumerate() {
        head.w2.row_mut(to).copy_from_slice(w2.row(from));
        head.b2[to] = b2[from];
    }
    Ok(())
}

/// Applies the configured input normalization. Augmentations act on the
/// raw rows before this step.
pub fn prepare_inputs(cfg: &TrainConfig, x: &Matrix) -> Matrix {
    if cfg.normalize_inputs {
        l2_normalize_rows(x).matrix
    } else {
        x.clone()
    }
}

impl Checkpoint {
    pub fn input_dim(&self) -> usize {
        self.clu.input_dim()
    }

    /// Fresh state with both heads initialized from the features.
    pub fn initialize(features: &Matrix, labels: Option<&[usize]>, config: &TrainConfig) -> Result<InitOutcome> {
        config.validate_for(features.rows())?;
        features.require_finite("features")?;
        if let Some(l) = labels {
            crate::dataio::check_companion(features, l)?;
        }
        let d = features.cols();
        let x = prepare_inputs(config, features);
        let encoder = EncoderParams::new(config.encoder, d);
        let z = encoder.forward(&x)?;
        let root = RngState::new(config.seed);
        let build = |rng: RngState| -> Result<(HeadParams, Option<f64>, [bool; 2])> {
            if config.no_init {
                let mut r = rng;
                Ok((
                    HeadParams::random(d, config.hidden, config.classes, &mut r),
                    None,
                    [false; 2],
                ))
            } else {
                let init = init_head(&z, config.hidden, config.classes, rng, config.orthogonalize)?;
                Ok((init.head, Some(init.alignment_rate), init.orthogonalized))
            }
        };
        let (head, alignment_rate, orthogonalized) = build(root.fork(INIT_STREAM))?;
        let (mut cal, _, _) = build(root.fork(CAL_INIT_STREAM))?;
        align_outputs(&head, &mut cal, &z)?;
        let report = match labels {
            Some(l) => Some(init_report(
                &z,
                l,
                &head,
                alignment_rate.unwrap_or(f64::NAN),
                root.fork(REPORT_STREAM),
            )?),
            None => None,
        };
        let checkpoint = Checkpoint {
            config: config.clone(),
            epoch: 0,
            rng: root.fork(TRAIN_STREAM),
            clu_adam: AdamState::for_head(config.lr_head, &head),
            cal_adam: AdamState::for_head(config.lr_head, &head),
            enc_adam: AdamState::new(config.lr_encoder, &encoder.trainable()),
            encoder,
            cal,
            clu: head,
        };
        Ok(InitOutcome {
            checkpoint,
            alignment_rate,
            orthogonalized,
            report,
        })
    }

    /// Structural consistency between the configuration and the tensors.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        self.clu.validate()?;
        self.cal.validate()?;
        let d = self.clu.input_dim();
        let dims = |h: &HeadParams| (h.input_dim(), h.hidden_dim(), h.classes());
        if dims(&self.clu) != (d, cfg.hidden, cfg.classes) || dims(&self.cal) != dims(&self.clu) {
            return Err(Error::Validation("head shapes disagree with the configuration".into()));
        }
        if self.encoder.mode() != cfg.encoder {
            return Err(Error::Validation(
                "encoder mode disagrees with the configuration".into(),
            ));
        }
        if let EncoderParams::Adapter { weight, bias } = &self.encoder {
            if weight.rows() != d || weight.cols() != d || bias.len() != d {
                return Err(Error::Validation("encoder shape disagrees with the heads".into()));
            }
        }
        let check_adam = |a: &AdamState, params: &[&[f64]], what: &str| -> Result<()> {
            let ok = a.first_moment.len() == params.len()
                && a.second_moment.len() == params.len()
                && params.iter().zip(&a.first_moment).all(|(p, m)| p.len() == m.len())
                && params.iter().zip(&a.second_moment).all(|(p, m)| p.len() == m.len());
            if ok {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "{what} optimizer state does not match its parameters"
                )))
            }
        };
        check_adam(&self.clu_adam, &self.clu.trainable(), "clustering")?;
        check_adam(&self.cal_adam, &self.cal.trainable(), "calibration")?;
        check_adam(&self.enc_adam, &self.encoder.trainable(), "encoder")?;
        Ok(())
    }

    pub fn head(&self, kind: HeadKind) -> &HeadParams {
        match kind {
            HeadKind::Clustering => &self.clu,
            HeadKind::Calibration => &self.cal,
        }
    }
}

/// Eval-mode probabilities of the final head (calibration head unless
/// single-head mode).
pub fn predict(ckpt: &Checkpoint, x: &Matrix) -> Result<Matrix> {
    predict_with(ckpt, x, ckpt.config.final_head())
}

pub fn predict_with(ckpt: &Checkpoint, x: &Matrix, kind: HeadKind) -> Result<Matrix> {
    if x.cols() != ckpt.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} columns, model expects {}",
            x.cols(),
            ckpt.input_dim()
        )));
    }
    x.require_finite("features")?;
    let z = ckpt.encoder.forward(&prepare_inputs(&ckpt.config, x))?;
    let (logits, _) = ckpt.head(kind).forward(&z, Mode::Eval)?;
    softmax_rows(&logits)
}

/// Everything computed once per batch and then held fixed across its
/// sub-batch updates.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    /// Batch rows as stored; augmentations act here.
    pub raw: Matrix,
    /// Unaugmented rows after input preparation.
    pub x: Matrix,
    /// Probabilities that drove selection.
    pub selection_probs: Matrix,
    pub selected: PseudoLabelSet,
    /// Clustering predictions on unaugmented inputs; `None` in single-head mode.
    pub p_clu: Option<Matrix>,
    pub partition: Option<MiniClusterPartition>,
}

/// Knobs that only tests and experiments need.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions<'a> {
    /// `N × C` confidences replacing the model's own weak-view predictions
    /// for selection; rows are looked up by dataset index.
    pub external_confidence: Option<&'a Matrix>,
    pub skip_calibration: bool,
}

/// Steps (1) to (5): selection and mini-cluster targets.
pub fn prepare_batch(
    ckpt: &Checkpoint,
    x: &Matrix,
    indices: &[usize],
    rng: &RngState,
    opts: &StepOptions,
) -> Result<PreparedBatch> {
    let cfg = &ckpt.config;
    let b = indices.len();
    if cfg.mini_clusters > b {
        return Err(Error::invalid(format!(
            "mini_clusters {} exceeds the batch size {b}",
            cfg.mini_clusters
        )));
    }
    let raw = x.select_rows(indices);
    let xb = prepare_inputs(cfg, &raw);
    let selection_probs = match opts.external_confidence {
        Some(conf) => {
            if conf.rows() != x.rows() || conf.cols() != cfg.classes {
                return Err(Error::invalid("external confidence has the wrong shape"));
            }
            conf.select_rows(indices)
        }
        None => {
            let weak = augment(&raw, Augmentation::weak(cfg), &mut rng.fork(WEAK_STREAM));
            let weak = prepare_inputs(cfg, &weak);
            let z = ckpt.encoder.forward(&weak)?;
            let (logits, _) = ckpt.head(cfg.final_head()).forward(&z, Mode::Eval)?;
            softmax_rows(&logits)?
        }
    };
    let selected = cfg.selection_rule().select(&selection_probs)?;

    let (p_clu, partition) = if cfg.single_head {
        (None, None)
    } else {
        let z = ckpt.encoder.forward(&xb)?;
        let (logits, _) = ckpt.clu.forward(&z, Mode::Eval)?;
        let p_clu = softmax_rows(&logits)?;
        let km = kmeans(
            &z,
            cfg.mini_clusters,
            rng.fork(PARTITION_STREAM),
            cfg.kmeans_iters,
            DEFAULT_TOL,
        )?;
        let part = partition_targets(&p_clu, &km.assignment, cfg.mini_clusters)?;
        (Some(p_clu), Some(part))
    };
    Ok(PreparedBatch {
        raw,
        x: xb,
        selection_probs,
        selected,
        p_clu,
        partition,
    })
}

fn local_selection(set: &PseudoLabelSet, range: &Range<usize>) -> PseudoLabelSet {
    PseudoLabelSet {
        entries: set
            .entries
            .iter()
            .filter(|e| range.contains(&e.sample))
            .map(|e| PseudoLabel {
                sample: e.sample - range.start,
                ..*e
            })
            .collect(),
        budgets: set.budgets.clone(),
    }
}

fn sub_rows(x: &Matrix, range: &Range<usize>) -> Matrix {
    let idx: Vec<usize> = range.clone().collect();
    x.select_rows(&idx)
}

fn step_encoder(encoder: &mut EncoderParams, adam: &mut AdamState, input: &Matrix, dz: &Matrix) -> Result<()> {
    if let Some(g) = encoder.backward(input, dz)? {
        adam.step(&mut encoder.trainable_mut(), &[g.weight.data(), &g.bias])?;
    }
    Ok(())
}

/// One clustering update on a strongly augmented sub-batch. Returns `None`
/// (and changes nothing) when no selected sample falls in the sub-batch.
#[allow(clippy::too_many_arguments)]
pub fn clustering_update(
    encoder: &mut EncoderParams,
    enc_adam: &mut AdamState,
    clu: &mut HeadParams,
    clu_adam: &mut AdamState,
    cfg: &TrainConfig,
    batch: &PreparedBatch,
    range: Range<usize>,
    rng: &mut RngState,
) -> Result<Option<f64>> {
    let set = local_selection(&batch.selected, &range);
    if set.is_empty() {
        return Ok(None);
    }
    let xs = augment(&sub_rows(&batch.raw, &range), Augmentation::strong(cfg), rng);
    let xs = prepare_inputs(cfg, &xs);
    let z = encoder.forward(&xs)?;
    let (logits, cache) = clu.forward(&z, Mode::Train)?;
    let loss = clu_loss(&logits, &set)?.expect("non-empty selection");
    let grads = clu.backward(&cache, &loss.dlogits)?;
    clu.update_running_stats(&cache);
    clu_adam.step(&mut clu.trainable_mut(), &grads.slices())?;
    step_encoder(encoder, enc_adam, &xs, &grads.input)?;
    Ok(Some(loss.loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationStep {
    pub loss: f64,
    /// Gradient with respect to the embeddings, for the ablation that lets
    /// it reach the encoder.
    pub dz: Matrix,
}

/// One calibration update on an unaugmented sub-batch. The encoder is only
/// borrowed, so this cannot move it.
pub fn calibration_update(
    cal: &mut HeadParams,
    cal_adam: &mut AdamState,
    encoder: &EncoderParams,
    cfg: &TrainConfig,
    batch: &PreparedBatch,
    range: Range<usize>,
) -> Result<CalibrationStep> {
    let part = batch
        .partition
        .as_ref()
        .ok_or_else(|| Error::Internal("calibration update without mini-cluster targets".into()))?;
    let z = encoder.forward(&sub_rows(&batch.x, &range))?;
    let (logits, cache) = cal.forward(&z, Mode::Train)?;
    let loss = calibration_loss(&logits, part, &part.assignment[range], cfg.w_en)?;
    let grads = cal.backward(&cache, &loss.dlogits)?;
    cal.update_running_stats(&cache);
    cal_adam.step(&mut cal.trainable_mut(), &grads.slices())?;
    Ok(CalibrationStep {
        loss: loss.loss,
        dz: grads.input,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub selected: usize,
    /// `None` for skipped sub-batches.
    pub clu_losses: Vec<Option<f64>>,
    pub cal_losses: Vec<f64>,
}

/// One batch iteration over `indices` (rows of the raw features `x`).
pub fn train_step(
    ckpt: &mut Checkpoint,
    x: &Matrix,
    indices: &[usize],
    rng: &RngState,
    opts: &StepOptions,
) -> Result<StepStats> {
    let batch = prepare_batch(ckpt, x, indices, rng, opts)?;
    let cfg = ckpt.config.clone();
    let mut stats = StepStats {
        selected: batch.selected.len(),
        ..Default::default()
    };
    let train_cal = !cfg.single_head && !opts.skip_calibration;
    for s in 0..indices.len() / cfg.sub_batch {
        let range = s * cfg.sub_batch..(s + 1) * cfg.sub_batch;
        let mut sub_rng = rng.fork(SUB_STREAM_BASE + s as u64);
        stats.clu_losses.push(clustering_update(
            &mut ckpt.encoder,
            &mut ckpt.enc_adam,
            &mut ckpt.clu,
            &mut ckpt.clu_adam,
            &cfg,
            &batch,
            range.clone(),
            &mut sub_rng,
        )?);
        if train_cal {
            let step = calibration_update(
                &mut ckpt.cal,
                &mut ckpt.cal_adam,
                &ckpt.encoder,
                &cfg,
                &batch,
                range.clone(),
            )?;
            if cfg.no_stop_gradient {
                let xs = sub_rows(&batch.x, &range);
                step_encoder(&mut ckpt.encoder, &mut ckpt.enc_adam, &xs, &step.dz)?;
            }
            stats.cal_losses.push(step.loss);
        }
    }
    Ok(stats)
}

/// Accuracy and calibration of one head on the training features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub acc: f64,
    pub ece: f64,
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_clu_loss: f64,
    pub mean_cal_loss: f64,
    /// Mean fraction of each batch admitted as pseudo-labels.
    pub selected_fraction: f64,
    pub clu: Option<HeadSummary>,
    pub cal: Option<HeadSummary>,
}

pub fn summarize(ckpt: &Checkpoint, x: &Matrix, labels: &[usize], kind: HeadKind) -> Result<HeadSummary> {
    let r = evaluate(&predict_with(ckpt, x, kind)?, labels, ckpt.config.ece_bins)?;
    Ok(HeadSummary {
        acc: r.acc,
        ece: r.ece,
        nmi: r.nmi,
        ari: r.ari,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One pass over `⌊N/B⌋` shuffled batches of the raw features.
pub fn train_epoch(
    ckpt: &mut Checkpoint,
    features: &Matrix,
    labels: Option<&[usize]>,
    opts: &StepOptions,
) -> Result<EpochLog> {
    let cfg = ckpt.config.clone();
    cfg.validate_for(features.rows())?;
    if features.cols() != ckpt.input_dim() {
        return Err(Error::invalid(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            ckpt.input_dim()
        )));
    }
    let n = features.rows();
    let epoch_rng = ckpt.rng.fork(ckpt.epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng.fork(SHUFFLE_STREAM));
    let mut steps = Vec::new();
    for (bi, idx) in order.chunks_exact(cfg.batch_size).enumerate() {
        let rng = epoch_rng.fork(BATCH_STREAM_BASE + bi as u64);
        steps.push(train_step(ckpt, features, idx, &rng, opts)?);
    }
    ckpt.epoch += 1;
    let (clu, cal) = match labels {
        Some(l) => (
            Some(summarize(ckpt, features, l, HeadKind::Clustering)?),
            (!cfg.single_head)
                .then(|| summarize(ckpt, features, l, HeadKind::Calibration))
                .transpose()?,
        ),
        None => (None, None),
    };
    let log = EpochLog {
        epoch: ckpt.epoch,
        mean_clu_loss: mean(steps.iter().flat_map(|s| s.clu_losses.iter().flatten().copied())),
        mean_cal_loss: mean(steps.iter().flat_map(|s| s.cal_losses.iter().copied())),
        selected_fraction: mean(steps.iter().map(|s| s.selected as f64 / cfg.batch_size as f64)),
        clu,
        cal,
    };
    info!(
        "epoch {}: clu loss {:.4}, cal loss {:.4}, selected {:.3}{}",
        log.epoch,
        log.mean_clu_loss,
        log.mean_cal_loss,
        log.selected_fraction,
        match (&log.cal, &log.clu) {
            (Some(c), _) | (None, Some(c)) => format!(", acc {:.4}, ece {:.4}", c.acc, c.ece),
            _ => String::new(),
        }
    );
    Ok(log)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Continues training until `config.epochs` epochs are done.
pub fn resume(mut ckpt: Checkpoint, features: &Matrix, labels: Option<&[usize]>) -> Result<TrainOutcome> {
    ckpt.validate()?;
    if let Some(l) = labels {
        crate::dataio::check_companion(features, l)?;
    }
    let mut log = Vec::new();
    while ckpt.epoch < ckpt.config.epochs {
        log.push(train_epoch(&mut ckpt, features, labels, &StepOptions::default())?);
    }
    Ok(TrainOutcome { checkpoint: ckpt, log })
}

/// Initializes and trains from scratch.
pub fn train(features: &Matrix, labels: Option<&[usize]>, config: &TrainConfig) -> Result<TrainOutcome> {
    let init = Checkpoint::initialize(features, labels, config)?;
    resume(init.checkpoint, features, labels)
}
