//! Three-phase training: object names (O), attributes as extra labels (A),
//! then attribute+object composites (F). Every phase optimizes the same
//! matching loss; only the query sampler changes.

mod checkpoint;
mod optim;

use std::fmt;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ImageRecord;
use crate::image::Image;
use crate::losses::{matching_loss, LossConfig, LossError, LossRecord};
use crate::matching::{Assignment, MatchTarget};
use crate::model::{logit_scale_max, Model, ModelConfig, ModelError, ParamGroup};
use crate::querygen::{
    sample_step_a, sample_step_f, sample_step_o, LabelCandidateSet, Query, QueryBuilder, QueryError, Vocabulary,
};
use crate::tensor::{Array, Graph, Tensor, TensorError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (phase {phase}); batch image ids {image_ids:?}; terms {record:?}")]
    NonFinite {
        step: u64,
        phase: Phase,
        image_ids: Vec<u64>,
        record: LossRecord,
    },
    #[error("checkpoint record `{record}`: {msg}")]
    Checkpoint { record: String, msg: String },
    #[error("checkpoint was written under a different configuration (hash {found}, expected {expected}); pass force to load anyway")]
    HashMismatch { found: String, expected: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    O,
    A,
    F,
}

impl Phase {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        [Phase::O, Phase::A, Phase::F].get(i).copied()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::O => "O",
            Phase::A => "A",
            Phase::F => "F",
        };
        f.write_str(s)
    }
}

/// Which phases run; the removed phase's budget moves to the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScheduleArm {
    /// O, A and F.
    Full,
    /// No Step F: its budget is split evenly over O and A.
    OA,
    /// No Step A: O absorbs it.
    OF,
    /// No Step O: F absorbs it.
    AF,
}

impl ScheduleArm {
    pub const ALL: [ScheduleArm; 4] = [ScheduleArm::Full, ScheduleArm::OA, ScheduleArm::OF, ScheduleArm::AF];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleArm::Full => "O+A+F",
            ScheduleArm::OA => "O+A",
            ScheduleArm::OF => "O+F",
            ScheduleArm::AF => "A+F",
        }
    }

    /// Step counts for this arm given the three-phase budget `(o, a, f)`.
    pub fn steps(self, (o, a, f): (u64, u64, u64)) -> (u64, u64, u64) {
        match self {
            ScheduleArm::Full => (o, a, f),
            ScheduleArm::OA => (o + f / 2, a + f - f / 2, 0),
            ScheduleArm::OF => (o + a, 0, f),
            ScheduleArm::AF => (0, a, f + o),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps_o: u64,
    pub steps_a: u64,
    pub steps_f: u64,
    pub lr_image: f64,
    pub lr_text: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub n_neg: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps_o: 2000,
            steps_a: 2000,
            steps_f: 1000,
            lr_image: 1e-3,
            lr_text: 1e-3,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            n_neg: 8,
            optimizer: OptimizerKind::adam(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule; documented, never run.
    pub fn full_scale_reference() -> Self {
        Self {
            steps_o: 100_000,
            steps_a: 100_000,
            steps_f: 50_000,
            lr_image: 1e-5,
            lr_text: 2e-6,
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn with_arm(&self, arm: ScheduleArm) -> Self {
        let (o, a, f) = arm.steps((self.steps_o, self.steps_a, self.steps_f));
        Self {
            steps_o: o,
            steps_a: a,
            steps_f: f,
            ..self.clone()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_o + self.steps_a + self.steps_f
    }

    /// Phase of the zero-based global step `step`.
    pub fn phase_at(&self, step: u64) -> Phase {
        if step < self.steps_o {
            Phase::O
        } else if step < self.steps_o + self.steps_a {
            Phase::A
        } else {
            Phase::F
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_image >= 0.0 && self.lr_text >= 0.0 && self.lr_image.is_finite() && self.lr_text.is_finite()) {
            return Err(TrainError::Config("learning rates must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(TrainError::Config("grad_clip must be positive".into()));
            }
        }
        let l = &self.loss;
        if !(0.0..=1.0).contains(&l.focal_alpha) || !(l.focal_gamma >= 0.0) {
            return Err(TrainError::Config("focal alpha must lie in [0, 1] and gamma be >= 0".into()));
        }
        Ok(())
    }
}

/// SHA-256 over everything that must match for a checkpoint to be resumed:
/// architecture, vocabulary and optimization settings. Step counts are left
/// out so a run can be extended.
pub fn config_hash(model: &ModelConfig, vocab: &Vocabulary, train: &TrainConfig) -> [u8; 32] {
    let payload = serde_json::json!({
        "model": model,
        "vocab": vocab.tokens(),
        "lr_image": train.lr_image,
        "lr_text": train.lr_text,
        "batch_size": train.batch_size,
        "seed": train.seed,
        "loss": train.loss,
        "n_neg": train.n_neg,
        "optimizer": train.optimizer,
        "grad_clip": train.grad_clip,
    });
    Sha256::digest(payload.to_string().as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training images plus what the samplers need.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub records: &'a [ImageRecord],
    pub candidates: LabelCandidateSet,
    pub builder: QueryBuilder,
}

impl TrainData<'_> {
    pub fn has_attributes(&self) -> bool {
        self.records.iter().flat_map(|r| &r.instances).any(|i| !i.attributes.is_empty())
    }
}

/// One image of a batch with its label space.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub record: &'a ImageRecord,
    pub queries: Vec<Query>,
}

/// Draws the batch of global step `step`. Depends only on the seed, the step
/// index and the data, so a resumed run sees the same batches.
pub fn sample_batch<'a>(data: &TrainData<'a>, cfg: &TrainConfig, step: u64) -> Result<Vec<BatchItem<'a>>> {
    let n = data.records.len();
    if n == 0 {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let idx: Vec<usize> = if cfg.batch_size <= n {
        sample(&mut rng, n, cfg.batch_size).into_vec()
    } else {
        (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect()
    };
    let phase = cfg.phase_at(step);
    idx.into_iter()
        .map(|i| {
            let record = &data.records[i];
            let queries = match phase {
                Phase::O => sample_step_o(record, &data.candidates, cfg.n_neg, &data.builder, &mut rng)?,
                Phase::A => sample_step_a(record, &data.candidates, cfg.n_neg, &data.builder, &mut rng)?,
                Phase::F => sample_step_f(record, &data.candidates, cfg.n_neg, &data.builder, &mut rng)?,
            };
            Ok(BatchItem { record, queries })
        })
        .collect()
}

/// Per-step outcome. Loss terms are batch means of the per-image terms.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: LossRecord,
    pub assignments: Vec<Assignment>,
    pub grad_norm: f64,
}

/// Matching targets of one image: instance `k` is positive for every query
/// whose `positive_for` contains its id.
pub fn match_targets(record: &ImageRecord, queries: &[Query]) -> Vec<MatchTarget> {
    record
        .instances
        .iter()
        .map(|inst| MatchTarget {
            bbox: inst.bbox,
            positive_queries: queries
                .iter()
                .enumerate()
                .filter(|(_, q)| q.positive_for.contains(&inst.id))
                .map(|(i, _)| i)
                .collect(),
        })
        .collect()
}

/// Loss and gradients for a batch, without updating anything.
pub fn batch_gradients(
    model: &Model,
    batch: &[BatchItem<'_>],
    loss_cfg: &LossConfig,
) -> Result<(StepOutcome, Vec<Option<Array>>)> {
    let graph = Graph::new();
    let p = model.params.bind(&graph, true);
    let images: Vec<&Image> = batch.iter().map(|b| &b.record.image).collect();
    let emb = model.encode_images(&p, &images)?;
    let heads = model.heads(&p, &emb)?;

    // Encode each distinct token sequence once per step.
    let mut uniq: Vec<Vec<usize>> = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    for item in batch {
        rows.push(
            item.queries
                .iter()
                .map(|q| match uniq.iter().position(|u| *u == q.token_ids) {
                    Some(i) => i,
                    None => {
                        uniq.push(q.token_ids.clone());
                        uniq.len() - 1
                    }
                })
                .collect(),
        );
    }
    let text = model.encode_texts(&p, &uniq)?;

    let inv = 1.0 / batch.len() as f64;
    let mut terms: Option<(Tensor<'_>, Tensor<'_>, Tensor<'_>)> = None;
    let mut assignments = Vec::with_capacity(batch.len());
    for (b, item) in batch.iter().enumerate() {
        let q = text.gather_rows(&rows[b])?;
        let out = model.output_for(&p, &heads, b, &q)?;
        let loss = matching_loss(&out, &match_targets(item.record, &item.queries), loss_cfg)?;
        assignments.push(loss.assignment.clone());
        let scaled = (loss.l1.scale(inv), loss.giou.scale(inv), loss.focal.scale(inv));
        terms = Some(match terms {
            None => scaled,
            Some((l1, gi, fo)) => (l1.add(&scaled.0)?, gi.add(&scaled.1)?, fo.add(&scaled.2)?),
        });
    }
    let (l1, giou, focal) = terms.ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let total = l1.add(&giou)?.add(&focal)?;
    let record = LossRecord {
        l1: l1.item(),
        giou: giou.item(),
        focal: focal.item(),
        total: total.item(),
    };
    if !record.total.is_finite() {
        return Ok((
            StepOutcome {
                record,
                assignments,
                grad_norm: f64::NAN,
            },
            Vec::new(),
        ));
    }
    total.backward()?;
    let grads = p.tensors().iter().map(|t| t.grad()).collect();
    Ok((
        StepOutcome {
            record,
            assignments,
            grad_norm: 0.0,
        },
        grads,
    ))
}

/// Forward, backward and one optimizer update with per-group learning rates.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepOutcome> {
    let (mut outcome, mut grads) = batch_gradients(model, batch, &cfg.loss)?;
    let r = outcome.record;
    if ![r.l1, r.giou, r.focal, r.total].iter().all(|v| v.is_finite()) {
        return Err(TrainError::NonFinite {
            step,
            phase: cfg.phase_at(step),
            image_ids: batch.iter().map(|b| b.record.id).collect(),
            record: r,
        });
    }
    outcome.grad_norm = match cfg.grad_clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => clip_global_norm(&mut grads, f64::INFINITY),
    };
    let lrs: Vec<f64> = (0..model.params.len())
        .map(|i| match model.params.group(i) {
            ParamGroup::ImageTower => cfg.lr_image,
            ParamGroup::TextTower => cfg.lr_text,
        })
        .collect();
    optimizer.step(model.params.values_mut(), &grads, &lrs);
    if let Some(s) = model.params.get_mut("image.logit_scale") {
        let v = s.data_mut();
        v[0] = v[0].min(logit_scale_max());
    }
    Ok(outcome)
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: LossRecord,
}

pub const LOSS_CSV_HEADER: &str = "step,phase,l1,giou,focal,total";

pub fn write_loss_row<W: Write>(w: &mut W, r: &StepRecord) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{}",
        r.step, r.phase, r.loss.l1, r.loss.giou, r.loss.focal, r.loss.total
    )
}

pub fn write_loss_csv<W: Write>(w: &mut W, records: &[StepRecord]) -> std::io::Result<()> {
    writeln!(w, "{LOSS_CSV_HEADER}")?;
    for r in records {
        write_loss_row(w, r)?;
    }
    Ok(())
}

/// Runs global steps `ckpt.step .. min(total, stop_at)` of the O→A→F
/// schedule, calling `on_step` after each. Phases with zero steps are
/// skipped. Returns the loss records of the executed steps.
pub fn run_schedule(
    ckpt: &mut Checkpoint,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    stop_at: Option<u64>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if (cfg.steps_a > 0 || cfg.steps_f > 0) && !data.has_attributes() {
        return Err(TrainError::Config(
            "steps A and F need attribute annotations, the training data has none".into(),
        ));
    }
    if data.builder.vocab.len() > ckpt.model.config.text_vocab_size {
        return Err(TrainError::Config(format!(
            "vocabulary has {} tokens, model embeds only {}",
            data.builder.vocab.len(),
            ckpt.model.config.text_vocab_size
        )));
    }
    let end = stop_at.map_or(cfg.total_steps(), |s| s.min(cfg.total_steps()));
    let mut out = Vec::new();
    while ckpt.step < end {
        let step = ckpt.step;
        let batch = sample_batch(data, cfg, step)?;
        let outcome = train_step(&mut ckpt.model, &mut ckpt.optimizer, &batch, cfg, step)?;
        let rec = StepRecord {
            step,
            phase: cfg.phase_at(step),
            loss: outcome.record,
        };
        ckpt.step += 1;
        ckpt.phase = rec.phase;
        on_step(&rec);
        out.push(rec);
    }
    Ok(out)
}
