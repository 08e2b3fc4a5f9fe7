//! Set-prediction losses: L1 and GIoU on matched boxes plus sigmoid focal
//! loss over the per-image query logits, combined as `total = l1 + giou + focal`.

use serde::{Deserialize, Serialize};

use crate::matching::{build_cost_matrix, hungarian_assign, Assignment, MatchTarget, MatchWeights, MatchingError};
use crate::model::ModelOutput;
use crate::tensor::{Array, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("invalid focal parameters: alpha={alpha} (must lie in [0,1]), gamma={gamma} (must be >= 0)")]
    FocalConfig { alpha: f64, gamma: f64 },
    #[error("focal targets shape {targets:?} does not match logits {logits:?}")]
    TargetShape { targets: Vec<usize>, logits: Vec<usize> },
    #[error(transparent)]
    Matching(#[from] MatchingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub match_weights: MatchWeights,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            match_weights: MatchWeights::default(),
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// The three loss terms and their sum, all live in the same graph.
#[derive(Debug, Clone)]
pub struct MatchingLossValue<'g> {
    pub l1: Tensor<'g>,
    pub giou: Tensor<'g>,
    pub focal: Tensor<'g>,
    pub total: Tensor<'g>,
    pub assignment: Assignment,
}

/// Plain-number snapshot of a [`MatchingLossValue`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l1: f64,
    pub giou: f64,
    pub focal: f64,
    pub total: f64,
}

impl MatchingLossValue<'_> {
    pub fn record(&self) -> LossRecord {
        LossRecord {
            l1: self.l1.item(),
            giou: self.giou.item(),
            focal: self.focal.item(),
            total: self.total.item(),
        }
    }
}

fn zero<'g>(like: &Tensor<'g>) -> Tensor<'g> {
    like.graph().constant(Array::scalar(0.0))
}

/// Mean over pairs of the summed absolute coordinate differences.
pub fn l1_box_loss<'g>(pred: &Tensor<'g>, target: &Tensor<'g>) -> Result<Tensor<'g>> {
    let m = pred.with_value(|v| v.rows());
    if m == 0 {
        return Ok(zero(pred));
    }
    Ok(pred.sub(target)?.abs().sum().scale(1.0 / m as f64))
}

struct Corners<'g> {
    x0: Tensor<'g>,
    y0: Tensor<'g>,
    x1: Tensor<'g>,
    y1: Tensor<'g>,
    w: Tensor<'g>,
    h: Tensor<'g>,
}

fn corners<'g>(b: &Tensor<'g>) -> Result<Corners<'g>> {
    let cx = b.narrow_cols(0, 1)?;
    let cy = b.narrow_cols(1, 1)?;
    let w = b.narrow_cols(2, 1)?;
    let h = b.narrow_cols(3, 1)?;
    let hw = w.scale(0.5);
    let hh = h.scale(0.5);
    Ok(Corners {
        x0: cx.sub(&hw)?,
        y0: cy.sub(&hh)?,
        x1: cx.add(&hw)?,
        y1: cy.add(&hh)?,
        w,
        h,
    })
}

/// Differentiable GIoU of row-aligned `M×4` center/extent boxes, as `M×1`.
pub fn giou_rows<'g>(pred: &Tensor<'g>, target: &Tensor<'g>) -> Result<Tensor<'g>> {
    let p = corners(pred)?;
    let t = corners(target)?;
    let iw = p.x1.minimum(&t.x1)?.sub(&p.x0.maximum(&t.x0)?)?.relu();
    let ih = p.y1.minimum(&t.y1)?.sub(&p.y0.maximum(&t.y0)?)?.relu();
    let inter = iw.mul(&ih)?;
    let union = p.w.mul(&p.h)?.add(&t.w.mul(&t.h)?)?.sub(&inter)?;
    let iou = inter.div(&union)?;
    let ew = p.x1.maximum(&t.x1)?.sub(&p.x0.minimum(&t.x0)?)?;
    let eh = p.y1.maximum(&t.y1)?.sub(&p.y0.minimum(&t.y0)?)?;
    let enclosing = ew.mul(&eh)?;
    let penalty = enclosing.sub(&union)?.div(&enclosing)?;
    Ok(iou.sub(&penalty)?)
}

/// Mean over pairs of `1 - GIoU`.
pub fn giou_box_loss<'g>(pred: &Tensor<'g>, target: &Tensor<'g>) -> Result<Tensor<'g>> {
    let m = pred.with_value(|v| v.rows());
    if m == 0 {
        return Ok(zero(pred));
    }
    Ok(giou_rows(pred, target)?.mean()?.neg().add_scalar(1.0))
}

/// Sigmoid focal loss summed over all cells and divided by the number of
/// matched proposals (rows holding at least one positive), at least 1.
pub fn focal_loss<'g>(logits: &Tensor<'g>, targets: &Array, alpha: f64, gamma: f64) -> Result<Tensor<'g>> {
    if !(0.0..=1.0).contains(&alpha) || gamma < 0.0 || !gamma.is_finite() {
        return Err(LossError::FocalConfig { alpha, gamma });
    }
    let shape = logits.shape();
    if targets.shape() != shape.as_slice() {
        return Err(LossError::TargetShape {
            targets: targets.shape().to_vec(),
            logits: shape,
        });
    }
    if targets.is_empty() {
        return Ok(zero(logits));
    }
    let q = targets.cols();
    let matched = targets
        .data()
        .chunks(q)
        .filter(|r| r.iter().any(|&t| t > 0.5))
        .count()
        .max(1);

    let graph = logits.graph();
    let pos_w = Array::new(shape.clone(), targets.data().iter().map(|t| -alpha * t).collect())?;
    let neg_w = Array::new(shape, targets.data().iter().map(|t| -(1.0 - alpha) * (1.0 - t)).collect())?;
    let neg_logits = logits.neg();
    // positive cells: -α (1-p)^γ ln p ; negative cells: -(1-α) p^γ ln(1-p)
    let pos = neg_logits.sigmoid().powf(gamma).mul(&logits.log_sigmoid())?;
    let neg = logits.sigmoid().powf(gamma).mul(&neg_logits.log_sigmoid())?;
    let cells = pos
        .mul(&graph.constant(pos_w))?
        .add(&neg.mul(&graph.constant(neg_w))?)?;
    Ok(cells.sum().scale(1.0 / matched as f64))
}

/// Matches proposals to targets on detached values, then evaluates the three
/// loss terms under that assignment. Unmatched proposals are all-negative rows.
pub fn matching_loss<'g>(
    output: &ModelOutput<'g>,
    targets: &[MatchTarget],
    cfg: &LossConfig,
) -> Result<MatchingLossValue<'g>> {
    let boxes = output.boxes.value();
    let logits = output.logits.value();
    let cost = build_cost_matrix(&boxes, &logits, targets, cfg.match_weights)?;
    let assignment = hungarian_assign(&cost);

    let graph = output.boxes.graph();
    let pred_idx: Vec<usize> = assignment.pairs.iter().map(|&(p, _)| p).collect();
    let (l1, giou) = if pred_idx.is_empty() {
        (zero(&output.boxes), zero(&output.boxes))
    } else {
        let pred = output.boxes.gather_rows(&pred_idx)?;
        let tgt_rows: Vec<[f64; 4]> = assignment
            .pairs
            .iter()
            .map(|&(_, t)| targets[t].bbox.to_array())
            .collect();
        let tgt = graph.constant(Array::from_rows(&tgt_rows)?);
        (l1_box_loss(&pred, &tgt)?, giou_box_loss(&pred, &tgt)?)
    };

    let (p, q) = (logits.rows(), logits.cols());
    let mut cls_targets = Array::zeros(&[p, q]);
    for &(i, t) in &assignment.pairs {
        for &k in &targets[t].positive_queries {
            cls_targets.data_mut()[i * q + k] = 1.0;
        }
    }
    let focal = focal_loss(&output.logits, &cls_targets, cfg.focal_alpha, cfg.focal_gamma)?;
    let total = l1.add(&giou)?.add(&focal)?;
    Ok(MatchingLossValue {
        l1,
        giou,
        focal,
        total,
        assignment,
    })
}
