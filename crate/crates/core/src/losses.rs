//! Quality focal loss, its two-target extension, and the cost-aware box
//! regression loss. Every loss exposes an analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_grad, l1_grad, BBox};
use crate::network::tape::Tensor;

/// Scores are clamped to `[SCORE_EPS, 1 - SCORE_EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Loss hyperparameters shared by every supervised term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Focusing exponent of QFL.
    pub gamma: f64,
    pub qfl: f64,
    pub l1: f64,
    pub giou: f64,
    /// Down-weight for the higher-cost query of a GT regressed twice.
    pub w_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gamma: 2.0, qfl: 1.0, l1: 5.0, giou: 2.0, w_d: 0.51 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionRole {
    LowerCost,
    HigherCost,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassTarget {
    pub class_index: usize,
    pub iou_target: f64,
}

/// Up to two class targets for one query; the classes always differ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultiTarget {
    primary: ClassTarget,
    secondary: Option<ClassTarget>,
}

impl MultiTarget {
    pub fn single(primary: ClassTarget) -> Self {
        Self { primary, secondary: None }
    }

    /// Returns `None` when both targets name the same class; that case is a
    /// single target by definition.
    pub fn pair(primary: ClassTarget, secondary: ClassTarget) -> Option<Self> {
        (primary.class_index != secondary.class_index).then_some(Self {
            primary,
            secondary: Some(secondary),
        })
    }

    pub fn primary(&self) -> ClassTarget {
        self.primary
    }

    pub fn secondary(&self) -> Option<ClassTarget> {
        self.secondary
    }

    pub fn targets(&self) -> impl Iterator<Item = ClassTarget> + '_ {
        std::iter::once(self.primary).chain(self.secondary)
    }

    /// Dense label vector: IoU targets at the named classes, zero elsewhere.
    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        for t in self.targets() {
            v[t.class_index] = t.iou_target;
        }
        v
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

fn check_target(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::TargetOutOfRange(t))
    }
}

/// `-|t - s|^gamma * ((1 - t) log(1 - s) + t log s)`.
pub fn qfl(s: f64, t: f64, gamma: f64) -> Result<f64> {
    qfl_grad(s, t, gamma).map(|(v, _)| v)
}

/// QFL value and its derivative with respect to the score `s`.
pub fn qfl_grad(s: f64, t: f64, gamma: f64) -> Result<(f64, f64)> {
    check_target(t)?;
    let s = clamp_score(s);
    let diff = (t - s).abs();
    let modulator = diff.powf(gamma);
    let ce = (1.0 - t) * (1.0 - s).ln() + t * s.ln();
    let value = -modulator * ce;
    let d_mod = if diff > 0.0 {
        gamma * diff.powf(gamma - 1.0) * (s - t).signum()
    } else {
        0.0
    };
    let d_ce = -(1.0 - t) / (1.0 - s) + t / s;
    Ok((value, -(d_mod * ce + modulator * d_ce)))
}

/// QFL evaluated on a logit; returns the value and `dL/dlogit`.
pub fn qfl_logit_grad(logit: f64, t: f64, gamma: f64) -> Result<(f64, f64)> {
    let s = sigmoid(logit);
    let (v, ds) = qfl_grad(s, t, gamma)?;
    Ok((v, ds * s * (1.0 - s)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One QFL term per named class; two when the targets disagree in class.
pub fn multi_target_qfl(scores: &[f64], targets: &MultiTarget, gamma: f64) -> Result<f64> {
    targets
        .targets()
        .map(|t| qfl(scores[t.class_index], t.iou_target, gamma))
        .sum()
}

/// QFL against `t = 0` summed over every class.
pub fn background_qfl(scores: &[f64], gamma: f64) -> f64 {
    scores
        .iter()
        .map(|&s| qfl(s, 0.0, gamma).expect("zero target is in range"))
        .sum()
}

/// `sum_c QFL(sigmoid(logit_c), label_c)` and its gradient w.r.t. the logits.
pub fn soft_label_qfl(logits: &[f64], labels: &[f64], gamma: f64) -> Result<(f64, Vec<f64>)> {
    debug_assert_eq!(logits.len(), labels.len());
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&x, &y) in logits.iter().zip(labels) {
        let (v, g) = qfl_logit_grad(x, y, gamma)?;
        total += v;
        grad.push(g);
    }
    Ok((total, grad))
}

/// `lambda_l1 * L1 + lambda_giou * (1 - GIoU)`, scaled by `w_d` for the
/// higher-cost query of a GT.
pub fn regression_loss(b: BBox, gt: BBox, role: RegressionRole, w: &LossWeights) -> f64 {
    regression_loss_grad(b, gt, role, w).0
}

pub fn regression_loss_grad(
    b: BBox,
    gt: BBox,
    role: RegressionRole,
    w: &LossWeights,
) -> (f64, [f64; 4]) {
    let scale = match role {
        RegressionRole::LowerCost => 1.0,
        RegressionRole::HigherCost => w.w_d,
    };
    weighted_box_loss_grad(b, gt, scale, w)
}

/// `scale * (lambda_l1 * L1 + lambda_giou * (1 - GIoU))` with gradient w.r.t. `b`.
pub fn weighted_box_loss_grad(b: BBox, gt: BBox, scale: f64, w: &LossWeights) -> (f64, [f64; 4]) {
    let (l1, gl) = l1_grad(b, gt);
    let (g, gg) = giou_grad(b, gt);
    let base = w.l1 * l1 + w.giou * (1.0 - g);
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = scale * (w.l1 * gl[k] - w.giou * gg[k]);
    }
    (scale * base, grad)
}

/// Supervision for one prediction row with every decision already made:
/// a dense QFL label vector and an optional weighted box target.
#[derive(Clone, Debug, PartialEq)]
pub struct RowTarget {
    pub labels: Vec<f64>,
    pub cls_scale: f64,
    pub reg: Option<(BBox, f64)>,
}

impl RowTarget {
    pub fn background(num_classes: usize) -> Self {
        Self { labels: vec![0.0; num_classes], cls_scale: 1.0, reg: None }
    }
}

/// Classification and regression sums over a head, with gradients w.r.t.
/// the logit tensor and the box tensor (`[cx, cy, w, h]` per row).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLoss {
    pub cls: f64,
    pub reg: f64,
    pub d_logits: Tensor,
    pub d_boxes: Tensor,
}

pub fn head_loss(logits: &Tensor, boxes: &Tensor, rows: &[RowTarget], w: &LossWeights) -> Result<HeadLoss> {
    assert_eq!(logits.rows, rows.len(), "one target per prediction row");
    let mut out = HeadLoss {
        cls: 0.0,
        reg: 0.0,
        d_logits: Tensor::zeros(logits.rows, logits.cols),
        d_boxes: Tensor::zeros(boxes.rows, boxes.cols),
    };
    for (i, row) in rows.iter().enumerate() {
        let k = w.qfl * row.cls_scale;
        if k != 0.0 {
            let (v, g) = soft_label_qfl(logits.row(i), &row.labels, w.gamma)?;
            out.cls += k * v;
            for (d, gi) in out.d_logits.row_mut(i).iter_mut().zip(g) {
                *d = k * gi;
            }
        }
        if let Some((target, scale)) = row.reg {
            let b = boxes.row(i);
            let (v, g) = weighted_box_loss_grad(BBox::new(b[0], b[1], b[2], b[3]), target, scale, w);
            out.reg += v;
            out.d_boxes.row_mut(i).copy_from_slice(&g);
        }
    }
    Ok(out)
}
