//! Forward evaluation of the paired-box detection objective: a focal
//! classification term on fused scores, L1 regression and a paired GIoU term,
//! after Hungarian matching.

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::denoiser::{Candidate, GtPair};
use crate::error::Result;
use crate::geometry::{giou3d, BBox};

const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            reg: 5.0,
            giou: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

/// Binary focal loss; `p` is clamped away from 0 and 1.
pub fn focal_loss(p: f64, positive: bool, fp: &FocalParams) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -fp.alpha * (1.0 - p).powf(fp.gamma) * p.ln()
    } else {
        -(1.0 - fp.alpha) * p.powf(fp.gamma) * (1.0 - p).ln()
    }
}

/// Per-frame class score fused with the association score, `sqrt(C * S)`.
pub fn fused_scores(c: &Candidate) -> [f64; 2] {
    [
        (c.cls_prev * c.assoc).max(0.0).sqrt(),
        (c.cls_cur * c.assoc).max(0.0).sqrt(),
    ]
}

fn normalized_l1(a: &BBox, b: &BBox, (w, h): (f64, f64)) -> f64 {
    (a.cx - b.cx).abs() / w + (a.cy - b.cy).abs() / h + (a.w - b.w).abs() / w + (a.h - b.h).abs() / h
}

/// Regression over the frames where the object is present.
fn regression(pred: &Candidate, gt: &GtPair, image: (f64, f64)) -> f64 {
    let mut r = 0.0;
    if gt.present_prev {
        r += normalized_l1(&pred.pair.prev, &gt.pair.prev, image);
    }
    if gt.present_cur {
        r += normalized_l1(&pred.pair.cur, &gt.pair.cur, image);
    }
    r
}

fn classification(pred: &Candidate, labels: [bool; 2], fp: &FocalParams) -> f64 {
    fused_scores(pred)
        .iter()
        .zip(labels)
        .map(|(p, y)| focal_loss(*p, y, fp))
        .sum()
}

/// Matching cost between a prediction and a labeled pair, built from the
/// same three terms as the loss. Lower is better.
pub fn match_cost(pred: &Candidate, gt: &GtPair, image: (f64, f64), w: &LossWeights, fp: &FocalParams) -> f64 {
    w.cls * classification(pred, [gt.present_prev, gt.present_cur], fp)
        + w.reg * regression(pred, gt, image)
        + w.giou * (1.0 - giou3d(&pred.pair, &gt.pair))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub reg: f64,
    pub giou_term: f64,
    pub total: f64,
    pub n_pos: usize,
}

/// Sums in ascending order so the result does not depend on input order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Matches predictions to ground truth and sums the loss terms.
///
/// Unmatched predictions add a background focal term on both frames. The
/// total is normalized by the match count, clamped to at least 1.
pub fn detection_loss(
    preds: &[Candidate],
    gts: &[GtPair],
    image: (f64, f64),
    w: &LossWeights,
    fp: &FocalParams,
) -> Result<LossBreakdown> {
    let cost: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| match_cost(p, g, image, w, fp)).collect())
        .collect();
    let matches = if gts.is_empty() || preds.is_empty() {
        Default::default()
    } else {
        hungarian(&cost)?
    };
    let mut cls = vec![];
    let mut reg = vec![];
    let mut giou_term = vec![];
    let mut matched = vec![false; preds.len()];
    for &(i, j) in &matches.pairs {
        matched[i] = true;
        let (p, g) = (&preds[i], &gts[j]);
        cls.push(classification(p, [g.present_prev, g.present_cur], fp));
        reg.push(regression(p, g, image));
        giou_term.push(1.0 - giou3d(&p.pair, &g.pair));
    }
    for (p, _) in preds.iter().zip(&matched).filter(|(_, m)| !**m) {
        cls.push(classification(p, [false, false], fp));
    }
    let mut out = LossBreakdown {
        cls: sorted_sum(cls),
        reg: sorted_sum(reg),
        giou_term: sorted_sum(giou_term),
        ..Default::default()
    };
    out.n_pos = matches.pairs.len();
    out.total = (w.cls * out.cls + w.reg * out.reg + w.giou * out.giou_term) / out.n_pos.max(1) as f64;
    Ok(out)
}
