//! The denoiser interface and its concrete implementations.
//!
//! A denoiser maps noisy signal-space rows to clean-row predictions plus
//! per-frame class scores and an association score. No trained network is
//! bundled: [`OracleDenoiser`] snaps toward ground truth, [`DetectionSnapDenoiser`]
//! snaps toward detections read from disk, and [`stf`] holds a fixed-weight
//! reference of the feature fusion and association head used for shape tests.

pub mod stf;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Row, SignalSpace};
use crate::error::{Error, Result};
use crate::geometry::{iou, iou3d, BBox, Detection, PairedBox};

/// One clean-row prediction in signal space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub z0: Row,
    pub cls_prev: f64,
    pub cls_cur: f64,
    pub assoc: f64,
}

/// A refined pixel-space pair with its scores. `slot` is the proposal row
/// the candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub slot: usize,
    pub pair: PairedBox,
    pub cls_prev: f64,
    pub cls_cur: f64,
    pub assoc: f64,
}

/// A ground-truth pair. An object missing from one frame carries the box
/// from the other frame with the matching `present_*` flag cleared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPair {
    pub id: u64,
    pub pair: PairedBox,
    pub present_prev: bool,
    pub present_cur: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum Evidence {
    #[default]
    None,
    GroundTruth(Vec<GtPair>),
    Detections {
        prev: Vec<Detection>,
        cur: Vec<Detection>,
    },
}

/// How rows are denoised. `PrevPinned` keeps the previous-frame slot as given
/// and only refines the current-frame slot, which is the conditional baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DenoiseMode {
    #[default]
    Joint,
    PrevPinned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameContext {
    pub prev_frame: u32,
    pub cur_frame: u32,
    pub space: SignalSpace,
    pub evidence: Evidence,
    pub mode: DenoiseMode,
}

impl FrameContext {
    /// Frames must be adjacent, or equal for detection mode.
    pub fn new(prev_frame: u32, cur_frame: u32, space: SignalSpace, evidence: Evidence) -> Result<Self> {
        if prev_frame != cur_frame && prev_frame.checked_add(1) != Some(cur_frame) {
            return Err(Error::InvalidArgument(format!(
                "frames {prev_frame} and {cur_frame} are not adjacent"
            )));
        }
        Ok(Self {
            prev_frame,
            cur_frame,
            space,
            evidence,
            mode: DenoiseMode::Joint,
        })
    }

    pub fn with_mode(mut self, mode: DenoiseMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn is_detection_mode(&self) -> bool {
        self.prev_frame == self.cur_frame
    }

    pub fn image_size(&self) -> (f64, f64) {
        (self.space.width, self.space.height)
    }
}

pub trait Denoiser: Send + Sync {
    /// One prediction per input row, in order.
    fn denoise(&self, z: &[Row], step: usize, ctx: &FrameContext) -> Result<Vec<Prediction>>;
}

/// Returns its input unchanged with every score at 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, z: &[Row], _step: usize, _ctx: &FrameContext) -> Result<Vec<Prediction>> {
        Ok(z.iter()
            .map(|r| Prediction {
                z0: *r,
                cls_prev: 1.0,
                cls_cur: 1.0,
                assoc: 1.0,
            })
            .collect())
    }
}

/// Knobs of the oracle's score model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Blend weight toward the snapped ground truth.
    pub fidelity: f64,
    /// Rows whose best iou3d is below this, with no center inside any
    /// ground-truth box, are treated as far from every object. Zero disables
    /// the rule, so every row snaps to its nearest object.
    pub far_floor: f64,
    /// Association score given to far rows; sits below the confidence gate.
    pub far_score: f64,
    /// Score multiplier when the snapped object is missing from a frame.
    pub absent_factor: f64,
    /// Share of each score that tracks the overlap between the emitted box
    /// and its target: `score = fidelity * ((1 - w) + w * overlap)`.
    pub quality_weight: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fidelity: 1.0,
            far_floor: 0.0,
            far_score: 0.05,
            absent_factor: 0.25,
            quality_weight: 0.55,
        }
    }
}

impl OracleConfig {
    pub fn with_fidelity(fidelity: f64) -> Self {
        Self {
            fidelity,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("fidelity", self.fidelity),
            ("far_floor", self.far_floor),
            ("far_score", self.far_score),
            ("absent_factor", self.absent_factor),
            ("quality_weight", self.quality_weight),
        ];
        for (name, v) in ratios {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("oracle {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Ground-truth driven stand-in for a trained denoising head.
///
/// Deterministic: the output depends only on the rows and the context.
#[derive(Debug, Clone, Copy)]
pub struct OracleDenoiser {
    cfg: OracleConfig,
}

impl OracleDenoiser {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    fn quality(&self, overlap: f64) -> f64 {
        self.cfg.fidelity * ((1.0 - self.cfg.quality_weight) + self.cfg.quality_weight * overlap)
    }

    fn presence(&self, present: bool) -> f64 {
        if present {
            1.0
        } else {
            self.cfg.absent_factor
        }
    }

    fn blend(&self, target: &[f64], input: &[f64], out: &mut [f64]) {
        let f = self.cfg.fidelity;
        for k in 0..out.len() {
            out[k] = f * target[k] + (1.0 - f) * input[k];
        }
    }

    fn far_prediction(&self, row: &Row) -> Prediction {
        Prediction {
            z0: *row,
            cls_prev: 0.0,
            cls_cur: 0.0,
            assoc: self.cfg.far_score,
        }
    }

    fn joint(&self, row: &Row, gts: &[GtPair], space: &SignalSpace) -> Prediction {
        let input = space.decode(row);
        let (g, best) = nearest(gts, |g| iou3d(&input, &g.pair), |g| {
            input.prev.center_distance(&g.pair.prev) + input.cur.center_distance(&g.pair.cur)
        });
        let far = best < self.cfg.far_floor
            && !gts.iter().any(|g| {
                (g.present_prev && g.pair.prev.contains_point(input.prev.cx, input.prev.cy))
                    || (g.present_cur && g.pair.cur.contains_point(input.cur.cx, input.cur.cy))
            });

        let mut z0 = [0.0; 8];
        self.blend(&space.encode(&g.pair), row, &mut z0);
        let emitted = space.decode(&z0);
        let both = g.present_prev && g.present_cur;
        let mut assoc = self.quality(iou3d(&emitted, &g.pair)) * self.presence(both);
        if far {
            assoc = assoc.min(self.cfg.far_score);
        }
        Prediction {
            z0,
            cls_prev: self.quality(iou(&emitted.prev, &g.pair.prev)) * self.presence(g.present_prev),
            cls_cur: self.quality(iou(&emitted.cur, &g.pair.cur)) * self.presence(g.present_cur),
            assoc,
        }
    }

    fn prev_pinned(&self, row: &Row, gts: &[GtPair], space: &SignalSpace) -> Prediction {
        let input = space.decode(row);
        let visible: Vec<GtPair> = gts.iter().filter(|g| g.present_cur).copied().collect();
        if visible.is_empty() {
            return self.far_prediction(row);
        }
        let (g, best) = nearest(&visible, |g| iou(&input.cur, &g.pair.cur), |g| {
            input.cur.center_distance(&g.pair.cur)
        });
        let far = best < self.cfg.far_floor
            && !visible.iter().any(|g| g.pair.cur.contains_point(input.cur.cx, input.cur.cy));

        let mut z0 = *row;
        self.blend(&space.encode_box(&g.pair.cur), &row[4..], &mut z0[4..]);
        let emitted = space.decode(&z0);
        let score = self.quality(iou(&emitted.cur, &g.pair.cur));
        Prediction {
            z0,
            cls_prev: score,
            cls_cur: score,
            assoc: if far { score.min(self.cfg.far_score) } else { score },
        }
    }
}

/// The entry maximizing `overlap` (ties to the lower id); when every overlap
/// is zero, the entry minimizing `distance` instead. Returns the entry and
/// its overlap. `items` must be non-empty.
fn nearest(items: &[GtPair], overlap: impl Fn(&GtPair) -> f64, distance: impl Fn(&GtPair) -> f64) -> (GtPair, f64) {
    let mut order: Vec<&GtPair> = items.iter().collect();
    order.sort_by_key(|g| g.id);
    let mut best = order[0];
    let mut best_overlap = overlap(best);
    for g in &order[1..] {
        let o = overlap(g);
        if o > best_overlap {
            best = g;
            best_overlap = o;
        }
    }
    if best_overlap > 0.0 {
        return (*best, best_overlap);
    }
    let mut best_d = distance(order[0]);
    best = order[0];
    for g in &order[1..] {
        let d = distance(g);
        if d < best_d {
            best = g;
            best_d = d;
        }
    }
    (*best, 0.0)
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, z: &[Row], _step: usize, ctx: &FrameContext) -> Result<Vec<Prediction>> {
        let Evidence::GroundTruth(gts) = &ctx.evidence else {
            return Err(Error::Denoiser("oracle needs ground truth in the frame context".into()));
        };
        let space = &ctx.space;
        Ok(z.iter()
            .map(|row| {
                let row = space.clamp(row);
                if gts.is_empty() {
                    return self.far_prediction(&row);
                }
                match ctx.mode {
                    DenoiseMode::Joint => self.joint(&row, gts, space),
                    DenoiseMode::PrevPinned => self.prev_pinned(&row, gts, space),
                }
            })
            .collect())
    }
}

/// Snaps each slot to a detection of its own frame.
#[derive(Debug, Clone, Copy)]
pub struct DetectionSnapDenoiser {
    /// Weight of the box-consistency term in the association score; the rest
    /// goes to the weaker of the two confidences.
    pub consistency_weight: f64,
}

impl Default for DetectionSnapDenoiser {
    fn default() -> Self {
        Self {
            consistency_weight: 0.5,
        }
    }
}

/// Highest-IoU detection (ties by confidence, then index); nearest center
/// when nothing overlaps.
fn snap(b: &BBox, dets: &[Detection]) -> usize {
    let mut best = 0;
    let mut best_iou = iou(b, &dets[0].bbox);
    for (i, d) in dets.iter().enumerate().skip(1) {
        let o = iou(b, &d.bbox);
        if o > best_iou || (o == best_iou && d.conf > dets[best].conf) {
            best = i;
            best_iou = o;
        }
    }
    if best_iou > 0.0 {
        return best;
    }
    let mut best_d = b.center_distance(&dets[0].bbox);
    best = 0;
    for (i, d) in dets.iter().enumerate().skip(1) {
        let dist = b.center_distance(&d.bbox);
        if dist < best_d || (dist == best_d && d.conf > dets[best].conf) {
            best = i;
            best_d = dist;
        }
    }
    best
}

impl DetectionSnapDenoiser {
    /// Association score of a detection pairing.
    pub fn consistency(&self, prev: &Detection, cur: &Detection) -> f64 {
        let w = self.consistency_weight;
        w * iou(&prev.bbox, &cur.bbox) + (1.0 - w) * prev.conf.min(cur.conf)
    }
}

impl Denoiser for DetectionSnapDenoiser {
    fn denoise(&self, z: &[Row], _step: usize, ctx: &FrameContext) -> Result<Vec<Prediction>> {
        let Evidence::Detections { prev, cur } = &ctx.evidence else {
            return Err(Error::Denoiser("detection snapping needs detections in the frame context".into()));
        };
        let space = &ctx.space;
        Ok(z.iter()
            .map(|row| {
                let row = space.clamp(row);
                if prev.is_empty() || cur.is_empty() {
                    return Prediction {
                        z0: row,
                        cls_prev: 0.0,
                        cls_cur: 0.0,
                        assoc: 0.0,
                    };
                }
                let input = space.decode(&row);
                let dp = &prev[snap(&input.prev, prev)];
                let dc = &cur[snap(&input.cur, cur)];
                Prediction {
                    z0: space.encode(&PairedBox::new(dp.bbox, dc.bbox)),
                    cls_prev: dp.conf.clamp(0.0, 1.0),
                    cls_cur: dc.conf.clamp(0.0, 1.0),
                    assoc: self.consistency(dp, dc).clamp(0.0, 1.0),
                }
            })
            .collect())
    }
}
