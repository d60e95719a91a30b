//! Track lifecycle: splitting refined candidates into association pairs and
//! new detections, IoU association, duplicate filtering, Kalman prediction and
//! reassociation of lost tracks, and track initialization.

pub mod greedy;
pub mod kalman;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::denoiser::Candidate;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use kalman::{KalmanFilter, KalmanState};

/// Cost offset per unit score; breaks IoU ties toward the higher-scored entry.
const SCORE_TIE_BREAK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Candidates need an association score above this.
    pub conf_thresh: f64,
    /// Candidates need a current-frame class score above this.
    pub det_thresh: f64,
    pub nms3d_thresh: f64,
    pub nms2d_thresh: f64,
    /// Proposal slots below this index are association slots.
    pub assoc_slots: usize,
    /// New tracks need a current-frame score above this.
    pub init_thresh: f64,
    pub max_lost_age: u32,
    pub iou_match_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            det_thresh: 0.7,
            nms3d_thresh: 0.6,
            nms2d_thresh: 0.7,
            assoc_slots: 0,
            init_thresh: 0.7,
            max_lost_age: 30,
            iou_match_threshold: 0.3,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("conf_thresh", self.conf_thresh),
            ("det_thresh", self.det_thresh),
            ("nms3d_thresh", self.nms3d_thresh),
            ("nms2d_thresh", self.nms2d_thresh),
            ("init_thresh", self.init_thresh),
            ("iou_match_threshold", self.iou_match_threshold),
        ];
        for (name, v) in ratios {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("tracker {name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Activated,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub status: TrackStatus,
    pub last_box: BBox,
    pub history: Vec<(u32, BBox)>,
    pub kalman: KalmanState,
    pub lost_age: u32,
    pub score: f64,
}

/// One output row: an identity and its box in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedBox {
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// Per-frame tracker output keyed by 0-based frame index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackingResult {
    pub frames: BTreeMap<u32, Vec<TrackedBox>>,
}

impl TrackingResult {
    pub fn push(&mut self, frame: u32, rows: Vec<TrackedBox>) {
        self.frames.insert(frame, rows);
    }

    pub fn frame(&self, k: u32) -> &[TrackedBox] {
        self.frames.get(&k).map_or(&[], Vec::as_slice)
    }

    pub fn num_rows(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.frames.values().flatten().map(|r| r.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// An association-slot candidate: the same object in both frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationPair {
    pub prev: BBox,
    pub cur: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub pairs: Vec<AssociationPair>,
    pub new: Vec<Candidate>,
}

/// Routes candidates above the association gate: slots below `assoc_slots`
/// become association pairs, the rest are new-detection candidates.
pub fn split_candidates(cands: &[Candidate], cfg: &TrackerConfig) -> Split {
    let mut out = Split::default();
    for c in cands.iter().filter(|c| c.assoc > cfg.conf_thresh) {
        if c.slot < cfg.assoc_slots {
            out.pairs.push(AssociationPair {
                prev: c.pair.prev,
                cur: c.pair.cur,
                score: c.cls_cur,
            });
        } else {
            out.new.push(*c);
        }
    }
    out
}

/// Hungarian matching on `1 - iou`, keeping matches with `iou >= gate`.
/// Returns matched `(a, b)` index pairs.
fn iou_matches(a: &[BBox], b: &[(BBox, f64)], gate: f64) -> Vec<(usize, usize)> {
    if a.is_empty() || b.is_empty() {
        return vec![];
    }
    let cost: Vec<Vec<f64>> = a
        .iter()
        .map(|x| b.iter().map(|(y, s)| 1.0 - iou(x, y) - SCORE_TIE_BREAK * s).collect())
        .collect();
    hungarian(&cost)
        .expect("finite costs")
        .pairs
        .into_iter()
        .filter(|&(i, j)| iou(&a[i], &b[j].0) >= gate)
        .collect()
}

/// Matches activated tracks to association pairs through their previous-frame
/// boxes. Matched tracks move to the pair's current box and get a Kalman
/// predict and update. Returns `(matched, remaining)`.
pub fn associate(
    tracks: Vec<Track>,
    pairs: &[AssociationPair],
    cfg: &TrackerConfig,
    kf: &KalmanFilter,
) -> (Vec<Track>, Vec<Track>) {
    let boxes: Vec<BBox> = tracks.iter().map(|t| t.last_box).collect();
    let targets: Vec<(BBox, f64)> = pairs.iter().map(|p| (p.prev, p.score)).collect();
    let matches = iou_matches(&boxes, &targets, cfg.iou_match_threshold);
    let mut target_of = vec![None; tracks.len()];
    for (i, j) in matches {
        target_of[i] = Some(j);
    }
    let mut matched = vec![];
    let mut remain = vec![];
    for (mut t, target) in tracks.into_iter().zip(target_of) {
        match target {
            Some(j) => {
                kf.predict(&mut t.kalman);
                kf.update(&mut t.kalman, &pairs[j].cur);
                t.last_box = pairs[j].cur;
                t.score = pairs[j].score;
                matched.push(t);
            }
            None => remain.push(t),
        }
    }
    (matched, remain)
}

/// Drops new candidates whose current box overlaps a current association box
/// by more than `thresh`.
pub fn filter_duplicates(new: Vec<Candidate>, d_cur: &[BBox], thresh: f64) -> Vec<Candidate> {
    new.into_iter()
        .filter(|c| d_cur.iter().all(|b| iou(&c.pair.cur, b) <= thresh))
        .collect()
}

/// Advances every lost track one frame with its motion model.
pub fn predict_lost(tracks: &mut [Track], kf: &KalmanFilter) {
    for t in tracks {
        kf.predict(&mut t.kalman);
        t.last_box = t.kalman.bbox();
    }
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    kf: KalmanFilter,
    activated: Vec<Track>,
    lost: Vec<Track>,
    next_id: u64,
    last_frame: Option<u32>,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            kf: KalmanFilter::default(),
            activated: vec![],
            lost: vec![],
            next_id: 1,
            last_frame: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn set_assoc_slots(&mut self, n: usize) {
        self.cfg.assoc_slots = n;
    }

    pub fn activated(&self) -> &[Track] {
        &self.activated
    }

    pub fn lost(&self) -> &[Track] {
        &self.lost
    }

    /// Processes the candidates refined for frames `(frame - 1, frame)`.
    pub fn step(&mut self, frame: u32, cands: &[Candidate]) -> Result<Vec<TrackedBox>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::NonMonotoneFrame { got: frame, last });
            }
        }
        self.last_frame = Some(frame);
        let cfg = self.cfg;
        let kf = self.kf.clone();

        let split = split_candidates(cands, &cfg);
        let (mut matched, mut act_remain) = associate(std::mem::take(&mut self.activated), &split.pairs, &cfg, &kf);
        let d_cur: Vec<BBox> = split.pairs.iter().map(|p| p.cur).collect();
        let new = filter_duplicates(split.new, &d_cur, cfg.nms2d_thresh);

        let mut lost = std::mem::take(&mut self.lost);
        predict_lost(&mut lost, &kf);
        let lost_boxes: Vec<BBox> = lost.iter().map(|t| t.last_box).collect();
        let new_targets: Vec<(BBox, f64)> = new.iter().map(|c| (c.pair.cur, c.cls_cur)).collect();
        let rematch = iou_matches(&lost_boxes, &new_targets, cfg.iou_match_threshold);
        let mut new_used = vec![false; new.len()];
        let mut target_of = vec![None; lost.len()];
        for (i, j) in rematch {
            target_of[i] = Some(j);
            new_used[j] = true;
        }
        let mut lost_remain = vec![];
        for (mut t, target) in lost.into_iter().zip(target_of) {
            match target {
                Some(j) => {
                    kf.update(&mut t.kalman, &new[j].pair.cur);
                    t.last_box = new[j].pair.cur;
                    t.score = new[j].cls_cur;
                    t.status = TrackStatus::Activated;
                    t.lost_age = 0;
                    matched.push(t);
                }
                None => {
                    t.lost_age += 1;
                    lost_remain.push(t);
                }
            }
        }

        for t in &mut act_remain {
            t.status = TrackStatus::Lost;
            t.lost_age = 1;
            kf.predict(&mut t.kalman);
            t.last_box = t.kalman.bbox();
        }
        act_remain.extend(lost_remain);
        act_remain.retain(|t| t.lost_age <= cfg.max_lost_age);
        self.lost = act_remain;

        for (c, _) in new.iter().zip(&new_used).filter(|(c, used)| !**used && c.cls_cur > cfg.init_thresh) {
            let id = self.next_id;
            self.next_id += 1;
            matched.push(Track {
                id,
                status: TrackStatus::Activated,
                last_box: c.pair.cur,
                history: vec![],
                kalman: kf.initiate(&c.pair.cur),
                lost_age: 0,
                score: c.cls_cur,
            });
        }

        matched.sort_by_key(|t| t.id);
        for t in &mut matched {
            t.history.push((frame, t.last_box));
        }
        self.activated = matched;
        Ok(self
            .activated
            .iter()
            .map(|t| TrackedBox {
                id: t.id,
                bbox: t.last_box,
                score: t.score,
            })
            .collect())
    }
}
