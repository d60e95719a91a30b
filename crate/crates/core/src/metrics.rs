//! CLEAR-MOT counts and IDF1.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::simulator::SceneGroundTruth;
use crate::tracker::TrackingResult;

/// Cost of a pairing below the IoU gate; large enough that any assignment
/// using one is worse than leaving both sides unmatched.
const FORBIDDEN: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub idsw: usize,
    pub frag: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub matches: usize,
    pub idtp: usize,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 10] = [
        "mota", "idf1", "idsw", "frag", "fp", "fn", "gt_count", "pred_count", "matches", "idtp",
    ];

    fn values(&self) -> [String; 10] {
        [
            format!("{:.6}", self.mota),
            format!("{:.6}", self.idf1),
            self.idsw.to_string(),
            self.frag.to_string(),
            self.fp.to_string(),
            self.fn_.to_string(),
            self.gt_count.to_string(),
            self.pred_count.to_string(),
            self.matches.to_string(),
            self.idtp.to_string(),
        ]
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.values().join(",")
    }
}

type Frame = Vec<(u64, BBox)>;

/// Evaluates `result` against the visible ground truth. Frames are matched
/// by index; result frames outside the scene count entirely as false
/// positives.
pub fn evaluate(gt: &SceneGroundTruth, result: &TrackingResult, iou_gate: f64) -> Result<MetricsReport> {
    let mut frames: BTreeSet<u32> = (0..gt.num_frames() as u32).collect();
    frames.extend(result.frames.keys().copied());
    let gt_frames: BTreeMap<u32, Frame> = frames
        .iter()
        .map(|&k| (k, gt.visible(k as usize).map(|o| (o.id, o.bbox)).collect()))
        .collect();
    let hyp_frames: BTreeMap<u32, Frame> = frames
        .iter()
        .map(|&k| (k, result.frame(k).iter().map(|r| (r.id, r.bbox)).collect()))
        .collect();
    evaluate_frames(&gt_frames, &hyp_frames, iou_gate)
}

/// Core of [`evaluate`] over explicit per-frame `(id, box)` lists.
pub fn evaluate_frames(
    gt: &BTreeMap<u32, Frame>,
    hyp: &BTreeMap<u32, Frame>,
    iou_gate: f64,
) -> Result<MetricsReport> {
    let gt_count: usize = gt.values().map(Vec::len).sum();
    if gt_count == 0 {
        return Err(Error::Undefined("ground truth has no visible boxes".into()));
    }
    let pred_count: usize = hyp.values().map(Vec::len).sum();
    let empty = Vec::new();
    let mut frames: BTreeSet<u32> = gt.keys().copied().collect();
    frames.extend(hyp.keys().copied());

    let mut report = MetricsReport {
        gt_count,
        pred_count,
        ..Default::default()
    };
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    // Per gt id: the sequence of (tracked?) flags over its visible frames.
    let mut tracked: BTreeMap<u64, Vec<bool>> = BTreeMap::new();

    for k in &frames {
        let g = gt.get(k).unwrap_or(&empty);
        let h = hyp.get(k).unwrap_or(&empty);
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let mut pairs: Vec<(usize, usize)> = vec![];

        for (i, (gid, gb)) in g.iter().enumerate() {
            let Some(hid) = last_match.get(gid) else { continue };
            if let Some(j) = h.iter().position(|(id, _)| id == hid) {
                if !h_used[j] && iou(gb, &h[j].1) >= iou_gate {
                    g_used[i] = true;
                    h_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }

        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let hj: Vec<usize> = (0..h.len()).filter(|&j| !h_used[j]).collect();
        if !gi.is_empty() && !hj.is_empty() {
            let cost: Vec<Vec<f64>> = gi
                .iter()
                .map(|&i| {
                    hj.iter()
                        .map(|&j| {
                            let o = iou(&g[i].1, &h[j].1);
                            if o >= iou_gate {
                                1.0 - o
                            } else {
                                FORBIDDEN
                            }
                        })
                        .collect()
                })
                .collect();
            for (a, b) in hungarian(&cost)?.pairs {
                let (i, j) = (gi[a], hj[b]);
                if iou(&g[i].1, &h[j].1) >= iou_gate {
                    g_used[i] = true;
                    h_used[j] = true;
                    pairs.push((i, j));
                    if let Some(prev) = last_match.get(&g[i].0) {
                        if *prev != h[j].0 {
                            report.idsw += 1;
                        }
                    }
                }
            }
        }

        for &(i, j) in &pairs {
            last_match.insert(g[i].0, h[j].0);
        }
        for (i, (gid, _)) in g.iter().enumerate() {
            tracked.entry(*gid).or_default().push(g_used[i]);
        }
        report.matches += pairs.len();
        report.fn_ += g_used.iter().filter(|u| !**u).count();
        report.fp += h_used.iter().filter(|u| !**u).count();
    }

    report.frag = tracked.values().map(|flags| fragmentations(flags)).sum();
    report.mota = 1.0 - (report.fn_ + report.fp + report.idsw) as f64 / gt_count as f64;
    report.idtp = id_true_positives(gt, hyp, iou_gate)?;
    report.idf1 = 2.0 * report.idtp as f64 / (gt_count + pred_count) as f64;
    Ok(report)
}

/// Number of times a trajectory goes from tracked to missed while it is later
/// tracked again.
fn fragmentations(flags: &[bool]) -> usize {
    let (Some(first), Some(last)) = (flags.iter().position(|f| *f), flags.iter().rposition(|f| *f)) else {
        return 0;
    };
    flags[first..=last].windows(2).filter(|w| w[0] && !w[1]).count()
}

/// Best total number of frames on which one predicted identity covers one
/// ground-truth identity, over one-to-one identity matchings.
fn id_true_positives(gt: &BTreeMap<u32, Frame>, hyp: &BTreeMap<u32, Frame>, iou_gate: f64) -> Result<usize> {
    let gids: Vec<u64> = gt.values().flatten().map(|(id, _)| *id).collect::<BTreeSet<_>>().into_iter().collect();
    let hids: Vec<u64> = hyp.values().flatten().map(|(id, _)| *id).collect::<BTreeSet<_>>().into_iter().collect();
    if gids.is_empty() || hids.is_empty() {
        return Ok(0);
    }
    let gpos: HashMap<u64, usize> = gids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let hpos: HashMap<u64, usize> = hids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut overlap = vec![vec![0usize; hids.len()]; gids.len()];
    for (k, g) in gt {
        let Some(h) = hyp.get(k) else { continue };
        for (gid, gb) in g {
            for (hid, hb) in h {
                if iou(gb, hb) >= iou_gate {
                    overlap[gpos[gid]][hpos[hid]] += 1;
                }
            }
        }
    }
    let cost: Vec<Vec<f64>> = overlap
        .iter()
        .map(|r| r.iter().map(|&c| -(c as f64)).collect())
        .collect();
    Ok(hungarian(&cost)?.pairs.iter().map(|&(i, j)| overlap[i][j]).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(rows: &[&[(u64, BBox)]]) -> BTreeMap<u32, Frame> {
        rows.iter().enumerate().map(|(k, r)| (k as u32, r.to_vec())).collect()
    }

    fn a(k: u32) -> BBox {
        BBox::new(100.0 + 5.0 * k as f64, 100.0, 40.0, 80.0)
    }

    fn b(k: u32) -> BBox {
        BBox::new(400.0, 200.0 + 5.0 * k as f64, 40.0, 80.0)
    }

    /// Two objects over three frames; B is missed on the second frame and
    /// picked up by a new identity on the third.
    pub(crate) fn hand_instance() -> (BTreeMap<u32, Frame>, BTreeMap<u32, Frame>) {
        let gt = frames(&[&[(1, a(0)), (2, b(0))], &[(1, a(1)), (2, b(1))], &[(1, a(2)), (2, b(2))]]);
        let hyp = frames(&[&[(10, a(0)), (20, b(0))], &[(10, a(1))], &[(10, a(2)), (30, b(2))]]);
        (gt, hyp)
    }

    #[test]
    fn hand_computed_instance() {
        let (gt, hyp) = hand_instance();
        let r = evaluate_frames(&gt, &hyp, 0.5).unwrap();
        assert_eq!((r.fn_, r.fp, r.idsw), (1, 0, 1));
        assert_abs_diff_eq!(r.mota, 2.0 / 3.0, epsilon = 1e-15);
        // Overlaps: (1,10) = 3, (2,20) = 1, (2,30) = 1. Best matching takes
        // (1,10) and one of B's: IDTP = 4, IDF1 = 8 / (6 + 5).
        assert_eq!(r.idtp, 4);
        assert_abs_diff_eq!(r.idf1, 8.0 / 11.0, epsilon = 1e-15);
        assert_eq!(r.frag, 1);
    }

    #[test]
    fn identical_result_is_perfect() {
        let (gt, _) = hand_instance();
        let relabeled: BTreeMap<u32, Frame> = gt
            .iter()
            .map(|(k, f)| (*k, f.iter().map(|(id, b)| (id * 7 + 3, *b)).collect()))
            .collect();
        let r = evaluate_frames(&gt, &relabeled, 0.5).unwrap();
        assert_eq!((r.mota, r.idf1, r.idsw, r.frag), (1.0, 1.0, 0, 0));
    }

    #[test]
    fn empty_result_and_empty_gt() {
        let (gt, _) = hand_instance();
        let r = evaluate_frames(&gt, &BTreeMap::new(), 0.5).unwrap();
        assert_eq!((r.mota, r.idf1, r.fn_), (0.0, 0.0, 6));
        assert!(matches!(evaluate_frames(&BTreeMap::new(), &gt, 0.5), Err(Error::Undefined(_))));
    }

    #[test]
    fn extra_false_positive_lowers_mota() {
        let (gt, hyp) = hand_instance();
        let base = evaluate_frames(&gt, &hyp, 0.5).unwrap().mota;
        let mut more = hyp.clone();
        more.get_mut(&1).unwrap().push((99, BBox::new(900.0, 600.0, 30.0, 30.0)));
        assert!(evaluate_frames(&gt, &more, 0.5).unwrap().mota < base);
    }

    #[test]
    fn relabeling_invariance() {
        let (gt, hyp) = hand_instance();
        let base = evaluate_frames(&gt, &hyp, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut labels: Vec<u64> = (100..110).collect();
            labels.shuffle(&mut rng);
            let map: HashMap<u64, u64> = [10, 20, 30].into_iter().zip(labels).collect();
            let permuted: BTreeMap<u32, Frame> = hyp
                .iter()
                .map(|(k, f)| (*k, f.iter().map(|(id, b)| (map[id], *b)).collect()))
                .collect();
            assert_eq!(evaluate_frames(&gt, &permuted, 0.5).unwrap(), base);
        }
    }

    #[test]
    fn serialization() {
        let (gt, hyp) = hand_instance();
        let r = evaluate_frames(&gt, &hyp, 0.5).unwrap();
        assert!(r.to_kv().starts_with("mota=0.666667\nidf1=0.727273\nidsw=1\n"));
        assert_eq!(MetricsReport::csv_header().split(',').count(), r.to_csv_row().split(',').count());
    }

    #[test]
    fn fragmentation_counting() {
        assert_eq!(fragmentations(&[true, true, true]), 0);
        assert_eq!(fragmentations(&[false, true, true, false]), 0);
        assert_eq!(fragmentations(&[true, false, true, false, false, true]), 2);
    }
}
