//! Greedy IoU tracker used as a reference point: detections are linked to
//! the previous frame's boxes in descending IoU order, with no motion model.

use crate::geometry::{iou, Detection};
use crate::tracker::TrackedBox;

#[derive(Debug, Clone)]
pub struct GreedyIouTracker {
    pub iou_threshold: f64,
    pub det_thresh: f64,
    /// Frames an unmatched track survives before it is dropped.
    pub max_age: u32,
    tracks: Vec<(TrackedBox, u32)>,
    next_id: u64,
}

impl Default for GreedyIouTracker {
    fn default() -> Self {
        Self::new(0.3, 0.7, 1)
    }
}

impl GreedyIouTracker {
    pub fn new(iou_threshold: f64, det_thresh: f64, max_age: u32) -> Self {
        Self {
            iou_threshold,
            det_thresh,
            max_age,
            tracks: vec![],
            next_id: 1,
        }
    }

    pub fn step(&mut self, dets: &[Detection]) -> Vec<TrackedBox> {
        let dets: Vec<&Detection> = dets.iter().filter(|d| d.conf > self.det_thresh).collect();
        let mut edges: Vec<(f64, usize, usize)> = vec![];
        for (i, (t, _)) in self.tracks.iter().enumerate() {
            for (j, d) in dets.iter().enumerate() {
                let o = iou(&t.bbox, &d.bbox);
                if o >= self.iou_threshold {
                    edges.push((o, i, j));
                }
            }
        }
        edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut track_used = vec![false; self.tracks.len()];
        let mut det_used = vec![false; dets.len()];
        let mut out = vec![];
        for (_, i, j) in edges {
            if track_used[i] || det_used[j] {
                continue;
            }
            track_used[i] = true;
            det_used[j] = true;
            let t = &mut self.tracks[i];
            t.0.bbox = dets[j].bbox;
            t.0.score = dets[j].conf;
            t.1 = 0;
            out.push(t.0);
        }
        for (t, used) in self.tracks.iter_mut().zip(&track_used) {
            if !used {
                t.1 += 1;
            }
        }
        let max_age = self.max_age;
        self.tracks.retain(|t| t.1 <= max_age);
        for (d, _) in dets.iter().zip(&det_used).filter(|(_, u)| !**u) {
            let row = TrackedBox {
                id: self.next_id,
                bbox: d.bbox,
                score: d.conf,
            };
            self.next_id += 1;
            self.tracks.push((row, 0));
            out.push(row);
        }
        out.sort_by_key(|r| r.id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    #[test]
    fn links_overlapping_boxes() {
        let mut t = GreedyIouTracker::default();
        let a = Detection::new(BBox::new(50.0, 50.0, 20.0, 40.0), 0.9);
        let b = Detection::new(BBox::new(200.0, 50.0, 20.0, 40.0), 0.9);
        let first = t.step(&[a, b]);
        assert_eq!(first.iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2]);
        let moved = [
            Detection::new(b.bbox.translated(3.0, 0.0), 0.9),
            Detection::new(a.bbox.translated(3.0, 0.0), 0.9),
        ];
        let second = t.step(&moved);
        assert_eq!(second[0].bbox, moved[1].bbox);
        assert_eq!(second[1].bbox, moved[0].bbox);
    }

    #[test]
    fn jump_breaks_identity() {
        let mut t = GreedyIouTracker::default();
        let a = Detection::new(BBox::new(50.0, 50.0, 20.0, 40.0), 0.9);
        t.step(&[a]);
        let out = t.step(&[Detection::new(a.bbox.translated(30.0, 0.0), 0.9)]);
        assert_eq!(out[0].id, 2);
        assert!(t.step(&[Detection::new(a.bbox, 0.5)]).is_empty());
    }
}
