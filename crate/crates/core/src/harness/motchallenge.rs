//! MOTChallenge text files: `frame,id,bb_left,bb_top,bb_width,bb_height,...`
//! with 1-based frames, plus the `seqinfo.ini` sidecar for image size and
//! sequence length.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::pipeline::DetectionStream;
use crate::simulator::{GtObject, SceneGroundTruth};
use crate::tracker::TrackingResult;

/// One parsed row. Columns past the box are optional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    /// 1-based.
    pub frame: u32,
    /// `-1` on detection rows.
    pub id: i64,
    pub bbox: BBox,
    /// Confidence on detection and result rows; the "consider" flag on
    /// ground-truth rows.
    pub conf: f64,
    pub class: Option<f64>,
    pub visibility: Option<f64>,
}

impl MotRow {
    pub fn is_detection(&self) -> bool {
        self.id < 0
    }
}

/// Parses file contents; `path` only labels errors. Rows come back sorted by
/// `(frame, id)`, keeping file order among equal keys.
pub fn parse_str(text: &str, path: &Path) -> Result<Vec<MotRow>> {
    let mut rows = vec![];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        rows.push(parse_row(line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?);
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    Ok(rows)
}

fn parse_row(line: &str) -> std::result::Result<MotRow, String> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() < 6 {
        return Err(format!("expected at least 6 columns, found {}", cols.len()));
    }
    let num = |k: usize| -> std::result::Result<f64, String> {
        let v: f64 = cols[k]
            .parse()
            .map_err(|_| format!("column {} is not a number: {:?}", k + 1, cols[k]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("column {} is not finite", k + 1))
        }
    };
    let frame = num(0)?;
    if frame < 1.0 || frame.fract() != 0.0 || frame > u32::MAX as f64 {
        return Err(format!("frame must be a positive integer, found {}", cols[0]));
    }
    let id = num(1)?;
    if id.fract() != 0.0 {
        return Err(format!("id must be an integer, found {}", cols[1]));
    }
    let (w, h) = (num(4)?, num(5)?);
    if w < 0.0 || h < 0.0 {
        return Err("negative box size".into());
    }
    let opt = |k: usize| -> std::result::Result<Option<f64>, String> {
        if k < cols.len() {
            num(k).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(MotRow {
        frame: frame as u32,
        id: id as i64,
        bbox: BBox::from_ltwh(num(2)?, num(3)?, w, h),
        conf: opt(6)?.unwrap_or(1.0),
        class: opt(7)?,
        visibility: opt(8)?,
    })
}

pub fn read_rows(path: &Path) -> Result<Vec<MotRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_str(&text, path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Number of frames: the larger of `declared` and the last frame present.
fn frame_count(rows: &[MotRow], declared: Option<usize>) -> usize {
    let seen = rows.iter().map(|r| r.frame as usize).max().unwrap_or(0);
    seen.max(declared.unwrap_or(0))
}

/// Groups detection rows into a 0-based stream.
pub fn to_detection_stream(rows: &[MotRow], image_size: (f64, f64), num_frames: Option<usize>) -> DetectionStream {
    let mut frames = vec![vec![]; frame_count(rows, num_frames)];
    for r in rows {
        frames[r.frame as usize - 1].push(Detection::new(r.bbox, r.conf));
    }
    DetectionStream { image_size, frames }
}

/// Groups ground-truth rows into a 0-based scene. A row is visible unless its
/// visibility column is zero or its consider flag is zero.
pub fn to_ground_truth(rows: &[MotRow], image_size: (f64, f64), num_frames: Option<usize>) -> Result<SceneGroundTruth> {
    let mut frames = vec![vec![]; frame_count(rows, num_frames)];
    for r in rows {
        if r.id < 0 {
            return Err(Error::InvalidArgument(format!(
                "ground truth row in frame {} has negative id {}",
                r.frame, r.id
            )));
        }
        let f: &mut Vec<GtObject> = &mut frames[r.frame as usize - 1];
        if f.iter().any(|o| o.id == r.id as u64) {
            return Err(Error::InvalidArgument(format!("id {} repeated in frame {}", r.id, r.frame)));
        }
        f.push(GtObject {
            id: r.id as u64,
            bbox: r.bbox,
            visible: r.conf != 0.0 && r.visibility.is_none_or(|v| v > 0.0),
        });
    }
    Ok(SceneGroundTruth { image_size, frames })
}

/// Groups result rows into a tracking result with 0-based frames.
pub fn to_tracking_result(rows: &[MotRow]) -> Result<TrackingResult> {
    let mut frames: BTreeMap<u32, Vec<crate::tracker::TrackedBox>> = BTreeMap::new();
    for r in rows {
        if r.id < 0 {
            return Err(Error::InvalidArgument(format!("result row in frame {} has no id", r.frame)));
        }
        frames.entry(r.frame - 1).or_default().push(crate::tracker::TrackedBox {
            id: r.id as u64,
            bbox: r.bbox,
            score: r.conf,
        });
    }
    Ok(TrackingResult { frames })
}

fn ltwh(b: &BBox) -> String {
    format!("{},{},{},{}", b.left(), b.top(), b.w, b.h)
}

/// Ground-truth rows `frame,id,left,top,w,h,consider,class,visibility`;
/// occluded entries carry visibility 0.
pub fn format_ground_truth(gt: &SceneGroundTruth) -> String {
    let mut out = String::new();
    for (k, objs) in gt.frames.iter().enumerate() {
        let mut objs: Vec<&GtObject> = objs.iter().collect();
        objs.sort_by_key(|o| o.id);
        for o in objs {
            let vis = if o.visible { 1 } else { 0 };
            let _ = writeln!(out, "{},{},{},1,1,{vis}", k + 1, o.id, ltwh(&o.bbox));
        }
    }
    out
}

/// Result rows `frame,id,left,top,w,h,conf,-1,-1,-1`, ordered by frame then id.
pub fn format_results(result: &TrackingResult) -> String {
    let mut out = String::new();
    for (k, rows) in &result.frames {
        let mut rows = rows.clone();
        rows.sort_by_key(|r| r.id);
        for r in rows {
            let _ = writeln!(out, "{},{},{},{},-1,-1,-1", k + 1, r.id, ltwh(&r.bbox), r.score);
        }
    }
    out
}

/// Detection rows `frame,-1,left,top,w,h,conf,-1,-1,-1`.
pub fn format_detections(stream: &DetectionStream) -> String {
    let mut out = String::new();
    for (k, dets) in stream.frames.iter().enumerate() {
        for d in dets {
            let _ = writeln!(out, "{},-1,{},{},-1,-1,-1", k + 1, ltwh(&d.bbox), d.conf);
        }
    }
    out
}

pub fn write_ground_truth(gt: &SceneGroundTruth, path: &Path) -> Result<()> {
    write_text(path, &format_ground_truth(gt))
}

pub fn write_results(result: &TrackingResult, path: &Path) -> Result<()> {
    write_text(path, &format_results(result))
}

pub fn write_detections(stream: &DetectionStream, path: &Path) -> Result<()> {
    write_text(path, &format_detections(stream))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqInfo {
    pub image_size: (f64, f64),
    pub length: usize,
}

pub fn format_seqinfo(name: &str, info: &SeqInfo) -> String {
    format!(
        "[Sequence]\nname={name}\nseqLength={}\nimWidth={}\nimHeight={}\n",
        info.length, info.image_size.0, info.image_size.1
    )
}

pub fn parse_seqinfo(text: &str, path: &Path) -> Result<SeqInfo> {
    let mut width = None;
    let mut height = None;
    let mut length = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let value = value.trim();
        match key.trim() {
            "imWidth" => width = Some(value.parse::<f64>().map_err(|_| bad(format!("bad imWidth {value:?}")))?),
            "imHeight" => height = Some(value.parse::<f64>().map_err(|_| bad(format!("bad imHeight {value:?}")))?),
            "seqLength" => length = Some(value.parse::<usize>().map_err(|_| bad(format!("bad seqLength {value:?}")))?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("missing {k}"),
    };
    let image_size = (width.ok_or_else(|| missing("imWidth"))?, height.ok_or_else(|| missing("imHeight"))?);
    if !(image_size.0 > 0.0 && image_size.1 > 0.0) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "image size must be positive".into(),
        });
    }
    Ok(SeqInfo {
        image_size,
        length: length.unwrap_or(0),
    })
}

pub fn read_seqinfo(path: &Path) -> Result<SeqInfo> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_seqinfo(&text, path)
}

pub fn write_seqinfo(name: &str, info: &SeqInfo, path: &Path) -> Result<()> {
    write_text(path, &format_seqinfo(name, info))
}

/// Writes `gt/gt.txt`, `det/det.txt` and `seqinfo.ini` under `dir`.
pub fn write_scene(gt: &SceneGroundTruth, dir: &Path) -> Result<()> {
    let name = dir.file_name().and_then(|s| s.to_str()).unwrap_or("scene");
    let info = SeqInfo {
        image_size: gt.image_size,
        length: gt.num_frames(),
    };
    write_seqinfo(name, &info, &dir.join("seqinfo.ini"))?;
    write_ground_truth(gt, &dir.join("gt").join("gt.txt"))?;
    let dets = DetectionStream {
        image_size: gt.image_size,
        frames: gt.detections(),
    };
    write_detections(&dets, &dir.join("det").join("det.txt"))
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<SceneGroundTruth> {
    let info = read_seqinfo(&dir.join("seqinfo.ini"))?;
    let rows = read_rows(&dir.join("gt").join("gt.txt"))?;
    to_ground_truth(&rows, info.image_size, Some(info.length))
}

/// Reads the detections of a scene directory.
pub fn read_scene_detections(dir: &Path) -> Result<DetectionStream> {
    let info = read_seqinfo(&dir.join("seqinfo.ini"))?;
    let rows = read_rows(&dir.join("det").join("det.txt"))?;
    Ok(to_detection_stream(&rows, info.image_size, Some(info.length)))
}
