//! Synthetic scenes with known identities, the detection-perturbation
//! protocol, and the average-motion statistic that drives corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::GtPair;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection, PairedBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Linear,
    /// Sinusoidal weaving around a straight path. `turn_rate` is in cycles
    /// per frame; each consecutive pair of objects is routed through a common
    /// point with probability `crossover_rate`.
    NonLinear { turn_rate: f64, crossover_rate: f64 },
    /// Linear motion packed into a central region whose area makes the total
    /// box area a `density` fraction of it.
    Crowded { density: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub min_height: f64,
    pub max_height: f64,
    /// Width over height.
    pub min_aspect: f64,
    pub max_aspect: f64,
}

impl Default for SizeRange {
    fn default() -> Self {
        Self {
            min_height: 60.0,
            max_height: 120.0,
            min_aspect: 0.35,
            max_aspect: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub duration: usize,
    pub image_size: (f64, f64),
    pub motion: MotionModel,
    pub occlusion_rate: f64,
    pub sizes: SizeRange,
    /// Upper bound on the per-frame center speed of the straight component.
    pub max_speed: f64,
    /// Resample until no two boxes overlap in any frame.
    #[serde(default)]
    pub separated: bool,
    pub seed: u64,
}

impl SceneSpec {
    pub fn linear(n_objects: usize, duration: usize, seed: u64) -> Self {
        Self {
            n_objects,
            duration,
            image_size: (1280.0, 720.0),
            motion: MotionModel::Linear,
            occlusion_rate: 0.0,
            sizes: SizeRange::default(),
            max_speed: 8.0,
            separated: false,
            seed,
        }
    }

    /// Dense linear traffic with occasional short occlusions.
    pub fn crowded(n_objects: usize, duration: usize, seed: u64) -> Self {
        Self {
            motion: MotionModel::Crowded { density: 0.5 },
            occlusion_rate: 0.1,
            ..Self::linear(n_objects, duration, seed)
        }
    }

    /// Weaving, crossing dancers in a crowded region.
    pub fn dance(n_objects: usize, duration: usize, seed: u64) -> Self {
        Self {
            motion: MotionModel::NonLinear {
                turn_rate: 0.05,
                crossover_rate: 1.0,
            },
            occlusion_rate: 0.0,
            max_speed: 6.0,
            ..Self::linear(n_objects, duration, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.duration < 2 {
            return bad(format!("duration {} is below 2 frames", self.duration));
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return bad(format!("occlusion rate {} outside [0, 1]", self.occlusion_rate));
        }
        let (w, h) = self.image_size;
        if !(w > 0.0 && h > 0.0) {
            return bad("image size must be positive".into());
        }
        let s = &self.sizes;
        if !(s.min_height > 0.0 && s.min_height <= s.max_height && s.min_aspect > 0.0 && s.min_aspect <= s.max_aspect)
        {
            return bad("size range is empty".into());
        }
        if s.max_height > h || s.max_height * s.max_aspect > w {
            return Err(Error::InfeasibleScene("largest box exceeds the image".into()));
        }
        if self.max_speed < 0.0 {
            return bad("max speed is negative".into());
        }
        match self.motion {
            MotionModel::NonLinear {
                turn_rate,
                crossover_rate,
            } => {
                if !(0.0..=1.0).contains(&turn_rate) || !(0.0..=1.0).contains(&crossover_rate) {
                    return bad("non-linear rates must lie in [0, 1]".into());
                }
            }
            MotionModel::Crowded { density } => {
                if !(density > 0.0 && density <= 1.0) {
                    return bad(format!("density {density} outside (0, 1]"));
                }
            }
            MotionModel::Linear => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    pub bbox: BBox,
    pub visible: bool,
}

/// Per-frame ground truth with 0-based frame indices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneGroundTruth {
    pub image_size: (f64, f64),
    pub frames: Vec<Vec<GtObject>>,
}

impl SceneGroundTruth {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn visible(&self, k: usize) -> impl Iterator<Item = &GtObject> {
        self.frames.get(k).into_iter().flatten().filter(|o| o.visible)
    }

    /// Labeled pairs for frames `(prev, cur)`; objects visible in neither are
    /// left out.
    pub fn pairs(&self, prev: usize, cur: usize) -> Vec<GtPair> {
        let find = |k: usize, id: u64| self.frames.get(k).and_then(|f| f.iter().find(|o| o.id == id && o.visible));
        let mut ids: Vec<u64> = self.visible(prev).chain(self.visible(cur)).map(|o| o.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let (p, c) = (find(prev, id), find(cur, id));
                let pb = p.or(c).expect("visible in one frame").bbox;
                let cb = c.or(p).expect("visible in one frame").bbox;
                GtPair {
                    id,
                    pair: PairedBox::new(pb, cb),
                    present_prev: p.is_some(),
                    present_cur: c.is_some(),
                }
            })
            .collect()
    }

    /// Visible boxes as full-confidence detections.
    pub fn detections(&self) -> Vec<Vec<Detection>> {
        (0..self.frames.len())
            .map(|k| self.visible(k).map(|o| Detection::new(o.bbox, 1.0)).collect())
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Region {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl Region {
    /// Centers that keep a `w x h` box inside the region.
    fn for_box(&self, w: f64, h: f64) -> Region {
        Region {
            x0: self.x0 + w / 2.0,
            y0: self.y0 + h / 2.0,
            x1: (self.x1 - w / 2.0).max(self.x0 + w / 2.0),
            y1: (self.y1 - h / 2.0).max(self.y0 + h / 2.0),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let x = if self.x1 > self.x0 { rng.random_range(self.x0..=self.x1) } else { self.x0 };
        let y = if self.y1 > self.y0 { rng.random_range(self.y0..=self.y1) } else { self.y0 };
        (x, y)
    }

    fn clamp(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (x.clamp(self.x0, self.x1), y.clamp(self.y0, self.y1))
    }
}

struct Plan {
    w: f64,
    h: f64,
    start: (f64, f64),
    velocity: (f64, f64),
    /// Sinusoid amplitude across the direction of travel, its phase origin
    /// (the frame where the offset is zero) and frequency.
    amplitude: f64,
    phase_frame: f64,
    freq: f64,
}

impl Plan {
    fn center(&self, k: usize) -> (f64, f64) {
        let k = k as f64;
        let (vx, vy) = self.velocity;
        let speed = (vx * vx + vy * vy).sqrt();
        let (nx, ny) = if speed > 0.0 { (-vy / speed, vx / speed) } else { (0.0, 1.0) };
        let off = self.amplitude * (2.0 * std::f64::consts::PI * self.freq * (k - self.phase_frame)).sin();
        (self.start.0 + vx * k + off * nx, self.start.1 + vy * k + off * ny)
    }
}

fn random_velocity(max_speed: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let speed = max_speed * rng.random_range(0.3..=1.0);
    (speed * angle.cos(), speed * angle.sin())
}

const SEPARATION_ATTEMPTS: usize = 1000;

fn any_overlap(frames: &[Vec<GtObject>]) -> bool {
    frames.iter().any(|f| {
        f.iter()
            .enumerate()
            .any(|(i, a)| f[i + 1..].iter().any(|b| iou(&a.bbox, &b.bbox) > 0.0))
    })
}

/// Generates a scene. Identical specs give identical scenes.
pub fn generate(spec: &SceneSpec) -> Result<SceneGroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (iw, ih) = spec.image_size;
    let d = spec.duration;
    let last = (d - 1) as f64;

    let sizes: Vec<(f64, f64)> = (0..spec.n_objects)
        .map(|_| {
            let h = rng.random_range(spec.sizes.min_height..=spec.sizes.max_height);
            let a = rng.random_range(spec.sizes.min_aspect..=spec.sizes.max_aspect);
            (a * h, h)
        })
        .collect();
    let total_area: f64 = sizes.iter().map(|(w, h)| w * h).sum();
    if total_area > iw * ih {
        return Err(Error::InfeasibleScene(format!(
            "{} boxes cover {total_area:.0} px, more than the image",
            spec.n_objects
        )));
    }

    let image = Region {
        x0: 0.0,
        y0: 0.0,
        x1: iw,
        y1: ih,
    };
    let area = match spec.motion {
        MotionModel::Crowded { density } => {
            let max_w = sizes.iter().map(|s| s.0).fold(0.0, f64::max);
            let max_h = sizes.iter().map(|s| s.1).fold(0.0, f64::max);
            let k = (total_area / density / (iw * ih)).sqrt().min(1.0);
            let (rw, rh) = ((iw * k).max(max_w).min(iw), (ih * k).max(max_h).min(ih));
            Region {
                x0: (iw - rw) / 2.0,
                y0: (ih - rh) / 2.0,
                x1: (iw + rw) / 2.0,
                y1: (ih + rh) / 2.0,
            }
        }
        _ => image,
    };

    let mut attempts = 0;
    let mut frames = loop {
        let mut plans: Vec<Plan> = sizes
            .iter()
            .map(|&(w, h)| {
                let region = area.for_box(w, h);
                let start = region.sample(&mut rng);
                let v = random_velocity(spec.max_speed, &mut rng);
                // Pull the end point back inside so the straight path stays in bounds.
                let end = region.clamp((start.0 + v.0 * last, start.1 + v.1 * last));
                Plan {
                    w,
                    h,
                    start,
                    velocity: ((end.0 - start.0) / last, (end.1 - start.1) / last),
                    amplitude: 0.0,
                    phase_frame: 0.0,
                    freq: 0.0,
                }
            })
            .collect();

        if let MotionModel::NonLinear {
            turn_rate,
            crossover_rate,
        } = spec.motion
        {
            for p in plans.iter_mut() {
                p.amplitude = 1.5 * p.w;
                p.freq = turn_rate;
                p.phase_frame = rng.random_range(0.0..=last);
            }
            for pair in (0..plans.len() / 2).map(|i| 2 * i) {
                if rng.random::<f64>() >= crossover_rate {
                    continue;
                }
                let km = rng.random_range(last / 4.0..=3.0 * last / 4.0).round();
                let (wa, ha) = (plans[pair].w, plans[pair].h);
                let (wb, hb) = (plans[pair + 1].w, plans[pair + 1].h);
                let meet = area.for_box(wa.max(wb), ha.max(hb)).sample(&mut rng);
                for idx in [pair, pair + 1] {
                    let v = random_velocity(spec.max_speed, &mut rng);
                    let p = &mut plans[idx];
                    p.velocity = v;
                    p.start = (meet.0 - v.0 * km, meet.1 - v.1 * km);
                    p.phase_frame = km;
                }
            }
        }

        let frames: Vec<Vec<GtObject>> = (0..d)
            .map(|k| {
                plans
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let region = image.for_box(p.w, p.h);
                        let (cx, cy) = region.clamp(p.center(k));
                        GtObject {
                            id: i as u64 + 1,
                            bbox: BBox::new(cx, cy, p.w, p.h),
                            visible: true,
                        }
                    })
                    .collect()
            })
            .collect();
        if !spec.separated || !any_overlap(&frames) {
            break frames;
        }
        attempts += 1;
        if attempts >= SEPARATION_ATTEMPTS {
            return Err(Error::InfeasibleScene(format!(
                "no separated layout found in {SEPARATION_ATTEMPTS} attempts"
            )));
        }
    };

    for i in 0..spec.n_objects {
        if rng.random::<f64>() >= spec.occlusion_rate {
            continue;
        }
        let len = rng.random_range(2..=4usize);
        if d < len + 2 {
            continue;
        }
        let start = rng.random_range(1..=d - len - 1);
        for frame in frames.iter_mut().skip(start).take(len) {
            frame[i].visible = false;
        }
    }

    Ok(SceneGroundTruth {
        image_size: spec.image_size,
        frames,
    })
}

/// Parameters of the noise box used by [`perturb_boxes`], per coordinate in
/// `[0, 1]`-normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBox {
    pub mean: f64,
    pub std: f64,
}

impl Default for NoiseBox {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.25 }
    }
}

/// `B = (1 - alpha) B + alpha B_noise` per normalized coordinate. Widths and
/// heights are clamped at zero.
pub fn perturb_boxes<R: Rng + ?Sized>(
    boxes: &[BBox],
    alpha: f64,
    image_size: (f64, f64),
    noise: &NoiseBox,
    rng: &mut R,
) -> Result<Vec<BBox>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("perturbation weight {alpha} outside [0, 1]")));
    }
    let dist = Normal::new(noise.mean, noise.std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (w, h) = image_size;
    Ok(boxes
        .iter()
        .map(|b| {
            let norm = [b.cx / w, b.cy / h, b.w / w, b.h / h];
            let out: [f64; 4] = std::array::from_fn(|k| {
                let n: f64 = dist.sample(rng);
                (1.0 - alpha) * norm[k] + alpha * n
            });
            if alpha == 0.0 {
                return *b;
            }
            BBox::new(out[0] * w, out[1] * h, out[2].max(0.0) * w, out[3].max(0.0) * h)
        })
        .collect())
}

/// Applies [`perturb_boxes`] to every frame of a detection stream.
pub fn perturb_detections<R: Rng + ?Sized>(
    frames: &[Vec<Detection>],
    alpha: f64,
    image_size: (f64, f64),
    noise: &NoiseBox,
    rng: &mut R,
) -> Result<Vec<Vec<Detection>>> {
    frames
        .iter()
        .map(|dets| {
            let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
            let moved = perturb_boxes(&boxes, alpha, image_size, noise, rng)?;
            Ok(moved
                .into_iter()
                .zip(dets)
                .map(|(b, d)| Detection::new(b, d.conf))
                .collect())
        })
        .collect()
}

/// Mean center displacement between two sets of identified boxes, each
/// divided by the earlier box's diagonal, clamped to `[0, 1]`. Zero when no
/// identity appears in both.
pub fn motion_ratio(prev: &[(u64, BBox)], cur: &[(u64, BBox)]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (id, a) in prev {
        if let Some((_, b)) = cur.iter().find(|(j, _)| j == id) {
            let diag = a.diagonal();
            if diag > 0.0 {
                total += a.center_distance(b) / diag;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        (total / n as f64).clamp(0.0, 1.0)
    }
}

/// Average motion of the visible objects between frames `k - 1` and `k`.
pub fn average_motion(gt: &SceneGroundTruth, k: usize) -> Result<f64> {
    if k == 0 || k >= gt.num_frames() {
        return Err(Error::InvalidArgument(format!(
            "frame {k} has no predecessor in a {}-frame scene",
            gt.num_frames()
        )));
    }
    let collect = |k: usize| -> Vec<(u64, BBox)> { gt.visible(k).map(|o| (o.id, o.bbox)).collect() };
    Ok(motion_ratio(&collect(k - 1), &collect(k)))
}
