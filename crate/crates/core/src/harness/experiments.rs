//! Multi-seed experiment drivers: ablation grids, the boxes by steps sweep
//! and the prior-perturbation robustness study. Each cell runs every seed on
//! a freshly generated scene and reports seed-averaged rates and summed
//! counts.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DenoiserKind, RunConfig};
use crate::diffusion::{PaddingStrategy, PerturbationSchedule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::pipeline::{DetectionStream, Pipeline, PriorPerturbation, PRIOR_STREAM};
use crate::simulator::{generate, perturb_detections, NoiseBox, SceneGroundTruth};
use crate::tracker::greedy::GreedyIouTracker;
use crate::tracker::TrackingResult;

/// Runs `f` over `items` on scoped worker threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(workers.max(1)) {
        let results: Vec<Result<U>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("experiment worker panicked"))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

/// Tracks `gt` with the configured denoiser. The detection-snapping
/// denoiser sees the scene's visible boxes as detections.
pub fn track_scene(cfg: &RunConfig, gt: &SceneGroundTruth, seed: u64) -> Result<TrackingResult> {
    track_with(cfg, gt, seed, None)
}

fn track_with(
    cfg: &RunConfig,
    gt: &SceneGroundTruth,
    seed: u64,
    perturbation: Option<PriorPerturbation>,
) -> Result<TrackingResult> {
    let denoiser = cfg.build_denoiser()?;
    let mut p = Pipeline::new(cfg.pipeline.clone(), denoiser.as_ref())?;
    if let Some(pp) = perturbation {
        p = p.with_prior_perturbation(pp);
    }
    match cfg.denoiser {
        DenoiserKind::DetectionSnap => p.run_sequence(
            &DetectionStream {
                image_size: gt.image_size,
                frames: gt.detections(),
            },
            seed,
        ),
        _ => p.run_sequence(gt, seed),
    }
}

/// Seed-averaged MOTA and IDF1 with counts summed over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: usize,
    pub mota: f64,
    pub idf1: f64,
    pub idsw: usize,
    pub frag: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Summary {
    pub const HEADER: &'static str = "mota,idf1,idsw,frag,fp,fn";

    pub fn of(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self {
            seeds: reports.len(),
            mota: reports.iter().map(|r| r.mota).sum::<f64>() / n,
            idf1: reports.iter().map(|r| r.idf1).sum::<f64>() / n,
            idsw: reports.iter().map(|r| r.idsw).sum(),
            frag: reports.iter().map(|r| r.frag).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{}",
            self.mota, self.idf1, self.idsw, self.frag, self.fp, self.fn_
        )
    }
}

fn scene_for(cfg: &RunConfig, seed: u64) -> Result<SceneGroundTruth> {
    generate(&cfg.scene.spec(seed))
}

/// Per-seed reports for one configuration.
pub fn evaluate_seeds(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<MetricsReport>> {
    par_map(seeds, |&seed| {
        let gt = scene_for(cfg, seed)?;
        evaluate(&gt, &track_scene(cfg, &gt, seed)?, cfg.iou_gate)
    })
}

fn require_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub proportions: Vec<f64>,
    pub paddings: Vec<PaddingStrategy>,
    pub perturbations: Vec<PerturbationSchedule>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self {
            proportions: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            paddings: PaddingStrategy::ALL.to_vec(),
            perturbations: PerturbationSchedule::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub proportion: f64,
    pub padding: PaddingStrategy,
    pub perturbation: PerturbationSchedule,
    pub summary: Summary,
}

impl AblationRow {
    pub fn csv_header() -> String {
        format!("proportion,padding,perturbation,{}", Summary::HEADER)
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.proportion,
            self.padding.name(),
            self.perturbation.name(),
            self.summary.csv()
        )
    }
}

/// One row per point of the grid's cross product, in proportion, padding,
/// perturbation order.
pub fn ablate(cfg: &RunConfig, grid: &AblationGrid, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    require_seeds(seeds)?;
    let mut rows = vec![];
    for &proportion in &grid.proportions {
        for &padding in &grid.paddings {
            for &perturbation in &grid.perturbations {
                let mut c = cfg.clone();
                c.pipeline.proportion = proportion;
                c.pipeline.padding = padding;
                c.pipeline.perturbation = perturbation;
                c.validate()?;
                rows.push(AblationRow {
                    proportion,
                    padding,
                    perturbation,
                    summary: Summary::of(&evaluate_seeds(&c, seeds)?),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub n_test: usize,
    pub steps: usize,
    pub summary: Summary,
    /// Mean wall-clock time per frame pair; the only nondeterministic cell.
    pub latency_ms: f64,
}

impl SweepRow {
    pub fn csv_header() -> String {
        format!("n_test,steps,{},latency_ms", Summary::HEADER)
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.n_test, self.steps, self.summary.csv(), self.latency_ms)
    }
}

/// Proposal count by DDIM step count. Seeds run one after another so the
/// latency column is not skewed by contention.
pub fn sweep(cfg: &RunConfig, boxes: &[usize], steps: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    require_seeds(seeds)?;
    let scenes: Vec<SceneGroundTruth> = seeds.iter().map(|&s| scene_for(cfg, s)).collect::<Result<_>>()?;
    let mut rows = vec![];
    for &n in boxes {
        for &s in steps {
            let mut c = cfg.clone();
            c.pipeline.n_test = n;
            c.pipeline.steps = s;
            c.validate()?;
            let mut reports = vec![];
            let mut elapsed = 0.0;
            let mut pairs = 0usize;
            for (gt, &seed) in scenes.iter().zip(seeds) {
                let start = Instant::now();
                let res = track_scene(&c, gt, seed)?;
                elapsed += start.elapsed().as_secs_f64();
                pairs += gt.num_frames();
                reports.push(evaluate(gt, &res, c.iou_gate)?);
            }
            rows.push(SweepRow {
                n_test: n,
                steps: s,
                summary: Summary::of(&reports),
                latency_ms: 1e3 * elapsed / pairs.max(1) as f64,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RobustTracker {
    Diffusion,
    GreedyIou,
}

impl RobustTracker {
    pub fn name(&self) -> &'static str {
        match self {
            RobustTracker::Diffusion => "diffusion",
            RobustTracker::GreedyIou => "greedy-iou",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub alpha: f64,
    pub tracker: RobustTracker,
    pub summary: Summary,
}

impl RobustnessRow {
    pub fn csv_header() -> String {
        format!("alpha,tracker,{}", Summary::HEADER)
    }

    pub fn to_csv_row(&self) -> String {
        format!("{},{},{}", self.alpha, self.tracker.name(), self.summary.csv())
    }
}

pub const ROBUSTNESS_ALPHAS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

/// Greedy IoU tracking of the scene's visible boxes after perturbation.
pub fn greedy_on_perturbed(gt: &SceneGroundTruth, alpha: f64, noise: &NoiseBox, seed: u64) -> Result<TrackingResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PRIOR_STREAM);
    let dets = perturb_detections(&gt.detections(), alpha, gt.image_size, noise, &mut rng)?;
    let mut tracker = GreedyIouTracker::default();
    let mut out = TrackingResult::default();
    for (k, d) in dets.iter().enumerate() {
        out.push(k as u32, tracker.step(d));
    }
    Ok(out)
}

/// For each weight, the diffusion pipeline with perturbed priors and the
/// greedy IoU tracker on perturbed detections, both perturbed as
/// `B = (1 - alpha) B + alpha B_noise`.
pub fn robustness(cfg: &RunConfig, alphas: &[f64], noise: &NoiseBox, seeds: &[u64]) -> Result<Vec<RobustnessRow>> {
    require_seeds(seeds)?;
    let scenes: Vec<SceneGroundTruth> = seeds.iter().map(|&s| scene_for(cfg, s)).collect::<Result<_>>()?;
    let cells: Vec<(usize, u64)> = (0..scenes.len()).zip(seeds.iter().copied()).collect();
    let mut rows = vec![];
    for &alpha in alphas {
        let diffusion = par_map(&cells, |&(i, seed)| {
            let pp = PriorPerturbation { alpha, noise: *noise };
            evaluate(&scenes[i], &track_with(cfg, &scenes[i], seed, Some(pp))?, cfg.iou_gate)
        })?;
        let greedy = par_map(&cells, |&(i, seed)| {
            evaluate(&scenes[i], &greedy_on_perturbed(&scenes[i], alpha, noise, seed)?, cfg.iou_gate)
        })?;
        rows.push(RobustnessRow {
            alpha,
            tracker: RobustTracker::Diffusion,
            summary: Summary::of(&diffusion),
        });
        rows.push(RobustnessRow {
            alpha,
            tracker: RobustTracker::GreedyIou,
            summary: Summary::of(&greedy),
        });
    }
    Ok(rows)
}

/// Writes a header line and rows.
pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::{SceneConfig, SceneKind};

    fn small() -> RunConfig {
        let mut c = RunConfig {
            scene: SceneConfig {
                kind: SceneKind::Linear,
                objects: 4,
                frames: 6,
                ..Default::default()
            },
            ..Default::default()
        };
        c.pipeline.n_test = 60;
        c
    }

    #[test]
    fn ablation_cardinality() {
        let grid = AblationGrid {
            proportions: vec![0.25, 0.5],
            paddings: vec![PaddingStrategy::CatGaussian, PaddingStrategy::Repeat, PaddingStrategy::CatFull],
            perturbations: vec![PerturbationSchedule::Logarithmic, PerturbationSchedule::Linear],
        };
        let rows = ablate(&small(), &grid, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[0].proportion, 0.25);
        assert_eq!(rows[11].perturbation, PerturbationSchedule::Linear);
        assert!(rows.iter().all(|r| r.summary.seeds == 2));
        assert_eq!(AblationRow::csv_header().split(',').count(), rows[0].to_csv_row().split(',').count());
    }

    #[test]
    fn sweep_is_deterministic_apart_from_latency() {
        let a = sweep(&small(), &[30, 60], &[1, 2], &[3]).unwrap();
        let b = sweep(&small(), &[30, 60], &[1, 2], &[3]).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.n_test, x.steps, x.summary), (y.n_test, y.steps, y.summary));
            assert!(x.latency_ms >= 0.0);
        }
    }

    #[test]
    fn robustness_at_zero_matches_plain_tracking() {
        let cfg = small();
        let rows = robustness(&cfg, &[0.0], &NoiseBox::default(), &[5, 6]).unwrap();
        assert_eq!(rows.len(), 2);
        let plain = Summary::of(&evaluate_seeds(&cfg, &[5, 6]).unwrap());
        assert_eq!(rows[0].summary, plain);
        assert_eq!(rows[0].tracker, RobustTracker::Diffusion);
        // Unperturbed ground truth is tracked perfectly by the greedy tracker.
        assert_eq!(rows[1].summary.mota, 1.0);
    }

    #[test]
    fn empty_seed_list_rejected() {
        assert!(ablate(&small(), &AblationGrid::default(), &[]).is_err());
        assert!(sweep(&small(), &[10], &[1], &[]).is_err());
    }

    #[test]
    fn par_map_keeps_order_and_propagates_errors() {
        let items: Vec<u64> = (0..50).collect();
        assert_eq!(par_map(&items, |&x| Ok(x * 2)).unwrap(), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        assert!(par_map(&items, |&x| if x == 33 {
            Err(Error::InvalidArgument("x".into()))
        } else {
            Ok(x)
        })
        .is_err());
    }

    #[test]
    fn csv_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("x.csv");
        write_csv(&p, "a,b", vec!["1,2".to_string()]).unwrap();
        assert_eq!(std::fs::read_to_string(p).unwrap(), "a,b\n1,2\n");
    }
}
