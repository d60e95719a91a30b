//! Frame-pair orchestration: proposals, corruption, refinement, gating, NMS
//! and the tracker step, for the joint diffusion variant and the conditional
//! baseline that only corrupts the current frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Candidate, DenoiseMode, Denoiser, Evidence, FrameContext};
use crate::diffusion::{
    build_inference_proposals, corrupt_proposals, cosine_schedule, ddim_refine, perturbation_timestep,
    standard_normal_rows, CorruptSlots, NoiseForm, PaddingStrategy, PerturbationSchedule, SignalSpace,
};
use crate::error::{Error, Result};
use crate::geometry::{nms2d, nms3d, BBox, Detection};
use crate::simulator::{motion_ratio, perturb_boxes, NoiseBox, SceneGroundTruth};
use crate::tracker::{TrackedBox, Tracker, TrackerConfig, TrackingResult};

/// Seed offset of the stream that perturbs priors, kept apart from the
/// proposal stream so enabling perturbation does not shift proposal noise.
pub const PRIOR_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Diffusion,
    Baseline,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diffusion" => Some(Variant::Diffusion),
            "baseline" => Some(Variant::Baseline),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Diffusion => "diffusion",
            Variant::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_test: usize,
    /// DDIM refinement stages per frame pair.
    pub steps: usize,
    /// Share of proposals that repeat prior boxes.
    pub proportion: f64,
    pub padding: PaddingStrategy,
    pub perturbation: PerturbationSchedule,
    pub schedule_steps: usize,
    pub noise_form: NoiseForm,
    pub signal_scale: f64,
    /// Motion ratio used until two tracked frames exist.
    pub first_motion: f64,
    pub variant: Variant,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_test: 500,
            steps: 1,
            proportion: 0.25,
            padding: PaddingStrategy::CatGaussian,
            perturbation: PerturbationSchedule::Logarithmic,
            schedule_steps: 1000,
            noise_form: NoiseForm::Linear,
            signal_scale: 2.0,
            first_motion: 0.25,
            variant: Variant::Diffusion,
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_test == 0 {
            return bad("n_test must be at least 1".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.schedule_steps == 0 {
            return bad("schedule_steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return bad(format!("proportion {} outside [0, 1]", self.proportion));
        }
        if !(0.0..=1.0).contains(&self.first_motion) {
            return bad(format!("first_motion {} outside [0, 1]", self.first_motion));
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return bad(format!("signal_scale {} must be positive", self.signal_scale));
        }
        self.tracker.validate()
    }
}

/// Where per-frame evidence for the denoiser comes from.
pub trait EvidenceSource {
    fn num_frames(&self) -> usize;
    fn image_size(&self) -> (f64, f64);
    fn evidence(&self, prev: usize, cur: usize) -> Evidence;
}

impl EvidenceSource for SceneGroundTruth {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn image_size(&self) -> (f64, f64) {
        self.image_size
    }

    fn evidence(&self, prev: usize, cur: usize) -> Evidence {
        Evidence::GroundTruth(self.pairs(prev, cur))
    }
}

/// Per-frame unlabeled detections, 0-based.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionStream {
    pub image_size: (f64, f64),
    pub frames: Vec<Vec<Detection>>,
}

impl EvidenceSource for DetectionStream {
    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn image_size(&self) -> (f64, f64) {
        self.image_size
    }

    fn evidence(&self, prev: usize, cur: usize) -> Evidence {
        Evidence::Detections {
            prev: self.frames[prev].clone(),
            cur: self.frames[cur].clone(),
        }
    }
}

/// Replaces the configuration for one frame; receives the 0-based frame index
/// and the sequence configuration. Tracker settings other than the
/// association slot count stay fixed for the sequence.
pub type FrameOverride = Box<dyn Fn(u32, &PipelineConfig) -> PipelineConfig + Send + Sync>;

/// Corrupts the priors fed to each frame pair, as in the robustness protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorPerturbation {
    pub alpha: f64,
    pub noise: NoiseBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutput {
    /// Gated candidates in descending score order.
    pub candidates: Vec<Candidate>,
    /// Candidate slots below this index are association slots.
    pub assoc_slots: usize,
    pub timestep: usize,
    /// No priors were available and the proposals were all padding.
    pub fallback: bool,
}

pub struct Pipeline<'a> {
    cfg: PipelineConfig,
    denoiser: &'a dyn Denoiser,
    frame_override: Option<FrameOverride>,
    prior_perturbation: Option<PriorPerturbation>,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: PipelineConfig, denoiser: &'a dyn Denoiser) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            denoiser,
            frame_override: None,
            prior_perturbation: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn with_frame_override(mut self, f: FrameOverride) -> Self {
        self.frame_override = Some(f);
        self
    }

    pub fn with_prior_perturbation(mut self, p: PriorPerturbation) -> Self {
        self.prior_perturbation = Some(p);
        self
    }

    /// Refines one frame pair and applies the score gates and NMS.
    pub fn run_pair(
        &self,
        cfg: &PipelineConfig,
        ctx: FrameContext,
        priors: &[BBox],
        motion: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<PairOutput> {
        let sched = cosine_schedule(cfg.schedule_steps)?.with_form(cfg.noise_form);
        let space = ctx.space;
        let timestep = perturbation_timestep(motion, cfg.perturbation, sched.steps());
        let alpha = sched.corruption_weight(timestep);

        let conditional = cfg.variant == Variant::Baseline && !priors.is_empty();
        let (proportion, padding, slots, mode, steps) = if conditional {
            (1.0, PaddingStrategy::Repeat, CorruptSlots::CurOnly, DenoiseMode::PrevPinned, 1)
        } else {
            (cfg.proportion, cfg.padding, CorruptSlots::Both, DenoiseMode::Joint, cfg.steps)
        };
        let mut proposals = build_inference_proposals(priors, cfg.n_test, proportion, padding, &space, rng)?;
        proposals.timestep = timestep;
        let noise = standard_normal_rows(cfg.n_test, rng);
        let proposals = corrupt_proposals(&proposals, alpha, &noise, slots)?;
        let ctx = ctx.with_mode(mode);
        let cands = ddim_refine(&proposals, steps, self.denoiser, &ctx, &sched)?;

        Ok(PairOutput {
            candidates: gate(cands, &cfg.tracker),
            assoc_slots: proposals.prior_count(),
            timestep,
            fallback: proposals.fallback || (cfg.variant == Variant::Baseline && priors.is_empty()),
        })
    }

    /// Tracks a whole sequence. Frame 0 is refined as a detection pair
    /// `(0, 0)`; each later frame `k` as `(k - 1, k)` with the tracker's
    /// output at `k - 1` as priors.
    pub fn run_sequence(&self, source: &dyn EvidenceSource, seed: u64) -> Result<TrackingResult> {
        let n = source.num_frames();
        if n == 0 {
            return Err(Error::InvalidArgument("sequence has no frames".into()));
        }
        let (w, h) = source.image_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prior_rng = ChaCha8Rng::seed_from_u64(seed ^ PRIOR_STREAM);
        let mut tracker = Tracker::new(self.cfg.tracker)?;
        let mut result = TrackingResult::default();
        let ids = |rows: &[TrackedBox]| -> Vec<(u64, BBox)> { rows.iter().map(|r| (r.id, r.bbox)).collect() };

        for k in 0..n as u32 {
            let cfg = match &self.frame_override {
                Some(f) => {
                    let c = f(k, &self.cfg);
                    c.validate()?;
                    c
                }
                None => self.cfg.clone(),
            };
            let (prev, cur) = if k == 0 { (0, 0) } else { (k - 1, k) };
            let mut priors: Vec<BBox> = if k == 0 {
                vec![]
            } else {
                result.frame(k - 1).iter().map(|r| r.bbox).collect()
            };
            if let Some(p) = &self.prior_perturbation {
                priors = perturb_boxes(&priors, p.alpha, (w, h), &p.noise, &mut prior_rng)?;
            }
            let motion = if k >= 2 {
                motion_ratio(&ids(result.frame(k - 2)), &ids(result.frame(k - 1)))
            } else {
                cfg.first_motion
            };
            let space = SignalSpace::new(w, h, cfg.signal_scale);
            let ctx = FrameContext::new(prev, cur, space, source.evidence(prev as usize, cur as usize))?;
            let out = self.run_pair(&cfg, ctx, &priors, motion, &mut rng)?;
            tracker.set_assoc_slots(out.assoc_slots);
            let rows = tracker.step(k, &out.candidates)?;
            result.push(k, rows);
        }
        Ok(result)
    }
}

/// Association gate, paired NMS, current-frame score gate, then NMS on the
/// current-frame boxes.
pub fn gate(cands: Vec<Candidate>, cfg: &TrackerConfig) -> Vec<Candidate> {
    let cands: Vec<Candidate> = cands.into_iter().filter(|c| c.assoc > cfg.conf_thresh).collect();
    let pairs: Vec<_> = cands.iter().map(|c| c.pair).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.assoc).collect();
    let cands: Vec<Candidate> = nms3d(&pairs, &scores, cfg.nms3d_thresh)
        .into_iter()
        .map(|i| cands[i])
        .filter(|c| c.cls_cur > cfg.det_thresh)
        .collect();
    let boxes: Vec<BBox> = cands.iter().map(|c| c.pair.cur).collect();
    let scores: Vec<f64> = cands.iter().map(|c| c.cls_cur).collect();
    nms2d(&boxes, &scores, cfg.nms2d_thresh)
        .into_iter()
        .map(|i| cands[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{OracleConfig, OracleDenoiser};
    use crate::geometry::{iou3d, PairedBox};
    use crate::metrics::evaluate;
    use crate::simulator::{generate, SceneSpec};

    fn oracle(f: f64) -> OracleDenoiser {
        OracleDenoiser::new(OracleConfig::with_fidelity(f)).unwrap()
    }

    #[test]
    fn two_frame_scene_with_perfect_oracle() {
        let gt = generate(&SceneSpec { separated: true, ..SceneSpec::linear(4, 2, 1) }).unwrap();
        let o = oracle(1.0);
        let p = Pipeline::new(PipelineConfig::default(), &o).unwrap();
        let res = p.run_sequence(&gt, 0).unwrap();
        assert_eq!(res.frame(0).len(), 4);
        assert_eq!(res.frame(1).len(), 4);
        let m = evaluate(&gt, &res, 0.5).unwrap();
        assert_eq!(m.idsw, 0);
        assert_eq!(m.mota, 1.0);
    }

    #[test]
    fn perfect_oracle_pair_output_is_gt() {
        let gt = generate(&SceneSpec::linear(5, 3, 2)).unwrap();
        let o = oracle(1.0);
        let cfg = PipelineConfig::default();
        let p = Pipeline::new(cfg.clone(), &o).unwrap();
        let space = SignalSpace::new(1280.0, 720.0, 2.0);
        let ctx = FrameContext::new(1, 2, space, gt.evidence(1, 2)).unwrap();
        let priors: Vec<BBox> = gt.frames[1].iter().map(|o| o.bbox).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = p.run_pair(&cfg, ctx, &priors, 0.1, &mut rng).unwrap();
        let pairs = gt.pairs(1, 2);
        assert_eq!(out.candidates.len(), pairs.len());
        for c in &out.candidates {
            assert!(pairs.iter().any(|g| iou3d(&c.pair, &g.pair) > 1.0 - 1e-9));
            assert!(c.assoc > cfg.tracker.conf_thresh);
        }
        assert!(out.candidates.len() <= cfg.n_test);
    }

    #[test]
    fn no_priors_falls_back_to_padding() {
        let gt = generate(&SceneSpec::linear(3, 2, 4)).unwrap();
        let o = oracle(1.0);
        for variant in [Variant::Diffusion, Variant::Baseline] {
            let cfg = PipelineConfig {
                variant,
                ..Default::default()
            };
            let p = Pipeline::new(cfg.clone(), &o).unwrap();
            let ctx = FrameContext::new(0, 1, SignalSpace::new(1280.0, 720.0, 2.0), gt.evidence(0, 1)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = p.run_pair(&cfg, ctx, &[], 0.25, &mut rng).unwrap();
            assert!(out.fallback);
            assert_eq!(out.assoc_slots, 0);
            assert!(!out.candidates.is_empty());
        }
    }

    #[test]
    fn detection_mode_pairs_are_identical() {
        let gt = generate(&SceneSpec::linear(4, 2, 5)).unwrap();
        let o = oracle(1.0);
        let cfg = PipelineConfig::default();
        let p = Pipeline::new(cfg.clone(), &o).unwrap();
        let ctx = FrameContext::new(1, 1, SignalSpace::new(1280.0, 720.0, 2.0), gt.evidence(1, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for c in p.run_pair(&cfg, ctx, &[], 0.25, &mut rng).unwrap().candidates {
            assert_eq!(c.pair.prev, c.pair.cur);
        }
    }

    #[test]
    fn deterministic_runs() {
        let gt = generate(&SceneSpec::crowded(6, 8, 6)).unwrap();
        let o = oracle(0.9);
        let p = Pipeline::new(PipelineConfig::default(), &o).unwrap();
        assert_eq!(p.run_sequence(&gt, 42).unwrap(), p.run_sequence(&gt, 42).unwrap());
    }

    #[test]
    fn zero_perturbation_matches_plain_run() {
        let gt = generate(&SceneSpec::crowded(6, 8, 7)).unwrap();
        let o = oracle(0.9);
        let plain = Pipeline::new(PipelineConfig::default(), &o).unwrap().run_sequence(&gt, 9).unwrap();
        let zero = Pipeline::new(PipelineConfig::default(), &o)
            .unwrap()
            .with_prior_perturbation(PriorPerturbation {
                alpha: 0.0,
                noise: NoiseBox::default(),
            })
            .run_sequence(&gt, 9)
            .unwrap();
        assert_eq!(plain, zero);
    }

    #[test]
    fn frame_override_is_applied() {
        let gt = generate(&SceneSpec::linear(3, 4, 8)).unwrap();
        let o = oracle(1.0);
        let p = Pipeline::new(PipelineConfig::default(), &o)
            .unwrap()
            .with_frame_override(Box::new(|k, c| PipelineConfig {
                n_test: if k % 2 == 0 { 50 } else { 0 },
                ..c.clone()
            }));
        assert!(p.run_sequence(&gt, 0).is_err());
    }

    #[test]
    fn gating_soundness() {
        let b = BBox::new(100.0, 100.0, 20.0, 40.0);
        let mk = |slot, assoc, cls| Candidate {
            slot,
            pair: PairedBox::duplicated(b.translated(slot as f64 * 50.0, 0.0)),
            cls_prev: cls,
            cls_cur: cls,
            assoc,
        };
        let out = gate(
            vec![mk(0, 0.25, 0.9), mk(1, 0.3, 0.9), mk(2, 0.9, 0.7), mk(3, 0.9, 0.71)],
            &TrackerConfig::default(),
        );
        let slots: Vec<usize> = out.iter().map(|c| c.slot).collect();
        assert_eq!(slots, vec![1, 3]);
    }

    #[test]
    fn invalid_config_rejected() {
        let o = oracle(1.0);
        for cfg in [
            PipelineConfig {
                n_test: 0,
                ..Default::default()
            },
            PipelineConfig {
                steps: 0,
                ..Default::default()
            },
            PipelineConfig {
                proportion: 1.5,
                ..Default::default()
            },
        ] {
            assert!(Pipeline::new(cfg, &o).is_err());
        }
    }
}
