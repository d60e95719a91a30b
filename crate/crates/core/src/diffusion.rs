//! Forward diffusion over paired boxes and the DDIM refinement loop.
//!
//! Rows are 8-vectors `[prev cx, cy, w, h, cur cx, cy, w, h]` in signal space:
//! every coordinate is normalized by the image extent to `[0, 1]` and mapped
//! affinely onto `[-scale, scale]`. [`SignalSpace`] owns that mapping.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Candidate, Denoiser, FrameContext};
use crate::error::{Error, Result};
use crate::geometry::{BBox, PairedBox};

pub type Row = [f64; 8];

/// Cosine schedule offset.
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Which coefficient multiplies the noise in the closed-form marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseForm {
    /// `x_t = sqrt(abar) x_0 + (1 - abar) eps`.
    #[default]
    Linear,
    /// `x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps`, the variance-preserving form.
    VariancePreserving,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    /// `beta[t]` for `t` in `1..=steps`; index 0 holds 0 and is never used.
    beta: Vec<f64>,
    form: NoiseForm,
}

/// Squared-cosine schedule over `steps` timesteps.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let f = |t: usize| {
        let r = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (r * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    let mut beta = vec![0.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        beta[t] = (1.0 - f(t) / f(t - 1)).min(MAX_BETA);
        // Cumulative product reproduces f(t)/f(0) everywhere the clip is inactive.
        alpha_bar[t] = if beta[t] < MAX_BETA {
            f(t) / f0
        } else {
            alpha_bar[t - 1] * (1.0 - beta[t])
        };
    }
    Ok(NoiseSchedule {
        steps,
        alpha_bar,
        beta,
        form: NoiseForm::default(),
    })
}

impl NoiseSchedule {
    pub fn with_form(mut self, form: NoiseForm) -> Self {
        self.form = form;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn form(&self) -> NoiseForm {
        self.form
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step variance; `t` must lie in `1..=steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::TimestepOutOfRange { t, max: self.steps });
        }
        Ok(())
    }

    /// Coefficient on the noise term of the marginal at `t`.
    pub fn noise_coefficient(&self, t: usize) -> f64 {
        let ab = self.alpha_bar[t];
        match self.form {
            NoiseForm::Linear => 1.0 - ab,
            NoiseForm::VariancePreserving => (1.0 - ab).max(0.0).sqrt(),
        }
    }

    /// Corruption weight used by the inference-time interpolation,
    /// `1 - sqrt(abar_t)`.
    pub fn corruption_weight(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar[t.min(self.steps)].sqrt()
    }

    /// Deterministic (eta = 0) DDIM transition from `t` to `t_next` given a
    /// clean-sample prediction.
    pub fn ddim_step(&self, z_t: &Row, z0: &Row, t: usize, t_next: usize) -> Row {
        let c_t = self.noise_coefficient(t);
        let c_next = self.noise_coefficient(t_next);
        let sa_t = self.alpha_bar[t].sqrt();
        let sa_next = self.alpha_bar[t_next].sqrt();
        let mut out = [0.0; 8];
        for k in 0..8 {
            let eps = if c_t > 1e-12 { (z_t[k] - sa_t * z0[k]) / c_t } else { 0.0 };
            out[k] = sa_next * z0[k] + c_next * eps;
        }
        out
    }
}

/// Closed-form forward noising of a set of rows to step `t`.
pub fn forward_noise(z0: &[Row], t: usize, noise: &[Row], sched: &NoiseSchedule) -> Result<Vec<Row>> {
    sched.check(t)?;
    if z0.len() != noise.len() {
        return Err(Error::Shape(format!("{} rows but {} noise rows", z0.len(), noise.len())));
    }
    let signal = sched.alpha_bar(t).sqrt();
    let coef = sched.noise_coefficient(t);
    Ok(z0
        .iter()
        .zip(noise)
        .map(|(z, e)| std::array::from_fn(|k| signal * z[k] + coef * e[k]))
        .collect())
}

/// One Markov step `x_{t-1} -> x_t` with variance `beta_t`.
pub fn single_step_noise(z: &[Row], t: usize, noise: &[Row], sched: &NoiseSchedule) -> Result<Vec<Row>> {
    sched.check(t)?;
    if t == 0 {
        return Err(Error::TimestepOutOfRange { t, max: sched.steps() });
    }
    if z.len() != noise.len() {
        return Err(Error::Shape(format!("{} rows but {} noise rows", z.len(), noise.len())));
    }
    let beta = sched.beta(t);
    let keep = (1.0 - beta).sqrt();
    let spread = beta.sqrt();
    Ok(z
        .iter()
        .zip(noise)
        .map(|(x, e)| std::array::from_fn(|k| keep * x[k] + spread * e[k]))
        .collect())
}

pub fn standard_normal_rows<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Row> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Mapping between pixel boxes and signal-space rows for one image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSpace {
    pub width: f64,
    pub height: f64,
    pub scale: f64,
}

impl SignalSpace {
    pub fn new(width: f64, height: f64, scale: f64) -> Self {
        Self { width, height, scale }
    }

    fn enc(&self, v: f64, extent: f64) -> f64 {
        (v / extent * 2.0 - 1.0) * self.scale
    }

    fn dec(&self, v: f64, extent: f64) -> f64 {
        let v = v.clamp(-self.scale, self.scale);
        (v / self.scale + 1.0) / 2.0 * extent
    }

    pub fn encode_box(&self, b: &BBox) -> [f64; 4] {
        [
            self.enc(b.cx, self.width),
            self.enc(b.cy, self.height),
            self.enc(b.w, self.width),
            self.enc(b.h, self.height),
        ]
    }

    /// Decodes four signal coordinates, clamping them to the valid range first.
    pub fn decode_box(&self, v: &[f64]) -> BBox {
        BBox::new(
            self.dec(v[0], self.width),
            self.dec(v[1], self.height),
            self.dec(v[2], self.width),
            self.dec(v[3], self.height),
        )
    }

    pub fn encode(&self, p: &PairedBox) -> Row {
        let a = self.encode_box(&p.prev);
        let b = self.encode_box(&p.cur);
        [a[0], a[1], a[2], a[3], b[0], b[1], b[2], b[3]]
    }

    pub fn decode(&self, r: &Row) -> PairedBox {
        PairedBox::new(self.decode_box(&r[..4]), self.decode_box(&r[4..]))
    }

    pub fn clamp(&self, r: &Row) -> Row {
        r.map(|v| v.clamp(-self.scale, self.scale))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaddingStrategy {
    Repeat,
    #[default]
    CatGaussian,
    CatPoisson,
    CatUniform,
    CatFull,
}

impl PaddingStrategy {
    pub const ALL: [PaddingStrategy; 5] = [
        PaddingStrategy::Repeat,
        PaddingStrategy::CatGaussian,
        PaddingStrategy::CatPoisson,
        PaddingStrategy::CatUniform,
        PaddingStrategy::CatFull,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PaddingStrategy::Repeat => "repeat",
            PaddingStrategy::CatGaussian => "cat-gaussian",
            PaddingStrategy::CatPoisson => "cat-poisson",
            PaddingStrategy::CatUniform => "cat-uniform",
            PaddingStrategy::CatFull => "cat-full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Rate of the Poisson padding distribution; samples are standardized to
/// zero mean and unit variance.
const POISSON_RATE: f64 = 4.0;

/// One padding coordinate for the sampled strategies, in signal space.
fn sample_coordinate<R: Rng + ?Sized>(strategy: PaddingStrategy, scale: f64, rng: &mut R) -> f64 {
    match strategy {
        PaddingStrategy::CatPoisson => {
            let k: f64 = Poisson::new(POISSON_RATE).expect("positive rate").sample(rng);
            (k - POISSON_RATE) / POISSON_RATE.sqrt()
        }
        PaddingStrategy::CatUniform => Uniform::new_inclusive(-scale, scale)
            .expect("finite bounds")
            .sample(rng),
        _ => rng.sample(StandardNormal),
    }
}

/// A random single box in signal space, or the full-image box for `CatFull`.
fn padding_box<R: Rng + ?Sized>(strategy: PaddingStrategy, scale: f64, rng: &mut R) -> [f64; 4] {
    match strategy {
        PaddingStrategy::CatFull => [0.0, 0.0, scale, scale],
        s => std::array::from_fn(|_| sample_coordinate(s, scale, rng)),
    }
}

/// Pads ground-truth pairs to exactly `target` signal rows for training.
///
/// Originals come first and are preserved. Sampled strategies draw all eight
/// coordinates independently; `Repeat` cycles the originals and falls back to
/// Gaussian rows when there is nothing to repeat.
pub fn pad_training_pairs<R: Rng + ?Sized>(
    gt: &[PairedBox],
    target: usize,
    strategy: PaddingStrategy,
    space: &SignalSpace,
    rng: &mut R,
) -> Result<Vec<Row>> {
    if gt.len() > target {
        return Err(Error::TooManyPairs {
            have: gt.len(),
            target,
        });
    }
    let mut rows: Vec<Row> = gt.iter().map(|p| space.encode(p)).collect();
    let originals = rows.len();
    while rows.len() < target {
        let row = match strategy {
            PaddingStrategy::Repeat if originals > 0 => rows[rows.len() % originals],
            PaddingStrategy::Repeat => {
                std::array::from_fn(|_| sample_coordinate(PaddingStrategy::CatGaussian, space.scale, rng))
            }
            PaddingStrategy::CatFull => [0.0, 0.0, space.scale, space.scale, 0.0, 0.0, space.scale, space.scale],
            s => std::array::from_fn(|_| sample_coordinate(s, space.scale, rng)),
        };
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    PriorDerived,
    Padded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub rows: Vec<Row>,
    pub timestep: usize,
    pub origins: Vec<Origin>,
    /// Set when priors were requested but none were available.
    pub fallback: bool,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of prior-derived rows; they always occupy the leading slots.
    pub fn prior_count(&self) -> usize {
        self.origins.iter().filter(|o| **o == Origin::PriorDerived).count()
    }
}

/// Builds `n_test` proposal rows from the previous frame's boxes.
///
/// The first `round(proportion * n_test)` rows duplicate priors into both
/// slots, cycling over the priors. The rest are padded per `strategy`; padded
/// rows also carry the same box in both slots.
pub fn build_inference_proposals<R: Rng + ?Sized>(
    priors: &[BBox],
    n_test: usize,
    proportion: f64,
    strategy: PaddingStrategy,
    space: &SignalSpace,
    rng: &mut R,
) -> Result<ProposalSet> {
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&proportion) {
        return Err(Error::InvalidArgument(format!("prior proportion {proportion} outside [0, 1]")));
    }
    let fallback = priors.is_empty() && proportion > 0.0;
    let n_prior = if priors.is_empty() {
        0
    } else {
        round_half_up(proportion * n_test as f64).min(n_test)
    };
    let encoded: Vec<[f64; 4]> = priors.iter().map(|b| space.encode_box(b)).collect();
    let duplicate = |b: [f64; 4]| -> Row { [b[0], b[1], b[2], b[3], b[0], b[1], b[2], b[3]] };

    let mut rows = Vec::with_capacity(n_test);
    let mut origins = Vec::with_capacity(n_test);
    for i in 0..n_prior {
        rows.push(duplicate(encoded[i % encoded.len()]));
        origins.push(Origin::PriorDerived);
    }
    for i in n_prior..n_test {
        let b = match strategy {
            PaddingStrategy::Repeat if !encoded.is_empty() => encoded[i % encoded.len()],
            PaddingStrategy::Repeat => padding_box(PaddingStrategy::CatGaussian, space.scale, rng),
            s => padding_box(s, space.scale, rng),
        };
        rows.push(duplicate(b));
        origins.push(Origin::Padded);
    }
    Ok(ProposalSet {
        rows,
        timestep: 0,
        origins,
        fallback,
    })
}

/// Maps the average inter-frame motion ratio to a corruption timestep.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationSchedule {
    /// `f(x) = 0.4`.
    Constant,
    /// `f(x) = x`.
    Linear,
    /// `f(x) = (e^x - 1) / (e - 1)`.
    Exponential,
    /// `f(x) = ln(x + 1) / ln 2`.
    #[default]
    Logarithmic,
}

impl PerturbationSchedule {
    pub const ALL: [PerturbationSchedule; 4] = [
        PerturbationSchedule::Constant,
        PerturbationSchedule::Linear,
        PerturbationSchedule::Exponential,
        PerturbationSchedule::Logarithmic,
    ];

    pub fn apply(&self, x: f64) -> f64 {
        match self {
            PerturbationSchedule::Constant => 0.4,
            PerturbationSchedule::Linear => x,
            PerturbationSchedule::Exponential => x.exp_m1() / 1f64.exp_m1(),
            PerturbationSchedule::Logarithmic => x.ln_1p() / std::f64::consts::LN_2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PerturbationSchedule::Constant => "constant",
            PerturbationSchedule::Linear => "linear",
            PerturbationSchedule::Exponential => "exponential",
            PerturbationSchedule::Logarithmic => "logarithmic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// `t = round(1000 * f(x))`, clamped to the schedule length.
pub fn perturbation_timestep(x: f64, f: PerturbationSchedule, max_t: usize) -> usize {
    let x = if x.is_finite() { x.clamp(0.0, 1.0) } else { 0.0 };
    round_half_up(1000.0 * f.apply(x)).min(max_t)
}

/// Which slots of a row receive corruption noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptSlots {
    Both,
    CurOnly,
}

/// Convex interpolation `B = (1 - alpha) B + alpha B_noise` per coordinate.
pub fn corrupt_proposals(p: &ProposalSet, alpha: f64, noise: &[Row], slots: CorruptSlots) -> Result<ProposalSet> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("corruption weight {alpha} outside [0, 1]")));
    }
    if noise.len() != p.rows.len() {
        return Err(Error::Shape(format!("{} rows but {} noise rows", p.rows.len(), noise.len())));
    }
    let first = match slots {
        CorruptSlots::Both => 0,
        CorruptSlots::CurOnly => 4,
    };
    let rows = p
        .rows
        .iter()
        .zip(noise)
        .map(|(r, e)| {
            let mut out = *r;
            for k in first..8 {
                out[k] = (1.0 - alpha) * r[k] + alpha * e[k];
            }
            out
        })
        .collect();
    Ok(ProposalSet { rows, ..p.clone() })
}

/// Evenly spaced descending timesteps starting at `t_start`, one per stage.
pub fn ddim_ladder(t_start: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| round_half_up(t_start as f64 * (steps - i) as f64 / steps as f64))
        .collect()
}

/// Iteratively denoises a proposal set and returns pixel-space candidates.
///
/// Each stage asks the denoiser for a clean prediction, clamps it to the
/// signal range and, except at the last stage, moves the rows to the next
/// ladder timestep with a deterministic DDIM update. The last stage's
/// prediction and scores are emitted; `slot` is the proposal row index.
pub fn ddim_refine(
    p: &ProposalSet,
    steps: usize,
    denoiser: &dyn Denoiser,
    ctx: &FrameContext,
    sched: &NoiseSchedule,
) -> Result<Vec<Candidate>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ddim_refine needs at least one step".into()));
    }
    sched.check(p.timestep)?;
    let space = ctx.space;
    let ladder = ddim_ladder(p.timestep, steps);
    let mut z = p.rows.clone();
    for (stage, &t) in ladder.iter().enumerate() {
        let preds = denoiser.denoise(&z, t, ctx)?;
        if preds.len() != z.len() {
            return Err(Error::Denoiser(format!(
                "returned {} predictions for {} rows",
                preds.len(),
                z.len()
            )));
        }
        let z0: Vec<Row> = preds.iter().map(|pr| space.clamp(&pr.z0)).collect();
        match ladder.get(stage + 1) {
            Some(&t_next) => {
                for (row, clean) in z.iter_mut().zip(&z0) {
                    *row = sched.ddim_step(row, clean, t, t_next);
                }
            }
            None => {
                return Ok(preds
                    .iter()
                    .zip(&z0)
                    .enumerate()
                    .map(|(slot, (pr, clean))| Candidate {
                        slot,
                        pair: space.decode(clean),
                        cls_prev: pr.cls_prev,
                        cls_cur: pr.cls_cur,
                        assoc: pr.assoc,
                    })
                    .collect());
            }
        }
    }
    unreachable!("ladder has at least one stage")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Evidence, IdentityDenoiser, Prediction};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> SignalSpace {
        SignalSpace::new(1280.0, 720.0, 2.0)
    }

    #[test]
    fn cosine_schedule_invariants() {
        let s = cosine_schedule(1000).unwrap();
        assert_abs_diff_eq!(s.alpha_bar(0), 1.0, epsilon = 1e-6);
        assert!(s.alpha_bars().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar(1000) < 1e-3);
        assert!((1..=1000).all(|t| s.beta(t) > 0.0 && s.beta(t) < 1.0));
        // Frozen from an independent evaluation of cos^2 ratio at t = 500.
        assert_abs_diff_eq!(s.alpha_bar(500), 0.493_843_590_440_637_75, epsilon = 1e-12);
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn forward_noise_edge_cases() {
        let s = cosine_schedule(1000).unwrap();
        let z0 = vec![[0.3, -0.2, 0.1, 0.5, 1.0, 1.5, -1.0, 0.0]];
        let zero = vec![[0.0; 8]];
        let out = forward_noise(&z0, 700, &zero, &s).unwrap();
        for k in 0..8 {
            assert_abs_diff_eq!(out[0][k], s.alpha_bar(700).sqrt() * z0[0][k], epsilon = 1e-15);
        }
        let e = vec![[1.0; 8]];
        let at0 = forward_noise(&z0, 0, &e, &s).unwrap();
        for k in 0..8 {
            assert_abs_diff_eq!(at0[0][k], z0[0][k], epsilon = 1e-12);
        }
        assert!(matches!(
            forward_noise(&z0, 1001, &zero, &s),
            Err(Error::TimestepOutOfRange { .. })
        ));
    }

    #[test]
    fn forward_noise_is_affine_with_exact_coefficients() {
        for form in [NoiseForm::Linear, NoiseForm::VariancePreserving] {
            let s = cosine_schedule(1000).unwrap().with_form(form);
            let t = 400;
            let ab = s.alpha_bar(t);
            let expect_noise = match form {
                NoiseForm::Linear => 1.0 - ab,
                NoiseForm::VariancePreserving => (1.0 - ab).sqrt(),
            };
            for k in 0..8 {
                let mut basis = [0.0; 8];
                basis[k] = 1.0;
                let from_signal = forward_noise(&[basis], t, &[[0.0; 8]], &s).unwrap()[0];
                let from_noise = forward_noise(&[[0.0; 8]], t, &[basis], &s).unwrap()[0];
                assert_abs_diff_eq!(from_signal[k], ab.sqrt(), epsilon = 1e-15);
                assert_abs_diff_eq!(from_noise[k], expect_noise, epsilon = 1e-15);
                for j in (0..8).filter(|&j| j != k) {
                    assert_eq!(from_signal[j], 0.0);
                    assert_eq!(from_noise[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn single_step_edge_cases() {
        let s = cosine_schedule(1000).unwrap();
        let z = vec![[0.7, -0.1, 0.2, 0.3, 0.0, 1.0, 2.0, -2.0]];
        let out = single_step_noise(&z, 1, &[[0.0; 8]], &s).unwrap();
        for k in 0..8 {
            assert_abs_diff_eq!(out[0][k], (1.0 - s.beta(1)).sqrt() * z[0][k], epsilon = 1e-15);
        }
        // beta_1 is tiny, so one step barely moves the input.
        assert!(s.beta(1) < 1e-4);
        let noisy = single_step_noise(&z, 1, &[[1.0; 8]], &s).unwrap();
        for k in 0..8 {
            assert!((noisy[0][k] - z[0][k]).abs() < 1e-2);
        }
        assert!(single_step_noise(&z, 0, &[[0.0; 8]], &s).is_err());
    }

    #[test]
    fn signal_space_round_trip_and_clamp() {
        let sp = space();
        let p = PairedBox::new(BBox::new(100.0, 200.0, 40.0, 80.0), BBox::new(1280.0, 0.0, 1280.0, 720.0));
        let back = sp.decode(&sp.encode(&p));
        for (a, b) in back.to_array().iter().zip(p.to_array()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-9);
        }
        assert_eq!(sp.encode(&p)[4..], [2.0, -2.0, 2.0, 2.0]);
        let wild = sp.decode(&[-9.0; 8]);
        assert_eq!(wild.prev, BBox::new(0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn repeat_padding_cycles_originals() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<PairedBox> = (0..10)
            .map(|i| PairedBox::duplicated(BBox::new(50.0 + i as f64 * 60.0, 300.0, 30.0, 60.0)))
            .collect();
        let rows = pad_training_pairs(&gt, 500, PaddingStrategy::Repeat, &sp, &mut rng).unwrap();
        assert_eq!(rows.len(), 500);
        for (i, g) in gt.iter().enumerate() {
            let enc = sp.encode(g);
            assert_eq!(rows[i], enc);
            assert_eq!(rows.iter().filter(|r| **r == enc).count(), 50);
        }
    }

    #[test]
    fn gaussian_padding_from_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows = pad_training_pairs(&[], 500, PaddingStrategy::CatGaussian, &space(), &mut rng).unwrap();
        assert_eq!(rows.len(), 500);
        assert!(rows.iter().all(|r| r.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn too_many_pairs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = vec![PairedBox::default(); 3];
        assert!(matches!(
            pad_training_pairs(&gt, 2, PaddingStrategy::CatGaussian, &space(), &mut rng),
            Err(Error::TooManyPairs { have: 3, target: 2 })
        ));
    }

    #[test]
    fn full_padding_is_image_sized() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = pad_training_pairs(&[], 3, PaddingStrategy::CatFull, &sp, &mut rng).unwrap();
        let full = sp.decode(&rows[0]);
        assert_eq!(full.cur, BBox::new(640.0, 360.0, 1280.0, 720.0));
    }

    #[test]
    fn proposal_counts() {
        let sp = space();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let priors: Vec<BBox> = (0..10).map(|i| BBox::new(60.0 * i as f64 + 40.0, 100.0, 20.0, 50.0)).collect();
        let p = build_inference_proposals(&priors, 500, 0.25, PaddingStrategy::CatGaussian, &sp, &mut rng).unwrap();
        assert_eq!(p.len(), 500);
        assert_eq!(p.prior_count(), 125);
        assert!(p.origins[..125].iter().all(|o| *o == Origin::PriorDerived));

        let none = build_inference_proposals(&priors, 500, 0.0, PaddingStrategy::CatGaussian, &sp, &mut rng).unwrap();
        assert_eq!(none.prior_count(), 0);
        assert!(!none.fallback);

        let seven = &priors[..7];
        let all = build_inference_proposals(seven, 500, 1.0, PaddingStrategy::CatGaussian, &sp, &mut rng).unwrap();
        let counts: Vec<usize> = seven
            .iter()
            .map(|b| {
                let e = sp.encode(&PairedBox::duplicated(*b));
                all.rows.iter().filter(|r| **r == e).count()
            })
            .collect();
        // 500 = 7 * 71 + 3
        assert_eq!(counts, vec![72, 72, 72, 71, 71, 71, 71]);

        let fb = build_inference_proposals(&[], 100, 0.5, PaddingStrategy::CatGaussian, &sp, &mut rng).unwrap();
        assert!(fb.fallback);
        assert_eq!(fb.prior_count(), 0);
        assert_eq!(fb.len(), 100);
        assert!(build_inference_proposals(&priors, 0, 0.5, PaddingStrategy::CatGaussian, &sp, &mut rng).is_err());
    }

    #[test]
    fn perturbation_schedules() {
        use PerturbationSchedule::*;
        assert_eq!(perturbation_timestep(1.0, Logarithmic, 1000), 1000);
        assert_eq!(perturbation_timestep(0.0, Constant, 1000), 400);
        assert_eq!(perturbation_timestep(0.5, Logarithmic, 1000), 585);
        assert_eq!(perturbation_timestep(1.0, Constant, 100), 100);
        for f in PerturbationSchedule::ALL {
            let f0 = f.apply(0.0);
            assert!(f0 == 0.0 || f0 == 0.4);
            assert_abs_diff_eq!(if f == Constant { 1.0 } else { f.apply(1.0) }, 1.0, epsilon = 1e-12);
            let mut last = f.apply(0.0);
            for i in 1..=100 {
                let v = f.apply(i as f64 / 100.0);
                assert!(v >= last && (0.0..=1.0).contains(&v));
                last = v;
            }
        }
    }

    #[test]
    fn corruption_rule() {
        let p = ProposalSet {
            rows: vec![[0.0; 8], [1.0; 8]],
            timestep: 0,
            origins: vec![Origin::Padded; 2],
            fallback: false,
        };
        let noise = vec![[0.8; 8], [-1.0; 8]];
        assert_eq!(corrupt_proposals(&p, 0.0, &noise, CorruptSlots::Both).unwrap().rows, p.rows);
        assert_eq!(corrupt_proposals(&p, 1.0, &noise, CorruptSlots::Both).unwrap().rows, noise);
        let half = corrupt_proposals(&p, 0.5, &noise, CorruptSlots::Both).unwrap();
        assert_eq!(half.rows[0], [0.4; 8]);
        let cur = corrupt_proposals(&p, 1.0, &noise, CorruptSlots::CurOnly).unwrap();
        assert_eq!(cur.rows[1], [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        assert!(corrupt_proposals(&p, 1.5, &noise, CorruptSlots::Both).is_err());
    }

    #[test]
    fn ladder_is_even_and_descending() {
        assert_eq!(ddim_ladder(585, 4), vec![585, 439, 293, 146]);
        assert_eq!(ddim_ladder(100, 1), vec![100]);
        assert_eq!(ddim_ladder(0, 3), vec![0, 0, 0]);
    }

    struct Constant(Row);
    impl Denoiser for Constant {
        fn denoise(&self, z: &[Row], _t: usize, _ctx: &FrameContext) -> Result<Vec<Prediction>> {
            Ok(z.iter()
                .map(|_| Prediction {
                    z0: self.0,
                    cls_prev: 0.9,
                    cls_cur: 0.8,
                    assoc: 0.7,
                })
                .collect())
        }
    }

    fn ctx() -> FrameContext {
        FrameContext::new(0, 1, space(), Evidence::None).unwrap()
    }

    #[test]
    fn ddim_with_constant_denoiser_returns_constant() {
        let s = cosine_schedule(1000).unwrap();
        let c = [0.1, -0.3, -1.5, -1.2, 0.2, -0.2, -1.5, -1.2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ProposalSet {
            rows: standard_normal_rows(6, &mut rng),
            timestep: 700,
            origins: vec![Origin::Padded; 6],
            fallback: false,
        };
        let expect = space().decode(&c);
        for steps in 1..=5 {
            let out = ddim_refine(&p, steps, &Constant(c), &ctx(), &s).unwrap();
            assert_eq!(out.len(), 6);
            for (i, cand) in out.iter().enumerate() {
                assert_eq!(cand.slot, i);
                assert_eq!(cand.pair, expect);
                assert_eq!((cand.cls_prev, cand.cls_cur, cand.assoc), (0.9, 0.8, 0.7));
            }
        }
        assert!(ddim_refine(&p, 0, &Constant(c), &ctx(), &s).is_err());
    }

    #[test]
    fn one_step_equals_single_prediction() {
        let s = cosine_schedule(1000).unwrap();
        let rows = vec![[0.5, 0.5, -1.0, -1.0, 0.6, 0.5, -1.0, -1.0]];
        let p = ProposalSet {
            rows: rows.clone(),
            timestep: 300,
            origins: vec![Origin::Padded],
            fallback: false,
        };
        let out = ddim_refine(&p, 1, &IdentityDenoiser, &ctx(), &s).unwrap();
        assert_eq!(out[0].pair, space().decode(&rows[0]));
    }
}
