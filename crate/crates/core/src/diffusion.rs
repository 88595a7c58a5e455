//! Noise schedules, forward noising, DDIM reverse steps, classifier-free
//! guidance and the per-sample noise-prediction loss.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Grid, LatentTensor};
use crate::text_encoder::TextEmbedding;

/// Final cumulative alpha of the linear schedule.
pub const LINEAR_ALPHA_END: f64 = 1e-4;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScheduleKind {
    /// Cumulative alpha falls linearly from 1 to [`LINEAR_ALPHA_END`].
    #[default]
    LinearAlphaBar,
    /// Squared-cosine cumulative alpha with per-step beta capped at 0.999.
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::LinearAlphaBar => "linear-alpha-bar",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-alpha-bar" => Ok(ScheduleKind::LinearAlphaBar),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::UnknownScheduleKind(other.to_string())),
        }
    }
}

/// Cumulative signal levels `alpha[0..=T]` with `alpha[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::EmptySchedule);
        }
        let t_max = steps as f64;
        let alphas = match kind {
            ScheduleKind::LinearAlphaBar => (0..=steps)
                .map(|t| 1.0 - (t as f64 / t_max) * (1.0 - LINEAR_ALPHA_END))
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / t_max + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                let mut alphas = Vec::with_capacity(steps + 1);
                alphas.push(1.0);
                let mut acc = 1.0;
                for t in 1..=steps {
                    let beta = (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA);
                    acc *= 1.0 - beta;
                    alphas.push(acc);
                }
                alphas
            }
        };
        Self::from_alphas(alphas)
    }

    /// Validates an explicit sequence. A single `[1.0]` is the degenerate
    /// zero-step schedule.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        match alphas.first() {
            None => return Err(Error::InvalidSchedule("no alphas".into())),
            Some(&a0) if a0 != 1.0 => return Err(Error::InvalidSchedule(format!("alpha[0] = {a0}, expected 1"))),
            _ => {}
        }
        for (t, w) in alphas.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha[{}] = {} is not below alpha[{t}] = {}",
                    t + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidSchedule(format!("alpha {a} outside (0, 1]")));
        }
        Ok(Self { alphas })
    }

    /// `T`, the index of the last noise level.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.steps() })
    }

    /// Standard deviation of the stochastic part of a reverse transition
    /// `t → t_prev`; `eta = 1` is the ancestral sampler, `eta = 0` is DDIM.
    pub fn reverse_sigma(&self, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
        let a_t = self.alpha(t)?;
        let a_p = self.alpha(t_prev)?;
        if t == t_prev || eta == 0.0 {
            return Ok(0.0);
        }
        Ok(eta * ((1.0 - a_p) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_p).max(0.0).sqrt())
    }

    /// Descending timesteps visited by a `count`-step sampler starting at `T`.
    /// The final transition always targets 0.
    pub fn sampler_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let max = self.steps();
        if count == 0 || count > max {
            return Err(Error::TooManySteps { steps: count, max });
        }
        Ok((1..=count).rev().map(|k| (k * max + count / 2) / count).collect())
    }
}

/// Standard-normal tensor together with the seed and stream that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDraw {
    pub seed: u64,
    pub stream: u64,
    pub noise: Grid,
}

impl GaussianDraw {
    pub fn sample(seed: u64, stream: u64, height: usize, width: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let data = (0..height * width * channels)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            seed,
            stream,
            noise: Grid {
                height,
                width,
                channels,
                data,
            },
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            seed: 0,
            stream: 0,
            noise: Grid::zeros(height, width, channels),
        }
    }
}

/// `z_t = sqrt(alpha_t) z0 + sqrt(1 - alpha_t) eps`.
pub fn forward_noise(z0: &LatentTensor, t: usize, eps: &Grid, sched: &NoiseSchedule) -> Result<LatentTensor> {
    let a = sched.alpha(t)?;
    z0.grid().check_shape(eps)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let mut out = z0.grid().clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = sa * *o + sn * e;
    }
    Ok(LatentTensor(out))
}

/// One reverse step from level `t` to `t_prev`. With `eta = 0` the step is
/// deterministic and `noise` is ignored.
pub fn ddim_step(
    z_t: &LatentTensor,
    eps_pred: &Grid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Grid>,
) -> Result<LatentTensor> {
    ddim_step_clipped(z_t, eps_pred, t, t_prev, sched, eta, noise, None)
}

/// [`ddim_step`] with the predicted clean latent clamped to `[-bound, bound]`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step_clipped(
    z_t: &LatentTensor,
    eps_pred: &Grid,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&Grid>,
    bound: Option<f64>,
) -> Result<LatentTensor> {
    if t_prev > t {
        return Err(Error::StepOrder { t, t_prev });
    }
    let a_t = sched.alpha(t)?;
    let a_p = sched.alpha(t_prev)?;
    z_t.grid().check_shape(eps_pred)?;
    if t_prev == t {
        return Ok(z_t.clone());
    }
    if a_t <= 0.0 {
        return Err(Error::ZeroAlpha(t));
    }
    let sigma = sched.reverse_sigma(t, t_prev, eta)?;
    if sigma > 0.0 {
        match noise {
            Some(w) => z_t.grid().check_shape(w)?,
            None => {
                return Err(Error::Shape {
                    expected: "a noise draw for eta > 0".into(),
                    actual: "none".into(),
                })
            }
        }
    }
    let (sa_t, sn_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
    let sa_p = a_p.sqrt();
    let dir = (1.0 - a_p - sigma * sigma).max(0.0).sqrt();
    let mut out = z_t.grid().clone();
    for (i, o) in out.data.iter_mut().enumerate() {
        let e = eps_pred.data[i];
        let mut x0 = (*o - sn_t * e) / sa_t;
        if let Some(b) = bound {
            x0 = x0.clamp(-b, b);
        }
        let mut v = sa_p * x0 + dir * e;
        if sigma > 0.0 {
            v += sigma * noise.expect("checked above").data[i];
        }
        *o = v;
    }
    Ok(LatentTensor(out))
}

/// `eps_uncond + scale * (eps_cond - eps_uncond)`.
pub fn cfg_predict(eps_cond: &Grid, eps_uncond: &Grid, scale: f64) -> Result<Grid> {
    eps_cond.check_shape(eps_uncond)?;
    let mut out = eps_uncond.clone();
    for (o, c) in out.data.iter_mut().zip(&eps_cond.data) {
        *o += scale * (c - *o);
    }
    Ok(out)
}

/// A noise predictor that can backpropagate a gradient on its output into a
/// flat parameter-gradient buffer.
pub trait DifferentiablePredictor {
    type Tape;

    fn param_count(&self) -> usize;

    fn forward_tape(&self, z_t: &LatentTensor, t: usize, gamma: &TextEmbedding) -> Result<(Grid, Self::Tape)>;

    fn backward(&self, tape: Self::Tape, grad_out: &Grid, grad: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `||eps - eps_theta(z_t, t, gamma)||^2` with `z_t` from [`forward_noise`],
/// and its exact gradient with respect to the predictor's parameters.
pub fn single_loss<P: DifferentiablePredictor>(
    z0: &LatentTensor,
    eps: &Grid,
    t: usize,
    gamma: &TextEmbedding,
    model: &P,
    sched: &NoiseSchedule,
) -> Result<LossGrad> {
    let z_t = forward_noise(z0, t, eps, sched)?;
    let (pred, tape) = model.forward_tape(&z_t, t, gamma)?;
    pred.check_shape(eps)?;
    let mut diff = pred.clone();
    let mut loss = 0.0;
    for (d, e) in diff.data.iter_mut().zip(&eps.data) {
        let r = *d - e;
        loss += r * r;
        *d = 2.0 * r;
    }
    let mut grad = vec![0.0; model.param_count()];
    model.backward(tape, &diff, &mut grad)?;
    Ok(LossGrad { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn latent(seed: u64) -> LatentTensor {
        LatentTensor(GaussianDraw::sample(seed, 99, 4, 4, 3).noise)
    }

    #[test]
    fn schedule_endpoints() {
        for kind in [ScheduleKind::LinearAlphaBar, ScheduleKind::Cosine] {
            let s = NoiseSchedule::new(1000, kind).unwrap();
            assert_eq!(s.alpha(0).unwrap(), 1.0);
            assert!(s.alpha(1000).unwrap() < 1e-3, "{kind}");
            let one = NoiseSchedule::new(1, kind).unwrap();
            assert_eq!(one.alphas().len(), 2);
            let a1 = one.alpha(1).unwrap();
            assert!(a1 > 0.0 && a1 < 1.0);
        }
        assert!(matches!(
            NoiseSchedule::new(0, ScheduleKind::Cosine),
            Err(Error::EmptySchedule)
        ));
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn from_alphas_validates() {
        assert!(NoiseSchedule::from_alphas(vec![1.0]).is_ok());
        assert!(NoiseSchedule::from_alphas(vec![0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphas(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn sampler_timesteps_cover_range() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        let ts = s.sampler_timesteps(25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 50);
        assert_eq!(*ts.last().unwrap(), 2);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        let paper = NoiseSchedule::new(1000, ScheduleKind::LinearAlphaBar).unwrap();
        let ts = paper.sampler_timesteps(100).unwrap();
        assert_eq!((ts[0], ts[99]), (1000, 10));
        assert!(s.sampler_timesteps(51).is_err());
    }

    #[test]
    fn forward_noise_rays() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        let z0 = latent(1);
        let eps = GaussianDraw::sample(2, 0, 4, 4, 3).noise;
        assert_eq!(forward_noise(&z0, 0, &eps, &s).unwrap(), z0);

        let zero = Grid::zeros(4, 4, 3);
        let a = s.alpha(20).unwrap();
        let out = forward_noise(&z0, 20, &zero, &s).unwrap();
        for (o, z) in out.grid().data.iter().zip(&z0.grid().data) {
            assert!((o - a.sqrt() * z).abs() < 1e-15);
        }
        let ones = Grid::from_vec(4, 4, 3, vec![1.0; 48]).unwrap();
        let out = forward_noise(&LatentTensor::zeros(4, 4, 3), 20, &ones, &s).unwrap();
        assert!(out.grid().data.iter().all(|v| (v - (1.0 - a).sqrt()).abs() < 1e-15));

        assert!(forward_noise(&z0, 51, &eps, &s).is_err());
        assert!(forward_noise(&z0, 3, &Grid::zeros(2, 2, 3), &s).is_err());
    }

    #[test]
    fn forward_noise_preserves_unit_variance() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        for t in [1, 10, 25, 49] {
            let z0 = GaussianDraw::sample(11, t as u64, 100, 100, 1).noise;
            let eps = GaussianDraw::sample(12, t as u64, 100, 100, 1).noise;
            let zt = forward_noise(&LatentTensor(z0), t, &eps, &s).unwrap();
            let n = zt.grid().numel() as f64;
            let mean = zt.grid().data.iter().sum::<f64>() / n;
            let var = zt.grid().data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    /// Substituting the forward process into one DDIM step to level 0 gives
    /// `(sqrt(a) z0 + sqrt(1-a) e - sqrt(1-a) e) / sqrt(a) = z0`.
    #[test]
    fn ddim_recovers_clean_latent_with_true_noise() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        let z0 = latent(5);
        let eps = GaussianDraw::sample(6, 0, 4, 4, 3).noise;
        for t in [1, 17, 50] {
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, &eps, t, 0, &s, 0.0, None).unwrap();
            let rel = back.l2_distance(&z0) / z0.grid().squared_norm().sqrt();
            assert!(rel < 1e-6, "t={t} rel={rel}");
        }
    }

    #[test]
    fn ddim_degenerate_and_errors() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        let z = latent(3);
        let e = latent(4).0;
        assert_eq!(ddim_step(&z, &e, 10, 10, &s, 0.0, None).unwrap(), z);
        assert!(matches!(
            ddim_step(&z, &e, 10, 11, &s, 0.0, None),
            Err(Error::StepOrder { .. })
        ));
        let a = ddim_step(&z, &e, 10, 8, &s, 0.0, None).unwrap();
        let b = ddim_step(&z, &e, 10, 8, &s, 0.0, None).unwrap();
        assert_eq!(a.grid().to_le_bytes(), b.grid().to_le_bytes());
        assert!(ddim_step(&z, &e, 10, 8, &s, 1.0, None).is_err());
    }

    #[test]
    fn ddim_eta_is_seed_reproducible() {
        let s = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
        let z = latent(3);
        let e = latent(4).0;
        let w1 = GaussianDraw::sample(9, 1, 4, 4, 3).noise;
        let w2 = GaussianDraw::sample(9, 1, 4, 4, 3).noise;
        let a = ddim_step(&z, &e, 30, 20, &s, 0.7, Some(&w1)).unwrap();
        let b = ddim_step(&z, &e, 30, 20, &s, 0.7, Some(&w2)).unwrap();
        assert_eq!(a, b);
        let det = ddim_step(&z, &e, 30, 20, &s, 0.0, None).unwrap();
        assert_ne!(a, det);
    }

    #[test]
    fn cfg_endpoints() {
        let c = latent(1).0;
        let u = latent(2).0;
        assert!(cfg_predict(&c, &u, 1.0).unwrap().max_abs_diff(&c) < 1e-12);
        assert_eq!(cfg_predict(&c, &u, 0.0).unwrap(), u);
        assert!(cfg_predict(&c, &c, 7.5).unwrap().max_abs_diff(&c) < 1e-12);
        assert!(cfg_predict(&c, &Grid::zeros(2, 2, 2), 1.0).is_err());
    }

    struct ZeroModel;
    struct OracleModel(Grid);

    impl DifferentiablePredictor for ZeroModel {
        type Tape = ();
        fn param_count(&self) -> usize {
            0
        }
        fn forward_tape(&self, z: &LatentTensor, _: usize, _: &TextEmbedding) -> Result<(Grid, ())> {
            let (h, w, c) = z.dims();
            Ok((Grid::zeros(h, w, c), ()))
        }
        fn backward(&self, _: (), _: &Grid, _: &mut [f64]) -> Result<()> {
            Ok(())
        }
    }

    impl DifferentiablePredictor for OracleModel {
        type Tape = ();
        fn param_count(&self) -> usize {
            0
        }
        fn forward_tape(&self, _: &LatentTensor, _: usize, _: &TextEmbedding) -> Result<(Grid, ())> {
            Ok((self.0.clone(), ()))
        }
        fn backward(&self, _: (), _: &Grid, _: &mut [f64]) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn single_loss_stubs() {
        let s = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();
        let gamma = TextEmbedding {
            tokens: 1,
            dim: 2,
            data: vec![0.0, 0.0],
        };
        let z0 = latent(1);
        let eps = latent(2).0;
        let zero = single_loss(&z0, &eps, 7, &gamma, &ZeroModel, &s).unwrap();
        assert!((zero.loss - eps.squared_norm()).abs() < 1e-12);
        let perfect = single_loss(&z0, &eps, 7, &gamma, &OracleModel(eps.clone()), &s).unwrap();
        assert_eq!(perfect.loss, 0.0);
    }

    proptest! {
        #[test]
        fn schedules_are_strictly_decreasing(steps in prop::sample::select(vec![1usize, 10, 50, 1000]), cosine in any::<bool>()) {
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::LinearAlphaBar };
            let s = NoiseSchedule::new(steps, kind).unwrap();
            prop_assert_eq!(s.alpha(0).unwrap(), 1.0);
            prop_assert!(s.alphas().windows(2).all(|w| w[1] < w[0]));
            prop_assert!(s.alphas().iter().all(|&a| a > 0.0 && a <= 1.0));
        }

        #[test]
        fn cfg_is_affine_in_scale(s1 in -10.0f64..10.0, s2 in -10.0f64..10.0, seed in 0u64..100) {
            let c = GaussianDraw::sample(seed, 0, 2, 2, 2).noise;
            let u = GaussianDraw::sample(seed, 1, 2, 2, 2).noise;
            let a = cfg_predict(&c, &u, s1).unwrap();
            let b = cfg_predict(&c, &u, s2).unwrap();
            let m = cfg_predict(&c, &u, (s1 + s2) / 2.0).unwrap();
            for i in 0..a.numel() {
                let lhs = a.data[i] + b.data[i];
                let rhs = 2.0 * m.data[i];
                prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }
}
