//! The time-conditioned noise predictor, its parameters, and attention
//! recording / replay across a sampling trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::diffusion::DifferentiablePredictor;
use crate::error::{Error, Result};
use crate::nn::{AttentionMap, AttentionMode, ParamLayout, UNet, UNetConfig, UNetTape, CROSS_ATTENTION_LAYERS};
use crate::tensor::{Grid, LatentTensor};
use crate::text_encoder::TextEmbedding;

pub const DEFAULT_MAX_PARAMS: usize = 200_000;

/// Flat learnable weights. Every value is exactly representable as `f32`, so
/// checkpoints round-trip without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    values: Vec<f64>,
}

impl DenoiserParams {
    /// Weights ~ N(0, 1/fan_in), biases zero, output convolution zero so the
    /// untrained predictor outputs exactly 0.
    pub fn init(layout: &ParamLayout, seed: u64) -> Self {
        let mut values = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in layout.entries() {
            if e.fan_in == 0 || e.name.starts_with("conv_out.") {
                continue;
            }
            let normal = Normal::new(0.0, 1.0 / (e.fan_in as f64).sqrt()).expect("valid std");
            for v in &mut values[e.range()] {
                *v = normal.sample(&mut rng);
            }
        }
        let mut p = Self { values };
        p.round_to_f32();
        p
    }

    pub fn from_f32(values: &[f32]) -> Self {
        Self {
            values: values.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access; callers must restore f32-representability with
    /// [`DenoiserParams::round_to_f32`] before persisting.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update((*v as f32).to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Network architecture plus its parameter bound.
#[derive(Debug, Clone)]
pub struct Denoiser {
    net: UNet,
}

impl Denoiser {
    pub fn new(config: UNetConfig, max_params: usize) -> Result<Self> {
        let net = UNet::new(config);
        if net.param_count() > max_params {
            return Err(Error::TooManyParameters {
                count: net.param_count(),
                bound: max_params,
            });
        }
        Ok(Self { net })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.net.config
    }

    pub fn layout(&self) -> &ParamLayout {
        self.net.layout()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn architecture_hash(&self) -> String {
        let c = self.config();
        let mut h = Sha256::new();
        h.update(self.layout().hash().as_bytes());
        h.update(format!("{c:?}").as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn init_params(&self, seed: u64) -> DenoiserParams {
        DenoiserParams::init(self.layout(), seed)
    }

    /// One forward pass; in record mode returns the map of every
    /// cross-attention layer.
    pub fn predict_noise(
        &self,
        params: &DenoiserParams,
        z_t: &LatentTensor,
        t: usize,
        gamma: &TextEmbedding,
        mode: PredictMode<'_>,
    ) -> Result<(LatentTensor, Option<Vec<AttentionMap>>)> {
        let theta = params.values();
        match mode {
            PredictMode::Plain => {
                let (out, _) = self.net.forward(theta, z_t.grid(), t, gamma, AttentionMode::Plain)?;
                Ok((LatentTensor(out), None))
            }
            PredictMode::Record => {
                let mut maps = Vec::with_capacity(CROSS_ATTENTION_LAYERS);
                let (out, _) = self
                    .net
                    .forward(theta, z_t.grid(), t, gamma, AttentionMode::Record(&mut maps))?;
                Ok((LatentTensor(out), Some(maps)))
            }
            PredictMode::Replay {
                record,
                step,
                content_index,
            } => {
                let maps = record.maps_at(step)?;
                let (out, _) = self.net.forward(
                    theta,
                    z_t.grid(),
                    t,
                    gamma,
                    AttentionMode::Replay { maps, content_index },
                )?;
                Ok((LatentTensor(out), None))
            }
        }
    }

    /// Binds a parameter vector for loss/gradient evaluation.
    pub fn bind<'a>(&'a self, theta: &'a [f64]) -> BoundDenoiser<'a> {
        BoundDenoiser { net: &self.net, theta }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PredictMode<'a> {
    Plain,
    Record,
    Replay {
        record: &'a AttentionRecord,
        step: usize,
        content_index: &'a [usize],
    },
}

pub struct BoundDenoiser<'a> {
    net: &'a UNet,
    theta: &'a [f64],
}

impl DifferentiablePredictor for BoundDenoiser<'_> {
    type Tape = UNetTape;

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn forward_tape(&self, z_t: &LatentTensor, t: usize, gamma: &TextEmbedding) -> Result<(Grid, UNetTape)> {
        self.net.forward(self.theta, z_t.grid(), t, gamma, AttentionMode::Plain)
    }

    fn backward(&self, tape: UNetTape, grad_out: &Grid, grad: &mut [f64]) -> Result<()> {
        self.net.backward(self.theta, &tape, grad_out, grad);
        Ok(())
    }
}

/// Attention maps of the conditional branch for every step of one sampling
/// trajectory, together with what is needed to check that a replay follows
/// the same trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub timesteps: Vec<usize>,
    pub start: Grid,
    pub tokens: usize,
    /// `steps[k][layer]`.
    pub steps: Vec<Vec<AttentionMap>>,
}

impl AttentionRecord {
    pub fn new(timesteps: Vec<usize>, start: Grid, tokens: usize) -> Self {
        Self {
            timesteps,
            start,
            tokens,
            steps: Vec::new(),
        }
    }

    pub fn maps_at(&self, step: usize) -> Result<&[AttentionMap]> {
        self.steps.get(step).map(Vec::as_slice).ok_or(Error::ReplayExhausted {
            step,
            recorded: self.steps.len(),
        })
    }

    pub fn layers(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }

    pub fn maps(&self) -> impl Iterator<Item = &AttentionMap> {
        self.steps.iter().flatten()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.maps().map(AttentionMap::max_row_sum_error).fold(0.0, f64::max)
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.timesteps.len() && self.steps.iter().all(|s| s.len() == CROSS_ATTENTION_LAYERS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GaussianDraw;
    use crate::text_encoder::TextEncoder;

    fn fixture() -> (Denoiser, DenoiserParams, LatentTensor, TextEmbedding) {
        let d = Denoiser::new(UNetConfig::toy(3, 8), DEFAULT_MAX_PARAMS).unwrap();
        let mut p = d.init_params(3);
        // give the output layer weight so predictions depend on everything
        let out = d.layout().get("conv_out.weight").unwrap().range();
        let noise = GaussianDraw::sample(4, 0, 1, 1, out.len()).noise.data;
        for (v, n) in p.values_mut()[out].iter_mut().zip(noise) {
            *v = 0.05 * n;
        }
        p.round_to_f32();
        let z = LatentTensor(GaussianDraw::sample(5, 0, 8, 8, 3).noise);
        let gamma = TextEncoder::new(7, 8, 10).encode(&[2, 3, 4, 5]).unwrap();
        (d, p, z, gamma)
    }

    #[test]
    fn toy_network_fits_parameter_bound() {
        let d = Denoiser::new(UNetConfig::toy(3, 32), DEFAULT_MAX_PARAMS).unwrap();
        assert!(d.param_count() <= DEFAULT_MAX_PARAMS);
        let tiny = Denoiser::new(UNetConfig::tiny(), 500).unwrap();
        assert!(tiny.param_count() <= 500);
        assert!(matches!(
            Denoiser::new(UNetConfig::toy(3, 32), 1000),
            Err(Error::TooManyParameters { .. })
        ));
    }

    #[test]
    fn fresh_params_predict_zero() {
        let d = Denoiser::new(UNetConfig::toy(3, 8), DEFAULT_MAX_PARAMS).unwrap();
        let p = d.init_params(1);
        let z = LatentTensor(GaussianDraw::sample(5, 0, 8, 8, 3).noise);
        let gamma = TextEncoder::new(7, 8, 10).encode(&[2, 3]).unwrap();
        let (out, _) = d.predict_noise(&p, &z, 10, &gamma, PredictMode::Plain).unwrap();
        assert!(out.grid().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recording_is_observation_only() {
        let (d, p, z, gamma) = fixture();
        let (plain, none) = d.predict_noise(&p, &z, 10, &gamma, PredictMode::Plain).unwrap();
        let (rec, maps) = d.predict_noise(&p, &z, 10, &gamma, PredictMode::Record).unwrap();
        assert!(none.is_none());
        assert_eq!(plain.grid().to_le_bytes(), rec.grid().to_le_bytes());
        let maps = maps.unwrap();
        assert_eq!(maps.len(), CROSS_ATTENTION_LAYERS);
        assert_eq!((maps[0].height, maps[2].height), (4, 8));
        for m in &maps {
            assert!(m.max_row_sum_error() < 1e-6);
        }
    }

    #[test]
    fn replay_with_empty_index_is_plain() {
        let (d, p, z, gamma) = fixture();
        let other = LatentTensor(GaussianDraw::sample(6, 0, 8, 8, 3).noise);
        let (_, maps) = d.predict_noise(&p, &other, 10, &gamma, PredictMode::Record).unwrap();
        let mut record = AttentionRecord::new(vec![10], other.grid().clone(), 4);
        record.steps.push(maps.unwrap());
        let (plain, _) = d.predict_noise(&p, &z, 10, &gamma, PredictMode::Plain).unwrap();
        let (replay, _) = d
            .predict_noise(
                &p,
                &z,
                10,
                &gamma,
                PredictMode::Replay {
                    record: &record,
                    step: 0,
                    content_index: &[],
                },
            )
            .unwrap();
        assert_eq!(plain.grid().to_le_bytes(), replay.grid().to_le_bytes());
        let swapped = d
            .predict_noise(
                &p,
                &z,
                10,
                &gamma,
                PredictMode::Replay {
                    record: &record,
                    step: 0,
                    content_index: &[1, 3],
                },
            )
            .unwrap()
            .0;
        assert_ne!(plain, swapped);
        let err = d
            .predict_noise(
                &p,
                &z,
                10,
                &gamma,
                PredictMode::Replay {
                    record: &record,
                    step: 1,
                    content_index: &[],
                },
            )
            .unwrap_err();
        assert!(matches!(err, Error::ReplayExhausted { step: 1, recorded: 1 }));
    }

    #[test]
    fn params_are_f32_exact() {
        let d = Denoiser::new(UNetConfig::toy(3, 8), DEFAULT_MAX_PARAMS).unwrap();
        let p = d.init_params(9);
        let back = DenoiserParams::from_f32(&p.to_f32());
        assert_eq!(p, back);
        assert_eq!(p.hash(), back.hash());
    }
}
