//! Image ↔ latent maps. The identity codec is the affine `2x - 1`; the learned
//! codec is a linear patch autoencoder trained once on the auxiliary images and
//! then frozen.

use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Grid, ImageTensor, LatentTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodecMode {
    #[default]
    Identity,
    Learned,
}

impl fmt::Display for CodecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecMode::Identity => "identity",
            CodecMode::Learned => "learned",
        })
    }
}

impl FromStr for CodecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecMode::Identity),
            "learned" => Ok(CodecMode::Learned),
            other => Err(Error::ConfigValue {
                key: "codec.mode".into(),
                msg: format!("unknown codec mode {other:?}"),
            }),
        }
    }
}

/// Linear encoder/decoder over non-overlapping `factor × factor` RGB patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchCodec {
    pub factor: usize,
    pub latent_channels: usize,
    /// `[latent][patch]`
    pub enc_w: Vec<f64>,
    pub enc_b: Vec<f64>,
    /// `[patch][latent]`
    pub dec_w: Vec<f64>,
    pub dec_b: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecTraining {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for CodecTraining {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1e-2,
            batch: 64,
            seed: 0,
        }
    }
}

impl PatchCodec {
    fn patch_len(&self) -> usize {
        self.factor * self.factor * 3
    }

    fn new_random(factor: usize, latent_channels: usize, seed: u64) -> Self {
        let p = factor * factor * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (p as f64).sqrt()).expect("valid std");
        let enc_w = (0..latent_channels * p).map(|_| normal.sample(&mut rng)).collect();
        let normal = Normal::new(0.0, 1.0 / (latent_channels as f64).sqrt()).expect("valid std");
        let dec_w = (0..latent_channels * p).map(|_| normal.sample(&mut rng)).collect();
        let mut c = Self {
            factor,
            latent_channels,
            enc_w,
            enc_b: vec![0.0; latent_channels],
            dec_w,
            dec_b: vec![0.0; p],
        };
        c.round_to_f32();
        c
    }

    fn round_to_f32(&mut self) {
        for v in self
            .enc_w
            .iter_mut()
            .chain(&mut self.enc_b)
            .chain(&mut self.dec_w)
            .chain(&mut self.dec_b)
        {
            *v = *v as f32 as f64;
        }
    }

    fn encode_patch(&self, patch: &[f64], out: &mut [f64]) {
        let p = self.patch_len();
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.enc_w[c * p..(c + 1) * p];
            *o = self.enc_b[c] + w.iter().zip(patch).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    fn decode_patch(&self, z: &[f64], out: &mut [f64]) {
        let d = self.latent_channels;
        for (i, o) in out.iter_mut().enumerate() {
            let w = &self.dec_w[i * d..(i + 1) * d];
            *o = self.dec_b[i] + w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Patches of `2x - 1` values, in latent raster order.
    fn patches(&self, img: &Grid) -> Vec<Vec<f64>> {
        let f = self.factor;
        let (h, w) = (img.height / f, img.width / f);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut patch = Vec::with_capacity(self.patch_len());
                for dy in 0..f {
                    for dx in 0..f {
                        let base = ((y * f + dy) * img.width + x * f + dx) * 3;
                        patch.extend(img.data[base..base + 3].iter().map(|v| 2.0 * v - 1.0));
                    }
                }
                out.push(patch);
            }
        }
        out
    }

    /// Mean-squared reconstruction loss over patches, minimized by Adam.
    pub fn pretrain(
        images: &[ImageTensor],
        factor: usize,
        latent_channels: usize,
        cfg: &CodecTraining,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyAuxSet);
        }
        let mut codec = Self::new_random(factor, latent_channels, cfg.seed);
        let mut all = Vec::new();
        for img in images {
            let g = img.grid();
            if g.height % factor != 0 || g.width % factor != 0 {
                return Err(Error::InvalidImage(format!(
                    "{}x{} not divisible by codec factor {factor}",
                    g.height, g.width
                )));
            }
            all.extend(codec.patches(g));
        }
        let p = codec.patch_len();
        let d = latent_channels;
        let n_params = 2 * d * p + d + p;
        let mut m = vec![0.0; n_params];
        let mut v = vec![0.0; n_params];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut z = vec![0.0; d];
        let mut recon = vec![0.0; p];
        for step in 1..=cfg.iterations {
            let mut grad = vec![0.0; n_params];
            let (g_ew, rest) = grad.split_at_mut(d * p);
            let (g_eb, rest) = rest.split_at_mut(d);
            let (g_dw, g_db) = rest.split_at_mut(d * p);
            for _ in 0..cfg.batch {
                let x = all.choose(&mut rng).expect("non-empty");
                codec.encode_patch(x, &mut z);
                codec.decode_patch(&z, &mut recon);
                let scale = 2.0 / (cfg.batch * p) as f64;
                let g_r: Vec<f64> = recon.iter().zip(x).map(|(r, t)| scale * (r - t)).collect();
                let mut g_z = vec![0.0; d];
                for i in 0..p {
                    g_db[i] += g_r[i];
                    for c in 0..d {
                        g_dw[i * d + c] += g_r[i] * z[c];
                        g_z[c] += g_r[i] * codec.dec_w[i * d + c];
                    }
                }
                for c in 0..d {
                    g_eb[c] += g_z[c];
                    for i in 0..p {
                        g_ew[c * p + i] += g_z[c] * x[i];
                    }
                }
            }
            let params = codec
                .enc_w
                .iter_mut()
                .chain(&mut codec.enc_b)
                .chain(&mut codec.dec_w)
                .chain(&mut codec.dec_b);
            let c1 = 1.0 - f64::powi(b1, step as i32);
            let c2 = 1.0 - f64::powi(b2, step as i32);
            for (i, w) in params.enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                *w -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        codec.round_to_f32();
        Ok(codec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Identity,
    Learned(PatchCodec),
}

impl Codec {
    pub fn mode(&self) -> CodecMode {
        match self {
            Codec::Identity => CodecMode::Identity,
            Codec::Learned(_) => CodecMode::Learned,
        }
    }

    pub fn factor(&self) -> usize {
        match self {
            Codec::Identity => 1,
            Codec::Learned(c) => c.factor,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self {
            Codec::Identity => 3,
            Codec::Learned(c) => c.latent_channels,
        }
    }

    /// Known range of encoded values, if any.
    pub fn latent_bound(&self) -> Option<f64> {
        match self {
            Codec::Identity => Some(1.0),
            Codec::Learned(_) => None,
        }
    }

    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        let g = x.grid();
        match self {
            Codec::Identity => Ok(LatentTensor(g.map(|v| 2.0 * v - 1.0))),
            Codec::Learned(c) => {
                if !g.height.is_multiple_of(c.factor) || !g.width.is_multiple_of(c.factor) {
                    return Err(Error::shape(
                        format!("sides divisible by {}", c.factor),
                        format!("{}x{}", g.height, g.width),
                    ));
                }
                let (h, w) = (g.height / c.factor, g.width / c.factor);
                let mut out = Grid::zeros(h, w, c.latent_channels);
                for (i, patch) in c.patches(g).iter().enumerate() {
                    let d = c.latent_channels;
                    c.encode_patch(patch, &mut out.data[i * d..(i + 1) * d]);
                }
                Ok(LatentTensor(out))
            }
        }
    }

    /// Output is clamped to `[0, 1]`.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageTensor> {
        let g = z.grid();
        if !g.is_finite() {
            return Err(Error::NonFinite("latent to decode".into()));
        }
        if g.channels != self.latent_channels() {
            return Err(Error::shape(
                format!("{} latent channels", self.latent_channels()),
                format!("{} latent channels", g.channels),
            ));
        }
        match self {
            Codec::Identity => ImageTensor::new(g.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))),
            Codec::Learned(c) => {
                let f = c.factor;
                let (h, w) = (g.height * f, g.width * f);
                let mut out = Grid::zeros(h, w, 3);
                let mut patch = vec![0.0; c.patch_len()];
                for y in 0..g.height {
                    for x in 0..g.width {
                        let i = y * g.width + x;
                        c.decode_patch(&g.data[i * g.channels..(i + 1) * g.channels], &mut patch);
                        let mut k = 0;
                        for dy in 0..f {
                            for dx in 0..f {
                                let base = ((y * f + dy) * w + x * f + dx) * 3;
                                for ch in 0..3 {
                                    out.data[base + ch] = ((patch[k] + 1.0) * 0.5).clamp(0.0, 1.0);
                                    k += 1;
                                }
                            }
                        }
                    }
                }
                ImageTensor::new(out)
            }
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        match self {
            Codec::Identity => h.update(b"identity"),
            Codec::Learned(c) => {
                h.update((c.factor as u64).to_le_bytes());
                for v in c.enc_w.iter().chain(&c.enc_b).chain(&c.dec_w).chain(&c.dec_b) {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Mean squared error between two images of equal shape.
pub fn mse(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let (ga, gb) = (a.grid(), b.grid());
    ga.data.iter().zip(&gb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ga.numel() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GaussianDraw;
    use proptest::prelude::*;

    fn image(seed: u64) -> ImageTensor {
        let g = GaussianDraw::sample(seed, 0, 8, 8, 3)
            .noise
            .map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        ImageTensor::new(g).unwrap()
    }

    #[test]
    fn identity_is_affine_and_exact() {
        let x = image(1);
        let z = Codec::Identity.encode(&x).unwrap();
        for (a, b) in z.grid().data.iter().zip(&x.grid().data) {
            assert_eq!(*a, 2.0 * b - 1.0);
        }
        assert_eq!(Codec::Identity.decode(&z).unwrap(), x);
    }

    #[test]
    fn identity_decode_of_zero_and_clamp() {
        let z = LatentTensor::zeros(8, 8, 3);
        let img = Codec::Identity.decode(&z).unwrap();
        assert!(img.grid().data.iter().all(|&v| v == 0.5));
        let mut g = Grid::zeros(8, 8, 3);
        g.data[4] = 10.0;
        let img = Codec::Identity.decode(&LatentTensor(g)).unwrap();
        assert_eq!(img.grid().data[4], 1.0);
    }

    #[test]
    fn decode_rejects_wrong_channels() {
        assert!(Codec::Identity.decode(&LatentTensor::zeros(8, 8, 4)).is_err());
    }

    proptest! {
        #[test]
        fn identity_decode_is_half_lipschitz(a in prop::collection::vec(-3.0f64..3.0, 192), b in prop::collection::vec(-3.0f64..3.0, 192)) {
            let za = LatentTensor(Grid::from_vec(8, 8, 3, a).unwrap());
            let zb = LatentTensor(Grid::from_vec(8, 8, 3, b).unwrap());
            let da = Codec::Identity.decode(&za).unwrap();
            let db = Codec::Identity.decode(&zb).unwrap();
            prop_assert!(da.grid().max_abs_diff(db.grid()) <= 0.5 * za.grid().max_abs_diff(zb.grid()) + 1e-15);
        }

        #[test]
        fn identity_encode_decode_on_unit_cube(a in prop::collection::vec(-1.0f64..=1.0, 192)) {
            let z = LatentTensor(Grid::from_vec(8, 8, 3, a).unwrap());
            let back = Codec::Identity.encode(&Codec::Identity.decode(&z).unwrap()).unwrap();
            prop_assert!(back.grid().max_abs_diff(z.grid()) < 1e-15);
        }
    }

    #[test]
    fn learned_codec_halves_resolution() {
        let imgs: Vec<_> = (0..4).map(image).collect();
        let cfg = CodecTraining {
            iterations: 50,
            ..Default::default()
        };
        let c = Codec::Learned(PatchCodec::pretrain(&imgs, 2, 4, &cfg).unwrap());
        let z = c.encode(&imgs[0]).unwrap();
        assert_eq!(z.dims(), (4, 4, 4));
        assert_eq!(c.decode(&z).unwrap().size(), (8, 8));
        assert_eq!(c.encode(&imgs[0]).unwrap(), z);
    }
}
