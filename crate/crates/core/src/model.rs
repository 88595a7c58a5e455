//! Everything needed to train or sample: identifiers, vocabulary, frozen text
//! encoder and codec, schedule, network and its weights. Persisted as a
//! checkpoint archive.

use std::path::Path;

use crate::archive::{Archive, FORMAT_VERSION};
use crate::codec::{Codec, CodecMode, PatchCodec};
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::nn::UNetConfig;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::prompt::{build_prompt_styled, null_prompt, IdentifierSet, Prompt, PromptKind, PromptStyle, Vocab};
use crate::tensor::ImageTensor;
use crate::text_encoder::{TextEmbedding, TextEncoder};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub identifiers: IdentifierSet,
    pub prompt_style: PromptStyle,
    pub text_seed: u64,
    pub text_dim: usize,
    pub schedule_steps: usize,
    pub schedule_kind: ScheduleKind,
    /// Image side fed to the codec; inputs are box-filtered down to it.
    pub resolution: usize,
    pub channels: [usize; 2],
    pub attn_dim: usize,
    pub time_dim: usize,
    pub max_params: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn unet_config(&self, latent_channels: usize) -> UNetConfig {
        UNetConfig {
            latent_channels,
            channels: self.channels,
            attn_dim: self.attn_dim,
            text_dim: self.text_dim,
            time_dim: self.time_dim,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StyoModel {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub text: TextEncoder,
    pub schedule: NoiseSchedule,
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub params: DenoiserParams,
}

impl StyoModel {
    /// Fresh model with initialized weights.
    pub fn new(spec: ModelSpec, codec: Codec) -> Result<Self> {
        let vocab = Vocab::for_identifiers(&spec.identifiers);
        let text = TextEncoder::new(spec.text_seed, spec.text_dim, vocab.len());
        let schedule = NoiseSchedule::new(spec.schedule_steps, spec.schedule_kind)?;
        let denoiser = Denoiser::new(spec.unet_config(codec.latent_channels()), spec.max_params)?;
        if !spec.resolution.is_multiple_of(codec.factor()) || !(spec.resolution / codec.factor()).is_multiple_of(2) {
            return Err(Error::ConfigValue {
                key: "image.resolution".into(),
                msg: format!(
                    "{} does not give an even latent side with codec factor {}",
                    spec.resolution,
                    codec.factor()
                ),
            });
        }
        let params = denoiser.init_params(spec.init_seed);
        Ok(Self {
            spec,
            vocab,
            text,
            schedule,
            codec,
            denoiser,
            params,
        })
    }

    pub fn identifiers(&self) -> &IdentifierSet {
        &self.spec.identifiers
    }

    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let side = self.spec.resolution / self.codec.factor();
        (side, side, self.codec.latent_channels())
    }

    pub fn prompt(&self, kind: PromptKind, n_s: usize, n_c: usize) -> Result<Prompt> {
        let mut vocab = self.vocab.clone();
        let p = build_prompt_styled(
            kind,
            &self.spec.identifiers,
            n_s,
            n_c,
            self.spec.prompt_style,
            &mut vocab,
        )?;
        debug_assert_eq!(vocab.len(), self.vocab.len(), "template tokens are pre-registered");
        Ok(p)
    }

    pub fn embed(&self, prompt: &Prompt) -> Result<TextEmbedding> {
        self.text.encode(&prompt.token_ids)
    }

    pub fn null_embedding(&self) -> Result<TextEmbedding> {
        self.embed(&null_prompt())
    }

    /// Downsamples to the model resolution.
    pub fn prepare_image(&self, img: &ImageTensor) -> Result<ImageTensor> {
        img.downsample_to(self.spec.resolution, self.spec.resolution)
    }
}

/// A model plus optional training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StyoModel,
    pub iteration: usize,
    pub optimizer: Option<Optimizer>,
}

fn style_name(s: PromptStyle) -> &'static str {
    match s {
        PromptStyle::Contrastive => "contrastive",
        PromptStyle::PositiveOnly => "positive-only",
    }
}

pub fn parse_prompt_style(s: &str) -> Result<PromptStyle> {
    match s {
        "contrastive" => Ok(PromptStyle::Contrastive),
        "positive-only" => Ok(PromptStyle::PositiveOnly),
        other => Err(Error::format("checkpoint", format!("unknown prompt style {other:?}"))),
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let m = &self.model;
        let s = &m.spec;
        let mut a = Archive::default();
        a.set("kind", "checkpoint");
        a.set("format_version", FORMAT_VERSION);
        a.set("architecture_hash", m.denoiser.architecture_hash());
        a.set("seed", s.init_seed);
        a.set("identifiers.style_src", s.identifiers.style_src.base());
        a.set("identifiers.style_tgt", s.identifiers.style_tgt.base());
        a.set("identifiers.content_src", s.identifiers.content_src.base());
        a.set("identifiers.content_tgt", s.identifiers.content_tgt.base());
        a.set("prompt.style", style_name(s.prompt_style));
        a.set("vocab_hash", m.vocab.hash());
        a.set("text.seed", s.text_seed);
        a.set("text.dim", s.text_dim);
        a.set("schedule.steps", s.schedule_steps);
        a.set("schedule.kind", s.schedule_kind);
        a.set("image.resolution", s.resolution);
        a.set("denoiser.channels", format!("{},{}", s.channels[0], s.channels[1]));
        a.set("denoiser.attn_dim", s.attn_dim);
        a.set("denoiser.time_dim", s.time_dim);
        a.set("denoiser.max_params", s.max_params);
        a.set("codec.mode", m.codec.mode());
        a.set("iteration", self.iteration);

        let theta = m.params.values();
        for e in m.denoiser.layout().entries() {
            a.push(format!("unet.{}", e.name), &e.shape, to_f32(&theta[e.range()]));
        }
        if let Codec::Learned(c) = &m.codec {
            a.set("codec.factor", c.factor);
            a.set("codec.latent_channels", c.latent_channels);
            let p = c.factor * c.factor * 3;
            let d = c.latent_channels;
            a.push("codec.enc_w", &[d, p], to_f32(&c.enc_w));
            a.push("codec.enc_b", &[d], to_f32(&c.enc_b));
            a.push("codec.dec_w", &[p, d], to_f32(&c.dec_w));
            a.push("codec.dec_b", &[p], to_f32(&c.dec_b));
        }
        if let Some(opt) = &self.optimizer {
            let c = opt.config;
            a.set("optimizer.kind", c.kind);
            // Rust's f64 Display round-trips exactly.
            a.set("optimizer.learning_rate", c.learning_rate);
            a.set("optimizer.beta1", c.beta1);
            a.set("optimizer.beta2", c.beta2);
            a.set("optimizer.eps", c.eps);
            a.set("optimizer.step", opt.step);
            if c.kind == OptimizerKind::Adam {
                a.push("optimizer.m", &[opt.m.len()], to_f32(&opt.m));
                a.push("optimizer.v", &[opt.v.len()], to_f32(&opt.v));
            }
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.get("kind")? != "checkpoint" {
            return Err(Error::format("checkpoint", "archive is not a checkpoint"));
        }
        let identifiers = IdentifierSet::new(
            a.get("identifiers.style_src")?,
            a.get("identifiers.style_tgt")?,
            a.get("identifiers.content_src")?,
            a.get("identifiers.content_tgt")?,
        )?;
        let channels: Vec<usize> = a
            .get("denoiser.channels")?
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::format("checkpoint", "bad channel list"))
            })
            .collect::<Result<_>>()?;
        if channels.len() != 2 {
            return Err(Error::format("checkpoint", "expected two channel widths"));
        }
        let spec = ModelSpec {
            identifiers,
            prompt_style: parse_prompt_style(a.get("prompt.style")?)?,
            text_seed: a.parse("text.seed")?,
            text_dim: a.parse("text.dim")?,
            schedule_steps: a.parse("schedule.steps")?,
            schedule_kind: a.get("schedule.kind")?.parse()?,
            resolution: a.parse("image.resolution")?,
            channels: [channels[0], channels[1]],
            attn_dim: a.parse("denoiser.attn_dim")?,
            time_dim: a.parse("denoiser.time_dim")?,
            max_params: a.parse("denoiser.max_params")?,
            init_seed: a.parse("seed")?,
        };
        let codec = match a.get("codec.mode")?.parse::<CodecMode>()? {
            CodecMode::Identity => Codec::Identity,
            CodecMode::Learned => Codec::Learned(PatchCodec {
                factor: a.parse("codec.factor")?,
                latent_channels: a.parse("codec.latent_channels")?,
                enc_w: to_f64(&a.array("codec.enc_w")?.values),
                enc_b: to_f64(&a.array("codec.enc_b")?.values),
                dec_w: to_f64(&a.array("codec.dec_w")?.values),
                dec_b: to_f64(&a.array("codec.dec_b")?.values),
            }),
        };
        let mut model = StyoModel::new(spec, codec)?;
        if model.denoiser.architecture_hash() != a.get("architecture_hash")? {
            return Err(Error::CheckpointMismatch("architecture hash differs".into()));
        }
        if model.vocab.hash() != a.get("vocab_hash")? {
            return Err(Error::CheckpointMismatch("vocabulary hash differs".into()));
        }
        let mut flat = Vec::with_capacity(model.denoiser.param_count());
        for e in model.denoiser.layout().entries() {
            let arr = a.array(&format!("unet.{}", e.name))?;
            if arr.shape != e.shape {
                return Err(Error::CheckpointMismatch(format!("shape of {}", e.name)));
            }
            flat.extend_from_slice(&arr.values);
        }
        model.params = DenoiserParams::from_f32(&flat);

        let optimizer = if a.header.contains_key("optimizer.kind") {
            let config = OptimizerConfig {
                kind: a.get("optimizer.kind")?.parse()?,
                learning_rate: a.parse("optimizer.learning_rate")?,
                beta1: a.parse("optimizer.beta1")?,
                beta2: a.parse("optimizer.beta2")?,
                eps: a.parse("optimizer.eps")?,
            };
            let mut opt = Optimizer::new(config, model.denoiser.param_count());
            opt.step = a.parse("optimizer.step")?;
            if config.kind == OptimizerKind::Adam {
                opt.m = to_f64(&a.array("optimizer.m")?.values);
                opt.v = to_f64(&a.array("optimizer.v")?.values);
            }
            Some(opt)
        } else {
            None
        };
        Ok(Self {
            model,
            iteration: a.parse("iteration")?,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
