//! Run configuration: a flat `key = value` text file with dotted sections and
//! `#` comments, resolved on top of a built-in profile.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::{CodecMode, CodecTraining};
use crate::denoiser::DEFAULT_MAX_PARAMS;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::fcc::StylizeConfig;
use crate::model::{parse_prompt_style, ModelSpec};
use crate::optim::OptimizerKind;
use crate::prompt::{IdentifierSet, PromptStyle};
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Toy => "toy",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(value_err("profile", format!("unknown profile {other:?}"))),
        }
    }
}

/// Where a source or target image comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    /// The built-in synthetic pair.
    Fixture,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuxSource {
    Synthetic { count: usize, seed: u64 },
    Dir(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodecSettings {
    pub mode: CodecMode,
    pub factor: usize,
    pub latent_channels: usize,
    pub training: CodecTraining,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelSpec,
    /// Side length of generated images.
    pub image_size: usize,
    pub codec: CodecSettings,
    pub trainer: TrainerConfig,
    pub stylize: StylizeConfig,
    pub source: ImageSource,
    pub target: ImageSource,
    pub aux: AuxSource,
    pub use_aux: bool,
    pub output_dir: PathBuf,
}

fn value_err(key: &str, msg: impl Into<String>) -> Error {
    Error::ConfigValue {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| value_err(key, format!("cannot parse {raw:?}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(value_err(key, format!("expected true or false, got {raw:?}"))),
    }
}

fn style_name(s: PromptStyle) -> &'static str {
    match s {
        PromptStyle::Contrastive => "contrastive",
        PromptStyle::PositiveOnly => "positive-only",
    }
}

/// Splits a config text into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
            return Err(Error::ConfigSyntax {
                line: i + 1,
                msg: format!("invalid key {k:?}"),
            });
        }
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(Error::ConfigSyntax {
                line: i + 1,
                msg: format!("duplicate key {k:?}"),
            });
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => Self {
                profile,
                model: ModelSpec {
                    identifiers: IdentifierSet::default(),
                    prompt_style: PromptStyle::Contrastive,
                    text_seed: 0,
                    text_dim: 32,
                    schedule_steps: 50,
                    schedule_kind: ScheduleKind::LinearAlphaBar,
                    resolution: 8,
                    channels: [16, 32],
                    attn_dim: 16,
                    time_dim: 32,
                    max_params: DEFAULT_MAX_PARAMS,
                    init_seed: 0,
                },
                image_size: 64,
                codec: CodecSettings {
                    mode: CodecMode::Identity,
                    factor: 2,
                    latent_channels: 4,
                    training: CodecTraining::default(),
                },
                trainer: TrainerConfig::toy(),
                stylize: StylizeConfig {
                    guidance_scale: 1.0,
                    ..StylizeConfig::toy()
                },
                source: ImageSource::Fixture,
                target: ImageSource::Fixture,
                aux: AuxSource::Synthetic { count: 8, seed: 0 },
                use_aux: true,
                output_dir: PathBuf::from("runs/toy"),
            },
            Profile::Paper => Self {
                profile,
                model: ModelSpec {
                    identifiers: IdentifierSet::default(),
                    prompt_style: PromptStyle::Contrastive,
                    text_seed: 0,
                    text_dim: 768,
                    schedule_steps: 1000,
                    schedule_kind: ScheduleKind::LinearAlphaBar,
                    resolution: 512,
                    channels: [320, 640],
                    attn_dim: 64,
                    time_dim: 1280,
                    max_params: 1_000_000_000,
                    init_seed: 0,
                },
                image_size: 512,
                codec: CodecSettings {
                    mode: CodecMode::Learned,
                    factor: 8,
                    latent_channels: 4,
                    training: CodecTraining::default(),
                },
                trainer: TrainerConfig::paper(),
                stylize: StylizeConfig::default(),
                source: ImageSource::Fixture,
                target: ImageSource::Fixture,
                aux: AuxSource::Synthetic { count: 200, seed: 0 },
                use_aux: true,
                output_dir: PathBuf::from("runs/paper"),
            },
        }
    }

    /// Resolves `text` on top of the profile named by its `profile` key
    /// (toy when absent). Relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let lines = parse_lines(text)?;
        let profile = lines
            .iter()
            .find(|(_, k, _)| k == "profile")
            .map(|(_, _, v)| v.parse())
            .transpose()?
            .unwrap_or(Profile::Toy);
        let mut cfg = Self::profile(profile);
        for (_, k, v) in &lines {
            if k != "profile" {
                cfg.set(k, v, base)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Overrides a single key.
    pub fn set(&mut self, key: &str, raw: &str, base: &Path) -> Result<()> {
        let path = |raw: &str| {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let image = |raw: &str| {
            if raw == "fixture" {
                ImageSource::Fixture
            } else {
                ImageSource::File(path(raw))
            }
        };
        let m = &mut self.model;
        let t = &mut self.trainer;
        let s = &mut self.stylize;
        match key {
            "profile" => {
                if parse_value::<Profile>(key, raw)? != self.profile {
                    return Err(value_err(key, "the profile can only be chosen in the config file"));
                }
            }
            "seed" => m.init_seed = parse_value(key, raw)?,
            "identifiers.style_src"
            | "identifiers.style_tgt"
            | "identifiers.content_src"
            | "identifiers.content_tgt" => {
                let mut b = m.identifiers.bases().map(str::to_string);
                let slot = match key {
                    "identifiers.style_src" => 0,
                    "identifiers.style_tgt" => 1,
                    "identifiers.content_src" => 2,
                    _ => 3,
                };
                b[slot] = raw.to_string();
                m.identifiers = IdentifierSet::new(&b[0], &b[1], &b[2], &b[3])?;
            }
            "prompt.style" => {
                m.prompt_style =
                    parse_prompt_style(raw).map_err(|_| value_err(key, "expected contrastive or positive-only"))?
            }
            "text.seed" => m.text_seed = parse_value(key, raw)?,
            "text.dim" => m.text_dim = parse_value(key, raw)?,
            "schedule.steps" => m.schedule_steps = parse_value(key, raw)?,
            "schedule.kind" => {
                m.schedule_kind = raw
                    .parse()
                    .map_err(|_| value_err(key, format!("unknown schedule {raw:?}")))?
            }
            "image.size" => self.image_size = parse_value(key, raw)?,
            "image.resolution" => m.resolution = parse_value(key, raw)?,
            "codec.mode" => {
                self.codec.mode = raw
                    .parse()
                    .map_err(|_| value_err(key, format!("unknown codec {raw:?}")))?
            }
            "codec.factor" => self.codec.factor = parse_value(key, raw)?,
            "codec.latent_channels" => self.codec.latent_channels = parse_value(key, raw)?,
            "codec.iterations" => self.codec.training.iterations = parse_value(key, raw)?,
            "codec.learning_rate" => self.codec.training.learning_rate = parse_value(key, raw)?,
            "codec.batch" => self.codec.training.batch = parse_value(key, raw)?,
            "codec.seed" => self.codec.training.seed = parse_value(key, raw)?,
            "denoiser.channels" => {
                let parts: Vec<usize> = raw
                    .split(',')
                    .map(|p| parse_value(key, p.trim()))
                    .collect::<Result<_>>()?;
                let [a, b] = parts[..] else {
                    return Err(value_err(key, "expected two comma-separated widths"));
                };
                m.channels = [a, b];
            }
            "denoiser.attn_dim" => m.attn_dim = parse_value(key, raw)?,
            "denoiser.time_dim" => m.time_dim = parse_value(key, raw)?,
            "denoiser.max_params" => m.max_params = parse_value(key, raw)?,
            "train.learning_rate" => t.learning_rate = parse_value(key, raw)?,
            "train.iterations" => t.iterations = parse_value(key, raw)?,
            "train.optimizer" => {
                t.optimizer = raw
                    .parse::<OptimizerKind>()
                    .map_err(|_| value_err(key, "expected adam or sgd"))?
            }
            "train.beta1" => t.beta1 = parse_value(key, raw)?,
            "train.beta2" => t.beta2 = parse_value(key, raw)?,
            "train.eps" => t.eps = parse_value(key, raw)?,
            "train.seed" => t.seed = parse_value(key, raw)?,
            "train.uncond_prob" => t.uncond_prob = parse_value(key, raw)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_value(key, raw)?,
            "data.source" => self.source = image(raw),
            "data.target" => self.target = image(raw),
            "data.aux" => {
                self.aux = match raw.strip_prefix("synthetic:") {
                    Some(rest) => {
                        let (count, seed) = match rest.split_once(':') {
                            Some((c, s)) => (parse_value(key, c)?, parse_value(key, s)?),
                            None => (parse_value(key, rest)?, 0),
                        };
                        AuxSource::Synthetic { count, seed }
                    }
                    None => AuxSource::Dir(path(raw)),
                }
            }
            "data.use_aux" => self.use_aux = parse_bool(key, raw)?,
            "stylize.n_s" => s.n_s = parse_value(key, raw)?,
            "stylize.n_c" => s.n_c = parse_value(key, raw)?,
            "stylize.steps" => s.steps = parse_value(key, raw)?,
            "stylize.guidance_scale" => s.guidance_scale = parse_value(key, raw)?,
            "stylize.eta" => s.eta = parse_value(key, raw)?,
            "stylize.seed" => s.seed = parse_value(key, raw)?,
            "stylize.use_fcc" => s.use_fcc = parse_bool(key, raw)?,
            "stylize.clip_latent" => s.clip_latent = parse_bool(key, raw)?,
            "output.dir" => self.output_dir = path(raw),
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if !self.image_size.is_power_of_two() || self.image_size < 8 {
            return Err(value_err("image.size", "must be a power of two >= 8"));
        }
        if !m.resolution.is_power_of_two() || m.resolution < 8 || m.resolution > self.image_size {
            return Err(value_err(
                "image.resolution",
                "must be a power of two in [8, image.size]",
            ));
        }
        if m.schedule_steps < 1 {
            return Err(value_err("schedule.steps", "must be at least 1"));
        }
        for (key, v) in [
            ("text.dim", m.text_dim),
            ("denoiser.attn_dim", m.attn_dim),
            ("denoiser.time_dim", m.time_dim),
            ("denoiser.channels", m.channels[0].min(m.channels[1])),
        ] {
            if v == 0 {
                return Err(value_err(key, "must be positive"));
            }
        }
        if self.codec.mode == CodecMode::Learned && (self.codec.factor < 1 || self.codec.latent_channels < 1) {
            return Err(value_err(
                "codec.factor",
                "learned codec needs a positive factor and channel count",
            ));
        }
        if let AuxSource::Synthetic { count: 0, .. } = self.aux {
            if self.use_aux {
                return Err(Error::EmptyAuxSet);
            }
        }
        let s = &self.stylize;
        if s.n_s < 1 || s.n_c < 1 {
            return Err(Error::InvalidRepetition { n_s: s.n_s, n_c: s.n_c });
        }
        if s.steps < 1 || s.steps > m.schedule_steps {
            return Err(Error::TooManySteps {
                steps: s.steps,
                max: m.schedule_steps,
            });
        }
        if !(s.eta >= 0.0) || !s.guidance_scale.is_finite() {
            return Err(value_err("stylize.eta", "eta must be >= 0 and the scale finite"));
        }
        self.trainer.validate()
    }

    /// The paper profile is documentation-only at desk scale.
    pub fn check_compute(&self, acknowledged: bool) -> Result<()> {
        if self.profile == Profile::Paper && !acknowledged {
            return Err(Error::PaperProfileRefused);
        }
        Ok(())
    }

    /// Fully resolved configuration in the same text format.
    pub fn echo(&self) -> String {
        let m = &self.model;
        let t = &self.trainer;
        let s = &self.stylize;
        let image = |src: &ImageSource| match src {
            ImageSource::Fixture => "fixture".to_string(),
            ImageSource::File(p) => p.display().to_string(),
        };
        let aux = match &self.aux {
            AuxSource::Synthetic { count, seed } => format!("synthetic:{count}:{seed}"),
            AuxSource::Dir(p) => p.display().to_string(),
        };
        let ids = m.identifiers.bases();
        let entries: Vec<(&str, String)> = vec![
            ("profile", self.profile.to_string()),
            ("seed", m.init_seed.to_string()),
            ("identifiers.style_src", ids[0].to_string()),
            ("identifiers.style_tgt", ids[1].to_string()),
            ("identifiers.content_src", ids[2].to_string()),
            ("identifiers.content_tgt", ids[3].to_string()),
            ("prompt.style", style_name(m.prompt_style).to_string()),
            ("text.seed", m.text_seed.to_string()),
            ("text.dim", m.text_dim.to_string()),
            ("schedule.steps", m.schedule_steps.to_string()),
            ("schedule.kind", m.schedule_kind.to_string()),
            ("image.size", self.image_size.to_string()),
            ("image.resolution", m.resolution.to_string()),
            ("codec.mode", self.codec.mode.to_string()),
            ("codec.factor", self.codec.factor.to_string()),
            ("codec.latent_channels", self.codec.latent_channels.to_string()),
            ("codec.iterations", self.codec.training.iterations.to_string()),
            ("codec.learning_rate", self.codec.training.learning_rate.to_string()),
            ("codec.batch", self.codec.training.batch.to_string()),
            ("codec.seed", self.codec.training.seed.to_string()),
            ("denoiser.channels", format!("{},{}", m.channels[0], m.channels[1])),
            ("denoiser.attn_dim", m.attn_dim.to_string()),
            ("denoiser.time_dim", m.time_dim.to_string()),
            ("denoiser.max_params", m.max_params.to_string()),
            ("train.learning_rate", t.learning_rate.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.optimizer", t.optimizer.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.uncond_prob", t.uncond_prob.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("data.source", image(&self.source)),
            ("data.target", image(&self.target)),
            ("data.aux", aux),
            ("data.use_aux", self.use_aux.to_string()),
            ("stylize.n_s", s.n_s.to_string()),
            ("stylize.n_c", s.n_c.to_string()),
            ("stylize.steps", s.steps.to_string()),
            ("stylize.guidance_scale", s.guidance_scale.to_string()),
            ("stylize.eta", s.eta.to_string()),
            ("stylize.seed", s.seed.to_string()),
            ("stylize.use_fcc", s.use_fcc.to_string()),
            ("stylize.clip_latent", s.clip_latent.to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
