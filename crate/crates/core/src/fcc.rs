//! Inference: noise the source latent, sample once with the augmented source
//! prompt while recording cross-attention, then sample again from the same
//! start with the augmented stylized prompt, copying the content columns of
//! every recorded map.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::archive::Archive;
use crate::denoiser::{AttentionRecord, PredictMode};
use crate::diffusion::{cfg_predict, ddim_step_clipped, forward_noise, GaussianDraw, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::StyoModel;
use crate::nn::AttentionMap;
use crate::ppm::{write_pgm, write_ppm};
use crate::prompt::{content_index, Prompt, PromptKind};
use crate::tensor::{Grid, ImageTensor, LatentTensor};
use crate::text_encoder::TextEmbedding;

/// Stream of the inversion noise draw. Sampler noise (only used with
/// `eta > 0`) for step `k` comes from stream `1 + k`.
pub const INVERSION_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct StylizeConfig {
    pub n_s: usize,
    pub n_c: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub eta: f64,
    pub use_fcc: bool,
    /// Clamp the predicted clean latent to the codec's latent range, when it
    /// has one.
    pub clip_latent: bool,
    pub record_export: Option<PathBuf>,
}

impl Default for StylizeConfig {
    fn default() -> Self {
        Self {
            n_s: 3,
            n_c: 1,
            steps: 100,
            guidance_scale: 7.5,
            seed: 0,
            eta: 0.0,
            use_fcc: true,
            clip_latent: true,
            record_export: None,
        }
    }
}

impl StylizeConfig {
    pub fn toy() -> Self {
        Self {
            steps: 25,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub latent: LatentTensor,
    pub noise: GaussianDraw,
}

/// Forward-noises the source latent all the way to `T`.
pub fn invert_source(z0: &LatentTensor, sched: &NoiseSchedule, seed: u64) -> Result<Inversion> {
    let (h, w, c) = z0.dims();
    let noise = GaussianDraw::sample(seed, INVERSION_STREAM, h, w, c);
    let latent = forward_noise(z0, sched.steps(), &noise.noise, sched)?;
    Ok(Inversion { latent, noise })
}

#[derive(Debug, Clone, Copy)]
pub enum Control<'a> {
    Plain,
    Record,
    Replay {
        record: &'a AttentionRecord,
        content_index: &'a [usize],
    },
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub latent: LatentTensor,
    pub record: Option<AttentionRecord>,
    /// Unconditional prediction at the first step.
    pub first_uncond: Grid,
}

/// DDIM with classifier-free guidance. The attention control touches only the
/// conditional branch.
pub fn sample(
    model: &StyoModel,
    z_t: &LatentTensor,
    cond: &TextEmbedding,
    cfg: &StylizeConfig,
    control: Control<'_>,
) -> Result<SampleOutput> {
    let sched = &model.schedule;
    let timesteps = sched.sampler_timesteps(cfg.steps)?;
    let null = model.null_embedding()?;
    let mut record = match control {
        Control::Record => Some(AttentionRecord::new(timesteps.clone(), z_t.grid().clone(), cond.tokens)),
        _ => None,
    };
    let (h, w, c) = z_t.dims();
    let bound = if cfg.clip_latent {
        model.codec.latent_bound()
    } else {
        None
    };
    let mut z = z_t.clone();
    let mut first_uncond = None;
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied().unwrap_or(0);
        let (uncond, _) = model
            .denoiser
            .predict_noise(&model.params, &z, t, &null, PredictMode::Plain)?;
        let mode = match control {
            Control::Plain => PredictMode::Plain,
            Control::Record => PredictMode::Record,
            Control::Replay { record, content_index } => PredictMode::Replay {
                record,
                step: k,
                content_index,
            },
        };
        let (cond_pred, maps) = model.denoiser.predict_noise(&model.params, &z, t, cond, mode)?;
        if let (Some(rec), Some(maps)) = (record.as_mut(), maps) {
            rec.steps.push(maps);
        }
        let eps = cfg_predict(cond_pred.grid(), uncond.grid(), cfg.guidance_scale)?;
        let noise = (cfg.eta > 0.0).then(|| GaussianDraw::sample(cfg.seed, 1 + k as u64, h, w, c).noise);
        if first_uncond.is_none() {
            first_uncond = Some(uncond.0);
        }
        z = ddim_step_clipped(&z, &eps, t, t_prev, sched, cfg.eta, noise.as_ref(), bound)?;
    }
    Ok(SampleOutput {
        latent: z,
        record,
        first_uncond: first_uncond.expect("at least one sampler step"),
    })
}

/// Reconstruction pass under the augmented source prompt.
pub fn sample_recording(
    model: &StyoModel,
    z_t: &LatentTensor,
    prompt_src_aug: &Prompt,
    cfg: &StylizeConfig,
) -> Result<(SampleOutput, AttentionRecord)> {
    let gamma = model.embed(prompt_src_aug)?;
    let mut out = sample(model, z_t, &gamma, cfg, Control::Record)?;
    let record = out.record.take().expect("record mode fills the record");
    Ok((out, record))
}

pub fn check_pairing(record: &AttentionRecord, z_t: &LatentTensor, timesteps: &[usize], tokens: usize) -> Result<()> {
    if record.timesteps != timesteps {
        return Err(Error::TrajectoryMismatch(format!(
            "recorded {} timesteps, replay uses {}",
            record.timesteps.len(),
            timesteps.len()
        )));
    }
    if &record.start != z_t.grid() {
        return Err(Error::TrajectoryMismatch(
            "replay starts from a different latent".into(),
        ));
    }
    if record.tokens != tokens {
        return Err(Error::PromptLengthMismatch {
            recorded: record.tokens,
            replay: tokens,
        });
    }
    if !record.is_complete() {
        return Err(Error::ReplayExhausted {
            step: record.steps.len(),
            recorded: record.timesteps.len(),
        });
    }
    Ok(())
}

/// Stylized pass. With `use_fcc` the recorded content columns replace the
/// live ones at every layer and step; without it this is plain sampling.
pub fn stylize(
    model: &StyoModel,
    z_t: &LatentTensor,
    prompt_sty_aug: &Prompt,
    record: &AttentionRecord,
    content_index: &[usize],
    cfg: &StylizeConfig,
) -> Result<SampleOutput> {
    let gamma = model.embed(prompt_sty_aug)?;
    if !cfg.use_fcc {
        return sample(model, z_t, &gamma, cfg, Control::Plain);
    }
    let timesteps = model.schedule.sampler_timesteps(cfg.steps)?;
    check_pairing(record, z_t, &timesteps, prompt_sty_aug.len())?;
    sample(model, z_t, &gamma, cfg, Control::Replay { record, content_index })
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stylized: ImageTensor,
    pub reconstruction: ImageTensor,
    pub stylized_latent: LatentTensor,
    pub reconstruction_latent: LatentTensor,
    pub source_latent: LatentTensor,
    pub inversion: Inversion,
    pub record: AttentionRecord,
    pub manifest: String,
}

pub fn run_pipeline(model: &StyoModel, x_src: &ImageTensor, cfg: &StylizeConfig) -> Result<PipelineOutput> {
    let x = model.prepare_image(x_src)?;
    let z0 = model.codec.encode(&x)?;
    let inversion = invert_source(&z0, &model.schedule, cfg.seed)?;
    let p_src = model.prompt(PromptKind::SrcAug, cfg.n_s, cfg.n_c)?;
    let p_sty = model.prompt(PromptKind::StyAug, cfg.n_s, cfg.n_c)?;
    let ci: Vec<usize> = content_index(&p_sty)?.into_iter().collect();
    debug_assert_eq!(ci, content_index(&p_src)?.into_iter().collect::<Vec<_>>());

    let (rec, record) = sample_recording(model, &inversion.latent, &p_src, cfg)?;
    let sty = stylize(model, &inversion.latent, &p_sty, &record, &ci, cfg)?;
    let manifest = manifest(model, cfg, &p_src, &p_sty, &ci, &record.timesteps);
    Ok(PipelineOutput {
        stylized: model.codec.decode(&sty.latent)?,
        reconstruction: model.codec.decode(&rec.latent)?,
        stylized_latent: sty.latent,
        reconstruction_latent: rec.latent,
        source_latent: z0,
        inversion,
        record,
        manifest,
    })
}

fn manifest(
    model: &StyoModel,
    cfg: &StylizeConfig,
    p_src: &Prompt,
    p_sty: &Prompt,
    ci: &[usize],
    timesteps: &[usize],
) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut m = String::new();
    let mut line = |k: &str, v: String| {
        let _ = writeln!(m, "{k} = {v}");
    };
    line("params_hash", model.params.hash());
    line("architecture_hash", model.denoiser.architecture_hash());
    line("vocab_hash", model.vocab.hash());
    line("text_table_hash", model.text.table_hash());
    line("codec", format!("{} {}", model.codec.mode(), model.codec.hash()));
    line(
        "schedule",
        format!("{} {}", model.schedule.steps(), model.spec.schedule_kind),
    );
    line("image.resolution", model.spec.resolution.to_string());
    line("n_s", cfg.n_s.to_string());
    line("n_c", cfg.n_c.to_string());
    line("steps", cfg.steps.to_string());
    line("guidance_scale", cfg.guidance_scale.to_string());
    line("eta", cfg.eta.to_string());
    line("use_fcc", cfg.use_fcc.to_string());
    line("clip_latent", cfg.clip_latent.to_string());
    line("seed", cfg.seed.to_string());
    line(
        "inversion_noise",
        format!("seed {} stream {}", cfg.seed, INVERSION_STREAM),
    );
    line(
        "sampler_noise",
        if cfg.eta > 0.0 {
            format!("seed {} streams 1..={}", cfg.seed, timesteps.len())
        } else {
            "none".into()
        },
    );
    line("timesteps", join(timesteps));
    line("prompt_src_aug", p_src.render());
    line("prompt_sty_aug", p_sty.render());
    line("content_index", join(ci));
    m
}

/// Writes `stylized.ppm`, `reconstruction.ppm`, `manifest.txt` and, when
/// requested, the record archive and attention heatmaps under `attn/`.
pub fn write_outputs(out: &PipelineOutput, dir: &Path, cfg: &StylizeConfig, dump_attn: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(dir.join("stylized.ppm"), &out.stylized)?;
    write_ppm(dir.join("reconstruction.ppm"), &out.reconstruction)?;
    let manifest = dir.join("manifest.txt");
    fs::write(&manifest, &out.manifest).map_err(|e| Error::io(&manifest, e))?;
    if let Some(path) = &cfg.record_export {
        save_record(&out.record, path)?;
    }
    if dump_attn {
        dump_attention(&out.record, &dir.join("attn"))?;
    }
    Ok(())
}

/// Runs the pipeline for every `(n_s, n_c)` pair, writing into
/// `dir/ns{n_s}_nc{n_c}/`.
pub fn run_sweep(
    model: &StyoModel,
    x_src: &ImageTensor,
    cfg: &StylizeConfig,
    ns: &[usize],
    nc: &[usize],
    dir: &Path,
    dump_attn: bool,
) -> Result<Vec<((usize, usize), PipelineOutput)>> {
    let mut results = Vec::with_capacity(ns.len() * nc.len());
    for &n_s in ns {
        for &n_c in nc {
            let c = StylizeConfig {
                n_s,
                n_c,
                record_export: None,
                ..cfg.clone()
            };
            let out = run_pipeline(model, x_src, &c)?;
            write_outputs(&out, &dir.join(format!("ns{n_s}_nc{n_c}")), &c, dump_attn)?;
            results.push(((n_s, n_c), out));
        }
    }
    Ok(results)
}

pub fn record_to_archive(record: &AttentionRecord) -> Archive {
    let mut a = Archive::default();
    a.set("kind", "attention-record");
    a.set(
        "timesteps",
        record
            .timesteps
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(","),
    );
    a.set("tokens", record.tokens);
    a.set("layers", record.layers());
    a.set("recorded_steps", record.steps.len());
    let g = &record.start;
    a.push(
        "start",
        &[g.height, g.width, g.channels],
        g.data.iter().map(|&v| v as f32).collect(),
    );
    for (k, step) in record.steps.iter().enumerate() {
        for (l, m) in step.iter().enumerate() {
            a.push(
                format!("step{k}.layer{l}"),
                &[m.height, m.width, m.tokens],
                m.data.iter().map(|&v| v as f32).collect(),
            );
        }
    }
    a
}

/// Stored in `f32`; a loaded record is for inspection, not bitwise replay.
pub fn record_from_archive(a: &Archive) -> Result<AttentionRecord> {
    if a.get("kind")? != "attention-record" {
        return Err(Error::format("attention record", "archive is not an attention record"));
    }
    let timesteps = a
        .get("timesteps")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::format("attention record", "bad timestep list"))
        })
        .collect::<Result<Vec<usize>>>()?;
    let layers: usize = a.parse("layers")?;
    let recorded: usize = a.parse("recorded_steps")?;
    let start = a.array("start")?;
    let [h, w, c] = start.shape[..] else {
        return Err(Error::format("attention record", "start latent must be 3-d"));
    };
    let start = Grid::from_vec(h, w, c, start.values.iter().map(|&v| v as f64).collect())?;
    let mut record = AttentionRecord::new(timesteps, start, a.parse("tokens")?);
    for k in 0..recorded {
        let mut maps = Vec::with_capacity(layers);
        for l in 0..layers {
            let arr = a.array(&format!("step{k}.layer{l}"))?;
            let [height, width, tokens] = arr.shape[..] else {
                return Err(Error::format("attention record", "maps must be 3-d"));
            };
            maps.push(AttentionMap {
                height,
                width,
                tokens,
                data: arr.values.iter().map(|&v| v as f64).collect(),
            });
        }
        record.steps.push(maps);
    }
    Ok(record)
}

pub fn save_record(record: &AttentionRecord, path: impl AsRef<Path>) -> Result<()> {
    record_to_archive(record).save(path)
}

pub fn load_record(path: impl AsRef<Path>) -> Result<AttentionRecord> {
    record_from_archive(&Archive::load(path)?)
}

/// One gray heatmap per (step, layer, token), each scaled by its map's
/// maximum. Returns the number of files written.
pub fn dump_attention(record: &AttentionRecord, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for (k, step) in record.steps.iter().enumerate() {
        for (l, m) in step.iter().enumerate() {
            let peak = m.data.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            for j in 0..m.tokens {
                let values: Vec<f64> = m.column(j).iter().map(|v| v / peak).collect();
                write_pgm(
                    dir.join(format!("step{k:03}_layer{l}_token{j:02}.pgm")),
                    m.width,
                    m.height,
                    &values,
                )?;
                count += 1;
            }
        }
    }
    Ok(count)
}
