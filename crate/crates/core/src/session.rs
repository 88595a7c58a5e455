//! Turns a [`RunConfig`] into images, a model and trained weights.

use std::fs;
use std::path::Path;

use crate::codec::{Codec, CodecMode, PatchCodec};
use crate::config::{AuxSource, ImageSource, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, StyoModel};
use crate::ppm::read_ppm;
use crate::synth::{auxiliary_set, fixture_pair};
use crate::tensor::ImageTensor;
use crate::trainer::{build_training_set, evaluate, fine_tune, LossTriple, PreparedStreams, TrainState};

#[derive(Debug, Clone)]
pub struct Images {
    pub source: ImageTensor,
    pub target: ImageTensor,
    pub aux: Vec<ImageTensor>,
}

/// Every `.ppm` file in `dir`, in file-name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<ImageTensor>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths.iter().map(read_ppm).collect()
}

pub fn load_images(cfg: &RunConfig) -> Result<Images> {
    let fixture = fixture_pair(cfg.image_size);
    let pick = |src: &ImageSource, default: &ImageTensor| match src {
        ImageSource::Fixture => Ok(default.clone()),
        ImageSource::File(p) => read_ppm(p),
    };
    let aux = if cfg.use_aux {
        match &cfg.aux {
            AuxSource::Synthetic { count, seed } => auxiliary_set(*count, *seed, cfg.image_size)
                .into_iter()
                .map(|(_, img)| img)
                .collect(),
            AuxSource::Dir(dir) => load_image_dir(dir)?,
        }
    } else {
        Vec::new()
    };
    Ok(Images {
        source: pick(&cfg.source, &fixture.0)?,
        target: pick(&cfg.target, &fixture.1)?,
        aux,
    })
}

/// Fresh model; a learned codec is pretrained on the auxiliary images (or
/// the source/target pair when there are none).
pub fn build_model(cfg: &RunConfig, images: &Images) -> Result<StyoModel> {
    let codec = match cfg.codec.mode {
        CodecMode::Identity => Codec::Identity,
        CodecMode::Learned => {
            let pool: Vec<&ImageTensor> = if images.aux.is_empty() {
                vec![&images.source, &images.target]
            } else {
                images.aux.iter().collect()
            };
            let res = cfg.model.resolution;
            let prepared = pool
                .into_iter()
                .map(|img| img.downsample_to(res, res))
                .collect::<Result<Vec<_>>>()?;
            Codec::Learned(PatchCodec::pretrain(
                &prepared,
                cfg.codec.factor,
                cfg.codec.latent_channels,
                &cfg.codec.training,
            )?)
        }
    };
    StyoModel::new(cfg.model.clone(), codec)
}

pub fn prepare_streams(model: &StyoModel, cfg: &RunConfig, images: &Images) -> Result<PreparedStreams> {
    let src = model.prepare_image(&images.source)?;
    let tgt = model.prepare_image(&images.target)?;
    let aux = images
        .aux
        .iter()
        .map(|i| model.prepare_image(i))
        .collect::<Result<Vec<_>>>()?;
    let mut vocab = model.vocab.clone();
    let pairs = build_training_set(
        &src,
        &tgt,
        &aux,
        model.identifiers(),
        model.spec.prompt_style,
        cfg.use_aux,
        &mut vocab,
    )?;
    PreparedStreams::new(&pairs, &model.codec, &model.text, model.null_embedding()?)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossTriple>,
    pub first_iteration: usize,
    pub initial_eval: LossTriple,
    pub final_eval: LossTriple,
}

/// Seed and size of the fixed draws used to report before/after loss.
pub const EVAL_SEED: u64 = 0x5eed;
pub const EVAL_ROUNDS: usize = 32;

/// Fine-tunes from scratch or from `resume`, handing every intermediate
/// checkpoint to `on_checkpoint`.
pub fn finetune(
    cfg: &RunConfig,
    images: &Images,
    resume: Option<Checkpoint>,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<FinetuneOutcome> {
    cfg.trainer.validate()?;
    let (mut model, mut state) = match resume {
        Some(ck) => {
            if ck.model.spec != cfg.model {
                return Err(Error::CheckpointMismatch(
                    "checkpoint model settings differ from the config".into(),
                ));
            }
            let mut optimizer = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no optimizer state".into()))?;
            optimizer.config = cfg.trainer.optimizer_config();
            let state = TrainState {
                params: ck.model.params.clone(),
                optimizer,
                iteration: ck.iteration,
            };
            (ck.model, state)
        }
        None => {
            let model = build_model(cfg, images)?;
            let state = TrainState::new(model.params.clone(), &cfg.trainer);
            (model, state)
        }
    };
    let data = prepare_streams(&model, cfg, images)?;
    let initial_eval = evaluate(
        &model.denoiser,
        &state.params,
        &data,
        &model.schedule,
        EVAL_SEED,
        EVAL_ROUNDS,
    )?;
    let first_iteration = state.iteration;
    let history = fine_tune(
        &model.denoiser,
        &mut state,
        &data,
        &model.schedule,
        &cfg.trainer,
        |st| {
            let mut m = model.clone();
            m.params = st.params.clone();
            on_checkpoint(&Checkpoint {
                model: m,
                iteration: st.iteration,
                optimizer: Some(st.optimizer.clone()),
            })
        },
    )?;
    let final_eval = evaluate(
        &model.denoiser,
        &state.params,
        &data,
        &model.schedule,
        EVAL_SEED,
        EVAL_ROUNDS,
    )?;
    model.params = state.params;
    Ok(FinetuneOutcome {
        checkpoint: Checkpoint {
            model,
            iteration: state.iteration,
            optimizer: Some(state.optimizer),
        },
        history,
        first_iteration,
        initial_eval,
        final_eval,
    })
}
