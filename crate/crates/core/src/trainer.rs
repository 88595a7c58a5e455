//! Fine-tuning on three text-image streams: the source pair, the target pair
//! and an auxiliary set of natural faces sharing one prompt.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::Codec;
use crate::denoiser::{Denoiser, DenoiserParams};
use crate::diffusion::{single_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::prompt::{build_prompt_styled, IdentifierSet, Prompt, PromptKind, PromptStyle, Vocab};
use crate::tensor::{Grid, ImageTensor, LatentTensor};
use crate::text_encoder::{TextEmbedding, TextEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Src,
    Tgt,
    Aux,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub image: ImageTensor,
    pub prompt: Arc<Prompt>,
    pub stream: Stream,
}

/// One pair each for source and target, then one per auxiliary image, all of
/// which share a single prompt. With `use_aux = false` the auxiliary stream is
/// dropped entirely.
pub fn build_training_set(
    x_src: &ImageTensor,
    x_tgt: &ImageTensor,
    aux: &[ImageTensor],
    ids: &IdentifierSet,
    style: PromptStyle,
    use_aux: bool,
    vocab: &mut Vocab,
) -> Result<Vec<TrainingPair>> {
    if use_aux && aux.is_empty() {
        return Err(Error::EmptyAuxSet);
    }
    let prompt = |kind, vocab: &mut Vocab| build_prompt_styled(kind, ids, 1, 1, style, vocab).map(Arc::new);
    let mut pairs = vec![
        TrainingPair {
            image: x_src.clone(),
            prompt: prompt(PromptKind::Src, vocab)?,
            stream: Stream::Src,
        },
        TrainingPair {
            image: x_tgt.clone(),
            prompt: prompt(PromptKind::Tgt, vocab)?,
            stream: Stream::Tgt,
        },
    ];
    if use_aux {
        let p_aux = prompt(PromptKind::Aux, vocab)?;
        pairs.extend(aux.iter().map(|img| TrainingPair {
            image: img.clone(),
            prompt: Arc::clone(&p_aux),
            stream: Stream::Aux,
        }));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Probability of replacing a stream's condition with the null prompt.
    pub uncond_prob: f64,
    /// Checkpoint cadence in iterations; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl TrainerConfig {
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-6,
            iterations: 400,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            uncond_prob: 0.0,
            checkpoint_every: 100,
        }
    }

    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-3,
            iterations: 2000,
            uncond_prob: 0.1,
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::TrainerConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations < 1 {
            return Err(Error::TrainerConfig("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::TrainerConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::TrainerConfig("eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::TrainerConfig("uncond_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamData {
    pub latents: Vec<LatentTensor>,
    pub condition: TextEmbedding,
}

/// Training pairs encoded once by the frozen codec and text encoder.
#[derive(Debug, Clone)]
pub struct PreparedStreams {
    pub src: StreamData,
    pub tgt: StreamData,
    pub aux: Option<StreamData>,
    pub null: TextEmbedding,
}

impl PreparedStreams {
    pub fn new(pairs: &[TrainingPair], codec: &Codec, text: &TextEncoder, null: TextEmbedding) -> Result<Self> {
        let collect = |stream: Stream| -> Result<Option<StreamData>> {
            let members: Vec<&TrainingPair> = pairs.iter().filter(|p| p.stream == stream).collect();
            let Some(first) = members.first() else {
                return Ok(None);
            };
            let latents = members
                .iter()
                .map(|p| codec.encode(&p.image))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(StreamData {
                latents,
                condition: text.encode(&first.prompt.token_ids)?,
            }))
        };
        let one = |stream: Stream, name: &str| -> Result<StreamData> {
            let data = collect(stream)?.ok_or_else(|| Error::TrainerConfig(format!("missing {name} pair")))?;
            if data.latents.len() != 1 {
                return Err(Error::TrainerConfig(format!("expected exactly one {name} pair")));
            }
            Ok(data)
        };
        Ok(Self {
            src: one(Stream::Src, "source")?,
            tgt: one(Stream::Tgt, "target")?,
            aux: collect(Stream::Aux)?,
            null,
        })
    }

    pub fn streams(&self) -> impl Iterator<Item = (Stream, &StreamData)> {
        [
            (Stream::Src, Some(&self.src)),
            (Stream::Tgt, Some(&self.tgt)),
            (Stream::Aux, self.aux.as_ref()),
        ]
        .into_iter()
        .filter_map(|(s, d)| d.map(|d| (s, d)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTriple {
    pub src: f64,
    pub tgt: f64,
    pub aux: f64,
}

impl LossTriple {
    pub fn total(&self) -> f64 {
        self.src + self.tgt + self.aux
    }

    fn slot(&mut self, stream: Stream) -> &mut f64 {
        match stream {
            Stream::Src => &mut self.src,
            Stream::Tgt => &mut self.tgt,
            Stream::Aux => &mut self.aux,
        }
    }
}

/// Everything that evolves during fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: DenoiserParams,
    pub optimizer: Optimizer,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: DenoiserParams, cfg: &TrainerConfig) -> Self {
        let n = params.len();
        Self {
            params,
            optimizer: Optimizer::new(cfg.optimizer_config(), n),
            iteration: 0,
        }
    }
}

/// The random choices of one stream in one step.
#[derive(Debug, Clone)]
pub struct StreamDraw {
    pub index: usize,
    pub t: usize,
    pub eps: Grid,
    pub unconditional: bool,
}

fn draw(rng: &mut ChaCha8Rng, data: &StreamData, steps: usize, uncond_prob: f64) -> StreamDraw {
    let index = rng.random_range(0..data.latents.len());
    let t = rng.random_range(1..=steps);
    let (h, w, c) = data.latents[index].dims();
    let eps = (0..h * w * c).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let unconditional = rng.random::<f64>() < uncond_prob;
    StreamDraw {
        index,
        t,
        eps: Grid {
            height: h,
            width: w,
            channels: c,
            data: eps,
        },
        unconditional,
    }
}

/// Draws for every stream at one iteration. Depends only on `(seed, iteration)`.
pub fn step_draws(
    data: &PreparedStreams,
    steps: usize,
    cfg: &TrainerConfig,
    iteration: usize,
) -> Vec<(Stream, StreamDraw)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration as u64);
    data.streams()
        .map(|(s, d)| (s, draw(&mut rng, d, steps, cfg.uncond_prob)))
        .collect()
}

/// Summed loss and gradient over the given draws, accumulated in stream order.
pub fn stream_loss(
    denoiser: &Denoiser,
    params: &DenoiserParams,
    data: &PreparedStreams,
    draws: &[(Stream, StreamDraw)],
    sched: &NoiseSchedule,
) -> Result<(LossTriple, Vec<f64>)> {
    let model = denoiser.bind(params.values());
    let mut losses = LossTriple::default();
    let mut grad = vec![0.0; params.len()];
    for (stream, d) in draws {
        let sd = match stream {
            Stream::Src => &data.src,
            Stream::Tgt => &data.tgt,
            Stream::Aux => data.aux.as_ref().ok_or(Error::EmptyAuxSet)?,
        };
        let gamma = if d.unconditional { &data.null } else { &sd.condition };
        let lg = single_loss(&sd.latents[d.index], &d.eps, d.t, gamma, &model, sched)?;
        *losses.slot(*stream) += lg.loss;
        for (a, b) in grad.iter_mut().zip(&lg.grad) {
            *a += b;
        }
    }
    Ok((losses, grad))
}

/// One optimizer update. Returned losses are measured before the update.
pub fn train_step(
    denoiser: &Denoiser,
    state: &mut TrainState,
    data: &PreparedStreams,
    sched: &NoiseSchedule,
    cfg: &TrainerConfig,
) -> Result<LossTriple> {
    let draws = step_draws(data, sched.steps(), cfg, state.iteration);
    let (losses, grad) = stream_loss(denoiser, &state.params, data, &draws, sched).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteLoss(state.iteration),
        other => other,
    })?;
    if !losses.total().is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss(state.iteration));
    }
    state.optimizer.update(state.params.values_mut(), &grad);
    state.iteration += 1;
    Ok(losses)
}

/// Runs train steps until `state.iteration == cfg.iterations`, calling
/// `on_checkpoint` every `cfg.checkpoint_every` iterations.
pub fn fine_tune(
    denoiser: &Denoiser,
    state: &mut TrainState,
    data: &PreparedStreams,
    sched: &NoiseSchedule,
    cfg: &TrainerConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossTriple>> {
    let mut history = Vec::with_capacity(cfg.iterations.saturating_sub(state.iteration));
    while state.iteration < cfg.iterations {
        history.push(train_step(denoiser, state, data, sched, cfg)?);
        if cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every) {
            on_checkpoint(state)?;
        }
    }
    Ok(history)
}

/// Mean conditional loss per stream over `rounds` fixed draws. Auxiliary
/// images are visited in turn rather than sampled.
pub fn evaluate(
    denoiser: &Denoiser,
    params: &DenoiserParams,
    data: &PreparedStreams,
    sched: &NoiseSchedule,
    seed: u64,
    rounds: usize,
) -> Result<LossTriple> {
    let cfg = TrainerConfig {
        seed,
        uncond_prob: 0.0,
        ..TrainerConfig::toy()
    };
    let mut total = LossTriple::default();
    for r in 0..rounds {
        let mut draws = step_draws(data, sched.steps(), &cfg, r);
        for (s, d) in &mut draws {
            if *s == Stream::Aux {
                d.index = r % data.aux.as_ref().map_or(1, |a| a.latents.len());
            }
        }
        let (l, _) = stream_loss(denoiser, params, data, &draws, sched)?;
        total.src += l.src;
        total.tgt += l.tgt;
        total.aux += l.aux;
    }
    let n = rounds.max(1) as f64;
    Ok(LossTriple {
        src: total.src / n,
        tgt: total.tgt / n,
        aux: total.aux / n,
    })
}

pub fn loss_csv(history: &[LossTriple], first_iteration: usize) -> String {
    let mut out = String::from("iteration,loss_src,loss_tgt,loss_aux\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", first_iteration + i, l.src, l.tgt, l.aux));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;
    use crate::nn::UNetConfig;
    use crate::synth::{auxiliary_set, fixture_pair};

    struct Setup {
        denoiser: Denoiser,
        sched: NoiseSchedule,
        data: PreparedStreams,
    }

    fn setup(n_aux: usize) -> Setup {
        let ids = IdentifierSet::default();
        let mut vocab = Vocab::for_identifiers(&ids);
        let (src, tgt) = fixture_pair(8);
        let aux: Vec<ImageTensor> = auxiliary_set(n_aux, 3, 8).into_iter().map(|(_, i)| i).collect();
        let pairs =
            build_training_set(&src, &tgt, &aux, &ids, PromptStyle::Contrastive, n_aux > 0, &mut vocab).unwrap();
        let text = TextEncoder::new(0, 8, vocab.len());
        let null = text.encode(&crate::prompt::null_prompt().token_ids).unwrap();
        let data = PreparedStreams::new(&pairs, &Codec::Identity, &text, null).unwrap();
        let config = UNetConfig {
            latent_channels: 3,
            channels: [4, 8],
            attn_dim: 4,
            text_dim: 8,
            time_dim: 8,
            kernel: 3,
        };
        Setup {
            denoiser: Denoiser::new(config, 100_000).unwrap(),
            sched: NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap(),
            data,
        }
    }

    fn cfg(lr: f64, iterations: usize) -> TrainerConfig {
        TrainerConfig {
            learning_rate: lr,
            iterations,
            seed: 11,
            ..TrainerConfig::toy()
        }
    }

    #[test]
    fn training_set_composition() {
        let ids = IdentifierSet::default();
        let mut vocab = Vocab::for_identifiers(&ids);
        let (src, tgt) = fixture_pair(8);
        let aux: Vec<ImageTensor> = auxiliary_set(8, 0, 8).into_iter().map(|(_, i)| i).collect();
        let pairs = build_training_set(&src, &tgt, &aux, &ids, PromptStyle::Contrastive, true, &mut vocab).unwrap();
        assert_eq!(pairs.len(), 10);
        let mut distinct: Vec<String> = pairs.iter().map(|p| p.prompt.render()).collect();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
        let aux_pairs: Vec<&TrainingPair> = pairs.iter().filter(|p| p.stream == Stream::Aux).collect();
        assert!(aux_pairs.windows(2).all(|w| Arc::ptr_eq(&w[0].prompt, &w[1].prompt)));
        assert_eq!(pairs[0].prompt.kind, PromptKind::Src);
        assert_eq!(pairs[1].prompt.kind, PromptKind::Tgt);

        let no_aux = build_training_set(&src, &tgt, &[], &ids, PromptStyle::Contrastive, false, &mut vocab).unwrap();
        assert_eq!(no_aux.len(), 2);
        assert!(matches!(
            build_training_set(&src, &tgt, &[], &ids, PromptStyle::Contrastive, true, &mut vocab),
            Err(Error::EmptyAuxSet)
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::paper().validate().is_ok());
        assert!(TrainerConfig::toy().validate().is_ok());
        assert!(cfg(0.0, 10).validate().is_err());
        assert!(cfg(1e-3, 0).validate().is_err());
        let p = TrainerConfig::paper();
        assert_eq!(
            (p.optimizer, p.learning_rate, p.iterations),
            (OptimizerKind::Adam, 1e-6, 400)
        );
        assert_eq!(TrainerConfig::toy().learning_rate, 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let s = setup(2);
        let c = cfg(0.0, 3);
        let mut state = TrainState::new(s.denoiser.init_params(1), &c);
        let before = state.params.clone();
        let history = fine_tune(&s.denoiser, &mut state, &s.data, &s.sched, &c, |_| Ok(())).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(history.len(), 3);
        assert!(history.iter().all(|l| l.total().is_finite() && l.aux > 0.0));
    }

    #[test]
    fn zero_iterations_is_a_no_op() {
        let s = setup(2);
        let c = TrainerConfig {
            iterations: 0,
            ..cfg(1e-3, 1)
        };
        let mut state = TrainState::new(s.denoiser.init_params(1), &c);
        let before = state.clone();
        let history = fine_tune(&s.denoiser, &mut state, &s.data, &s.sched, &c, |_| Ok(())).unwrap();
        assert!(history.is_empty());
        assert_eq!(state, before);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let s = setup(3);
        let c = cfg(1e-3, 6);
        let run = || {
            let mut state = TrainState::new(s.denoiser.init_params(1), &c);
            fine_tune(&s.denoiser, &mut state, &s.data, &s.sched, &c, |_| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
        let other = TrainerConfig { seed: 12, ..c };
        let mut state = TrainState::new(s.denoiser.init_params(1), &other);
        let h = fine_tune(&s.denoiser, &mut state, &s.data, &s.sched, &other, |_| Ok(())).unwrap();
        assert_ne!(h, run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let s = setup(2);
        let c = TrainerConfig {
            checkpoint_every: 4,
            ..cfg(1e-3, 10)
        };
        let mut straight = TrainState::new(s.denoiser.init_params(1), &c);
        let full = fine_tune(&s.denoiser, &mut straight, &s.data, &s.sched, &c, |_| Ok(())).unwrap();

        let mut saved = Vec::new();
        let mut first = TrainState::new(s.denoiser.init_params(1), &c);
        let short = TrainerConfig { iterations: 4, ..c };
        let mut head = fine_tune(&s.denoiser, &mut first, &s.data, &s.sched, &short, |st| {
            saved.push(st.clone());
            Ok(())
        })
        .unwrap();
        let mut resumed = saved.pop().unwrap();
        assert_eq!(resumed.iteration, 4);
        head.extend(fine_tune(&s.denoiser, &mut resumed, &s.data, &s.sched, &c, |_| Ok(())).unwrap());
        assert_eq!(head, full);
        assert_eq!(resumed, straight);
    }

    #[test]
    fn permuting_streams_keeps_the_sum() {
        let s = setup(2);
        let params = s.denoiser.init_params(4);
        let draws = step_draws(&s.data, s.sched.steps(), &cfg(1e-3, 1), 0);
        let (l, g) = stream_loss(&s.denoiser, &params, &s.data, &draws, &s.sched).unwrap();

        // Relabel: source data under the target label and vice versa.
        let swapped = PreparedStreams {
            src: s.data.tgt.clone(),
            tgt: s.data.src.clone(),
            ..s.data.clone()
        };
        let relabeled: Vec<(Stream, StreamDraw)> = draws
            .iter()
            .map(|(st, d)| {
                let st = match st {
                    Stream::Src => Stream::Tgt,
                    Stream::Tgt => Stream::Src,
                    Stream::Aux => Stream::Aux,
                };
                (st, d.clone())
            })
            .collect();
        let (l2, g2) = stream_loss(&s.denoiser, &params, &swapped, &relabeled, &s.sched).unwrap();
        assert!((l.total() - l2.total()).abs() <= 1e-12 * l.total());
        assert_eq!((l.src, l.tgt), (l2.tgt, l2.src));
        let worst = g.iter().zip(&g2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9);
    }

    #[test]
    fn nan_loss_reports_iteration() {
        let s = setup(1);
        let c = cfg(1e-3, 5);
        let mut state = TrainState::new(s.denoiser.init_params(1), &c);
        state.iteration = 2;
        state.params.values_mut()[0] = f64::NAN;
        let err = train_step(&s.denoiser, &mut state, &s.data, &s.sched, &c).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss(2)), "{err:?}");
    }

    #[test]
    fn csv_layout() {
        let csv = loss_csv(
            &[LossTriple {
                src: 1.0,
                tgt: 2.0,
                aux: 0.5,
            }],
            7,
        );
        assert_eq!(csv, "iteration,loss_src,loss_tgt,loss_aux\n7,1,2,0.5\n");
    }
}
