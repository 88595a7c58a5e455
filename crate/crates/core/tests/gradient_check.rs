//! Analytic gradients of the noise-prediction loss against central finite
//! differences over every parameter of a sub-500-parameter network.

use styo_core::denoiser::Denoiser;
use styo_core::diffusion::{single_loss, GaussianDraw, NoiseSchedule, ScheduleKind};
use styo_core::nn::UNetConfig;
use styo_core::tensor::LatentTensor;
use styo_core::text_encoder::TextEmbedding;

const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;

/// Relative error with a floor so that exactly-zero gradients compare sanely.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Every weight ~ N(0, 1/fan_in), biases ~ N(0, 0.1²); unlike the training
/// init nothing is zeroed, so every parameter carries gradient.
fn random_params(denoiser: &Denoiser, seed: u64) -> Vec<f64> {
    let n = denoiser.param_count();
    let noise = GaussianDraw::sample(seed, 0, 1, 1, n).noise.data;
    let mut theta = vec![0.0; n];
    for e in denoiser.layout().entries() {
        let std = if e.fan_in == 0 {
            0.1
        } else {
            1.0 / (e.fan_in as f64).sqrt()
        };
        for i in e.range() {
            theta[i] = std * noise[i];
        }
    }
    theta
}

#[test]
fn loss_gradient_matches_central_differences() {
    let denoiser = Denoiser::new(UNetConfig::tiny(), 500).unwrap();
    let n = denoiser.param_count();
    assert!(n <= 500, "{n} parameters");
    let sched = NoiseSchedule::new(50, ScheduleKind::LinearAlphaBar).unwrap();

    let mut worst = 0.0f64;
    for draw in 0..5u64 {
        let theta = random_params(&denoiser, 100 + draw);
        let z0 = LatentTensor(GaussianDraw::sample(200 + draw, 0, 4, 4, 1).noise);
        let eps = GaussianDraw::sample(300 + draw, 0, 4, 4, 1).noise;
        let gamma = TextEmbedding {
            tokens: 3,
            dim: 2,
            data: GaussianDraw::sample(400 + draw, 0, 1, 3, 2).noise.data,
        };
        let t = 1 + (draw as usize * 11) % 50;

        let analytic = single_loss(&z0, &eps, t, &gamma, &denoiser.bind(&theta), &sched).unwrap();
        let mut probe = theta.clone();
        for i in 0..n {
            probe[i] = theta[i] + STEP;
            let up = single_loss(&z0, &eps, t, &gamma, &denoiser.bind(&probe), &sched)
                .unwrap()
                .loss;
            probe[i] = theta[i] - STEP;
            let down = single_loss(&z0, &eps, t, &gamma, &denoiser.bind(&probe), &sched)
                .unwrap()
                .loss;
            probe[i] = theta[i];
            let numeric = (up - down) / (2.0 * STEP);
            let err = relative_error(analytic.grad[i], numeric);
            assert!(
                err < TOLERANCE,
                "draw {draw} param {i} ({}): analytic {} numeric {numeric}",
                denoiser
                    .layout()
                    .entries()
                    .iter()
                    .find(|e| e.range().contains(&i))
                    .unwrap()
                    .name,
                analytic.grad[i]
            );
            worst = worst.max(err);
        }
    }
    eprintln!("max relative error {worst:e}");
}
