//! Procedural "faces": an ellipse head with hair, eyes and mouth, randomized
//! by seed. Natural faces stand in for the auxiliary photo set; the artistic
//! variant (round head, large eyes, saturated palette) for a stylized target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Grid, ImageTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceStyle {
    Natural,
    Artistic,
}

type Rgb = [f64; 3];

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (du, dv) = (u - self.cx, v - self.cy);
        let (lu, lv) = (c * du + s * dv, -s * du + c * dv);
        (lu / self.rx).powi(2) + (lv / self.ry).powi(2) <= 1.0
    }

    /// Point given in head-local coordinates, mapped to image coordinates.
    fn place(&self, lu: f64, lv: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.cx + c * lu - s * lv, self.cy + s * lu + c * lv)
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amount: f64) -> Rgb {
    base.map(|v| (v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn pick(rng: &mut ChaCha8Rng, palette: &[Rgb]) -> Rgb {
    palette[rng.random_range(0..palette.len())]
}

pub fn synthetic_face(seed: u64, size: usize, style: FaceStyle) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let natural = style == FaceStyle::Natural;

    let background = if natural {
        let g = rng.random_range(0.35..0.7);
        jitter(&mut rng, [g, g, g], 0.08)
    } else {
        let p = pick(&mut rng, &[[0.95, 0.8, 0.9], [0.8, 0.9, 1.0], [1.0, 0.95, 0.7]]);
        jitter(&mut rng, p, 0.03)
    };
    let skin = if natural {
        let p = pick(
            &mut rng,
            &[
                [0.92, 0.76, 0.65],
                [0.8, 0.6, 0.47],
                [0.55, 0.38, 0.28],
                [0.96, 0.84, 0.74],
            ],
        );
        jitter(&mut rng, p, 0.04)
    } else {
        jitter(&mut rng, [1.0, 0.9, 0.86], 0.02)
    };
    let hair = if natural {
        let p = pick(
            &mut rng,
            &[[0.1, 0.07, 0.05], [0.35, 0.22, 0.1], [0.7, 0.55, 0.3], [0.2, 0.2, 0.2]],
        );
        jitter(&mut rng, p, 0.04)
    } else {
        let p = pick(&mut rng, &[[0.6, 0.2, 0.8], [0.2, 0.4, 0.9], [0.9, 0.4, 0.2]]);
        jitter(&mut rng, p, 0.03)
    };

    let head = if natural {
        Ellipse {
            cx: rng.random_range(-0.08..0.08),
            cy: 0.05 + rng.random_range(-0.06..0.06),
            rx: 0.42 + rng.random_range(-0.04..0.04),
            ry: 0.55 + rng.random_range(-0.04..0.04),
            angle: rng.random_range(-0.15..0.15),
        }
    } else {
        let r = 0.5 + rng.random_range(-0.02..0.02);
        Ellipse {
            cx: rng.random_range(-0.03..0.03),
            cy: 0.08,
            rx: r,
            ry: r * 0.95,
            angle: rng.random_range(-0.05..0.05),
        }
    };
    let hair_shape = {
        let (cx, cy) = head.place(0.0, -0.2 * head.ry / 0.55);
        Ellipse {
            cx,
            cy,
            rx: head.rx * 1.15,
            ry: head.ry * 0.85,
            angle: head.angle,
        }
    };
    let (eye_r, eye_dx, eye_dy) = if natural { (0.05, 0.17, -0.06) } else { (0.12, 0.2, 0.0) };
    let iris: Rgb = if natural {
        [0.1, 0.1, 0.15]
    } else {
        pick(&mut rng, &[[0.2, 0.5, 0.9], [0.3, 0.7, 0.3], [0.8, 0.3, 0.5]])
    };
    let eyes: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| {
            let (cx, cy) = head.place(side * eye_dx, eye_dy);
            Ellipse {
                cx,
                cy,
                rx: eye_r,
                ry: eye_r * if natural { 0.7 } else { 1.1 },
                angle: head.angle,
            }
        })
        .collect();
    let mouth = {
        let (cx, cy) = head.place(0.0, if natural { 0.28 } else { 0.25 });
        let (rx, ry) = if natural { (0.13, 0.04) } else { (0.06, 0.025) };
        Ellipse {
            cx,
            cy,
            rx,
            ry,
            angle: head.angle,
        }
    };
    let lips: Rgb = if natural { [0.7, 0.3, 0.3] } else { [0.9, 0.3, 0.4] };

    let shade = |u: f64, v: f64| -> Rgb {
        if eyes.iter().any(|e| e.contains(u, v)) {
            if !natural {
                let e = eyes.iter().find(|e| e.contains(u, v)).expect("inside an eye");
                if (u - e.cx + 0.03).powi(2) + (v - e.cy + 0.04).powi(2) < 0.0012 {
                    return [1.0, 1.0, 1.0];
                }
            }
            return iris;
        }
        if mouth.contains(u, v) {
            return lips;
        }
        if head.contains(u, v) {
            return skin;
        }
        if hair_shape.contains(u, v) {
            return hair;
        }
        background
    };

    const SUB: usize = 2;
    let mut g = Grid::zeros(size, size, 3);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let u = ((x * SUB + sx) as f64 + 0.5) / (size * SUB) as f64 * 2.0 - 1.0;
                    let v = ((y * SUB + sy) as f64 + 0.5) / (size * SUB) as f64 * 2.0 - 1.0;
                    let c = shade(u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let px = (y * size + x) * 3;
            for (out, a) in g.data[px..px + 3].iter_mut().zip(acc) {
                *out = (a / (SUB * SUB) as f64).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(g).expect("rendered values are clamped to [0, 1]")
}

/// Seed of the `index`-th auxiliary image of a set generated from `seed`.
pub fn aux_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64 + 1)
}

pub fn auxiliary_set(n: usize, seed: u64, size: usize) -> Vec<(u64, ImageTensor)> {
    (0..n)
        .map(|i| {
            let s = aux_seed(seed, i);
            (s, synthetic_face(s, size, FaceStyle::Natural))
        })
        .collect()
}

/// The bundled one-shot pair: a natural source face and an artistic target.
pub const FIXTURE_SOURCE_SEED: u64 = 1;
pub const FIXTURE_TARGET_SEED: u64 = 2;

pub fn fixture_pair(size: usize) -> (ImageTensor, ImageTensor) {
    (
        synthetic_face(FIXTURE_SOURCE_SEED, size, FaceStyle::Natural),
        synthetic_face(FIXTURE_TARGET_SEED, size, FaceStyle::Artistic),
    )
}
