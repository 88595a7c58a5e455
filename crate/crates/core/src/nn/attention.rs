//! Cross-attention from latent positions to prompt tokens, with optional
//! column substitution from a recorded map.

use crate::error::{Error, Result};
use crate::tensor::Grid;
use crate::text_encoder::TextEmbedding;

use super::layers::Linear;
use super::layout::ParamLayout;

/// Softmax attention weights: one row per latent position, one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub tokens: usize,
    pub data: Vec<f64>,
}

impl AttentionMap {
    pub fn rows(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.tokens + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.tokens..(row + 1) * self.tokens]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows())
            .map(|r| (self.row(r).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn shape(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.tokens)
    }
}

/// How a cross-attention layer treats its freshly computed map.
#[derive(Debug, Clone, Copy)]
pub enum AttnControl<'a> {
    Plain,
    /// Columns listed in `content_index` are taken from `source`.
    Replay {
        source: &'a AttentionMap,
        content_index: &'a [usize],
    },
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub channels: usize,
    pub dim: usize,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    z: Grid,
    gamma: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    m: Vec<f64>,
    attended: Vec<f64>,
    tokens: usize,
}

impl CrossAttention {
    pub fn new(layout: &mut ParamLayout, name: &str, channels: usize, dim: usize, text_dim: usize) -> Self {
        Self {
            channels,
            dim,
            to_q: Linear::new(layout, &format!("{name}.to_q"), channels, dim, false),
            to_k: Linear::new(layout, &format!("{name}.to_k"), text_dim, dim, false),
            to_v: Linear::new(layout, &format!("{name}.to_v"), text_dim, dim, false),
            to_out: Linear::new(layout, &format!("{name}.to_out"), dim, channels, true),
        }
    }

    /// `z + (M V) W_o + b_o` with `M = softmax(Q Kᵀ / sqrt(d))`. Returns the
    /// map actually used (after any substitution).
    pub fn forward(
        &self,
        theta: &[f64],
        z: &Grid,
        gamma: &TextEmbedding,
        control: AttnControl<'_>,
    ) -> Result<(Grid, AttentionMap, AttentionCache)> {
        let rows = z.height * z.width;
        let s = gamma.tokens;
        let d = self.dim;
        let q = self.to_q.forward(theta, &z.data);
        let k = self.to_k.forward(theta, &gamma.data);
        let v = self.to_v.forward(theta, &gamma.data);
        let scale = 1.0 / (d as f64).sqrt();

        let mut m = vec![0.0; rows * s];
        for r in 0..rows {
            let qr = &q[r * d..(r + 1) * d];
            let mr = &mut m[r * s..(r + 1) * s];
            for (j, mv) in mr.iter_mut().enumerate() {
                let kj = &k[j * d..(j + 1) * d];
                *mv = qr.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            if mr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("attention logits".into()));
            }
            let max = mr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for mv in mr.iter_mut() {
                *mv = (*mv - max).exp();
                total += *mv;
            }
            for mv in mr.iter_mut() {
                *mv /= total;
            }
        }
        let mut map = AttentionMap {
            height: z.height,
            width: z.width,
            tokens: s,
            data: m,
        };

        if let AttnControl::Replay { source, content_index } = control {
            if (source.height, source.width, source.tokens) != (map.height, map.width, map.tokens) {
                return Err(Error::AttentionMismatch {
                    layer: 0,
                    recorded: source.shape(),
                    live: map.shape(),
                });
            }
            for &col in content_index {
                if col >= s {
                    return Err(Error::ContentIndexRange { index: col, len: s });
                }
                for r in 0..rows {
                    map.data[r * s + col] = source.data[r * s + col];
                }
            }
        }

        let mut attended = vec![0.0; rows * d];
        for r in 0..rows {
            let ar = &mut attended[r * d..(r + 1) * d];
            for j in 0..s {
                let w = map.data[r * s + j];
                for (a, vv) in ar.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                    *a += w * vv;
                }
            }
        }
        let projected = self.to_out.forward(theta, &attended);
        let mut out = z.clone();
        for (o, p) in out.data.iter_mut().zip(&projected) {
            *o += p;
        }
        let cache = AttentionCache {
            z: z.clone(),
            gamma: gamma.data.clone(),
            q,
            k,
            v,
            m: map.data.clone(),
            attended,
            tokens: s,
        };
        Ok((out, map, cache))
    }

    /// Backward through an unsubstituted forward pass. The text embedding is
    /// frozen, so only the latent input receives a gradient.
    pub fn backward(&self, theta: &[f64], cache: &AttentionCache, g_out: &Grid, grad: &mut [f64]) -> Grid {
        let rows = cache.z.height * cache.z.width;
        let s = cache.tokens;
        let d = self.dim;
        let scale = 1.0 / (d as f64).sqrt();

        let g_att = self
            .to_out
            .backward(theta, &cache.attended, &g_out.data, grad, true)
            .expect("input gradient requested");

        // dM = dA Vᵀ, dV = Mᵀ dA
        let mut g_v = vec![0.0; s * d];
        let mut g_logits = vec![0.0; rows * s];
        for r in 0..rows {
            let ga = &g_att[r * d..(r + 1) * d];
            let mr = &cache.m[r * s..(r + 1) * s];
            let mut g_m = vec![0.0; s];
            for j in 0..s {
                let vj = &cache.v[j * d..(j + 1) * d];
                g_m[j] = ga.iter().zip(vj).map(|(a, b)| a * b).sum();
                let gvj = &mut g_v[j * d..(j + 1) * d];
                for (gv, a) in gvj.iter_mut().zip(ga) {
                    *gv += mr[j] * a;
                }
            }
            let dot: f64 = mr.iter().zip(&g_m).map(|(a, b)| a * b).sum();
            for j in 0..s {
                g_logits[r * s + j] = mr[j] * (g_m[j] - dot) * scale;
            }
        }

        let mut g_q = vec![0.0; rows * d];
        let mut g_k = vec![0.0; s * d];
        for r in 0..rows {
            let qr = &cache.q[r * d..(r + 1) * d];
            for j in 0..s {
                let g = g_logits[r * s + j];
                if g == 0.0 {
                    continue;
                }
                let kj = &cache.k[j * d..(j + 1) * d];
                for c in 0..d {
                    g_q[r * d + c] += g * kj[c];
                    g_k[j * d + c] += g * qr[c];
                }
            }
        }
        self.to_k.backward(theta, &cache.gamma, &g_k, grad, false);
        self.to_v.backward(theta, &cache.gamma, &g_v, grad, false);
        let g_z_q = self
            .to_q
            .backward(theta, &cache.z.data, &g_q, grad, true)
            .expect("input gradient requested");

        let mut g_z = g_out.clone();
        for (a, b) in g_z.data.iter_mut().zip(&g_z_q) {
            *a += b;
        }
        g_z
    }
}
