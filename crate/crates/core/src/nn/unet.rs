//! Two-resolution UNet noise predictor with cross-attention in the mid block
//! and both upsampling blocks.

use crate::error::{Error, Result};
use crate::tensor::Grid;
use crate::text_encoder::TextEmbedding;

use super::attention::{AttentionCache, AttentionMap, AttnControl, CrossAttention};
use super::layers::{
    add_into, avg_pool2, avg_pool2_backward, concat_channels, silu_backward, silu_grid, silu_vec, split_channels,
    timestep_features, upsample2, upsample2_backward, Conv2d, Linear,
};
use super::layout::ParamLayout;

/// Number of cross-attention layers (mid, up1, up2).
pub const CROSS_ATTENTION_LAYERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub latent_channels: usize,
    /// Widths at full and half resolution.
    pub channels: [usize; 2],
    pub attn_dim: usize,
    pub text_dim: usize,
    pub time_dim: usize,
    pub kernel: usize,
}

impl UNetConfig {
    /// 8×8 / 4×4 latents, widths 16 and 32, attention width 16.
    pub fn toy(latent_channels: usize, text_dim: usize) -> Self {
        Self {
            latent_channels,
            channels: [16, 32],
            attn_dim: 16,
            text_dim,
            time_dim: 32,
            kernel: 3,
        }
    }

    /// Smallest useful network, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            latent_channels: 1,
            channels: [1, 2],
            attn_dim: 2,
            text_dim: 2,
            time_dim: 2,
            kernel: 3,
        }
    }
}

/// Pre-activation residual block with an additive timestep projection.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    time_proj: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct ResCache {
    x: Grid,
    a0: Grid,
    h1: Grid,
    a1: Grid,
}

impl ResBlock {
    fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, time_dim: usize, k: usize) -> Self {
        Self {
            conv1: Conv2d::new(layout, &format!("{name}.conv1"), cin, cout, k),
            time_proj: Linear::new(layout, &format!("{name}.time_proj"), time_dim, cout, true),
            conv2: Conv2d::new(layout, &format!("{name}.conv2"), cout, cout, k),
            skip: (cin != cout).then(|| Conv2d::new(layout, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn forward(&self, theta: &[f64], x: &Grid, temb_act: &[f64]) -> (Grid, ResCache) {
        let a0 = silu_grid(x);
        let mut h1 = self.conv1.forward(theta, &a0);
        let tp = self.time_proj.forward(theta, temb_act);
        let c = h1.channels;
        for p in 0..h1.height * h1.width {
            for (v, t) in h1.data[p * c..(p + 1) * c].iter_mut().zip(&tp) {
                *v += t;
            }
        }
        let a1 = silu_grid(&h1);
        let h2 = self.conv2.forward(theta, &a1);
        let mut out = match &self.skip {
            Some(s) => s.forward(theta, x),
            None => x.clone(),
        };
        add_into(&mut out, &h2);
        (
            out,
            ResCache {
                x: x.clone(),
                a0,
                h1,
                a1,
            },
        )
    }

    /// Returns the input gradient and accumulates into `g_temb_act`.
    fn backward(
        &self,
        theta: &[f64],
        cache: &ResCache,
        g_out: &Grid,
        temb_act: &[f64],
        g_temb_act: &mut [f64],
        grad: &mut [f64],
    ) -> Grid {
        let mut g_h1 = self.conv2.backward(theta, &cache.a1, g_out, grad);
        silu_backward(&cache.h1.data, &mut g_h1.data);
        let c = g_h1.channels;
        let mut g_tp = vec![0.0; c];
        for p in 0..g_h1.height * g_h1.width {
            for (g, v) in g_tp.iter_mut().zip(&g_h1.data[p * c..(p + 1) * c]) {
                *g += v;
            }
        }
        let g_t = self
            .time_proj
            .backward(theta, temb_act, &g_tp, grad, true)
            .expect("input gradient requested");
        for (a, b) in g_temb_act.iter_mut().zip(&g_t) {
            *a += b;
        }
        let mut g_x = self.conv1.backward(theta, &cache.a0, &g_h1, grad);
        silu_backward(&cache.x.data, &mut g_x.data);
        match &self.skip {
            Some(s) => add_into(&mut g_x, &s.backward(theta, &cache.x, g_out, grad)),
            None => add_into(&mut g_x, g_out),
        }
        g_x
    }
}

/// Where the attention maps of one forward pass go.
#[derive(Debug)]
pub enum AttentionMode<'a> {
    Plain,
    /// Maps are appended in layer order.
    Record(&'a mut Vec<AttentionMap>),
    /// One recorded map per layer; listed columns are substituted.
    Replay {
        maps: &'a [AttentionMap],
        content_index: &'a [usize],
    },
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    layout: ParamLayout,
    time_1: Linear,
    time_2: Linear,
    conv_in: Conv2d,
    down1: ResBlock,
    down2: ResBlock,
    mid: ResBlock,
    mid_attn: CrossAttention,
    up1: ResBlock,
    up1_attn: CrossAttention,
    up2: ResBlock,
    up2_attn: CrossAttention,
    conv_out: Conv2d,
}

#[derive(Debug, Clone)]
pub struct UNetTape {
    t_feat: Vec<f64>,
    t_hidden: Vec<f64>,
    t_emb: Vec<f64>,
    t_act: Vec<f64>,
    x: Grid,
    down1: ResCache,
    down2: ResCache,
    mid: ResCache,
    mid_attn: AttentionCache,
    up1: ResCache,
    up1_attn: AttentionCache,
    up2: ResCache,
    up2_attn: AttentionCache,
    pre_out: Grid,
}

fn check(name: &str, g: &Grid) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl UNet {
    pub fn new(config: UNetConfig) -> Self {
        let UNetConfig {
            latent_channels: lc,
            channels: [c0, c1],
            attn_dim,
            text_dim,
            time_dim,
            kernel: k,
        } = config;
        let mut l = ParamLayout::default();
        let time_1 = Linear::new(&mut l, "time.linear_1", time_dim, time_dim, true);
        let time_2 = Linear::new(&mut l, "time.linear_2", time_dim, time_dim, true);
        let conv_in = Conv2d::new(&mut l, "conv_in", lc, c0, k);
        let down1 = ResBlock::new(&mut l, "down1", c0, c0, time_dim, k);
        let down2 = ResBlock::new(&mut l, "down2", c0, c1, time_dim, k);
        let mid = ResBlock::new(&mut l, "mid", c1, c1, time_dim, k);
        let mid_attn = CrossAttention::new(&mut l, "mid.attn", c1, attn_dim, text_dim);
        let up1 = ResBlock::new(&mut l, "up1", 2 * c1, c1, time_dim, k);
        let up1_attn = CrossAttention::new(&mut l, "up1.attn", c1, attn_dim, text_dim);
        let up2 = ResBlock::new(&mut l, "up2", c1 + c0, c0, time_dim, k);
        let up2_attn = CrossAttention::new(&mut l, "up2.attn", c0, attn_dim, text_dim);
        let conv_out = Conv2d::new(&mut l, "conv_out", c0, lc, k);
        Self {
            config,
            layout: l,
            time_1,
            time_2,
            conv_in,
            down1,
            down2,
            mid,
            mid_attn,
            up1,
            up1_attn,
            up2,
            up2_attn,
            conv_out,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total()
    }

    pub fn forward(
        &self,
        theta: &[f64],
        z: &Grid,
        t: usize,
        gamma: &TextEmbedding,
        mode: AttentionMode<'_>,
    ) -> Result<(Grid, UNetTape)> {
        if theta.len() != self.param_count() {
            return Err(Error::shape(
                format!("{} parameters", self.param_count()),
                format!("{} parameters", theta.len()),
            ));
        }
        if z.channels != self.config.latent_channels
            || z.height < 2
            || !z.height.is_multiple_of(2)
            || !z.width.is_multiple_of(2)
        {
            return Err(Error::shape(
                format!("even-sized latent with {} channels", self.config.latent_channels),
                crate::tensor::shape_str(z),
            ));
        }
        if gamma.dim != self.config.text_dim {
            return Err(Error::shape(
                format!("text dim {}", self.config.text_dim),
                format!("text dim {}", gamma.dim),
            ));
        }

        let t_feat = timestep_features(t, self.config.time_dim);
        let t_hidden = self.time_1.forward(theta, &t_feat);
        let t_emb = self.time_2.forward(theta, &silu_vec(&t_hidden));
        let t_act = silu_vec(&t_emb);

        let h0 = self.conv_in.forward(theta, z);
        check("conv_in", &h0)?;
        let (h1, down1) = self.down1.forward(theta, &h0, &t_act);
        check("down1", &h1)?;
        let pooled = avg_pool2(&h1);
        let (h2, down2) = self.down2.forward(theta, &pooled, &t_act);
        check("down2", &h2)?;
        let (m0, mid) = self.mid.forward(theta, &h2, &t_act);
        check("mid", &m0)?;

        let mut mode = mode;
        let mut attend = |layer: usize, attn: &CrossAttention, x: &Grid| -> Result<(Grid, AttentionCache)> {
            let control = match &mode {
                AttentionMode::Replay { maps, content_index } => {
                    let source = maps.get(layer).ok_or(Error::ReplayExhausted {
                        step: layer,
                        recorded: maps.len(),
                    })?;
                    AttnControl::Replay { source, content_index }
                }
                _ => AttnControl::Plain,
            };
            let (out, map, cache) = attn.forward(theta, x, gamma, control).map_err(|e| match e {
                Error::AttentionMismatch { recorded, live, .. } => Error::AttentionMismatch { layer, recorded, live },
                other => other,
            })?;
            if let AttentionMode::Record(maps) = &mut mode {
                maps.push(map);
            }
            Ok((out, cache))
        };

        let (m1, mid_attn) = attend(0, &self.mid_attn, &m0)?;
        check("mid.attn", &m1)?;
        let (u1a, up1) = self.up1.forward(theta, &concat_channels(&m1, &h2), &t_act);
        check("up1", &u1a)?;
        let (u1, up1_attn) = attend(1, &self.up1_attn, &u1a)?;
        check("up1.attn", &u1)?;
        let up = upsample2(&u1);
        let (u2a, up2) = self.up2.forward(theta, &concat_channels(&up, &h1), &t_act);
        check("up2", &u2a)?;
        let (u2, up2_attn) = attend(2, &self.up2_attn, &u2a)?;
        check("up2.attn", &u2)?;
        let out = self.conv_out.forward(theta, &silu_grid(&u2));
        check("conv_out", &out)?;

        Ok((
            out,
            UNetTape {
                t_feat,
                t_hidden,
                t_emb,
                t_act,
                x: z.clone(),
                down1,
                down2,
                mid,
                mid_attn,
                up1,
                up1_attn,
                up2,
                up2_attn,
                pre_out: u2,
            },
        ))
    }

    /// Backpropagates `g_out` (gradient w.r.t. the prediction) through a
    /// plain forward pass, accumulating into `grad`.
    pub fn backward(&self, theta: &[f64], tape: &UNetTape, g_out: &Grid, grad: &mut [f64]) {
        let [c0, c1] = self.config.channels;
        let mut g_t_act = vec![0.0; self.config.time_dim];

        let mut g_u2 = self.conv_out.backward(theta, &silu_grid(&tape.pre_out), g_out, grad);
        silu_backward(&tape.pre_out.data, &mut g_u2.data);
        let g_u2a = self.up2_attn.backward(theta, &tape.up2_attn, &g_u2, grad);
        let g_cat2 = self
            .up2
            .backward(theta, &tape.up2, &g_u2a, &tape.t_act, &mut g_t_act, grad);
        let (g_up, g_h1_skip) = split_channels(&g_cat2, c1);
        let g_u1 = upsample2_backward(&g_up);
        let g_u1a = self.up1_attn.backward(theta, &tape.up1_attn, &g_u1, grad);
        let g_cat1 = self
            .up1
            .backward(theta, &tape.up1, &g_u1a, &tape.t_act, &mut g_t_act, grad);
        let (g_m1, g_h2_skip) = split_channels(&g_cat1, c1);
        let g_m0 = self.mid_attn.backward(theta, &tape.mid_attn, &g_m1, grad);
        let mut g_h2 = self
            .mid
            .backward(theta, &tape.mid, &g_m0, &tape.t_act, &mut g_t_act, grad);
        add_into(&mut g_h2, &g_h2_skip);
        let g_pooled = self
            .down2
            .backward(theta, &tape.down2, &g_h2, &tape.t_act, &mut g_t_act, grad);
        let mut g_h1 = avg_pool2_backward(&g_pooled);
        add_into(&mut g_h1, &g_h1_skip);
        let g_h0 = self
            .down1
            .backward(theta, &tape.down1, &g_h1, &tape.t_act, &mut g_t_act, grad);
        debug_assert_eq!(g_h0.channels, c0);
        let x = &tape.x;
        let _ = self.conv_in.backward(theta, x, &g_h0, grad);

        silu_backward(&tape.t_emb, &mut g_t_act);
        let mut g_hidden = self
            .time_2
            .backward(theta, &silu_vec(&tape.t_hidden), &g_t_act, grad, true)
            .expect("input gradient requested");
        silu_backward(&tape.t_hidden, &mut g_hidden);
        self.time_1.backward(theta, &tape.t_feat, &g_hidden, grad, false);
    }
}
