//! Hand-differentiated building blocks. Parameters live in one flat `f64`
//! slice; layers only store offsets into it.

use crate::tensor::Grid;

use super::layout::ParamLayout;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| silu(v)).collect()
}

pub fn silu_grid(x: &Grid) -> Grid {
    x.map(silu)
}

/// `g * silu'(x)` elementwise, in place on `g`.
pub fn silu_backward(x: &[f64], g: &mut [f64]) {
    for (gv, &xv) in g.iter_mut().zip(x) {
        *gv *= silu_grad(xv);
    }
}

/// Row-wise affine map `y = x Wᵀ + b` with `W` stored `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let w = layout.add(format!("{name}.weight"), &[out, inp], inp);
        let b = bias.then(|| layout.add(format!("{name}.bias"), &[out], 0));
        Self { inp, out, w, b }
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len() / self.inp;
        let w = &theta[self.w..self.w + self.inp * self.out];
        let mut y = vec![0.0; n * self.out];
        for r in 0..n {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let wr = &w[o * self.inp..(o + 1) * self.inp];
                let mut acc = self.b.map_or(0.0, |b| theta[b + o]);
                for (a, b) in wr.iter().zip(xr) {
                    acc += a * b;
                }
                y[r * self.out + o] = acc;
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        theta: &[f64],
        x: &[f64],
        gy: &[f64],
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let n = x.len() / self.inp;
        let mut gx = want_input.then(|| vec![0.0; x.len()]);
        for r in 0..n {
            let xr = &x[r * self.inp..(r + 1) * self.inp];
            for o in 0..self.out {
                let g = gy[r * self.out + o];
                if g == 0.0 {
                    continue;
                }
                if let Some(b) = self.b {
                    grad[b + o] += g;
                }
                let wo = self.w + o * self.inp;
                for i in 0..self.inp {
                    grad[wo + i] += g * xr[i];
                }
                if let Some(gx) = gx.as_mut() {
                    let gxr = &mut gx[r * self.inp..(r + 1) * self.inp];
                    for i in 0..self.inp {
                        gxr[i] += g * theta[wo + i];
                    }
                }
            }
        }
        gx
    }
}

/// Same-padded square convolution, stride 1, weights `[out][ky][kx][in]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    w: usize,
    b: usize,
}

impl Conv2d {
    pub fn new(layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernel required");
        let fan_in = cin * kernel * kernel;
        let w = layout.add(format!("{name}.weight"), &[cout, kernel, kernel, cin], fan_in);
        let b = layout.add(format!("{name}.bias"), &[cout], 0);
        Self {
            cin,
            cout,
            kernel,
            w,
            b,
        }
    }

    pub fn forward(&self, theta: &[f64], x: &Grid) -> Grid {
        debug_assert_eq!(x.channels, self.cin);
        let (h, w) = (x.height, x.width);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let wt = &theta[self.w..self.w + self.cout * k * k * self.cin];
        let mut y = Grid::zeros(h, w, self.cout);
        for yy in 0..h {
            for xx in 0..w {
                let p = yy * w + xx;
                let out = &mut y.data[p * self.cout..(p + 1) * self.cout];
                out.copy_from_slice(&theta[self.b..self.b + self.cout]);
                for ky in 0..k {
                    let sy = yy as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let q = sy as usize * w + sx as usize;
                        let xin = &x.data[q * self.cin..(q + 1) * self.cin];
                        for (o, acc) in out.iter_mut().enumerate() {
                            let base = ((o * k + ky) * k + kx) * self.cin;
                            let wr = &wt[base..base + self.cin];
                            let mut s = 0.0;
                            for (a, b) in wr.iter().zip(xin) {
                                s += a * b;
                            }
                            *acc += s;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, theta: &[f64], x: &Grid, gy: &Grid, grad: &mut [f64]) -> Grid {
        let (h, w) = (x.height, x.width);
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let mut gx = Grid::zeros(h, w, self.cin);
        for yy in 0..h {
            for xx in 0..w {
                let p = yy * w + xx;
                let g_out = &gy.data[p * self.cout..(p + 1) * self.cout];
                for (o, g) in g_out.iter().enumerate() {
                    grad[self.b + o] += g;
                }
                for ky in 0..k {
                    let sy = yy as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let q = sy as usize * w + sx as usize;
                        let xin = &x.data[q * self.cin..(q + 1) * self.cin];
                        for (o, &g) in g_out.iter().enumerate() {
                            if g == 0.0 {
                                continue;
                            }
                            let base = self.w + ((o * k + ky) * k + kx) * self.cin;
                            for i in 0..self.cin {
                                grad[base + i] += g * xin[i];
                            }
                            let gxq = &mut gx.data[q * self.cin..(q + 1) * self.cin];
                            for i in 0..self.cin {
                                gxq[i] += g * theta[base + i];
                            }
                        }
                    }
                }
            }
        }
        gx
    }
}

pub fn avg_pool2(x: &Grid) -> Grid {
    let (h, w, c) = (x.height / 2, x.width / 2, x.channels);
    let mut y = Grid::zeros(h, w, c);
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += x.data[((2 * yy + dy) * x.width + 2 * xx + dx) * c + ch];
                    }
                }
                y.data[(yy * w + xx) * c + ch] = 0.25 * acc;
            }
        }
    }
    y
}

pub fn avg_pool2_backward(gy: &Grid) -> Grid {
    let (h, w, c) = (gy.height * 2, gy.width * 2, gy.channels);
    let mut gx = Grid::zeros(h, w, c);
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                gx.data[(yy * w + xx) * c + ch] = 0.25 * gy.data[((yy / 2) * gy.width + xx / 2) * c + ch];
            }
        }
    }
    gx
}

pub fn upsample2(x: &Grid) -> Grid {
    let (h, w, c) = (x.height * 2, x.width * 2, x.channels);
    let mut y = Grid::zeros(h, w, c);
    for yy in 0..h {
        for xx in 0..w {
            let src = ((yy / 2) * x.width + xx / 2) * c;
            let dst = (yy * w + xx) * c;
            y.data[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
        }
    }
    y
}

pub fn upsample2_backward(gy: &Grid) -> Grid {
    let (h, w, c) = (gy.height / 2, gy.width / 2, gy.channels);
    let mut gx = Grid::zeros(h, w, c);
    for yy in 0..gy.height {
        for xx in 0..gy.width {
            let dst = ((yy / 2) * w + xx / 2) * c;
            let src = (yy * gy.width + xx) * c;
            for ch in 0..c {
                gx.data[dst + ch] += gy.data[src + ch];
            }
        }
    }
    gx
}

pub fn concat_channels(a: &Grid, b: &Grid) -> Grid {
    let c = a.channels + b.channels;
    let mut y = Grid::zeros(a.height, a.width, c);
    for p in 0..a.height * a.width {
        y.data[p * c..p * c + a.channels].copy_from_slice(&a.data[p * a.channels..(p + 1) * a.channels]);
        y.data[p * c + a.channels..(p + 1) * c].copy_from_slice(&b.data[p * b.channels..(p + 1) * b.channels]);
    }
    y
}

pub fn split_channels(g: &Grid, first: usize) -> (Grid, Grid) {
    let second = g.channels - first;
    let mut a = Grid::zeros(g.height, g.width, first);
    let mut b = Grid::zeros(g.height, g.width, second);
    for p in 0..g.height * g.width {
        let row = &g.data[p * g.channels..(p + 1) * g.channels];
        a.data[p * first..(p + 1) * first].copy_from_slice(&row[..first]);
        b.data[p * second..(p + 1) * second].copy_from_slice(&row[first..]);
    }
    (a, b)
}

pub fn add_into(dst: &mut Grid, src: &Grid) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

/// Sinusoidal timestep features `[sin(t f_0..), cos(t f_0..)]`.
pub fn timestep_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::GaussianDraw;

    fn numeric_check(f: &dyn Fn(&[f64]) -> f64, theta: &[f64], analytic: &[f64]) {
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut tp = theta.to_vec();
            tp[i] += h;
            let mut tm = theta.to_vec();
            tm[i] -= h;
            let num = (f(&tp) - f(&tm)) / (2.0 * h);
            assert!(
                (num - analytic[i]).abs() < 1e-6 * (1.0 + num.abs()),
                "param {i}: numeric {num} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 3, 3);
        let theta = GaussianDraw::sample(1, 0, 1, 1, layout.total()).noise.data;
        let x = GaussianDraw::sample(2, 0, 4, 4, 2).noise;
        let gy = GaussianDraw::sample(3, 0, 4, 4, 3).noise;
        let loss = |th: &[f64]| -> f64 { conv.forward(th, &x).data.iter().zip(&gy.data).map(|(a, b)| a * b).sum() };
        let mut grad = vec![0.0; layout.total()];
        conv.backward(&theta, &x, &gy, &mut grad);
        numeric_check(&loss, &theta, &grad);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut layout = ParamLayout::default();
        let conv = Conv2d::new(&mut layout, "c", 2, 2, 3);
        let theta = GaussianDraw::sample(1, 0, 1, 1, layout.total()).noise.data;
        let x = GaussianDraw::sample(2, 0, 4, 4, 2).noise;
        let gy = GaussianDraw::sample(3, 0, 4, 4, 2).noise;
        let mut grad = vec![0.0; layout.total()];
        let gx = conv.backward(&theta, &x, &gy, &mut grad);
        let loss = |xs: &[f64]| -> f64 {
            let xg = Grid::from_vec(4, 4, 2, xs.to_vec()).unwrap();
            conv.forward(&theta, &xg)
                .data
                .iter()
                .zip(&gy.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        numeric_check(&loss, &x.data, &gx.data);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut layout = ParamLayout::default();
        let lin = Linear::new(&mut layout, "l", 3, 2, true);
        let theta = GaussianDraw::sample(4, 0, 1, 1, layout.total()).noise.data;
        let x = GaussianDraw::sample(5, 0, 1, 1, 12).noise.data;
        let gy = GaussianDraw::sample(6, 0, 1, 1, 8).noise.data;
        let loss = |th: &[f64]| -> f64 { lin.forward(th, &x).iter().zip(&gy).map(|(a, b)| a * b).sum() };
        let mut grad = vec![0.0; layout.total()];
        lin.backward(&theta, &x, &gy, &mut grad, false);
        numeric_check(&loss, &theta, &grad);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = GaussianDraw::sample(7, 0, 4, 4, 2).noise;
        let y = GaussianDraw::sample(8, 0, 2, 2, 2).noise;
        let dot = |a: &Grid, b: &Grid| a.data.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&avg_pool2(&x), &y) - dot(&x, &avg_pool2_backward(&y))).abs() < 1e-12);
        assert!((dot(&upsample2(&y), &x) - dot(&y, &upsample2_backward(&x))).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = GaussianDraw::sample(1, 0, 2, 2, 3).noise;
        let b = GaussianDraw::sample(2, 0, 2, 2, 1).noise;
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a, b), (a2, b2));
    }
}
