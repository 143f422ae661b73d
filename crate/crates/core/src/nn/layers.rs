//! Layer primitives: 2-D convolution, linear projection, SiLU, pooling,
//! nearest upsampling and channel concat, each with an analytic backward
//! pass. Convolutions support kernel sizes 1 and 3 with same-padding and
//! stride 1, which is all the models here need.

use super::store::{Grads, ParamId, ParamStore};
use ndarray::{Array1, Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub fn silu_map(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(silu)
}

/// Backward of SiLU given the cached pre-activation.
pub fn silu_backward(pre: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut g = gout.clone();
    g.zip_mut_with(pre, |gv, &p| *gv *= silu_grad(p));
    g
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub ksize: usize,
}

impl Conv2d {
    /// Registers an He-initialized convolution.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        ksize: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(ksize == 1 || ksize == 3, "conv kernel must be 1 or 3");
        let std = he_std(in_c * ksize * ksize);
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_c, in_c, ksize, ksize]), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        let b = ArrayD::zeros(IxDyn(&[out_c]));
        Conv2d {
            w: store.register(format!("{name}.weight"), w),
            b: store.register(format!("{name}.bias"), b),
            in_c,
            out_c,
            ksize,
        }
    }

    /// Registers an all-zero convolution (coupling projections).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, ksize: usize) -> Self {
        assert!(ksize == 1 || ksize == 3);
        Conv2d {
            w: store.register(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[out_c, in_c, ksize, ksize]))),
            b: store.register(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_c]))),
            in_c,
            out_c,
            ksize,
        }
    }

    fn pad(&self) -> usize {
        self.ksize / 2
    }

    fn padded(&self, x: &Array3<f64>) -> (Vec<f64>, usize, usize) {
        let (c, h, w) = x.dim();
        let p = self.pad();
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let mut buf = vec![0.0; c * hp * wp];
        let xs = x.as_slice().expect("conv input must be standard layout");
        for ci in 0..c {
            for y in 0..h {
                let src = &xs[(ci * h + y) * w..(ci * h + y) * w + w];
                let dst = &mut buf[(ci * hp + y + p) * wp + p..(ci * hp + y + p) * wp + p + w];
                dst.copy_from_slice(src);
            }
        }
        (buf, hp, wp)
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_c, "conv {}: input channels", store.name(self.w));
        let k = self.ksize;
        let (pin, _hp, wp) = self.padded(x);
        let ws = store.get(self.w).as_slice().unwrap();
        let bs = store.get(self.b).as_slice().unwrap();
        let mut out = vec![0.0; self.out_c * h * w];
        for o in 0..self.out_c {
            let out_plane = &mut out[o * h * w..(o + 1) * h * w];
            out_plane.fill(bs[o]);
            for ci in 0..self.in_c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((o * self.in_c + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..h {
                            let src_off = (ci * (h + 2 * self.pad()) + y + ky) * wp + kx;
                            let src = &pin[src_off..src_off + w];
                            let dst = &mut out_plane[y * w..y * w + w];
                            for i in 0..w {
                                dst[i] += wv * src[i];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((self.out_c, h, w), out).unwrap()
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        gout: &Array3<f64>,
        grads: &mut Grads,
    ) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let k = self.ksize;
        let p = self.pad();
        let (pin, hp, wp) = self.padded(x);
        let gs = gout.as_slice().unwrap();

        // Bias gradient.
        let mut gb = ArrayD::zeros(IxDyn(&[self.out_c]));
        {
            let gbs = gb.as_slice_mut().unwrap();
            for o in 0..self.out_c {
                gbs[o] = gs[o * h * w..(o + 1) * h * w].iter().sum();
            }
        }
        grads.accumulate(self.b, gb);

        // Weight gradient.
        let mut gw = ArrayD::zeros(IxDyn(&[self.out_c, self.in_c, k, k]));
        {
            let gws = gw.as_slice_mut().unwrap();
            for o in 0..self.out_c {
                let gplane = &gs[o * h * w..(o + 1) * h * w];
                for ci in 0..self.in_c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for y in 0..h {
                                let src_off = (ci * hp + y + ky) * wp + kx;
                                let src = &pin[src_off..src_off + w];
                                let gr = &gplane[y * w..y * w + w];
                                for i in 0..w {
                                    acc += gr[i] * src[i];
                                }
                            }
                            gws[((o * self.in_c + ci) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        }
        grads.accumulate(self.w, gw);

        // Input gradient: correlate the flipped kernel over the padded gout.
        let mut gp = vec![0.0; self.out_c * hp * wp];
        for o in 0..self.out_c {
            for y in 0..h {
                let src = &gs[(o * h + y) * w..(o * h + y) * w + w];
                let dst = &mut gp[(o * hp + y + p) * wp + p..(o * hp + y + p) * wp + p + w];
                dst.copy_from_slice(src);
            }
        }
        let ws = store.get(self.w).as_slice().unwrap();
        let mut gin = vec![0.0; self.in_c * h * w];
        for ci in 0..self.in_c {
            let gin_plane = &mut gin[ci * h * w..(ci + 1) * h * w];
            for o in 0..self.out_c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = ws[((o * self.in_c + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (fy, fx) = (2 * p - ky, 2 * p - kx);
                        for y in 0..h {
                            let src_off = (o * hp + y + fy) * wp + fx;
                            let src = &gp[src_off..src_off + w];
                            let dst = &mut gin_plane[y * w..y * w + w];
                            for i in 0..w {
                                dst[i] += wv * src[i];
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((self.in_c, h, w), gin).unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = he_std(in_dim);
        let w = ArrayD::from_shape_simple_fn(IxDyn(&[out_dim, in_dim]), || {
            std * rng.sample::<f64, _>(StandardNormal)
        });
        let b = ArrayD::zeros(IxDyn(&[out_dim]));
        Linear {
            w: store.register(format!("{name}.weight"), w),
            b: store.register(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.in_dim);
        let ws = store.get(self.w).as_slice().unwrap();
        let bs = store.get(self.b).as_slice().unwrap();
        let xs = x.as_slice().unwrap();
        Array1::from_shape_fn(self.out_dim, |o| {
            let row = &ws[o * self.in_dim..(o + 1) * self.in_dim];
            bs[o] + row.iter().zip(xs).map(|(w, x)| w * x).sum::<f64>()
        })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array1<f64>,
        gout: &Array1<f64>,
        grads: &mut Grads,
    ) -> Array1<f64> {
        let mut gw = ArrayD::zeros(IxDyn(&[self.out_dim, self.in_dim]));
        {
            let gws = gw.as_slice_mut().unwrap();
            for o in 0..self.out_dim {
                for i in 0..self.in_dim {
                    gws[o * self.in_dim + i] = gout[o] * x[i];
                }
            }
        }
        grads.accumulate(self.w, gw);
        grads.accumulate(self.b, gout.to_owned().into_dyn());

        let ws = store.get(self.w).as_slice().unwrap();
        Array1::from_shape_fn(self.in_dim, |i| {
            (0..self.out_dim).map(|o| ws[o * self.in_dim + i] * gout[o]).sum()
        })
    }
}

/// 2x2 average pooling.
#[derive(Debug, Clone, Copy)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward(x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg pool needs even dims, got {h}x{w}");
        Array3::from_shape_fn((c, h / 2, w / 2), |(ci, y, xx)| {
            0.25 * (x[(ci, 2 * y, 2 * xx)]
                + x[(ci, 2 * y, 2 * xx + 1)]
                + x[(ci, 2 * y + 1, 2 * xx)]
                + x[(ci, 2 * y + 1, 2 * xx + 1)])
        })
    }

    pub fn backward(gout: &Array3<f64>) -> Array3<f64> {
        let (c, h2, w2) = gout.dim();
        Array3::from_shape_fn((c, h2 * 2, w2 * 2), |(ci, y, x)| 0.25 * gout[(ci, y / 2, x / 2)])
    }
}

/// 2x nearest-neighbor upsampling.
#[derive(Debug, Clone, Copy)]
pub struct UpsampleNearest2;

impl UpsampleNearest2 {
    pub fn forward(x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[(ci, y / 2, xx / 2)])
    }

    pub fn backward(gout: &Array3<f64>) -> Array3<f64> {
        let (c, h2, w2) = gout.dim();
        assert!(h2 % 2 == 0 && w2 % 2 == 0);
        Array3::from_shape_fn((c, h2 / 2, w2 / 2), |(ci, y, x)| {
            gout[(ci, 2 * y, 2 * x)]
                + gout[(ci, 2 * y, 2 * x + 1)]
                + gout[(ci, 2 * y + 1, 2 * x)]
                + gout[(ci, 2 * y + 1, 2 * x + 1)]
        })
    }
}

pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    assert_eq!((h, w), (hb, wb), "concat spatial mismatch");
    let mut out = Array3::zeros((ca + cb, h, w));
    out.slice_mut(ndarray::s![..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![ca.., .., ..]).assign(b);
    out
}

pub fn split_channels(g: &Array3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    let a = g.slice(ndarray::s![..ca, .., ..]).to_owned();
    let b = g.slice(ndarray::s![ca.., .., ..]).to_owned();
    (a, b)
}

/// Adds a per-channel bias vector to a feature map.
pub fn add_channel_bias(x: &mut Array3<f64>, bias: &Array1<f64>) {
    let (c, _, _) = x.dim();
    assert_eq!(c, bias.len());
    for (ci, mut plane) in x.outer_iter_mut().enumerate() {
        let bv = bias[ci];
        plane.mapv_inplace(|v| v + bv);
    }
}

/// Backward of [`add_channel_bias`] wrt the bias: sums the gradient per channel.
pub fn channel_bias_grad(gout: &Array3<f64>) -> Array1<f64> {
    Array1::from_iter(gout.outer_iter().map(|plane| plane.sum()))
}

/// Mean over all elements of a feature map, per channel (global average pool).
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    let norm = 1.0 / (h * w) as f64;
    Array1::from_iter(x.outer_iter().map(|plane| plane.sum() * norm))
}

pub fn global_avg_pool_backward(gout: &Array1<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let norm = 1.0 / (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| gout[ci] * norm)
}

/// Sinusoidal embedding of an integer timestep.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "time embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let freq = if half > 1 {
            (-(10_000.0f64.ln()) * k as f64 / (half - 1) as f64).exp()
        } else {
            1.0
        };
        let arg = t as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}
