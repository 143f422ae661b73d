//! Optional KL-regularized latent codec.
//!
//! The encoder produces a (mean, log-variance) pair at a reduced resolution;
//! the decoder maps latents back to pixel space. The loss is reconstruction
//! MSE plus `kl_weight` times the KL divergence to a standard normal. Desk
//! runs keep diffusion in pixel space; the codec stands alone.

use crate::error::{CoreError, Result};
use crate::nn::layers::{silu_backward, silu_map, AvgPool2, Conv2d, UpsampleNearest2};
use crate::nn::optim::{Adam, Optimizer};
use crate::nn::store::{Grads, ParamStore};
use crate::rng::{normal_array3, rng_from_seed, SeededRng};
use ndarray::Array3;

#[derive(Debug, Clone)]
enum CodecLayers {
    /// 1x1 linear paths; supports an exact identity initialization.
    Linear { enc: Conv2d, dec: Conv2d },
    /// Conv stem with pooling; the trainable variant.
    Conv { enc1: Conv2d, enc2: Conv2d, dec1: Conv2d, dec2: Conv2d },
}

pub struct LatentCodec {
    pub store: ParamStore,
    pub image_channels: usize,
    pub latent_channels: usize,
    pub downscale_factor: usize,
    pub kl_weight: f64,
    layers: CodecLayers,
}

impl LatentCodec {
    /// Conv codec. `downscale_factor` must be a power of two.
    pub fn new(
        image_channels: usize,
        latent_channels: usize,
        downscale_factor: usize,
        hidden: usize,
        kl_weight: f64,
        seed: u64,
    ) -> Result<Self> {
        if !downscale_factor.is_power_of_two() {
            return Err(CoreError::config("codec: downscale_factor must be a power of two"));
        }
        let mut rng: SeededRng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let enc1 = Conv2d::new(&mut store, "codec.enc1", image_channels, hidden, 3, &mut rng);
        let enc2 = Conv2d::new(&mut store, "codec.enc2", hidden, 2 * latent_channels, 3, &mut rng);
        let dec1 = Conv2d::new(&mut store, "codec.dec1", latent_channels, hidden, 3, &mut rng);
        let dec2 = Conv2d::new(&mut store, "codec.dec2", hidden, image_channels, 3, &mut rng);
        Ok(LatentCodec {
            store,
            image_channels,
            latent_channels,
            downscale_factor,
            kl_weight,
            layers: CodecLayers::Conv { enc1, enc2, dec1, dec2 },
        })
    }

    /// Identity codec: factor 1, latent channels equal to image channels,
    /// mean path is the identity and logvar is exactly zero.
    pub fn identity(image_channels: usize, kl_weight: f64) -> Self {
        let mut store = ParamStore::new();
        let enc = Conv2d::new_zeroed(&mut store, "codec.enc", image_channels, 2 * image_channels, 1);
        let dec = Conv2d::new_zeroed(&mut store, "codec.dec", image_channels, image_channels, 1);
        for c in 0..image_channels {
            store.get_mut(enc.w)[[c, c, 0, 0]] = 1.0;
            store.get_mut(dec.w)[[c, c, 0, 0]] = 1.0;
        }
        LatentCodec {
            store,
            image_channels,
            latent_channels: image_channels,
            downscale_factor: 1,
            kl_weight,
            layers: CodecLayers::Linear { enc, dec },
        }
    }

    fn check_shape(&self, x: &Array3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != self.image_channels {
            return Err(CoreError::shape(format!("codec: expected {} channels, got {c}", self.image_channels)));
        }
        if h % self.downscale_factor != 0 || w % self.downscale_factor != 0 {
            return Err(CoreError::shape(format!(
                "codec: {h}x{w} not divisible by downscale_factor {}",
                self.downscale_factor
            )));
        }
        Ok(())
    }

    /// Encodes to a (mean, logvar) pair at reduced resolution.
    pub fn encode(&self, x: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        self.check_shape(x)?;
        let both = match &self.layers {
            CodecLayers::Linear { enc, .. } => enc.forward(&self.store, x),
            CodecLayers::Conv { enc1, enc2, .. } => {
                let mut h = silu_map(&enc1.forward(&self.store, x));
                let mut f = self.downscale_factor;
                while f > 1 {
                    h = AvgPool2::forward(&h);
                    f /= 2;
                }
                enc2.forward(&self.store, &h)
            }
        };
        let (mean, logvar) = crate::nn::layers::split_channels(&both, self.latent_channels);
        Ok((mean, logvar))
    }

    pub fn decode(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, _, _) = z.dim();
        if c != self.latent_channels {
            return Err(CoreError::shape(format!("codec: latent expected {} channels, got {c}", self.latent_channels)));
        }
        Ok(match &self.layers {
            CodecLayers::Linear { dec, .. } => dec.forward(&self.store, z),
            CodecLayers::Conv { dec1, dec2, .. } => {
                let mut h = silu_map(&dec1.forward(&self.store, z));
                let mut f = self.downscale_factor;
                while f > 1 {
                    h = UpsampleNearest2::forward(&h);
                    f /= 2;
                }
                dec2.forward(&self.store, &h)
            }
        })
    }

    /// Mean-per-element KL(N(mean, exp(logvar)) || N(0, I)).
    pub fn kl_divergence(mean: &Array3<f64>, logvar: &Array3<f64>) -> f64 {
        let n = mean.len() as f64;
        ndarray::Zip::from(mean)
            .and(logvar)
            .fold(0.0, |acc, &m, &lv| acc + 0.5 * (m * m + lv.exp() - 1.0 - lv))
            / n
    }

    /// Reconstruction MSE plus weighted KL. `eps` supplies the
    /// reparameterization noise (`z = mean + exp(logvar/2) * eps`); pass zeros
    /// for a deterministic evaluation at the posterior mean.
    pub fn codec_loss(&self, x: &Array3<f64>, eps: &Array3<f64>) -> Result<f64> {
        let (mean, logvar) = self.encode(x)?;
        if eps.dim() != mean.dim() {
            return Err(CoreError::shape("codec: eps shape must match latent shape"));
        }
        let z = ndarray::Zip::from(&mean)
            .and(&logvar)
            .and(eps)
            .map_collect(|&m, &lv, &e| m + (0.5 * lv).exp() * e);
        let recon = self.decode(&z)?;
        let loss = super::ops::mse(&recon, x) + self.kl_weight * Self::kl_divergence(&mean, &logvar);
        if !loss.is_finite() {
            return Err(CoreError::numeric("codec loss is non-finite"));
        }
        Ok(loss)
    }

    /// One training step of the conv codec on a batch; returns the mean loss.
    pub fn train_step(&mut self, batch: &[Array3<f64>], opt: &mut Adam, rng: &mut SeededRng) -> Result<f64> {
        let CodecLayers::Conv { enc1, enc2, dec1, dec2 } = self.layers.clone() else {
            return Err(CoreError::config("codec: training requires the conv variant"));
        };
        let mut grads = Grads::zeros_for(&self.store);
        let mut total = 0.0;
        let bn = batch.len() as f64;
        for x in batch {
            self.check_shape(x)?;
            // Forward with caches.
            let e1 = enc1.forward(&self.store, x);
            let a1 = silu_map(&e1);
            let mut pools = vec![a1.clone()];
            let mut f = self.downscale_factor;
            let mut cur = a1;
            while f > 1 {
                cur = AvgPool2::forward(&cur);
                pools.push(cur.clone());
                f /= 2;
            }
            let both = enc2.forward(&self.store, &cur);
            let (mean, logvar) = crate::nn::layers::split_channels(&both, self.latent_channels);
            let eps = normal_array3(rng, mean.dim());
            let std = logvar.mapv(|lv| (0.5 * lv).exp());
            let z = &mean + &(&std * &eps);
            let d1 = dec1.forward(&self.store, &z);
            let ad = silu_map(&d1);
            let mut ups = vec![ad.clone()];
            let mut f2 = self.downscale_factor;
            let mut cur2 = ad;
            while f2 > 1 {
                cur2 = UpsampleNearest2::forward(&cur2);
                ups.push(cur2.clone());
                f2 /= 2;
            }
            let recon = dec2.forward(&self.store, &cur2);

            let n = recon.len() as f64;
            let ln = mean.len() as f64;
            let recon_loss = super::ops::mse(&recon, x);
            let kl = Self::kl_divergence(&mean, &logvar);
            total += recon_loss + self.kl_weight * kl;

            // Backward.
            let g_recon = ndarray::Zip::from(&recon).and(x).map_collect(|&r, &xv| 2.0 * (r - xv) / n);
            let mut g = dec2.backward(&self.store, ups.last().unwrap(), &g_recon, &mut grads);
            for _ in 0..self.downscale_factor.trailing_zeros() {
                g = UpsampleNearest2::backward(&g);
            }
            let g_d1 = silu_backward(&d1, &g);
            let g_z = dec1.backward(&self.store, &z, &g_d1, &mut grads);

            // dKL/dmean = mean / ln, dKL/dlogvar = 0.5 (exp(lv) - 1) / ln.
            let g_mean = &g_z + &mean.mapv(|m| self.kl_weight * m / ln);
            let g_logvar = ndarray::Zip::from(&g_z)
                .and(&std)
                .and(&eps)
                .and(&logvar)
                .map_collect(|&gz, &sd, &e, &lv| {
                    gz * 0.5 * sd * e + self.kl_weight * 0.5 * (lv.exp() - 1.0) / ln
                });
            let g_both = crate::nn::layers::concat_channels(&g_mean, &g_logvar);
            let mut g_enc = enc2.backward(&self.store, pools.last().unwrap(), &g_both, &mut grads);
            for _ in 0..self.downscale_factor.trailing_zeros() {
                g_enc = AvgPool2::backward(&g_enc);
            }
            let g_e1 = silu_backward(&e1, &g_enc);
            enc1.backward(&self.store, x, &g_e1, &mut grads);
        }
        grads.scale(1.0 / bn);
        opt.step(&mut self.store, &grads);
        Ok(total / bn)
    }

    /// Mean reconstruction MSE at the posterior mean over a set of images.
    pub fn mean_reconstruction_mse(&self, images: &[Array3<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in images {
            let (mean, _) = self.encode(x)?;
            let recon = self.decode(&mean)?;
            total += super::ops::mse(&recon, x);
        }
        Ok(total / images.len() as f64)
    }
}
