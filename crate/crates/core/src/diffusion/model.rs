//! The noise-predicting denoiser network.
//!
//! A small U-Net-style encoder-decoder: residual conv blocks with a timestep
//! embedding and a pooled text embedding added per block as channel biases.
//! Decoder blocks accept optional additive residuals — the hook the
//! hypernetwork uses to steer generation. Output shape equals input shape
//! (epsilon-residual form) and evaluation is a pure function of
//! (parameters, inputs).

use crate::error::{CoreError, Result};
use crate::nn::layers::{
    add_channel_bias, channel_bias_grad, concat_channels, silu_backward, silu_map, sinusoidal_embedding,
    split_channels, AvgPool2, Conv2d, Linear, UpsampleNearest2,
};
use crate::nn::store::{Grads, ParamId, ParamStore};
use crate::rng::{rng_from_seed, SeededRng};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Image channels (1 grayscale, 3 RGB).
    pub in_channels: usize,
    /// Output channels; equals `in_channels` for the epsilon-residual
    /// denoiser, differs for the segmentation head.
    pub out_channels: usize,
    /// Channel count at full resolution; deeper levels double it.
    pub base_channels: usize,
    /// Resolution levels (1 = no down/upsampling).
    pub levels: usize,
    /// Sinusoidal timestep embedding width.
    pub time_dim: usize,
    /// Pooled text-embedding width fed to every block.
    pub cond_dim: usize,
    /// Rows of the trainable text-embedding table.
    pub vocab_size: usize,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 || self.levels == 0 {
            return Err(CoreError::config("arch: channels and levels must be positive"));
        }
        if self.levels > 3 {
            return Err(CoreError::config("arch: at most 3 levels supported"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(CoreError::config("arch: time_dim must be even and >= 2"));
        }
        if self.cond_dim == 0 || self.vocab_size == 0 {
            return Err(CoreError::config("arch: cond_dim and vocab_size must be positive"));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel width of each decoder block output, in decoder order
    /// (deepest first). These are the residual injection sites.
    pub fn site_channels(&self) -> Vec<usize> {
        (0..self.levels).rev().map(|l| self.level_channels(l)).collect()
    }

    /// Minimum input size so every pooling stage stays even.
    pub fn min_input_size(&self) -> usize {
        1 << self.levels
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            out_channels: 3,
            base_channels: 16,
            levels: 2,
            time_dim: 32,
            cond_dim: 64,
            vocab_size: 16,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    t_proj: Linear,
    c_proj: Linear,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct BlockCache {
    x: Array3<f64>,
    h1: Array3<f64>,
    a1: Array3<f64>,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        cond_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, rng);
        let t_proj = Linear::new(store, &format!("{name}.t_proj"), time_dim, cout, rng);
        let c_proj = Linear::new(store, &format!("{name}.c_proj"), cond_dim, cout, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, rng);
        let skip = if cin != cout {
            Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, rng))
        } else {
            None
        };
        ResBlock { conv1, t_proj, c_proj, conv2, skip }
    }

    fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        temb: &Array1<f64>,
        cemb: &Array1<f64>,
    ) -> (Array3<f64>, BlockCache) {
        let mut h1 = self.conv1.forward(store, x);
        add_channel_bias(&mut h1, &self.t_proj.forward(store, temb));
        add_channel_bias(&mut h1, &self.c_proj.forward(store, cemb));
        let a1 = silu_map(&h1);
        let h2 = self.conv2.forward(store, &a1);
        let out = match &self.skip {
            Some(skip) => h2 + skip.forward(store, x),
            None => h2 + x,
        };
        (out, BlockCache { x: x.clone(), h1, a1 })
    }

    /// Returns (grad_x, grad_temb, grad_cemb).
    fn backward(
        &self,
        store: &ParamStore,
        cache: &BlockCache,
        temb: &Array1<f64>,
        cemb: &Array1<f64>,
        gout: &Array3<f64>,
        grads: &mut Grads,
    ) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
        let g_a1 = self.conv2.backward(store, &cache.a1, gout, grads);
        let g_h1 = silu_backward(&cache.h1, &g_a1);
        let bias_grad = channel_bias_grad(&g_h1);
        let g_temb = self.t_proj.backward(store, temb, &bias_grad, grads);
        let g_cemb = self.c_proj.backward(store, cemb, &bias_grad, grads);
        let mut g_x = self.conv1.backward(store, &cache.x, &g_h1, grads);
        match &self.skip {
            Some(skip) => g_x += &skip.backward(store, &cache.x, gout, grads),
            None => g_x += gout,
        }
        (g_x, g_temb, g_cemb)
    }
}

#[derive(Debug, Clone)]
struct UNetLayers {
    t_mlp1: Linear,
    t_mlp2: Linear,
    conv_in: Conv2d,
    enc: Vec<ResBlock>,
    mid: ResBlock,
    dec: Vec<ResBlock>,
    conv_out: Conv2d,
}

fn build_unet(store: &mut ParamStore, prefix: &str, arch: &ArchConfig, rng: &mut SeededRng) -> UNetLayers {
    let l = arch.levels;
    let t_mlp1 = Linear::new(store, &format!("{prefix}.time.mlp1"), arch.time_dim, arch.time_dim, rng);
    let t_mlp2 = Linear::new(store, &format!("{prefix}.time.mlp2"), arch.time_dim, arch.time_dim, rng);
    let conv_in = Conv2d::new(store, &format!("{prefix}.conv_in"), arch.in_channels, arch.base_channels, 3, rng);
    let mut enc = Vec::with_capacity(l);
    for lv in 0..l {
        let cin = if lv == 0 { arch.base_channels } else { arch.level_channels(lv - 1) };
        enc.push(ResBlock::new(
            store,
            &format!("{prefix}.enc{lv}"),
            cin,
            arch.level_channels(lv),
            arch.time_dim,
            arch.cond_dim,
            rng,
        ));
    }
    let deep = arch.level_channels(l - 1);
    let mid = ResBlock::new(store, &format!("{prefix}.mid"), deep, deep, arch.time_dim, arch.cond_dim, rng);
    let mut dec = Vec::with_capacity(l);
    for (i, lv) in (0..l).rev().enumerate() {
        let carried = if lv == l - 1 { arch.level_channels(lv) } else { arch.level_channels(lv + 1) };
        let cin = carried + arch.level_channels(lv);
        dec.push(ResBlock::new(
            store,
            &format!("{prefix}.dec{i}"),
            cin,
            arch.level_channels(lv),
            arch.time_dim,
            arch.cond_dim,
            rng,
        ));
    }
    let conv_out = Conv2d::new(store, &format!("{prefix}.conv_out"), arch.base_channels, arch.out_channels, 3, rng);
    UNetLayers { t_mlp1, t_mlp2, conv_in, enc, mid, dec, conv_out }
}

pub struct UNetCache {
    temb0: Array1<f64>,
    t_u1: Array1<f64>,
    t_a1: Array1<f64>,
    temb: Array1<f64>,
    cemb: Array1<f64>,
    x: Array3<f64>,
    enc_caches: Vec<BlockCache>,
    mid_cache: BlockCache,
    dec_caches: Vec<BlockCache>,
    /// Raw decoder-block outputs (pre residual injection), decoder order.
    pub dec_outputs: Vec<Array3<f64>>,
    last: Array3<f64>,
}

pub struct BackwardResult {
    pub grads: Grads,
    pub grad_input: Array3<f64>,
    pub grad_cond: Array1<f64>,
    /// Gradient flowing into each decoder-site residual, deepest site first.
    pub grad_residuals: Vec<Array3<f64>>,
    /// Gradient at the post-conv_in feature map; the hypernetwork routes this
    /// into its driver stem.
    pub grad_stem_point: Array3<f64>,
}

/// Shared forward/backward implementation over a parameter store. The base
/// denoiser and the hypernetwork copy both drive it.
#[derive(Debug, Clone)]
pub struct UNet {
    layers: UNetLayers,
    pub arch: ArchConfig,
}

impl UNet {
    pub fn build(store: &mut ParamStore, prefix: &str, arch: &ArchConfig, rng: &mut SeededRng) -> Self {
        UNet { layers: build_unet(store, prefix, arch, rng), arch: arch.clone() }
    }

    fn time_embed(&self, store: &ParamStore, t: usize) -> (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>) {
        let temb0 = sinusoidal_embedding(t, self.arch.time_dim);
        let u1 = self.layers.t_mlp1.forward(store, &temb0);
        let a1 = u1.mapv(crate::nn::layers::silu);
        let temb = self.layers.t_mlp2.forward(store, &a1);
        (temb0, u1, a1, temb)
    }

    /// Full forward pass. `residuals`, when non-empty, must hold one map per
    /// decoder site (deepest first) with matching shapes. `stem_add`, when
    /// present, is added to the post-conv_in features (the hypernetwork's
    /// driver pathway).
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        t: usize,
        cond: Option<&Array1<f64>>,
        residuals: &[Array3<f64>],
        stem_add: Option<&Array3<f64>>,
    ) -> (Array3<f64>, UNetCache) {
        let arch = &self.arch;
        let (c, h, w) = x.dim();
        assert_eq!(c, arch.in_channels, "denoiser input channels");
        let div = 1usize << (arch.levels - 1);
        assert!(h % div == 0 && w % div == 0, "input {h}x{w} not divisible by {div}");
        assert!(
            residuals.is_empty() || residuals.len() == arch.levels,
            "expected one residual per decoder site"
        );

        let (temb0, t_u1, t_a1, temb) = self.time_embed(store, t);
        let cemb = cond.cloned().unwrap_or_else(|| Array1::zeros(arch.cond_dim));
        assert_eq!(cemb.len(), arch.cond_dim, "cond embedding width");

        let mut hcur = self.layers.conv_in.forward(store, x);
        if let Some(add) = stem_add {
            hcur += add;
        }
        let mut skips = Vec::with_capacity(arch.levels);
        let mut enc_caches = Vec::with_capacity(arch.levels);
        for lv in 0..arch.levels {
            if lv > 0 {
                hcur = AvgPool2::forward(&hcur);
            }
            let (out, cache) = self.layers.enc[lv].forward(store, &hcur, &temb, &cemb);
            hcur = out.clone();
            skips.push(out);
            enc_caches.push(cache);
        }
        let (mid_out, mid_cache) = self.layers.mid.forward(store, &hcur, &temb, &cemb);
        hcur = mid_out;

        let mut dec_caches = Vec::with_capacity(arch.levels);
        let mut dec_outputs = Vec::with_capacity(arch.levels);
        for (i, lv) in (0..arch.levels).rev().enumerate() {
            if lv != arch.levels - 1 {
                hcur = UpsampleNearest2::forward(&hcur);
            }
            let joined = concat_channels(&hcur, &skips[lv]);
            let (out, cache) = self.layers.dec[i].forward(store, &joined, &temb, &cemb);
            dec_outputs.push(out.clone());
            hcur = out;
            if !residuals.is_empty() {
                assert_eq!(hcur.dim(), residuals[i].dim(), "residual shape at site {i}");
                hcur += &residuals[i];
            }
            dec_caches.push(cache);
        }
        let out = self.layers.conv_out.forward(store, &hcur);
        let cache = UNetCache {
            temb0,
            t_u1,
            t_a1,
            temb,
            cemb,
            x: x.clone(),
            enc_caches,
            mid_cache,
            dec_caches,
            dec_outputs,
            last: hcur,
        };
        (out, cache)
    }

    /// Backward pass. `extra_dec_grads`, when non-empty, injects additional
    /// gradient at each decoder-block output (decoder order); the
    /// hypernetwork's coupling projections feed gradient back this way.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &UNetCache,
        gout: &Array3<f64>,
        extra_dec_grads: &[Array3<f64>],
    ) -> BackwardResult {
        let arch = &self.arch;
        let mut grads = Grads::zeros_for(store);
        let mut g_temb_total: Array1<f64> = Array1::zeros(arch.time_dim);
        let mut g_cemb_total: Array1<f64> = Array1::zeros(arch.cond_dim);
        let mut grad_residuals: Vec<Array3<f64>> = Vec::with_capacity(arch.levels);

        let mut g = self.layers.conv_out.backward(store, &cache.last, gout, &mut grads);

        // Decoder, reversed (shallowest site first here).
        let mut g_skips: Vec<Option<Array3<f64>>> = vec![None; arch.levels];
        for (i, lv) in (0..arch.levels).rev().enumerate().collect::<Vec<_>>().into_iter().rev() {
            // Gradient arriving after the residual addition is also the
            // gradient wrt the injected residual at this site.
            grad_residuals.push(g.clone());
            if !extra_dec_grads.is_empty() {
                g += &extra_dec_grads[i];
            }
            let (g_joined, g_t, g_c) =
                self.layers.dec[i].backward(store, &cache.dec_caches[i], &cache.temb, &cache.cemb, &g, &mut grads);
            g_temb_total += &g_t;
            g_cemb_total += &g_c;
            let carried = if lv == arch.levels - 1 {
                arch.level_channels(lv)
            } else {
                arch.level_channels(lv + 1)
            };
            let (g_carried, g_skip) = split_channels(&g_joined, carried);
            g_skips[lv] = Some(g_skip);
            g = if lv == arch.levels - 1 {
                g_carried
            } else {
                UpsampleNearest2::backward(&g_carried)
            };
        }
        // grad_residuals was filled shallowest-first; flip to decoder order.
        grad_residuals.reverse();

        // Mid block.
        let (g_mid, g_t, g_c) =
            self.layers.mid.backward(store, &cache.mid_cache, &cache.temb, &cache.cemb, &g, &mut grads);
        g_temb_total += &g_t;
        g_cemb_total += &g_c;
        g = g_mid;

        // Encoder, reversed.
        for lv in (0..arch.levels).rev() {
            if let Some(gs) = &g_skips[lv] {
                g += gs;
            }
            let (g_in, g_t, g_c) =
                self.layers.enc[lv].backward(store, &cache.enc_caches[lv], &cache.temb, &cache.cemb, &g, &mut grads);
            g_temb_total += &g_t;
            g_cemb_total += &g_c;
            g = if lv > 0 { AvgPool2::backward(&g_in) } else { g_in };
        }
        let grad_stem_point = g.clone();
        let grad_input = self.layers.conv_in.backward(store, &cache.x, &g, &mut grads);

        // Time MLP.
        let g_a1 = self.layers.t_mlp2.backward(store, &cache.t_a1, &g_temb_total, &mut grads);
        let g_u1 = Array1::from_shape_fn(g_a1.len(), |i| {
            g_a1[i] * crate::nn::layers::silu_grad(cache.t_u1[i])
        });
        let _ = self.layers.t_mlp1.backward(store, &cache.temb0, &g_u1, &mut grads);

        BackwardResult { grads, grad_input, grad_cond: g_cemb_total, grad_residuals, grad_stem_point }
    }
}

/// The denoiser: a parameter store, its U-Net wiring and the text-embedding
/// table the prompt encoder reads from.
pub struct DenoiserModel {
    pub store: ParamStore,
    pub arch: ArchConfig,
    unet: UNet,
    text_table: ParamId,
}

impl DenoiserModel {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.out_channels != arch.in_channels {
            return Err(CoreError::config("denoiser: output shape must equal input shape (epsilon-residual form)"));
        }
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let unet = UNet::build(&mut store, "unet", arch, &mut rng);
        // Text rows start small but distinct; the prompt encoder verifies
        // injectivity on top of this.
        let table = ndarray::ArrayD::from_shape_simple_fn(
            ndarray::IxDyn(&[arch.vocab_size, arch.cond_dim]),
            || 0.1 * rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal),
        );
        let text_table = store.register("text.embedding", table);
        Ok(DenoiserModel { store, arch: arch.clone(), unet, text_table })
    }

    pub fn text_table_id(&self) -> ParamId {
        self.text_table
    }

    pub fn text_table(&self) -> Array2<f64> {
        self.store
            .get(self.text_table)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    /// Pure epsilon prediction.
    pub fn predict_eps(
        &self,
        x: &Array3<f64>,
        t: usize,
        cond: Option<&Array1<f64>>,
        residuals: &[Array3<f64>],
    ) -> Array3<f64> {
        self.unet.forward(&self.store, x, t, cond, residuals, None).0
    }

    pub fn forward_cached(
        &self,
        x: &Array3<f64>,
        t: usize,
        cond: Option<&Array1<f64>>,
        residuals: &[Array3<f64>],
    ) -> (Array3<f64>, UNetCache) {
        self.unet.forward(&self.store, x, t, cond, residuals, None)
    }

    pub fn backward(&self, cache: &UNetCache, gout: &Array3<f64>) -> BackwardResult {
        self.unet.backward(&self.store, cache, gout, &[])
    }

    pub fn content_hash(&self) -> String {
        self.store.content_hash()
    }

    /// Deep copy (parameters included).
    pub fn clone_model(&self) -> Self {
        DenoiserModel {
            store: self.store.clone(),
            arch: self.arch.clone(),
            unet: self.unet.clone(),
            text_table: self.text_table,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_array3;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            out_channels: 1,
            base_channels: 2,
            levels: 1,
            time_dim: 4,
            cond_dim: 4,
            vocab_size: 4,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let model = DenoiserModel::new(&tiny_arch(), 0).unwrap();
        let x = normal_array3(&mut rng_from_seed(1), (1, 8, 8));
        let y = model.predict_eps(&x, 3, None, &[]);
        assert_eq!(y.dim(), x.dim());

        let arch2 = ArchConfig { levels: 2, base_channels: 3, ..tiny_arch() };
        let model2 = DenoiserModel::new(&arch2, 0).unwrap();
        let y2 = model2.predict_eps(&x, 3, None, &[]);
        assert_eq!(y2.dim(), x.dim());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let model = DenoiserModel::new(&tiny_arch(), 7).unwrap();
        let x = normal_array3(&mut rng_from_seed(2), (1, 8, 8));
        let a = model.predict_eps(&x, 5, None, &[]);
        let b = model.predict_eps(&x, 5, None, &[]);
        assert_eq!(a, b);
    }

    #[test]
    fn conditioning_changes_output() {
        let model = DenoiserModel::new(&tiny_arch(), 7).unwrap();
        let x = normal_array3(&mut rng_from_seed(2), (1, 8, 8));
        let c = Array1::from_vec(vec![0.5, -0.3, 0.2, 0.9]);
        let a = model.predict_eps(&x, 5, None, &[]);
        let b = model.predict_eps(&x, 5, Some(&c), &[]);
        assert_ne!(a, b);
    }

    #[test]
    fn residual_injection_shifts_output() {
        let model = DenoiserModel::new(&tiny_arch(), 7).unwrap();
        let x = normal_array3(&mut rng_from_seed(2), (1, 8, 8));
        let zero = vec![Array3::zeros((2, 8, 8))];
        let a = model.predict_eps(&x, 5, None, &[]);
        let b = model.predict_eps(&x, 5, None, &zero);
        // Adding exact zeros must not change anything.
        assert_eq!(a, b);
        let bump = vec![Array3::from_elem((2, 8, 8), 0.1)];
        let c = model.predict_eps(&x, 5, None, &bump);
        assert_ne!(a, c);
    }

    #[test]
    fn site_channels_follow_decoder_order() {
        let arch = ArchConfig { levels: 2, base_channels: 4, ..tiny_arch() };
        assert_eq!(arch.site_channels(), vec![8, 4]);
    }
}
