//! Fixed feature extractor for the desk-scale FID.
//!
//! A small randomly-initialized CNN with weights derived from a pinned seed;
//! the weights never train and their content hash is frozen by a test, so
//! features (and therefore FIDs) are comparable across runs and machines.
//! Absolute values are not comparable to Inception-based FIDs.

use crate::error::Result;
use crate::nn::layers::{global_avg_pool, silu_map, AvgPool2, Conv2d};
use crate::nn::store::ParamStore;
use crate::rng::rng_from_seed;
use ndarray::{Array2, Array3};

/// Version tag recorded in reports; bump if the architecture or seed changes.
pub const FEATURE_EXTRACTOR_VERSION: &str = "fx1";
const FEATURE_SEED: u64 = 0x00f1_d0_5eed;
/// Images are resized to this square side before feature extraction.
pub const FEATURE_INPUT_SIZE: usize = 32;
pub const FEATURE_DIM: usize = 16;

pub struct FeatureExtractor {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
}

impl FeatureExtractor {
    pub fn new() -> Self {
        let mut rng = rng_from_seed(FEATURE_SEED);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, "fx.conv1", 3, 8, 3, &mut rng);
        let conv2 = Conv2d::new(&mut store, "fx.conv2", 8, 16, 3, &mut rng);
        let conv3 = Conv2d::new(&mut store, "fx.conv3", 16, FEATURE_DIM, 3, &mut rng);
        FeatureExtractor { store, conv1, conv2, conv3 }
    }

    pub fn weights_hash(&self) -> String {
        self.store.content_hash()
    }

    pub fn extract_one(&self, image: &Array3<f64>) -> Result<ndarray::Array1<f64>> {
        let (c, _, _) = image.dim();
        let rgb = if c == 3 {
            image.clone()
        } else {
            // Replicate grayscale to three channels.
            let (_, h, w) = image.dim();
            Array3::from_shape_fn((3, h, w), |(_, y, x)| image[(0, y, x)])
        };
        let resized = crate::imgproc::resize(&rgb, FEATURE_INPUT_SIZE, FEATURE_INPUT_SIZE)?;
        let h1 = AvgPool2::forward(&silu_map(&self.conv1.forward(&self.store, &resized)));
        let h2 = AvgPool2::forward(&silu_map(&self.conv2.forward(&self.store, &h1)));
        let h3 = silu_map(&self.conv3.forward(&self.store, &h2));
        Ok(global_avg_pool(&h3))
    }

    /// N x D feature matrix for a set of images.
    pub fn extract(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((images.len(), FEATURE_DIM));
        for (i, img) in images.iter().enumerate() {
            let f = self.extract_one(img)?;
            out.row_mut(i).assign(&f);
        }
        Ok(out)
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}
