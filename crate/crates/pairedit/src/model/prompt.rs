//! Prompt-pair encoder.
//!
//! Encodes an image into a small fixed budget of prompt tokens: patch
//! projection plus grid positions, one residual MLP trunk, then a
//! token-mixing head that compresses the patch axis down to the prompt
//! budget. A prompt pair (before/after exemplar) is two encodings stacked
//! row-wise, both produced by the same weights.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::block::WEIGHT_STD;
use super::linear::Linear;
use super::patch::{grid_positional, patchify};

#[derive(Clone)]
pub struct PromptEncoder<F: Scalar> {
    pub patch_proj: Linear<F>,
    pub trunk_fc1: Linear<F>,
    pub trunk_fc2: Linear<F>,
    /// Token-mixing head over the patch axis: `n_patches -> n_tokens`.
    pub mix: Linear<F>,
    pub out: Linear<F>,
    patch: usize,
    resolution: usize,
}

impl<F: Scalar> PromptEncoder<F> {
    pub fn new(rng: &mut Rng, d: usize, patch: usize, resolution: usize, n_tokens: usize) -> Self {
        assert!(patch > 0 && resolution % patch == 0, "patch size must divide resolution");
        let n_patches = (resolution / patch) * (resolution / patch);
        assert!(n_tokens > 0, "prompt token budget must be positive");
        let pd = patch * patch * 3;
        PromptEncoder {
            patch_proj: Linear::gaussian(rng, pd, d, WEIGHT_STD),
            trunk_fc1: Linear::gaussian(rng, d, 4 * d, WEIGHT_STD),
            trunk_fc2: Linear::gaussian(rng, 4 * d, d, WEIGHT_STD),
            mix: Linear::gaussian(rng, n_patches, n_tokens, WEIGHT_STD),
            out: Linear::gaussian(rng, d, d, WEIGHT_STD),
            patch,
            resolution,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.mix.d_out()
    }

    fn check_resolution(&self, img: &Image) -> Result<()> {
        if img.width != self.resolution || img.height != self.resolution {
            return Err(Error::Shape(format!(
                "prompt image is {}x{}, encoder expects {}x{}",
                img.width, img.height, self.resolution, self.resolution
            )));
        }
        Ok(())
    }

    /// Encode one image into `[n_tokens, d]` prompt tokens.
    pub fn encode_image(&self, img: &Image) -> Result<Tensor<F>> {
        self.check_resolution(img)?;
        let d = self.out.d_out();
        let (payload, coords) = patchify::<F>(img, self.patch);
        let n = coords.len();
        let x = Tensor::new(payload, &[n, self.patch_proj.d_in()]);
        let pos = Tensor::new(grid_positional::<F>(&coords, d), &[n, d]);
        let tok = self.patch_proj.forward(&x).add(&pos);
        let trunk = self.trunk_fc2.forward(&self.trunk_fc1.forward(&tok.layer_norm()).gelu());
        let h = tok.add(&trunk);
        let mixed = self.mix.forward(&h.transpose()).transpose();
        Ok(self.out.forward(&mixed))
    }

    /// Encode a before/after exemplar pair into `[2 * n_tokens, d]`, the
    /// source encoding stacked on top of the target encoding.
    pub fn encode_pair(&self, source: &Image, target: &Image) -> Result<Tensor<F>> {
        let a = self.encode_image(source)?;
        let b = self.encode_image(target)?;
        Ok(Tensor::concat(&[a, b], 0))
    }

    /// Mean-pooled token features for one image, used as a frozen image
    /// descriptor by the similarity metric.
    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        let tokens = self.encode_image(img)?;
        let (n, d) = (tokens.rows(), tokens.cols());
        let data = tokens.to_vec();
        let mut pooled = vec![0.0f64; d];
        for r in 0..n {
            for c in 0..d {
                pooled[c] += data[r * d + c].f64();
            }
        }
        for p in pooled.iter_mut() {
            *p /= n as f64;
        }
        Ok(pooled)
    }

    pub fn params(&self) -> Vec<(String, Tensor<F>)> {
        let mut out = Vec::new();
        let mut lin = |name: &str, l: &Linear<F>| {
            out.push((format!("prompt.{name}.weight"), l.weight.clone()));
            out.push((format!("prompt.{name}.bias"), l.bias.clone()));
        };
        lin("patch_proj", &self.patch_proj);
        lin("trunk.fc1", &self.trunk_fc1);
        lin("trunk.fc2", &self.trunk_fc2);
        lin("mix", &self.mix);
        lin("out", &self.out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(seed: u64, size: usize) -> Image {
        let mut rng = Rng::seed(seed);
        let mut img = Image::new(size, size);
        let denom = (size - 1).max(1) as f32;
        for y in 0..size {
            for x in 0..size {
                img.set_pixel(x, y, [rng.uniform() as f32, x as f32 / denom, y as f32 / denom]);
            }
        }
        img.snap();
        img
    }

    #[test]
    fn token_shape_honors_the_budget() {
        let mut rng = Rng::seed(31);
        let enc: PromptEncoder<f32> = PromptEncoder::new(&mut rng, 64, 4, 16, 8);
        let tokens = enc.encode_image(&gradient_image(1, 16)).unwrap();
        assert_eq!(tokens.shape(), &[8, 64]);
        let pair = enc.encode_pair(&gradient_image(1, 16), &gradient_image(2, 16)).unwrap();
        assert_eq!(pair.shape(), &[16, 64]);
    }

    #[test]
    fn pair_rows_are_the_stacked_single_encodings() {
        let mut rng = Rng::seed(32);
        let enc: PromptEncoder<f32> = PromptEncoder::new(&mut rng, 32, 4, 8, 4);
        let a = gradient_image(3, 8);
        let b = gradient_image(4, 8);
        let pair = enc.encode_pair(&a, &b).unwrap().to_vec();
        let mut stacked = enc.encode_image(&a).unwrap().to_vec();
        stacked.extend(enc.encode_image(&b).unwrap().to_vec());
        assert_eq!(pair, stacked);
    }

    #[test]
    fn wrong_resolution_is_a_shape_error() {
        let mut rng = Rng::seed(33);
        let enc: PromptEncoder<f32> = PromptEncoder::new(&mut rng, 32, 4, 16, 4);
        let small = Image::new(8, 8);
        match enc.encode_image(&small) {
            Err(Error::Shape(_)) => {}
            Err(other) => panic!("wrong error kind: {other}"),
            Ok(_) => panic!("undersized image was accepted"),
        }
    }

    #[test]
    fn different_images_produce_different_tokens() {
        let mut rng = Rng::seed(34);
        let enc: PromptEncoder<f32> = PromptEncoder::new(&mut rng, 32, 4, 16, 4);
        let a = enc.encode_image(&gradient_image(5, 16)).unwrap().to_vec();
        let b = enc.encode_image(&gradient_image(6, 16)).unwrap().to_vec();
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn features_are_the_token_mean() {
        let mut rng = Rng::seed(35);
        let enc: PromptEncoder<f64> = PromptEncoder::new(&mut rng, 16, 4, 8, 2);
        let img = gradient_image(7, 8);
        let tokens = enc.encode_image(&img).unwrap();
        let feats = enc.features(&img).unwrap();
        assert_eq!(feats.len(), 16);
        let data = tokens.to_vec();
        for c in 0..16 {
            let mean = (data[c] + data[16 + c]) / 2.0;
            assert!((feats[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_every_encoder_weight() {
        let mut rng = Rng::seed(36);
        let enc: PromptEncoder<f64> = PromptEncoder::new(&mut rng, 16, 4, 8, 2);
        let tokens = enc.encode_image(&gradient_image(8, 8)).unwrap();
        tokens.mse(&Tensor::zeros(&[2, 16])).backward();
        for (name, p) in enc.params() {
            if name.ends_with("bias") {
                continue; // mix bias gradient can be tiny but weights must move
            }
            let g = p.grad().unwrap_or_else(|| panic!("{name} got no gradient"));
            assert!(g.iter().any(|&g| g != 0.0), "{name} gradient is zero");
        }
    }
}
