use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VisualEncoderSpec;
use crate::autodiff::{matmul_values, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Image pixels, `height x width x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualInput(pub Tensor);

/// Frozen linear patch embedder standing in for the vision tower.
///
/// Never part of a training graph, so it cannot receive gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub spec: VisualEncoderSpec,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl VisualEncoder {
    pub fn new(spec: VisualEncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = spec.patch_dim();
        let weight = Tensor::randn(&[d_in, spec.visual_dim], 1.0 / math::sqrt(d_in as f64), &mut rng);
        let bias = Tensor::randn(&[spec.visual_dim], 0.1, &mut rng);
        Ok(Self { spec, weight, bias })
    }

    /// Flattens each `P x P` patch and maps it to `visual_dim` features.
    /// Patches are ordered row-major over the patch grid.
    pub fn encode(&self, image: &VisualInput) -> Result<Tensor> {
        let s = &self.spec;
        let want = [s.image_height, s.image_width, s.channels];
        if image.0.shape() != want {
            return Err(Error::dim("encode_visual", image.0.shape(), &want));
        }
        let p = s.patch_size;
        let (gh, gw) = (s.image_height / p, s.image_width / p);
        let px = image.0.data();
        let mut patches = Vec::with_capacity(gh * gw * s.patch_dim());
        for pr in 0..gh {
            for pc in 0..gw {
                for y in 0..p {
                    for x in 0..p {
                        let off = ((pr * p + y) * s.image_width + pc * p + x) * s.channels;
                        patches.extend_from_slice(&px[off..off + s.channels]);
                    }
                }
            }
        }
        let patches = Tensor::new(alloc::vec![gh * gw, s.patch_dim()], patches)?;
        let mut z = matmul_values(&patches, &self.weight)?;
        let d = s.visual_dim;
        for row in z.data_mut().chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_gives_bias_on_every_patch() {
        let enc = VisualEncoder::new(VisualEncoderSpec::default(), 7).unwrap();
        let img = VisualInput(Tensor::zeros(&[12, 12, 4]));
        let z = enc.encode(&img).unwrap();
        assert_eq!(z.shape(), &[9, 32]);
        for r in 0..9 {
            assert_eq!(z.row(r), enc.bias.data());
        }
    }

    #[test]
    fn deterministic_and_size_checked() {
        let enc = VisualEncoder::new(VisualEncoderSpec::default(), 7).unwrap();
        let data: Vec<f64> = (0..12 * 12 * 4).map(|i| (i % 7) as f64 / 7.0).collect();
        let img = VisualInput(Tensor::new(alloc::vec![12, 12, 4], data).unwrap());
        assert_eq!(enc.encode(&img).unwrap(), enc.encode(&img).unwrap());
        let bad = VisualInput(Tensor::zeros(&[8, 12, 4]));
        assert!(matches!(enc.encode(&bad), Err(Error::Dimension { .. })));
    }
}
