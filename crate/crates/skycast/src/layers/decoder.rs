//! Upsampling image decoder for the reconstruction branch.
//!
//! A learned projection seeds a 4×4×256 map from the 256-d latent; each
//! stage then doubles the spatial size with nearest-neighbor upsampling
//! followed by a 3×3 convolution, batch norm and ReLU. The channel
//! schedule halves from 128 (floor 16) and the final stage emits the
//! encoder's input channel count.

use super::conv::ConvBlock;
use super::encoder::LATENT_DIM;
use super::{init_uniform, Mode, Param, Visit};
use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

pub const SEED_SIZE: usize = 4;
pub const SEED_CHANNELS: usize = 256;

#[derive(Debug, Clone)]
pub struct ImageDecoder<T: Element> {
    pub seed_weight: Param<T>,
    pub seed_bias: Param<T>,
    pub blocks: Vec<ConvBlock<T>>,
    pub resolution: usize,
    pub out_channels: usize,
}

impl<T: Element> ImageDecoder<T> {
    pub fn new(resolution: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut size = SEED_SIZE;
        let mut stages = 0;
        while size < resolution {
            size *= 2;
            stages += 1;
        }
        if size != resolution || stages == 0 {
            return Err(TensorError::InvalidShape {
                op: "image_decoder",
                shape: vec![resolution, resolution],
                reason: format!("resolution must be {SEED_SIZE}*2^n for n >= 1"),
            });
        }
        let seed_dim = SEED_CHANNELS * SEED_SIZE * SEED_SIZE;
        let mut blocks = Vec::with_capacity(stages);
        let mut ch = SEED_CHANNELS;
        for i in 0..stages {
            let out = if i + 1 == stages {
                out_channels
            } else {
                (128 >> i).max(16)
            };
            blocks.push(ConvBlock::new(ch, out, 3, 1, 1, rng));
            ch = out;
        }
        Ok(ImageDecoder {
            seed_weight: Param::new(init_uniform(vec![seed_dim, LATENT_DIM], LATENT_DIM, rng)),
            seed_bias: Param::new(Tensor::zeros(vec![seed_dim])),
            blocks,
            resolution,
            out_channels,
        })
    }

    /// Decodes latents [N, 256] into images [N, C, H, H].
    pub fn forward(&mut self, tape: &mut Tape<T>, z: Var, mode: Mode) -> Result<Var> {
        let zs = tape.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != LATENT_DIM {
            return Err(TensorError::ShapeMismatch {
                op: "decode_image",
                lhs: vec![zs.first().copied().unwrap_or(0), LATENT_DIM],
                rhs: zs,
            });
        }
        let n = zs[0];
        let seed = tape.linear(z, self.seed_weight.var(), Some(self.seed_bias.var()))?;
        let mut h = tape.reshape(seed, vec![n, SEED_CHANNELS, SEED_SIZE, SEED_SIZE])?;
        for block in &mut self.blocks {
            h = tape.upsample2(h)?;
            h = block.forward(tape, h, mode)?;
        }
        Ok(h)
    }
}

impl<T: Element> Visit<T> for ImageDecoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.seed.weight"), &mut self.seed_weight);
        f(&format!("{prefix}.seed.bias"), &mut self.seed_bias);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&format!("{prefix}.conv{i}"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&format!("{prefix}.conv{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::bind_all;
    use crate::layers::testutil::rng;

    #[test]
    fn five_stages_reach_128() {
        let dec = ImageDecoder::<f32>::new(128, 20, &mut rng(0)).unwrap();
        assert_eq!(dec.blocks.len(), 5);
        let channels: Vec<usize> = dec.blocks.iter().map(|b| b.conv.out_channels()).collect();
        assert_eq!(channels, vec![128, 64, 32, 16, 20]);
    }

    #[test]
    fn three_stages_reach_32() {
        let mut dec = ImageDecoder::<f32>::new(32, 20, &mut rng(0)).unwrap();
        assert_eq!(dec.blocks.len(), 3);
        let mut tape = Tape::new();
        bind_all(&mut dec, &mut tape, false);
        let z = tape.constant(Tensor::zeros(vec![2, 256]));
        let img = dec.forward(&mut tape, z, Mode::Eval).unwrap();
        assert_eq!(tape.value(img).shape(), &[2, 20, 32, 32]);
    }

    #[test]
    fn invalid_resolution_rejected() {
        assert!(ImageDecoder::<f32>::new(24, 20, &mut rng(0)).is_err());
        assert!(ImageDecoder::<f32>::new(4, 20, &mut rng(0)).is_err());
    }

    #[test]
    fn zero_latent_zero_weights_zero_image() {
        let mut dec = ImageDecoder::<f64>::new(16, 3, &mut rng(1)).unwrap();
        dec.visit_params("", &mut |_, p| {
            p.value = Tensor::zeros(p.value.shape().to_vec());
        });
        let mut tape = Tape::new();
        bind_all(&mut dec, &mut tape, false);
        let z = tape.constant(Tensor::zeros(vec![1, 256]));
        let img = dec.forward(&mut tape, z, Mode::Eval).unwrap();
        assert!(tape.value(img).data().iter().all(|&v| v == 0.0));
    }
}
