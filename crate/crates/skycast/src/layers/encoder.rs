//! Convolutional sky-image encoder.
//!
//! Geometry: a 5×5 stem convolution (64 channels), max pooling after the
//! stem and after every fire module, and an 8×8 valid convolution head
//! producing a 256-d latent. An input of H = 8·2^L needs exactly L
//! pooling stages to reach the 8×8 head, so the number of realized fire
//! modules is L−1; configured fire modules beyond that are dropped from
//! the tail.

use super::conv::{ConvBlock, FireModule, Shortcut};
use super::{Mode, Param, Visit};
use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};
use rand_chacha::ChaCha8Rng;

pub const LATENT_DIM: usize = 256;
pub const STEM_CHANNELS: usize = 64;
pub const DEFAULT_FIRE_CHANNELS: [usize; 3] = [64, 128, 256];

/// Number of pooling stages for resolution `h`, when admissible
/// (h = 8·2^L for integer L ≥ 1).
pub fn pooling_stages(h: usize) -> Option<usize> {
    let mut size = h;
    let mut stages = 0;
    while size > 8 && size % 2 == 0 {
        size /= 2;
        stages += 1;
    }
    (size == 8 && stages >= 1).then_some(stages)
}

#[derive(Debug, Clone)]
pub struct ImageEncoder<T: Element> {
    pub stem: ConvBlock<T>,
    pub fires: Vec<(FireModule<T>, Shortcut<T>)>,
    pub head: ConvBlock<T>,
    pub input_channels: usize,
    pub resolution: usize,
}

impl<T: Element> ImageEncoder<T> {
    pub fn new(
        input_channels: usize,
        resolution: usize,
        fire_channels: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stages = pooling_stages(resolution).ok_or_else(|| TensorError::InvalidShape {
            op: "image_encoder",
            shape: vec![resolution, resolution],
            reason: "resolution must be 8*2^L for L >= 1 (16, 32, 64, 128, ...)".into(),
        })?;
        let fire_count = stages - 1;
        if fire_count > fire_channels.len() {
            return Err(TensorError::InvalidShape {
                op: "image_encoder",
                shape: vec![resolution, resolution],
                reason: format!(
                    "resolution needs {fire_count} fire modules but only {} are configured; \
                     admissible sizes stop at {}",
                    fire_channels.len(),
                    8 << (fire_channels.len() + 1),
                ),
            });
        }
        let stem = ConvBlock::new(input_channels, STEM_CHANNELS, 5, 1, 2, rng);
        let mut fires = Vec::with_capacity(fire_count);
        let mut ch = STEM_CHANNELS;
        for &c in &fire_channels[..fire_count] {
            let fire = FireModule::new(ch, c, rng);
            let shortcut = Shortcut::new(ch, c, rng);
            fires.push((fire, shortcut));
            ch = c;
        }
        let head = ConvBlock::new(ch, LATENT_DIM, 8, 1, 0, rng);
        Ok(ImageEncoder {
            stem,
            fires,
            head,
            input_channels,
            resolution,
        })
    }

    /// Encodes a batch of image stacks [N, C, H, H] into latents [N, 256].
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4
            || shape[1] != self.input_channels
            || shape[2] != self.resolution
            || shape[3] != self.resolution
        {
            return Err(TensorError::ShapeMismatch {
                op: "encode_image",
                lhs: vec![
                    shape.first().copied().unwrap_or(0),
                    self.input_channels,
                    self.resolution,
                    self.resolution,
                ],
                rhs: shape,
            });
        }
        let n = shape[0];
        let mut h = self.stem.forward(tape, x, mode)?;
        h = tape.maxpool2(h)?;
        for (fire, shortcut) in &mut self.fires {
            let main = fire.forward(tape, h, mode)?;
            let skip = shortcut.forward(tape, h)?;
            h = tape.add(main, skip)?;
            h = tape.maxpool2(h)?;
        }
        let z = self.head.forward(tape, h, mode)?;
        tape.reshape(z, vec![n, LATENT_DIM])
    }
}

impl<T: Element> Visit<T> for ImageEncoder<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_params(&format!("{prefix}.stem"), f);
        for (i, (fire, shortcut)) in self.fires.iter_mut().enumerate() {
            fire.visit_params(&format!("{prefix}.fire{i}"), f);
            shortcut.visit_params(&format!("{prefix}.fire{i}.shortcut"), f);
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem.visit_buffers(&format!("{prefix}.stem"), f);
        for (i, (fire, _)) in self.fires.iter_mut().enumerate() {
            fire.visit_buffers(&format!("{prefix}.fire{i}"), f);
        }
        self.head.visit_buffers(&format!("{prefix}.head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::bind_all;
    use crate::layers::testutil::{rng, smooth_random};

    #[test]
    fn stage_arithmetic() {
        assert_eq!(pooling_stages(16), Some(1));
        assert_eq!(pooling_stages(32), Some(2));
        assert_eq!(pooling_stages(128), Some(4));
        assert_eq!(pooling_stages(8), None);
        assert_eq!(pooling_stages(24), None);
        assert_eq!(pooling_stages(100), None);
    }

    #[test]
    fn full_resolution_uses_three_fires_and_emits_256() {
        let mut enc =
            ImageEncoder::<f32>::new(20, 128, &DEFAULT_FIRE_CHANNELS, &mut rng(0)).unwrap();
        assert_eq!(enc.fires.len(), 3);
        let mut tape = Tape::new();
        bind_all(&mut enc, &mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![1, 20, 128, 128]));
        let z = enc.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(z).shape(), &[1, 256]);
    }

    #[test]
    fn reduced_resolution_drops_tail_fires() {
        let enc16 = ImageEncoder::<f32>::new(4, 16, &DEFAULT_FIRE_CHANNELS, &mut rng(0)).unwrap();
        assert_eq!(enc16.fires.len(), 0);
        let mut enc = ImageEncoder::<f32>::new(4, 16, &[64], &mut rng(0)).unwrap();
        let mut tape = Tape::new();
        bind_all(&mut enc, &mut tape, false);
        let x = tape.constant(Tensor::zeros(vec![2, 4, 16, 16]));
        let z = enc.forward(&mut tape, x, Mode::Eval).unwrap();
        assert_eq!(tape.value(z).shape(), &[2, 256]);
    }

    #[test]
    fn inadmissible_resolution_names_admissible_sizes() {
        let err = ImageEncoder::<f32>::new(20, 20, &DEFAULT_FIRE_CHANNELS, &mut rng(0))
            .unwrap_err()
            .to_string();
        assert!(err.contains("8*2^L"), "{err}");
    }

    #[test]
    fn different_images_produce_different_latents() {
        let mut enc = ImageEncoder::<f64>::new(2, 16, &[], &mut rng(3)).unwrap();
        let mut tape = Tape::new();
        bind_all(&mut enc, &mut tape, false);
        let a = tape.constant(smooth_random(vec![1, 2, 16, 16], 10));
        let b = tape.constant(smooth_random(vec![1, 2, 16, 16], 11));
        let za = enc.forward(&mut tape, a, Mode::Eval).unwrap();
        let zb = enc.forward(&mut tape, b, Mode::Eval).unwrap();
        assert_ne!(tape.value(za).data(), tape.value(zb).data());
    }

    #[test]
    fn weight_sharing_same_image_same_latent() {
        let mut enc = ImageEncoder::<f64>::new(2, 16, &[], &mut rng(4)).unwrap();
        let mut tape = Tape::new();
        bind_all(&mut enc, &mut tape, false);
        let img = smooth_random(vec![1, 2, 16, 16], 20);
        let a = tape.constant(img.clone());
        let b = tape.constant(img);
        let za = enc.forward(&mut tape, a, Mode::Eval).unwrap();
        let zb = enc.forward(&mut tape, b, Mode::Eval).unwrap();
        assert_eq!(tape.value(za).data(), tape.value(zb).data());
    }
}
