//! Convolution layers and the squeeze/expand fire module.

use super::{init_uniform, BatchNorm, Mode, Param, Visit};
use crate::tensor::{Element, Result, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Plain 2-D convolution with per-channel bias and zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: Param::new(init_uniform(vec![out_ch, in_ch, kernel, kernel], fan_in, rng)),
            bias: Param::new(Tensor::zeros(vec![out_ch])),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, self.weight.var(), self.stride, self.pad)?;
        tape.add_channel_bias(y, self.bias.var())
    }
}

impl<T: Element> Visit<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// conv → batch norm → ReLU, the repeating unit of encoder and decoder.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Element> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Element> ConvBlock<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_ch, out_ch, kernel, stride, pad, rng),
            bn: BatchNorm::new(out_ch),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        Ok(tape.relu(y))
    }
}

impl<T: Element> Visit<T> for ConvBlock<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.bn.visit_params(&format!("{prefix}.bn"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn.visit_buffers(&format!("{prefix}.bn"), f);
    }
}

/// Fire module: a 1×1 squeeze convolution feeding parallel 1×1 and 3×3
/// expand convolutions whose outputs are concatenated on the channel
/// axis. With m = n = c/2 the module emits c channels at the input's
/// spatial size.
#[derive(Debug, Clone)]
pub struct FireModule<T: Element> {
    pub squeeze: ConvBlock<T>,
    pub expand1: ConvBlock<T>,
    pub expand3: ConvBlock<T>,
}

impl<T: Element> FireModule<T> {
    /// Standard configuration s=16, m=n=c/2 for `out_ch` output channels.
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(out_ch % 2 == 0, "fire module output channels must be even");
        let s = 16;
        let half = out_ch / 2;
        FireModule {
            squeeze: ConvBlock::new(in_ch, s, 1, 1, 0, rng),
            expand1: ConvBlock::new(s, half, 1, 1, 0, rng),
            expand3: ConvBlock::new(s, half, 3, 1, 1, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.expand1.conv.out_channels() + self.expand3.conv.out_channels()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = self.squeeze.forward(tape, x, mode)?;
        let e1 = self.expand1.forward(tape, s, mode)?;
        let e3 = self.expand3.forward(tape, s, mode)?;
        tape.concat(&[e1, e3], 1)
    }
}

impl<T: Element> Visit<T> for FireModule<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.squeeze.visit_params(&format!("{prefix}.squeeze"), f);
        self.expand1.visit_params(&format!("{prefix}.expand1"), f);
        self.expand3.visit_params(&format!("{prefix}.expand3"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.squeeze.visit_buffers(&format!("{prefix}.squeeze"), f);
        self.expand1.visit_buffers(&format!("{prefix}.expand1"), f);
        self.expand3.visit_buffers(&format!("{prefix}.expand3"), f);
    }
}

/// Residual connection around a fire module: identity when channel
/// counts agree, a 1×1 projection convolution otherwise.
#[derive(Debug, Clone)]
pub enum Shortcut<T: Element> {
    Identity,
    Projection(Conv2d<T>),
}

impl<T: Element> Shortcut<T> {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        if in_ch == out_ch {
            Shortcut::Identity
        } else {
            Shortcut::Projection(Conv2d::new(in_ch, out_ch, 1, 1, 0, rng))
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Shortcut::Identity => Ok(x),
            Shortcut::Projection(conv) => conv.forward(tape, x),
        }
    }
}

impl<T: Element> Visit<T> for Shortcut<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Shortcut::Projection(conv) = self {
            conv.visit_params(&format!("{prefix}.projection"), f);
        }
    }
}
