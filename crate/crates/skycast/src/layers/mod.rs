//! Neural building blocks: dense stacks with batch normalization, the
//! convolutional sky-image encoder with fire modules and residual links,
//! a 2-layer LSTM, and the upsampling image decoder.
//!
//! Layers own their parameters as plain tensors. Before a forward pass
//! the model binds every parameter onto the active [`Tape`], and the
//! layer's `forward` then refers to the bound tape variables. Binding a
//! shared layer once per tape is what gives weight sharing across
//! timesteps.

pub mod conv;
pub mod decoder;
pub mod encoder;
pub mod lstm;

pub use conv::{Conv2d, ConvBlock, FireModule, Shortcut};
pub use decoder::ImageDecoder;
pub use encoder::ImageEncoder;
pub use lstm::{LstmCell, LstmStack};

use crate::tensor::{Element, Result, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Whether batch norm uses batch statistics (and updates its running
/// buffers) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor plus its binding onto the current tape.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub value: Tensor<T>,
    var: Option<Var>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param { value, var: None }
    }

    /// Registers the parameter on `tape`. Must be called once per tape
    /// before any layer forward that uses this parameter.
    pub fn bind(&mut self, tape: &mut Tape<T>, requires_grad: bool) {
        self.var = Some(tape.leaf(self.value.clone(), requires_grad));
    }

    /// The tape variable from the latest [`bind`](Self::bind).
    pub fn var(&self) -> Var {
        self.var.expect("parameter used before bind()")
    }
}

/// Visits every trainable parameter and every persistent buffer of a
/// layer tree with a stable, unique dotted name.
pub trait Visit<T: Element> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}
}

/// Uniform fan-in initialization: U(−√(1/fan_in), +√(1/fan_in)).
pub fn init_uniform<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    None,
}

impl Activation {
    pub fn apply<T: Element>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
            Activation::None => x,
        }
    }
}

/// Batch normalization over channel axis 1.
///
/// In train mode the output is normalized with batch statistics and the
/// running buffers are updated as `running = momentum·running +
/// (1−momentum)·batch`. In eval mode the layer is a pure per-channel
/// affine map built from the running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(vec![channels], T::one())),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], T::one()),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let eps = T::from_f64_lossy(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) =
                    tape.batch_norm_train(x, self.gamma.var(), self.beta.var(), eps)?;
                let mom = T::from_f64_lossy(self.momentum);
                let one_m = T::one() - mom;
                for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = mom * *r + one_m * b;
                }
                for (r, &b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = mom * *r + one_m * b;
                }
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                self.gamma.var(),
                self.beta.var(),
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
        }
    }
}

impl<T: Element> Visit<T> for BatchNorm<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}

/// Fully-connected layer: optional batch norm, then activation.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub activation: Activation,
    pub batch_norm: Option<BatchNorm<T>>,
}

impl<T: Element> DenseLayer<T> {
    pub fn new(
        input: usize,
        output: usize,
        activation: Activation,
        batch_norm: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DenseLayer {
            weight: Param::new(init_uniform(vec![output, input], input, rng)),
            bias: Param::new(Tensor::zeros(vec![output])),
            activation,
            batch_norm: batch_norm.then(|| BatchNorm::new(output)),
        }
    }

    /// Layer with zero weight and bias; its pre-activation output is 0
    /// for any input, which pins sigmoid heads to 0.5 at initialization.
    pub fn zeroed(input: usize, output: usize, activation: Activation) -> Self {
        DenseLayer {
            weight: Param::new(Tensor::zeros(vec![output, input])),
            bias: Param::new(Tensor::zeros(vec![output])),
            activation,
            batch_norm: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = tape.linear(x, self.weight.var(), Some(self.bias.var()))?;
        if let Some(bn) = &mut self.batch_norm {
            h = bn.forward(tape, h, mode)?;
        }
        Ok(self.activation.apply(tape, h))
    }
}

impl<T: Element> Visit<T> for DenseLayer<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
        if let Some(bn) = &mut self.batch_norm {
            bn.visit_params(&format!("{prefix}.bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(bn) = &mut self.batch_norm {
            bn.visit_buffers(&format!("{prefix}.bn"), f);
        }
    }
}

/// MLP in the m×n×…×out convention: hidden layers use batch norm + tanh,
/// the output layer applies a sigmoid, so outputs live in (0,1).
#[derive(Debug, Clone)]
pub struct MlpStack<T: Element> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Element> MlpStack<T> {
    /// `zero_output` zeroes the output layer, making the stack emit
    /// exactly 0.5 everywhere at initialization.
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        zero_output: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut dim = input;
        for &h in hidden {
            layers.push(DenseLayer::new(dim, h, Activation::Tanh, true, rng));
            dim = h;
        }
        layers.push(if zero_output {
            DenseLayer::zeroed(dim, output, Activation::Sigmoid)
        } else {
            DenseLayer::new(dim, output, Activation::Sigmoid, false, rng)
        });
        MlpStack { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let got = tape.shape(h).to_vec();
            if got.len() != 2 || got[1] != layer.input_dim() {
                return Err(TensorError::InvalidShape {
                    op: "mlp_forward",
                    shape: got,
                    reason: format!("layer {i} expects input dim {}", layer.input_dim()),
                });
            }
            h = layer.forward(tape, h, mode)?;
        }
        Ok(h)
    }
}

impl<T: Element> Visit<T> for MlpStack<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.layer{i}"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_buffers(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Binds every parameter of a layer tree onto `tape`.
pub fn bind_all<T: Element, L: Visit<T>>(layer: &mut L, tape: &mut Tape<T>, requires_grad: bool) {
    // The tape borrow has to thread through the closure.
    let cell = std::cell::RefCell::new(tape);
    layer.visit_params("", &mut |_, p| {
        p.bind(&mut cell.borrow_mut(), requires_grad);
    });
}
