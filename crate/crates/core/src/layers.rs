//! Named parameters and the basic parameterized layers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::{Element, Shape, Tensor};

/// A named tensor owned by a model. `trainable` distinguishes optimized
/// weights from stateful buffers (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn trainable(name: impl Into<String>, value: Tensor<T>) -> Parameter<T> {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Parameter<T> {
        Parameter {
            name: name.into(),
            value,
            grad: None,
            trainable: false,
        }
    }

    /// Registers the parameter on a tape; trainable parameters become named
    /// differentiable leaves.
    pub fn push(&self, tape: &mut Tape<T>) -> Result<Var> {
        if self.trainable {
            tape.leaf_named(self.value.clone(), &self.name)
        } else {
            tape.constant(self.value.clone())
        }
    }
}

/// Walks every parameter (trainable and buffer) of a model in a fixed,
/// construction-defined order.
pub trait VisitParams<T: Element> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));
}

/// Total number of trainable scalars.
pub fn param_count<T: Element, M: VisitParams<T> + ?Sized>(model: &mut M) -> usize {
    let mut total = 0;
    model.visit_params(&mut |p| {
        if p.trainable {
            total += p.value.numel();
        }
    });
    total
}

/// Copies gradients recorded on the tape back into the matching parameters,
/// replacing any previous gradient.
pub fn absorb_grads<T: Element, M: VisitParams<T> + ?Sized>(model: &mut M, tape: &Tape<T>) {
    let grads: HashMap<String, Tensor<T>> = tape.named_grads().into_iter().collect();
    model.visit_params(&mut |p| {
        if p.trainable {
            if let Some(g) = grads.get(&p.name) {
                p.grad = Some(g.clone());
            }
        }
    });
}

/// Kaiming-uniform fan-in initialization: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Element, R: Rng>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

/// 2-D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Element> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<T: Element> Conv2dLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Conv2dLayer<T> {
        let weight = kaiming_uniform(
            Shape::new(c_out, c_in, kernel, kernel),
            c_in * kernel * kernel,
            rng,
        );
        Conv2dLayer {
            weight: Parameter::trainable(format!("{name}.weight"), weight),
            bias: Parameter::trainable(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1))),
            stride,
            padding,
            dilation,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.push(tape)?;
        let b = self.bias.push(tape)?;
        tape.conv2d(x, w, b, self.stride, self.padding, self.dilation)
    }
}

impl<T: Element> VisitParams<T> for Conv2dLayer<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch normalization with learnable scale/shift and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Parameter<T>,
    pub running_var: Parameter<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize, eps: f64, momentum: f64) -> BatchNorm2d<T> {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: Parameter::trainable(format!("{name}.gamma"), Tensor::full(s, T::one())),
            beta: Parameter::trainable(format!("{name}.beta"), Tensor::zeros(s)),
            running_mean: Parameter::buffer(format!("{name}.running_mean"), Tensor::zeros(s)),
            running_var: Parameter::buffer(format!("{name}.running_var"), Tensor::full(s, T::one())),
            eps,
            momentum,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = self.gamma.push(tape)?;
        let b = self.beta.push(tape)?;
        let eps = self.eps;
        let momentum = self.momentum;
        // split borrows: running buffers are mutated, gamma/beta already pushed
        let mean = self.running_mean.value.data_mut();
        // `data_mut` on two fields keeps borrows disjoint
        let var = self.running_var.value.data_mut();
        tape.batchnorm(x, g, b, mean, var, mode, eps, momentum)
    }
}

impl<T: Element> VisitParams<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Fully connected layer on `(N,C,1,1)` tensors.
#[derive(Debug, Clone)]
pub struct DenseLayer<T: Element> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Element> DenseLayer<T> {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> DenseLayer<T> {
        DenseLayer {
            weight: Parameter::trainable(
                format!("{name}.weight"),
                kaiming_uniform(Shape::new(c_out, c_in, 1, 1), c_in, rng),
            ),
            bias: Parameter::trainable(format!("{name}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1))),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = self.weight.push(tape)?;
        let b = self.bias.push(tape)?;
        tape.dense(x, w, b)
    }
}

impl<T: Element> VisitParams<T> for DenseLayer<T> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
