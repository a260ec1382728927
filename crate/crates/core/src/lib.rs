//! DoubleU-Net semantic segmentation on CPU, from the tensors up.
//!
//! Two U-Net-style networks are stacked: the first, with a VGG-19 encoder
//! and an ASPP bridge, predicts a mask that multiplicatively gates the
//! input image before a second, from-scratch network predicts the final
//! mask. Everything runs on a small reverse-mode autodiff tape over dense
//! `(N,C,H,W)` tensors: `f32` for training, `f64` for finite-difference
//! gradient checking.
//!
//! ```
//! use duonet::models::{DoubleUNet, ModelConfig, SegModel};
//! use duonet::tape::{Mode, Tape};
//! use duonet::tensor::{Shape, Tensor};
//!
//! let config = ModelConfig {
//!     input_size: (64, 64),
//!     width_multiplier: 0.125,
//!     ..ModelConfig::default()
//! };
//! let mut model = DoubleUNet::<f32>::new(config, 42).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.constant(Tensor::full(Shape::new(1, 3, 64, 64), 0.5)).unwrap();
//! let out = model.forward(&mut tape, x, Mode::Eval).unwrap();
//! assert_eq!(tape.value(out.combined).shape(), Shape::new(1, 2, 64, 64));
//! ```

pub mod augment;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tape::{Mode, Tape, Var};
pub use tensor::{Dtype, Element, Shape, Tensor};
