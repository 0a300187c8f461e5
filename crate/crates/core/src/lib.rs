//! CPU inference, analysis and verification engine for the EFA-YOLO
//! detector.
//!
//! Layers, bottom-up: [`tensor`] kernels, [`nn`] execution backends and
//! parameter plumbing, [`autodiff`] tape, [`blocks`] (CBS, SPPF, EAConv,
//! EADown), the assembled [`detector`], [`analysis`] (budgets, latency,
//! metrics), [`io`] formats and the [`toytrain`] loop.

pub mod analysis;
pub mod autodiff;
pub mod blocks;
pub mod detector;
pub mod error;
pub mod io;
pub mod nn;
pub mod selftest;
pub mod tensor;
pub mod toytrain;
pub mod verify;

pub use detector::{infer_image, BBox, Detection, Model, ModelConfig, RawPrediction};
pub use error::{Error, Result};
pub use nn::{Eager, Exec, Module};
pub use tensor::{ConvSpec, Scalar, Shape, Tensor};
