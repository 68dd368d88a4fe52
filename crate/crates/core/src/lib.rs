//! Desk-scale multimodal face anti-spoofing lab.
//!
//! The crate is organised as a stack:
//!
//! - [`tensor`] / [`tape`] — a small reverse-mode autodiff engine over dense
//!   row-major tensors, generic over `f32` (training) and `f64` (gradient
//!   checking).
//! - [`descriptors`] — LBP / HOG / PLGF local texture descriptors that turn a
//!   grayscale image into model input channels, each with a naive per-pixel
//!   reference implementation used as a test oracle.
//! - [`vit`] — a compact multimodal Vision Transformer: shared patch
//!   tokenizer, class token, pre-norm encoder blocks, classification head and
//!   freeze policies for parameter-efficient finetuning.
//! - [`adapters`] — convolutional adapters injected beside MHSA/FFN sublayers,
//!   including the adaptive multimodal adapter that fuses per-modality token
//!   grids through a shared 3x3 convolution with learned modality weights.
//! - [`m2a2e`] — modality-asymmetric masked-autoencoder pretraining: one
//!   modality is partially masked, the encoder sees only its visible tokens,
//!   and unshared decoders reconstruct every modality.
//! - [`data`] / [`metrics`] — synthetic multimodal liveness data with
//!   controllable attack types, and the standard FAS metric set
//!   (APCER/BPCER/ACER, EER, HTER, TPR@FPR).
//! - [`training`] — Adam/AdamW, warmup+cosine schedule, the finetune loop and
//!   one-axis sweeps.

pub mod adapters;
pub mod checkpoint;
pub mod data;
pub mod descriptors;
pub mod gradcheck;
pub mod image;
pub mod m2a2e;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vit;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::{Tensor, TensorError};
