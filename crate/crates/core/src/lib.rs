//! Semi-supervised binary image classification with GANs.
//!
//! A normal DCGAN is trained on one known class while a deliberately weakened
//! twin trains alongside it; the twin's blurry samples are shown to the
//! normal discriminator as extra fakes. Test images are scored by searching
//! the generator's latent space and combining pixel and discriminator-feature
//! reconstruction errors. Deep SVDD, NoiseGAN and PCA + Isolation Forest are
//! provided as baselines, plus a metric-learning probe for picking confusable
//! class pairs.

pub mod data;
pub mod eval;
pub mod forest;
pub mod models;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use tensor::{Tape, Tensor, Var};
