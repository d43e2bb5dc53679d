//! Adaptive focal loss for volumetric binary segmentation.
//!
//! The focusing exponent and class weight of a focal loss are derived per
//! sample from the ground-truth mask: the foreground and background volume
//! fractions, and the mean gradient magnitude of the mask (a boundary
//! roughness measure). Around that sit the baseline losses it is compared
//! against, confusion-count metrics, a deterministic phantom generator and a
//! three-layer 3D convolutional network with hand-written backpropagation.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the training
//! loop and the CLI live in the `afl-lab` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use loss::{AblationFlags, AlphaMode, LossKind, LossSpec, LossValue};
pub use metrics::ConfusionCounts;
pub use model::{ParamGrads, TinySeg3D};
pub use optim::SgdConfig;
pub use params::{AdaptiveParams, GradientField, PixelCounts};
pub use phantom::{PhantomSpec, SmoothnessBin, VolumeBin};
pub use rng::Xoshiro256StarStar;
pub use volume::{Dims, MaskVolume, Volume3D};
