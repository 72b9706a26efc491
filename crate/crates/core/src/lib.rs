//! Multi-pathway 3D patch segmentation of brain ultrasound into background,
//! grey matter and white matter.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`]: volume/label/mask types, file I/O and preprocessing
//! * [`sampler`]: class-balanced multi-scale patch extraction, augmentation, tiling
//! * [`tensor`] and [`net`]: a small dense tensor engine and the three-pathway network
//! * [`optim`]: Adam, the triangular cyclic learning rate and the training loop
//! * [`checkpoint`]: JSON manifest + f32 blob persistence of networks and optimizer state
//! * [`crf`]: dense CRF mean-field refinement of probability maps
//! * [`ussim`]: procedural phantoms and a simplified ultrasound sweep simulator
//! * [`eval`]: Dice / sensitivity / specificity, folds and cross-validation
//! * [`config`]: the TOML run configuration

pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod error;
pub mod eval;
pub mod net;
pub mod optim;
pub mod probmap;
pub mod sampler;
pub mod seed;
pub mod tensor;
pub mod ussim;
pub mod volume;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use probmap::ProbabilityMap;
pub use volume::{Geometry, Label, LabelMap, Mask, Volume, NUM_CLASSES};
