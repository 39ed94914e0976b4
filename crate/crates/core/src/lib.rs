//! Masked-autoencoder pre-training for small datasets.
//!
//! The encoder sees only the visible patches of two augmented views. A
//! one-block decoder reconstructs the masked pixels, a location head recovers
//! where each visible token came from, and the decoder's class tokens feed a
//! query/momentum contrastive pair across the views.

pub mod autograd;
pub mod config;
pub mod dataio;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use config::{parse_config, DataConfig, DataSource, RunConfig};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Matrix;
