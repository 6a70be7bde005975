//! Federated training of small convolutional networks across simulated data
//! silos, with batch-norm statistics that can stay local to each silo.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity,
    clippy::needless_range_loop
)]

pub mod adabn;
pub mod adam;
pub mod batchnorm;
pub mod datagen;
pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod real;
pub mod seeds;
pub mod tensor;
pub mod wire;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use error::{Error, Result};
pub use federation::{FederationConfig, Strategy};
pub use model::{build_model, InputShape, LayerSpec, ModelSpec, ParamKey, ParamName, ParamSet, ParamTag};
pub use nn::{Mode, Network};
pub use real::{Dtype, Real};
pub use tensor::Tensor;
