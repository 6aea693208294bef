//! Learned multi-scale energy prior.

mod conv;
mod energy;
mod model;
mod network;
mod train;

pub use conv::{ConvKind, ConvLayer, Tensor};
pub use energy::{
    energy_and_score_slice_padded, energy_and_score_volume, energy_slice, energy_slice_padded,
    energy_volume, psi_forward, score_slice, score_volume,
};
pub use model::{EnergyModel, DEFAULT_SIGMA_MAX};
pub use network::{Architecture, Network};
pub use train::{train_dsm, train_dsm_from, DsmConfig, TrainReport};
