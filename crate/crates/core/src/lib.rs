//! Channel-masked learned image compression at desk scale.
//!
//! A small autodiff engine ([`tensor`]) drives a factorized-prior codec
//! ([`codec`]) whose hidden layers carry learnable binary channel masks
//! ([`abcm`]). After training ([`trainer`]) the masked channels are cut out
//! ([`pruner`]) and the savings are counted and timed ([`cost`]). A greedy
//! post-hoc channel search ([`greedy`]) serves as a baseline.

pub mod abcm;
pub mod codec;
pub mod container;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod greedy;
pub mod images;
pub mod pruner;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use abcm::{GateConfig, GateMode, ImportanceVector, Phase};
pub use codec::{ChannelConfig, CodecModel, SlotId};
pub use error::{Error, Result};
pub use pruner::KeepPlan;
pub use rng::RngState;
pub use tensor::Tensor;
