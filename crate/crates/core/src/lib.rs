//! Desk-scale laboratory for embedded prompt tuning of vision transformers.
//!
//! Layers, bottom-up: [`tensor`] and [`autodiff`] (fp64 reverse mode with a
//! finite-difference oracle in [`gradcheck`]), [`vit`] (toy backbone), [`peft`]
//! (EPT and the baseline tuning methods), [`calibration`] (intra-class
//! distance and scaling-factor oracles), [`fewshot`] (episodes, training,
//! metrics) and [`io`] (checkpoints, manifests, deterministic JSON).

pub mod autodiff;
pub mod calibration;
pub mod error;
pub mod fewshot;
pub mod gradcheck;
pub mod io;
pub mod params;
pub mod peft;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
