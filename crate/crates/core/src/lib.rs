//! Multimodal vehicle-trajectory prediction on rasterized scenes.
//!
//! The pipeline: [`scenegen`] simulates scripted actors on synthetic maps,
//! [`raster`] renders actor-centric bird's-eye views, [`model`] maps a raster
//! and three state scalars to M trajectories with probabilities, [`losses`]
//! holds the training objectives, [`train`] fits the network with [`grad`],
//! [`eval`] scores predictors and [`baselines`]
//! provides the kinematic reference.

pub mod baselines;
pub mod eval;
pub mod geom;
pub mod grad;
pub mod losses;
pub mod model;
pub mod raster;
pub mod scenegen;
pub mod train;
