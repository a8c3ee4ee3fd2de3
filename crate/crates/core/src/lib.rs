//! Heterogeneous-query camera-radar fusion decoder.
//!
//! Image, radar, and world queries are decoded by a shared-weight transformer
//! that adds two interaction steps: masked cross-type attention after feature
//! aggregation ([`qmix`]) and constrained exchange of deformable sampling
//! points between related queries ([`qswap`]). Backbones are replaced by a
//! synthetic scene renderer ([`scene`]) whose planted object signatures make
//! every stage checkable.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); the `*F64`
//! and `*F32` aliases below name the common instantiations.

pub mod decoder;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod kernel;
pub mod metrics;
pub mod qinit;
pub mod qmix;
pub mod qswap;
pub mod scalar;
pub mod scene;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::Real;

pub type MatrixF64 = kernel::Matrix<f64>;
pub type MatrixF32 = kernel::Matrix<f32>;
pub type FeatureGridF64 = grid::FeatureGrid<f64>;
pub type FeatureGridF32 = grid::FeatureGrid<f32>;
pub type QuerySetF64 = qinit::QuerySet<f64>;
pub type QuerySetF32 = qinit::QuerySet<f32>;
pub type DecoderWeightsF64 = decoder::DecoderWeights<f64>;
pub type DecoderWeightsF32 = decoder::DecoderWeights<f32>;
pub type LayerOutputF64 = decoder::LayerOutput<f64>;
pub type LayerOutputF32 = decoder::LayerOutput<f32>;
pub type SceneFeaturesF64 = decoder::SceneFeatures<f64>;
pub type SceneFeaturesF32 = decoder::SceneFeatures<f32>;
