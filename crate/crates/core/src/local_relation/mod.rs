//! Local relation layer: adaptive aggregation weights from query/key composability
//! plus a learned geometric prior, normalized over a `k × k` window.

pub mod composability;
pub mod config;
pub mod optimized;
pub mod params;
pub mod prior;
pub mod reference;

pub use composability::{composability, composability1, composability_partials};
pub use config::{GeoMode, LocalRelationConfig, Normalization, Variant, MAX_KERNEL};
pub use optimized::{lr_forward_optimized, lr_forward_train};
pub use params::{GeoGrads, GeoParams, LocalRelationGrads, LocalRelationParams};
pub use prior::{materialize_prior, offset_value, prior_backward, prior_or_zero, GeometricPriorTable};
pub use reference::{aggregate, compute_weight_field, lr_backward, lr_forward, ForwardCache, WeightField};
