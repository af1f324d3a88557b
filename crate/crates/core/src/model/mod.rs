//! Frozen transformer encoder with global and private bottleneck adapters.

mod config;
mod encoder;
mod params;
pub mod serialize;

pub use config::{EncoderConfig, Pooling};
pub use encoder::{
    adapter_apply, dual_adapter_apply, AdapterSource, AdapterStack, BoundAdapter,
    BoundAdapterSet, BoundClassifier, BoundModel, Prefix, TokenBatch, LAYER_NORM_EPS,
};
pub use params::{
    randomize_adapters, AdapterParams, AdapterSet, AdapterSite, Backbone, BlockWeights,
    Classifier, ModelParams, ParamGroup, ParameterCount, ADAPTER_INIT_STD,
};
