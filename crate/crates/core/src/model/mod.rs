//! Network definition: parameters, layers, instrumentation and the full model.

pub mod config;
pub mod layers;
pub mod net;
pub mod params;
pub mod probe;

pub use config::{ModelConfig, SpsStage, StageKind};
pub use layers::{BatchNorm, Conv, Forward, Linear};
pub use net::{gap, gtmp, Model, Model32, Model64};
pub use params::{BufferId, ParamId, ParamStore};
pub use probe::{LayerActivity, Probe};
