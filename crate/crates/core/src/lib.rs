pub mod codec;
pub mod covariance;
pub mod data;
pub mod dist;
pub mod error;
pub mod evalx;
pub mod geo;
pub mod linalg;
pub mod mra;
pub mod optim;
pub mod paramfield;
pub mod pipeline;
pub mod partition;
pub mod seeds;
pub mod trend;

pub use error::{Error, Result};

pub use covariance::{FnField, KernelSpec, LocalParams, ParamProvider, StationaryMaternParams};
pub use data::Observation;
pub use evalx::{Pipeline, Prediction, ScoreReport};
pub use geo::{GeoBox, LonLat, OceanMask};
pub use mra::{PredictOptions, PredictionField, Prior};
pub use paramfield::{LocalEstimate, ParamField};
pub use partition::{RegionId, RegionTree};
pub use trend::TrendModel;
