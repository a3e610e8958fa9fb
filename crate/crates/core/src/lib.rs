pub mod attribution;
pub mod autograd;
pub mod config;
pub mod denoiser;
pub mod encoder;
pub mod error;
pub mod figures;
pub mod image;
pub mod ingest;
pub mod metrics;
pub mod params;
pub mod model;
pub mod parcel;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod synth;
pub mod tokenizer;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
