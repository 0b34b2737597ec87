pub mod arrays;
pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod prosody;
pub mod prosody_encoder;
pub mod prosody_predictor;
pub mod synthesis;
pub mod tensor;
pub mod text_encoder;
pub mod training;
pub mod vocoder;

pub use error::{Error, Result};
