//! Document-level relation extraction with a bi-encoder that matches pair
//! representations against encoded relation-label text.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod llm;
pub mod lop;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod pretrain_gen;
pub mod relation;
pub mod rng;
pub mod tokenizer;
pub mod toy;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
