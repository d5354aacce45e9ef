//! Core library for grounded multimodal information extraction: value
//! types, meta-response parsing, grounding geometry, set matching, scoring,
//! corpus loading, and the inference harness.

pub mod assignment;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod metaresponse;
pub mod model;
pub mod parallel;
pub mod scoring;

pub use error::{Error, Result};
