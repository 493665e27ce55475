//! Passive estimation of HTTP request/response objects from encrypted QUIC
//! traffic, using only packet sizes, directions, timing and header bits.

pub mod analyzer;
pub mod connection;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod matcher;
pub mod model;
pub mod output;
pub mod params;
pub mod request;
pub mod response;
pub mod run;
pub mod synth;
