pub mod error;
pub mod attention;
pub mod config;
pub mod data;
pub mod decoding;
pub mod evalbench;
pub mod model;
pub mod tensor;
pub mod training;
