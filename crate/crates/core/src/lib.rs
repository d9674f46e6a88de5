pub mod autodiff;
pub mod data;
pub mod decoding;
pub mod encoding;
pub mod graph;
pub mod model;
