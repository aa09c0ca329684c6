pub mod activation;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod ops;
pub mod packing;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod training;
