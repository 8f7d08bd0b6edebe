pub mod analytics;
pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod error;
pub mod model;
pub mod optim;
pub mod strategy;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod transformer;
