pub mod apps;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod optim;
pub mod rng;
pub mod smoothness;
pub mod tensor;
pub mod trainer;
pub mod zoo;
pub mod predictor;
