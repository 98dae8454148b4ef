pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod mapping;
pub mod optim;
pub mod pipeline;
pub mod place_recognition;
pub mod scenarios;
pub mod tracking;
