pub mod attention;
pub mod cli;
pub mod dataset;
pub mod diffcore;
pub mod evaluator;
pub mod models;
pub mod trainer;
