pub mod commands;
pub mod config;
pub mod fsio;
pub mod nifti;
pub mod preprocess;
