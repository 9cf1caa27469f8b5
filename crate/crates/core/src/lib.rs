pub mod blob;
pub mod checkpoint;
pub mod cli;
pub mod clm;
pub mod config;
pub mod dse;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod params;
pub mod synthdata;
pub mod tape;
pub mod train;
pub mod viz;
