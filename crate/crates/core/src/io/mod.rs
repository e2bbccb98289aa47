//! On-disk containers.

pub mod arrayfile;

pub use arrayfile::ArrayFile;
