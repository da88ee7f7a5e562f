//! File formats, the training driver and the `tcleaf` command-line tool
//! built on [`tcleaf_core`].

pub mod ablation;
pub mod audit;
pub mod checkpoint;
pub mod cli;
pub mod config_file;
pub mod dataset;
pub mod gradsuite;
pub mod manifest;
pub mod report;
pub mod train;
pub mod yolo;
