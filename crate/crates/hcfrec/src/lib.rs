//! Filesystem, CLI, and benchmark layer over the training core: prepared
//! dataset directories, binary checkpoint/code files, the Hamming-vs-dot
//! scan benchmark, and parallel metric evaluation.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod par;
