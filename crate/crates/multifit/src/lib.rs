//! Desk-scale language-model fine-tuning toolkit built around a QRNN
//! encoder: subword tokenization, staged transfer training, pseudo-label
//! bootstrapping, and the numerics underneath them.

pub mod autodiff;
pub mod bench;
pub mod bootstrap;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod network;
pub mod tensor;
pub mod tokenizer;
pub mod train;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}
