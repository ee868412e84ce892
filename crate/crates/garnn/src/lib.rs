//! Graph attention recurrent neural networks for correlated time series
//! forecasting.
//!
//! The model derives a pair of row-stochastic adjacency matrices per
//! timestamp from the input graph signal via masked multi-head attention,
//! feeds them into a diffusion-convolutional GRU, and wraps the whole thing
//! in an encoder-decoder trained end-to-end with reverse-mode autodiff.
//!
//! Module map:
//! - [`numerics`]: dense tensors and the gradient tape everything runs on
//! - [`graph`]: directed sensor graph built from pairwise distances
//! - [`attention`]: per-timestamp out/in attention matrices
//! - [`diffusion`]: the diffusion convolution operator over those matrices
//! - [`cell`]: the graph-attention GRU cell
//! - [`seq2seq`]: encoder-decoder with scheduled sampling
//! - [`training`]: loss, Adam, learning-rate schedule, train loop, checkpoints
//! - [`data`]: series ingestion, windowing, splits, synthetic generation
//! - [`evaluation`]: horizon-sliced MAE/RMSE/MAPE and the historical-average
//!   baseline

pub mod attention;
pub mod cell;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod numerics;
pub mod seq2seq;
pub mod training;

pub use error::{Error, Result};
