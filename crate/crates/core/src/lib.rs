//! Lightweight vision transformer for single-channel SAR target chips.
//!
//! The crate bundles a small tape-based reverse-mode autodiff engine, the
//! transformer itself, an Adam training loop, image ingest and evaluation
//! utilities (confusion matrices, per-class metrics, heatmaps).
//!
//! ```
//! use lvit_core::{gen_synthetic, Lvit, ModelConfig, RngState};
//!
//! let data = gen_synthetic(1, 3, 0.3).unwrap();
//! let cfg = ModelConfig { embed_dim: 16, num_heads: 2, num_layers: 1, ..ModelConfig::default() };
//! let model = Lvit::init(cfg, &mut RngState::new(0)).unwrap();
//! let logits = model.forward(&data.samples[0].image, &mut RngState::new(1), false).unwrap();
//! assert_eq!(logits.shape(), &[10]);
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
mod kernels;
pub mod kv;
pub mod model;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, CheckpointMeta};
pub use data::{gen_synthetic, load_image_dir, preprocess, Dataset, ResizeMode, Sample};
pub use error::{LvitError, Result};
pub use eval::{class_metrics, confusion, macro_metrics, ConfusionMatrix, HeatmapScale, MetricsReport};
pub use gradcheck::{grad_check, GradCheckReport};
pub use kv::KvMap;
pub use model::{count_params, predict, Lvit, ModelConfig};
pub use param::{ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::Tensor;
pub use training::{fit, lr_at, EpochReport, TrainConfig};

