//! Few-shot scene classification by scene-graph matching.
//!
//! The pipeline turns a 64x64 RGB image into a 4x4 grid of convolutional
//! features, builds a fully connected scene graph over the 16 grid cells
//! (node embeddings from local features, edge embeddings from feature pairs
//! plus position one-hots), and scores a query against a class prototype by
//! propagating information inside each graph, attending across the two
//! graphs, and comparing the aggregated graph representations.
//!
//! Modules, bottom up:
//!
//! * [`tensor`] - dense f32 tensors, a reverse-mode tape, optimizers and the
//!   checkpoint container format.
//! * [`image_io`] - binary PPM/PGM reading and writing.
//! * [`synthscene`] - procedural scene generator producing the datasets the
//!   rest of the crate trains on.
//! * [`backbone`] - the five-block convolutional feature extractor and its
//!   rotation-regularized pre-training loop.
//! * [`scene_graph`] - graph construction from frozen spatial features.
//! * [`graph_matching`] - cross-graph matching, scoring and the matching
//!   weight export used for inspection.
//! * [`episodic`] - episode sampling, meta-training, evaluation and the
//!   pooled-feature distance baselines.

pub mod backbone;
pub mod episodic;
pub mod error;
pub mod gradcheck;
pub mod graph_matching;
pub mod image_io;
pub mod scene_graph;
pub mod synthscene;
pub mod tensor;

pub use error::{Error, Result};
