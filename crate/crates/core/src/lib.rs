//! Transfer learning toolkit for heterogeneous (NIR-VIS) face recognition.
//!
//! The crate covers the whole pipeline at desk scale: dataset manifests and
//! joint identity spaces ([`datamodel`]), landmark alignment ([`preprocess`]),
//! red-channel augmentation ([`augment`]), a small convolutional backbone with
//! checkpointing ([`embedder`]), margin losses and classifier initialization
//! ([`heads`]), the two training phases ([`trainer`]), verification and
//! identification metrics ([`eval`]) and a synthetic paired-modality dataset
//! generator ([`synthgen`]).

pub mod augment;
pub mod datamodel;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod preprocess;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
