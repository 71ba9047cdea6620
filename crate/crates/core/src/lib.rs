//! Multimodal place recognition at desk scale.
//!
//! The crate builds global place descriptors from paired camera images and
//! LiDAR-style point clouds: small per-point / per-patch MLP backbones feed an
//! attention-weighted VLAD aggregation layer per modality, the two branch
//! descriptors pass through learned channel gates and are fused into a single
//! unit-norm vector used as the retrieval key. Training uses a lazy quadruplet
//! loss over tuples mined by geographic radius; every differentiable stage is
//! certified against central finite differences.
//!
//! Modules follow the pipeline order:
//!
//! - [`scene`] — scene data model, timestamp pairing, downsampling,
//!   normalization, trajectory splitting and on-disk persistence.
//! - [`backbone`] — per-point and per-patch MLP feature extractors.
//! - [`vlad`] — soft assignment, spatial attention and (attention-weighted)
//!   VLAD aggregation.
//! - [`fusion`] — channel gates, branch fusion and the end-to-end descriptor
//!   pipeline with its configuration matrix.
//! - [`train`] — tuple mining, the lazy quadruplet loss, Adam and the
//!   finite-difference gradient oracle.
//! - [`retrieval`] — descriptor databases, exact top-k search and the recall
//!   evaluation protocol.
//! - [`world`] — synthetic world generation with day/night corruption and the
//!   histogram-matching domain transform.
//! - [`experiment`] — reproducible command implementations backing the CLI.

pub mod backbone;
pub mod certify;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod linalg;
pub mod retrieval;
pub mod rng;
pub mod scene;
pub mod train;
pub mod vlad;
pub mod world;

pub use error::{Error, Result};
