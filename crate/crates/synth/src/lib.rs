//! Deterministic synthetic datasets.
//!
//! - [`noise`]: three-task toy where the third task's tokens are pure noise.
//! - [`clevr`]: Sort-of-CLEVR style scenes and questions, optionally with a
//!   power-law imbalance over the queried color.
//! - [`dump`]: binary split files plus a JSON manifest.

pub mod clevr;
pub mod dump;
pub mod error;
pub mod noise;
pub mod rng;

pub use clevr::{gen_sort_of_clevr, ClevrOptions, ImbalanceSpec, SortOfClevrSample};
pub use error::{Error, Result};
pub use noise::{gen_noise_toy, NoiseToy, NoiseToyBatch};
