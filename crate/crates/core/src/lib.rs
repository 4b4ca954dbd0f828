//! Manifold-regularized slow feature analysis for dynamic texture recognition.
//!
//! The pipeline learns 3D convolution filters from video cubes, turns their
//! 2D slices into appearance and variation feature maps, pools local
//! descriptors, encodes them with Fisher vectors and classifies videos with a
//! one-against-all linear SVM.

mod binio;
pub mod classifier;
pub mod config;
pub mod cube_sampling;
pub mod error;
pub mod feature_maps;
pub mod filter_bank;
pub mod fisher;
pub mod linalg;
pub mod local_features;
pub mod mrsfa;
pub mod pipeline;
pub mod synth;
pub mod video_io;

pub use error::{Error, Result};

/// Seed for one stage of the pipeline, mixed from the master seed, a stage
/// name and an index (SplitMix64 finalizer over an FNV-1a hash of the name).
pub fn derive_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut z = master
        ^ binio::fnv1a(stage.as_bytes()).rotate_left(17)
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
