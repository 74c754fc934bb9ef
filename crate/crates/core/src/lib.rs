//! Dataset-average histogram matching for RGB image collections.
//!
//! The crate covers the whole data-preparation loop around histogram
//! matching:
//!
//! * [`hist`]: per-channel histograms, CDFs and matching lookup tables.
//! * [`reference`]: the dataset-mean reference profile and its file format.
//! * [`pipeline`]: batch normalization (match to profile, optional resize).
//! * [`augment`]: seeded stochastic matching against a random pool image.
//! * [`dataset`]: labeled manifests and stratified k-fold splits.
//! * [`metrics`]: confusion matrices, per-class recall, balanced accuracy.
//! * [`cli`]: the `histmatch` command-line front end.

pub mod augment;
pub mod cli;
pub mod dataset;
pub mod hist;
pub mod imageio;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod rng;
mod sum;
mod workers;

pub use hist::{
    Cdf, ChannelHistogram, HistError, ImageBuffer, MatchingLut, NormalizedHistogram, DEFAULT_BINS,
};
pub use reference::ReferenceProfile;
pub use workers::default_workers;
