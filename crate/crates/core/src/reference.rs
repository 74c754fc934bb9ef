//! The dataset-average reference profile.
//!
//! A profile stores, per RGB channel, the unweighted mean of every image's
//! normalized histogram. Each image counts once regardless of its pixel count.
//! Per-image histograms may be computed in parallel, but the mean is always
//! reduced serially in input order with compensated summation, so the result
//! is bit-identical for any worker count.
//!
//! On disk a profile is a JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "bins": 256,
//!   "image_count": 1469,
//!   "channels": { "r": [..], "g": [..], "b": [..] }
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed back exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hist::{
    compute_histogram, cumulative, normalize_histogram, Cdf, Channel, HistError, ImageBuffer,
    NormalizedHistogram,
};
use crate::imageio::{self, ImageIoError};
use crate::sum::CompensatedSum;
use crate::workers::par_map;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("cannot build a reference from an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Decode(#[from] ImageIoError),
    #[error("image {index}: {source}")]
    Image { index: usize, source: HistError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("unsupported profile format_version {found} (expected {expected})")]
    VersionMismatch { found: i64, expected: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceProfile {
    bins: usize,
    channel_hists: [NormalizedHistogram; 3],
    image_count: usize,
    format_version: u32,
}

impl ReferenceProfile {
    pub fn new(
        channel_hists: [NormalizedHistogram; 3],
        image_count: usize,
    ) -> Result<Self, ReferenceError> {
        let bins = channel_hists[0].bins();
        for c in Channel::ALL {
            let n = channel_hists[c.index()].bins();
            if n != bins {
                return Err(ReferenceError::Field {
                    field: format!("channels.{c}"),
                    message: format!("{n} bins, expected {bins}"),
                });
            }
        }
        if image_count == 0 {
            return Err(ReferenceError::Field {
                field: "image_count".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(Self {
            bins,
            channel_hists,
            image_count,
            format_version: FORMAT_VERSION,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn image_count(&self) -> usize {
        self.image_count
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn channel(&self, c: Channel) -> &NormalizedHistogram {
        &self.channel_hists[c.index()]
    }

    pub fn channel_hists(&self) -> &[NormalizedHistogram; 3] {
        &self.channel_hists
    }

    /// Matching targets, recomputed from the stored histograms.
    pub fn cdfs(&self) -> [Cdf; 3] {
        self.channel_hists.each_ref().map(cumulative)
    }
}

/// Per-channel normalized histograms of one image.
pub fn image_normalized_histograms(
    img: &ImageBuffer,
) -> Result<[NormalizedHistogram; 3], HistError> {
    let [r, g, b] = img.planes();
    let norm = |p: &[u8]| normalize_histogram(&compute_histogram(p, img.bins())?);
    Ok([norm(r)?, norm(g)?, norm(b)?])
}

fn mean_profile(
    per_image: &[[NormalizedHistogram; 3]],
) -> Result<ReferenceProfile, ReferenceError> {
    let first = per_image.first().ok_or(ReferenceError::EmptyDataset)?;
    let bins = first[0].bins();
    let n = per_image.len() as f64;
    let mut channels: [Vec<f64>; 3] = Default::default();
    for c in Channel::ALL {
        let mut acc = vec![CompensatedSum::new(); bins];
        for (index, hists) in per_image.iter().enumerate() {
            let h = &hists[c.index()];
            if h.bins() != bins {
                return Err(ReferenceError::Image {
                    index,
                    source: HistError::BinMismatch {
                        left: bins,
                        right: h.bins(),
                    },
                });
            }
            for (a, p) in acc.iter_mut().zip(h.probs()) {
                a.add(*p);
            }
        }
        channels[c.index()] = acc.iter().map(|a| a.value() / n).collect();
    }
    let [r, g, b] = channels;
    let wrap = |c: Channel, v: Vec<f64>| {
        NormalizedHistogram::new(v).map_err(|e| ReferenceError::Field {
            field: format!("channels.{c}"),
            message: e.to_string(),
        })
    };
    ReferenceProfile::new(
        [
            wrap(Channel::R, r)?,
            wrap(Channel::G, g)?,
            wrap(Channel::B, b)?,
        ],
        per_image.len(),
    )
}

/// Builds the profile from in-memory images.
pub fn build_reference(
    images: &[ImageBuffer],
    workers: usize,
) -> Result<ReferenceProfile, ReferenceError> {
    if images.is_empty() {
        return Err(ReferenceError::EmptyDataset);
    }
    let per_image = par_map(workers, images, |_, img| image_normalized_histograms(img))
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|source| ReferenceError::Image { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    mean_profile(&per_image)
}

/// Builds the profile from image files, decoding them on the worker pool.
///
/// When several files fail, the error names the first one in input order.
pub fn build_reference_from_paths<P: AsRef<Path> + Sync>(
    paths: &[P],
    workers: usize,
) -> Result<ReferenceProfile, ReferenceError> {
    if paths.is_empty() {
        return Err(ReferenceError::EmptyDataset);
    }
    let per_image = par_map(workers, paths, |index, p| {
        let img = imageio::load_image(p.as_ref())?;
        image_normalized_histograms(&img).map_err(|source| ReferenceError::Image { index, source })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    mean_profile(&per_image)
}

#[derive(Serialize, Deserialize)]
struct ProfileDocument {
    format_version: u32,
    bins: usize,
    image_count: usize,
    channels: ChannelsDocument,
}

#[derive(Serialize, Deserialize)]
struct ChannelsDocument {
    r: Vec<f64>,
    g: Vec<f64>,
    b: Vec<f64>,
}

pub fn profile_to_string(profile: &ReferenceProfile) -> String {
    let [r, g, b] = profile.channel_hists.each_ref().map(|h| h.probs().to_vec());
    let doc = ProfileDocument {
        format_version: profile.format_version,
        bins: profile.bins,
        image_count: profile.image_count,
        channels: ChannelsDocument { r, g, b },
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("profile document serializes");
    text.push('\n');
    text
}

fn parse_error(e: serde_json::Error) -> ReferenceError {
    ReferenceError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

pub fn profile_from_str(text: &str) -> Result<ReferenceProfile, ReferenceError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
    let version = value
        .get("format_version")
        .ok_or_else(|| ReferenceError::Field {
            field: "format_version".into(),
            message: "missing".into(),
        })?;
    match version.as_i64() {
        Some(v) if v == i64::from(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(ReferenceError::VersionMismatch {
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => {
            return Err(ReferenceError::Field {
                field: "format_version".into(),
                message: format!("expected an integer, found {version}"),
            })
        }
    }
    let doc: ProfileDocument =
        serde_json::from_value(value).map_err(|e| ReferenceError::Field {
            field: "<document>".into(),
            message: e.to_string(),
        })?;
    let ProfileDocument {
        bins,
        image_count,
        channels,
        ..
    } = doc;
    let ChannelsDocument { r, g, b } = channels;
    let mut hists = Vec::with_capacity(3);
    for (c, probs) in Channel::ALL.into_iter().zip([r, g, b]) {
        let field = format!("channels.{c}");
        if probs.len() != bins {
            return Err(ReferenceError::Field {
                field,
                message: format!("{} entries, expected {bins}", probs.len()),
            });
        }
        let h = NormalizedHistogram::new(probs).map_err(|e| ReferenceError::Field {
            field,
            message: e.to_string(),
        })?;
        hists.push(h);
    }
    let hists: [NormalizedHistogram; 3] = hists.try_into().expect("three channels");
    ReferenceProfile::new(hists, image_count)
}

pub fn save_reference(profile: &ReferenceProfile, path: &Path) -> Result<(), ReferenceError> {
    let io = |source| ReferenceError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, profile_to_string(profile)).map_err(io)
}

pub fn load_reference(path: &Path) -> Result<ReferenceProfile, ReferenceError> {
    let text = fs::read_to_string(path).map_err(|source| ReferenceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    profile_from_str(&text)
}
