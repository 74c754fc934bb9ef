//! Histogram, CDF and lookup-table math for per-channel histogram matching.
//!
//! Intensities are `u8` values in `[0, bins)` with `1 <= bins <= 256`. The
//! default is 256 bins (8-bit imagery); smaller bin counts exist so the
//! matching rule can be exercised on hand-sized examples.
//!
//! The matching rule maps a source level `s` to the smallest reference level
//! `r` whose cumulative probability reaches the source's:
//!
//! ```text
//! map[s] = min { r : ref_cdf[r] >= src_cdf[s] - 1e-12 }
//! ```
//!
//! Because `src_cdf` is non-decreasing the search threshold only ever grows,
//! so the table is built with a single forward scan.

use std::fmt;
use std::io::{self, Write};

use thiserror::Error;

use crate::sum::CompensatedSum;

/// Bin count for 8-bit imagery.
pub const DEFAULT_BINS: usize = 256;

/// Largest supported bin count.
pub const MAX_BINS: usize = 256;

/// Slack subtracted from the source CDF before searching the reference CDF.
pub const MATCH_SLACK: f64 = 1e-12;

/// Tolerance on "sums to one" for normalized histograms and CDF endpoints.
pub const UNIT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistError {
    #[error("empty input")]
    EmptyInput,
    #[error("intensity {value} out of range for {bins} bins")]
    OutOfRange { value: u8, bins: usize },
    #[error("histogram total is zero")]
    ZeroTotal,
    #[error("bin count mismatch: {left} vs {right}")]
    BinMismatch { left: usize, right: usize },
    #[error("bin count {0} outside 1..=256")]
    InvalidBins(usize),
    #[error("invalid normalized histogram: {0}")]
    InvalidHistogram(String),
    #[error("invalid cdf: {0}")]
    InvalidCdf(String),
    #[error("invalid lookup table: {0}")]
    InvalidLut(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

pub type Result<T> = std::result::Result<T, HistError>;

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 || bins > MAX_BINS {
        return Err(HistError::InvalidBins(bins));
    }
    Ok(())
}

/// One of the three color planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    R,
    G,
    B,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::R => "r",
            Channel::G => "g",
            Channel::B => "b",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "r" | "R" => Ok(Channel::R),
            "g" | "G" => Ok(Channel::G),
            "b" | "B" => Ok(Channel::B),
            other => Err(format!("unknown channel `{other}` (expected r, g or b)")),
        }
    }
}

/// Raw per-level pixel counts of one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelHistogram {
    counts: Vec<u64>,
    total: u64,
}

impl ChannelHistogram {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        check_bins(counts.len())?;
        let total = counts.iter().sum();
        Ok(Self { counts, total })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Per-level probabilities of one channel; non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHistogram {
    probs: Vec<f64>,
}

impl NormalizedHistogram {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_bins(probs.len())?;
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(HistError::InvalidHistogram(format!(
                "bin {i} has probability {p} outside [0, 1]"
            )));
        }
        let sum = crate::sum::compensated_sum(probs.iter().copied());
        if (sum - 1.0).abs() > UNIT_TOLERANCE {
            return Err(HistError::InvalidHistogram(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        write_bin_csv(out, &self.probs)
    }
}

/// Cumulative distribution of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdf {
    values: Vec<f64>,
}

impl Cdf {
    /// Validates and wraps a cumulative vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_bins(values.len())?;
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < 0.0 || *v > 1.0 + UNIT_TOLERANCE {
                return Err(HistError::InvalidCdf(format!(
                    "value {v} at bin {i} outside [0, 1]"
                )));
            }
        }
        if let Some(i) = values.windows(2).position(|w| w[0] > w[1]) {
            return Err(HistError::InvalidCdf(format!(
                "decreases between bins {i} and {}",
                i + 1
            )));
        }
        let last = values[values.len() - 1];
        if (last - 1.0).abs() > UNIT_TOLERANCE {
            return Err(HistError::InvalidCdf(format!("ends at {last}, expected 1")));
        }
        Ok(Self { values })
    }

    /// CDF of a pixel plane: count, normalize, accumulate.
    pub fn of_plane(pixels: &[u8], bins: usize) -> Result<Self> {
        Ok(cumulative(&normalize_histogram(&compute_histogram(
            pixels, bins,
        )?)?))
    }

    pub fn bins(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] < w[1])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        write_bin_csv(out, &self.values)
    }
}

/// Monotone intensity-to-intensity map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchingLut {
    map: Vec<u8>,
}

impl MatchingLut {
    pub fn new(map: Vec<u8>) -> Result<Self> {
        check_bins(map.len())?;
        let bins = map.len();
        if let Some(v) = map.iter().find(|v| usize::from(**v) >= bins) {
            return Err(HistError::InvalidLut(format!(
                "entry {v} out of range for {bins} bins"
            )));
        }
        if let Some(i) = map.windows(2).position(|w| w[0] > w[1]) {
            return Err(HistError::InvalidLut(format!(
                "decreases between levels {i} and {}",
                i + 1
            )));
        }
        Ok(Self { map })
    }

    pub fn identity(bins: usize) -> Result<Self> {
        check_bins(bins)?;
        Ok(Self {
            map: (0..bins).map(|v| v as u8).collect(),
        })
    }

    pub fn bins(&self) -> usize {
        self.map.len()
    }

    pub fn map(&self) -> &[u8] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map
            .iter()
            .enumerate()
            .all(|(i, v)| usize::from(*v) == i)
    }
}

/// Planar RGB image with intensities in `[0, bins)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    bins: usize,
    planes: [Vec<u8>; 3],
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, bins: usize, planes: [Vec<u8>; 3]) -> Result<Self> {
        check_bins(bins)?;
        if width == 0 || height == 0 {
            return Err(HistError::InvalidImage(format!(
                "zero dimension {width}x{height}"
            )));
        }
        let len = width as usize * height as usize;
        for (c, plane) in Channel::ALL.iter().zip(&planes) {
            if plane.len() != len {
                return Err(HistError::InvalidImage(format!(
                    "plane {c} has {} pixels, expected {len}",
                    plane.len()
                )));
            }
            if let Some(v) = plane.iter().find(|v| usize::from(**v) >= bins) {
                return Err(HistError::OutOfRange { value: *v, bins });
            }
        }
        Ok(Self {
            width,
            height,
            bins,
            planes,
        })
    }

    /// Builds an 8-bit image from interleaved RGB bytes.
    pub fn from_interleaved(width: u32, height: u32, rgb: &[u8]) -> Result<Self> {
        let len = width as usize * height as usize;
        if rgb.len() != len * 3 {
            return Err(HistError::InvalidImage(format!(
                "{} bytes for a {width}x{height} RGB image",
                rgb.len()
            )));
        }
        let mut planes = [
            Vec::with_capacity(len),
            Vec::with_capacity(len),
            Vec::with_capacity(len),
        ];
        for px in rgb.chunks_exact(3) {
            for (plane, v) in planes.iter_mut().zip(px) {
                plane.push(*v);
            }
        }
        Self::new(width, height, DEFAULT_BINS, planes)
    }

    pub fn to_interleaved(&self) -> Vec<u8> {
        let [r, g, b] = &self.planes;
        r.iter()
            .zip(g)
            .zip(b)
            .flat_map(|((r, g), b)| [*r, *g, *b])
            .collect()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn plane(&self, channel: Channel) -> &[u8] {
        &self.planes[channel.index()]
    }

    pub fn planes(&self) -> &[Vec<u8>; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [Vec<u8>; 3] {
        self.planes
    }

    pub fn channel_histograms(&self) -> Result<[ChannelHistogram; 3]> {
        let [r, g, b] = &self.planes;
        Ok([
            compute_histogram(r, self.bins)?,
            compute_histogram(g, self.bins)?,
            compute_histogram(b, self.bins)?,
        ])
    }

    pub fn channel_cdfs(&self) -> Result<[Cdf; 3]> {
        let [r, g, b] = &self.planes;
        Ok([
            Cdf::of_plane(r, self.bins)?,
            Cdf::of_plane(g, self.bins)?,
            Cdf::of_plane(b, self.bins)?,
        ])
    }
}

/// Counts occurrences of every level in `pixels`.
pub fn compute_histogram(pixels: &[u8], bins: usize) -> Result<ChannelHistogram> {
    check_bins(bins)?;
    if pixels.is_empty() {
        return Err(HistError::EmptyInput);
    }
    let mut counts = vec![0u64; bins];
    for &p in pixels {
        match counts.get_mut(usize::from(p)) {
            Some(c) => *c += 1,
            None => return Err(HistError::OutOfRange { value: p, bins }),
        }
    }
    Ok(ChannelHistogram {
        counts,
        total: pixels.len() as u64,
    })
}

pub fn normalize_histogram(h: &ChannelHistogram) -> Result<NormalizedHistogram> {
    if h.total == 0 {
        return Err(HistError::ZeroTotal);
    }
    let total = h.total as f64;
    Ok(NormalizedHistogram {
        probs: h.counts.iter().map(|&c| c as f64 / total).collect(),
    })
}

/// Running sum of a normalized histogram.
///
/// Uses compensated summation. Every bin at or past the last non-empty bin is
/// exactly 1, and no value exceeds 1.
pub fn cumulative(h: &NormalizedHistogram) -> Cdf {
    let probs = &h.probs;
    let last_mass = probs
        .iter()
        .rposition(|p| *p > 0.0)
        .unwrap_or(probs.len() - 1);
    let mut acc = CompensatedSum::new();
    let mut prev = 0.0f64;
    let values = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if i >= last_mass {
                return 1.0;
            }
            acc.add(p);
            prev = acc.value().clamp(prev, 1.0);
            prev
        })
        .collect();
    Cdf { values }
}

/// Builds the lookup table that carries `src` onto `reference`.
pub fn build_matching_lut(src: &Cdf, reference: &Cdf) -> Result<MatchingLut> {
    let bins = src.bins();
    if reference.bins() != bins {
        return Err(HistError::BinMismatch {
            left: bins,
            right: reference.bins(),
        });
    }
    let mut map = Vec::with_capacity(bins);
    let mut r = 0usize;
    for &target in &src.values {
        let threshold = target - MATCH_SLACK;
        while r < bins && reference.values[r] < threshold {
            r += 1;
        }
        map.push(r.min(bins - 1) as u8);
    }
    Ok(MatchingLut { map })
}

pub fn apply_lut(plane: &[u8], lut: &MatchingLut) -> Result<Vec<u8>> {
    plane
        .iter()
        .map(|&p| {
            lut.map
                .get(usize::from(p))
                .copied()
                .ok_or(HistError::OutOfRange {
                    value: p,
                    bins: lut.bins(),
                })
        })
        .collect()
}

/// Matches every channel of `img` to the corresponding target CDF.
pub fn match_image(img: &ImageBuffer, target: &[Cdf; 3]) -> Result<ImageBuffer> {
    let mut planes: [Vec<u8>; 3] = Default::default();
    for (c, out) in Channel::ALL.iter().zip(planes.iter_mut()) {
        let reference = &target[c.index()];
        if reference.bins() != img.bins {
            return Err(HistError::BinMismatch {
                left: img.bins,
                right: reference.bins(),
            });
        }
        let plane = img.plane(*c);
        let lut = build_matching_lut(&Cdf::of_plane(plane, img.bins)?, reference)?;
        *out = apply_lut(plane, &lut)?;
    }
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        bins: img.bins,
        planes,
    })
}

/// Writes `bin,value` rows under a single header line.
pub fn write_bin_csv<W: Write>(mut out: W, values: &[f64]) -> io::Result<()> {
    writeln!(out, "bin,value")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v}")?;
    }
    Ok(())
}
