//! Batch normalization of a manifest against a reference profile.
//!
//! Each image is decoded, matched to the profile's per-channel CDFs at native
//! resolution, optionally resized to a square, and written as PNG under the
//! output directory at its manifest-relative path. Failures are collected per
//! image; only an uncreatable output directory aborts the run.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::hist::{match_image, Cdf, Channel, HistError, ImageBuffer};
use crate::imageio::{self, ImageIoError};
use crate::reference::ReferenceProfile;
use crate::workers::par_map;

/// Smallest accepted resize target.
pub const MIN_RESIZE: u32 = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot create output directory {path}: {source}")]
    FatalIo {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Why a single image was not produced.
#[derive(Debug, Error)]
pub enum ItemError {
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("{0}")]
    Hist(#[from] HistError),
    #[error("output {0} already exists (pass overwrite to replace it)")]
    Exists(PathBuf),
    #[error("output {0} collides with an earlier manifest entry")]
    Collision(PathBuf),
    #[error("cannot load pool reference {path}: {message}")]
    PoolLoad { path: PathBuf, message: String },
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub reference: ReferenceProfile,
    pub resize: Option<u32>,
    pub output_dir: PathBuf,
    pub overwrite: bool,
    pub workers: usize,
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if let Some(side) = self.resize {
            if side < MIN_RESIZE {
                return Err(PipelineError::InvalidConfig(format!(
                    "resize {side} is below the minimum of {MIN_RESIZE}"
                )));
            }
        }
        if self.workers == 0 {
            return Err(PipelineError::InvalidConfig(
                "workers must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessReport {
    /// Entries handled successfully (written or deliberately skipped).
    pub processed: usize,
    /// Files written to the output directory.
    pub written: usize,
    /// Entries that went through histogram matching.
    pub triggered: usize,
    /// `(manifest path, error)` in manifest order.
    pub failed: Vec<(String, String)>,
    /// Wall-clock seconds.
    pub wall_time: f64,
}

pub(crate) enum ItemOutcome {
    Written { matched: bool },
    Skipped,
}

/// Path of `entry_path` under `output_dir`, without root, `.` or `..` parts.
pub fn mirrored_path(output_dir: &Path, entry_path: &str) -> PathBuf {
    let mut out = output_dir.to_path_buf();
    for c in Path::new(entry_path).components() {
        if let Component::Normal(part) = c {
            out.push(part);
        }
    }
    out
}

/// [`mirrored_path`] with the extension replaced by `png`.
pub fn png_output_path(output_dir: &Path, entry_path: &str) -> PathBuf {
    mirrored_path(output_dir, entry_path).with_extension("png")
}

pub(crate) fn create_output_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| PipelineError::FatalIo {
        path: dir.to_path_buf(),
        source,
    })
}

/// Marks entries whose output path repeats an earlier entry's.
pub(crate) fn collisions(paths: &[PathBuf]) -> Vec<bool> {
    let mut seen = HashSet::new();
    paths.iter().map(|p| !seen.insert(p.clone())).collect()
}

pub(crate) fn write_output(path: &Path, bytes: &[u8], overwrite: bool) -> Result<(), ItemError> {
    if !overwrite && path.exists() {
        return Err(ItemError::Exists(path.to_path_buf()));
    }
    imageio::write_file(path, bytes)?;
    Ok(())
}

pub(crate) fn assemble_report(
    manifest: &DatasetManifest,
    results: Vec<Result<ItemOutcome, ItemError>>,
    started: Instant,
) -> PreprocessReport {
    let mut report = PreprocessReport::default();
    for (entry, result) in manifest.entries().iter().zip(results) {
        match result {
            Ok(ItemOutcome::Written { matched }) => {
                report.processed += 1;
                report.written += 1;
                report.triggered += usize::from(matched);
            }
            Ok(ItemOutcome::Skipped) => report.processed += 1,
            Err(e) => {
                log::warn!("{}: {e}", entry.path);
                report.failed.push((entry.path.clone(), e.to_string()));
            }
        }
    }
    report.wall_time = started.elapsed().as_secs_f64();
    report
}

/// Bilinear resize to `side x side` (aspect ratio is not preserved).
///
/// Sample positions are pixel-center aligned, so resizing to the current size
/// is the identity. Results are rounded half-to-even and clamped to the
/// image's intensity range.
pub fn resize_image(img: &ImageBuffer, side: u32) -> ImageBuffer {
    let (w, h) = (img.width(), img.height());
    if w == side && h == side {
        return img.clone();
    }
    let xs = sample_axis(w, side);
    let ys = sample_axis(h, side);
    let max = (img.bins() - 1) as f64;
    let planes = Channel::ALL.map(|c| {
        let src = img.plane(c);
        let mut out = Vec::with_capacity(side as usize * side as usize);
        for &(y0, y1, fy) in &ys {
            let row0 = &src[y0 * w as usize..][..w as usize];
            let row1 = &src[y1 * w as usize..][..w as usize];
            for &(x0, x1, fx) in &xs {
                let top = f64::from(row0[x0]) * (1.0 - fx) + f64::from(row0[x1]) * fx;
                let bottom = f64::from(row1[x0]) * (1.0 - fx) + f64::from(row1[x1]) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round_ties_even().clamp(0.0, max) as u8);
            }
        }
        out
    });
    ImageBuffer::new(side, side, img.bins(), planes).expect("resized planes stay in range")
}

/// `(lower index, upper index, upper weight)` for each output coordinate.
fn sample_axis(src_len: u32, dst_len: u32) -> Vec<(usize, usize, f64)> {
    let scale = f64::from(src_len) / f64::from(dst_len);
    let last = f64::from(src_len - 1);
    (0..dst_len)
        .map(|i| {
            let pos = ((f64::from(i) + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = pos.floor();
            let lo_idx = lo as usize;
            let hi_idx = (lo_idx + 1).min(src_len as usize - 1);
            (lo_idx, hi_idx, pos - lo)
        })
        .collect()
}

fn preprocess_one(
    manifest: &DatasetManifest,
    index: usize,
    cfg: &PreprocessConfig,
    target: &[Cdf; 3],
    out_path: &Path,
) -> Result<ItemOutcome, ItemError> {
    let entry = &manifest.entries()[index];
    let img = imageio::load_image(&manifest.resolve(entry))?;
    let matched = match_image(&img, target)?;
    let finished = match cfg.resize {
        Some(side) => resize_image(&matched, side),
        None => matched,
    };
    write_output(out_path, &imageio::encode_png(&finished)?, cfg.overwrite)?;
    Ok(ItemOutcome::Written { matched: true })
}

/// Matches every manifest image to `cfg.reference` and writes the results.
pub fn preprocess_dataset(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
) -> Result<PreprocessReport, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    create_output_dir(&cfg.output_dir)?;
    let target = cfg.reference.cdfs();
    let out_paths: Vec<PathBuf> = manifest
        .entries()
        .iter()
        .map(|e| png_output_path(&cfg.output_dir, &e.path))
        .collect();
    let collided = collisions(&out_paths);
    let indices: Vec<usize> = (0..manifest.len()).collect();
    let results = par_map(cfg.workers, &indices, |_, &i| {
        if collided[i] {
            return Err(ItemError::Collision(out_paths[i].clone()));
        }
        preprocess_one(manifest, i, cfg, &target, &out_paths[i])
    });
    let report = assemble_report(manifest, results, started);
    log::info!(
        "preprocessed {} of {} images ({} failed) in {:.2}s",
        report.processed,
        manifest.len(),
        report.failed.len(),
        report.wall_time
    );
    Ok(report)
}
