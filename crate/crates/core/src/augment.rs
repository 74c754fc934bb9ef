//! Stochastic histogram-matching augmentation.
//!
//! Every image gets its own random stream derived from `(seed, image id)`.
//! The first draw decides whether the image is augmented (`u < probability`);
//! if so, a second draw picks a pool member uniformly and the image is matched
//! channel-by-channel to that member's CDFs. Untriggered images pass through
//! untouched.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::dataset::DatasetManifest;
use crate::hist::{match_image, Cdf, HistError, ImageBuffer};
use crate::imageio;
use crate::pipeline::{
    assemble_report, collisions, create_output_dir, mirrored_path, png_output_path, write_output,
    ItemError, ItemOutcome, PipelineError, PreprocessReport,
};
use crate::rng::{derive_stream, RandomStream};
use crate::workers::par_map;

pub const DEFAULT_PROBABILITY: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("cannot load pool reference {path}: {message}")]
    PoolLoad { path: PathBuf, message: String },
    #[error(transparent)]
    Hist(#[from] HistError),
}

/// Reference images to match against. Members are decoded on demand unless
/// the pool was built with [`ReferencePool::cached`] or from in-memory images.
#[derive(Debug, Clone)]
pub struct ReferencePool {
    paths: Vec<PathBuf>,
    cache: Option<Vec<[Cdf; 3]>>,
}

impl ReferencePool {
    pub fn from_paths(paths: Vec<PathBuf>) -> Self {
        Self { paths, cache: None }
    }

    pub fn from_images(images: &[ImageBuffer]) -> Result<Self, AugmentError> {
        let cdfs = images
            .iter()
            .map(ImageBuffer::channel_cdfs)
            .collect::<Result<Vec<_>, _>>()?;
        let paths = (0..images.len())
            .map(|i| PathBuf::from(format!("<memory:{i}>")))
            .collect();
        Ok(Self {
            paths,
            cache: Some(cdfs),
        })
    }

    /// Decodes every member up front.
    pub fn cached(self, workers: usize) -> Result<Self, AugmentError> {
        if self.cache.is_some() {
            return Ok(self);
        }
        let cdfs = par_map(workers, &self.paths, |_, p| load_cdfs(p))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            paths: self.paths,
            cache: Some(cdfs),
        })
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn member_cdfs(&self, index: usize) -> Result<[Cdf; 3], AugmentError> {
        match &self.cache {
            Some(cdfs) => Ok(cdfs[index].clone()),
            None => load_cdfs(&self.paths[index]),
        }
    }
}

fn load_cdfs(path: &Path) -> Result<[Cdf; 3], AugmentError> {
    let pool_err = |message: String| AugmentError::PoolLoad {
        path: path.to_path_buf(),
        message,
    };
    let img = imageio::load_image(path).map_err(|e| pool_err(e.to_string()))?;
    img.channel_cdfs().map_err(|e| pool_err(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub probability: f64,
    pub seed: u64,
    pub pool: ReferencePool,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::InvalidConfig(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.probability > 0.0 && self.pool.is_empty() {
            return Err(AugmentError::InvalidConfig(
                "reference pool is empty but probability is positive".into(),
            ));
        }
        Ok(())
    }
}

/// Stream for one manifest entry, namespaced away from other seeded uses.
pub fn image_stream(seed: u64, image_id: &str) -> RandomStream {
    derive_stream(seed, &format!("augment:{image_id}"))
}

/// Gate draw plus, when it fires, the pool draw. Returns the chosen member.
pub fn draw_pool_choice(
    probability: f64,
    pool_len: usize,
    stream: &mut RandomStream,
) -> Option<usize> {
    let u = stream.next_unit();
    if u >= probability {
        return None;
    }
    Some(stream.next_index(pool_len))
}

/// Result of augmenting one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Augmented {
    pub image: ImageBuffer,
    /// Pool member the image was matched to, if the gate fired.
    pub pool_index: Option<usize>,
}

pub fn hm_augment(
    img: &ImageBuffer,
    cfg: &AugmentConfig,
    stream: &mut RandomStream,
) -> Result<Augmented, AugmentError> {
    match draw_pool_choice(cfg.probability, cfg.pool.len(), stream) {
        None => Ok(Augmented {
            image: img.clone(),
            pool_index: None,
        }),
        Some(i) => {
            let target = cfg.pool.member_cdfs(i)?;
            Ok(Augmented {
                image: match_image(img, &target)?,
                pool_index: Some(i),
            })
        }
    }
}

/// What to do with images the gate leaves alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmitUntriggered {
    /// Copy the original file bytes to the mirrored path.
    #[default]
    Copy,
    /// Write nothing.
    Skip,
}

impl FromStr for EmitUntriggered {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "copy" => Ok(Self::Copy),
            "skip" => Ok(Self::Skip),
            other => Err(format!("expected copy or skip, found `{other}`")),
        }
    }
}

impl fmt::Display for EmitUntriggered {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Skip => "skip",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AugmentRun {
    pub output_dir: PathBuf,
    pub overwrite: bool,
    pub workers: usize,
    pub emit_untriggered: EmitUntriggered,
}

/// Per-entry pool choices of a batch run, in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentLog {
    pub choices: Vec<(String, Option<usize>)>,
}

impl AugmentLog {
    /// CSV with header `path,triggered,pool_index,pool_path`; `pool_names`
    /// labels the pool members, usually their pool manifest paths.
    pub fn write_csv<W: std::io::Write, S: AsRef<str>>(
        &self,
        out: W,
        pool_names: &[S],
    ) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "triggered", "pool_index", "pool_path"])?;
        for (path, choice) in &self.choices {
            match choice {
                Some(i) => w.write_record([
                    path.as_str(),
                    "true",
                    &i.to_string(),
                    pool_names[*i].as_ref(),
                ])?,
                None => w.write_record([path.as_str(), "false", "", ""])?,
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn augment_one(
    manifest: &DatasetManifest,
    index: usize,
    cfg: &AugmentConfig,
    run: &AugmentRun,
    choice: Option<usize>,
) -> Result<ItemOutcome, ItemError> {
    let entry = &manifest.entries()[index];
    let src = manifest.resolve(entry);
    let bytes = fs::read(&src).map_err(|source| {
        ItemError::Image(imageio::ImageIoError::Read {
            path: src.clone(),
            source,
        })
    })?;
    let img = imageio::decode_bytes(&bytes, &src)?;
    match choice {
        None => match run.emit_untriggered {
            EmitUntriggered::Skip => Ok(ItemOutcome::Skipped),
            EmitUntriggered::Copy => {
                write_output(
                    &mirrored_path(&run.output_dir, &entry.path),
                    &bytes,
                    run.overwrite,
                )?;
                Ok(ItemOutcome::Written { matched: false })
            }
        },
        Some(i) => {
            let target = cfg.pool.member_cdfs(i).map_err(|e| match e {
                AugmentError::PoolLoad { path, message } => ItemError::PoolLoad { path, message },
                other => ItemError::PoolLoad {
                    path: cfg.pool.paths()[i].clone(),
                    message: other.to_string(),
                },
            })?;
            let out = match_image(&img, &target)?;
            let path = png_output_path(&run.output_dir, &entry.path);
            write_output(&path, &imageio::encode_png(&out)?, run.overwrite)?;
            Ok(ItemOutcome::Written { matched: true })
        }
    }
}

/// Augments every manifest image and writes the results under `run.output_dir`.
///
/// Triggered images are written as PNG; untriggered ones are copied verbatim
/// (keeping their file name) or skipped.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    cfg: &AugmentConfig,
    run: &AugmentRun,
) -> Result<(PreprocessReport, AugmentLog), PipelineError> {
    let started = Instant::now();
    cfg.validate()
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    if run.workers == 0 {
        return Err(PipelineError::InvalidConfig(
            "workers must be at least 1".into(),
        ));
    }
    create_output_dir(&run.output_dir)?;
    let choices: Vec<Option<usize>> = manifest
        .entries()
        .iter()
        .map(|e| {
            let mut stream = image_stream(cfg.seed, &e.path);
            draw_pool_choice(cfg.probability, cfg.pool.len(), &mut stream)
        })
        .collect();
    let out_paths: Vec<PathBuf> = manifest
        .entries()
        .iter()
        .zip(&choices)
        .map(|(e, c)| match c {
            Some(_) => png_output_path(&run.output_dir, &e.path),
            None => mirrored_path(&run.output_dir, &e.path),
        })
        .collect();
    let collided = collisions(&out_paths);
    let indices: Vec<usize> = (0..manifest.len()).collect();
    let results = par_map(run.workers, &indices, |_, &i| {
        if collided[i] && (choices[i].is_some() || run.emit_untriggered == EmitUntriggered::Copy) {
            return Err(ItemError::Collision(out_paths[i].clone()));
        }
        augment_one(manifest, i, cfg, run, choices[i])
    });
    let report = assemble_report(manifest, results, started);
    log::info!(
        "augmented {} of {} images ({} triggered, {} failed) in {:.2}s",
        report.processed,
        manifest.len(),
        report.triggered,
        report.failed.len(),
        report.wall_time
    );
    let log = AugmentLog {
        choices: manifest
            .entries()
            .iter()
            .map(|e| e.path.clone())
            .zip(choices)
            .collect(),
    };
    Ok((report, log))
}
