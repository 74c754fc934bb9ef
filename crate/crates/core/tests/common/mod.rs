#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use histmatch::dataset::{DatasetManifest, ImageType, Label, ManifestEntry};
use histmatch::imageio;
use histmatch::ImageBuffer;
use rand::seq::SliceRandom;
use rand::Rng;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_histmatch"))
}

pub fn histmatch(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn histmatch")
}

/// Random image whose texture varies with `style`: uniform noise, a narrow
/// band of a few levels (lots of ties), or a noisy gradient.
pub fn random_image<R: Rng>(rng: &mut R, w: u32, h: u32, style: u8) -> ImageBuffer {
    let n = (w * h) as usize;
    let plane = |rng: &mut R| -> Vec<u8> {
        match style % 3 {
            0 => (0..n).map(|_| rng.random()).collect(),
            1 => {
                let base: u8 = rng.random_range(0..200);
                let spread: u8 = rng.random_range(1..8);
                (0..n).map(|_| base + rng.random_range(0..spread)).collect()
            }
            _ => (0..n)
                .map(|i| {
                    let g = (i % w as usize) * 255 / w as usize;
                    (g as i32 + rng.random_range(-20..=20)).clamp(0, 255) as u8
                })
                .collect(),
        }
    };
    let planes = [plane(rng), plane(rng), plane(rng)];
    ImageBuffer::new(w, h, 256, planes).unwrap()
}

/// Every level appears in every channel, so all CDFs strictly increase.
pub fn full_support_image<R: Rng>(rng: &mut R, w: u32, h: u32) -> ImageBuffer {
    let n = (w * h) as usize;
    assert!(n >= 256);
    let plane = |rng: &mut R| -> Vec<u8> {
        let mut p: Vec<u8> = (0..=255u8).collect();
        p.extend((256..n).map(|_| rng.random::<u8>()));
        p.shuffle(rng);
        p
    };
    let planes = [plane(rng), plane(rng), plane(rng)];
    ImageBuffer::new(w, h, 256, planes).unwrap()
}

/// Writes `n` PNGs spread over all six strata and returns the manifest text.
pub fn write_corpus<R: Rng>(rng: &mut R, dir: &Path, n: usize) -> String {
    let mut csv = String::from("path,label,image_type\n");
    for i in 0..n {
        let label = Label::ALL[i % 3];
        let image_type = ImageType::ALL[(i / 3) % 2];
        let rel = format!("{label}/{image_type}/img{i:03}.png");
        let w = rng.random_range(24..72);
        let h = rng.random_range(24..72);
        let img = random_image(rng, w, h, (i % 3) as u8);
        imageio::save_png(&img, &dir.join(&rel)).unwrap();
        csv.push_str(&format!("{rel},{label},{image_type}\n"));
    }
    csv
}

pub fn corpus_manifest(dir: &Path, csv: &str) -> DatasetManifest {
    histmatch::dataset::parse_manifest(csv.as_bytes())
        .unwrap()
        .with_base_dir(dir)
}

pub fn entry(path: &str, label: Label, image_type: ImageType) -> ManifestEntry {
    ManifestEntry {
        path: path.to_string(),
        label,
        image_type,
    }
}

/// Relative path -> bytes for every file under `root`.
pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}
