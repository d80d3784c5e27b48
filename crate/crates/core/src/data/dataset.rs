//! ISTD-style directory layout: `<split>_A` shadow images, `<split>_B` shadow
//! masks and optional `<split>_C` shadow-free images, matched by file stem.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    /// Never read by weakly-supervised training.
    pub shadow_free: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub split: Split,
    pub records: Vec<Record>,
    /// All mask paths of the split, the pool region masks are drawn from.
    pub mask_pool: Vec<PathBuf>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keep only the first `n` records (and their masks in the pool).
    pub fn truncated(mut self, n: usize) -> Self {
        self.records.truncate(n);
        self.mask_pool = self.records.iter().map(|r| r.mask.clone()).collect();
        self
    }
}

fn split_dir(root: &Path, split: Split, suffix: char) -> Option<PathBuf> {
    let name = format!("{}_{suffix}", split.name());
    [root.join(split.name()).join(&name), root.join(&name)]
        .into_iter()
        .find(|p| p.is_dir())
}

/// Image files in `dir` keyed by stem.
fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_owned(), path);
        }
    }
    Ok(out)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Index one split of an ISTD-style dataset rooted at `root`.
///
/// Both `root/<split>/<split>_A` and `root/<split>_A` are accepted.
pub fn load_dataset(root: &Path, split: Split) -> Result<DatasetIndex> {
    let images_dir = split_dir(root, split, 'A').ok_or_else(|| {
        Error::Dataset(format!("no {}_A directory under {}", split, root.display()))
    })?;
    let masks_dir = split_dir(root, split, 'B').ok_or_else(|| {
        Error::Dataset(format!("no {}_B directory under {}", split, root.display()))
    })?;
    let images = list_images(&images_dir)?;
    let masks = list_images(&masks_dir)?;
    let free = match split_dir(root, split, 'C') {
        Some(dir) => list_images(&dir)?,
        None => BTreeMap::new(),
    };
    let missing: Vec<String> = images.keys().filter(|s| !masks.contains_key(*s)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingMask(missing));
    }
    let mut records = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let mask = masks[&stem].clone();
        let (di, dm) = (dimensions(&image)?, dimensions(&mask)?);
        if di != dm {
            return Err(Error::Dataset(format!(
                "{stem}: image is {}x{} but mask is {}x{}",
                di.0, di.1, dm.0, dm.1
            )));
        }
        let shadow_free = free.get(&stem).cloned();
        records.push(Record {
            stem,
            image,
            mask,
            shadow_free,
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!("{} contains no images", images_dir.display())));
    }
    let mask_pool = records.iter().map(|r| r.mask.clone()).collect();
    Ok(DatasetIndex {
        split,
        records,
        mask_pool,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Rgb};

    fn write_triplet(root: &Path, split: &str, stem: &str, with_mask: bool) {
        for (suffix, kind) in [('A', 0), ('B', 1), ('C', 2)] {
            let dir = root.join(split).join(format!("{split}_{suffix}"));
            std::fs::create_dir_all(&dir).unwrap();
            let path = dir.join(format!("{stem}.png"));
            match kind {
                1 if !with_mask => {}
                1 => GrayImage::new(8, 6).save(path).unwrap(),
                _ => RgbImage::from_pixel(8, 6, Rgb([10, 20, 30])).save(path).unwrap(),
            }
        }
    }

    #[test]
    fn indexes_matched_triplets_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for stem in ["c", "a", "b"] {
            write_triplet(dir.path(), "train", stem, true);
        }
        let idx = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(idx.len(), 3);
        let stems: Vec<_> = idx.records.iter().map(|r| r.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        assert!(idx.records.iter().all(|r| r.shadow_free.is_some()));
        assert_eq!(idx.mask_pool.len(), 3);
        assert!(load_dataset(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn missing_mask_names_the_stem() {
        let dir = tempfile::tempdir().unwrap();
        write_triplet(dir.path(), "train", "ok", true);
        write_triplet(dir.path(), "train", "orphan", false);
        match load_dataset(dir.path(), Split::Train) {
            Err(Error::MissingMask(stems)) => assert_eq!(stems, vec!["orphan".to_owned()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_triplet(dir.path(), "test", "x", true);
        GrayImage::new(4, 4)
            .save(dir.path().join("test/test_B/x.png"))
            .unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Test), Err(Error::Dataset(_))));
    }
}
