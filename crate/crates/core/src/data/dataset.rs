use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{augment, crop_to_multiple, degrade, quantize, read_png, sample_patch, ImagePair};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Where low-resolution inputs come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    /// `<root>/HR` with matching stems in `<root>/LRx{s}`.
    PairedDirs,
    /// HR images only; LR is synthesized by [`degrade`] and quantized to
    /// 8 bits.
    HrOnly,
}

/// Loaded image pairs in file-name order.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
    pub mode: DatasetMode,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds an index from in-memory HR images the same way `hr_only`
    /// loading does.
    pub fn from_hr_images(images: Vec<(String, Tensor<f32>)>, scale: usize) -> Result<Self> {
        let pairs = images
            .into_iter()
            .map(|(id, hr)| synthesize(hr, scale, id))
            .collect::<Result<_>>()?;
        Ok(DatasetIndex {
            pairs,
            scale,
            mode: DatasetMode::HrOnly,
        })
    }
}

fn synthesize(hr: Tensor<f32>, scale: usize, id: String) -> Result<ImagePair> {
    let mut pair = degrade(&hr, scale).map_err(|e| Error::Data(format!("{id}: {e}")))?;
    pair.lr = quantize(&pair.lr);
    pair.id = id;
    Ok(pair)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every PNG under `<dir>/HR` (or `dir` itself when it has no `HR`
/// subdirectory).
pub fn load_dataset(dir: &Path, scale: usize, mode: DatasetMode) -> Result<DatasetIndex> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let hr_dir = if dir.join("HR").is_dir() { dir.join("HR") } else { dir.to_path_buf() };
    let files = png_files(&hr_dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", hr_dir.display())));
    }
    let mut pairs = Vec::with_capacity(files.len());
    match mode {
        DatasetMode::HrOnly => {
            for f in &files {
                pairs.push(synthesize(read_png(f)?, scale, stem(f))?);
            }
        }
        DatasetMode::PairedDirs => {
            let lr_dir = dir.join(format!("LRx{scale}"));
            if !lr_dir.is_dir() {
                return Err(Error::Data(format!("missing directory {}", lr_dir.display())));
            }
            for f in &files {
                let id = stem(f);
                let lr_path = [format!("{id}.png"), format!("{id}x{scale}.png")]
                    .into_iter()
                    .map(|n| lr_dir.join(n))
                    .find(|p| p.is_file())
                    .ok_or_else(|| Error::Data(format!("{}: no matching LR image in {}", f.display(), lr_dir.display())))?;
                let lr = read_png(&lr_path)?;
                let hr = crop_to_multiple(&read_png(f)?, scale).map_err(|e| Error::Data(format!("{}: {e}", f.display())))?;
                if [lr.h() * scale, lr.w() * scale] != [hr.h(), hr.w()] {
                    return Err(Error::Data(format!(
                        "{}: LR size {}x{} does not match HR size {}x{} at scale {scale}",
                        lr_path.display(),
                        lr.h(),
                        lr.w(),
                        hr.h(),
                        hr.w()
                    )));
                }
                pairs.push(ImagePair { hr, lr, scale, id });
            }
        }
    }
    Ok(DatasetIndex { pairs, scale, mode })
}

/// A training mini-batch of aligned, augmented patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

/// Draws `batch` patches, each from a uniformly chosen image, with a random
/// dihedral transform when `augment_patches` is set.
pub fn sample_batch<R: Rng + ?Sized>(
    data: &DatasetIndex,
    batch: usize,
    patch: usize,
    augment_patches: bool,
    rng: &mut R,
) -> Result<PatchBatch> {
    if data.is_empty() || batch == 0 {
        return Err(Error::Data("cannot form a batch from an empty dataset".into()));
    }
    let mut lrs = Vec::with_capacity(batch);
    let mut hrs = Vec::with_capacity(batch);
    for _ in 0..batch {
        let pair = &data.pairs[rng.gen_range(0..data.len())];
        let (lr, hr) = sample_patch(pair, patch, rng)?;
        let (lr, hr) = if augment_patches {
            let (l, h, _) = augment(&lr, &hr, rng)?;
            (l, h)
        } else {
            (lr, hr)
        };
        lrs.push(lr);
        hrs.push(hr);
    }
    Ok(PatchBatch {
        lr: Tensor::stack(&lrs)?,
        hr: Tensor::stack(&hrs)?,
    })
}
