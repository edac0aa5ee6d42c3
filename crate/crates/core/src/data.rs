//! Image files, paired datasets and per-scale target pyramids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::kernels::area_downsample;
use crate::tensor::{Shape, Tensor};

/// Integer depth used when writing image files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

/// Read a 1- or 3-channel 8/16-bit raster into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => (1, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect()),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "{:?} has {} channels; only 1 or 3 channel images are supported",
                    other.color(),
                    other.color().channel_count()
                ),
            })
        }
    };
    // interleaved HWC to planar CHW
    let mut out = Tensor::zeros(Shape::new(1, c, h, w));
    for ch in 0..c {
        let plane = out.plane_mut(0, ch);
        for (i, v) in plane.iter_mut().enumerate() {
            *v = data[i * c + ch];
        }
    }
    Ok(out)
}

/// Quantize `v` (clamped to `[0, 1]`) with round-half-up.
pub fn quantize(v: f64, depth: BitDepth) -> u16 {
    let m = depth.max();
    (v.clamp(0.0, 1.0) * m + 0.5).floor().min(m) as u16
}

/// Write an 8-bit image. The format follows the file extension.
pub fn save_image(img: &Tensor, path: &Path) -> Result<()> {
    save_image_with_depth(img, path, BitDepth::Eight)
}

pub fn save_image_with_depth(img: &Tensor, path: &Path, depth: BitDepth) -> Result<()> {
    let s = img.shape();
    if s.n != 1 || !(s.c == 1 || s.c == 3) {
        return Err(Error::invalid(format!(
            "save_image needs a single 1- or 3-channel image, got {s}"
        )));
    }
    if !img.is_finite() {
        return Err(Error::invalid(format!("refusing to save non-finite image to {}", path.display())));
    }
    let (w, h) = (s.w as u32, s.h as u32);
    let mut codes = Vec::with_capacity(s.item());
    for i in 0..s.plane() {
        for ch in 0..s.c {
            codes.push(quantize(img.plane(0, ch)[i], depth));
        }
    }
    let dynamic = match (depth, s.c) {
        (BitDepth::Eight, 1) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, codes.iter().map(|&v| v as u8).collect()).expect("buffer size"),
        ),
        (BitDepth::Eight, _) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, codes.iter().map(|&v| v as u8).collect()).expect("buffer size"),
        ),
        (BitDepth::Sixteen, 1) => {
            DynamicImage::ImageLuma16(ImageBuffer::<Luma<u16>, _>::from_raw(w, h, codes).expect("buffer size"))
        }
        (BitDepth::Sixteen, _) => {
            DynamicImage::ImageRgb16(ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, codes).expect("buffer size"))
        }
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    dynamic.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// A hazy image, its clear counterpart, and where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct HazePair {
    pub hazy: Tensor,
    pub clear: Tensor,
    pub meta: BTreeMap<String, String>,
}

impl HazePair {
    pub fn new(hazy: Tensor, clear: Tensor) -> Result<Self> {
        hazy.expect_same_shape("haze pair", &clear)?;
        Ok(Self {
            hazy,
            clear,
            meta: BTreeMap::new(),
        })
    }
}

/// File locations of one `hazy/<name>` + `clear/<name>` pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub hazy: PathBuf,
    pub clear: PathBuf,
}

/// Pairs found under a dataset root, sorted by name, plus the names that
/// appear on one side only.
#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub pairs: Vec<PairPaths>,
    pub unpaired: Vec<String>,
}

const IMAGE_EXTS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Image files in `dir`, keyed by file stem.
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !path.is_file() || !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pair `root/hazy/*` with `root/clear/*` by file stem.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let hazy = list_images(&root.join("hazy"))?;
    let clear = list_images(&root.join("clear"))?;
    let mut idx = DatasetIndex::default();
    for (name, h) in &hazy {
        match clear.get(name) {
            Some(c) => idx.pairs.push(PairPaths {
                name: name.clone(),
                hazy: h.clone(),
                clear: c.clone(),
            }),
            None => idx.unpaired.push(name.clone()),
        }
    }
    idx.unpaired.extend(clear.keys().filter(|n| !hazy.contains_key(*n)).cloned());
    idx.unpaired.sort();
    Ok(idx)
}

/// Load every pair of an index into memory, as 3-channel images.
pub fn load_pairs(index: &DatasetIndex) -> Result<Vec<(String, HazePair)>> {
    index
        .pairs
        .iter()
        .map(|p| {
            let hazy = to_rgb(load_image(&p.hazy)?)?;
            let clear = to_rgb(load_image(&p.clear)?)?;
            if hazy.shape() != clear.shape() {
                return Err(Error::invalid(format!(
                    "pair {}: hazy {} and clear {} differ in size",
                    p.name,
                    hazy.shape(),
                    clear.shape()
                )));
            }
            let mut pair = HazePair::new(hazy, clear)?;
            pair.meta.insert("hazy".into(), p.hazy.display().to_string());
            pair.meta.insert("clear".into(), p.clear.display().to_string());
            Ok((p.name.clone(), pair))
        })
        .collect()
}

/// Replicate grayscale to three channels; pass RGB through.
pub fn to_rgb(img: Tensor) -> Result<Tensor> {
    match img.shape().c {
        3 => Ok(img),
        1 => img.repeat_channels(3),
        c => Err(Error::invalid(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// `(P1, P2, P3)` at scales 1, 1/2, 1/4 by area averaging.
pub fn build_target_pyramid(img: &Tensor) -> Result<[Tensor; 3]> {
    let s = img.shape();
    if s.h % 4 != 0 || s.w % 4 != 0 || s.h == 0 || s.w == 0 {
        return Err(Error::invalid(format!(
            "target pyramid needs height and width divisible by 4, got {}x{}",
            s.h, s.w
        )));
    }
    Ok([img.clone(), area_downsample(img, 2), area_downsample(img, 4)])
}
