//! On-disk dataset layout:
//!
//! ```text
//! root/samples/<id>/image.png        grayscale brightfield, 8 or 16 bit
//! root/samples/<id>/fluor.png        optional fluorescence counts
//! root/samples/<id>/instances.json   {"instances": [{"class", "bbox", "mask", "fluorescence"?}]}
//! root/samples/<id>/mask_NNN.png     one binary mask per instance
//! root/split.json                    {"seed", "train", "val", "test"}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use celldetr_tensor::{lit, Scalar};
use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{Class, DatasetSplit, InstanceSet, Mask, Sample, IMAGE_SIZE};
use crate::boxmatch::BoundingBox;
use crate::error::{Error, Result};

/// Upper bound on instances per image accepted by the loader.
pub const MAX_INSTANCES: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    class: Class,
    bbox: [f64; 4],
    mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fluorescence: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    instances: Vec<InstanceRecord>,
}

/// Reads a grayscale PNG as `(width, height, values, max_value)`.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u16>, u16)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(match img {
        DynamicImage::ImageLuma8(b) => (w, h, b.into_raw().into_iter().map(u16::from).collect(), u8::MAX as u16),
        DynamicImage::ImageLuma16(b) => (w, h, b.into_raw(), u16::MAX),
        other => (w, h, other.into_luma16().into_raw(), u16::MAX),
    })
}

/// Writes 16-bit grayscale values.
pub fn write_gray16(path: &Path, size: usize, values: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(size as u32, size as u32, values.to_vec()).expect("buffer matches size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = GrayImage::from_raw(
        mask.width as u32,
        mask.height as u32,
        mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    )
    .expect("buffer matches size");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn to_u16_checked<T: Scalar>(id: &str, v: T, scale: f64, what: &str) -> Result<u16> {
    let x = v.to_f64_lossy() * scale;
    if !(0.0..=65535.0).contains(&x.round()) {
        return Err(Error::sample(id, format!("{what} value {x} does not fit 16 bits")));
    }
    Ok(x.round() as u16)
}

/// Writes one sample below `root/samples/<id>/`.
pub fn save_sample<T: Scalar>(root: &Path, sample: &Sample<T>) -> Result<()> {
    let dir = root.join("samples").join(&sample.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let image = sample
        .image
        .iter()
        .map(|&v| to_u16_checked(&sample.id, v, 65535.0, "image"))
        .collect::<Result<Vec<_>>>()?;
    write_gray16(&dir.join("image.png"), sample.size, &image)?;
    if let Some(f) = &sample.fluorescence {
        let counts = f
            .iter()
            .map(|&v| to_u16_checked(&sample.id, v, 1.0, "fluorescence"))
            .collect::<Result<Vec<_>>>()?;
        write_gray16(&dir.join("fluor.png"), sample.size, &counts)?;
    }
    let mut records = Vec::new();
    for (i, ((c, b), m)) in sample
        .instances
        .classes
        .iter()
        .zip(&sample.instances.boxes)
        .zip(&sample.instances.masks)
        .enumerate()
    {
        let name = format!("mask_{i:03}.png");
        write_mask(&dir.join(&name), m)?;
        records.push(InstanceRecord {
            class: *c,
            bbox: b.to_array().map(|v| v.to_f64_lossy()),
            mask: name,
            fluorescence: sample.fluorescence_truth.as_ref().map(|t| t[i]),
        });
    }
    let path = dir.join("instances.json");
    let json = serde_json::to_string_pretty(&AnnotationFile { instances: records }).expect("serializable");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn save_dataset<T: Scalar>(root: &Path, samples: &[Sample<T>]) -> Result<()> {
    samples.iter().try_for_each(|s| save_sample(root, s))
}

fn load_sample<T: Scalar>(dir: &Path, id: &str) -> Result<Sample<T>> {
    let (w, h, raw, max) = read_gray(&dir.join("image.png"))?;
    if w != IMAGE_SIZE || h != IMAGE_SIZE {
        return Err(Error::sample(id, format!("image is {w}x{h}, expected {IMAGE_SIZE}x{IMAGE_SIZE}")));
    }
    let image = raw.iter().map(|&v| lit(v as f64 / max as f64)).collect();
    let fluor_path = dir.join("fluor.png");
    let fluorescence = if fluor_path.exists() {
        let (fw, fh, counts, _) = read_gray(&fluor_path)?;
        if fw != w || fh != h {
            return Err(Error::sample(id, "fluorescence image size differs from brightfield"));
        }
        Some(counts.into_iter().map(|v| lit(v as f64)).collect())
    } else {
        None
    };
    let ann_path = dir.join("instances.json");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let ann: AnnotationFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: ann_path.clone(),
        source,
    })?;
    let mut instances = InstanceSet::default();
    let mut truth = Vec::new();
    for (i, rec) in ann.instances.iter().enumerate() {
        let mask_path = dir.join(&rec.mask);
        if !mask_path.exists() {
            return Err(Error::sample(id, format!("instance {i}: missing mask file {}", rec.mask)));
        }
        let (mw, mh, bits, _) = read_gray(&mask_path)?;
        if mw != w || mh != h {
            return Err(Error::sample(id, format!("instance {i}: mask is {mw}x{mh}")));
        }
        let b = rec.bbox;
        if b.iter().any(|v| !v.is_finite()) || b[2] <= 0.0 || b[3] <= 0.0 {
            return Err(Error::sample(id, format!("instance {i}: zero-area or malformed box {b:?}")));
        }
        instances.classes.push(rec.class);
        instances.boxes.push(BoundingBox::new(lit(b[0]), lit(b[1]), lit(b[2]), lit(b[3])));
        instances.masks.push(Mask {
            height: h,
            width: w,
            bits: bits.into_iter().map(|v| v > 0).collect(),
        });
        truth.push(rec.fluorescence);
    }
    let fluorescence_truth = if !truth.is_empty() && truth.iter().all(Option::is_some) {
        Some(truth.into_iter().flatten().collect())
    } else {
        None
    };
    let sample = Sample {
        id: id.to_string(),
        size: IMAGE_SIZE,
        image,
        fluorescence,
        instances,
        fluorescence_truth,
    };
    sample.validate(MAX_INSTANCES)?;
    Ok(sample)
}

/// Loads every sample under `root/samples`, sorted by id.
pub fn load_dataset<T: Scalar>(root: &Path) -> Result<Vec<Sample<T>>> {
    let dir = root.join("samples");
    if !dir.is_dir() {
        log::warn!("{}: no samples directory, dataset is empty", root.display());
        return Ok(Vec::new());
    }
    let mut ids: Vec<(String, PathBuf)> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().is_dir())
        .map(|entry| (entry.file_name().to_string_lossy().into_owned(), entry.path()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        log::warn!("{}: dataset is empty", root.display());
    }
    ids.iter().map(|(id, path)| load_sample(path, id)).collect()
}

pub fn save_split(root: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let path = root.join("split.json");
    fs::write(&path, serde_json::to_string_pretty(split).expect("serializable")).map_err(|e| Error::io(&path, e))
}

pub fn load_split(root: &Path) -> Result<Option<DatasetSplit>> {
    let path = root.join("split.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|source| Error::Json { path, source })
}
