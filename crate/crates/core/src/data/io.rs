//! PNG conversion and the on-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<split>/<index:05>.png
//! ```
//!
//! Pixels map from `[-1, 1]` to 8-bit with `round((v + 1) · 127.5)`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{pixel_to_u8, u8_to_pixel, AttributeVector, DatasetSplits, LabeledDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::tensor::{ImageShape, LatentBatch, LatentImage};

pub fn image_to_bytes(img: &LatentImage<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    let hw = s.height * s.width;
    let px = |c: usize, i: usize| pixel_to_u8(img.data()[c * hw + i] as f64);
    let mut out = std::io::Cursor::new(Vec::new());
    match s.channels {
        1 => {
            let buf: GrayImage = ImageBuffer::from_fn(s.width as u32, s.height as u32, |x, y| {
                Luma([px(0, y as usize * s.width + x as usize)])
            });
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        3 => {
            let buf: RgbImage = ImageBuffer::from_fn(s.width as u32, s.height as u32, |x, y| {
                let i = y as usize * s.width + x as usize;
                Rgb([px(0, i), px(1, i), px(2, i)])
            });
            buf.write_to(&mut out, image::ImageFormat::Png)?;
        }
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    }
    Ok(out.into_inner())
}

/// Writes a PNG and returns the SHA-256 of the written bytes.
pub fn save_png(path: &Path, img: &LatentImage<f32>) -> Result<String> {
    let bytes = image_to_bytes(img)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn load_png(path: &Path, channels: usize) -> Result<LatentImage<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let shape = ImageShape::new(channels, h, w);
    let data = match channels {
        1 => img.to_luma8().pixels().map(|p| u8_to_pixel(p.0[0])).collect(),
        3 => {
            let rgb = img.to_rgb8();
            let mut d = vec![0.0; 3 * h * w];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    d[c * h * w + i] = u8_to_pixel(p.0[c]);
                }
            }
            d
        }
        c => return Err(Error::Shape(format!("cannot read a {c}-channel PNG"))),
    };
    LatentImage::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub file: String,
    pub label: usize,
    pub attributes: AttributeVector,
    pub identity: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

pub fn save_dataset(dir: &Path, spec: &SyntheticSpec, splits: &DatasetSplits) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for split in Split::ALL {
        let ds = splits.get(split);
        let mut recs = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let file = format!("{}/{i:05}.png", split.name());
            let sha256 = save_png(&dir.join(&file), &ds.images.image(i))?;
            recs.push(ImageRecord {
                file,
                label: ds.labels[i],
                attributes: ds.attributes[i].clone(),
                identity: ds.identities[i],
                sha256,
            });
        }
        records.push(recs);
    }
    let test = records.pop().unwrap_or_default();
    let val = records.pop().unwrap_or_default();
    let train = records.pop().unwrap_or_default();
    let manifest = DatasetManifest {
        spec: spec.clone(),
        train,
        val,
        test,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(SyntheticSpec, DatasetSplits)> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let spec = manifest.spec.clone();
    let load = |split: Split, recs: &[ImageRecord]| -> Result<LabeledDataset> {
        let mut data = Vec::with_capacity(recs.len() * spec.image_shape.numel());
        for r in recs {
            let img = load_png(&dir.join(&r.file), spec.image_shape.channels)?;
            if img.shape() != spec.image_shape {
                return Err(Error::Shape(format!("{} has shape {:?}", r.file, img.shape())));
            }
            data.extend_from_slice(img.data());
        }
        LabeledDataset::new(
            split,
            LatentBatch::new(recs.len(), spec.image_shape, data)?,
            recs.iter().map(|r| r.label).collect(),
            recs.iter().map(|r| r.attributes.clone()).collect(),
            recs.iter().map(|r| r.identity).collect(),
        )
    };
    let splits = DatasetSplits {
        train: load(Split::Train, &manifest.train)?,
        val: load(Split::Val, &manifest.val)?,
        test: load(Split::Test, &manifest.test)?,
    };
    Ok((spec, splits))
}
