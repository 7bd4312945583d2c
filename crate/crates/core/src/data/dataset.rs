//! On-disk datasets (NetPBM rasters + JSON manifest) and batching.

use std::fs;
use std::path::Path;

use aqs_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mask::Mask;
use super::netpbm;
use super::scene::{Blob, Building, SceneConfig, SqaTriplet};
use crate::error::{AqsError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHashes {
    pub image: String,
    pub mask: String,
    pub gt: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: u64,
    pub image: String,
    pub mask: String,
    pub gt: String,
    pub labels: String,
    pub sha256: FileHashes,
    pub buildings: Vec<Building>,
    pub blobs: Vec<Blob>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub scenes: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Mask raster as stored on disk: 0 / 255.
pub fn mask_to_pgm(m: &Mask) -> Vec<u8> {
    let data: Vec<u8> = m.data.iter().map(|&v| v * 255).collect();
    netpbm::encode_pgm(m.width, m.height, &data)
}

pub fn mask_from_pgm(bytes: &[u8]) -> Result<Mask> {
    let r = netpbm::decode_as(bytes, 1)?;
    let data = r
        .data
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            _ => Err(AqsError::Validation(format!("mask pixel value {v} is neither 0 nor 255"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(r.width, r.height, data)
}

pub fn labels_from_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let r = netpbm::decode_as(bytes, 1)?;
    if let Some(v) = r.data.iter().find(|&&v| v > 2) {
        return Err(AqsError::Validation(format!("label value {v} is outside {{0, 1, 2}}")));
    }
    Ok((r.width, r.height, r.data))
}

/// Writes every scene plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, cfg: &SceneConfig, start: u64, scenes: &[SqaTriplet]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let index = start + i as u64;
        let files = [
            (format!("{index:05}_image.ppm"), netpbm::encode_ppm(s.width, s.height, &s.image)),
            (format!("{index:05}_mask.pgm"), mask_to_pgm(&s.seg_mask)),
            (format!("{index:05}_gt.pgm"), mask_to_pgm(&s.gt_mask)),
            (format!("{index:05}_labels.pgm"), netpbm::encode_pgm(s.width, s.height, &s.labels)),
        ];
        for (name, bytes) in &files {
            fs::write(dir.join(name), bytes)?;
        }
        let [image, mask, gt, labels] = files.map(|(n, b)| (n, sha256_hex(&b)));
        entries.push(ManifestEntry {
            index,
            sha256: FileHashes { image: image.1, mask: mask.1, gt: gt.1, labels: labels.1 },
            image: image.0,
            mask: mask.0,
            gt: gt.0,
            labels: labels.0,
            buildings: s.buildings.clone(),
            blobs: s.blobs.clone(),
        });
    }
    let manifest = Manifest { seed: cfg.seed, config: cfg.clone(), scenes: entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, sha: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))?;
    if sha256_hex(&bytes) != sha {
        return Err(AqsError::Validation(format!("{name}: SHA-256 does not match the manifest")));
    }
    Ok(bytes)
}

/// Loads a dataset, verifying every file hash.
pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<SqaTriplet>)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for e in &manifest.scenes {
        let image = netpbm::decode_as(&read_checked(dir, &e.image, &e.sha256.image)?, 3)?;
        let seg = mask_from_pgm(&read_checked(dir, &e.mask, &e.sha256.mask)?)?;
        let gt = mask_from_pgm(&read_checked(dir, &e.gt, &e.sha256.gt)?)?;
        let (_, _, labels) = labels_from_pgm(&read_checked(dir, &e.labels, &e.sha256.labels)?)?;
        let mut t = SqaTriplet::from_parts(image.width, image.height, image.data, seg, gt)?;
        if t.labels != labels {
            return Err(AqsError::Validation(format!("{}: labels disagree with the masks", e.labels)));
        }
        t.buildings = e.buildings.clone();
        t.blobs = e.blobs.clone();
        scenes.push(t);
    }
    Ok((manifest, scenes))
}

/// Network inputs for a group of scenes.
#[derive(Clone, Debug)]
pub struct Batch<T: Real = f32> {
    /// (B, 3, H, W) in [0, 1].
    pub image: Tensor<T>,
    /// (B, 1, H, W) in {0, 1}.
    pub mask: Tensor<T>,
    /// (B, H, W) quality labels.
    pub labels: Vec<u8>,
    /// (B, H, W) building ground truth.
    pub gt: Vec<u8>,
}

/// (3, H, W) planar tensor scaled to [0, 1] from interleaved RGB.
pub fn image_planes<T: Real>(rgb: &[u8], hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); 3 * hw];
    for (p, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + p] = T::from_f64_lossy(px[c] as f64 / 255.0);
        }
    }
    out
}

pub fn make_batch<T: Real>(items: &[&SqaTriplet]) -> Result<Batch<T>> {
    let Some(first) = items.first() else {
        return Err(AqsError::Usage("cannot batch zero scenes".into()));
    };
    let (w, h) = (first.width, first.height);
    if items.iter().any(|s| (s.width, s.height) != (w, h)) {
        return Err(AqsError::Validation("scenes in one batch must share a size".into()));
    }
    let hw = w * h;
    let (mut image, mut mask, mut labels, mut gt) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in items {
        image.extend(image_planes::<T>(&s.image, hw));
        mask.extend(s.seg_mask.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        labels.extend_from_slice(&s.labels);
        gt.extend_from_slice(&s.gt_mask.data);
    }
    let b = items.len();
    Ok(Batch { image: Tensor::new(vec![b, 3, h, w], image)?, mask: Tensor::new(vec![b, 1, h, w], mask)?, labels, gt })
}
