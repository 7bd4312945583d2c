//! Synthetic rooftop scenes with simulated interactive-segmentation errors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mask::{disk, Mask};
use super::sqa::sqa_ground_truth;
use crate::error::{AqsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    /// Signed disk radius range: positive dilates, negative erodes.
    pub radius: [i32; 2],
    /// Maximum absolute translation per axis.
    pub shift: u32,
    pub drop_prob: f64,
    /// Each of `max_blobs` spurious blobs appears with this probability.
    pub blob_prob: f64,
    pub max_blobs: usize,
    pub blob_radius: [usize; 2],
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { radius: [-2, 2], shift: 2, drop_prob: 0.15, blob_prob: 0.5, max_blobs: 2, blob_radius: [2, 5] }
    }
}

impl PerturbConfig {
    /// Leaves every mask unchanged.
    pub fn identity() -> Self {
        Self { radius: [0, 0], shift: 0, drop_prob: 0.0, blob_prob: 0.0, max_blobs: 0, blob_radius: [1, 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Inclusive building-count range.
    pub buildings: [usize; 2],
    /// Minimum rasterized footprint in pixels.
    pub min_area: usize,
    /// Inclusive rectangle side range in pixels.
    pub side: [usize; 2],
    /// Probability that a building is drawn axis-aligned rather than rotated.
    pub axis_aligned_prob: f64,
    pub background: [u8; 2],
    pub roof: [u8; 2],
    pub texture: f64,
    pub noise: f64,
    pub perturb: PerturbConfig,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            buildings: [1, 8],
            min_area: 40,
            side: [6, 14],
            axis_aligned_prob: 0.5,
            background: [40, 110],
            roof: [150, 235],
            texture: 12.0,
            noise: 6.0,
            perturb: PerturbConfig::default(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AqsError::Config(m.to_owned()));
        let p = &self.perturb;
        let probs = [self.axis_aligned_prob, p.drop_prob, p.blob_prob];
        if probs.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.width == 0 || self.height == 0 {
            return bad("canvas must be non-empty");
        }
        let ranges_ok = self.buildings[0] <= self.buildings[1]
            && self.side[0] <= self.side[1]
            && self.side[0] > 0
            && self.background[0] <= self.background[1]
            && self.roof[0] <= self.roof[1]
            && p.radius[0] <= p.radius[1]
            && p.blob_radius[0] <= p.blob_radius[1];
        if !ranges_ok {
            return bad("every range must be non-empty (lo <= hi) and sides positive");
        }
        if !(self.texture >= 0.0 && self.noise >= 0.0) {
            return bad("texture and noise must be non-negative");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What the segmentation simulator did to one building.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppliedPerturbation {
    pub dropped: bool,
    pub radius: i32,
    pub shift: [i32; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Building {
    /// Corner points in pixel coordinates.
    pub polygon: [[f64; 2]; 4],
    pub area: usize,
    pub color: [u8; 3],
    pub perturbation: AppliedPerturbation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [usize; 2],
    pub radius: usize,
}

/// Image, simulated segmentation, building ground truth and QA labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SqaTriplet {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB.
    pub image: Vec<u8>,
    pub seg_mask: Mask,
    pub gt_mask: Mask,
    pub labels: Vec<u8>,
    pub buildings: Vec<Building>,
    pub blobs: Vec<Blob>,
}

impl SqaTriplet {
    /// Builds a triplet from existing rasters, deriving the labels.
    pub fn from_parts(width: usize, height: usize, image: Vec<u8>, seg_mask: Mask, gt_mask: Mask) -> Result<Self> {
        if image.len() != width * height * 3 {
            return Err(AqsError::Validation(format!("image holds {} bytes for a {width}x{height} RGB canvas", image.len())));
        }
        if (seg_mask.width, seg_mask.height) != (width, height) {
            return Err(AqsError::Validation("mask and image sizes differ".into()));
        }
        let labels = sqa_ground_truth(&seg_mask, &gt_mask)?;
        Ok(Self { width, height, image, seg_mask, gt_mask, labels, buildings: Vec::new(), blobs: Vec::new() })
    }
}

/// Renders a rectangle of size `w × h` centred at `(cx, cy)` rotated by
/// `angle`; a pixel is inside when its centre is.
fn rasterize(width: usize, height: usize, cx: f64, cy: f64, w: f64, h: f64, angle: f64) -> (Mask, [[f64; 2]; 4]) {
    let (s, c) = angle.sin_cos();
    let mut m = Mask::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let (u, v) = (c * px + s * py, -s * px + c * py);
            if u.abs() <= w / 2.0 && v.abs() <= h / 2.0 {
                m.data[y * width + x] = 1;
            }
        }
    }
    let corner = |a: f64, b: f64| [cx + c * a - s * b, cy + s * a + c * b];
    let (hw, hh) = (w / 2.0, h / 2.0);
    (m, [corner(-hw, -hh), corner(hw, -hh), corner(hw, hh), corner(-hw, hh)])
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 20;

type Footprint = ([[f64; 2]; 4], usize);

/// Non-overlapping footprints separated by at least one background pixel;
/// a layout that gets stuck is discarded and restarted.
fn place_buildings(cfg: &SceneConfig, target: usize, rng: &mut impl Rng) -> Option<(Vec<Mask>, Vec<Footprint>)> {
    let (w, h) = (cfg.width, cfg.height);
    'layout: for _ in 0..LAYOUT_ATTEMPTS {
        let mut occupied = Mask::empty(w, h);
        let mut instances = Vec::with_capacity(target);
        let mut shapes = Vec::with_capacity(target);
        while instances.len() < target {
            let placed = (0..PLACEMENT_ATTEMPTS).find_map(|_| {
                let bw = rng.random_range(cfg.side[0]..=cfg.side[1]) as f64;
                let bh = rng.random_range(cfg.side[0]..=cfg.side[1]) as f64;
                let angle = if rng.random_bool(cfg.axis_aligned_prob) { 0.0 } else { rng.random_range(0.0..PI) };
                let cx = rng.random_range(0.0..w as f64);
                let cy = rng.random_range(0.0..h as f64);
                let (m, polygon) = rasterize(w, h, cx, cy, bw, bh, angle);
                let inside = polygon.iter().all(|p| p[0] >= 1.0 && p[1] >= 1.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64);
                let area = m.count();
                let clear = m.data.iter().zip(&occupied.data).all(|(&a, &b)| a == 0 || b == 0);
                (inside && clear && area >= cfg.min_area).then_some((m, polygon, area))
            });
            let Some((m, polygon, area)) = placed else { continue 'layout };
            occupied.union_with(&m.dilate(1));
            shapes.push((polygon, area));
            instances.push(m);
        }
        return Some((instances, shapes));
    }
    None
}

/// Per-instance morphology, translation and drop, then spurious blobs.
pub fn perturb_mask(instances: &[Mask], width: usize, height: usize, cfg: &PerturbConfig, rng: &mut impl Rng) -> (Mask, Vec<AppliedPerturbation>, Vec<Blob>) {
    let mut seg = Mask::empty(width, height);
    let mut applied = Vec::with_capacity(instances.len());
    for inst in instances {
        let dropped = rng.random_bool(cfg.drop_prob);
        let radius = rng.random_range(cfg.radius[0]..=cfg.radius[1]);
        let s = cfg.shift as i32;
        let shift = [rng.random_range(-s..=s), rng.random_range(-s..=s)];
        if !dropped {
            seg.union_with(&inst.morph(radius).shift(shift[0] as isize, shift[1] as isize));
        }
        applied.push(AppliedPerturbation { dropped, radius, shift });
    }
    let mut blobs = Vec::new();
    for _ in 0..cfg.max_blobs {
        if rng.random_bool(cfg.blob_prob) {
            let radius = rng.random_range(cfg.blob_radius[0]..=cfg.blob_radius[1]);
            let center = [rng.random_range(0..width), rng.random_range(0..height)];
            for (dx, dy) in disk(radius) {
                let (x, y) = (center[0] as isize + dx, center[1] as isize + dy);
                if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
                    seg.data[y as usize * width + x as usize] = 1;
                }
            }
            blobs.push(Blob { center, radius });
        }
    }
    (seg, applied, blobs)
}

/// Scene `index` of the stream defined by `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<SqaTriplet> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = stream_rng(cfg.seed, 2 * index);
    let target = rng.random_range(cfg.buildings[0]..=cfg.buildings[1]);

    let (instances, shapes) = place_buildings(cfg, target, &mut rng).ok_or_else(|| {
        AqsError::Generation(format!("scene {index}: could not place {target} buildings after {LAYOUT_ATTEMPTS} layouts"))
    })?;

    // Background: low-frequency texture plus per-pixel noise, greenish-gray.
    let base = rng.random_range(cfg.background[0]..=cfg.background[1]) as f64;
    let waves: Vec<(f64, f64, f64)> = (0..3).map(|_| (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.0..2.0 * PI))).collect();
    let tint = [rng.random_range(-8.0..8.0), rng.random_range(0.0..12.0), rng.random_range(-8.0..4.0)];
    let mut image = vec![0u8; w * h * 3];
    let mut colors = Vec::with_capacity(target);
    for _ in 0..target {
        let v = rng.random_range(cfg.roof[0]..=cfg.roof[1]) as f64;
        colors.push([v + rng.random_range(-10.0..10.0), v + rng.random_range(-10.0..10.0), v + rng.random_range(-10.0..10.0)]);
    }
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let owner = instances.iter().position(|m| m.data[p] == 1);
            let tex: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin()).sum::<f64>() * cfg.texture / 3.0;
            for ch in 0..3 {
                let n: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise;
                let v = match owner {
                    Some(i) => colors[i][ch] + n,
                    None => base + tint[ch] + tex + n,
                };
                image[p * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let mut gt = Mask::empty(w, h);
    for m in &instances {
        gt.union_with(m);
    }
    let mut prng = stream_rng(cfg.seed, 2 * index + 1);
    let (seg, applied, blobs) = perturb_mask(&instances, w, h, &cfg.perturb, &mut prng);
    let labels = sqa_ground_truth(&seg, &gt)?;
    let buildings = shapes
        .into_iter()
        .zip(colors)
        .zip(applied)
        .map(|(((polygon, area), c), perturbation)| Building {
            polygon,
            area,
            color: c.map(|v| v.round().clamp(0.0, 255.0) as u8),
            perturbation,
        })
        .collect();
    Ok(SqaTriplet { width: w, height: h, image, seg_mask: seg, gt_mask: gt, labels, buildings, blobs })
}

/// Scenes `start..start + count`, generated in parallel; output order is by
/// index and independent of the thread count.
pub fn generate_scenes(cfg: &SceneConfig, start: u64, count: usize) -> Result<Vec<SqaTriplet>> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(count.max(1));
    let chunk = count.div_ceil(threads).max(1);
    let indices: Vec<u64> = (start..start + count as u64).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|ix| s.spawn(move || ix.iter().map(|&i| generate_scene(cfg, i)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(count);
        for h in handles {
            out.extend(h.join().expect("scene worker panicked")?);
        }
        Ok(out)
    })
}
