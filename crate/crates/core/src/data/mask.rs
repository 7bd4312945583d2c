//! Binary rasters and disk morphology.

use serde::{Deserialize, Serialize};

use crate::error::{AqsError, Result};

/// Row-major 0/1 raster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Offsets within a disk of radius `r` (dx² + dy² ≤ r²).
pub fn disk(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height] }
    }

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(AqsError::Validation(format!("{} values for a {width}x{height} mask", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(AqsError::Validation("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: isize, y: isize) -> u8 {
        if x < 0 || y < 0 || x >= self.width as isize || y >= self.height as isize {
            0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Pixels within distance `r` of any set pixel.
    pub fn dilate(&self, r: usize) -> Self {
        let k = disk(r);
        self.map(|x, y| k.iter().any(|&(dx, dy)| self.get(x + dx, y + dy) == 1))
    }

    /// Pixels whose whole radius-`r` disk is set; outside the canvas counts
    /// as unset.
    pub fn erode(&self, r: usize) -> Self {
        let k = disk(r);
        self.map(|x, y| k.iter().all(|&(dx, dy)| self.get(x + dx, y + dy) == 1))
    }

    /// Positive radius dilates, negative erodes.
    pub fn morph(&self, radius: i32) -> Self {
        match radius {
            0 => self.clone(),
            r if r > 0 => self.dilate(r as usize),
            r => self.erode(r.unsigned_abs() as usize),
        }
    }

    /// Integer translation; pixels moved off the canvas are lost.
    pub fn shift(&self, dx: isize, dy: isize) -> Self {
        self.map(|x, y| self.get(x - dx, y - dy) == 1)
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    fn map(&self, f: impl Fn(isize, isize) -> bool) -> Self {
        let mut out = Self::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.data[y * self.width + x] = f(x as isize, y as isize) as u8;
            }
        }
        out
    }
}
