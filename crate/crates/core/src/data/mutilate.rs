//! Test-time corruptions: additive Gaussian pixel noise and rotation.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

const NOISE_STEP: f64 = 0.083;
const NOISE_LEVELS: usize = 13;
const ROTATION_STEP_DEG: f64 = 7.5;
const ROTATION_LEVELS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutilationKind {
    Noise,
    Rotation,
}

impl fmt::Display for MutilationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MutilationKind::Noise => "noise",
            MutilationKind::Rotation => "rotation",
        })
    }
}

impl FromStr for MutilationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(MutilationKind::Noise),
            "rotation" => Ok(MutilationKind::Rotation),
            other => Err(Error::Config(format!("unknown mutilation `{other}`"))),
        }
    }
}

/// How a noise level value is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScale {
    /// Level is the per-pixel standard deviation.
    Std,
    /// Level is the per-pixel variance.
    Variance,
}

impl FromStr for NoiseScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(NoiseScale::Std),
            "variance" => Ok(NoiseScale::Variance),
            other => Err(Error::Config(format!("unknown noise scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutilationSpec {
    pub kind: MutilationKind,
    pub noise_scale: NoiseScale,
    pub seed: u64,
}

impl MutilationSpec {
    pub fn new(kind: MutilationKind, seed: u64) -> Self {
        Self {
            kind,
            noise_scale: NoiseScale::Std,
            seed,
        }
    }

    /// Noise: 0, 0.083, ..., 0.996. Rotation: 0, 7.5, ..., 180 degrees.
    pub fn levels(&self) -> Vec<f64> {
        match self.kind {
            MutilationKind::Noise => (0..NOISE_LEVELS).map(|i| i as f64 * NOISE_STEP).collect(),
            MutilationKind::Rotation => (0..ROTATION_LEVELS)
                .map(|i| i as f64 * ROTATION_STEP_DEG)
                .collect(),
        }
    }

    pub fn level_count(&self) -> usize {
        match self.kind {
            MutilationKind::Noise => NOISE_LEVELS,
            MutilationKind::Rotation => ROTATION_LEVELS,
        }
    }
}

/// A mutilated copy of `ds` at `level` of the grid. Level 0 is the identity.
pub fn mutilate(ds: &Dataset, spec: &MutilationSpec, level: usize) -> Result<Dataset> {
    if level >= spec.level_count() {
        return Err(Error::Argument(format!(
            "mutilation level {level} outside grid of {}",
            spec.level_count()
        )));
    }
    let mut out = ds.clone();
    if level == 0 {
        return Ok(out);
    }
    let value = spec.levels()[level];
    match spec.kind {
        MutilationKind::Noise => {
            let std = match spec.noise_scale {
                NoiseScale::Std => value,
                NoiseScale::Variance => value.sqrt(),
            };
            let offsets = noise_offsets(spec.seed, level, std, out.features.len());
            for (px, dz) in out.features.iter_mut().zip(offsets) {
                *px = (*px + dz).clamp(0.0, 1.0);
            }
        }
        MutilationKind::Rotation => {
            let (c, h, w) = ds
                .image_dims()
                .ok_or_else(|| Error::Data("rotation needs image-shaped samples".into()))?;
            let plane = h * w;
            for img in out.features.chunks_mut(c * plane) {
                for ch in img.chunks_mut(plane) {
                    let rotated = rotate_image(ch, h, w, value);
                    ch.copy_from_slice(&rotated);
                }
            }
        }
    }
    Ok(out)
}

/// Unclamped per-pixel noise for one level, drawn from the level's own stream.
fn noise_offsets(seed: u64, level: usize, std: f64, n: usize) -> Vec<f64> {
    let mut rng = seeded(derive_seed(seed, level as u64));
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        })
        .collect()
}

/// Rotates an `h x w` plane counter-clockwise by `degrees` about its centre
/// with bilinear interpolation; samples falling outside the frame read 0.
pub fn rotate_image(img: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return img.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            // inverse map: rotate the output coordinate back by -angle
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
            out[r * w + c] = v.clamp(0.0, 1.0);
        }
    }
    out
}
