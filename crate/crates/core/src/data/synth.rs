//! Deterministic synthetic aerial-style tiles with exact masks.
//!
//! Class 0 is a textured background. Each foreground class has its own
//! shape family and a distinct colour signature, painted onto still-background
//! pixels until that class reaches its pixel budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const MAX_CLASSES: usize = 6;
const NOISE_STD: f32 = 0.06;
const MAX_ATTEMPTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_tiles: usize,
    pub tile_size: usize,
    pub num_classes: usize,
    /// Fraction of each tile covered by foreground classes, split evenly
    /// between classes `1..num_classes`.
    pub shape_density: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_tiles: 64,
            tile_size: 64,
            num_classes: 3,
            shape_density: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tiles == 0 {
            return Err(Error::Config("num_tiles must be at least 1".into()));
        }
        if self.tile_size < 8 {
            return Err(Error::Config(format!(
                "tile_size {} is below the minimum of 8",
                self.tile_size
            )));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be within 2..={MAX_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if !(0.0..=0.9).contains(&self.shape_density) {
            return Err(Error::Config(format!(
                "shape_density must be within [0, 0.9], got {}",
                self.shape_density
            )));
        }
        Ok(())
    }

    /// Pixel budget for each class of one tile; class 0 takes the remainder.
    pub fn class_targets(&self) -> Vec<usize> {
        let area = self.tile_size * self.tile_size;
        let fg = self.num_classes - 1;
        let per = (self.shape_density / fg as f64 * area as f64).round() as usize;
        let mut targets = vec![per; self.num_classes];
        targets[0] = area - per * fg;
        targets
    }

    /// Target pixel fraction per class.
    pub fn class_fractions(&self) -> Vec<f64> {
        let area = (self.tile_size * self.tile_size) as f64;
        self.class_targets()
            .iter()
            .map(|&t| t as f64 / area)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    /// Large axis-aligned rectangles (buildings).
    Rectangle,
    /// Medium ellipses (low vegetation).
    Ellipse,
    /// Discs (tree crowns).
    Disc,
    /// Small 4–8 px blobs (cars).
    Blob,
    /// Thin bars (clutter).
    Bar,
}

pub fn class_shape(class: usize) -> ShapeKind {
    match class {
        1 => ShapeKind::Rectangle,
        2 => ShapeKind::Ellipse,
        3 => ShapeKind::Disc,
        4 => ShapeKind::Blob,
        _ => ShapeKind::Bar,
    }
}

fn class_colour(class: usize) -> [f32; 3] {
    match class {
        0 => [0.55, 0.55, 0.58],
        1 => [0.78, 0.36, 0.30],
        2 => [0.55, 0.78, 0.35],
        3 => [0.14, 0.42, 0.16],
        4 => [0.15, 0.25, 0.80],
        _ => [0.88, 0.80, 0.22],
    }
}

/// Pixels of one shape instance, in row-major order, clipped to the tile.
fn shape_pixels(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let s = size as isize;
    let clip = |pts: Vec<(isize, isize)>| -> Vec<(usize, usize)> {
        pts.into_iter()
            .filter(|&(y, x)| (0..s).contains(&y) && (0..s).contains(&x))
            .map(|(y, x)| (y as usize, x as usize))
            .collect()
    };
    let rect = |y0: isize, x0: isize, h: isize, w: isize| -> Vec<(isize, isize)> {
        (y0..y0 + h)
            .flat_map(|y| (x0..x0 + w).map(move |x| (y, x)))
            .collect()
    };
    let ellipse = |cy: isize, cx: isize, ry: isize, rx: isize| -> Vec<(isize, isize)> {
        let (ryf, rxf) = (ry as f64 + 0.5, rx as f64 + 0.5);
        (cy - ry..=cy + ry)
            .flat_map(|y| (cx - rx..=cx + rx).map(move |x| (y, x)))
            .filter(|&(y, x)| {
                let dy = (y - cy) as f64 / ryf;
                let dx = (x - cx) as f64 / rxf;
                dy * dy + dx * dx <= 1.0
            })
            .collect()
    };
    let lo = |d: usize| (size / d).max(2) as isize;
    match kind {
        ShapeKind::Rectangle => {
            let h = rng.gen_range(lo(6)..=lo(3));
            let w = rng.gen_range(lo(6)..=lo(3));
            clip(rect(
                rng.gen_range(-h / 2..s),
                rng.gen_range(-w / 2..s),
                h,
                w,
            ))
        }
        ShapeKind::Ellipse => {
            let ry = rng.gen_range(lo(12)..=lo(6));
            let rx = rng.gen_range(lo(12)..=lo(6));
            clip(ellipse(rng.gen_range(0..s), rng.gen_range(0..s), ry, rx))
        }
        ShapeKind::Disc => {
            let r = rng.gen_range(lo(16)..=lo(8));
            clip(ellipse(rng.gen_range(0..s), rng.gen_range(0..s), r, r))
        }
        ShapeKind::Blob => {
            let h = rng.gen_range(4..=8);
            let w = rng.gen_range(4..=8);
            clip(rect(rng.gen_range(0..s), rng.gen_range(0..s), h, w))
        }
        ShapeKind::Bar => {
            let (h, w) = if rng.gen_bool(0.5) {
                (rng.gen_range(2..=3), rng.gen_range(6..=12))
            } else {
                (rng.gen_range(6..=12), rng.gen_range(2..=3))
            };
            clip(rect(rng.gen_range(0..s), rng.gen_range(0..s), h, w))
        }
    }
}

fn synth_tile(spec: &SynthSpec, seed: u64, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let n = spec.tile_size;
    let targets = spec.class_targets();
    let mut labels = vec![0u8; n * n];

    for (class, &target) in targets.iter().enumerate().skip(1) {
        let kind = class_shape(class);
        let mut count = 0;
        let mut attempts = 0;
        while count < target && attempts < MAX_ATTEMPTS {
            attempts += 1;
            for (y, x) in shape_pixels(kind, n, &mut rng) {
                if count == target {
                    break;
                }
                let l = &mut labels[y * n + x];
                if *l == 0 {
                    *l = class as u8;
                    count += 1;
                }
            }
        }
    }

    let noise = Normal::new(0.0f32, NOISE_STD).expect("finite std");
    // Low-frequency shading on the background so class 0 is not a flat colour.
    let (fy, fx) = (rng.gen_range(0.5..2.0f32), rng.gen_range(0.5..2.0f32));
    let mut image = vec![0f32; 3 * n * n];
    for p in 0..n * n {
        let class = labels[p] as usize;
        let base = class_colour(class);
        // 6.28 is a shading frequency; tiles are pinned to it byte for byte.
        #[allow(clippy::approx_constant)]
        let shade = if class == 0 {
            let (y, x) = ((p / n) as f32 / n as f32, (p % n) as f32 / n as f32);
            0.06 * ((fy * y * 6.28).sin() + (fx * x * 6.28).cos())
        } else {
            0.0
        };
        for c in 0..3 {
            let v = (base[c] + shade + noise.sample(&mut rng)).clamp(0.0, 1.0);
            // Quantise to 8 bits so a PNG round trip is lossless.
            image[c * n * n + p] = (v * 255.0).round() / 255.0;
        }
    }
    Sample::new(
        Tensor::new([3, n, n], image).expect("tile shape"),
        LabelMap::new(n, n, labels).expect("tile shape"),
    )
    .expect("aligned tile")
}

/// Generates `spec.num_tiles` tiles. Each tile draws from its own rng stream
/// derived from `(seed, tile index)`, so the result is independent of
/// evaluation order.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok(par::map_indices(spec.num_tiles, |i| {
        synth_tile(spec, seed, i)
    }))
}
