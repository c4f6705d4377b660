use rand::Rng;

use super::{LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mirror index into `0..n` without repeating the edge sample
/// (`…, 2, 1, 0, 1, 2, …, n-2, n-1, n-2, …`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Aligned `size`×`size` window of image and mask with top-left `(y0, x0)`.
pub fn crop_at(sample: &Sample, y0: usize, x0: usize, size: usize) -> Result<Sample> {
    let (c, h, w) = sample.image.dims3("crop")?;
    if y0 + size > h || x0 + size > w {
        return Err(Error::contract(
            "crop",
            format!("{size}×{size} window at ({y0},{x0}) exceeds {h}×{w} image"),
        ));
    }
    let src = sample.image.data();
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in y0..y0 + size {
            data.extend_from_slice(&src[(ch * h + y) * w + x0..][..size]);
        }
    }
    Sample::new(
        Tensor::new([c, size, size], data)?,
        sample.mask.crop(y0, x0, size, size)?,
    )
}

/// Crop with offsets drawn uniformly from every valid position.
pub fn random_crop<R: Rng + ?Sized>(sample: &Sample, size: usize, rng: &mut R) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    if size == 0 || size > h.min(w) {
        return Err(Error::contract(
            "random_crop",
            format!("crop size {size} does not fit a {h}×{w} image"),
        ));
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    crop_at(sample, y0, x0, size)
}

/// Resamples a square patch: `out(i, j) = in(src(i, j))` applied to every
/// channel and to the mask with the same index map.
fn remap(sample: &Sample, src: impl Fn(usize, usize) -> (usize, usize)) -> Result<Sample> {
    let (c, h, w) = sample.image.dims3("augment")?;
    if h != w {
        return Err(Error::contract(
            "augment",
            format!("patch must be square, got {h}×{w}"),
        ));
    }
    let n = h;
    let data = sample.image.data();
    let mut img = vec![0f32; c * n * n];
    let mut labels = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = src(i, j);
            labels[i * n + j] = sample.mask.get(si, sj);
            for ch in 0..c {
                img[(ch * n + i) * n + j] = data[(ch * n + si) * n + sj];
            }
        }
    }
    Sample::new(Tensor::new([c, n, n], img)?, LabelMap::new(n, n, labels)?)
}

/// Rotates a square patch counter-clockwise by `quarter_turns` × 90°.
/// Pixel `(r, c)` of the input lands at `(n-1-c, r)` after one turn.
pub fn rotate90(sample: &Sample, quarter_turns: u8) -> Result<Sample> {
    let n = sample.height();
    let turns = quarter_turns % 4;
    remap(sample, |i, j| match turns {
        0 => (i, j),
        1 => (j, n - 1 - i),
        2 => (n - 1 - i, n - 1 - j),
        _ => (n - 1 - j, i),
    })
}

/// Shifted re-crop: `out(i, j) = in(i + dy, j + dx)` with reflection at the
/// borders, so every output label is copied from a real input pixel.
pub fn translate(sample: &Sample, dy: isize, dx: isize) -> Result<Sample> {
    let n = sample.height();
    remap(sample, |i, j| {
        (
            reflect_index(i as isize + dy, n),
            reflect_index(j as isize + dx, n),
        )
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub quarter_turns: u8,
    pub dy: isize,
    pub dx: isize,
}

/// Random rotation from {0°, 90°, 180°, 270°} followed by a translation of up
/// to `max_shift` pixels per axis.
pub fn augment<R: Rng + ?Sized>(
    sample: &Sample,
    max_shift: usize,
    rng: &mut R,
) -> Result<(Sample, AugmentParams)> {
    let s = max_shift as isize;
    let params = AugmentParams {
        quarter_turns: rng.gen_range(0..4),
        dy: rng.gen_range(-s..=s),
        dx: rng.gen_range(-s..=s),
    };
    let rotated = rotate90(sample, params.quarter_turns)?;
    Ok((translate(&rotated, params.dy, params.dx)?, params))
}
