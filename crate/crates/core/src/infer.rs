//! Non-overlapping sliding-window inference, stitching, dataset evaluation
//! and pre-softmax heatmap overlays.

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};

use crate::data::{reflect_index, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, ConfusionMatrix, MetricReport, OaScope};
use crate::model::{argmax_labels, Model};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub y0: usize,
    pub x0: usize,
}

/// A partition of the padded raster into `window`×`window` tiles, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub window: usize,
    pub padded_size: (usize, usize),
    pub tiles: Vec<Tile>,
    pub original_size: (usize, usize),
}

impl TileGrid {
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::contract("tile_image", "window must be positive"));
        }
        if height == 0 || width == 0 {
            return Err(Error::contract(
                "tile_image",
                format!("empty {height}×{width} raster"),
            ));
        }
        let rows = height.div_ceil(window);
        let cols = width.div_ceil(window);
        let tiles = (0..rows)
            .flat_map(|row| {
                (0..cols).map(move |col| Tile {
                    row,
                    col,
                    y0: row * window,
                    x0: col * window,
                })
            })
            .collect();
        Ok(Self {
            window,
            padded_size: (rows * window, cols * window),
            tiles,
            original_size: (height, width),
        })
    }

    pub fn rows(&self) -> usize {
        self.padded_size.0 / self.window
    }

    pub fn cols(&self) -> usize {
        self.padded_size.1 / self.window
    }
}

/// Reflect-pads each `h`×`w` plane to `ph`×`pw` (bottom and right edges).
fn pad_planes<T: Copy>(
    data: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (ph, pw): (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * ph * pw);
    for p in 0..planes {
        let plane = &data[p * h * w..][..h * w];
        for y in 0..ph {
            let sy = reflect_index(y as isize, h);
            out.extend((0..pw).map(|x| plane[sy * w + reflect_index(x as isize, w)]));
        }
    }
    out
}

fn window_planes<T: Copy>(
    data: &[T],
    planes: usize,
    (h, w): (usize, usize),
    y0: usize,
    x0: usize,
    (th, tw): (usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in 0..planes {
        for y in y0..y0 + th {
            out.extend_from_slice(&data[(p * h + y) * w + x0..][..tw]);
        }
    }
    out
}

/// Places tile planes by `(y0, x0)` and crops to the original size.
fn stitch_planes<T: Copy + Default>(
    grid: &TileGrid,
    tiles: &[&[T]],
    planes: usize,
) -> Result<Vec<T>> {
    if tiles.len() != grid.tiles.len() {
        return Err(Error::contract(
            "stitch",
            format!(
                "{} tile outputs for a grid of {}",
                tiles.len(),
                grid.tiles.len()
            ),
        ));
    }
    let win = grid.window;
    let (h, w) = grid.original_size;
    let mut out = vec![T::default(); planes * h * w];
    for (t, data) in grid.tiles.iter().zip(tiles) {
        if data.len() != planes * win * win {
            return Err(Error::contract(
                "stitch",
                format!(
                    "tile ({}, {}) holds {} values, expected {}",
                    t.row,
                    t.col,
                    data.len(),
                    planes * win * win
                ),
            ));
        }
        let th = win.min(h.saturating_sub(t.y0));
        let tw = win.min(w.saturating_sub(t.x0));
        for p in 0..planes {
            for y in 0..th {
                let src = &data[(p * win + y) * win..][..tw];
                out[(p * h + t.y0 + y) * w + t.x0..][..tw].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Reflect-pads `image` (`C×H×W`) to multiples of `window` and cuts it into
/// non-overlapping `C×window×window` tiles, in grid order.
pub fn tile_image(image: &Tensor, window: usize) -> Result<(TileGrid, Vec<Tensor>)> {
    let (c, h, w) = image.dims3("tile_image")?;
    let grid = TileGrid::new(h, w, window)?;
    let padded = pad_planes(image.data(), c, (h, w), grid.padded_size);
    let tiles = grid
        .tiles
        .iter()
        .map(|t| {
            Tensor::new(
                [c, window, window],
                window_planes(&padded, c, grid.padded_size, t.y0, t.x0, (window, window)),
            )
        })
        .collect::<Result<_>>()?;
    Ok((grid, tiles))
}

pub fn tile_labels(map: &LabelMap, window: usize) -> Result<(TileGrid, Vec<LabelMap>)> {
    let grid = TileGrid::new(map.height(), map.width(), window)?;
    let padded = pad_planes(
        map.labels(),
        1,
        (map.height(), map.width()),
        grid.padded_size,
    );
    let tiles = grid
        .tiles
        .iter()
        .map(|t| {
            LabelMap::new(
                window,
                window,
                window_planes(&padded, 1, grid.padded_size, t.y0, t.x0, (window, window)),
            )
        })
        .collect::<Result<_>>()?;
    Ok((grid, tiles))
}

/// Inverse of [`tile_image`] for per-tile outputs with any leading channel
/// count; the result is cropped to the original size.
pub fn stitch_tensors(grid: &TileGrid, tiles: &[Tensor]) -> Result<Tensor> {
    let planes = match tiles.first() {
        Some(t) => t.dims3("stitch")?.0,
        None => return Err(Error::contract("stitch", "no tile outputs")),
    };
    for t in tiles {
        if t.shape() != [planes, grid.window, grid.window] {
            return Err(Error::contract(
                "stitch",
                format!(
                    "tile shape {:?}, expected {:?}",
                    t.shape(),
                    [planes, grid.window, grid.window]
                ),
            ));
        }
    }
    let slices: Vec<&[f32]> = tiles.iter().map(Tensor::data).collect();
    let (h, w) = grid.original_size;
    Tensor::new([planes, h, w], stitch_planes(grid, &slices, planes)?)
}

pub fn stitch_labels(grid: &TileGrid, tiles: &[LabelMap]) -> Result<LabelMap> {
    for t in tiles {
        if (t.height(), t.width()) != (grid.window, grid.window) {
            return Err(Error::contract(
                "stitch",
                format!(
                    "tile is {}×{}, window is {}",
                    t.height(),
                    t.width(),
                    grid.window
                ),
            ));
        }
    }
    let slices: Vec<&[u8]> = tiles.iter().map(LabelMap::labels).collect();
    let (h, w) = grid.original_size;
    LabelMap::new(w, h, stitch_planes(grid, &slices, 1)?)
}

/// Tiled prediction of one `C×H×W` image: logits `K×H×W` and label map.
/// Tiles are predicted independently and in parallel.
pub fn predict_tiled(model: &Model, image: &Tensor, window: usize) -> Result<(Tensor, LabelMap)> {
    let f = model.config().downsample_factor();
    if !window.is_multiple_of(f) {
        return Err(Error::Config(format!(
            "window {window} must be a multiple of the model's downsample factor {f}"
        )));
    }
    let (grid, tiles) = tile_image(image, window)?;
    let logits = par::map_slice(&tiles, |t| {
        let (c, h, w) = t.dims3("predict_tiled")?;
        let out = model.forward(&t.reshape([1, c, h, w])?)?;
        let k = out.shape()[1];
        out.reshape([k, h, w])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let logits = stitch_tensors(&grid, &logits)?;
    let labels = labels_from_logits(&logits)?;
    Ok((logits, labels))
}

/// Whole-image prediction, reflect-padding to the model's downsample factor.
pub fn predict_padded(model: &Model, image: &Tensor) -> Result<(Tensor, LabelMap)> {
    let (c, h, w) = image.dims3("predict")?;
    let f = model.config().downsample_factor();
    let (ph, pw) = (h.div_ceil(f) * f, w.div_ceil(f) * f);
    let padded = Tensor::new(
        [1, c, ph, pw],
        pad_planes(image.data(), c, (h, w), (ph, pw)),
    )?;
    let out = model.forward(&padded)?;
    let k = out.shape()[1];
    let logits = Tensor::new(
        [k, h, w],
        window_planes(out.data(), k, (ph, pw), 0, 0, (h, w)),
    )?;
    let labels = labels_from_logits(&logits)?;
    Ok((logits, labels))
}

fn labels_from_logits(logits: &Tensor) -> Result<LabelMap> {
    let (k, h, w) = logits.dims3("argmax")?;
    let mut maps = argmax_labels(&logits.reshape([1, k, h, w])?)?;
    Ok(maps.remove(0))
}

/// Confusion matrix and report of `model` over `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    excluded: &BTreeSet<usize>,
    scope: OaScope,
) -> Result<(ConfusionMatrix, MetricReport)> {
    let k = model.config().num_classes;
    let partials = par::map_slice(samples, |s| -> Result<ConfusionMatrix> {
        let (_, pred) = predict_padded(model, &s.image)?;
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &s.mask)?;
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new(k);
    for p in partials {
        cm.merge(&p?)?;
    }
    let report = compute_report(&cm, excluded, scope)?;
    Ok((cm, report))
}

/// Ramp stops from cold to hot.
const HEAT_STOPS: [[f32; 3]; 5] = [
    [0.0, 0.0, 255.0],
    [0.0, 255.0, 255.0],
    [0.0, 255.0, 0.0],
    [255.0, 255.0, 0.0],
    [255.0, 0.0, 0.0],
];

/// Blue (0) → cyan → green → yellow → red (1).
pub fn heat_color(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) * (HEAT_STOPS.len() - 1) as f32;
    let i = (t.floor() as usize).min(HEAT_STOPS.len() - 2);
    let f = t - i as f32;
    let (a, b) = (HEAT_STOPS[i], HEAT_STOPS[i + 1]);
    [0, 1, 2].map(|j| a[j] + (b[j] - a[j]) * f)
}

fn gray_levels(image: &Tensor) -> Result<(usize, usize, Vec<f32>)> {
    let (c, h, w) = image.dims3("heatmap_overlay")?;
    let used = c.min(3);
    let x = image.data();
    let gray = (0..h * w)
        .map(|p| {
            let s: f32 = (0..used).map(|ch| x[ch * h * w + p]).sum();
            (s / used as f32).clamp(0.0, 1.0) * 255.0
        })
        .collect();
    Ok((h, w, gray))
}

/// The grayscale rendering the overlay is blended onto.
pub fn base_rendering(image: &Tensor) -> Result<RgbImage> {
    let (h, w, gray) = gray_levels(image)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = gray[y as usize * w + x as usize].round() as u8;
        Rgb([g, g, g])
    }))
}

/// Min-max normalised logit plane of `class`, colour-mapped and alpha-blended
/// over the grayscale input. A constant plane normalises to all zeros (cold).
pub fn heatmap_overlay(
    logits: &Tensor,
    image: &Tensor,
    class: usize,
    alpha: f32,
) -> Result<RgbImage> {
    let (k, h, w) = logits.dims3("heatmap_overlay")?;
    let (ih, iw, gray) = gray_levels(image)?;
    if (ih, iw) != (h, w) {
        return Err(Error::contract(
            "heatmap_overlay",
            format!("logits are {h}×{w}, image is {ih}×{iw}"),
        ));
    }
    if class >= k {
        return Err(Error::contract(
            "heatmap_overlay",
            format!("class {class} out of range for {k} logit planes"),
        ));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(
            "heatmap_overlay",
            format!("alpha {alpha} outside [0, 1]"),
        ));
    }
    let plane = &logits.data()[class * h * w..][..h * w];
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let t = if span > 0.0 && span.is_finite() {
            (plane[p] - lo) / span
        } else {
            0.0
        };
        let heat = heat_color(t);
        let g = gray[p];
        Rgb(heat.map(|c| ((1.0 - alpha) * g + alpha * c).round().clamp(0.0, 255.0) as u8))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_division_grid() {
        let g = TileGrid::new(512, 512, 256).unwrap();
        let origins: Vec<_> = g.tiles.iter().map(|t| (t.y0, t.x0)).collect();
        assert_eq!(origins, [(0, 0), (0, 256), (256, 0), (256, 256)]);
        assert_eq!(TileGrid::new(256, 256, 256).unwrap().tiles.len(), 1);
        let odd = TileGrid::new(300, 300, 256).unwrap();
        assert_eq!(odd.padded_size, (512, 512));
        assert_eq!(odd.tiles.len(), 4);
    }

    #[test]
    fn stitch_inverts_tiling_with_crop() {
        let img = Tensor::from_fn([2, 7, 5], |i| i as f32);
        let (grid, tiles) = tile_image(&img, 4).unwrap();
        assert_eq!(grid.padded_size, (8, 8));
        assert_eq!(stitch_tensors(&grid, &tiles).unwrap(), img);
        assert!(stitch_tensors(&grid, &tiles[1..]).is_err());
    }

    #[test]
    fn heat_ramp_endpoints() {
        assert_eq!(heat_color(0.0), [0.0, 0.0, 255.0]);
        assert_eq!(heat_color(1.0), [255.0, 0.0, 0.0]);
        assert_eq!(heat_color(0.5), [0.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_alpha_is_the_base_rendering() {
        let img = Tensor::from_fn([3, 4, 4], |i| (i % 7) as f32 / 7.0);
        let logits = Tensor::from_fn([2, 4, 4], |i| i as f32);
        assert_eq!(
            heatmap_overlay(&logits, &img, 1, 0.0).unwrap(),
            base_rendering(&img).unwrap()
        );
    }

    #[test]
    fn constant_plane_is_uniformly_cold() {
        let img = Tensor::zeros([3, 3, 3]);
        let logits = Tensor::full([1, 3, 3], 2.5);
        let out = heatmap_overlay(&logits, &img, 0, 1.0).unwrap();
        assert!(out.pixels().all(|p| p.0 == [0, 0, 255]));
    }
}
