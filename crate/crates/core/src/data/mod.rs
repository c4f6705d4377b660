//! Label rasters, palettes, datasets and their on-disk layout.

mod augment;
mod raster;
mod synth;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

pub use augment::{
    augment, crop_at, random_crop, reflect_index, rotate90, translate, AugmentParams,
};
pub use raster::{
    decode_mask, encode_mask, load_raster, mask_from_rgb, mask_to_rgb, save_mask, save_raster,
};
pub use synth::{class_shape, synth_dataset, ShapeKind, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major raster of class indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::contract(
                "label_map",
                format!("{} labels cannot fill a {width}×{height} map", labels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self::new(width, height, vec![class; width * height]).expect("positive dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    /// Largest label, or 0 for an empty map.
    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Pixel count per class for classes `0..k`. Labels `>= k` are ignored.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        for &l in &self.labels {
            if (l as usize) < k {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    pub fn crop(&self, y0: usize, x0: usize, height: usize, width: usize) -> Result<Self> {
        if y0 + height > self.height || x0 + width > self.width {
            return Err(Error::contract(
                "crop",
                format!(
                    "window {height}×{width} at ({y0},{x0}) exceeds {}×{} map",
                    self.height, self.width
                ),
            ));
        }
        let labels = (y0..y0 + height)
            .flat_map(|y| self.labels[y * self.width + x0..][..width].iter().copied())
            .collect();
        Self::new(width, height, labels)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Ordered class list with display colours. Class `i` is `entries[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
    excluded: BTreeSet<usize>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.is_empty() || entries.len() > 256 {
            return Err(Error::Config(format!(
                "palette needs 1..=256 entries, got {}",
                entries.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.rgb) {
                return Err(Error::Config(format!(
                    "palette colour {:?} is used twice",
                    e.rgb
                )));
            }
        }
        Ok(Self {
            entries,
            excluded: BTreeSet::new(),
        })
    }

    /// The six ISPRS 2-D labelling classes in their customary colours.
    pub fn isprs() -> Self {
        let entries = [
            ("impervious_surfaces", [255, 255, 255]),
            ("building", [0, 0, 255]),
            ("low_vegetation", [0, 255, 255]),
            ("tree", [0, 255, 0]),
            ("car", [255, 255, 0]),
            ("clutter", [255, 0, 0]),
        ]
        .into_iter()
        .map(|(name, rgb)| PaletteEntry {
            name: name.to_string(),
            rgb,
        })
        .collect();
        Self::new(entries).expect("static palette is valid")
    }

    /// The first `k` classes of `self`.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.entries.len() {
            return Err(Error::Config(format!(
                "cannot take {k} classes from a palette of {}",
                self.entries.len()
            )));
        }
        let mut p = Self::new(self.entries[..k].to_vec())?;
        p.excluded = self.excluded.iter().copied().filter(|&c| c < k).collect();
        Ok(p)
    }

    /// Parses one class per line as `name r g b`; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = || {
                Error::Config(format!(
                    "palette line {}: expected `name r g b`, got {raw:?}",
                    no + 1
                ))
            };
            let [name, r, g, b] = parts[..] else {
                return Err(bad());
            };
            let mut rgb = [0u8; 3];
            for (slot, v) in rgb.iter_mut().zip([r, g, b]) {
                *slot = v.parse().map_err(|_| bad())?;
            }
            entries.push(PaletteEntry {
                name: name.to_string(),
                rgb,
            });
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.name, e.rgb[0], e.rgb[1], e.rgb[2]))
            .collect()
    }

    pub fn with_excluded(mut self, excluded: impl IntoIterator<Item = usize>) -> Self {
        self.excluded = excluded
            .into_iter()
            .filter(|&c| c < self.entries.len())
            .collect();
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    pub fn excluded(&self) -> &BTreeSet<usize> {
        &self.excluded
    }

    pub fn color(&self, class: u8) -> Option<[u8; 3]> {
        self.entries.get(class as usize).map(|e| e.rgb)
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.entries
            .iter()
            .position(|e| e.rgb == rgb)
            .map(|i| i as u8)
    }
}

impl Default for Palette {
    fn default() -> Self {
        Self::isprs()
    }
}

/// An image (`C×H×W`, values in `[0, 1]`) with its ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMap,
}

impl Sample {
    pub fn new(image: Tensor, mask: LabelMap) -> Result<Self> {
        let (_, h, w) = image.dims3("sample")?;
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::contract(
                "sample",
                format!(
                    "image is {h}×{w} but mask is {}×{}",
                    mask.height(),
                    mask.width()
                ),
            ));
        }
        Ok(Self { image, mask })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// File name of the dataset pair list inside a dataset directory.
pub const DATASET_MANIFEST: &str = "dataset.manifest";

/// Optional palette file stored next to the pair list.
pub const PALETTE_FILE: &str = "palette.txt";

/// The palette stored in dataset directory `dir`, or the ISPRS default.
pub fn dataset_palette(dir: &Path) -> Result<Palette> {
    let path = if dir.is_dir() {
        dir.join(PALETTE_FILE)
    } else {
        dir.parent().unwrap_or(Path::new(".")).join(PALETTE_FILE)
    };
    if !path.exists() {
        return Ok(Palette::isprs());
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Palette::from_text(&text)
}

/// Reads `(image_path, mask_path)` pairs, one per line, tab or whitespace
/// separated, `#` comments allowed. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = if line.contains('\t') {
            line.split('\t').map(str::trim).collect()
        } else {
            line.split_whitespace().collect()
        };
        let [img, mask] = parts[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected an image path and a mask path",
                path.display(),
                no + 1
            )));
        };
        pairs.push((base.join(img), base.join(mask)));
    }
    Ok(pairs)
}

/// Loads every pair listed in `dir/dataset.manifest` (or a manifest file path).
pub fn load_dataset(path: &Path, palette: &Palette) -> Result<Vec<Sample>> {
    let manifest = if path.is_dir() {
        path.join(DATASET_MANIFEST)
    } else {
        path.to_path_buf()
    };
    read_manifest(&manifest)?
        .into_iter()
        .map(|(img, mask)| Sample::new(load_raster(&img)?, decode_mask(&mask, palette)?))
        .collect()
}

/// Writes samples as `images/tile_NNNN.png`, `masks/tile_NNNN.png`, the
/// palette file and the pair list.
pub fn save_dataset(dir: &Path, samples: &[Sample], palette: &Palette) -> Result<()> {
    for sub in ["images", "masks"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let mut manifest = String::from("# image\tmask\n");
    for (i, s) in samples.iter().enumerate() {
        let img = format!("images/tile_{i:04}.png");
        let mask = format!("masks/tile_{i:04}.png");
        save_raster(&dir.join(&img), &s.image)?;
        save_mask(&dir.join(&mask), &s.mask, palette)?;
        manifest.push_str(&format!("{img}\t{mask}\n"));
    }
    let path = dir.join(PALETTE_FILE);
    fs::write(&path, palette.to_text()).map_err(|e| Error::io(path, e))?;
    let path = dir.join(DATASET_MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}
