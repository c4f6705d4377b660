use std::collections::BTreeMap;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat, RgbImage, RgbaImage};

use super::{LabelMap, Palette};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn open(path: &Path) -> Result<DynamicImage> {
    let img_err = |source| Error::Image {
        path: path.to_path_buf(),
        source,
    };
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(img_err)
}

/// Reads an 8-bit RGB or RGBA PNG as a `C×H×W` tensor scaled by 1/255.
pub fn load_raster(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img.color() {
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        ColorType::Rgba8 => (4, img.into_rgba8().into_raw()),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit RGB or RGBA, found {other:?}",
                path.display()
            )))
        }
    };
    let mut data = vec![0f32; channels * h * w];
    for (p, px) in bytes.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            data[c * h * w + p] = b as f32 / 255.0;
        }
    }
    Tensor::new([channels, h, w], data)
}

/// Writes a 3- or 4-channel `C×H×W` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_raster(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3("save_raster")?;
    if c != 3 && c != 4 {
        return Err(Error::contract(
            "save_raster",
            format!("need 3 or 4 channels, got {c}"),
        ));
    }
    let d = image.data();
    let mut bytes = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            bytes.push((d[ch * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let (wu, hu) = (w as u32, h as u32);
    let result = if c == 3 {
        RgbImage::from_raw(wu, hu, bytes)
            .expect("sized buffer")
            .save_with_format(path, ImageFormat::Png)
    } else {
        RgbaImage::from_raw(wu, hu, bytes)
            .expect("sized buffer")
            .save_with_format(path, ImageFormat::Png)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Maps each pixel to the palette class with exactly that colour. Unknown
/// colours are reported together with how many pixels carry them.
pub fn mask_from_rgb(img: &RgbImage, palette: &Palette) -> Result<LabelMap> {
    let mut labels = Vec::with_capacity(img.as_raw().len() / 3);
    let mut unknown: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for px in img.pixels() {
        match palette.class_of(px.0) {
            Some(c) => labels.push(c),
            None => {
                *unknown.entry(px.0).or_default() += 1;
                labels.push(0);
            }
        }
    }
    if !unknown.is_empty() {
        let listing: Vec<String> = unknown
            .iter()
            .map(|(rgb, n)| format!("rgb({},{},{}) × {n} px", rgb[0], rgb[1], rgb[2]))
            .collect();
        return Err(Error::Data(format!(
            "mask contains colours outside the palette: {}",
            listing.join(", ")
        )));
    }
    LabelMap::new(img.width() as usize, img.height() as usize, labels)
}

pub fn mask_to_rgb(mask: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut bytes = Vec::with_capacity(mask.labels().len() * 3);
    for (i, &l) in mask.labels().iter().enumerate() {
        let rgb = palette.color(l).ok_or_else(|| {
            Error::Data(format!(
                "label {l} at pixel ({}, {}) has no palette colour",
                i / mask.width(),
                i % mask.width()
            ))
        })?;
        bytes.extend_from_slice(&rgb);
    }
    Ok(RgbImage::from_raw(mask.width() as u32, mask.height() as u32, bytes).expect("sized buffer"))
}

pub fn decode_mask(path: &Path, palette: &Palette) -> Result<LabelMap> {
    let img = open(path)?;
    let rgb = match img.color() {
        ColorType::Rgb8 | ColorType::Rgba8 => img.into_rgb8(),
        other => {
            return Err(Error::Data(format!(
                "{}: expected 8-bit RGB mask, found {other:?}",
                path.display()
            )))
        }
    };
    mask_from_rgb(&rgb, palette).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_mask(mask: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    mask_to_rgb(mask, palette)
}

pub fn save_mask(path: &Path, mask: &LabelMap, palette: &Palette) -> Result<()> {
    mask_to_rgb(mask, palette)?
        .save_with_format(path, ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
