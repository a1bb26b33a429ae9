//! PNG reading and writing, contour files and image grids.
//!
//! Mask contours are stored as grayscale images where class `c` of `k` has
//! the value `round(255 * c / (k - 1))`; sketches are grayscale with edges
//! white.

use std::path::Path;

use idfuse_core::config::Modality;
use idfuse_core::data::{ContourCondition, ImageTensor};
use idfuse_core::resample::Filter;

use crate::error::{Error, Result};

pub fn load_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()))
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Displayable RGB version: RGB as is, one channel as gray, one-hot masks
/// as the grayscale class encoding.
pub fn to_rgb(img: &ImageTensor) -> ImageTensor {
    let k = img.channels();
    match k {
        3 => img.clone(),
        1 => ImageTensor::from_fn(3, img.height(), img.width(), |_, y, x| img.get(0, y, x)),
        _ => ImageTensor::from_fn(3, img.height(), img.width(), |_, y, x| {
            let class = (0..k)
                .max_by(|&a, &b| img.get(a, y, x).total_cmp(&img.get(b, y, x)))
                .unwrap_or(0);
            class as f32 / (k - 1) as f32
        }),
    }
}

pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (h, w) = (img.height(), img.width());
    let res = if img.channels() == 1 {
        let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_byte(img.get(0, y as usize, x as usize))])
        });
        buf.save(path)
    } else {
        let rgb = to_rgb(img);
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb(std::array::from_fn(|c| to_byte(rgb.get(c, y as usize, x as usize))))
        });
        buf.save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Read a contour file of the given modality.
pub fn load_contour(path: &Path, modality: Modality, mask_classes: usize) -> Result<ContourCondition> {
    let image = match modality {
        Modality::LowRes => load_rgb(path)?,
        Modality::Sketch => {
            let (h, w, g) = load_gray(path)?;
            ImageTensor::from_fn(1, h, w, |_, y, x| if g[y * w + x] >= 0.5 { 1.0 } else { 0.0 })
        }
        Modality::Mask => {
            let (h, w, g) = load_gray(path)?;
            let k = mask_classes;
            ImageTensor::from_fn(k, h, w, |c, y, x| {
                let class = (g[y * w + x] * (k - 1) as f32).round() as usize;
                if class.min(k - 1) == c {
                    1.0
                } else {
                    0.0
                }
            })
        }
    };
    if !image.is_square() {
        return Err(Error::format(
            path,
            format!("contour must be square, got {}x{}", image.width(), image.height()),
        ));
    }
    Ok(ContourCondition {
        modality,
        image,
        source_id: 0,
    })
}

/// Images side by side at height `side`; contours use nearest neighbour.
pub fn grid_row(images: &[&ImageTensor], side: usize) -> ImageTensor {
    let tiles: Vec<ImageTensor> = images
        .iter()
        .map(|im| {
            let filter = if im.channels() == 3 {
                Filter::Bicubic
            } else {
                Filter::Nearest
            };
            to_rgb(&im.resized(side, side, filter))
        })
        .collect();
    ImageTensor::from_fn(3, side, side * tiles.len(), |c, y, x| {
        tiles[x / side].get(c, y, x % side)
    })
}
