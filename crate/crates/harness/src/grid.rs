//! Side-by-side PNG panels of inputs, labels and predictions.

use std::io::Cursor;
use std::path::Path;

use advseg_core::attacks::{self, AttackSpec};
use advseg_core::data::{self, LabeledDataset};
use advseg_core::exec::Execution;
use advseg_core::fsutil::atomic_write;
use advseg_core::nn::SegModel;
use image::{GenericImage, GrayImage, ImageFormat, Rgb, RgbImage};

use crate::error::Result;

const GAP: u32 = 2;

fn png_error(path: &Path, e: image::ImageError) -> advseg_core::Error {
    advseg_core::Error::Image {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| png_error(path, e))?;
    Ok(atomic_write(path, buf.get_ref())?)
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| png_error(path, e))?;
    Ok(atomic_write(path, buf.get_ref())?)
}

/// Tiles equally sized rows of panels onto a white canvas.
pub fn tile(rows: &[Vec<RgbImage>]) -> RgbImage {
    let (tw, th) = rows
        .first()
        .and_then(|r| r.first())
        .map_or((1, 1), |t| (t.width(), t.height()));
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1) as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * tw + (cols + 1) * GAP,
        rows.len() as u32 * th + (rows.len() as u32 + 1) * GAP,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let x = GAP + c as u32 * (tw + GAP);
            let y = GAP + r as u32 * (th + GAP);
            canvas.copy_from(panel, x, y).expect("panel fits canvas");
        }
    }
    canvas
}

/// One row per image: input, ground truth, clean prediction, then for each
/// attack the perturbed input and the prediction on it.
pub fn prediction_rows(
    model: &SegModel,
    d: &LabeledDataset,
    count: usize,
    attacks: &[&AttackSpec],
    exec: Execution,
) -> Result<Vec<Vec<RgbImage>>> {
    let n = count.min(d.len());
    Ok(exec.map(n, |i| {
        let (img, mask) = (&d.images[i], &d.masks[i]);
        let mut row = vec![
            data::image_to_rgb8(img),
            data::mask_to_rgb8(mask),
            data::mask_to_rgb8(&model.predict(img)?),
        ];
        for spec in attacks {
            let adv = attacks::pgd_single(model, img, mask, spec, i as u64)?;
            row.push(data::image_to_rgb8(&adv));
            row.push(data::mask_to_rgb8(&model.predict(&adv)?));
        }
        Ok(row)
    })?)
}

pub fn save_prediction_grid(
    model: &SegModel,
    d: &LabeledDataset,
    count: usize,
    attacks: &[&AttackSpec],
    path: &Path,
    exec: Execution,
) -> Result<()> {
    let rows = prediction_rows(model, d, count, attacks, exec)?;
    save_rgb(&tile(&rows), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tile_places_panels_with_gaps() {
        let a = RgbImage::from_pixel(4, 3, Rgb([1, 2, 3]));
        let rows = vec![vec![a.clone(), a.clone()], vec![a.clone()]];
        let t = tile(&rows);
        assert_eq!((t.width(), t.height()), (2 * 4 + 3 * GAP, 2 * 3 + 3 * GAP));
        assert_eq!(t.get_pixel(GAP, GAP), &Rgb([1, 2, 3]));
        assert_eq!(t.get_pixel(0, 0), &Rgb([255, 255, 255]));
        assert_eq!(t.get_pixel(GAP + 4 + GAP, GAP + 3 + GAP), &Rgb([255, 255, 255]));
    }
}
