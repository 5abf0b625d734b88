//! Static raster panels. One panel per case: the top row holds the input
//! image and the annotations, then one row per method holds its samples.
//! The left column carries each method's annotator-averaged cross-entropy
//! error map and the right column its γ-map.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, Luma, Rgb, RgbImage};

use crate::data::Case;
use crate::inference::{gamma_map, ScalarGrid, SampleSet};
use crate::labels::{Image, LabelMap};
use crate::metrics::ce_error_map;
use crate::{fsio, Error, Result};

/// Pixels between tiles.
pub const GAP: usize = 2;
const BACKGROUND: Rgb<u8> = Rgb([40, 40, 40]);

/// Geometry of a rendered panel, in tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelGrid {
    pub rows: usize,
    /// Columns including the error-map and γ-map columns.
    pub cols: usize,
    pub tile_height: usize,
    pub tile_width: usize,
}

impl PanelGrid {
    pub fn pixel_size(&self) -> (u32, u32) {
        let w = self.cols * self.tile_width + (self.cols + 1) * GAP;
        let h = self.rows * self.tile_height + (self.rows + 1) * GAP;
        (w as u32, h as u32)
    }

    /// Top-left pixel of tile `(row, col)`.
    pub fn origin(&self, row: usize, col: usize) -> (usize, usize) {
        (
            GAP + row * (self.tile_height + GAP),
            GAP + col * (self.tile_width + GAP),
        )
    }
}

/// Perceptually ordered black-red-yellow-white ramp on `[0, 1]`.
pub fn heat(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)])
}

/// Gray level of class `k` out of `classes`.
pub fn class_gray(k: u8, classes: usize) -> u8 {
    if classes < 2 {
        return 0;
    }
    ((k as usize).min(classes - 1) * 255 / (classes - 1)) as u8
}

/// Label map as an 8-bit grayscale PNG.
pub fn label_png(map: &LabelMap, classes: usize) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
        Luma([class_gray(map.get(y as usize, x as usize), classes)])
    });
    encode(&image::DynamicImage::ImageLuma8(buf))
}

fn encode(img: &image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::InvalidInput(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode(&image::DynamicImage::ImageRgb8(img.clone()))?)
}

struct Canvas {
    img: RgbImage,
    grid: PanelGrid,
    scale: usize,
}

impl Canvas {
    fn tile(&mut self, row: usize, col: usize, color: impl Fn(usize, usize) -> Rgb<u8>) {
        let (oy, ox) = self.grid.origin(row, col);
        for ty in 0..self.grid.tile_height {
            for tx in 0..self.grid.tile_width {
                let c = color(ty / self.scale, tx / self.scale);
                self.img.put_pixel((ox + tx) as u32, (oy + ty) as u32, c);
            }
        }
    }

    fn labels(&mut self, row: usize, col: usize, map: &LabelMap, classes: usize) {
        self.tile(row, col, |y, x| {
            let g = class_gray(map.get(y, x), classes);
            Rgb([g, g, g])
        });
    }

    /// Heat map normalized by its own maximum; an all-zero map is black.
    fn heat_map(&mut self, row: usize, col: usize, grid: &ScalarGrid) {
        let max = grid.max();
        let norm = if max > 0.0 { max } else { 1.0 };
        self.tile(row, col, |y, x| heat(grid.get(y, x) / norm));
    }

    fn image(&mut self, row: usize, col: usize, image: &Image) {
        let plane = &image.data[..image.height * image.width];
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let w = image.width;
        self.tile(row, col, |y, x| {
            let g = ((plane[y * w + x] - lo) / span * 255.0).round() as u8;
            Rgb([g, g, g])
        });
    }
}

/// Pixelwise mean of the cross-entropy error maps over annotations.
pub fn average_error_map(ss: &SampleSet, annotations: &[LabelMap]) -> Result<ScalarGrid> {
    if annotations.is_empty() {
        return Err(Error::InvalidInput("error map needs at least one annotation".into()));
    }
    let mut acc = vec![0.0; ss.pixels()];
    for y in annotations {
        for (a, v) in acc.iter_mut().zip(ce_error_map(ss, y)?.values) {
            *a += v;
        }
    }
    let m = annotations.len() as f64;
    ScalarGrid::new(ss.height, ss.width, acc.into_iter().map(|v| v / m).collect())
}

/// Renders the panel of one case. `rows` pairs method names with their
/// sample sets; each row shows its first `tiles` samples.
pub fn render_panel(case: &Case, rows: &[(String, SampleSet)], classes: usize, tiles: usize, scale: usize) -> Result<RgbImage> {
    if tiles < 1 || scale < 1 {
        return Err(Error::InvalidConfig("tiles and scale must be at least 1".into()));
    }
    let (h, w) = (case.image.height, case.image.width);
    for (name, ss) in rows {
        if (ss.height, ss.width) != (h, w) {
            return Err(Error::DimensionMismatch(format!(
                "samples of {name} for {} are {}x{}, the image is {h}x{w}",
                case.id, ss.height, ss.width
            )));
        }
    }
    let grid = PanelGrid {
        rows: 1 + rows.len(),
        cols: 2 + tiles.max(case.annotations.len()),
        tile_height: h * scale,
        tile_width: w * scale,
    };
    let (pw, ph) = grid.pixel_size();
    let mut canvas = Canvas {
        img: RgbImage::from_pixel(pw, ph, BACKGROUND),
        grid,
        scale,
    };
    canvas.image(0, 0, &case.image);
    for (j, ann) in case.annotations.iter().enumerate() {
        canvas.labels(0, 1 + j, ann, classes);
    }
    for (r, (_, ss)) in rows.iter().enumerate() {
        canvas.heat_map(1 + r, 0, &average_error_map(ss, &case.annotations)?);
        for j in 0..tiles.min(ss.len()) {
            canvas.labels(1 + r, 1 + j, &ss.labels[j], classes);
        }
        canvas.heat_map(1 + r, grid.cols - 1, &gamma_map(ss));
    }
    Ok(canvas.img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_endpoints() {
        assert_eq!(heat(0.0), Rgb([0, 0, 0]));
        assert_eq!(heat(1.0), Rgb([255, 255, 255]));
        assert_eq!(heat(f64::NAN), Rgb([0, 0, 0]));
    }

    #[test]
    fn grid_size() {
        let g = PanelGrid {
            rows: 2,
            cols: 4,
            tile_height: 8,
            tile_width: 10,
        };
        assert_eq!(g.pixel_size(), (4 * 10 + 5 * GAP as u32, 2 * 8 + 3 * GAP as u32));
        assert_eq!(g.origin(1, 3), (GAP + 8 + GAP, GAP + 3 * (10 + GAP)));
    }
}
