//! Grayscale heatmap images in binary PGM.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    /// `(min, max)` of the source grid, when rendered from one.
    source_range: Option<(f64, f64)>,
}

impl HeatmapImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Invalid(format!(
                "{width}×{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(HeatmapImage {
            width,
            height,
            pixels,
            source_range: None,
        })
    }

    /// Linearly rescales a grid for display: minimum → 0, maximum → 255. A
    /// constant grid renders mid-gray.
    pub fn from_grid(grid: &Matrix) -> Result<Self> {
        if !grid.is_finite() {
            return Err(Error::NonFinite("heatmap grid".into()));
        }
        let data = grid.data();
        let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pixels = if hi > lo {
            data.iter()
                .map(|v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect()
        } else {
            vec![128; data.len()]
        };
        let mut im = HeatmapImage::new(grid.cols(), grid.rows(), pixels)?;
        im.source_range = Some((lo, hi));
        Ok(im)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn source_range(&self) -> Option<(f64, f64)> {
        self.source_range
    }

    /// Places images left to right. All must share a height.
    pub fn montage(images: &[HeatmapImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Invalid("empty montage".into()))?;
        let height = first.height;
        if let Some(bad) = images.iter().find(|im| im.height != height) {
            return Err(Error::shape("montage", &[height], &[bad.height]));
        }
        let width: usize = images.iter().map(|im| im.width).sum();
        let mut pixels = Vec::with_capacity(width * height);
        for r in 0..height {
            for im in images {
                pixels.extend_from_slice(&im.pixels[r * im.width..(r + 1) * im.width]);
            }
        }
        HeatmapImage::new(width, height, pixels)
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("PGM: {why}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit images are supported"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let raster = bytes.get(pos + 1..).ok_or_else(|| bad("truncated header"))?;
        if raster.len() != width * height {
            return Err(bad(&format!(
                "expected {} pixel bytes, found {}",
                width * height,
                raster.len()
            )));
        }
        HeatmapImage::new(width, height, raster.to_vec())
    }
}

pub fn export_pgm(image: &HeatmapImage, path: &Path) -> Result<()> {
    fs::write(path, image.encode_pgm()).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<HeatmapImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    HeatmapImage::decode_pgm(&bytes)
}
