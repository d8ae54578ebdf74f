//! Series-to-image transformation: a polyline plot on a blank canvas.
//!
//! The canvas has no axes or ticks. Each series is min–max scaled into the
//! vertical band `[pad, H-1-pad]`, larger values towards the top, and
//! consecutive samples are joined by integer line segments.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dataset::TimeSeries;
use crate::error::{Error, Result};
use crate::seed::ContentHasher;
use crate::tensor::ImageTensor;

/// Input statistics of the ImageNet-pretrained backbone family.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterStyle {
    pub width: usize,
    pub height: usize,
    pub line_thickness: usize,
    pub pad_fraction: f64,
    pub antialias: bool,
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            line_thickness: 1,
            pad_fraction: 0.05,
            antialias: false,
        }
    }
}

impl RasterStyle {
    pub fn with_size(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!(
                "raster size {}x{} below the 8x8 minimum",
                self.width, self.height
            )));
        }
        if !(0.0..0.5).contains(&self.pad_fraction) {
            return Err(Error::Config(format!(
                "pad fraction {} outside [0, 0.5)",
                self.pad_fraction
            )));
        }
        if self.line_thickness == 0 {
            return Err(Error::Config("line thickness must be positive".into()));
        }
        Ok(())
    }

    /// Stable key identifying this style in cache file names.
    pub fn cache_key(&self) -> String {
        ContentHasher::new()
            .str("raster-style")
            .u64(self.width as u64)
            .u64(self.height as u64)
            .u64(self.line_thickness as u64)
            .f64(self.pad_fraction)
            .u64(self.antialias as u64)
            .hex()
    }

    fn pad_pixels(&self) -> f64 {
        (self.pad_fraction * self.height as f64).round()
    }
}

/// Canvas column of sample `i` in a series of length `len`.
pub fn column_of(i: usize, len: usize, width: usize) -> usize {
    ((i as f64) * (width as f64 - 1.0) / (len as f64 - 1.0)).round() as usize
}

/// Maps every sample to its (column, row) pixel centre.
fn project(series: &TimeSeries, style: &RasterStyle) -> Vec<(f64, f64)> {
    let len = series.len();
    let (lo, hi) = series
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let h = style.height as f64;
    let top = style.pad_pixels();
    let bottom = h - 1.0 - top;
    let range = (hi - lo) as f64;
    series
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = column_of(i, len, style.width) as f64;
            let y = if range > 0.0 {
                bottom - (v - lo) as f64 / range * (bottom - top)
            } else {
                (h - 1.0) / 2.0
            };
            (x, y)
        })
        .collect()
}

/// Renders `series` into a single-channel image: 1.0 on the line, 0.0 elsewhere
/// (or coverage in `[0, 1]` when anti-aliasing).
pub fn rasterize(series: &TimeSeries, style: &RasterStyle) -> Result<ImageTensor> {
    series.validate()?;
    style.validate()?;
    let mut canvas = Canvas::new(style.width, style.height);
    let points = project(series, style);
    if style.antialias {
        for w in points.windows(2) {
            canvas.wu_line(w[0], w[1], style.line_thickness);
        }
    } else {
        let pts: Vec<(i64, i64)> = points
            .iter()
            .map(|&(x, y)| (x as i64, y.round() as i64))
            .collect();
        for w in pts.windows(2) {
            canvas.bresenham(w[0], w[1], style.line_thickness);
        }
    }
    Ok(ImageTensor {
        channels: 1,
        height: style.height,
        width: style.width,
        data: canvas.pixels,
    })
}

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Square brush of side `thickness`, centred (biased up-left for even sizes).
    fn stamp(&mut self, x: i64, y: i64, thickness: usize, value: f32) {
        let t = thickness as i64;
        let off = (t - 1) / 2;
        for yy in (y - off)..(y - off + t) {
            for xx in (x - off)..(x - off + t) {
                if xx >= 0 && yy >= 0 && (xx as usize) < self.width && (yy as usize) < self.height {
                    let i = yy as usize * self.width + xx as usize;
                    if self.pixels[i] < value {
                        self.pixels[i] = value;
                    }
                }
            }
        }
    }

    fn bresenham(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), thickness: usize) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.stamp(x, y, thickness, 1.0);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Xiaolin Wu's anti-aliased line; coverage is max-combined.
    fn wu_line(&mut self, (mut x0, mut y0): (f64, f64), (mut x1, mut y1): (f64, f64), thickness: usize) {
        let steep = (y1 - y0).abs() > (x1 - x0).abs();
        if steep {
            std::mem::swap(&mut x0, &mut y0);
            std::mem::swap(&mut x1, &mut y1);
        }
        if x0 > x1 {
            std::mem::swap(&mut x0, &mut x1);
            std::mem::swap(&mut y0, &mut y1);
        }
        let dx = x1 - x0;
        let gradient = if dx == 0.0 { 1.0 } else { (y1 - y0) / dx };
        let mut plot = |a: i64, b: i64, c: f64| {
            let (x, y) = if steep { (b, a) } else { (a, b) };
            self.stamp(x, y, thickness, c.clamp(0.0, 1.0) as f32);
        };
        // Endpoints lie on pixel centres horizontally, so no end-gap weighting.
        let xs = x0.round() as i64;
        let xe = x1.round() as i64;
        let mut y = y0 + gradient * (xs as f64 - x0);
        for x in xs..=xe {
            let base = y.floor();
            let frac = y - base;
            plot(x, base as i64, 1.0 - frac);
            plot(x, base as i64 + 1, frac);
            y += gradient;
        }
    }
}

/// Maps a raw raster to backbone input: black ink on white, replicated to three
/// channels, then normalized per channel by `(x - mean) / std`.
pub fn preprocess(image: &ImageTensor, mean: [f32; 3], std: [f32; 3]) -> Result<ImageTensor> {
    if image.channels != 1 {
        return Err(Error::Shape(format!(
            "preprocess expects a 1-channel raster, got {} channels",
            image.channels
        )));
    }
    if let Some(c) = std.iter().position(|&s| s == 0.0) {
        return Err(Error::Config(format!("std component {c} is zero")));
    }
    let plane = image.height * image.width;
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        data.extend(image.data.iter().map(|&v| ((1.0 - v) - mean[c]) / std[c]));
    }
    Ok(ImageTensor {
        channels: 3,
        height: image.height,
        width: image.width,
        data,
    })
}

/// `rasterize` followed by `preprocess` with the ImageNet statistics.
pub fn render_input(series: &TimeSeries, style: &RasterStyle) -> Result<ImageTensor> {
    preprocess(&rasterize(series, style)?, IMAGENET_MEAN, IMAGENET_STD)
}

/// Writes a plane as binary PGM (P5, maxval 255), mapping `lo..=hi` to 0..=255.
pub fn write_pgm(path: &Path, width: usize, height: usize, plane: &[f32], lo: f32, hi: f32) -> Result<()> {
    if plane.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm plane has {} pixels, expected {}x{}",
            plane.len(),
            width,
            height
        )));
    }
    let mut out = Vec::with_capacity(plane.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n").expect("write to vec");
    let span = hi - lo;
    out.extend(plane.iter().map(|&v| {
        if span > 0.0 {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        } else {
            0
        }
    }));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Debug dump of a raw raster as a dark line on a white background.
pub fn write_raster_pgm(path: &Path, image: &ImageTensor) -> Result<()> {
    let inverted: Vec<f32> = image.plane(0).iter().map(|v| 1.0 - v).collect();
    write_pgm(path, image.width, image.height, &inverted, 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::circular_shift;
    use proptest::prelude::*;

    fn series(values: &[f32]) -> TimeSeries {
        TimeSeries::new(values.to_vec(), "t", 0).unwrap()
    }

    fn foreground_rows(img: &ImageTensor) -> Vec<usize> {
        (0..img.height)
            .filter(|&y| (0..img.width).any(|x| img.get(0, y, x) > 0.0))
            .collect()
    }

    #[test]
    fn constant_series_is_one_mid_row() {
        let img = rasterize(&series(&[5.0, 5.0, 5.0]), &RasterStyle::default()).unwrap();
        assert_eq!(img.shape(), (1, 480, 640));
        assert_eq!(foreground_rows(&img), vec![240]);
        assert!((0..640).all(|x| img.get(0, 240, x) == 1.0));
    }

    #[test]
    fn rising_segment_is_connected_staircase() {
        let style = RasterStyle::default();
        let img = rasterize(&series(&[0.0, 1.0]), &style).unwrap();
        let pad = 24;
        assert_eq!(img.get(0, 479 - pad, 0), 1.0);
        assert_eq!(img.get(0, pad, 639), 1.0);
        let mut prev_top = usize::MAX;
        for x in 0..640 {
            let rows: Vec<_> = (0..480).filter(|&y| img.get(0, y, x) > 0.0).collect();
            assert!(!rows.is_empty(), "column {x} empty");
            assert!(rows[0] <= prev_top, "not monotone at column {x}");
            prev_top = rows[0];
        }
        assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn long_series_fills_every_column() {
        let s: Vec<f32> = (0..2709).map(|i| (i as f32 * 0.01).sin()).collect();
        let img = rasterize(&series(&s), &RasterStyle::default()).unwrap();
        for x in 0..640 {
            assert!((0..480).any(|y| img.get(0, y, x) > 0.0));
        }
    }

    #[test]
    fn ucr_length_series_has_default_shape() {
        let s: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let img = rasterize(&series(&s), &RasterStyle::default()).unwrap();
        assert_eq!(img.shape(), (1, 480, 640));
    }

    #[test]
    fn thickness_widens_the_line() {
        let style = RasterStyle {
            line_thickness: 3,
            ..RasterStyle::with_size(32, 24)
        };
        let img = rasterize(&series(&[1.0, 1.0]), &style).unwrap();
        assert_eq!(foreground_rows(&img).len(), 3);
    }

    #[test]
    fn antialiased_values_are_coverage() {
        let style = RasterStyle {
            antialias: true,
            ..RasterStyle::with_size(64, 48)
        };
        let img = rasterize(&series(&[0.0, 0.3, 1.0, 0.2]), &style).unwrap();
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(img.data.iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = TimeSeries {
            values: vec![1.0],
            label: None,
            dataset_id: "t".into(),
            sample_id: 0,
        };
        assert!(rasterize(&s, &RasterStyle::default()).is_err());
        let s = TimeSeries {
            values: vec![1.0, f32::NAN],
            ..s
        };
        assert!(rasterize(&s, &RasterStyle::default()).is_err());
        assert!(RasterStyle::with_size(4, 4).validate().is_err());
        let style = RasterStyle {
            pad_fraction: 0.5,
            ..RasterStyle::default()
        };
        assert!(style.validate().is_err());
    }

    #[test]
    fn preprocess_constants() {
        let blank = ImageTensor::zeros(1, 2, 2);
        let out = preprocess(&blank, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(out.shape(), (3, 2, 2));
        assert!(out.data.iter().all(|&v| v == 1.0));

        let out = preprocess(&blank, IMAGENET_MEAN, IMAGENET_STD).unwrap();
        let expected = (1.0 - 0.485) / 0.229;
        assert!(out.plane(0).iter().all(|&v| v == expected));

        assert!(preprocess(&blank, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
        assert!(preprocess(&out, IMAGENET_MEAN, IMAGENET_STD).is_err());
    }

    #[test]
    fn preprocess_inverts_ink() {
        let mut img = ImageTensor::zeros(1, 1, 2);
        img.data[1] = 1.0;
        let out = preprocess(&img, [0.0; 3], [1.0; 3]).unwrap();
        assert_eq!(out.plane(2), &[1.0, 0.0]);
    }

    #[test]
    fn pgm_header_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = rasterize(&series(&[0.0, 1.0, 0.0]), &RasterStyle::with_size(16, 12)).unwrap();
        write_raster_pgm(&p, &img).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n16 12\n255\n"));
        assert_eq!(bytes.len(), "P5\n16 12\n255\n".len() + 16 * 12);
    }

    #[test]
    fn style_key_tracks_every_field() {
        let a = RasterStyle::default();
        let b = RasterStyle {
            antialias: true,
            ..a
        };
        assert_ne!(a.cache_key(), b.cache_key());
        assert_eq!(a.cache_key(), RasterStyle::default().cache_key());
    }

    fn roll_columns(img: &ImageTensor, s: usize) -> ImageTensor {
        let mut out = img.clone();
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(0, y, (x + s) % img.width, img.get(0, y, x));
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn affine_invariant(values in prop::collection::vec(-10f32..10.0, 2..50), a in 0.5f32..4.0, b in -5f32..5.0) {
            let style = RasterStyle::with_size(64, 48);
            let x = series(&values);
            let y = series(&values.iter().map(|v| a * v + b).collect::<Vec<_>>());
            // Exact equality only holds when the affine map does not perturb
            // the relative positions through rounding, so compare row maps
            // with a one-pixel tolerance on each sample.
            let px = project(&x, &style);
            let py = project(&y, &style);
            for (p, q) in px.iter().zip(&py) {
                prop_assert_eq!(p.0, q.0);
                prop_assert!((p.1 - q.1).abs() < 1e-3);
            }
        }

        #[test]
        fn power_of_two_scaling_is_bit_identical(values in prop::collection::vec(-10f32..10.0, 2..50), k in 0i32..4) {
            let style = RasterStyle::with_size(64, 48);
            let a = 2f32.powi(k);
            let x = series(&values);
            let y = series(&values.iter().map(|v| a * v).collect::<Vec<_>>());
            prop_assert_eq!(rasterize(&x, &style).unwrap(), rasterize(&y, &style).unwrap());
        }

        #[test]
        fn shift_moves_columns(values in prop::collection::vec(-10f32..10.0, 32), s in 1usize..32) {
            let style = RasterStyle::with_size(32, 24);
            let x = series(&values);
            let a = roll_columns(&rasterize(&x, &style).unwrap(), s);
            let b = rasterize(&circular_shift(&x, s), &style).unwrap();
            // Segments touching the seam differ: s-1..s in the shifted image,
            // 31..0 in the rolled one.
            let wrap = [(s + 31) % 32, s, 31, 0];
            for y in 0..24 {
                for col in (0..32).filter(|c| !wrap.contains(c)) {
                    prop_assert_eq!(a.get(0, y, col), b.get(0, y, col));
                }
            }
        }

        #[test]
        fn deterministic(values in prop::collection::vec(-10f32..10.0, 2..50)) {
            let style = RasterStyle::with_size(40, 30);
            let x = series(&values);
            prop_assert_eq!(rasterize(&x, &style).unwrap(), rasterize(&x, &style).unwrap());
        }
    }
}
