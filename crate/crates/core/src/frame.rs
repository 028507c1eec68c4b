//! Grayscale frames, axis-aligned boxes, and search-patch extraction.
//!
//! Pixel value convention: a pixel at integer index `k` covers the interval
//! `[k, k+1)` and its center sits at `k + 0.5`. Bilinear sampling clamps
//! coordinates to the frame, which replicates edge pixels for regions that
//! extend past the border.

use crate::error::{Error, Result};
use crate::signal::SpatialMap;

/// A single grayscale frame with values in `[0, 1]`, row-major.
#[derive(Debug, Clone)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "frame must be nonempty, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "expected {} pixels for a {width}x{height} frame, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "frame must be nonempty");
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    /// Bilinear sample at a continuous coordinate, clamping to the frame so
    /// out-of-bounds reads replicate the nearest edge pixel.
    pub fn sample_clamped(&self, x: f64, y: f64) -> f64 {
        let u = x - 0.5;
        let v = y - 0.5;
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;

        let clamp_x = |i: f64| (i.max(0.0) as usize).min(self.width - 1);
        let clamp_y = |i: f64| (i.max(0.0) as usize).min(self.height - 1);
        let (x0i, x1i) = (clamp_x(x0), clamp_x(x0 + 1.0));
        let (y0i, y1i) = (clamp_y(y0), clamp_y(y0 + 1.0));

        let top = self.pixel(x0i, y0i) * (1.0 - fx) + self.pixel(x1i, y0i) * fx;
        let bottom = self.pixel(x0i, y1i) * (1.0 - fx) + self.pixel(x1i, y1i) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Extracts a region of `size_px` pixels centered at `center` and
    /// resamples it to an `out x out` patch. Errors when the region has no
    /// overlap with the frame at all.
    ///
    /// Downscaling averages a supersampled grid over each output pixel's
    /// source footprint, which keeps the extraction scale-equivariant:
    /// extracting content scaled by `a` with a region scaled by `a`
    /// reproduces the original patch.
    pub fn extract_patch(&self, center: (f64, f64), size_px: (f64, f64), out: usize) -> Result<SpatialMap> {
        if out == 0 {
            return Err(Error::Parameter("patch output size must be positive".into()));
        }
        if !(size_px.0 > 0.0 && size_px.1 > 0.0) {
            return Err(Error::Parameter(format!(
                "patch source size must be positive, got {size_px:?}"
            )));
        }
        let half = (size_px.0 / 2.0, size_px.1 / 2.0);
        if center.0 + half.0 <= 0.0
            || center.1 + half.1 <= 0.0
            || center.0 - half.0 >= self.width as f64
            || center.1 - half.1 >= self.height as f64
        {
            return Err(Error::OutOfFrame(format!(
                "patch centered at {center:?} with size {size_px:?} misses a {}x{} frame",
                self.width, self.height
            )));
        }
        let sub_x = (size_px.0 / out as f64).ceil().max(1.0) as usize;
        let sub_y = (size_px.1 / out as f64).ceil().max(1.0) as usize;
        let mut patch = SpatialMap::zeros(out, out);
        for j in 0..out {
            for i in 0..out {
                let mut acc = 0.0;
                for sj in 0..sub_y {
                    let fy = (j as f64 + (sj as f64 + 0.5) / sub_y as f64) / out as f64 - 0.5;
                    let sy = center.1 + fy * size_px.1;
                    for si in 0..sub_x {
                        let fx = (i as f64 + (si as f64 + 0.5) / sub_x as f64) / out as f64 - 0.5;
                        let sx = center.0 + fx * size_px.0;
                        acc += self.sample_clamped(sx, sy);
                    }
                }
                patch.set(i, j, acc / (sub_x * sub_y) as f64);
            }
        }
        Ok(patch)
    }
}

/// Axis-aligned bounding box `(x, y, w, h)` in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(center: (f64, f64), w: f64, h: f64) -> Self {
        Self { x: center.0 - w / 2.0, y: center.1 - h / 2.0, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// True when the box has positive overlap with a `w x h` frame.
    pub fn intersects_frame(&self, frame_w: usize, frame_h: usize) -> bool {
        self.x < frame_w as f64 && self.y < frame_h as f64 && self.x + self.w > 0.0 && self.y + self.h > 0.0
    }
}
