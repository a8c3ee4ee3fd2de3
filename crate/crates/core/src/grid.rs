//! Metric BEV feature grids, per-camera perspective feature maps, and
//! bilinear sampling over both.
//!
//! Cell `(row, col)` of a BEV grid covers
//! `[x_min + col*voxel, x_min + (col+1)*voxel] x [y_min + row*voxel, ...]`
//! and its feature lives at the cell center. Points inside the metric extent
//! but outside the lattice of cell centers replicate the border cells; points
//! outside the extent sample to exact zeros.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    ImgBev,
    RadBev,
}

impl GridKind {
    pub const ALL: [GridKind; 2] = [GridKind::ImgBev, GridKind::RadBev];

    pub fn index(self) -> usize {
        match self {
            GridKind::ImgBev => 0,
            GridKind::RadBev => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GridKind::ImgBev => "img_bev",
            GridKind::RadBev => "rad_bev",
        }
    }
}

/// Metric layout of a BEV grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub voxel: f64,
}

impl GridConfig {
    /// Square grid covering `[-extent, extent]` on both axes.
    pub fn square(extent: f64, voxel: f64) -> Self {
        Self {
            x_min: -extent,
            x_max: extent,
            y_min: -extent,
            y_max: extent,
            voxel,
        }
    }

    /// `(height, width)` in cells. The extent must be an exact multiple of
    /// the voxel size on both axes.
    pub fn dims(&self) -> Result<(usize, usize)> {
        if !(self.voxel > 0.0) || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::Config(format!("degenerate grid layout {self:?}")));
        }
        let exact = |span: f64| -> Result<usize> {
            let cells = span / self.voxel;
            let rounded = cells.round();
            if (cells - rounded).abs() > 1e-9 * cells.max(1.0) || rounded < 1.0 {
                return Err(Error::Config(format!(
                    "extent {span} m is not a whole number of {} m voxels",
                    self.voxel
                )));
            }
            Ok(rounded as usize)
        };
        Ok((exact(self.y_max - self.y_min)?, exact(self.x_max - self.x_min)?))
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            self.x_min + (col as f64 + 0.5) * self.voxel,
            self.y_min + (row as f64 + 0.5) * self.voxel,
        ]
    }

    /// Cell containing `(x, y)`; the max edges belong to the last cell.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.contains(x, y) {
            return None;
        }
        let (h, w) = self.dims().ok()?;
        let col = (((x - self.x_min) / self.voxel).floor() as usize).min(w - 1);
        let row = (((y - self.y_min) / self.voxel).floor() as usize).min(h - 1);
        Some((row, col))
    }
}

/// Dense `H x W x d` BEV feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    pub config: GridConfig,
    pub kind: GridKind,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureGrid<T> {
    pub fn zeros(config: GridConfig, kind: GridKind, channels: usize) -> Result<Self> {
        let (height, width) = config.dims()?;
        Ok(Self {
            config,
            kind,
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Bilinear sample at metric point `p`; zero outside the extent.
    pub fn sample(&self, p: [T; 2]) -> Vec<T> {
        bilinear_sample(self, p)
    }

    pub fn cast<U: Real>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            config: self.config,
            kind: self.kind,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    /// Writes a JSON header, a blank line, then the cells as little-endian f32.
    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "format": "feature-grid",
            "version": 1,
            "dtype": "f32",
            "kind": self.kind,
            "shape": [self.height, self.width, self.channels],
            "extent": self.config,
        });
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(serde_json::to_string(&header)?.as_bytes())?;
        file.write_all(b"\n\n")?;
        for v in &self.data {
            file.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }
}

/// One camera's perspective-view feature map. Feature cell `(r, c)` sits at
/// pixel `((c + 0.5) * downsample, (r + 0.5) * downsample)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PvFeatureMap<T> {
    pub camera: usize,
    pub downsample: f64,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> PvFeatureMap<T> {
    pub fn zeros(
        camera: usize,
        height: usize,
        width: usize,
        channels: usize,
        downsample: f64,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config("perspective feature map needs at least one cell".into()));
        }
        Ok(Self {
            camera,
            downsample,
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Bilinear sample at pixel `(u, v)`; zero outside the image.
    pub fn sample_pixel(&self, u: T, v: T) -> Vec<T> {
        let ds = T::of(self.downsample);
        let w_px = T::of_usize(self.width) * ds;
        let h_px = T::of_usize(self.height) * ds;
        if !(u >= T::zero() && v >= T::zero() && u <= w_px && v <= h_px) {
            return vec![T::zero(); self.channels];
        }
        let half = T::of(0.5);
        interpolate(
            &self.data,
            self.height,
            self.width,
            self.channels,
            u / ds - half,
            v / ds - half,
        )
    }
}

/// The four `(row, col, weight)` taps used to sample `p`, or `None` outside
/// the extent. Weights are nonnegative and sum to one.
pub fn bilinear_taps<T: Real>(grid: &FeatureGrid<T>, p: [T; 2]) -> Option<[(usize, usize, T); 4]> {
    let cfg = &grid.config;
    let (x, y) = (p[0], p[1]);
    if !(x >= T::of(cfg.x_min) && x <= T::of(cfg.x_max) && y >= T::of(cfg.y_min) && y <= T::of(cfg.y_max)) {
        return None;
    }
    let voxel = T::of(cfg.voxel);
    let half = T::of(0.5);
    let fx = (x - T::of(cfg.x_min)) / voxel - half;
    let fy = (y - T::of(cfg.y_min)) / voxel - half;
    Some(taps(grid.height, grid.width, fx, fy))
}

/// Samples the grid at a metric 2D point: bilinear interpolation of the four
/// surrounding cell centers, zero vector outside the extent.
pub fn bilinear_sample<T: Real>(grid: &FeatureGrid<T>, p: [T; 2]) -> Vec<T> {
    match bilinear_taps(grid, p) {
        None => vec![T::zero(); grid.channels],
        Some(t) => gather(&grid.data, grid.width, grid.channels, &t),
    }
}

fn taps<T: Real>(height: usize, width: usize, fx: T, fy: T) -> [(usize, usize, T); 4] {
    let axis = |f: T, n: usize| -> (usize, usize, T) {
        let last = T::of_usize(n - 1);
        let f = f.max(T::zero()).min(last);
        if n == 1 {
            return (0, 0, T::zero());
        }
        let i0 = f.floor().to_usize().unwrap_or(0).min(n - 2);
        (i0, i0 + 1, f - T::of_usize(i0))
    };
    let (c0, c1, tx) = axis(fx, width);
    let (r0, r1, ty) = axis(fy, height);
    let one = T::one();
    [
        (r0, c0, (one - tx) * (one - ty)),
        (r0, c1, tx * (one - ty)),
        (r1, c0, (one - tx) * ty),
        (r1, c1, tx * ty),
    ]
}

fn gather<T: Real>(data: &[T], width: usize, channels: usize, taps: &[(usize, usize, T); 4]) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for &(r, c, w) in taps {
        if w == T::zero() {
            continue;
        }
        let start = (r * width + c) * channels;
        crate::kernel::axpy(w, &data[start..start + channels], &mut out);
    }
    out
}

fn interpolate<T: Real>(data: &[T], height: usize, width: usize, channels: usize, fx: T, fy: T) -> Vec<T> {
    let t = taps(height, width, fx, fy);
    gather(data, width, channels, &t)
}
