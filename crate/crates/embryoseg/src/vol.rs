//! Volumetric geometry: grids, resampling, centroids, fixed-size cropping
//! with boundary bookkeeping, and zero-pad-back reassembly.
//!
//! Conventions used throughout the crate:
//! - volumes are indexed `(z, y, x)` with shape `[D, H, W]`, row-major,
//!   `x` fastest;
//! - voxel `(i, j, k)` sits at physical `(i, j, k)` in index space;
//! - resampling maps grid corners to grid corners (align-corners), so
//!   resampling to the same shape is the identity, element-wise exact.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};

/// Total probability mass below which localization is considered degenerate
/// and falls back to the geometric image center.
pub const MASS_FLOOR: f64 = 1e-3;

/// Dense 3D scalar grid, shape `[D, H, W]`, row-major, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Grid3 {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape[0] * shape[1] * shape[2]);
        Grid3 { shape, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline(always)]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(z, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(z, y, x);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// 3D scalar image with voxel spacing metadata (micrometers per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid3,
    pub spacing: [f64; 3],
}

pub const DEFAULT_SPACING: [f64; 3] = [50.0, 50.0, 50.0];

impl Volume {
    pub fn new(grid: Grid3, spacing: [f64; 3]) -> Self {
        Volume { grid, spacing }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.grid.shape
    }

    /// Validates and normalizes a raw grid into a `Volume`: all dimensions
    /// positive, finite values, intensities min-max rescaled to `[0, 1]`.
    pub fn ingest(mut grid: Grid3, spacing: [f64; 3]) -> Result<Self> {
        if grid.shape.iter().any(|&d| d == 0) {
            return Err(SegError::InvalidArgument(format!(
                "volume dimensions must be >= 1, got {:?}",
                grid.shape
            )));
        }
        if grid.data.iter().any(|v| !v.is_finite()) {
            return Err(SegError::InvalidArgument(
                "volume contains NaN or Inf".into(),
            ));
        }
        let (lo, hi) = grid.min_max();
        let span = hi - lo;
        if span > 0.0 {
            for v in &mut grid.data {
                *v = (*v - lo) / span;
            }
        } else {
            for v in &mut grid.data {
                *v = 0.0;
            }
        }
        Ok(Volume {
            grid,
            spacing,
        })
    }
}

/// How the channels of a probability map are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbKind {
    /// Channels sum to 1 at every voxel.
    Softmax,
    /// Channels are independent, each in `[0, 1]`.
    Sigmoid,
}

/// Per-class 3D probability volume(s): shape `(C, D, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub kind: ProbKind,
}

impl ProbMap {
    pub fn new(channels: usize, shape: [usize; 3], data: Vec<f64>, kind: ProbKind) -> Self {
        assert_eq!(data.len(), channels * shape[0] * shape[1] * shape[2]);
        ProbMap {
            channels,
            shape,
            data,
            kind,
        }
    }

    pub fn channel(&self, c: usize) -> Grid3 {
        let n = self.shape[0] * self.shape[1] * self.shape[2];
        Grid3::from_vec(self.shape, self.data[c * n..(c + 1) * n].to_vec())
    }

    pub fn channel_slice(&self, c: usize) -> &[f64] {
        let n = self.shape[0] * self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-voxel argmax over channels.
    pub fn argmax_labels(&self) -> LabelVolume {
        let n = self.shape[0] * self.shape[1] * self.shape[2];
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let mut best = 0usize;
            let mut best_v = self.data[i];
            for c in 1..self.channels {
                let v = self.data[c * n + i];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            labels[i] = best as u8;
        }
        LabelVolume {
            shape: self.shape,
            data: labels,
        }
    }
}

/// Background / inner structure / enclosing structure label alphabet.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BV: u8 = 1;
pub const LABEL_BODY: u8 = 2;

/// Integer-valued 3D mask: 0 = background, 1 = BV, 2 = body.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn zeros(shape: [usize; 3]) -> Self {
        LabelVolume {
            shape,
            data: vec![0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|&v| v > 2) {
            return Err(SegError::InvalidArgument(
                "label volume contains values outside {0,1,2}".into(),
            ));
        }
        Ok(())
    }

    /// Binary mask (1.0/0.0) of voxels equal to `class`.
    pub fn mask_of(&self, class: u8) -> Grid3 {
        Grid3 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| if v == class { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn count_of(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    /// Fraction of voxels equal to `class`.
    pub fn fraction_of(&self, class: u8) -> f64 {
        self.count_of(class) as f64 / self.data.len() as f64
    }
}

/// Fixed-size axis-aligned box with clipping bookkeeping.
///
/// `origin` is the (possibly negative) corner of the box in full-image
/// coordinates; `pad_lo`/`pad_hi` record how many box voxels per face fall
/// outside the image. Together they make the crop invertible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [usize; 3],
    pub origin: [i64; 3],
    pub pad_lo: [usize; 3],
    pub pad_hi: [usize; 3],
}

impl BoxSpec {
    /// Box of `size` centered on `center` inside an image of `image_shape`.
    /// Origin rounding: `floor(center - size/2 + 0.5)` per axis.
    pub fn centered(center: [f64; 3], size: [usize; 3], image_shape: [usize; 3]) -> Self {
        let mut origin = [0i64; 3];
        let mut pad_lo = [0usize; 3];
        let mut pad_hi = [0usize; 3];
        for a in 0..3 {
            let o = (center[a] - size[a] as f64 / 2.0 + 0.5).floor() as i64;
            origin[a] = o;
            let end = o + size[a] as i64;
            pad_lo[a] = (-o).max(0) as usize;
            pad_hi[a] = (end - image_shape[a] as i64).max(0) as usize;
        }
        BoxSpec {
            center,
            size,
            origin,
            pad_lo,
            pad_hi,
        }
    }

    /// In-bounds source range `[start, end)` of the image covered by the box
    /// on axis `a`, together with the box-local offset of that range.
    pub fn src_range(&self, a: usize) -> (usize, usize, usize) {
        let start = self.origin[a].max(0) as usize;
        let end = start + (self.size[a] - self.pad_lo[a] - self.pad_hi[a]);
        (start, end, self.pad_lo[a])
    }

    /// Checks the origin/pad bookkeeping against an image shape.
    pub fn consistent_with(&self, image_shape: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let end = self.origin[a] + self.size[a] as i64;
            self.pad_lo[a] == (-self.origin[a]).max(0) as usize
                && self.pad_hi[a] == (end - image_shape[a] as i64).max(0) as usize
                && self.pad_lo[a] + self.pad_hi[a] <= self.size[a]
        })
    }
}

/// Trilinear resampling with align-corners coordinate mapping.
///
/// Output voxel `t` on an axis samples source coordinate
/// `t * (S-1) / (T-1)` (or 0 when `T == 1`), which makes the identity case
/// element-wise exact and keeps output values inside `[min(in), max(in)]`.
pub fn trilinear_resample(input: &Grid3, target_shape: [usize; 3]) -> Result<Grid3> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(SegError::InvalidArgument(format!(
            "resample target shape must be positive, got {target_shape:?}"
        )));
    }
    let [sd, sh, sw] = input.shape;
    let [td, th, tw] = target_shape;
    let scale = |t: usize, s: usize| -> f64 {
        if t <= 1 {
            0.0
        } else {
            (s - 1) as f64 / (t - 1) as f64
        }
    };
    let (rz, ry, rx) = (scale(td, sd), scale(th, sh), scale(tw, sw));

    let mut out = Grid3::zeros(target_shape);
    // Precompute per-axis floor/frac tables.
    let axis_table = |t: usize, r: f64, s: usize| -> Vec<(usize, usize, f64)> {
        (0..t)
            .map(|i| {
                let c = i as f64 * r;
                let i0 = (c.floor() as usize).min(s - 1);
                let i1 = (i0 + 1).min(s - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect()
    };
    let tz = axis_table(td, rz, sd);
    let ty = axis_table(th, ry, sh);
    let tx = axis_table(tw, rx, sw);

    for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let c000 = input.get(z0, y0, x0);
                let c001 = input.get(z0, y0, x1);
                let c010 = input.get(z0, y1, x0);
                let c011 = input.get(z0, y1, x1);
                let c100 = input.get(z1, y0, x0);
                let c101 = input.get(z1, y0, x1);
                let c110 = input.get(z1, y1, x0);
                let c111 = input.get(z1, y1, x1);
                let c00 = c000 + (c001 - c000) * fx;
                let c01 = c010 + (c011 - c010) * fx;
                let c10 = c100 + (c101 - c100) * fx;
                let c11 = c110 + (c111 - c110) * fx;
                let c0 = c00 + (c01 - c00) * fy;
                let c1 = c10 + (c11 - c10) * fy;
                out.set(z, y, x, c0 + (c1 - c0) * fz);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor resampling for label volumes (same coordinate mapping
/// as [`trilinear_resample`], rounding to the closest source voxel).
pub fn nearest_resample_labels(input: &LabelVolume, target_shape: [usize; 3]) -> Result<LabelVolume> {
    if target_shape.iter().any(|&d| d == 0) {
        return Err(SegError::InvalidArgument(format!(
            "resample target shape must be positive, got {target_shape:?}"
        )));
    }
    let [sd, sh, sw] = input.shape;
    let [td, th, tw] = target_shape;
    let map = |i: usize, t: usize, s: usize| -> usize {
        if t <= 1 {
            0
        } else {
            let c = i as f64 * (s - 1) as f64 / (t - 1) as f64;
            (c + 0.5).floor() as usize
        }
        .min(s - 1)
    };
    let mut out = LabelVolume::zeros(target_shape);
    for z in 0..td {
        let zs = map(z, td, sd);
        for y in 0..th {
            let ys = map(y, th, sh);
            for x in 0..tw {
                let xs = map(x, tw, sw);
                out.data[(z * th + y) * tw + x] = input.data[(zs * sh + ys) * sw + xs];
            }
        }
    }
    Ok(out)
}

/// Result of probability-mass centroid computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub center: [f64; 3],
    /// Set when total mass fell below [`MASS_FLOOR`] and the geometric image
    /// center was used instead.
    pub degenerate: bool,
}

/// Probability-mass-weighted centroid of a non-negative channel.
///
/// Falls back to the geometric image center (flagged) when the total mass is
/// below [`MASS_FLOOR`], so an untrained or failed upstream network cannot
/// crash the cascade.
pub fn weighted_centroid(channel: &Grid3) -> Result<Centroid> {
    let [d, h, w] = channel.shape;
    let mut mass = 0.0f64;
    let mut acc = [0.0f64; 3];
    let mut i = 0usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = channel.data[i];
                i += 1;
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(SegError::InvalidArgument(
                        "centroid channel must be non-negative and finite".into(),
                    ));
                }
                mass += p;
                acc[0] += p * z as f64;
                acc[1] += p * y as f64;
                acc[2] += p * x as f64;
            }
        }
    }
    if mass < MASS_FLOOR {
        return Ok(Centroid {
            center: [
                (d as f64 - 1.0) / 2.0,
                (h as f64 - 1.0) / 2.0,
                (w as f64 - 1.0) / 2.0,
            ],
            degenerate: true,
        });
    }
    Ok(Centroid {
        center: [acc[0] / mass, acc[1] / mass, acc[2] / mass],
        degenerate: false,
    })
}

/// Crops a fixed-size box centered on `center`; regions outside the image are
/// zero-filled rather than shifting the box, so the object stays centered in
/// the refinement input. Returns the subvolume and the invertible [`BoxSpec`].
pub fn crop_fixed_box(
    input: &Grid3,
    center: [f64; 3],
    size: [usize; 3],
) -> Result<(Grid3, BoxSpec)> {
    for a in 0..3 {
        if size[a] == 0 {
            return Err(SegError::InvalidArgument("box size must be positive".into()));
        }
        if size[a] > 4 * input.shape[a] {
            return Err(SegError::Config(format!(
                "box size {} exceeds 4x image extent {} on axis {a}",
                size[a], input.shape[a]
            )));
        }
        if !center[a].is_finite() {
            return Err(SegError::InvalidArgument("box center must be finite".into()));
        }
    }
    let spec = BoxSpec::centered(center, size, input.shape);
    let sub = extract_box(input, &spec);
    Ok((sub, spec))
}

/// Copies the in-bounds region described by `spec` out of `input` into a
/// zero-initialized box-sized grid.
pub fn extract_box(input: &Grid3, spec: &BoxSpec) -> Grid3 {
    let mut sub = Grid3::zeros(spec.size);
    let (z0, z1, bz) = spec.src_range(0);
    let (y0, y1, by) = spec.src_range(1);
    let (x0, x1, bx) = spec.src_range(2);
    for (dz, z) in (z0..z1).enumerate() {
        for (dy, y) in (y0..y1).enumerate() {
            let src = input.idx(z, y, x0);
            let dst = sub.idx(bz + dz, by + dy, bx);
            let n = x1 - x0;
            sub.data[dst..dst + n].copy_from_slice(&input.data[src..src + n]);
        }
    }
    sub
}

/// Reinserts a box-local result into a zero volume of `original_shape` using
/// the box bookkeeping; every voxel outside the in-bounds box region is 0.
pub fn pad_back(sub: &Grid3, spec: &BoxSpec, original_shape: [usize; 3]) -> Result<Grid3> {
    if sub.shape != spec.size {
        return Err(SegError::InvalidArgument(format!(
            "subvolume shape {:?} does not match box size {:?}",
            sub.shape, spec.size
        )));
    }
    if !spec.consistent_with(original_shape) {
        return Err(SegError::InvalidArgument(format!(
            "box {spec:?} inconsistent with original shape {original_shape:?}"
        )));
    }
    let mut out = Grid3::zeros(original_shape);
    let (z0, z1, bz) = spec.src_range(0);
    let (y0, y1, by) = spec.src_range(1);
    let (x0, x1, bx) = spec.src_range(2);
    for (dz, z) in (z0..z1).enumerate() {
        for (dy, y) in (y0..y1).enumerate() {
            let dst = out.idx(z, y, x0);
            let src = sub.idx(bz + dz, by + dy, bx);
            let n = x1 - x0;
            out.data[dst..dst + n].copy_from_slice(&sub.data[src..src + n]);
        }
    }
    Ok(out)
}
