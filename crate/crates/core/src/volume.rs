//! Volumes, label grids, their on-disk formats and the preprocessing path:
//! body-mask extraction, cropping to the body and spacing resampling.
//!
//! Grids are stored x-fastest (`index = x + dx * (y + dy * z)`), the same
//! order as the `RVOL1`/`RSEG1` payloads.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AIR_HU: f32 = -1000.0;

const RVOL_MAGIC: &[u8; 8] = b"RVOL1\0\0\0";
const RSEG_MAGIC: &[u8; 8] = b"RSEG1\0\0\0";

/// A dense 3D grid in x-fastest order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::contract(format!("grid extents must be >= 1, got {dims:?}")));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "grid {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Grid3 { dims, data })
    }

    pub fn filled(dims: [usize; 3], value: T) -> Self {
        assert!(!dims.contains(&0), "grid extents must be >= 1, got {dims:?}");
        Grid3 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(!dims.contains(&0), "grid extents must be >= 1, got {dims:?}");
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Grid3 { dims, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [dx, dy, _] = self.dims;
        [index % dx, (index / dx) % dy, index / (dx * dy)]
    }

    /// Sub-grid `[origin, origin + extent)`; positions outside the grid take `fill`.
    pub fn extract(&self, origin: [isize; 3], extent: [usize; 3], fill: T) -> Grid3<T> {
        Grid3::from_fn(extent, |x, y, z| {
            let p = [origin[0] + x as isize, origin[1] + y as isize, origin[2] + z as isize];
            if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < self.dims[a]) {
                self.get(p[0] as usize, p[1] as usize, p[2] as usize)
            } else {
                fill
            }
        })
    }
}

/// Axis-aligned box `[min, max]` (inclusive) in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }
}

/// A CT-like scalar volume in Hounsfield units with physical voxel spacing (mm).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub intensities: Grid3<f32>,
    pub spacing: [f32; 3],
}

impl Volume {
    pub fn new(intensities: Grid3<f32>, spacing: [f32; 3]) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::contract(format!("spacing must be finite and > 0, got {spacing:?}")));
        }
        Ok(Volume { intensities, spacing })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.intensities.dims()
    }
}

/// Class ids per voxel, 0 = background.
pub type LabelGrid = Grid3<u16>;

/// `true` = body (foreground), `false` = background air.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyMask(pub Grid3<bool>);

impl BodyMask {
    pub fn dims(&self) -> [usize; 3] {
        self.0.dims()
    }

    #[inline]
    pub fn is_body(&self, x: usize, y: usize, z: usize) -> bool {
        self.0.get(x, y, z)
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&b| b).count()
    }

    /// Tight box around body voxels, `None` when the mask is all background.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        bounding_box_where(&self.0, |&b| b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub body_threshold_hu: f32,
    pub target_spacing_mm: [f32; 3],
    pub air_fill_hu: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            body_threshold_hu: -500.0,
            target_spacing_mm: [1.0, 1.0, 2.0],
            air_fill_hu: AIR_HU,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.target_spacing_mm.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            errs.push(format!("preprocess.target_spacing_mm must be > 0, got {:?}", self.target_spacing_mm));
        }
        if !self.body_threshold_hu.is_finite() || !self.air_fill_hu.is_finite() {
            errs.push("preprocess thresholds must be finite".into());
        }
        errs
    }
}

fn bounding_box_where<T: Copy>(grid: &Grid3<T>, pred: impl Fn(&T) -> bool) -> Option<BoundingBox> {
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    for (i, v) in grid.data().iter().enumerate() {
        if pred(v) {
            any = true;
            let c = grid.coords(i);
            for a in 0..3 {
                min[a] = min[a].min(c[a]);
                max[a] = max[a].max(c[a]);
            }
        }
    }
    any.then_some(BoundingBox { min, max })
}

// ---- file formats ----

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.bytes.len() < 8 || &self.bytes[..8] != magic {
            return Err(Error::format(0, "bad magic"));
        }
        self.pos = 8;
        Ok(())
    }

    fn dims(&mut self) -> Result<[usize; 3]> {
        let start = self.pos;
        let dims = [self.u32("extents")?, self.u32("extents")?, self.u32("extents")?].map(|v| v as usize);
        if dims.contains(&0) {
            return Err(Error::format(start as u64, format!("extents must be >= 1, got {dims:?}")));
        }
        Ok(dims)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after payload", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * volume.intensities.len());
    out.extend_from_slice(RVOL_MAGIC);
    for d in volume.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in volume.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for v in volume.intensities.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(RVOL_MAGIC)?;
    let dims = r.dims()?;
    let spacing_at = r.pos as u64;
    let spacing = [r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?];
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::format(spacing_at, format!("spacing must be finite and > 0, got {spacing:?}")));
    }
    let n: usize = dims.iter().product();
    let payload = r.take(4 * n, "intensity payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    Volume::new(Grid3::new(dims, data)?, spacing)
}

pub fn encode_labels(labels: &LabelGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 2 * labels.len());
    out.extend_from_slice(RSEG_MAGIC);
    for d in labels.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in labels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelGrid> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(RSEG_MAGIC)?;
    let dims = r.dims()?;
    let n: usize = dims.iter().product();
    let payload = r.take(2 * n, "label payload")?;
    let data = payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    Grid3::new(dims, data)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    decode_volume(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_volume(path: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(volume))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    decode_labels(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelGrid) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(labels))
}

// ---- preprocessing ----

/// Background = voxels below the threshold that are 6-connected to a corner
/// voxel which is itself below the threshold. Everything else is body.
pub fn compute_body_mask(volume: &Volume, config: &PreprocessConfig) -> BodyMask {
    let grid = &volume.intensities;
    let [dx, dy, dz] = grid.dims();
    let candidate: Vec<bool> = grid.data().iter().map(|&v| v < config.body_threshold_hu).collect();
    let mut background = vec![false; grid.len()];
    let mut stack = Vec::new();
    for x in [0, dx - 1] {
        for y in [0, dy - 1] {
            for z in [0, dz - 1] {
                let i = grid.index(x, y, z);
                if candidate[i] && !background[i] {
                    background[i] = true;
                    stack.push(i);
                }
            }
        }
    }
    let plane = dx * dy;
    while let Some(i) = stack.pop() {
        let [x, y, z] = grid.coords(i);
        let mut visit = |j: usize| {
            if candidate[j] && !background[j] {
                background[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < dx {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - dx);
        }
        if y + 1 < dy {
            visit(i + dx);
        }
        if z > 0 {
            visit(i - plane);
        }
        if z + 1 < dz {
            visit(i + plane);
        }
    }
    BodyMask(Grid3 {
        dims: grid.dims(),
        data: background.into_iter().map(|b| !b).collect(),
    })
}

/// Tight box around voxels strictly above the body threshold.
pub fn body_bounding_box(volume: &Volume, config: &PreprocessConfig) -> Result<BoundingBox> {
    bounding_box_where(&volume.intensities, |&v| v > config.body_threshold_hu).ok_or(Error::EmptyBody {
        threshold: config.body_threshold_hu,
    })
}

pub fn crop<T: Copy>(grid: &Grid3<T>, bbox: &BoundingBox) -> Grid3<T> {
    let o = bbox.min;
    Grid3::from_fn(bbox.extent(), |x, y, z| grid.get(o[0] + x, o[1] + y, o[2] + z))
}

pub fn crop_to_body(volume: &Volume, config: &PreprocessConfig) -> Result<Volume> {
    let bbox = body_bounding_box(volume, config)?;
    Ok(Volume {
        intensities: crop(&volume.intensities, &bbox),
        spacing: volume.spacing,
    })
}

fn resampled_dims(dims: [usize; 3], spacing: [f32; 3], target: [f32; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| {
        let n = (dims[a] as f64 * spacing[a] as f64 / target[a] as f64).round();
        (n as usize).max(1)
    })
}

/// Source coordinate of output index `i` (voxel 0 stays anchored at 0),
/// clamped to the grid.
fn source_coord(i: usize, spacing: f32, target: f32, n: usize) -> f64 {
    (i as f64 * target as f64 / spacing as f64).clamp(0.0, (n - 1) as f64)
}

/// Trilinear resampling to `target_spacing` with clamp-to-edge boundaries.
pub fn resample_volume(volume: &Volume, target_spacing: [f32; 3]) -> Result<Volume> {
    if target_spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Config(format!("target spacing must be > 0, got {target_spacing:?}")));
    }
    let src = &volume.intensities;
    let dims = src.dims();
    if volume.spacing == target_spacing {
        return Ok(volume.clone());
    }
    let out_dims = resampled_dims(dims, volume.spacing, target_spacing);
    let (lo, hi) = src
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..out_dims[a])
            .map(|i| {
                let c = source_coord(i, volume.spacing[a], target_spacing[a], dims[a]);
                let i0 = c.floor() as usize;
                let i1 = (i0 + 1).min(dims[a] - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let intensities = Grid3::from_fn(out_dims, |x, y, z| {
        let (x0, x1, fx) = ax[x];
        let (y0, y1, fy) = ay[y];
        let (z0, z1, fz) = az[z];
        let g = |x, y, z| src.get(x, y, z) as f64;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(g(x0, y0, z0), g(x1, y0, z0), fx);
        let c10 = lerp(g(x0, y1, z0), g(x1, y1, z0), fx);
        let c01 = lerp(g(x0, y0, z1), g(x1, y0, z1), fx);
        let c11 = lerp(g(x0, y1, z1), g(x1, y1, z1), fx);
        let v = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz) as f32;
        v.clamp(lo, hi)
    });
    Volume::new(intensities, target_spacing)
}

/// Nearest-neighbour resampling of a label grid onto the same lattice
/// [`resample_volume`] produces.
pub fn resample_labels(labels: &LabelGrid, spacing: [f32; 3], target_spacing: [f32; 3]) -> LabelGrid {
    if spacing == target_spacing {
        return labels.clone();
    }
    let dims = labels.dims();
    let out_dims = resampled_dims(dims, spacing, target_spacing);
    let near = |a: usize, i: usize| source_coord(i, spacing[a], target_spacing[a], dims[a]).round() as usize;
    Grid3::from_fn(out_dims, |x, y, z| labels.get(near(0, x), near(1, y), near(2, z)))
}

/// Pads each axis up to `min_extent`, centering the original content.
/// Returns the padded grid and the offset of the original inside it.
pub fn pad_to<T: Copy>(grid: &Grid3<T>, min_extent: [usize; 3], fill: T) -> (Grid3<T>, [usize; 3]) {
    let dims = grid.dims();
    if (0..3).all(|a| dims[a] >= min_extent[a]) {
        return (grid.clone(), [0; 3]);
    }
    let out = [0, 1, 2].map(|a| dims[a].max(min_extent[a]));
    let offset = [0, 1, 2].map(|a| (out[a] - dims[a]) / 2);
    let origin = offset.map(|o| -(o as isize));
    (grid.extract(origin, out, fill), offset)
}

/// A volume (and optional labels) after cropping, resampling and padding.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    pub labels: Option<LabelGrid>,
    pub mask: BodyMask,
}

/// Crop to body, resample to the target spacing, pad with air to at least
/// `min_extent`, then compute the body mask.
pub fn preprocess(
    volume: &Volume,
    labels: Option<&LabelGrid>,
    config: &PreprocessConfig,
    min_extent: [usize; 3],
) -> Result<Preprocessed> {
    if let Some(l) = labels {
        if l.dims() != volume.dims() {
            return Err(Error::Data(format!(
                "labels extents {:?} differ from volume extents {:?}",
                l.dims(),
                volume.dims()
            )));
        }
    }
    let bbox = body_bounding_box(volume, config)?;
    let cropped = Volume::new(crop(&volume.intensities, &bbox), volume.spacing)?;
    let resampled = resample_volume(&cropped, config.target_spacing_mm)?;
    let (padded, _) = pad_to(&resampled.intensities, min_extent, config.air_fill_hu);
    let volume_out = Volume::new(padded, config.target_spacing_mm)?;
    let labels_out = labels.map(|l| {
        let l = resample_labels(&crop(l, &bbox), volume.spacing, config.target_spacing_mm);
        pad_to(&l, min_extent, 0).0
    });
    let mask = compute_body_mask(&volume_out, config);
    Ok(Preprocessed {
        volume: volume_out,
        labels: labels_out,
        mask,
    })
}
