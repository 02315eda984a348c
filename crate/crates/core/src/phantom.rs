//! Synthetic CT-like phantoms: an ellipsoidal soft-tissue body in air with
//! non-overlapping ellipsoidal organs. Deterministic given `(spec, seed)`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::gaussian_blur_axis;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::volume::{write_labels, write_volume, Grid3, LabelGrid, Volume, AIR_HU};

/// Body voxels never go below this, so they always pass the −500 HU body threshold.
pub const BODY_FLOOR_HU: f32 = -450.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganClass {
    pub name: String,
    /// Label written for this organ; 0 makes it an unlabeled structure.
    pub label: u16,
    /// Inclusive range of instances per phantom.
    pub count: [u32; 2],
    /// Per-axis semi-axis ranges in mm.
    pub semi_axes_mm: [[f32; 2]; 3],
    pub mean_hu: f32,
    pub noise_hu: f32,
    /// Allowed centre positions per axis, in body-normalized coordinates
    /// (−1 and 1 are the body ellipsoid's extremes).
    pub region: [[f32; 2]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// Body semi-axes as fractions of the half-extents.
    pub body_semi_axes: [f32; 3],
    /// Relative per-phantom jitter of the body semi-axes.
    pub body_jitter: f32,
    pub body_hu: f32,
    /// White texture noise over the whole body.
    pub texture_sigma_hu: f32,
    /// Amplitude and correlation length of a smooth texture field.
    pub texture_smooth_hu: f32,
    pub texture_scale_mm: f32,
    pub organs: Vec<OrganClass>,
    pub max_retries: u32,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = |name: &str, label, count, axes, mean_hu, region| OrganClass {
            name: name.into(),
            label,
            count,
            semi_axes_mm: axes,
            mean_hu,
            noise_hu: 15.0,
            region,
        };
        PhantomSpec {
            extents: [64, 64, 32],
            spacing: [1.0, 1.0, 2.0],
            body_semi_axes: [0.85, 0.72, 1.25],
            body_jitter: 0.08,
            body_hu: 0.0,
            texture_sigma_hu: 20.0,
            texture_smooth_hu: 25.0,
            texture_scale_mm: 6.0,
            organs: vec![
                organ(
                    "large bright",
                    1,
                    [1, 1],
                    [[10.0, 14.0], [8.0, 11.0], [10.0, 16.0]],
                    110.0,
                    [[-0.45, -0.15], [-0.3, 0.3], [-0.3, 0.3]],
                ),
                organ(
                    "medium mid",
                    2,
                    [1, 1],
                    [[6.0, 9.0], [6.0, 9.0], [8.0, 12.0]],
                    55.0,
                    [[0.15, 0.5], [-0.3, 0.3], [-0.4, 0.4]],
                ),
                organ(
                    "small dark-ish",
                    3,
                    [1, 2],
                    [[3.5, 5.0], [3.5, 5.0], [5.0, 8.0]],
                    -80.0,
                    [[-0.5, 0.5], [-0.6, 0.6], [-0.6, 0.6]],
                ),
            ],
            max_retries: 200,
        }
    }
}

impl PhantomSpec {
    pub fn num_classes(&self) -> usize {
        self.organs.iter().map(|o| o.label as usize).max().unwrap_or(0) + 1
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.extents.contains(&0) {
            errs.push(format!("phantom.extents must be >= 1, got {:?}", self.extents));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            errs.push(format!("phantom.spacing must be > 0, got {:?}", self.spacing));
        }
        if self.body_semi_axes.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            errs.push(format!("phantom.body_semi_axes must be > 0, got {:?}", self.body_semi_axes));
        }
        if !(0.0..1.0).contains(&self.body_jitter) {
            errs.push(format!("phantom.body_jitter must be in [0, 1), got {}", self.body_jitter));
        }
        if self.body_hu <= -500.0 {
            errs.push(format!("phantom.body_hu must be > -500, got {}", self.body_hu));
        }
        for v in [self.texture_sigma_hu, self.texture_smooth_hu, self.texture_scale_mm] {
            if !v.is_finite() || v < 0.0 {
                errs.push("phantom texture parameters must be finite and >= 0".into());
            }
        }
        for o in &self.organs {
            if o.mean_hu <= -500.0 {
                errs.push(format!("organ '{}': mean_hu must be > -500, got {}", o.name, o.mean_hu));
            }
            if o.count[0] > o.count[1] {
                errs.push(format!("organ '{}': count range is empty", o.name));
            }
            if o.semi_axes_mm.iter().any(|[lo, hi]| !(*lo > 0.0 && lo <= hi)) {
                errs.push(format!("organ '{}': semi-axes must be > 0 with lo <= hi", o.name));
            }
            if o.region.iter().any(|[lo, hi]| !(lo <= hi && *lo >= -1.0 && *hi <= 1.0)) {
                errs.push(format!("organ '{}': region must be sub-ranges of [-1, 1]", o.name));
            }
            if !o.noise_hu.is_finite() || o.noise_hu < 0.0 {
                errs.push(format!("organ '{}': noise_hu must be >= 0", o.name));
            }
        }
        errs
    }
}

/// Axis-aligned ellipsoid in mm, measured from voxel 0's centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of voxel `(x, y, z)`.
    pub fn radius2(&self, voxel: [usize; 3], spacing: [f32; 3]) -> f64 {
        (0..3)
            .map(|a| ((voxel[a] as f64 * spacing[a] as f64 - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum()
    }

    pub fn contains(&self, voxel: [usize; 3], spacing: [f32; 3]) -> bool {
        self.radius2(voxel, spacing) <= 1.0
    }

    /// Volume in mm³.
    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes_mm.iter().product::<f64>()
    }

    /// Inclusive voxel index range per axis that can contain the ellipsoid.
    fn voxel_bounds(&self, dims: [usize; 3], spacing: [f32; 3]) -> Option<[[usize; 2]; 3]> {
        let mut out = [[0; 2]; 3];
        for a in 0..3 {
            let s = spacing[a] as f64;
            let lo = ((self.center_mm[a] - self.semi_axes_mm[a]) / s).ceil().max(0.0);
            let hi = ((self.center_mm[a] + self.semi_axes_mm[a]) / s).floor().min(dims[a] as f64 - 1.0);
            if lo > hi {
                return None;
            }
            out[a] = [lo as usize, hi as usize];
        }
        Some(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedOrgan {
    pub class: String,
    pub label: u16,
    pub shape: Ellipsoid,
}

/// Geometry of one phantom, for tests and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub body: Ellipsoid,
    pub organs: Vec<PlacedOrgan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub volume: Volume,
    pub labels: LabelGrid,
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<LabeledVolume> {
    generate_phantom_with_layout(spec, seed).map(|(v, _)| v)
}

pub fn generate_phantom_with_layout(spec: &PhantomSpec, seed: u64) -> Result<(LabeledVolume, Layout)> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs.join("; ")));
    }
    let mut rng = rng::seeded(seed);
    let dims = spec.extents;
    let spacing = spec.spacing;

    let jitter = |rng: &mut rng::Rng| 1.0 + spec.body_jitter as f64 * (2.0 * rng.random::<f64>() - 1.0);
    let body = Ellipsoid {
        center_mm: [0, 1, 2].map(|a| (dims[a] - 1) as f64 * spacing[a] as f64 / 2.0),
        semi_axes_mm: [0, 1, 2].map(|a| {
            spec.body_semi_axes[a] as f64 * dims[a] as f64 * spacing[a] as f64 / 2.0 * jitter(&mut rng)
        }),
    };

    // 0 = air, 1 = body, 2 + i = organ instance i.
    let mut owner = Grid3::from_fn(dims, |x, y, z| u32::from(body.contains([x, y, z], spacing)));
    let mut organs = Vec::new();
    let mut organ_class = Vec::new();
    for (ci, class) in spec.organs.iter().enumerate() {
        let count = rng.random_range(class.count[0]..=class.count[1]);
        for _ in 0..count {
            let id = 2 + organs.len() as u32;
            let mut placed = None;
            for _ in 0..=spec.max_retries {
                let semi = [0, 1, 2].map(|a| {
                    let [lo, hi] = class.semi_axes_mm[a];
                    lo as f64 + (hi - lo) as f64 * rng.random::<f64>()
                });
                let center = [0, 1, 2].map(|a| {
                    let [lo, hi] = class.region[a];
                    let u = lo as f64 + (hi - lo) as f64 * rng.random::<f64>();
                    body.center_mm[a] + u * body.semi_axes_mm[a]
                });
                let shape = Ellipsoid {
                    center_mm: center,
                    semi_axes_mm: semi,
                };
                if let Some(voxels) = fits(&shape, &owner, spacing) {
                    for i in voxels {
                        owner.data_mut()[i] = id;
                    }
                    placed = Some(shape);
                    break;
                }
            }
            let shape = placed.ok_or_else(|| Error::Placement {
                class: class.name.clone(),
                retries: spec.max_retries as usize,
            })?;
            organ_class.push(ci);
            organs.push(PlacedOrgan {
                class: class.name.clone(),
                label: class.label,
                shape,
            });
        }
    }

    let texture = smooth_field(spec, &mut rng);
    let mut intensities = vec![AIR_HU; owner.len()];
    let mut labels = vec![0u16; owner.len()];
    for (i, &o) in owner.data().iter().enumerate() {
        if o == 0 {
            continue;
        }
        let white: f32 = StandardNormal.sample(&mut rng);
        let (base, noise) = if o == 1 {
            (spec.body_hu, spec.texture_sigma_hu)
        } else {
            let class = &spec.organs[organ_class[o as usize - 2]];
            labels[i] = class.label;
            (class.mean_hu, spec.texture_sigma_hu.hypot(class.noise_hu))
        };
        intensities[i] = (base + texture[i] + noise * white).max(BODY_FLOOR_HU);
    }
    let volume = Volume::new(Grid3::new(dims, intensities)?, spacing)?;
    Ok((
        LabeledVolume {
            volume,
            labels: Grid3::new(dims, labels)?,
        },
        Layout { body, organs },
    ))
}

/// Voxel indices of `shape` when it is non-empty, lies entirely in plain
/// body tissue and touches no other organ.
fn fits(shape: &Ellipsoid, owner: &Grid3<u32>, spacing: [f32; 3]) -> Option<Vec<usize>> {
    let b = shape.voxel_bounds(owner.dims(), spacing)?;
    let mut voxels = Vec::new();
    for z in b[2][0]..=b[2][1] {
        for y in b[1][0]..=b[1][1] {
            for x in b[0][0]..=b[0][1] {
                if shape.contains([x, y, z], spacing) {
                    let i = owner.index(x, y, z);
                    if owner.data()[i] != 1 {
                        return None;
                    }
                    voxels.push(i);
                }
            }
        }
    }
    (!voxels.is_empty()).then_some(voxels)
}

/// Blurred white noise rescaled to `texture_smooth_hu` standard deviation.
fn smooth_field(spec: &PhantomSpec, rng: &mut rng::Rng) -> Vec<f32> {
    let dims = spec.extents;
    let n: usize = dims.iter().product();
    if spec.texture_smooth_hu == 0.0 {
        return vec![0.0; n];
    }
    let noise: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let mut g = Grid3::new(dims, noise).expect("extents checked");
    for a in 0..3 {
        g = gaussian_blur_axis(&g, a, spec.texture_scale_mm / spec.spacing[a]);
    }
    let data = g.data();
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = if var > 0.0 { spec.texture_smooth_hu as f64 / var.sqrt() } else { 0.0 };
    data.iter().map(|&v| ((v as f64 - mean) * scale) as f32).collect()
}

// ---- datasets ----

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub volume_path: PathBuf,
    pub labels_path: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Seed of volume `index` in a dataset generated from `master`.
pub fn volume_seed(master: u64, index: usize) -> u64 {
    rng::derive_seed(master, &[stream::PHANTOM, index as u64])
}

/// Writes `count` phantoms as `phantom_%04d.rvol` / `.rseg` plus a JSON-lines
/// manifest with paths relative to `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, count: usize, seed: u64, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = volume_seed(seed, i);
        let lv = generate_phantom(spec, s)?;
        let vname = format!("phantom_{i:04}.rvol");
        let lname = format!("phantom_{i:04}.rseg");
        write_volume(out_dir.join(&vname), &lv.volume)?;
        write_labels(out_dir.join(&lname), &lv.labels)?;
        entries.push(ManifestEntry {
            volume_path: vname.into(),
            labels_path: Some(lname.into()),
            seed: Some(s),
        });
    }
    if count > 0 {
        write_manifest(&out_dir.join(MANIFEST_NAME), &entries)?;
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative paths are resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Data(format!("{}: line {}: {err}", path.display(), n + 1)))?;
        e.volume_path = base.join(&e.volume_path);
        e.labels_path = e.labels_path.map(|p| base.join(p));
        entries.push(e);
    }
    Ok(entries)
}
