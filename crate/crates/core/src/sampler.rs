//! Positive-pair sampling: two overlapping patches per volume and `m`
//! matched body voxels inside their overlap, plus labeled-patch sampling
//! for the supervised heads.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_augment, draw_augment_spec, window_rescale, AugmentConfig, EVAL_WINDOW};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::volume::{BodyMask, Grid3, LabelGrid, Volume, AIR_HU};

/// Bounded number of overlap-rejection draws for the second origin before
/// falling back to full overlap.
const OVERLAP_DRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub extents: [usize; 3],
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { extents: [32, 32, 16] }
    }
}

impl PatchSpec {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn validate(&self, levels: usize) -> Vec<String> {
        let f = 1usize << levels.saturating_sub(1);
        if self.extents.iter().any(|&e| e == 0 || e % f != 0) {
            vec![format!(
                "patch extents {:?} must be positive multiples of 2^(levels-1) = {f}",
                self.extents
            )]
        } else {
            vec![]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Positive pairs per patch pair.
    pub m: usize,
    pub min_overlap_fraction: f64,
    pub max_retries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            m: 128,
            min_overlap_fraction: 0.25,
            max_retries: 20,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.m == 0 {
            errs.push("sampler.m must be >= 1".into());
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            errs.push(format!(
                "sampler.min_overlap_fraction must be in (0, 1], got {}",
                self.min_overlap_fraction
            ));
        }
        errs
    }
}

/// Where the two patches sit and which voxels were matched.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGeometry {
    pub origins: [[usize; 3]; 2],
    /// World voxel coordinates.
    pub positions: Vec<[usize; 3]>,
    /// The same positions relative to each patch's origin.
    pub locals: [Vec<[usize; 3]>; 2],
    /// Set when too few body voxels were available and positions repeat.
    pub with_replacement: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub geometry: PairGeometry,
    /// Augmented patches with values in `[0, 1]`.
    pub patches: [Grid3<f32>; 2],
}

fn overlap_extent(a: [usize; 3], b: [usize; 3], p: [usize; 3]) -> [[usize; 2]; 3] {
    [0, 1, 2].map(|i| {
        let lo = a[i].max(b[i]);
        let hi = (a[i] + p[i]).min(b[i] + p[i]);
        [lo, hi.max(lo)]
    })
}

fn overlap_voxels(a: [usize; 3], b: [usize; 3], p: [usize; 3]) -> usize {
    overlap_extent(a, b, p).iter().map(|[lo, hi]| hi - lo).product()
}

fn body_in_overlap(mask: &BodyMask, a: [usize; 3], b: [usize; 3], p: [usize; 3]) -> Vec<[usize; 3]> {
    let r = overlap_extent(a, b, p);
    let mut out = Vec::new();
    for z in r[2][0]..r[2][1] {
        for y in r[1][0]..r[1][1] {
            for x in r[0][0]..r[0][1] {
                if mask.is_body(x, y, z) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn check_fits(dims: [usize; 3], extents: [usize; 3]) -> Result<()> {
    if (0..3).any(|a| dims[a] < extents[a]) {
        return Err(Error::contract(format!(
            "volume {dims:?} is smaller than patch {extents:?}; pad it first"
        )));
    }
    Ok(())
}

/// Origins and matched positions; the random part of [`sample_patch_pair`].
pub fn sample_pair_geometry(
    mask: &BodyMask,
    spec: &PatchSpec,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<PairGeometry> {
    let dims = mask.dims();
    let p = spec.extents;
    check_fits(dims, p)?;
    let bbox = mask
        .bounding_box()
        .ok_or_else(|| Error::Sampling("volume has no body voxels".into()))?;
    let need = config.min_overlap_fraction * spec.voxels() as f64;

    let mut best: Option<([usize; 3], [usize; 3], Vec<[usize; 3]>)> = None;
    for _ in 0..=config.max_retries {
        let o1 = [0, 1, 2].map(|a| {
            let lo = (bbox.min[a] + 1).saturating_sub(p[a]);
            let hi = bbox.max[a].min(dims[a] - p[a]);
            rng.random_range(lo..=hi)
        });
        let mut o2 = o1;
        for _ in 0..OVERLAP_DRAWS {
            let cand = [0, 1, 2].map(|a| {
                let lo = (o1[a] + 1).saturating_sub(p[a]);
                let hi = (o1[a] + p[a] - 1).min(dims[a] - p[a]);
                rng.random_range(lo..=hi)
            });
            if overlap_voxels(o1, cand, p) as f64 >= need {
                o2 = cand;
                break;
            }
        }
        let body = body_in_overlap(mask, o1, o2, p);
        let enough = body.len() >= config.m;
        if best.as_ref().is_none_or(|b| body.len() > b.2.len()) {
            best = Some((o1, o2, body));
        }
        if enough {
            break;
        }
    }
    let (o1, o2, body) = best.expect("at least one attempt");
    if body.is_empty() {
        return Err(Error::Sampling(format!(
            "no body voxels in any patch overlap after {} retries",
            config.max_retries
        )));
    }
    let with_replacement = body.len() < config.m;
    let positions: Vec<[usize; 3]> = if with_replacement {
        (0..config.m).map(|_| body[rng.random_range(0..body.len())]).collect()
    } else {
        index::sample(rng, body.len(), config.m).into_iter().map(|i| body[i]).collect()
    };
    let local = |o: [usize; 3]| positions.iter().map(|q| [0, 1, 2].map(|a| q[a] - o[a])).collect();
    Ok(PairGeometry {
        origins: [o1, o2],
        locals: [local(o1), local(o2)],
        positions,
        with_replacement,
    })
}

/// Raw intensities of the patch at `origin`; positions outside the volume read as air.
pub fn extract_patch(volume: &Volume, origin: [usize; 3], extents: [usize; 3]) -> Grid3<f32> {
    volume
        .intensities
        .extract(origin.map(|o| o as isize), extents, AIR_HU)
}

pub fn sample_patch_pair(
    volume: &Volume,
    mask: &BodyMask,
    spec: &PatchSpec,
    config: &SamplerConfig,
    augment: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<PatchPair> {
    if mask.dims() != volume.dims() {
        return Err(Error::contract("body mask extents differ from volume extents"));
    }
    let geometry = sample_pair_geometry(mask, spec, config, rng)?;
    let patches = geometry.origins.map(|o| {
        let aug = draw_augment_spec(augment, rng);
        apply_augment(&aug, &extract_patch(volume, o, spec.extents))
    });
    Ok(PatchPair { geometry, patches })
}

/// Copies an x-fastest grid into the z-fastest `[X, Y, Z]` tensor layout.
pub fn grid_to_xyz(grid: &Grid3<f32>, out: &mut [f32]) {
    let [dx, dy, dz] = grid.dims();
    assert_eq!(out.len(), grid.len());
    for (i, &v) in grid.data().iter().enumerate() {
        let (x, y, z) = (i % dx, (i / dx) % dy, i / (dx * dy));
        out[(x * dy + y) * dz + z] = v;
    }
}

/// One positive pair: (patch index, local voxel) in each of the two views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairIndex {
    pub patch: [usize; 2],
    pub local: [[usize; 3]; 2],
}

/// `2n` patches stacked as `[2n, 1, X, Y, Z]` plus the `N = n·m` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub patches: Tensor<f32>,
    pub pairs: Vec<PairIndex>,
    /// Per pair: (source index in the request, world position).
    pub world: Vec<(usize, [usize; 3])>,
    pub replacement_fallbacks: usize,
}

/// A volume to sample from, with the seed of its own rng stream.
#[derive(Clone, Copy, Debug)]
pub struct SampleSource<'a> {
    pub volume: &'a Volume,
    pub mask: &'a BodyMask,
    pub seed: u64,
}

pub fn assemble_batch(
    sources: &[SampleSource<'_>],
    spec: &PatchSpec,
    config: &SamplerConfig,
    augment: &AugmentConfig,
) -> Result<PretrainBatch> {
    if sources.is_empty() {
        return Err(Error::contract("a batch needs at least one volume"));
    }
    let p = spec.extents;
    let per_patch = spec.voxels();
    let mut data = vec![0.0f32; 2 * sources.len() * per_patch];
    let mut pairs = Vec::with_capacity(sources.len() * config.m);
    let mut world = Vec::with_capacity(sources.len() * config.m);
    let mut replacement_fallbacks = 0;
    for (v, src) in sources.iter().enumerate() {
        let mut rng = rng::seeded(src.seed);
        let pair = sample_patch_pair(src.volume, src.mask, spec, config, augment, &mut rng)?;
        for k in 0..2 {
            let at = (2 * v + k) * per_patch;
            grid_to_xyz(&pair.patches[k], &mut data[at..at + per_patch]);
        }
        let g = &pair.geometry;
        replacement_fallbacks += usize::from(g.with_replacement);
        for (i, &pos) in g.positions.iter().enumerate() {
            pairs.push(PairIndex {
                patch: [2 * v, 2 * v + 1],
                local: [g.locals[0][i], g.locals[1][i]],
            });
            world.push((v, pos));
        }
    }
    Ok(PretrainBatch {
        patches: Tensor::new(vec![2 * sources.len(), 1, p[0], p[1], p[2]], data)?,
        pairs,
        world,
        replacement_fallbacks,
    })
}

/// A windowed intensity patch with its label patch (both x-fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub origin: [usize; 3],
    pub image: Grid3<f32>,
    pub labels: LabelGrid,
}

/// Picks a body voxel uniformly and returns the patch centred on it
/// (clamped inside the volume), windowed to the evaluation window.
pub fn sample_labeled_patch(
    volume: &Volume,
    mask: &BodyMask,
    labels: &LabelGrid,
    spec: &PatchSpec,
    rng: &mut impl Rng,
) -> Result<LabeledPatch> {
    let dims = volume.dims();
    let p = spec.extents;
    check_fits(dims, p)?;
    if labels.dims() != dims || mask.dims() != dims {
        return Err(Error::contract("labels/mask extents differ from volume extents"));
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::Sampling("volume has no body voxels".into()));
    }
    let pick = rng.random_range(0..count);
    let flat = mask
        .0
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .nth(pick)
        .map(|(i, _)| i)
        .expect("pick < count");
    let c = mask.0.coords(flat);
    let origin = [0, 1, 2].map(|a| c[a].saturating_sub(p[a] / 2).min(dims[a] - p[a]));
    let mut image = extract_patch(volume, origin, p);
    for v in image.data_mut() {
        *v = window_rescale(*v, EVAL_WINDOW);
    }
    let labels = labels.extract(origin.map(|o| o as isize), p, 0);
    Ok(LabeledPatch { origin, image, labels })
}
