//! Intensity ("color") augmentations applied independently to each patch:
//! axial blur or sharpen, additive Gaussian noise, then a random HU window
//! rescaled to `[0, 1]`. No spatial transforms, so voxel correspondence
//! between the two patches of a pair stays exact.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng as Chacha;
use crate::volume::Grid3;

/// Evaluation window used for probing and inference.
pub const EVAL_WINDOW: [f32; 2] = [-1350.0, 1000.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability that either blur or sharpen is applied (each half of that).
    pub smooth_prob: f64,
    pub blur_sigma: [f32; 2],
    pub sharpen_sigma1: [f32; 2],
    pub sharpen_sigma2: f32,
    pub sharpen_alpha: [f32; 2],
    pub noise_prob: f64,
    pub noise_std: [f32; 2],
    pub window_fixed_prob: f64,
    pub window_fixed: [f32; 2],
    pub window_min: [f32; 2],
    pub window_max: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            smooth_prob: 0.5,
            blur_sigma: [0.25, 1.5],
            sharpen_sigma1: [0.5, 1.0],
            sharpen_sigma2: 0.5,
            sharpen_alpha: [10.0, 30.0],
            noise_prob: 0.5,
            noise_std: [0.0, 30.0],
            window_fixed_prob: 0.2,
            window_fixed: EVAL_WINDOW,
            window_min: [-1350.0, -1000.0],
            window_max: [300.0, 1000.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (name, p) in [
            ("smooth_prob", self.smooth_prob),
            ("noise_prob", self.noise_prob),
            ("window_fixed_prob", self.window_fixed_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                errs.push(format!("augment.{name} must be in [0, 1], got {p}"));
            }
        }
        for (name, [lo, hi]) in [
            ("blur_sigma", self.blur_sigma),
            ("sharpen_sigma1", self.sharpen_sigma1),
            ("sharpen_alpha", self.sharpen_alpha),
            ("noise_std", self.noise_std),
            ("window_fixed", self.window_fixed),
            ("window_min", self.window_min),
            ("window_max", self.window_max),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                errs.push(format!("augment.{name} must be a finite range with lo < hi, got [{lo}, {hi}]"));
            }
        }
        if self.blur_sigma[0] < 0.0 || self.sharpen_sigma1[0] < 0.0 || self.noise_std[0] < 0.0 {
            errs.push("augment sigmas and noise std must be >= 0".into());
        }
        if !(self.sharpen_sigma2.is_finite() && self.sharpen_sigma2 >= 0.0) {
            errs.push(format!("augment.sharpen_sigma2 must be >= 0, got {}", self.sharpen_sigma2));
        }
        if self.window_min[1] >= self.window_max[0] {
            errs.push("augment.window_min must lie entirely below augment.window_max".into());
        }
        errs
    }
}

/// Axial smoothing; sigmas are per axis (x, y) in voxels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Smooth {
    None,
    Blur { sigma: [f32; 2] },
    Sharpen { sigma1: [f32; 2], sigma2: f32, alpha: f32 },
}

/// One concrete draw of the augmentation parameters. Applying it is a pure
/// function of the spec and the patch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub smooth: Smooth,
    pub noise_std: f32,
    pub noise_seed: u64,
    pub window: [f32; 2],
}

impl AugmentSpec {
    /// Window-and-rescale only.
    pub fn identity(window: [f32; 2]) -> Self {
        AugmentSpec {
            smooth: Smooth::None,
            noise_std: 0.0,
            noise_seed: 0,
            window,
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f32; 2]) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

pub fn draw_augment_spec(config: &AugmentConfig, rng: &mut impl Rng) -> AugmentSpec {
    let smooth = if rng.random_bool(config.smooth_prob) {
        if rng.random_bool(0.5) {
            Smooth::Blur {
                sigma: [uniform(rng, config.blur_sigma), uniform(rng, config.blur_sigma)],
            }
        } else {
            Smooth::Sharpen {
                sigma1: [uniform(rng, config.sharpen_sigma1), uniform(rng, config.sharpen_sigma1)],
                sigma2: config.sharpen_sigma2,
                alpha: uniform(rng, config.sharpen_alpha),
            }
        }
    } else {
        Smooth::None
    };
    let noise_std = if rng.random_bool(config.noise_prob) {
        uniform(rng, config.noise_std)
    } else {
        0.0
    };
    let noise_seed = rng.random();
    let window = if rng.random_bool(config.window_fixed_prob) {
        config.window_fixed
    } else {
        [uniform(rng, config.window_min), uniform(rng, config.window_max)]
    };
    AugmentSpec {
        smooth,
        noise_std,
        noise_seed,
        window,
    }
}

/// Unit-mass Gaussian kernel truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / total) as f32).collect()
}

/// Convolves every line along `axis` with a Gaussian, clamping at the edges.
pub fn gaussian_blur_axis(grid: &Grid3<f32>, axis: usize, sigma: f32) -> Grid3<f32> {
    let kernel = gaussian_kernel(sigma);
    if kernel.len() == 1 {
        return grid.clone();
    }
    let radius = (kernel.len() / 2) as isize;
    let dims = grid.dims();
    let n = dims[axis] as isize;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let src = grid.data();
    let mut out = vec![0.0f32; src.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = ((i / stride) % dims[axis]) as isize;
        let base = i as isize - pos * stride as isize;
        let mut acc = 0.0f32;
        for (k, &w) in kernel.iter().enumerate() {
            let p = (pos + k as isize - radius).clamp(0, n - 1);
            acc += w * src[(base + p * stride as isize) as usize];
        }
        *o = acc;
    }
    Grid3::new(dims, out).expect("same extents")
}

/// Blur within each axial (x, y) slice.
pub fn axial_blur(grid: &Grid3<f32>, sigma: [f32; 2]) -> Grid3<f32> {
    gaussian_blur_axis(&gaussian_blur_axis(grid, 0, sigma[0]), 1, sigma[1])
}

/// Clip to `[a_min, a_max]` and map affinely onto `[0, 1]`.
#[inline]
pub fn window_rescale(v: f32, [a_min, a_max]: [f32; 2]) -> f32 {
    ((v.clamp(a_min, a_max) - a_min) / (a_max - a_min)).clamp(0.0, 1.0)
}

pub fn apply_augment(spec: &AugmentSpec, patch: &Grid3<f32>) -> Grid3<f32> {
    let mut out = match &spec.smooth {
        Smooth::None => patch.clone(),
        Smooth::Blur { sigma } => axial_blur(patch, *sigma),
        Smooth::Sharpen { sigma1, sigma2, alpha } => {
            let b1 = axial_blur(patch, *sigma1);
            let b2 = axial_blur(&b1, [*sigma2; 2]);
            let mut s = b1.clone();
            for (o, (&a, &b)) in s.data_mut().iter_mut().zip(b1.data().iter().zip(b2.data())) {
                *o = a + alpha * (a - b);
            }
            s
        }
    };
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, spec.noise_std).expect("finite std");
        let mut rng = Chacha::seed_from_u64(spec.noise_seed);
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    for v in out.data_mut() {
        *v = window_rescale(*v, spec.window);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_has_unit_mass_and_radius() {
        let k = gaussian_kernel(1.2);
        assert_eq!(k.len(), 2 * 4 + 1);
        assert!((k.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    #[test]
    fn window_anchor_values() {
        let spec = AugmentSpec::identity(EVAL_WINDOW);
        let g = Grid3::new([3, 1, 1], vec![-1350.0, 1000.0, -175.0]).unwrap();
        assert_eq!(apply_augment(&spec, &g).data(), &[0.0, 1.0, 0.5]);
    }
}
