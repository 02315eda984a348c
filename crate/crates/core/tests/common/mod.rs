//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voxcl_core::tensor::{Graph, Tensor, Var};
use voxcl_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences with step `h` against the tape's gradient.
///
/// Returns the worst norm-wise relative error over all inputs:
/// `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, 1e-12)`.
pub fn gradcheck(
    inputs: &[Tensor<f64>],
    h: f64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (k, (x, &v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        let mut numeric = vec![0.0; x.numel()];
        let mut xs = inputs.to_vec();
        for i in 0..x.numel() {
            let orig = x.data()[i];
            xs[k].data_mut()[i] = orig + h;
            let fp = eval(&xs);
            xs[k].data_mut()[i] = orig - h;
            let fm = eval(&xs);
            xs[k].data_mut()[i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = analytic.sq_norm().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-12));
    }
    worst
}

/// Directional-derivative check for large parameter sets: compares
/// `<grad, d>` to `(f(x + h d) - f(x - h d)) / 2h` for random unit directions.
pub fn directional_check(
    inputs: &[Tensor<f64>],
    h: f64,
    directions: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let grads = g.backward(out).expect("backward");
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dirs: Vec<Tensor<f64>> = inputs
            .iter()
            .map(|x| Tensor::randn(x.shape().to_vec(), 1.0, &mut r))
            .collect();
        let norm: f64 = dirs.iter().map(|d| d.sq_norm()).sum::<f64>().sqrt();
        for d in &mut dirs {
            d.data_mut().iter_mut().for_each(|v| *v /= norm);
        }
        let analytic: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(&v, d)| {
                grads
                    .get(v)
                    .map(|g| g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
                    .unwrap_or(0.0)
            })
            .sum();
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(x, d)| {
                    let data = x.data().iter().zip(d.data()).map(|(a, b)| a + sign * h * b).collect();
                    Tensor::new(x.shape().to_vec(), data).unwrap()
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0)) - eval(&shifted(-1.0))) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12));
    }
    worst
}

/// Seven nested loops, no lowering: the reference for `conv3d`.
pub fn naive_conv3d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
) -> Tensor<f64> {
    let s = input.shape();
    let w = weight.shape();
    let (b, cin, ix, iy, iz) = (s[0], s[1], s[2], s[3], s[4]);
    let (cout, kx, ky, kz) = (w[0], w[2], w[3], w[4]);
    let ox = (ix + 2 * pad[0] - kx) / stride[0] + 1;
    let oy = (iy + 2 * pad[1] - ky) / stride[1] + 1;
    let oz = (iz + 2 * pad[2] - kz) / stride[2] + 1;
    let mut out = Tensor::<f64>::zeros(vec![b, cout, ox, oy, oz]);
    for n in 0..b {
        for o in 0..cout {
            for x in 0..ox {
                for y in 0..oy {
                    for z in 0..oz {
                        let mut acc = bias.map(|t| t.data()[o]).unwrap_or(0.0);
                        for c in 0..cin {
                            for dx in 0..kx {
                                for dy in 0..ky {
                                    for dz in 0..kz {
                                        let xi = (x * stride[0] + dx) as isize - pad[0] as isize;
                                        let yi = (y * stride[1] + dy) as isize - pad[1] as isize;
                                        let zi = (z * stride[2] + dz) as isize - pad[2] as isize;
                                        if xi < 0 || yi < 0 || zi < 0 {
                                            continue;
                                        }
                                        let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
                                        if xi >= ix || yi >= iy || zi >= iz {
                                            continue;
                                        }
                                        acc += input.at(&[n, c, xi, yi, zi]) * weight.at(&[o, c, dx, dy, dz]);
                                    }
                                }
                            }
                        }
                        let off = out.offset(&[n, o, x, y, z]);
                        out.data_mut()[off] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Plain BFS over the candidate-air set seeded from all eight corners.
/// `dims` is (dx, dy, dz); `air` is indexed `x + dx * (y + dy * z)`.
/// Returns `true` for voxels connected to a corner.
pub fn bfs_corner_air(air: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [dx, dy, dz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + dx * (y + dy * z);
    let mut seen = vec![false; air.len()];
    let mut queue = VecDeque::new();
    for &x in &[0, dx - 1] {
        for &y in &[0, dy - 1] {
            for &z in &[0, dz - 1] {
                let i = idx(x, y, z);
                if air[i] && !seen[i] {
                    seen[i] = true;
                    queue.push_back((x, y, z));
                }
            }
        }
    }
    while let Some((x, y, z)) = queue.pop_front() {
        let mut nbrs = Vec::new();
        if x > 0 { nbrs.push((x - 1, y, z)); }
        if x + 1 < dx { nbrs.push((x + 1, y, z)); }
        if y > 0 { nbrs.push((x, y - 1, z)); }
        if y + 1 < dy { nbrs.push((x, y + 1, z)); }
        if z > 0 { nbrs.push((x, y, z - 1)); }
        if z + 1 < dz { nbrs.push((x, y, z + 1)); }
        for (a, b, c) in nbrs {
            let i = idx(a, b, c);
            if air[i] && !seen[i] {
                seen[i] = true;
                queue.push_back((a, b, c));
            }
        }
    }
    seen
}

/// Literal double-loop InfoNCE, kept independent of the library's oracle.
pub fn info_nce_literal(z1: &[Vec<f64>], z2: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = z1.len();
    let view = |k: usize, i: usize| if k == 0 { &z1[i] } else { &z2[i] };
    let mut total = 0.0;
    for i in 0..n {
        let pos = (dot(&z1[i], &z2[i]) / tau).exp();
        for k in 0..2 {
            let mut denom = pos;
            for j in 0..n {
                if j == i {
                    continue;
                }
                for l in 0..2 {
                    denom += (dot(view(k, i), view(l, j)) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
    }
    total
}
