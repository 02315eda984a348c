//! Forward/backward kernels for the non-convolution ops.

use super::Element;

/// Per-(batch, channel) statistics saved by instance norm for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `shape` is `[batch, ch, spatial...]`; returns output and statistics, or the
/// index of the first slice whose variance + eps is not positive.
pub(crate) fn instance_norm_forward<T: Element>(
    input: &[T],
    batch: usize,
    ch: usize,
    spatial: usize,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Vec<T>, NormStats<T>), usize> {
    let mut out = vec![T::zero(); input.len()];
    let mut mean = Vec::with_capacity(batch * ch);
    let mut inv_std = Vec::with_capacity(batch * ch);
    let n = spatial as f64;
    for s in 0..batch * ch {
        let c = s % ch;
        let x = &input[s * spatial..(s + 1) * spatial];
        let mu = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = x.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>() / n;
        let denom = var + eps;
        if denom <= 0.0 || !denom.is_finite() {
            return Err(s);
        }
        let inv = 1.0 / denom.sqrt();
        let (mu_t, inv_t) = (T::from_f64(mu), T::from_f64(inv));
        for (o, &v) in out[s * spatial..(s + 1) * spatial].iter_mut().zip(x) {
            *o = (v - mu_t) * inv_t * scale[c] + shift[c];
        }
        mean.push(mu_t);
        inv_std.push(inv_t);
    }
    Ok((out, NormStats { mean, inv_std }))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn instance_norm_backward<T: Element>(
    input: &[T],
    grad_out: &[T],
    batch: usize,
    ch: usize,
    spatial: usize,
    scale: &[T],
    stats: &NormStats<T>,
    mut grad_input: Option<&mut [T]>,
    mut grad_scale: Option<&mut [T]>,
    mut grad_shift: Option<&mut [T]>,
) {
    let n = T::from_f64(spatial as f64);
    for s in 0..batch * ch {
        let c = s % ch;
        let range = s * spatial..(s + 1) * spatial;
        let x = &input[range.clone()];
        let dy = &grad_out[range.clone()];
        let (mu, inv) = (stats.mean[s], stats.inv_std[s]);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for (&v, &d) in x.iter().zip(dy) {
            sum_dy += d;
            sum_dy_xhat += d * (v - mu) * inv;
        }
        if let Some(gs) = grad_scale.as_deref_mut() {
            gs[c] += sum_dy_xhat;
        }
        if let Some(gb) = grad_shift.as_deref_mut() {
            gb[c] += sum_dy;
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let k = scale[c] * inv / n;
            for ((g, &v), &d) in gi[range].iter_mut().zip(x).zip(dy) {
                let xhat = (v - mu) * inv;
                *g += k * (n * d - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
}

/// Nearest-neighbour upsampling of `[outer, X, Y, Z]` blocks by integer factors.
pub(crate) fn upsample_forward<T: Element>(
    input: &[T],
    outer: usize,
    dims: [usize; 3],
    factor: [usize; 3],
) -> Vec<T> {
    let [x, y, z] = dims;
    let [fx, fy, fz] = factor;
    let (ox, oy, oz) = (x * fx, y * fy, z * fz);
    let mut out = Vec::with_capacity(outer * ox * oy * oz);
    for o in 0..outer {
        let src = &input[o * x * y * z..(o + 1) * x * y * z];
        for i in 0..ox {
            for j in 0..oy {
                let row = &src[((i / fx) * y + j / fy) * z..][..z];
                for k in 0..oz {
                    out.push(row[k / fz]);
                }
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Element>(
    grad_out: &[T],
    outer: usize,
    dims: [usize; 3],
    factor: [usize; 3],
) -> Vec<T> {
    let [x, y, z] = dims;
    let [fx, fy, fz] = factor;
    let (ox, oy, oz) = (x * fx, y * fy, z * fz);
    let mut grad = vec![T::zero(); outer * x * y * z];
    let mut it = grad_out.iter();
    for o in 0..outer {
        let dst = &mut grad[o * x * y * z..(o + 1) * x * y * z];
        for i in 0..ox {
            for j in 0..oy {
                let row = &mut dst[((i / fx) * y + j / fy) * z..][..z];
                for k in 0..oz {
                    row[k / fz] += *it.next().expect("upsample grad length");
                }
            }
        }
    }
    grad
}

/// Row-wise log-sum-exp over the trailing axis with max subtraction.
pub(crate) fn logsumexp_rows<T: Element>(input: &[T], width: usize) -> Vec<T> {
    input
        .chunks_exact(width)
        .map(|row| {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            if m == T::neg_infinity() || m == T::infinity() {
                return m;
            }
            let m = m.as_f64();
            let s: f64 = row.iter().map(|&v| (v.as_f64() - m).exp()).sum();
            T::from_f64(m + s.ln())
        })
        .collect()
}
