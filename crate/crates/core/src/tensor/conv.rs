//! Direct 3D convolution (cross-correlation convention) lowered to GEMM.
//!
//! For each batch item the receptive fields are unrolled into a column matrix
//! of shape `[in_ch * kx * ky * kz, out_positions]` and multiplied by the
//! weight matrix. Accumulation order is fixed by the unroll order and the GEMM
//! kernel, so results are reproducible run to run.

use super::{gemm, Element, MatRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    /// 1x1x1, stride 1, no padding: the input slice already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Output extent along one axis, or `None` when the kernel does not fit.
pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output indices `lo..hi` along z whose input index `z·s + d − p` lies in `0..n`.
fn z_range(out: usize, n: usize, s: usize, d: usize, p: usize) -> (usize, usize) {
    let lo = if p > d { (p - d).div_ceil(s) } else { 0 }.min(out);
    let hi = if n + p > d { (n + p - d).div_ceil(s) } else { 0 }.clamp(lo, out);
    (lo, hi)
}

fn im2col<T: Element>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let [ix, iy, iz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.padding;
    let [ox, oy, oz] = g.output;
    let p = g.out_positions();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &input[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for dx in 0..kx {
            for dy in 0..ky {
                for dz in 0..kz {
                    let (lo, hi) = z_range(oz, iz, sz, dz, pz);
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut j = 0;
                    for x in 0..ox {
                        let xi = (x * sx + dx) as isize - px as isize;
                        for y in 0..oy {
                            let yi = (y * sy + dy) as isize - py as isize;
                            let dst_row = &mut dst[j..j + oz];
                            j += oz;
                            if xi < 0 || xi >= ix as isize || yi < 0 || yi >= iy as isize {
                                dst_row.fill(T::zero());
                                continue;
                            }
                            let base = (xi as usize * iy + yi as usize) * iz;
                            dst_row[..lo].fill(T::zero());
                            dst_row[hi..].fill(T::zero());
                            if sz == 1 {
                                let start = base + lo + dz - pz;
                                dst_row[lo..hi].copy_from_slice(&plane[start..start + hi - lo]);
                            } else {
                                for (z, v) in dst_row[lo..hi].iter_mut().enumerate() {
                                    *v = plane[base + (z + lo) * sz + dz - pz];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let [ix, iy, iz] = g.input;
    let [kx, ky, kz] = g.kernel;
    let [sx, sy, sz] = g.stride;
    let [px, py, pz] = g.padding;
    let [ox, oy, oz] = g.output;
    let p = g.out_positions();
    let mut row = 0;
    for c in 0..g.in_ch {
        let plane = &mut grad_input[c * ix * iy * iz..(c + 1) * ix * iy * iz];
        for dx in 0..kx {
            for dy in 0..ky {
                for dz in 0..kz {
                    let (lo, hi) = z_range(oz, iz, sz, dz, pz);
                    let src = &cols[row * p..(row + 1) * p];
                    let mut j = 0;
                    for x in 0..ox {
                        let xi = (x * sx + dx) as isize - px as isize;
                        for y in 0..oy {
                            let yi = (y * sy + dy) as isize - py as isize;
                            let src_row = &src[j..j + oz];
                            j += oz;
                            if xi < 0 || xi >= ix as isize || yi < 0 || yi >= iy as isize {
                                continue;
                            }
                            let base = (xi as usize * iy + yi as usize) * iz;
                            if sz == 1 {
                                let start = base + lo + dz - pz;
                                for (d, &v) in plane[start..start + hi - lo].iter_mut().zip(&src_row[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for (z, &v) in src_row[lo..hi].iter().enumerate() {
                                    plane[base + (z + lo) * sz + dz - pz] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (pin, pout, k) = (g.in_positions(), g.out_positions(), g.patch_len());
    let mut out = vec![T::zero(); g.batch * g.out_ch * pout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * pout] };
    let w = MatRef::new(weight, g.out_ch, k);
    for b in 0..g.batch {
        let x = &input[b * g.in_ch * pin..(b + 1) * g.in_ch * pin];
        let y = &mut out[b * g.out_ch * pout..(b + 1) * g.out_ch * pout];
        let cols_ref = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        gemm(w, MatRef::new(cols_ref, k, pout), T::zero(), y);
        if let Some(bias) = bias {
            for (row, &bv) in y.chunks_exact_mut(pout).zip(bias) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradients requested from [`conv3d_backward`]; `None` entries are skipped.
pub(crate) struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(crate) fn conv3d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grads: ConvGrads<'_, T>,
) {
    let (pin, pout, k) = (g.in_positions(), g.out_positions(), g.patch_len());
    let ConvGrads {
        input: mut grad_input,
        weight: mut grad_weight,
        bias: mut grad_bias,
    } = grads;
    let need_cols = grad_weight.is_some() && !g.is_pointwise();
    let mut cols = if need_cols { vec![T::zero(); k * pout] } else { Vec::new() };
    let mut dcols = if grad_input.is_some() && !g.is_pointwise() {
        vec![T::zero(); k * pout]
    } else {
        Vec::new()
    };
    let w = MatRef::new(weight, g.out_ch, k);
    for b in 0..g.batch {
        let x = &input[b * g.in_ch * pin..(b + 1) * g.in_ch * pin];
        let dy = &grad_out[b * g.out_ch * pout..(b + 1) * g.out_ch * pout];
        let dy_mat = MatRef::new(dy, g.out_ch, pout);
        if let Some(gb) = grad_bias.as_deref_mut() {
            for (acc, row) in gb.iter_mut().zip(dy.chunks_exact(pout)) {
                *acc += row.iter().copied().sum();
            }
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            let cols_ref = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            gemm(dy_mat, MatRef::new(cols_ref, k, pout).t(), T::one(), gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            let gi = &mut gi[b * g.in_ch * pin..(b + 1) * g.in_ch * pin];
            if g.is_pointwise() {
                gemm(w.t(), dy_mat, T::one(), gi);
            } else {
                gemm(w.t(), dy_mat, T::zero(), &mut dcols);
                col2im(g, &dcols, gi);
            }
        }
    }
}
