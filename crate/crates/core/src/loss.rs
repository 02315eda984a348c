//! InfoNCE over `N` positive pairs of unit-norm projections.
//!
//! With `Z = [z1; z2]` (`2N` rows) and `S = Z Zᵀ / τ`, every row `r` of `S`
//! contributes `logsumexp_{c ≠ r} S[r, c] − S[r, partner(r)]`: the positive
//! pair plus all `2N − 2` other sampled voxels form the denominator. The loss
//! is the sum over all `2N` rows.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

fn check_pair_shapes(a: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    match (a, b) {
        ([n, d], [m, e]) if n == m && d == e && *n >= 1 => Ok((*n, *d)),
        _ => Err(Error::contract(format!(
            "info_nce expects two [N, d] batches with N >= 1, got {a:?} and {b:?}"
        ))),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be finite and > 0, got {tau}")));
    }
    Ok(())
}

/// Differentiable InfoNCE of `z1`, `z2` (both `[N, d]`, unit rows).
pub fn info_nce<T: Element>(g: &mut Graph<T>, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (n, _) = check_pair_shapes(g.shape(z1), g.shape(z2))?;
    let z = g.concat(&[z1, z2], 0)?;
    let sim = g.matmul_nt(z, z)?;
    let sim = g.scale(sim, 1.0 / tau)?;
    let rows = 2 * n;
    let self_mask = g.constant(Tensor::from_fn(vec![rows, rows], |i| {
        if i / rows == i % rows {
            T::neg_infinity()
        } else {
            T::zero()
        }
    }));
    let masked = g.add(sim, self_mask)?;
    let lse = g.logsumexp_last(masked)?;
    let positives: Vec<usize> = (0..rows).map(|r| r * rows + (r + n) % rows).collect();
    let pos = g.take(sim, &positives)?;
    let a = g.sum(lse)?;
    let b = g.sum(pos)?;
    g.sub(a, b)
}

/// Evaluates [`info_nce`] on plain tensors.
pub fn info_nce_value<T: Element>(z1: &Tensor<T>, z2: &Tensor<T>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(z1.clone());
    let b = g.constant(z2.clone());
    let l = info_nce(&mut g, a, b, tau)?;
    Ok(g.value(l).item().as_f64())
}

/// Literal double-precision evaluation with explicit loops and no
/// log-sum-exp stabilization. Intended for small `N` only.
pub fn info_nce_oracle(z1: &Tensor<f64>, z2: &Tensor<f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let (n, d) = check_pair_shapes(z1.shape(), z2.shape())?;
    let row = |k: usize, i: usize| {
        let t = if k == 0 { z1 } else { z2 };
        &t.data()[i * d..(i + 1) * d]
    };
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let numerator = (dot(row(0, i), row(1, i)) / tau).exp();
        for k in 0..2 {
            let mut denominator = numerator;
            for j in (0..n).filter(|&j| j != i) {
                for l in 0..2 {
                    denominator += (dot(row(k, i), row(l, j)) / tau).exp();
                }
            }
            total -= (numerator / denominator).ln();
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_is_exactly_zero() {
        let z = Tensor::<f32>::new(vec![1, 2], vec![0.6, 0.8]).unwrap();
        let w = Tensor::<f32>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(info_nce_value(&z, &w, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn identical_projections_give_log3_per_term() {
        let z = Tensor::<f64>::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        for tau in [0.05, 1.0, 100.0] {
            let l = info_nce_value(&z, &z, tau).unwrap();
            assert!((l - 4.0 * 3f64.ln()).abs() <= 1e-9, "{tau}: {l}");
        }
    }

    #[test]
    fn non_positive_temperature_is_a_config_error() {
        let z = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(info_nce_value(&z, &z, 0.0), Err(Error::Config(_))));
        assert!(matches!(info_nce_oracle(&z, &z, -1.0), Err(Error::Config(_))));
    }
}
