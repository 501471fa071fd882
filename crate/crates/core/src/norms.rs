//! Adapted norm `|x|′ = Σ_{k=0}^{K} |A^k x| / r^k`, `r = 1 − ε`, in which a
//! stable matrix `A` with `ρ(A) < r` is a contraction with factor `r`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, spectral_radius};

/// Required gap between `ρ(A)` and `1 − ε`.
pub const RADIUS_MARGIN: f64 = 1e-9;

/// Relative bound on the discarded tail of the series.
pub const TAIL_TOLERANCE: f64 = 1e-12;

const MAX_TERMS: usize = 1_000_000;

#[derive(Debug, Clone)]
pub struct NormOracle {
    pub a: DMatrix<f64>,
    pub epsilon: f64,
    pub r: f64,
    /// Index of the last retained term.
    pub truncation: usize,
    pub gamma1: f64,
    pub gamma2: f64,
    /// Upper bound on `Σ_{k>K} |A^k| / r^k`.
    pub tail_bound: f64,
    /// `A^k / r^k` for `k = 0..=K`, stored row-major for fast evaluation.
    scaled_powers: Vec<Vec<f64>>,
}

impl NormOracle {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        debug_assert_eq!(x.len(), d);
        let mut total = 0.0;
        for p in &self.scaled_powers {
            let mut s2 = 0.0;
            for i in 0..d {
                let row = &p[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    acc += row[j] * x[j];
                }
                s2 += acc * acc;
            }
            total += s2.sqrt();
        }
        total
    }

    pub fn norm_vec(&self, x: &DVector<f64>) -> f64 {
        self.norm(x.as_slice())
    }

    /// Membership in the closed ball `D_h = {x : |x|′ ≤ h}`.
    pub fn in_domain(&self, x: &[f64], h: f64) -> bool {
        self.norm(x) <= h
    }

    pub fn equivalence_constants(&self) -> (f64, f64) {
        (self.gamma1, self.gamma2)
    }

    /// Upper bound on the operator norm of `M` in the adapted norm,
    /// `|M|′ ≤ γ₂ |M|₂` (using `|x| ≤ |x|′`).
    pub fn operator_norm_bound(&self, m: &DMatrix<f64>) -> f64 {
        self.gamma2 * spectral_norm(m)
    }
}

/// Build the adapted norm for `A` and `ε`.
///
/// Terms `t_k = |A^k|₂ / r^k` are submultiplicative, so once `t_j ≤ 1/2` the
/// tail past `K` is at most `(Σ_{l=K+1}^{K+j} t_l) / (1 − t_j)`. `K` is the
/// first index where that bound drops below [`TAIL_TOLERANCE`]. Since
/// `|x|′ ≥ |x|`, the bound is relative to the norm value.
pub fn adapted_norm(a: &DMatrix<f64>, epsilon: f64) -> Result<NormOracle> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            symbol: "A",
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )));
    }
    let r = 1.0 - epsilon;
    let rho = spectral_radius(a);
    if !(rho <= r - RADIUS_MARGIN) {
        return Err(Error::NotContracting {
            spectral_radius: rho,
            bound: r,
        });
    }
    let d = a.nrows();
    let mut powers = vec![DMatrix::<f64>::identity(d, d)];
    let mut terms = vec![1.0];
    let push_next = |powers: &mut Vec<DMatrix<f64>>, terms: &mut Vec<f64>| -> Result<()> {
        if powers.len() > MAX_TERMS {
            return Err(Error::NotContracting {
                spectral_radius: rho,
                bound: r,
            });
        }
        let next = (a * powers.last().unwrap()) / r;
        terms.push(spectral_norm(&next));
        powers.push(next);
        Ok(())
    };
    // First j with t_j ≤ 1/2.
    let mut j = 1;
    loop {
        while terms.len() <= j {
            push_next(&mut powers, &mut terms)?;
        }
        if terms[j] <= 0.5 {
            break;
        }
        j += 1;
    }
    let tj = terms[j];
    let mut k = 0;
    let tail_bound = loop {
        while terms.len() <= k + j {
            push_next(&mut powers, &mut terms)?;
        }
        let window: f64 = terms[k + 1..=k + j].iter().sum();
        let bound = window / (1.0 - tj);
        if bound <= TAIL_TOLERANCE {
            break bound;
        }
        k += 1;
    };
    powers.truncate(k + 1);
    let gamma2: f64 = terms[..=k].iter().sum();
    let scaled_powers = powers
        .iter()
        .map(|p| {
            let mut row_major = Vec::with_capacity(d * d);
            for i in 0..d {
                for jj in 0..d {
                    row_major.push(p[(i, jj)]);
                }
            }
            row_major
        })
        .collect();
    Ok(NormOracle {
        a: a.clone(),
        epsilon,
        r,
        truncation: k,
        gamma1: 1.0,
        gamma2,
        tail_bound,
        scaled_powers,
    })
}

pub fn in_domain(x: &[f64], oracle: &NormOracle, h: f64) -> bool {
    oracle.in_domain(x, h)
}

pub fn equivalence_constants(oracle: &NormOracle) -> (f64, f64) {
    oracle.equivalence_constants()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn diagonal_half_gives_six() {
        let a = DMatrix::from_diagonal_element(2, 2, 0.5);
        let o = adapted_norm(&a, 0.4).unwrap();
        let x = [0.3, -0.4];
        assert!((o.norm(&x) / 0.5 - 6.0).abs() < 1e-11);
        let ax = [0.15, -0.2];
        assert!((o.norm(&ax) / 0.5 - 3.0).abs() < 1e-11);
        let (g1, g2) = o.equivalence_constants();
        assert_eq!(g1, 1.0);
        assert!((g2 - 6.0).abs() <= 6.0 * 1e-12);
    }

    #[test]
    fn zero_matrix_is_euclidean() {
        let o = adapted_norm(&DMatrix::zeros(3, 3), 0.5).unwrap();
        assert_eq!(o.truncation, 0);
        assert_eq!(o.equivalence_constants(), (1.0, 1.0));
        assert!((o.norm(&[3.0, 4.0, 0.0]) - 5.0).abs() < 1e-15);
    }

    #[test]
    fn hopf_scalar_closed_form() {
        let a = (-4.0 * PI).exp();
        let o = adapted_norm(&DMatrix::from_element(1, 1, a), 0.9).unwrap();
        let expected = 1.0 / (1.0 - a / 0.1);
        assert!((o.norm(&[1.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn rejects_spectral_radius_violation() {
        let a = DMatrix::from_diagonal_element(2, 2, 0.7);
        assert!(matches!(adapted_norm(&a, 0.4), Err(Error::NotContracting { .. })));
    }

    #[test]
    fn closed_ball_boundary() {
        let o = adapted_norm(&DMatrix::from_diagonal_element(2, 2, 0.5), 0.4).unwrap();
        let x = [1.0, 0.0];
        let h = o.norm(&x);
        assert!(in_domain(&x, &o, h));
        assert!(in_domain(&[0.0, 0.0], &o, 1e-9));
        assert!(!in_domain(&[2.0, 0.0], &o, h));
    }
}
