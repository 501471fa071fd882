//! Reference planar systems with known limit-cycle geometry, used as oracles
//! and as CLI builtins.

use nalgebra::DMatrix;

use crate::sde::{Diffusion, VectorField};

/// Hopf normal form `ẋ = x − y − x r²`, `ẏ = x + y − y r²`.
/// Attracting unit circle with period 2π and radial multiplier `e^{−4π}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Hopf;

impl VectorField for Hopf {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let r2 = x[0] * x[0] + x[1] * x[1];
        out[0] = x[0] - x[1] - x[0] * r2;
        out[1] = x[0] + x[1] - x[1] * r2;
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (a, b) = (x[0], x[1]);
        let r2 = a * a + b * b;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 - r2 - 2.0 * a * a,
                -1.0 - 2.0 * a * b,
                1.0 - 2.0 * a * b,
                1.0 - r2 - 2.0 * b * b,
            ],
        )
    }
}

/// Hopf normal form with amplitude-dependent rotation,
/// `θ̇ = 1 + c(1 − r²)`, `ṙ = r(1 − r²)`.
/// Same cycle and period as [`Hopf`], but the isochrons are twisted, which
/// makes the phase–amplitude coupling `a(θ)` nonzero.
#[derive(Debug, Clone, Copy)]
pub struct ShearedHopf {
    pub shear: f64,
}

impl VectorField for ShearedHopf {
    fn dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let q = 1.0 - (x[0] * x[0] + x[1] * x[1]);
        let w = 1.0 + self.shear * q;
        out[0] = x[0] * q - x[1] * w;
        out[1] = x[1] * q + x[0] * w;
    }

    fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let (a, b) = (x[0], x[1]);
        let q = 1.0 - (a * a + b * b);
        let w = 1.0 + self.shear * q;
        let c = self.shear;
        DMatrix::from_row_slice(
            2,
            2,
            &[
                q - 2.0 * a * a + 2.0 * c * a * b,
                -2.0 * a * b - w + 2.0 * c * b * b,
                -2.0 * a * b + w - 2.0 * c * a * a,
                q - 2.0 * b * b - 2.0 * c * a * b,
            ],
        )
    }
}

/// Linear field `ẋ = M x`.
#[derive(Debug, Clone)]
pub struct LinearField {
    pub matrix: DMatrix<f64>,
}

impl LinearField {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols());
        Self { matrix }
    }

    /// Stable focus `ẋ = −λx − ωy`, `ẏ = ωx − λy`: trajectories spiral into
    /// the origin and there is no periodic orbit.
    pub fn focus(decay: f64, omega: f64) -> Self {
        Self::new(DMatrix::from_row_slice(2, 2, &[-decay, -omega, omega, -decay]))
    }
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        let m = &self.matrix;
        for i in 0..m.nrows() {
            let mut acc = 0.0;
            for j in 0..m.ncols() {
                acc += m[(i, j)] * x[j];
            }
            out[i] = acc;
        }
    }

    fn jacobian(&self, _x: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

/// Planar state-dependent diffusion
/// `P(x) = [[1 + αx, β], [−β, 1 + αy]]`, nondegenerate near the unit circle for
/// small `α`, `β`.
#[derive(Debug, Clone, Copy)]
pub struct AffineDiffusion2 {
    pub alpha: f64,
    pub beta: f64,
}

impl Diffusion for AffineDiffusion2 {
    fn dim(&self) -> usize {
        2
    }

    fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[1.0 + self.alpha * x[0], self.beta, -self.beta, 1.0 + self.alpha * x[1]],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::fd_jacobian;

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let pts = [[0.3, -1.2], [1.0, 0.0], [-0.7, 0.4]];
        let sheared = ShearedHopf { shear: 0.8 };
        for p in pts {
            let d1 = Hopf.jacobian(&p) - fd_jacobian(&Hopf, &p);
            let d2 = sheared.jacobian(&p) - fd_jacobian(&sheared, &p);
            assert!(d1.amax() < 1e-8);
            assert!(d2.amax() < 1e-8);
        }
    }
}
