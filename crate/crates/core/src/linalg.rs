//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Eigenvalues of a real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    if m.is_empty() {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Orthonormal basis `Z` (m×(m−1)) of the orthogonal complement of the unit
/// vector `v`, oriented so that `det[v, Z] = +1`.
///
/// Built from a Householder reflector that maps `e_k` to `v`, where `k` is the
/// coordinate in which `v` is largest.
pub fn orthonormal_complement(v: &DVector<f64>) -> DMatrix<f64> {
    let m = v.len();
    assert!(m >= 1);
    let k = v.iamax();
    let mut w = v.clone();
    let s = if v[k] >= 0.0 { 1.0 } else { -1.0 };
    // Reflector H = I - 2wwᵀ/|w|² with w = v - s e_k sends s e_k to v.
    w[k] -= s;
    let wn2 = w.norm_squared();
    let mut h = DMatrix::<f64>::identity(m, m);
    if wn2 > 0.0 {
        h -= (&w * w.transpose()) * (2.0 / wn2);
    }
    let cols: Vec<usize> = (0..m).filter(|&i| i != k).collect();
    let mut z = DMatrix::<f64>::zeros(m, m - 1);
    for (j, &c) in cols.iter().enumerate() {
        z.set_column(j, &h.column(c));
    }
    if m >= 2 {
        let mut full = DMatrix::<f64>::zeros(m, m);
        full.set_column(0, v);
        full.view_mut((0, 1), (m, m - 1)).copy_from(&z);
        if full.determinant() < 0.0 {
            let c = -z.column(0);
            z.set_column(0, &c);
        }
    }
    z
}

/// Orthonormal polar factor `U Vᵀ` of a tall matrix.
pub fn polar_orthonormalize(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return a.clone();
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd computed U");
    let vt = svd.v_t.expect("svd computed Vᵀ");
    u * vt
}

/// Symmetric square root of a symmetric positive semidefinite matrix.
/// Negative eigenvalues produced by rounding are clamped to zero.
pub fn sym_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.is_empty() {
        return s.clone();
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let q = &eig.eigenvectors;
    let r = q * d * q.transpose();
    (&r + r.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_sym_eigenvalue(s: &DMatrix<f64>) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let sym = (s + s.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

/// Principal logarithm of a rotation `Q ∈ SO(k)`, returned as a skew-symmetric
/// matrix `L` with `exp(L) = Q`.
///
/// Rotations with an angle near π fall back to the real Schur form, where
/// eigenvalues at −1 come in pairs and are combined into half-turn planes.
pub fn so_log(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = q.nrows();
    if q.ncols() != k {
        return Err(Error::DimensionMismatch {
            symbol: "Q",
            expected: k,
            got: q.ncols(),
        });
    }
    if k <= 1 {
        if k == 1 && q[(0, 0)] < 0.0 {
            return Err(Error::InvalidArgument(
                "holonomy reverses orientation; refine the grid".into(),
            ));
        }
        return Ok(DMatrix::zeros(k, k));
    }
    if k == 2 {
        let angle = (q[(1, 0)] - q[(0, 1)]).atan2(q[(0, 0)] + q[(1, 1)]);
        return Ok(DMatrix::from_row_slice(2, 2, &[0.0, -angle, angle, 0.0]));
    }
    if q.determinant() < 0.0 {
        return Err(Error::InvalidArgument(
            "holonomy reverses orientation; refine the grid".into(),
        ));
    }
    // Q commutes with S = (Q + Qᵀ)/2, and on each eigenspace of S with
    // eigenvalue cos θ it acts as cos θ + K with K = (Q − Qᵀ)/2, so
    // log Q = f(S) K with f(c) = acos(c)/√(1 − c²). This avoids a Schur
    // decomposition, which converges slowly for near-identity rotations.
    let sym = (q + q.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    if eig.eigenvalues.min() > -0.9 {
        let f = eig.eigenvalues.map(|c| {
            let c = c.min(1.0);
            if c > 1.0 - 1e-6 {
                let e = 1.0 - c;
                1.0 + e / 3.0 + 2.0 * e * e / 15.0
            } else {
                c.acos() / (1.0 - c * c).sqrt()
            }
        });
        let skew = (q - q.transpose()) * 0.5;
        let l = &eig.eigenvectors * DMatrix::from_diagonal(&f) * eig.eigenvectors.transpose() * skew;
        return Ok((&l - l.transpose()) * 0.5);
    }
    let (u, t) = q.clone().schur().unpack();
    let mut log_t = DMatrix::<f64>::zeros(k, k);
    let mut half_turns: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < k {
        let is_block = i + 1 < k && t[(i + 1, i)].abs() > 1e-12;
        if is_block {
            let angle = ((t[(i + 1, i)] - t[(i, i + 1)]) * 0.5)
                .atan2((t[(i, i)] + t[(i + 1, i + 1)]) * 0.5);
            log_t[(i, i + 1)] = -angle;
            log_t[(i + 1, i)] = angle;
            i += 2;
        } else {
            if t[(i, i)] < 0.0 {
                half_turns.push(i);
            }
            i += 1;
        }
    }
    if half_turns.len() % 2 == 1 {
        return Err(Error::InvalidArgument(
            "rotation logarithm: unpaired eigenvalue -1".into(),
        ));
    }
    for pair in half_turns.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        log_t[(a, b)] = -std::f64::consts::PI;
        log_t[(b, a)] = std::f64::consts::PI;
    }
    let l = &u * log_t * u.transpose();
    Ok((&l - l.transpose()) * 0.5)
}

/// Matrix exponential.
pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    m.exp()
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}
