//! Matrix square roots of symmetric positive semi-definite matrices.
//!
//! [`ns_sqrt`] runs the coupled Newton–Schulz iteration on the tape, so the
//! result is differentiable by unrolling. [`eig_sqrt_oracle`] is an
//! independent reference built on a cyclic Jacobi eigendecomposition.

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

pub const DEFAULT_NS_ITERS: usize = 5;

/// Traces at or below this are treated as a zero matrix.
pub const DEGENERATE_TRACE: Real = 1e-12;

const SYMMETRY_TOL: Real = 1e-9;
const PSD_TOL: Real = 1e-9;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Square symmetric PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Tensor);

impl SpdMatrix {
    /// Validates symmetry and eigenvalues ≥ −1e-9 (both scaled by the largest entry).
    pub fn new(values: Tensor) -> Result<Self> {
        let n = square_dim(&values).map_err(Error::Linalg)?;
        let scale = max_abs(values.data()).max(1.0);
        let asym = symmetry_defect(values.data(), n);
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::Linalg(format!("matrix is not symmetric (defect {asym:.3e})")));
        }
        let (eigvals, _) = symmetric_eigen(&values)?;
        let min = eigvals.iter().cloned().fold(Real::INFINITY, Real::min);
        if min < -PSD_TOL * scale {
            return Err(Error::Linalg(format!("matrix is not PSD (eigenvalue {min:.3e})")));
        }
        Ok(SpdMatrix(values))
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn square_dim(t: &Tensor) -> std::result::Result<usize, String> {
    match t.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(format!("expected a square matrix, got shape {s:?}")),
    }
}

fn max_abs(data: &[Real]) -> Real {
    data.iter().fold(0.0, |m: Real, v| m.max(v.abs()))
}

/// Largest `|a_ij − a_ji|` of a row-major `n × n` block.
pub fn symmetry_defect(data: &[Real], n: usize) -> Real {
    let mut worst: Real = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((data[i * n + j] - data[j * n + i]).abs());
        }
    }
    worst
}

/// Newton–Schulz square root of each `n × n` matrix in `a` (`[n,n]` or `[b,n,n]`).
///
/// Each matrix is scaled by its trace, iterated
/// `Y ← ½·Y(3I − ZY)`, `Z ← ½·(3I − ZY)Z` from `Y = Â`, `Z = I`, and the
/// result rescaled by `√tr`. Matrices with trace ≤ [`DEGENERATE_TRACE`] map
/// to zero.
pub fn ns_sqrt<'t>(a: Var<'t>, iters: usize) -> std::result::Result<Var<'t>, TensorError> {
    if iters == 0 {
        return Err(TensorError::invalid("ns_sqrt", "iteration count must be at least 1"));
    }
    let shape = a.shape();
    let (batch, n, batched) = match shape.as_slice() {
        [r, c] if r == c => (1, *r, false),
        [b, r, c] if r == c => (*b, *r, true),
        _ => return Err(TensorError::invalid("ns_sqrt", format!("expected square matrices, got {shape:?}"))),
    };
    let tape = a.tape();
    let a = a.reshape(&[batch, n, n])?;

    let value = a.value();
    let mut offsets = Vec::with_capacity(batch);
    let mut mask = Vec::with_capacity(batch);
    for b in 0..batch {
        let block = &value.data()[b * n * n..(b + 1) * n * n];
        let scale = max_abs(block).max(1.0);
        let asym = symmetry_defect(block, n);
        if asym > SYMMETRY_TOL * scale {
            return Err(TensorError::invalid(
                "ns_sqrt",
                format!("matrix {b} is not symmetric (defect {asym:.3e})"),
            ));
        }
        let trace: Real = (0..n).map(|i| block[i * n + i]).sum();
        let degenerate = trace <= DEGENERATE_TRACE;
        offsets.push(if degenerate { 1.0 - trace } else { 0.0 });
        mask.push(if degenerate { 0.0 } else { 1.0 });
    }

    let eye = tape
        .constant(Tensor::eye(n))
        .broadcast_to(&[batch, n, n])?;
    let trace = a.mul(eye)?.sum(&[1, 2])?;
    let trace = trace.add(tape.constant(Tensor::from_vec(offsets)))?;
    let trace_b = trace.reshape(&[batch, 1, 1])?.broadcast_to(&[batch, n, n])?;

    let mut y = a.div(trace_b)?;
    let mut z = eye;
    let three_i = eye.scale(3.0);
    for _ in 0..iters {
        let t = three_i.sub(z.matmul(y)?)?.scale(0.5);
        y = y.matmul(t)?;
        z = t.matmul(z)?;
    }

    let root = trace.sqrt().mul(tape.constant(Tensor::from_vec(mask)))?;
    let out = y.mul(root.reshape(&[batch, 1, 1])?.broadcast_to(&[batch, n, n])?)?;
    if batched {
        Ok(out)
    } else {
        out.reshape(&[n, n])
    }
}

/// Convenience wrapper of [`ns_sqrt`] on a plain matrix.
pub fn ns_sqrt_matrix(a: &SpdMatrix, iters: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let out = ns_sqrt(tape.constant(a.values().clone()), iters)?;
    Ok((*out.value()).clone())
}

/// Eigenvalues and eigenvectors (as columns of `Q`) of a symmetric matrix
/// by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &Tensor) -> Result<(Vec<Real>, Tensor)> {
    let n = square_dim(a).map_err(Error::Linalg)?;
    let mut m = a.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let norm = a.frobenius_norm();
    let tol = Real::EPSILON * norm.max(Real::MIN_POSITIVE);
    let off = |m: &[Real]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = off(&m) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Linalg(format!(
                "Jacobi did not converge after {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {:.3e})",
                off(&m)
            )));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= Real::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (kp, kq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * kp - s * kq;
                    m[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * pk - s * qk;
                    m[q * n + k] = s * pk + c * qk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let (kp, kq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * kp - s * kq;
                    v[k * n + q] = s * kp + c * kq;
                }
            }
        }
        sweeps += 1;
        converged = off(&m) <= tol;
    }
    let eigvals = (0..n).map(|i| m[i * n + i]).collect();
    Ok((eigvals, Tensor::new(vec![n, n], v)?))
}

/// Reference square root `Q·√max(Λ,0)·Qᵀ`.
pub fn eig_sqrt_oracle(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a).map_err(Error::Linalg)?;
    let scale = max_abs(a.data()).max(1.0);
    if symmetry_defect(a.data(), n) > SYMMETRY_TOL * scale {
        return Err(Error::Linalg("eig_sqrt_oracle: matrix is not symmetric".into()));
    }
    let (eigvals, q) = symmetric_eigen(a)?;
    let roots: Vec<Real> = eigvals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    Ok(Tensor::from_fn(&[n, n], |ij| {
        (0..n)
            .map(|k| q.get(&[ij[0], k]) * roots[k] * q.get(&[ij[1], k]))
            .sum()
    }))
}

/// Dense product of two square matrices, for residual checks.
pub fn matmul_square(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    Tensor::from_fn(&[n, n], |ij| (0..n).map(|k| a.get(&[ij[0], k]) * b.get(&[k, ij[1]])).sum())
}

/// `‖Y·Y − A‖_F / ‖A‖_F`.
pub fn sqrt_residual(y: &Tensor, a: &Tensor) -> Real {
    let yy = matmul_square(y, y);
    let diff: Real = yy
        .data()
        .iter()
        .zip(a.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<Real>()
        .sqrt();
    diff / a.frobenius_norm()
}

/// Random SPD matrix `Q·diag(λ)·Qᵀ` with log-uniform eigenvalues spanning
/// exactly `[1, cond]`. `Q` is orthonormalised Gaussian noise.
pub fn random_spd(n: usize, cond: Real, rng: &mut impl rand::Rng) -> Tensor {
    let mut q: Vec<Vec<Real>> = (0..n)
        .map(|_| (0..n).map(|_| standard_normal(rng)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: Real = (0..n).map(|k| q[i][k] * q[j][k]).sum();
            for k in 0..n {
                q[i][k] -= dot * q[j][k];
            }
        }
        let norm: Real = q[i].iter().map(|v| v * v).sum::<Real>().sqrt();
        q[i].iter_mut().for_each(|v| *v /= norm);
    }
    let log_cond = cond.ln();
    let eig: Vec<Real> = (0..n)
        .map(|i| match i {
            0 => 1.0,
            1 => cond,
            _ => (rng.gen::<Real>() * log_cond).exp(),
        })
        .collect();
    let mut a = Tensor::from_fn(&[n, n], |ij| {
        (0..n).map(|k| q[k][ij[0]] * eig[k] * q[k][ij[1]]).sum()
    });
    // exact symmetry
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a.get(&[i, j]) + a.get(&[j, i]));
            a.set(&[i, j], m);
            a.set(&[j, i], m);
        }
    }
    a
}

/// Box–Muller standard normal draw.
pub(crate) fn standard_normal(rng: &mut impl rand::Rng) -> Real {
    let u1: Real = rng.gen_range(Real::EPSILON..1.0);
    let u2: Real = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI as Real * u2).cos()
}
