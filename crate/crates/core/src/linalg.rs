//! Dense linear solves and a matrix-free conjugate-gradient solver.
//!
//! The dynamic-programming oracles reduce to systems `(I - gamma * M) x = b`
//! with `gamma < 1`, which are always well conditioned; they are solved by LU
//! with partial pivoting and the residual is checked explicitly.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Residual tolerance for the exact dynamic-programming solves.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;

fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// LU factorization reusable across many right-hand sides.
pub struct LuSolver {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    matrix: DMatrix<f64>,
}

impl LuSolver {
    pub fn new(a: ArrayView2<'_, f64>) -> Self {
        let m = to_nalgebra(a);
        LuSolver {
            lu: m.clone().lu(),
            matrix: m,
        }
    }

    /// Solves `A x = b`, verifying the residual in max norm.
    pub fn solve(&self, b: ArrayView1<'_, f64>, what: &str) -> Result<Array1<f64>> {
        let rhs = DVector::from_iterator(b.len(), b.iter().copied());
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::NumericalFailure {
                what: what.to_string(),
                residual: f64::INFINITY,
            })?;
        let residual = (&self.matrix * &x - &rhs).abs().max();
        if !residual.is_finite() || residual > SOLVE_RESIDUAL_TOL {
            return Err(Error::NumericalFailure {
                what: what.to_string(),
                residual,
            });
        }
        Ok(Array1::from_iter(x.iter().copied()))
    }
}

/// One-shot dense solve with residual check.
pub fn solve(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>, what: &str) -> Result<Array1<f64>> {
    LuSolver::new(a).solve(b, what)
}

/// Matrix-free application of a symmetric linear map `v -> H v`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64>;
}

/// Dense symmetric matrix viewed as a [`LinearOperator`].
pub struct DenseOperator<'a> {
    pub matrix: &'a Array2<f64>,
}

impl LinearOperator for DenseOperator<'_> {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, v: ArrayView1<'_, f64>) -> Array1<f64> {
        self.matrix.dot(&v)
    }
}

/// Checks `((H u) . v - (H v) . u| <= tol * |u| * |v|` on deterministic probes.
pub fn symmetry_probe(op: &dyn LinearOperator, tol: f64) -> Result<()> {
    let n = op.dim();
    if n < 2 {
        return Ok(());
    }
    // Two fixed, linearly independent probe directions with varying signs.
    let u = Array1::from_shape_fn(n, |i| 1.0 + 0.5 * ((i % 3) as f64) - 0.7 * ((i % 2) as f64));
    let v = Array1::from_shape_fn(n, |i| if i % 2 == 0 { 0.3 + i as f64 * 0.01 } else { -1.1 });
    let hu = op.apply(u.view());
    let hv = op.apply(v.view());
    let asym = (hu.dot(&v) - hv.dot(&u)).abs();
    let scale = u.dot(&u).sqrt() * v.dot(&v).sqrt();
    if asym > tol * scale {
        return Err(Error::NumericalFailure {
            what: "symmetry probe".to_string(),
            residual: asym / scale.max(f64::MIN_POSITIVE),
        });
    }
    Ok(())
}

/// Conjugate-gradient solution of `H x = b` for symmetric positive-definite `H`.
///
/// Fails on negative curvature (the map is not positive definite) or when the
/// residual does not reach `tol * |b|` within `max_iters`.
pub fn conjugate_gradient(
    op: &dyn LinearOperator,
    b: ArrayView1<'_, f64>,
    tol: f64,
    max_iters: usize,
) -> Result<CgSolution> {
    let n = op.dim();
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "cg rhs has length {} but operator dimension is {}",
            b.len(),
            n
        )));
    }
    let b_norm = b.dot(&b).sqrt();
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x: Array1::zeros(n),
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut x = Array1::<f64>::zeros(n);
    let mut r = b.to_owned();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    for k in 0..max_iters {
        let hp = op.apply(p.view());
        let curvature = p.dot(&hp);
        if curvature <= 0.0 {
            return Err(Error::ConcavityViolated(format!(
                "negative curvature {curvature:e} encountered at cg iteration {k}"
            )));
        }
        let alpha = rs / curvature;
        x = &x + &(alpha * &p);
        r = &r - &(alpha * &hp);
        let rs_new = r.dot(&r);
        if rs_new.sqrt() <= tol * b_norm {
            return Ok(CgSolution {
                x,
                iterations: k + 1,
                residual: rs_new.sqrt() / b_norm,
            });
        }
        p = &r + &((rs_new / rs) * &p);
        rs = rs_new;
    }
    Err(Error::NonConvergence {
        what: "conjugate gradient".to_string(),
        iterations: max_iters,
        residual: rs.sqrt() / b_norm,
    })
}

#[derive(Debug)]
pub struct CgSolution {
    pub x: Array1<f64>,
    pub iterations: usize,
    pub residual: f64,
}
