//! Fully-constrained least squares: `min ‖x − E·p‖² + cᵀp` over the
//! probability simplex, with an optional linear term `c`.
//!
//! A primal active-set method on the Gram form: starting from a feasible
//! point, solve the equality-constrained problem on the current support,
//! walk toward it until a weight reaches zero, and release the bound with the
//! most negative multiplier once the support optimum is feasible. With a
//! handful of endmembers this terminates in a few steps and is exact up to
//! rounding.

use rayon::prelude::*;

use crate::cube::HsiCube;
use crate::endmembers::{reconstruct, EndmemberSet};
use crate::error::{Error, Result};
use crate::linalg;
use crate::proportions::ProportionMatrix;
use crate::scalar::{dot, sq_dist, Scalar};

const MAX_ITERS_PER_COLUMN: usize = 50;

/// Euclidean projection onto `{p ≥ 0, Σp = 1}`.
pub fn project_to_simplex<T: Scalar>(v: &[T]) -> Vec<T> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cum = cum + uj;
        let t = (cum - T::one()) / T::lit((j + 1) as f64);
        if uj - t > T::zero() {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(T::zero())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FclsSolution<T> {
    pub p: Vec<T>,
    /// `‖x − E·p‖²`, evaluated directly rather than through the Gram form.
    pub residual: T,
    pub iterations: usize,
}

/// Precomputed Gram matrix for one endmember matrix.
#[derive(Debug, Clone)]
pub struct FclsSolver<T> {
    columns: Vec<Vec<T>>,
    bands: usize,
    gram: Vec<T>,
}

impl<T: Scalar> FclsSolver<T> {
    /// An empty column list is allowed: every solve then returns `p = []`
    /// and residual `‖x‖²`.
    pub fn new(columns: &[Vec<T>]) -> Result<Self> {
        let bands = columns.first().map_or(0, Vec::len);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != bands {
                return Err(Error::DimensionMismatch {
                    expected: bands,
                    found: c.len(),
                });
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("endmember column {j}")));
            }
        }
        let n = columns.len();
        let mut gram = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i..n {
                let g = dot(&columns[i], &columns[j]);
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        Ok(Self {
            columns: columns.to_vec(),
            bands,
            gram,
        })
    }

    pub fn from_endmembers(e: &EndmemberSet<T>) -> Result<Self> {
        Self::new(e.columns())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn solve(&self, x: &[T]) -> Result<FclsSolution<T>> {
        self.solve_from(x, None, None)
    }

    /// Solves with linear term `linear` (length `n_columns`, or `None` for
    /// zero), starting from `start` when given.
    pub fn solve_from(
        &self,
        x: &[T],
        linear: Option<&[T]>,
        start: Option<&[T]>,
    ) -> Result<FclsSolution<T>> {
        let n = self.columns.len();
        if n > 0 && x.len() != self.bands {
            return Err(Error::DimensionMismatch {
                expected: self.bands,
                found: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("spectrum band {i}")));
        }
        if n == 0 {
            return Ok(FclsSolution {
                p: Vec::new(),
                residual: x.iter().fold(T::zero(), |s, &v| s + v * v),
                iterations: 0,
            });
        }
        let zeros;
        let c = match linear {
            Some(c) => {
                if c.len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        found: c.len(),
                    });
                }
                c
            }
            None => {
                zeros = vec![T::zero(); n];
                &zeros
            }
        };
        let b: Vec<T> = self.columns.iter().map(|col| dot(col, x)).collect();
        let (p, iterations) = if n == 1 {
            (vec![T::one()], 0)
        } else {
            self.minimize(&b, c, start)
        };
        let residual = sq_dist(x, &reconstruct(&self.columns, &p, self.bands));
        Ok(FclsSolution {
            p,
            residual,
            iterations,
        })
    }

    fn gradient(&self, p: &[T], b: &[T], c: &[T]) -> Vec<T> {
        let n = p.len();
        let two = T::lit(2.0);
        (0..n)
            .map(|i| {
                let gp = self.gram[i * n..(i + 1) * n]
                    .iter()
                    .zip(p)
                    .fold(T::zero(), |s, (&g, &v)| s + g * v);
                two * (gp - b[i]) + c[i]
            })
            .collect()
    }

    fn minimize(&self, b: &[T], c: &[T], start: Option<&[T]>) -> (Vec<T>, usize) {
        let n = b.len();
        let scale = b.iter().fold(T::one(), |m, v| m.max(v.abs()));
        let tol = T::tol(1e-12) * scale;
        let mut p = match start {
            Some(s) if s.len() == n && s.iter().all(|v| v.is_finite()) => project_to_simplex(s),
            _ => {
                let best = (0..n)
                    .min_by(|&i, &j| self.vertex_value(i, b, c).as_f64().total_cmp(&self.vertex_value(j, b, c).as_f64()))
                    .unwrap_or(0);
                let mut v = vec![T::zero(); n];
                v[best] = T::one();
                v
            }
        };
        let mut free: Vec<bool> = p.iter().map(|&v| v > T::zero()).collect();
        let max_iters = MAX_ITERS_PER_COLUMN * (n + 1);
        for k in 1..=max_iters {
            let support: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
            let (q, nu) = self.equality_solve(&support, b, c);
            if support.iter().all(|&j| q[j] > T::zero()) {
                p = q;
                let g = self.gradient(&p, b, c);
                let entering = (0..n)
                    .filter(|&j| !free[j])
                    .map(|j| (j, g[j] - nu))
                    .filter(|&(_, m)| m < -tol)
                    .min_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()));
                match entering {
                    Some((j, _)) => free[j] = true,
                    None => return (p, k),
                }
            } else {
                // Walk toward the subspace optimum until a weight hits zero.
                let mut alpha = T::one();
                for &j in &support {
                    if q[j] <= T::zero() && p[j] > q[j] {
                        alpha = alpha.min(p[j] / (p[j] - q[j]));
                    }
                }
                for &j in &support {
                    p[j] = p[j] + alpha * (q[j] - p[j]);
                    if q[j] <= T::zero() && p[j] <= T::tol(1e-15) {
                        p[j] = T::zero();
                        free[j] = false;
                    }
                }
                if !free.iter().any(|&f| f) {
                    // Numerical corner: fall back to the best remaining vertex.
                    let j = support[0];
                    free[j] = true;
                    p[j] = T::one();
                }
                let s: T = p.iter().copied().sum();
                p.iter_mut().for_each(|v| *v = v.max(T::zero()) / s);
            }
        }
        (p, max_iters)
    }

    fn vertex_value(&self, j: usize, b: &[T], c: &[T]) -> T {
        let n = b.len();
        self.gram[j * n + j] - T::lit(2.0) * b[j] + c[j]
    }

    /// Minimizer over `{Σp = 1, p_j = 0 off support}` and the multiplier of
    /// the sum constraint. A tiny ridge keeps duplicate columns solvable.
    fn equality_solve(&self, support: &[usize], b: &[T], c: &[T]) -> (Vec<T>, T) {
        let n = b.len();
        let s = support.len();
        let mut q = vec![T::zero(); n];
        let two = T::lit(2.0);
        if s == 1 {
            let i = support[0];
            q[i] = T::one();
            let nu = two * self.gram[i * n + i] - two * b[i] + c[i];
            return (q, nu);
        }
        let dim = s + 1;
        let trace = support.iter().fold(T::zero(), |a, &i| a + self.gram[i * n + i]);
        let mut ridge = T::zero();
        loop {
            let mut a = vec![T::zero(); dim * dim];
            let mut rhs = vec![T::zero(); dim];
            for (r, &i) in support.iter().enumerate() {
                for (k, &j) in support.iter().enumerate() {
                    a[r * dim + k] = two * self.gram[i * n + j];
                }
                a[r * dim + r] = a[r * dim + r] + ridge;
                a[r * dim + s] = T::one();
                a[s * dim + r] = T::one();
                rhs[r] = two * b[i] - c[i];
            }
            rhs[s] = T::one();
            if let Some(sol) = linalg::solve(&a, &rhs, dim) {
                if sol.iter().all(|v| v.is_finite()) {
                    for (r, &i) in support.iter().enumerate() {
                        q[i] = sol[r];
                    }
                    return (q, -sol[s]);
                }
            }
            ridge = if ridge == T::zero() {
                T::tol(1e-12) * trace.max(T::one())
            } else {
                ridge * T::lit(100.0)
            };
        }
    }
}

/// FCLS abundances of `x` against the columns of `columns`.
pub fn fcls<T: Scalar>(x: &[T], columns: &[Vec<T>]) -> Result<Vec<T>> {
    if columns.is_empty() {
        return Err(Error::InvalidInput("fcls needs at least one endmember".into()));
    }
    Ok(FclsSolver::new(columns)?.solve(x)?.p)
}

/// `‖x − E·p‖² + cᵀp`.
pub fn objective<T: Scalar>(x: &[T], columns: &[Vec<T>], p: &[T], linear: Option<&[T]>) -> T {
    let bands = x.len();
    let r = sq_dist(x, &reconstruct(columns, p, bands));
    match linear {
        Some(c) => r + dot(c, p),
        None => r,
    }
}

/// Worst KKT violation of `p` for the simplex-constrained problem: spread of
/// the gradient over the support, and how far any off-support gradient
/// component falls below the common multiplier.
pub fn kkt_residual<T: Scalar>(x: &[T], columns: &[Vec<T>], p: &[T], linear: Option<&[T]>) -> T {
    let n = columns.len();
    let two = T::lit(2.0);
    let ep = reconstruct(columns, p, x.len());
    let diff: Vec<T> = ep.iter().zip(x).map(|(&a, &b)| a - b).collect();
    let g: Vec<T> = (0..n)
        .map(|j| two * dot(&columns[j], &diff) + linear.map_or(T::zero(), |c| c[j]))
        .collect();
    let support: Vec<usize> = (0..n).filter(|&j| p[j] > T::zero()).collect();
    if support.is_empty() {
        return T::infinity();
    }
    let nu = support.iter().fold(T::zero(), |a, &j| a + g[j]) / T::lit(support.len() as f64);
    (0..n).fold(T::zero(), |worst, j| {
        let v = if p[j] > T::zero() {
            (g[j] - nu).abs()
        } else {
            (nu - g[j]).max(T::zero())
        };
        worst.max(v)
    })
}

/// FCLS applied to every pixel of the cube.
pub fn unmix_all<T: Scalar>(cube: &HsiCube<T>, e: &EndmemberSet<T>) -> Result<ProportionMatrix<T>> {
    if e.bands() != cube.bands() {
        return Err(Error::DimensionMismatch {
            expected: cube.bands(),
            found: e.bands(),
        });
    }
    cube.ensure_finite()?;
    let solver = FclsSolver::from_endmembers(e)?;
    let rows: Vec<Vec<T>> = (0..cube.n_pixels())
        .into_par_iter()
        .map(|i| solver.solve(cube.pixel(i)).map(|s| s.p))
        .collect::<Result<_>>()?;
    ProportionMatrix::from_rows(&rows)
}

/// `r_i = ‖x_i − E·p_i‖²` for every pixel.
pub fn residuals<T: Scalar>(
    cube: &HsiCube<T>,
    e: &EndmemberSet<T>,
    p: &ProportionMatrix<T>,
) -> Result<Vec<T>> {
    if e.bands() != cube.bands() {
        return Err(Error::DimensionMismatch {
            expected: cube.bands(),
            found: e.bands(),
        });
    }
    if p.n_rows() != cube.n_pixels() {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels(),
            found: p.n_rows(),
        });
    }
    if p.n_cols() != e.n_columns() {
        return Err(Error::DimensionMismatch {
            expected: e.n_columns(),
            found: p.n_cols(),
        });
    }
    Ok(cube
        .pixels()
        .zip(p.rows())
        .map(|(x, row)| sq_dist(x, &e.reconstruct(row)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn exact_vertex() {
        let e = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(fcls(&[1.0, 0.0, 0.0], &e).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn symmetric_interior_point() {
        let e = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        let p = fcls(&[0.5, 0.5], &e).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_one_dimensional_grid_search() {
        let e = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        let x = [0.9, 0.1];
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let a = k as f64 * 1e-5;
            let r = (x[0] - a - 0.6 * (1.0 - a)).powi(2) + (x[1] - 0.8 * (1.0 - a)).powi(2);
            if r < best.0 {
                best = (r, a);
            }
        }
        let p = fcls(&x, &e).unwrap();
        assert!((p[0] - best.1).abs() < 1e-4, "{p:?} vs {}", best.1);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_to_simplex(&[0.9, 0.8, -2.0, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p[0] - 0.55).abs() < 1e-12 && (p[1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn linear_term_shifts_solution() {
        let e = vec![vec![1.0f64, 0.0], vec![0.0, 1.0]];
        let s = FclsSolver::new(&e).unwrap();
        let p = s.solve_from(&[0.5, 0.5], Some(&[0.0, 0.2]), None).unwrap().p;
        // d/dp0 of 2(p0-.5)^2 + ... balanced: p0 = 0.55
        assert!((p[0] - 0.55).abs() < 1e-10, "{p:?}");
        assert!(kkt_residual(&[0.5, 0.5], &e, &p, Some(&[0.0, 0.2])) < 1e-9);
    }

    #[test]
    fn empty_column_set_reports_full_energy() {
        let s: FclsSolver<f64> = FclsSolver::new(&[]).unwrap();
        let sol = s.solve(&[3.0, 4.0]).unwrap();
        assert!(sol.p.is_empty());
        assert_eq!(sol.residual, 25.0);
    }

    #[test]
    fn non_finite_input_is_error() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(fcls(&[f64::NAN, 0.0], &e), Err(Error::NonFinite(_))));
    }

    #[test]
    fn duplicate_columns_reach_the_same_objective() {
        let mut rng = Rng::new(5);
        let a: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let x: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
        let single = vec![a.clone(), b.clone()];
        let dup = vec![a.clone(), b.clone(), a.clone()];
        let p1 = fcls(&x, &single).unwrap();
        let p2 = fcls(&x, &dup).unwrap();
        let o1 = objective(&x, &single, &p1, None);
        let o2 = objective(&x, &dup, &p2, None);
        assert!((o1 - o2).abs() < 1e-10);
    }

    #[test]
    fn residual_by_hand() {
        let cube = HsiCube::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let e = EndmemberSet::normalized(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = ProportionMatrix::new(vec![0.0, 1.0], 2).unwrap();
        assert_eq!(residuals(&cube, &e, &p).unwrap(), vec![2.0]);
    }

    #[test]
    fn residual_dimension_mismatch() {
        let cube = HsiCube::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let e = EndmemberSet::normalized(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = ProportionMatrix::new(vec![0.0, 1.0], 2).unwrap();
        assert!(residuals(&cube, &e, &p).is_err());
    }

    #[test]
    fn identical_pixels_identical_rows() {
        let cube = HsiCube::new(2, 2, 3, [0.2, 0.5, 0.3].repeat(4)).unwrap();
        let e = EndmemberSet::normalized(vec![
            vec![1.0, 0.1, 0.0],
            vec![0.0, 1.0, 0.2],
            vec![0.1, 0.0, 1.0],
        ])
        .unwrap();
        let p = unmix_all(&cube, &e).unwrap();
        assert!(p.rows().all(|r| r == p.row(0)));
        let single = HsiCube::new(1, 1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let ps = unmix_all(&single, &e).unwrap();
        assert_eq!((ps.n_rows(), ps.n_cols()), (1, 3));
    }
}
