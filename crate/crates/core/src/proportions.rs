use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-pixel abundances, `n_rows × n_cols`, row-major. Column 0 is the
/// target proportion. Every row lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProportionMatrix<T> {
    n_cols: usize,
    values: Vec<T>,
}

const NEG_TOL: f64 = 1e-10;
const SUM_TOL: f64 = 1e-8;

impl<T: Scalar> ProportionMatrix<T> {
    /// Entries down to −1e-10 are clamped to zero and rows within 1e-8 of
    /// unit sum are renormalized; anything further off is an error.
    pub fn new(values: Vec<T>, n_cols: usize) -> Result<Self> {
        if n_cols == 0 || values.len() % n_cols != 0 {
            return Err(Error::DimensionMismatch {
                expected: n_cols.max(1),
                found: values.len(),
            });
        }
        let mut m = Self { n_cols, values };
        let neg = -T::tol(NEG_TOL);
        let sum_tol = T::tol(SUM_TOL);
        for r in 0..m.n_rows() {
            let row = &mut m.values[r * n_cols..(r + 1) * n_cols];
            for v in row.iter_mut() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("proportion row {r}")));
                }
                if *v < neg {
                    return Err(Error::ProportionViolation {
                        row: r,
                        amount: v.as_f64(),
                    });
                }
                *v = v.max(T::zero()).min(T::one());
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > sum_tol {
                return Err(Error::ProportionViolation {
                    row: r,
                    amount: (s - T::one()).as_f64(),
                });
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::InvalidInput("ragged proportion rows".into()));
        }
        Self::new(rows.concat(), n_cols)
    }

    /// Every row equal to `1/n_cols`.
    pub fn uniform(n_rows: usize, n_cols: usize) -> Self {
        let v = T::one() / T::lit(n_cols as f64);
        Self {
            n_cols,
            values: vec![v; n_rows * n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.n_cols
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.values.chunks_exact(self.n_cols)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn target(&self) -> Vec<T> {
        self.rows().map(|r| r[0]).collect()
    }

    pub fn column_max(&self, j: usize) -> T {
        self.rows().fold(T::zero(), |m, r| m.max(r[j]))
    }

    /// Drops columns `drop` and re-projects each row onto the simplex.
    pub fn without_columns(&self, drop: &[usize]) -> Self {
        let keep: Vec<usize> = (0..self.n_cols).filter(|j| !drop.contains(j)).collect();
        let mut values = Vec::with_capacity(self.n_rows() * keep.len());
        for r in self.rows() {
            let row: Vec<T> = keep.iter().map(|&j| r[j]).collect();
            values.extend(crate::unmix::project_to_simplex(&row));
        }
        Self {
            n_cols: keep.len(),
            values,
        }
    }

    /// Largest deviation from the simplex over all rows (0 when valid).
    pub fn simplex_violation(&self) -> T {
        self.rows().fold(T::zero(), |worst, r| {
            let s: T = r.iter().copied().sum();
            let neg = r.iter().fold(T::zero(), |m, &v| m.max(-v));
            worst.max((s - T::one()).abs()).max(neg)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dust_is_cleaned() {
        let m = ProportionMatrix::new(vec![-1e-12, 1.0 + 5e-9, 0.5, 0.5], 2).unwrap();
        assert_eq!(m.row(0)[0], 0.0);
        assert!((m.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn real_violations_are_errors() {
        assert!(matches!(
            ProportionMatrix::new(vec![-0.1, 1.1], 2),
            Err(Error::ProportionViolation { row: 0, .. })
        ));
        assert!(matches!(
            ProportionMatrix::new(vec![0.3, 0.3], 2),
            Err(Error::ProportionViolation { .. })
        ));
    }

    #[test]
    fn uniform_rows() {
        let m: ProportionMatrix<f64> = ProportionMatrix::uniform(3, 4);
        assert_eq!(m.n_rows(), 3);
        assert!(m.simplex_violation() < 1e-15);
    }

    #[test]
    fn dropping_columns_stays_on_simplex() {
        let m = ProportionMatrix::new(vec![0.2, 0.5, 0.3, 0.1, 0.0, 0.9], 3).unwrap();
        let d = m.without_columns(&[2]);
        assert_eq!(d.n_cols(), 2);
        assert!(d.simplex_violation() < 1e-12);
    }
}
