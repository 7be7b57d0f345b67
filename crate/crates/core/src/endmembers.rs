use crate::error::{Error, Result};
use crate::scalar::{sq_norm, Scalar};

/// Target signature plus `M` background signatures, each of unit squared norm.
/// Column 0 is the target; columns `1..=M` are background.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet<T> {
    bands: usize,
    columns: Vec<Vec<T>>,
}

impl<T: Scalar> EndmemberSet<T> {
    pub fn new(target: Vec<T>, background: Vec<Vec<T>>) -> Result<Self> {
        let mut columns = Vec::with_capacity(background.len() + 1);
        columns.push(target);
        columns.extend(background);
        Self::from_columns(columns)
    }

    /// Columns must already be unit norm (relative tolerance 1e-9).
    pub fn from_columns(columns: Vec<Vec<T>>) -> Result<Self> {
        let set = Self::unchecked(columns)?;
        let tol = T::tol(1e-9);
        for (j, c) in set.columns.iter().enumerate() {
            let n = sq_norm(c);
            if !((n - T::one()).abs() <= tol) {
                return Err(Error::NotUnitNorm {
                    column: j,
                    sq_norm: n.as_f64(),
                });
            }
        }
        Ok(set)
    }

    /// Rescales every column to unit norm. Zero columns are an error.
    pub fn normalized(columns: Vec<Vec<T>>) -> Result<Self> {
        let mut set = Self::unchecked(columns)?;
        for (j, c) in set.columns.iter_mut().enumerate() {
            let n = sq_norm(c).sqrt();
            if n == T::zero() {
                return Err(Error::InvalidInput(format!("endmember column {j} is zero")));
            }
            c.iter_mut().for_each(|v| *v = *v / n);
        }
        Ok(set)
    }

    pub(crate) fn unchecked(columns: Vec<Vec<T>>) -> Result<Self> {
        let bands = columns.first().map_or(0, Vec::len);
        if columns.is_empty() || bands == 0 {
            return Err(Error::InvalidInput("endmember set needs a non-empty target".into()));
        }
        for (j, c) in columns.iter().enumerate() {
            if c.len() != bands {
                return Err(Error::DimensionMismatch {
                    expected: bands,
                    found: c.len(),
                });
            }
            if let Some(b) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("endmember {j} band {b}")));
            }
        }
        Ok(Self { bands, columns })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `M`, the number of background endmembers.
    pub fn n_background(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn target(&self) -> &[T] {
        &self.columns[0]
    }

    pub fn background(&self) -> &[Vec<T>] {
        &self.columns[1..]
    }

    pub fn columns(&self) -> &[Vec<T>] {
        &self.columns
    }

    pub fn into_columns(self) -> Vec<Vec<T>> {
        self.columns
    }

    /// `E·p`.
    pub fn reconstruct(&self, p: &[T]) -> Vec<T> {
        reconstruct(&self.columns, p, self.bands)
    }

    /// Removes background columns `drop` (indices into `1..=M`).
    pub fn without_background(&self, drop: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .enumerate()
            .filter(|(j, _)| *j == 0 || !drop.contains(j))
            .map(|(_, c)| c.clone())
            .collect();
        Self {
            bands: self.bands,
            columns,
        }
    }
}

pub(crate) fn reconstruct<T: Scalar>(columns: &[Vec<T>], p: &[T], bands: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bands];
    for (c, &w) in columns.iter().zip(p) {
        if w == T::zero() {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(c) {
            *o = *o + w * v;
        }
    }
    out
}
