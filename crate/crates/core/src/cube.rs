use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A rows×cols×bands image, stored pixel-major: pixel `i` occupies
/// `data[i*bands .. (i+1)*bands]`, with `i = row*cols + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube<T> {
    rows: usize,
    cols: usize,
    bands: usize,
    wavelengths: Option<Vec<f64>>,
    data: Vec<T>,
}

/// One failed invariant, as reported by [`HsiCube::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(i) => write!(f, "{}[{}]: {}", self.field, i, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl<T: Scalar> HsiCube<T> {
    /// Checks shape only; value-level problems (NaN, unsorted wavelengths)
    /// are left to [`validate`](Self::validate) so that bad files can still be
    /// loaded and reported on.
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(Error::InvalidInput(format!(
                "cube dimensions must be positive, got {rows}x{cols}x{bands}"
            )));
        }
        let expected = rows * cols * bands;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            bands,
            wavelengths: None,
            data,
        })
    }

    pub fn from_pixels(rows: usize, cols: usize, pixels: &[Vec<T>]) -> Result<Self> {
        let bands = pixels.first().map_or(0, Vec::len);
        if pixels.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| p.len() != bands) {
            return Err(Error::DimensionMismatch {
                expected: bands,
                found: bad.len(),
            });
        }
        Self::new(rows, cols, bands, pixels.concat())
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != self.bands {
            return Err(Error::DimensionMismatch {
                expected: self.bands,
                found: wavelengths.len(),
            });
        }
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, i: usize) -> &[T] {
        &self.data[i * self.bands..(i + 1) * self.bands]
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.bands)
    }

    pub fn map_values(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Every violated invariant; empty when the cube is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                out.push(Violation {
                    field: "data",
                    index: Some(i / self.bands),
                    message: format!("band {} is not finite ({v})", i % self.bands),
                });
            }
        }
        if let Some(w) = &self.wavelengths {
            if w.len() != self.bands {
                out.push(Violation {
                    field: "wavelengths",
                    index: None,
                    message: format!("length {} differs from band count {}", w.len(), self.bands),
                });
            }
            for (i, pair) in w.windows(2).enumerate() {
                if !(pair[1] > pair[0]) {
                    out.push(Violation {
                        field: "wavelengths",
                        index: Some(i + 1),
                        message: format!(
                            "not strictly increasing ({} after {})",
                            pair[1], pair[0]
                        ),
                    });
                }
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                out.push(Violation {
                    field: "wavelengths",
                    index: Some(i),
                    message: "not finite".into(),
                });
            }
        }
        out
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "pixel {} band {}",
                i / self.bands,
                i % self.bands
            ))),
            None => Ok(()),
        }
    }

    /// Mean spectrum over `subset`, or over every pixel when `None`.
    pub fn global_mean(&self, subset: Option<&[usize]>) -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); self.bands];
        let mut add = |x: &[T]| {
            for (a, &v) in acc.iter_mut().zip(x) {
                *a = *a + v;
            }
        };
        let count = match subset {
            Some(idx) => {
                if idx.is_empty() {
                    return Err(Error::EmptySubset);
                }
                for &i in idx {
                    if i >= self.n_pixels() {
                        return Err(Error::PixelOutOfRange {
                            index: i,
                            n_pixels: self.n_pixels(),
                        });
                    }
                    add(self.pixel(i));
                }
                idx.len()
            }
            None => {
                self.pixels().for_each(&mut add);
                self.n_pixels()
            }
        };
        let n = T::lit(count as f64);
        Ok(acc.into_iter().map(|v| v / n).collect())
    }
}
