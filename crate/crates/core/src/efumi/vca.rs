//! Vertex component analysis: pick extreme pixels by repeatedly projecting the
//! data onto a random direction orthogonal to everything picked so far.

use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::rng::Rng;
use crate::scalar::{dot, sq_norm, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct VcaOutcome<T> {
    /// Unit-norm columns, in pick order.
    pub columns: Vec<Vec<T>>,
    /// Index (into the input slice) of the pixel behind each column; `None`
    /// for columns filled in because the data ran out of rank.
    pub picked: Vec<Option<usize>>,
    pub fallback: bool,
}

/// Selects `count` endmembers from `pixels`.
///
/// The data are first projected onto the leading `count` eigenvectors of
/// their (uncentred) correlation matrix. When fewer than `count` independent
/// extreme points exist, the remaining columns are the data mean plus a small
/// random perturbation and `fallback` is set.
pub fn vca_init<T: Scalar>(pixels: &[&[T]], count: usize, rng: &mut Rng) -> Result<VcaOutcome<T>> {
    let n = pixels.len();
    let bands = pixels.first().map_or(0, |p| p.len());
    if count == 0 {
        return Err(Error::InvalidInput("vca count must be at least 1".into()));
    }
    if count > n.min(bands) {
        return Err(Error::InvalidInput(format!(
            "vca count {count} exceeds min(bands {bands}, pixels {n})"
        )));
    }
    if pixels.iter().any(|p| p.len() != bands) {
        return Err(Error::InvalidInput("ragged pixel list".into()));
    }

    let mut corr = vec![T::zero(); bands * bands];
    for x in pixels {
        for i in 0..bands {
            let xi = x[i];
            for j in i..bands {
                corr[i * bands + j] = corr[i * bands + j] + xi * x[j];
            }
        }
    }
    for i in 0..bands {
        for j in 0..i {
            corr[i * bands + j] = corr[j * bands + i];
        }
    }
    let (_, vectors) = symmetric_eigen(&corr, bands);
    let basis_rows: Vec<&[T]> = (0..count).map(|k| &vectors[k * bands..(k + 1) * bands]).collect();
    let reduced: Vec<Vec<T>> = pixels
        .iter()
        .map(|x| basis_rows.iter().map(|u| dot(u, x)).collect())
        .collect();
    let scale = reduced.iter().fold(T::zero(), |m, y| m.max(sq_norm(y).sqrt()));
    let tiny = scale * T::tol(1e-9);

    let mut ortho: Vec<Vec<T>> = Vec::with_capacity(count);
    let mut columns = Vec::with_capacity(count);
    let mut picked = Vec::with_capacity(count);
    let mut fallback = false;
    for _ in 0..count {
        let mut f: Vec<T> = (0..count).map(|_| T::lit(rng.normal())).collect();
        remove_components(&mut f, &ortho);
        let fnorm = sq_norm(&f).sqrt();
        let mut choice = None;
        if fnorm > T::zero() {
            f.iter_mut().for_each(|v| *v = *v / fnorm);
            let mut best = (T::zero(), 0usize);
            for (i, y) in reduced.iter().enumerate() {
                let v = dot(&f, y).abs();
                if v > best.0 {
                    best = (v, i);
                }
            }
            if best.0 > tiny {
                let mut r = reduced[best.1].clone();
                remove_components(&mut r, &ortho);
                let rn = sq_norm(&r).sqrt();
                if rn > tiny {
                    r.iter_mut().for_each(|v| *v = *v / rn);
                    ortho.push(r);
                    choice = Some(best.1);
                }
            }
        }
        match choice {
            Some(i) => {
                columns.push(unit(pixels[i].to_vec()));
                picked.push(Some(i));
            }
            None => {
                fallback = true;
                columns.push(perturbed_mean(pixels, rng));
                picked.push(None);
            }
        }
    }
    Ok(VcaOutcome {
        columns,
        picked,
        fallback,
    })
}

fn remove_components<T: Scalar>(v: &mut [T], ortho: &[Vec<T>]) {
    for b in ortho {
        let c = dot(b, v);
        for (x, &bb) in v.iter_mut().zip(b) {
            *x = *x - c * bb;
        }
    }
}

fn unit<T: Scalar>(mut v: Vec<T>) -> Vec<T> {
    let n = sq_norm(&v).sqrt();
    if n > T::zero() {
        v.iter_mut().for_each(|x| *x = *x / n);
    }
    v
}

fn perturbed_mean<T: Scalar>(pixels: &[&[T]], rng: &mut Rng) -> Vec<T> {
    let bands = pixels[0].len();
    let count = T::lit(pixels.len() as f64);
    let mut mean = vec![T::zero(); bands];
    for x in pixels {
        for (m, &v) in mean.iter_mut().zip(x.iter()) {
            *m = *m + v;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let spread = sq_norm(&mean).sqrt() * T::lit(0.01 / (bands as f64).sqrt());
    let spread = if spread > T::zero() { spread } else { T::lit(1e-3) };
    for m in mean.iter_mut() {
        *m = *m + spread * T::lit(rng.normal());
    }
    unit(mean)
}
