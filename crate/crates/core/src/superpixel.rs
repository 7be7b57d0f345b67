//! Grid-seeded spectral k-means over-segmentation and region-level
//! influence metrics.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bags::BagSet;
use crate::cube::HsiCube;
use crate::efumi::EfumiResult;
use crate::error::{Error, Result};
use crate::influence::{surrogates, unit_influence, InfluenceRecord, Restart, Unit};
use crate::io::{decode_u32_map, encode_u32_map};
use crate::scalar::Scalar;

pub const DEFAULT_COMPACTNESS: f64 = 0.5;
const KMEANS_ROUNDS: usize = 10;

/// Per-pixel segment ids. Ids run over `0..n_segments`, every segment is
/// non-empty and 4-connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    rows: usize,
    cols: usize,
    labels: Vec<u32>,
    n_segments: usize,
}

impl SuperpixelMap {
    pub fn new(rows: usize, cols: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: labels.len(),
            });
        }
        let n_segments = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let map = Self {
            rows,
            cols,
            labels,
            n_segments,
        };
        let comps = components(rows, cols, &map.labels);
        let mut seen = vec![0usize; n_segments];
        for c in &comps {
            seen[map.labels[c[0]] as usize] += 1;
        }
        if let Some(id) = seen.iter().position(|&k| k != 1) {
            return Err(Error::InvalidInput(format!(
                "segment {id} is {}",
                if seen[id] == 0 { "empty" } else { "not 4-connected" }
            )));
        }
        Ok(map)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Pixel indices of each segment, ascending.
    pub fn segments(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_segments];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_segments];
        for &l in &self.labels {
            out[l as usize] += 1;
        }
        out
    }

    pub fn units(&self) -> Vec<Unit> {
        self.segments()
            .into_iter()
            .enumerate()
            .map(|(id, pixels)| Unit { id, pixels })
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_u32_map(self.rows, self.cols, &self.labels)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (rows, cols, labels) = decode_u32_map(bytes)?;
        Self::new(rows, cols, labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// 4-connected components of equal labels, each listed from its first pixel.
fn components(rows: usize, cols: usize, labels: &[u32]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            for j in neighbours(rows, cols, i) {
                if !seen[j] && labels[j] == labels[start] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn neighbours(rows: usize, cols: usize, i: usize) -> impl Iterator<Item = usize> {
    let (r, c) = (i / cols, i % cols);
    [
        (r > 0).then(|| i - cols),
        (c > 0).then(|| i - 1),
        (c + 1 < cols).then(|| i + 1),
        (r + 1 < rows).then(|| i + cols),
    ]
    .into_iter()
    .flatten()
}

/// Grid shape whose cell count is closest to `k`, preferring square cells.
fn grid_shape(rows: usize, cols: usize, k: usize) -> (usize, usize) {
    let mut best = (1, 1);
    let mut best_key = (usize::MAX, f64::INFINITY);
    for gr in 1..=rows.min(k) {
        let gc = ((k as f64 / gr as f64).round() as usize).clamp(1, cols);
        let miss = (gr * gc).abs_diff(k);
        let aspect = ((rows as f64 / gr as f64) / (cols as f64 / gc as f64)).ln().abs();
        if (miss, aspect) < best_key {
            best_key = (miss, aspect);
            best = (gr, gc);
        }
    }
    best
}

/// Over-segments `cube` into roughly `target_segments` compact regions.
///
/// Seeds sit at the centres of a regular grid. Pixels are assigned to the
/// nearest centre within two grid steps under
/// `d_spec / spectral_range + compactness · d_xy / step`, centres move to
/// their members' means, and after a fixed number of rounds disconnected
/// pieces are absorbed into their largest neighbouring segment.
pub fn segment<T: Scalar>(
    cube: &HsiCube<T>,
    target_segments: usize,
    compactness: f64,
) -> Result<SuperpixelMap> {
    let (rows, cols, bands) = (cube.rows(), cube.cols(), cube.bands());
    let n = rows * cols;
    if target_segments == 0 || target_segments > n {
        return Err(Error::InvalidInput(format!(
            "target_segments must lie in 1..={n}, got {target_segments}"
        )));
    }
    if !(compactness >= 0.0 && compactness.is_finite()) {
        return Err(Error::InvalidInput("compactness must be non-negative".into()));
    }
    cube.ensure_finite()?;
    let px: Vec<Vec<f64>> = cube
        .pixels()
        .map(|p| p.iter().map(|v| v.as_f64()).collect())
        .collect();
    let mut range = 0.0;
    for b in 0..bands {
        let (lo, hi) = px.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[b]), hi.max(p[b]))
        });
        range += (hi - lo) * (hi - lo);
    }
    let spec_scale = if range > 0.0 { range.sqrt() } else { 1.0 };
    let step = (n as f64 / target_segments as f64).sqrt();

    let (gr, gc) = grid_shape(rows, cols, target_segments);
    let (ch, cw) = (rows as f64 / gr as f64, cols as f64 / gc as f64);
    let mut centres: Vec<(f64, f64, Vec<f64>)> = Vec::with_capacity(gr * gc);
    for a in 0..gr {
        for b in 0..gc {
            let y = (a as f64 + 0.5) * ch - 0.5;
            let x = (b as f64 + 0.5) * cw - 0.5;
            let i = (y.round() as usize).min(rows - 1) * cols + (x.round() as usize).min(cols - 1);
            centres.push((y, x, px[i].clone()));
        }
    }
    let reach = 2.0 * ch.max(cw);
    let mut labels = vec![0u32; n];
    for _ in 0..KMEANS_ROUNDS {
        let mut best = vec![f64::INFINITY; n];
        for (k, (cy, cx, spec)) in centres.iter().enumerate() {
            let r0 = (cy - reach).floor().max(0.0) as usize;
            let r1 = ((cy + reach).ceil() as usize).min(rows - 1);
            let c0 = (cx - reach).floor().max(0.0) as usize;
            let c1 = ((cx + reach).ceil() as usize).min(cols - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let i = r * cols + c;
                    let ds = px[i]
                        .iter()
                        .zip(spec)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    let dxy = ((r as f64 - cy).powi(2) + (c as f64 - cx).powi(2)).sqrt();
                    let d = ds / spec_scale + compactness * dxy / step;
                    if d < best[i] {
                        best[i] = d;
                        labels[i] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![(0.0, 0.0, vec![0.0; bands], 0usize); centres.len()];
        for (i, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            a.0 += (i / cols) as f64;
            a.1 += (i % cols) as f64;
            for (s, v) in a.2.iter_mut().zip(&px[i]) {
                *s += v;
            }
            a.3 += 1;
        }
        for (c, (sy, sx, ss, cnt)) in centres.iter_mut().zip(acc) {
            if cnt > 0 {
                let m = cnt as f64;
                *c = (sy / m, sx / m, ss.into_iter().map(|v| v / m).collect());
            }
        }
    }
    absorb_orphans(rows, cols, &mut labels);
    Ok(relabel(rows, cols, &labels))
}

/// Moves every component that is not the largest piece of its label into
/// the label of its largest adjacent segment.
fn absorb_orphans(rows: usize, cols: usize, labels: &mut [u32]) {
    for _ in 0..8 {
        let comps = components(rows, cols, labels);
        let n_labels = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut main = vec![usize::MAX; n_labels];
        let mut main_size = vec![0usize; n_labels];
        for (k, c) in comps.iter().enumerate() {
            let l = labels[c[0]] as usize;
            if c.len() > main_size[l] {
                main_size[l] = c.len();
                main[l] = k;
            }
        }
        let mut sizes = vec![0usize; n_labels];
        for &l in labels.iter() {
            sizes[l as usize] += 1;
        }
        let mut changed = false;
        let mut orphans: Vec<usize> = (0..comps.len()).filter(|&k| main[labels[comps[k][0]] as usize] != k).collect();
        orphans.sort_by_key(|&k| (comps[k].len(), comps[k][0]));
        for k in orphans {
            let own = labels[comps[k][0]];
            let mut target: Option<(usize, u32)> = None;
            for &i in &comps[k] {
                for j in neighbours(rows, cols, i) {
                    let l = labels[j];
                    if l != own {
                        let key = (sizes[l as usize], u32::MAX - l);
                        if target.is_none_or(|(s, t)| key > (s, u32::MAX - t)) {
                            target = Some((sizes[l as usize], l));
                        }
                    }
                }
            }
            if let Some((_, l)) = target {
                for &i in &comps[k] {
                    labels[i] = l;
                }
                sizes[l as usize] += comps[k].len();
                sizes[own as usize] -= comps[k].len();
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

/// Compact ids in first-appearance order, one id per 4-connected component.
fn relabel(rows: usize, cols: usize, labels: &[u32]) -> SuperpixelMap {
    let mut out = vec![0u32; labels.len()];
    let comps = components(rows, cols, labels);
    for (k, c) in comps.iter().enumerate() {
        for &i in c {
            out[i] = k as u32;
        }
    }
    SuperpixelMap {
        rows,
        cols,
        n_segments: comps.len(),
        labels: out,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub max_pt: f64,
    pub sum_pt: f64,
    pub max_re: f64,
    pub sum_re: f64,
}

impl RegionMetrics {
    pub const EMPTY: RegionMetrics = RegionMetrics {
        max_pt: f64::NEG_INFINITY,
        sum_pt: 0.0,
        max_re: f64::NEG_INFINITY,
        sum_re: 0.0,
    };

    pub fn push(&mut self, pt: f64, re: f64) {
        self.max_pt = self.max_pt.max(pt);
        self.sum_pt += pt;
        self.max_re = self.max_re.max(re);
        self.sum_re += re;
    }

    pub fn merge(self, other: RegionMetrics) -> RegionMetrics {
        RegionMetrics {
            max_pt: self.max_pt.max(other.max_pt),
            sum_pt: self.sum_pt + other.sum_pt,
            max_re: self.max_re.max(other.max_re),
            sum_re: self.sum_re + other.sum_re,
        }
    }
}

/// Max and sum of both surrogates within each segment.
pub fn region_metrics<T: Scalar>(map: &SuperpixelMap, pt: &[T], re: &[T]) -> Result<Vec<RegionMetrics>> {
    let n = map.labels.len();
    for v in [pt.len(), re.len()] {
        if v != n {
            return Err(Error::DimensionMismatch { expected: n, found: v });
        }
    }
    let mut out = vec![RegionMetrics::EMPTY; map.n_segments];
    for (i, &l) in map.labels.iter().enumerate() {
        out[l as usize].push(pt[i].as_f64(), re[i].as_f64());
    }
    Ok(out)
}

/// Exact influence of flipping the labelled pixels of each segment, with the
/// region metrics attached. A segment with no labelled pixel is an error.
pub fn superpixel_influence<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    map: &SuperpixelMap,
    restart: Restart,
) -> Result<Vec<InfluenceRecord>> {
    if map.rows != cube.rows() || map.cols != cube.cols() {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels(),
            found: map.labels.len(),
        });
    }
    let (pt, re) = surrogates(cube, &baseline.endmembers)?;
    let metrics = region_metrics(map, &pt, &re)?;
    let labels = bags.label_map(cube.n_pixels());
    let units: Vec<Vec<usize>> = map
        .segments()
        .into_iter()
        .map(|seg| {
            let labelled: Vec<usize> = seg.iter().copied().filter(|&i| labels[i].is_some()).collect();
            if labelled.is_empty() {
                Err(Error::PixelNotInBag(seg[0]))
            } else {
                Ok(labelled)
            }
        })
        .collect::<Result<_>>()?;
    units
        .par_iter()
        .enumerate()
        .map(|(id, pixels)| {
            let exact = unit_influence(cube, bags, baseline, pixels, restart)?;
            let m = metrics[id];
            Ok(InfluenceRecord {
                unit_id: id,
                exact: Some(exact),
                surrogate_pt: m.max_pt,
                surrogate_re: m.max_re,
                region: Some(m),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(rows: usize, cols: usize) -> HsiCube<f64> {
        HsiCube::new(rows, cols, 3, vec![0.5; rows * cols * 3]).unwrap()
    }

    #[test]
    fn single_segment() {
        let m = segment(&uniform(7, 9), 1, 0.5).unwrap();
        assert_eq!(m.n_segments(), 1);
        assert!(m.labels().iter().all(|&l| l == 0));
    }

    #[test]
    fn uniform_cube_splits_evenly() {
        let m = segment(&uniform(20, 20), 4, 0.5).unwrap();
        assert_eq!(m.n_segments(), 4);
        let s = m.sizes();
        let (lo, hi) = (*s.iter().min().unwrap(), *s.iter().max().unwrap());
        assert!(hi as f64 <= lo as f64 * 1.3, "{s:?}");
    }

    #[test]
    fn quadrants_align() {
        let (rows, cols) = (16, 22);
        let spectra = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.5]];
        let quad = |i: usize| ((i / cols) >= rows / 2) as usize * 2 + ((i % cols) >= cols / 2) as usize;
        let pix: Vec<Vec<f64>> = (0..rows * cols).map(|i| spectra[quad(i)].to_vec()).collect();
        let cube = HsiCube::from_pixels(rows, cols, &pix).unwrap();
        let m = segment(&cube, 4, 0.5).unwrap();
        assert_eq!(m.n_segments(), 4);
        for i in 0..rows * cols {
            for j in 0..rows * cols {
                assert_eq!(m.labels()[i] == m.labels()[j], quad(i) == quad(j));
            }
        }
    }

    #[test]
    fn segment_count_near_target() {
        let cube = uniform(50, 40);
        for k in [10, 37, 100, 200] {
            let s = segment(&cube, k, 0.5).unwrap().n_segments() as f64;
            assert!((s - k as f64).abs() <= 0.2 * k as f64, "{k} -> {s}");
        }
    }

    #[test]
    fn bad_targets() {
        assert!(segment(&uniform(3, 3), 0, 0.5).is_err());
        assert!(segment(&uniform(3, 3), 10, 0.5).is_err());
    }

    #[test]
    fn map_validation() {
        assert!(SuperpixelMap::new(1, 3, vec![0, 1, 0]).is_err());
        assert!(SuperpixelMap::new(1, 3, vec![0, 2, 2]).is_err());
        assert!(SuperpixelMap::new(1, 3, vec![0, 1, 1]).is_ok());
    }

    #[test]
    fn orphans_are_absorbed() {
        let mut labels = vec![0, 0, 0, 1, 0, 0, 0, 0, 0];
        labels[8] = 1;
        absorb_orphans(3, 3, &mut labels);
        let m = relabel(3, 3, &labels);
        assert_eq!(m.n_segments(), 2);
    }

    #[test]
    fn metrics_examples() {
        let m = SuperpixelMap::new(1, 3, vec![0, 0, 1]).unwrap();
        let r = region_metrics(&m, &[0.1, 0.3, 0.7], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(r[0].max_pt, 0.3);
        assert!((r[0].sum_pt - 0.4).abs() < 1e-15);
        assert_eq!((r[1].max_pt, r[1].sum_pt), (0.7, 0.7));
        assert_eq!((r[0].max_re, r[0].sum_re), (2.0, 3.0));
        assert!(region_metrics(&m, &[0.1], &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn round_trip() {
        let m = segment(&uniform(10, 10), 5, 0.5).unwrap();
        assert_eq!(SuperpixelMap::decode(&m.encode().unwrap()).unwrap(), m);
    }
}
