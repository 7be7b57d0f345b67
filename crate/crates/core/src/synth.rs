//! Desk-scale synthetic scenes: linear mixtures of smooth random spectra with
//! sub-pixel targets clustered at a few sites, each site wrapped in a square
//! positive bag, everything else labelled negative.

use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::endmembers::EndmemberSet;
use crate::error::{Error, Result};
use crate::io::LabelMask;
use crate::proportions::ProportionMatrix;
use crate::rng::Rng;
use crate::scalar::{spectral_angle_deg, Scalar};

pub const MIN_ANGLE_DEG: f64 = 15.0;
const MAX_ATTEMPTS: usize = 1000;
const TARGETS_PER_SITE: usize = 5;
const TARGET_RANGE: (f64, f64) = (0.1, 0.8);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    /// Background endmember count `M`.
    pub n_background: usize,
    /// Share of all pixels that receive target inside the positive bags.
    pub target_fraction: f64,
    pub noise_sigma: f64,
    /// Share of negative-region pixels that also receive target while staying
    /// labelled negative.
    #[serde(default)]
    pub confuser_fraction: f64,
    /// Side of the square positive bag around each target site.
    #[serde(default = "default_halo")]
    pub halo: usize,
}

fn default_halo() -> usize {
    5
}

impl SyntheticConfig {
    pub fn new(rows: usize, cols: usize, bands: usize, n_background: usize) -> Self {
        Self {
            rows,
            cols,
            bands,
            n_background,
            target_fraction: 0.01,
            noise_sigma: 0.0,
            confuser_fraction: 0.0,
            halo: default_halo(),
        }
    }

    pub fn target_fraction(mut self, f: f64) -> Self {
        self.target_fraction = f;
        self
    }

    pub fn noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn confusers(mut self, f: f64) -> Self {
        self.confuser_fraction = f;
        self
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive");
        }
        if self.n_background == 0 {
            return bad("need at least one background endmember");
        }
        if self.bands < self.n_background + 1 {
            return bad("bands must be at least M+1");
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return bad("target_fraction must lie in (0, 1)");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.confuser_fraction) {
            return bad("confuser_fraction must lie in [0, 1)");
        }
        if self.halo == 0 || self.halo > self.rows.min(self.cols) {
            return bad("halo must fit inside the image");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTruth<T> {
    pub endmembers: EndmemberSet<T>,
    pub proportions: ProportionMatrix<T>,
    /// Every pixel with non-zero target proportion, ascending.
    pub target_pixels: Vec<usize>,
    /// Target-bearing pixels that sit in negative bags, ascending.
    pub confuser_pixels: Vec<usize>,
    pub noise_sigma: f64,
}

/// A smooth positive spectrum: a floor plus three Gaussian bumps.
fn smooth_spectrum(bands: usize, rng: &mut Rng) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.uniform_in(0.2, 1.0),
                rng.uniform_in(-0.1, 1.1),
                rng.uniform_in(0.05, 0.3),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            0.05 + bumps
                .iter()
                .map(|&(h, c, w)| h * (-(t - c).powi(2) / (2.0 * w * w)).exp())
                .sum::<f64>()
        })
        .collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `count` unit-norm spectra with pairwise angle at least 15°.
pub fn random_endmembers(bands: usize, count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::AngleSeparation {
                attempts: MAX_ATTEMPTS,
                min_angle_deg: MIN_ANGLE_DEG,
            });
        }
        let cand = unit(smooth_spectrum(bands, rng));
        if out
            .iter()
            .all(|e| spectral_angle_deg(e, &cand) >= MIN_ANGLE_DEG)
        {
            out.push(cand);
        }
    }
    Ok(out)
}

const SITE_OFFSETS: [(isize, isize); 9] = [
    (0, 0),
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
    (1, 1),
];

/// Builds a scene, its ground truth, and a label mask.
pub fn generate_synthetic<T: Scalar>(
    cfg: &SyntheticConfig,
    rng: &mut Rng,
) -> Result<(HsiCube<T>, SyntheticTruth<T>, LabelMask)> {
    cfg.check()?;
    let (rows, cols, bands, m) = (cfg.rows, cfg.cols, cfg.bands, cfg.n_background);
    let n = rows * cols;
    let columns = random_endmembers(bands, m + 1, rng)?;

    let n_target = ((cfg.target_fraction * n as f64).round() as usize).max(1);
    let n_sites = n_target.div_ceil(TARGETS_PER_SITE);
    let radius = (cfg.halo / 2) as isize;
    let lo = radius as usize;
    let (hi_r, hi_c) = (rows - (cfg.halo - lo), cols - (cfg.halo - lo));
    let mut centers: Vec<(usize, usize)> = Vec::with_capacity(n_sites);
    let mut tries = 0;
    while centers.len() < n_sites {
        tries += 1;
        if tries > 100 * MAX_ATTEMPTS {
            return Err(Error::InvalidInput(format!(
                "cannot place {n_sites} disjoint target sites in a {rows}x{cols} image"
            )));
        }
        let r = lo + rng.below(hi_r - lo + 1);
        let c = lo + rng.below(hi_c - lo + 1);
        let clear = centers.iter().all(|&(pr, pc)| {
            pr.abs_diff(r).max(pc.abs_diff(c)) > cfg.halo
        });
        if clear {
            centers.push((r, c));
        }
    }

    let mut codes = vec![1u16; n];
    for (s, &(r, c)) in centers.iter().enumerate() {
        let code = u16::try_from(s + 2).map_err(|_| Error::InvalidInput("too many sites".into()))?;
        for dr in -radius..(cfg.halo as isize - radius) {
            for dc in -radius..(cfg.halo as isize - radius) {
                let (rr, cc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
                codes[rr * cols + cc] = code;
            }
        }
    }

    let mut has_target = vec![false; n];
    let mut remaining = n_target;
    for (s, &(r, c)) in centers.iter().enumerate() {
        let take = remaining.div_ceil(n_sites - s).min(SITE_OFFSETS.len());
        for &(dr, dc) in &SITE_OFFSETS[..take] {
            let (rr, cc) = ((r as isize + dr) as usize, (c as isize + dc) as usize);
            has_target[rr * cols + cc] = true;
        }
        remaining -= take;
    }

    let outside: Vec<usize> = (0..n).filter(|&i| codes[i] == 1).collect();
    let n_conf = (cfg.confuser_fraction * outside.len() as f64).round() as usize;
    let mut confusers: Vec<usize> = rng
        .sample_indices(outside.len(), n_conf)
        .into_iter()
        .map(|k| outside[k])
        .collect();
    confusers.sort_unstable();
    for &i in &confusers {
        has_target[i] = true;
    }

    let mut props = vec![0.0f64; n * (m + 1)];
    for i in 0..n {
        let row = &mut props[i * (m + 1)..(i + 1) * (m + 1)];
        let draws: Vec<f64> = (0..m).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let total: f64 = draws.iter().sum();
        let pt = if has_target[i] {
            rng.uniform_in(TARGET_RANGE.0, TARGET_RANGE.1)
        } else {
            0.0
        };
        row[0] = pt;
        for k in 0..m {
            row[k + 1] = (1.0 - pt) * draws[k] / total;
        }
    }

    let cols_t: Vec<Vec<T>> = columns
        .iter()
        .map(|c| c.iter().map(|&v| T::lit(v)).collect())
        .collect();
    let props_t: Vec<T> = props.iter().map(|&v| T::lit(v)).collect();
    // Pixels are synthesized from the stored truth so that it reproduces
    // them bit for bit.
    let endmembers = EndmemberSet::normalized(cols_t)?;
    let proportions = ProportionMatrix::new(props_t, m + 1)?;
    let sigma = T::lit(cfg.noise_sigma);
    let mut data = Vec::with_capacity(n * bands);
    for i in 0..n {
        let mut x = endmembers.reconstruct(proportions.row(i));
        if cfg.noise_sigma > 0.0 {
            for v in x.iter_mut() {
                *v = *v + sigma * T::lit(rng.normal());
            }
        }
        data.extend(x);
    }

    let wavelengths: Vec<f64> = (0..bands)
        .map(|b| 400.0 + 600.0 * b as f64 / (bands.max(2) - 1) as f64)
        .collect();
    let cube = HsiCube::new(rows, cols, bands, data)?;
    let cube = if bands > 1 {
        cube.with_wavelengths(wavelengths)?
    } else {
        cube
    };
    let truth = SyntheticTruth {
        endmembers,
        proportions,
        target_pixels: (0..n).filter(|&i| has_target[i]).collect(),
        confuser_pixels: confusers,
        noise_sigma: cfg.noise_sigma,
    };
    let mask = LabelMask::new(rows, cols, codes)?;
    Ok((cube, truth, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unmix::{residuals, unmix_all};

    fn scene(seed: u64, cfg: &SyntheticConfig) -> (HsiCube<f64>, SyntheticTruth<f64>, LabelMask) {
        generate_synthetic(cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn noiseless_pixels_reconstruct_exactly() {
        let (cube, truth, _) = scene(1, &SyntheticConfig::new(20, 20, 12, 3));
        let r = residuals(&cube, &truth.endmembers, &truth.proportions).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_count_is_forced() {
        let (_, truth, mask) = scene(2, &SyntheticConfig::new(50, 50, 20, 3).target_fraction(0.01));
        assert_eq!(truth.target_pixels.len(), 25);
        let bags = mask.to_bags().unwrap();
        assert_eq!(
            bags.bags().iter().filter(|b| b.label == crate::Label::Positive).count(),
            5
        );
        for &t in &truth.target_pixels {
            assert!(mask.codes[t] >= 2, "target pixel {t} outside positive bags");
        }
    }

    #[test]
    fn truth_invariants() {
        let cfg = SyntheticConfig::new(30, 30, 16, 3).confusers(0.02).noise(0.01);
        let (_, truth, mask) = scene(3, &cfg);
        assert!(truth.proportions.simplex_violation() < 1e-12);
        let rows_with_target: Vec<usize> = truth
            .proportions
            .rows()
            .enumerate()
            .filter(|(_, r)| r[0] > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(rows_with_target, truth.target_pixels);
        assert!(!truth.confuser_pixels.is_empty());
        assert!(truth.confuser_pixels.iter().all(|&i| mask.codes[i] == 1));
        let cols = truth.endmembers.columns();
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                assert!(spectral_angle_deg(&cols[a], &cols[b]) >= MIN_ANGLE_DEG);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SyntheticConfig::new(15, 15, 8, 2).noise(0.02);
        let (a, _, ma) = scene(9, &cfg);
        let (b, _, mb) = scene(9, &cfg);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let (c, _, _) = scene(10, &cfg);
        assert_ne!(a, c);
    }

    #[test]
    fn fcls_recovers_noiseless_truth() {
        let (cube, truth, _) = scene(4, &SyntheticConfig::new(20, 20, 20, 3).target_fraction(0.05));
        let p = unmix_all(&cube, &truth.endmembers).unwrap();
        let worst = p
            .values()
            .iter()
            .zip(truth.proportions.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(worst < 1e-6, "worst abundance error {worst}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut rng = Rng::new(0);
        assert!(generate_synthetic::<f64>(&SyntheticConfig::new(10, 10, 3, 3), &mut rng).is_err());
        assert!(generate_synthetic::<f64>(
            &SyntheticConfig::new(10, 10, 8, 2).target_fraction(0.0),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn impossible_separation_is_reported() {
        let mut rng = Rng::new(0);
        // two bands cannot hold many spectra 15 degrees apart in the positive quadrant
        assert!(matches!(
            random_endmembers(2, 12, &mut rng),
            Err(Error::AngleSeparation { .. })
        ));
    }
}
