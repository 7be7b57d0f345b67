//! Exact influence by label-flip reruns, the two cheap surrogates, and the
//! scores used to compare them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bags::{BagSet, Label};
use crate::cube::HsiCube;
use crate::efumi::{default_init, run_efumi, EfumiConfig, EfumiResult, WarmStart};
use crate::endmembers::EndmemberSet;
use crate::error::{Error, Result};
use crate::proportions::ProportionMatrix;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::superpixel::RegionMetrics;
use crate::unmix::{residuals, unmix_all};

/// A set of pixels whose labels are flipped together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub id: usize,
    pub pixels: Vec<usize>,
}

impl Unit {
    pub fn pixel(i: usize) -> Self {
        Self { id: i, pixels: vec![i] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub unit_id: usize,
    pub exact: Option<f64>,
    /// Largest target proportion over the unit.
    pub surrogate_pt: f64,
    /// Largest residual over the unit.
    pub surrogate_re: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<RegionMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    Exact,
    Pt,
    Re,
    MaxPt,
    SumPt,
    MaxRe,
    SumRe,
}

impl RankBy {
    pub fn score(self, r: &InfluenceRecord) -> Result<f64> {
        let region = || r.region.ok_or(Error::MissingField("region"));
        Ok(match self {
            RankBy::Exact => r.exact.ok_or(Error::MissingField("exact"))?,
            RankBy::Pt => r.surrogate_pt,
            RankBy::Re => r.surrogate_re,
            RankBy::MaxPt => region()?.max_pt,
            RankBy::SumPt => region()?.sum_pt,
            RankBy::MaxRe => region()?.max_re,
            RankBy::SumRe => region()?.sum_re,
        })
    }
}

impl std::str::FromStr for RankBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "exact" => RankBy::Exact,
            "pt" => RankBy::Pt,
            "re" => RankBy::Re,
            "max_pt" => RankBy::MaxPt,
            "sum_pt" => RankBy::SumPt,
            "max_re" => RankBy::MaxRe,
            "sum_re" => RankBy::SumRe,
            other => return Err(Error::InvalidInput(format!("unknown ranking field {other:?}"))),
        })
    }
}

/// Pixel selection strategy for correcting labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Rand,
    Pt,
    Re,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Rand, Strategy::Pt, Strategy::Re];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::Pt => "pt",
            Strategy::Re => "re",
        }
    }
}

/// How flipped reruns are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Restart {
    /// From the baseline endmembers and proportions.
    #[default]
    Warm,
    /// From a fresh VCA initialization with the baseline's hyperparameters.
    Cold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoIReport {
    pub strategy: Strategy,
    pub doi: f64,
    pub e_true: Vec<f64>,
    pub e_err: Vec<f64>,
    pub e_strategy: Vec<f64>,
    pub alpha: f64,
    pub beta_frac: f64,
    /// Pixels chosen for correction.
    pub n_selected: usize,
    /// Chosen pixels that had been mislabelled.
    pub n_corrected: usize,
}

/// Squared distance between two target signatures.
pub fn influence_norm<T: Scalar>(e_base: &[T], e_flipped: &[T]) -> Result<T> {
    if e_base.len() != e_flipped.len() {
        return Err(Error::DimensionMismatch {
            expected: e_base.len(),
            found: e_flipped.len(),
        });
    }
    Ok(e_base
        .iter()
        .zip(e_flipped)
        .fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b)))
}

/// Target proportion and residual of every pixel unmixed against `e`.
pub fn surrogates<T: Scalar>(cube: &HsiCube<T>, e: &EndmemberSet<T>) -> Result<(Vec<T>, Vec<T>)> {
    let p = unmix_all(cube, e)?;
    let re = residuals(cube, e, &p)?;
    Ok((p.target(), re))
}

pub fn surrogate_pt<T: Scalar>(cube: &HsiCube<T>, e: &EndmemberSet<T>) -> Result<Vec<T>> {
    Ok(unmix_all(cube, e)?.target())
}

pub fn surrogate_re<T: Scalar>(cube: &HsiCube<T>, e: &EndmemberSet<T>) -> Result<Vec<T>> {
    surrogates(cube, e).map(|(_, re)| re)
}

fn rerun<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    restart: Restart,
) -> Result<EfumiResult<T>> {
    let start = match restart {
        Restart::Warm => baseline.warm_start(),
        Restart::Cold => {
            let mut rng = Rng::new(baseline.config.seed);
            let (e, _) = default_init(cube, bags, baseline.config.m_init, &mut rng)?;
            let p = ProportionMatrix::uniform(cube.n_pixels(), e.n_columns());
            WarmStart {
                endmembers: e,
                proportions: Some(p),
                params: Some(baseline.params),
            }
        }
    };
    run_efumi(cube, bags, &baseline.config, Some(&start))
}

/// Influence of flipping `unit` on the baseline target signature.
pub fn unit_influence<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    unit: &[usize],
    restart: Restart,
) -> Result<f64> {
    if unit.is_empty() {
        return Ok(0.0);
    }
    let flipped = bags.flip(unit)?;
    let res = rerun(cube, &flipped, baseline, restart)?;
    Ok(influence_norm(baseline.endmembers.target(), res.endmembers.target())?.as_f64())
}

fn unit_surrogates<T: Scalar>(pixels: &[usize], pt: &[T], re: &[T]) -> (f64, f64) {
    pixels.iter().fold((0.0, 0.0), |(a, b), &i| {
        (f64::max(a, pt[i].as_f64()), f64::max(b, re[i].as_f64()))
    })
}

/// Exact influence of each unit, rerunning from the baseline under flipped
/// labels. Units run in parallel; output order follows `units`.
pub fn exact_influence_sweep<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    units: &[Unit],
    restart: Restart,
) -> Result<Vec<InfluenceRecord>> {
    let (pt, re) = surrogates(cube, &baseline.endmembers)?;
    units
        .par_iter()
        .map(|u| {
            let exact = unit_influence(cube, bags, baseline, &u.pixels, restart)?;
            let (spt, sre) = unit_surrogates(&u.pixels, &pt, &re);
            Ok(InfluenceRecord {
                unit_id: u.id,
                exact: Some(exact),
                surrogate_pt: spt,
                surrogate_re: sre,
                region: None,
            })
        })
        .collect()
}

/// Surrogate-only records for single pixels.
pub fn surrogate_records<T: Scalar>(
    cube: &HsiCube<T>,
    e: &EndmemberSet<T>,
    pixels: &[usize],
) -> Result<Vec<InfluenceRecord>> {
    let (pt, re) = surrogates(cube, e)?;
    pixels
        .iter()
        .map(|&i| {
            if i >= cube.n_pixels() {
                return Err(Error::PixelOutOfRange {
                    index: i,
                    n_pixels: cube.n_pixels(),
                });
            }
            Ok(InfluenceRecord {
                unit_id: i,
                exact: None,
                surrogate_pt: pt[i].as_f64(),
                surrogate_re: re[i].as_f64(),
                region: None,
            })
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidInput("spearman needs at least two pairs".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroRankVariance);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of the mislabelling error removed by a corrected estimate `e_k`.
pub fn doi<T: Scalar>(e_true: &[T], e_err: &[T], e_k: &[T]) -> Result<f64> {
    let den = influence_norm(e_true, e_err)?.as_f64();
    let num = influence_norm(e_true, e_k)?.as_f64();
    if den == 0.0 {
        return Err(Error::UndefinedDoi);
    }
    Ok((den - num) / den)
}

/// Unit ids by descending score, ties by ascending id.
pub fn rank_units(records: &[InfluenceRecord], by: RankBy) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = records
        .iter()
        .map(|r| Ok((by.score(r)?, r.unit_id)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Indices of the `k` largest values, ties by ascending index.
pub fn top_k(values: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    c.truncate(k);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryOutcome {
    /// Negative-bag pixels whose labels were flipped.
    pub flipped: Vec<usize>,
    pub reports: Vec<DoIReport>,
    /// How the surrogates driving selection were obtained.
    pub surrogate_source: String,
}

/// Mislabel a random `alpha` share of negative pixels, then correct the
/// mislabelled pixels among a `beta_frac` share of labelled pixels picked by
/// each strategy, and score each corrected rerun.
pub fn mislabel_recovery<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    config: &EfumiConfig,
    alpha: f64,
    beta_frac: f64,
    rng: &mut Rng,
) -> Result<RecoveryOutcome> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput("alpha must lie in (0, 1)".into()));
    }
    if !(beta_frac > 0.0 && beta_frac <= 1.0) {
        return Err(Error::InvalidInput("beta_frac must lie in (0, 1]".into()));
    }
    let negatives = bags.pixels_with(Label::Negative);
    let n_flip = (alpha * negatives.len() as f64).round() as usize;
    if n_flip == 0 {
        return Err(Error::NothingFlipped {
            alpha,
            n_negative: negatives.len(),
        });
    }
    let clean = run_efumi(cube, bags, config, None)?;
    let mut flipped: Vec<usize> = rng
        .sample_indices(negatives.len(), n_flip)
        .into_iter()
        .map(|k| negatives[k])
        .collect();
    flipped.sort_unstable();
    let wrong = bags.flip(&flipped)?;
    let err = run_efumi(cube, &wrong, config, None)?;
    let (pt, re) = surrogates(cube, &err.endmembers)?;
    let pt: Vec<f64> = pt.iter().map(|v| v.as_f64()).collect();
    let re: Vec<f64> = re.iter().map(|v| v.as_f64()).collect();

    let labelled = wrong.labeled_pixels();
    let n_select = ((beta_frac * labelled.len() as f64).round() as usize).min(labelled.len());
    let e_true = to_f64(clean.endmembers.target());
    let e_err = to_f64(err.endmembers.target());

    let mut reports = Vec::with_capacity(3);
    for strategy in Strategy::ALL {
        let selected = match strategy {
            Strategy::Rand => {
                let mut r = rng.fork(1);
                r.sample_indices(labelled.len(), n_select)
                    .into_iter()
                    .map(|k| labelled[k])
                    .collect()
            }
            Strategy::Pt => top_k(&pt, &labelled, n_select),
            Strategy::Re => top_k(&re, &labelled, n_select),
        };
        let fix: Vec<usize> = selected
            .iter()
            .copied()
            .filter(|p| flipped.binary_search(p).is_ok())
            .collect();
        let fixed = if fix.is_empty() {
            wrong.clone()
        } else {
            wrong.flip(&fix)?
        };
        let run = run_efumi(cube, &fixed, config, None)?;
        let e_k = to_f64(run.endmembers.target());
        reports.push(DoIReport {
            strategy,
            doi: doi(&e_true, &e_err, &e_k)?,
            e_true: e_true.clone(),
            e_err: e_err.clone(),
            e_strategy: e_k,
            alpha,
            beta_frac,
            n_selected: selected.len(),
            n_corrected: fix.len(),
        });
    }
    Ok(RecoveryOutcome {
        flipped,
        reports,
        surrogate_source: "surrogates computed from the mislabelled run".into(),
    })
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}
