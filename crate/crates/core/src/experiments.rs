//! Drivers for the single-point, recovery and superpixel experiments.

use serde::{Deserialize, Serialize};

use crate::bags::BagSet;
use crate::cube::HsiCube;
use crate::efumi::{run_efumi, EfumiConfig, EfumiResult};
use crate::error::{Error, Result};
use crate::influence::{
    exact_influence_sweep, spearman, surrogates, top_k, InfluenceRecord, Restart, Unit,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::superpixel::{region_metrics, RegionMetrics, SuperpixelMap};

/// Floor applied before taking `log10` of an influence value.
pub const LOG_FLOOR: f64 = 1e-300;

pub fn log_influence(i: f64) -> f64 {
    i.max(LOG_FLOOR).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Random,
    TopPt,
    TopRe,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Selector::Random),
            "top_pt" | "top-pt" | "pt" => Ok(Selector::TopPt),
            "top_re" | "top-re" | "re" => Ok(Selector::TopRe),
            other => Err(Error::InvalidInput(format!("unknown selector {other:?}"))),
        }
    }
}

/// Pixels chosen from the labelled set by `selector`.
pub fn select_pixels<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    selector: Selector,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let labelled = bags.labeled_pixels();
    let n = n.min(labelled.len());
    Ok(match selector {
        Selector::Random => {
            let mut v: Vec<usize> = rng
                .sample_indices(labelled.len(), n)
                .into_iter()
                .map(|k| labelled[k])
                .collect();
            v.sort_unstable();
            v
        }
        Selector::TopPt | Selector::TopRe => {
            let (pt, re) = surrogates(cube, &baseline.endmembers)?;
            let score = if selector == Selector::TopPt { pt } else { re };
            let score: Vec<f64> = score.iter().map(|v| v.as_f64()).collect();
            top_k(&score, &labelled, n)
        }
    })
}

/// Rank correlations of log influence against each surrogate. `None` when
/// a side has no rank variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub pt: Option<f64>,
    pub re: Option<f64>,
}

fn correlate(records: &[InfluenceRecord], f: impl Fn(&InfluenceRecord) -> f64) -> Option<f64> {
    let li: Vec<f64> = records.iter().map(|r| log_influence(r.exact.unwrap_or(0.0))).collect();
    let s: Vec<f64> = records.iter().map(f).collect();
    spearman(&li, &s).ok()
}

pub fn correlations(records: &[InfluenceRecord]) -> Correlations {
    Correlations {
        pt: correlate(records, |r| r.surrogate_pt),
        re: correlate(records, |r| r.surrogate_re),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub selector: Selector,
    pub records: Vec<InfluenceRecord>,
    pub spearman: Correlations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinglePointReport {
    pub n_units: usize,
    pub sweeps: Vec<Sweep>,
    /// Pixels shared by the random and top-by-pt selections.
    pub overlap_random_top_pt: usize,
}

/// Exact influence of flipping single pixels picked by each selector.
pub fn single_point<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    selectors: &[Selector],
    n_units: usize,
    restart: Restart,
    rng: &mut Rng,
) -> Result<SinglePointReport> {
    let mut sweeps = Vec::with_capacity(selectors.len());
    let mut picked = Vec::with_capacity(selectors.len());
    for &selector in selectors {
        let pixels = select_pixels(cube, bags, baseline, selector, n_units, rng)?;
        let units: Vec<Unit> = pixels.iter().map(|&i| Unit::pixel(i)).collect();
        let records = exact_influence_sweep(cube, bags, baseline, &units, restart)?;
        sweeps.push(Sweep {
            selector,
            spearman: correlations(&records),
            records,
        });
        picked.push((selector, pixels));
    }
    let find = |s: Selector| picked.iter().find(|(k, _)| *k == s).map(|(_, v)| v);
    let overlap = match (find(Selector::Random), find(Selector::TopPt)) {
        (Some(a), Some(b)) => a.iter().filter(|p| b.contains(p)).count(),
        _ => 0,
    };
    Ok(SinglePointReport {
        n_units,
        sweeps,
        overlap_random_top_pt: overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCorrelations {
    pub max_pt: Option<f64>,
    pub sum_pt: Option<f64>,
    pub max_re: Option<f64>,
    pub sum_re: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperpixelReport {
    pub n_segments: usize,
    pub mean_size: f64,
    /// Segments with no labelled pixel, which cannot be flipped.
    pub skipped: Vec<usize>,
    pub records: Vec<InfluenceRecord>,
    pub spearman: RegionCorrelations,
}

/// Influence of flipping each segment's labelled pixels, against its region
/// metrics. Segments without labelled pixels are skipped and listed.
pub fn superpixel_experiment<T: Scalar>(
    cube: &HsiCube<T>,
    bags: &BagSet,
    baseline: &EfumiResult<T>,
    map: &SuperpixelMap,
    restart: Restart,
) -> Result<SuperpixelReport> {
    if (map.rows(), map.cols()) != (cube.rows(), cube.cols()) {
        return Err(Error::DimensionMismatch {
            expected: cube.n_pixels(),
            found: map.labels().len(),
        });
    }
    let (pt, re) = surrogates(cube, &baseline.endmembers)?;
    let metrics = region_metrics(map, &pt, &re)?;
    let labels = bags.label_map(cube.n_pixels());
    let mut units = Vec::new();
    let mut skipped = Vec::new();
    for u in map.units() {
        let pixels: Vec<usize> = u.pixels.iter().copied().filter(|&i| labels[i].is_some()).collect();
        if pixels.is_empty() {
            skipped.push(u.id);
        } else {
            units.push(Unit { id: u.id, pixels });
        }
    }
    let mut records = exact_influence_sweep(cube, bags, baseline, &units, restart)?;
    for r in &mut records {
        let m: RegionMetrics = metrics[r.unit_id];
        r.surrogate_pt = m.max_pt;
        r.surrogate_re = m.max_re;
        r.region = Some(m);
    }
    let by = |f: fn(&RegionMetrics) -> f64| correlate(&records, |r| f(r.region.as_ref().expect("set above")));
    let spearman = RegionCorrelations {
        max_pt: by(|m| m.max_pt),
        sum_pt: by(|m| m.sum_pt),
        max_re: by(|m| m.max_re),
        sum_re: by(|m| m.sum_re),
    };
    Ok(SuperpixelReport {
        n_segments: map.n_segments(),
        mean_size: cube.n_pixels() as f64 / map.n_segments() as f64,
        skipped,
        records,
        spearman,
    })
}

/// Runs the baseline for an experiment.
pub fn baseline<T: Scalar>(cube: &HsiCube<T>, bags: &BagSet, config: &EfumiConfig) -> Result<EfumiResult<T>> {
    run_efumi(cube, bags, config, None)
}
