//! Blocking job bodies. Each returns the workspace-relative reference of
//! what it wrote.

use efumi_core::efumi::run_efumi;
use efumi_core::influence::{exact_influence_sweep, surrogates, top_k};
use efumi_core::io::encode_cube;
use efumi_core::superpixel::{region_metrics, segment};
use efumi_core::{Cube, EfumiConfig, InfluenceRecord, SuperpixelMap, Unit};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult};
use crate::jobs::Progress;
use crate::workspace::{write_atomic, RunRecord, Workspace};

/// Exact influence without an explicit `top_k` is limited to this many units.
pub const EXACT_DEFAULT_TOP_K: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pt,
    Re,
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Pixel,
    Superpixel,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceRequest {
    pub method: Method,
    pub granularity: Granularity,
    /// Number of units kept (surrogates) or rerun (exact), best first by `pt`.
    pub top_k: Option<usize>,
    /// Segment on the fly instead of using the dataset's latest map.
    pub target_segments: Option<usize>,
    pub compactness: Option<f64>,
    pub restart: efumi_core::influence::Restart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceOutput {
    pub run_id: String,
    pub request: InfluenceRequest,
    /// Units that could be scored: labelled pixels, or segments holding one.
    pub n_candidates: usize,
    /// Best first by the requested method.
    pub records: Vec<InfluenceRecord>,
}

fn core(e: efumi_core::Error) -> ApiError {
    ApiError::Internal(e.to_string())
}

pub fn run(
    ws: &Workspace,
    dataset_id: &str,
    bags_version: &str,
    config: &EfumiConfig,
    progress: &mut Progress,
) -> ApiResult<String> {
    let cube = ws.cube(dataset_id)?;
    let bags = ws.bags(dataset_id, bags_version, cube.n_pixels())?;
    progress.report(0.05);
    let result = run_efumi(&cube, &bags, config, None)?;
    let record = RunRecord {
        dataset_id: dataset_id.to_string(),
        bags_version: bags_version.to_string(),
        config: config.clone(),
        params: result.params,
        iterations: result.iterations,
        converged: result.converged,
        vca_fallback: result.vca_fallback,
        cost_trace: result.cost_trace.clone(),
        endmembers: result.endmembers.columns().to_vec(),
    };
    ws.save_run(progress.job_id(), &record, &result)
}

pub fn superpixels(
    ws: &Workspace,
    dataset_id: &str,
    target_segments: usize,
    compactness: f64,
    progress: &mut Progress,
) -> ApiResult<String> {
    let cube = ws.cube(dataset_id)?;
    let map = segment(&cube, target_segments, compactness)?;
    let name = progress.job_id().to_string();
    ws.save_superpixels(dataset_id, &name, &map)
}

fn score(method: Method, r: &InfluenceRecord) -> f64 {
    match method {
        Method::Pt => r.surrogate_pt,
        Method::Re => r.surrogate_re,
        Method::Exact => r.exact.unwrap_or(0.0),
    }
}

/// Exact sweep in slices so progress can be reported between them.
fn sweep_with_progress(
    cube: &Cube,
    bags: &efumi_core::BagSet,
    base: &efumi_core::Efumi,
    units: &[Unit],
    restart: efumi_core::influence::Restart,
    progress: &mut Progress,
) -> ApiResult<Vec<InfluenceRecord>> {
    let chunk = units.len().div_ceil(10).max(1);
    let mut out = Vec::with_capacity(units.len());
    for (k, part) in units.chunks(chunk).enumerate() {
        out.extend(exact_influence_sweep(cube, bags, base, part, restart).map_err(core)?);
        progress.report(0.1 + 0.85 * ((k + 1) * chunk).min(units.len()) as f64 / units.len() as f64);
    }
    Ok(out)
}

pub fn influence(
    ws: &Workspace,
    run_id: &str,
    request: &InfluenceRequest,
    map: Option<SuperpixelMap>,
    progress: &mut Progress,
) -> ApiResult<String> {
    let (record, base) = ws.run_result(run_id)?;
    let cube = ws.cube(&record.dataset_id)?;
    let bags = ws.bags(&record.dataset_id, &record.bags_version, cube.n_pixels())?;
    let (pt, re) = surrogates(&cube, &base.endmembers).map_err(core)?;
    let labels = bags.label_map(cube.n_pixels());
    progress.report(0.05);

    // Units, and for each pixel the unit it belongs to (if any).
    let (units, owner, metrics) = match request.granularity {
        Granularity::Pixel => {
            let units: Vec<Unit> = bags.labeled_pixels().into_iter().map(Unit::pixel).collect();
            let owner: Vec<usize> = (0..cube.n_pixels()).collect();
            (units, owner, None)
        }
        Granularity::Superpixel => {
            let map = match map {
                Some(m) => m,
                None => segment(
                    &cube,
                    request.target_segments.expect("checked by the handler"),
                    request.compactness.unwrap_or(efumi_core::superpixel::DEFAULT_COMPACTNESS),
                )?,
            };
            if (map.rows(), map.cols()) != (cube.rows(), cube.cols()) {
                return Err(ApiError::invalid("superpixel map does not match the cube"));
            }
            let metrics = region_metrics(&map, &pt, &re).map_err(core)?;
            let units: Vec<Unit> = map
                .units()
                .into_iter()
                .filter_map(|u| {
                    let pixels: Vec<usize> = u.pixels.into_iter().filter(|&i| labels[i].is_some()).collect();
                    (!pixels.is_empty()).then_some(Unit { id: u.id, pixels })
                })
                .collect();
            let owner = map.labels().iter().map(|&l| l as usize).collect();
            (units, owner, Some(metrics))
        }
    };

    let unit_pt = |u: &Unit| match &metrics {
        Some(m) => m[u.id].max_pt,
        None => pt[u.id],
    };
    let unit_re = |u: &Unit| match &metrics {
        Some(m) => m[u.id].max_re,
        None => re[u.id],
    };
    let n_candidates = units.len();
    let mut records: Vec<InfluenceRecord> = if request.method == Method::Exact {
        let k = request.top_k.unwrap_or(EXACT_DEFAULT_TOP_K);
        let by_pt: Vec<f64> = units.iter().map(unit_pt).collect();
        let picked: Vec<Unit> = top_k(&by_pt, &(0..units.len()).collect::<Vec<_>>(), k)
            .into_iter()
            .map(|j| units[j].clone())
            .collect();
        sweep_with_progress(&cube, &bags, &base, &picked, request.restart, progress)?
    } else {
        units
            .iter()
            .map(|u| InfluenceRecord {
                unit_id: u.id,
                exact: None,
                surrogate_pt: unit_pt(u),
                surrogate_re: unit_re(u),
                region: None,
            })
            .collect()
    };
    if let Some(m) = &metrics {
        for r in &mut records {
            r.surrogate_pt = m[r.unit_id].max_pt;
            r.surrogate_re = m[r.unit_id].max_re;
            r.region = Some(m[r.unit_id]);
        }
    }
    records.sort_by(|a, b| score(request.method, b).total_cmp(&score(request.method, a)).then(a.unit_id.cmp(&b.unit_id)));
    if request.method != Method::Exact {
        if let Some(k) = request.top_k {
            records.truncate(k);
        }
    }

    // Heatmap: every pixel shows its unit's score; pixels whose unit was not
    // scored show 0.
    let mut unit_score = std::collections::HashMap::new();
    for r in &records {
        unit_score.insert(r.unit_id, score(request.method, r));
    }
    let heat: Vec<f64> = match (request.method, request.granularity) {
        (Method::Pt, Granularity::Pixel) if request.top_k.is_none() => pt.clone(),
        (Method::Re, Granularity::Pixel) if request.top_k.is_none() => re.clone(),
        _ => owner.iter().map(|u| unit_score.get(u).copied().unwrap_or(0.0)).collect(),
    };
    let heat = Cube::new(cube.rows(), cube.cols(), 1, heat).map_err(core)?;

    let out = InfluenceOutput {
        run_id: run_id.to_string(),
        request: request.clone(),
        n_candidates,
        records,
    };
    let dir = ws.influence_dir(progress.job_id());
    write_atomic(&dir.join("heatmap.hsic"), &encode_cube(&heat).map_err(core)?)?;
    write_atomic(&dir.join("records.json"), &serde_json::to_vec_pretty(&out)?)?;
    Ok(format!("influence/{}", progress.job_id()))
}
