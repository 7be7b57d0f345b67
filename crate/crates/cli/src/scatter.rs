//! Plot-ready pairs of log influence against surrogate scores.

use anyhow::{bail, Result};
use efumi_core::experiments::{log_influence, LOG_FLOOR};
use efumi_core::{InfluenceRecord, RankBy};

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub unit_id: usize,
    pub log10_influence: f64,
    /// One value per requested axis.
    pub surrogates: Vec<f64>,
    /// Influence fell below the floor and was clamped before the log.
    pub clamped: bool,
}

pub fn axis_name(axis: RankBy) -> &'static str {
    match axis {
        RankBy::Exact => "exact",
        RankBy::Pt => "pt",
        RankBy::Re => "re",
        RankBy::MaxPt => "max_pt",
        RankBy::SumPt => "sum_pt",
        RankBy::MaxRe => "max_re",
        RankBy::SumRe => "sum_re",
    }
}

/// One row per record: `log10(max(I, 1e-300))` against each axis.
pub fn emit_scatter(records: &[InfluenceRecord], axes: &[RankBy]) -> Result<Vec<ScatterRow>> {
    if records.is_empty() {
        bail!("no records to plot");
    }
    let rows = records
        .iter()
        .map(|r| {
            let Some(i) = r.exact else {
                bail!("record for unit {} has no exact influence", r.unit_id);
            };
            let surrogates = axes.iter().map(|a| a.score(r)).collect::<efumi_core::Result<Vec<_>>>()?;
            if let Some(bad) = surrogates.iter().find(|v| !v.is_finite()) {
                bail!("unit {}: non-finite surrogate {bad}", r.unit_id);
            }
            Ok(ScatterRow {
                unit_id: r.unit_id,
                log10_influence: log_influence(i),
                surrogates,
                clamped: !(i >= LOG_FLOOR),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.iter().all(|r| r.clamped) {
        log::warn!("every influence is zero; the log axis is clamped at {LOG_FLOOR:e}");
    }
    Ok(rows)
}

pub fn scatter_csv(rows: &[ScatterRow], axes: &[RankBy]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["unit_id", "log10_influence"];
    header.extend(axes.iter().map(|&a| axis_name(a)));
    header.push("clamped");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.unit_id.to_string(), r.log10_influence.to_string()];
        rec.extend(r.surrogates.iter().map(f64::to_string));
        rec.push(u8::from(r.clamped).to_string());
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}

/// `unit_id,exact,pt,re`, plus the four region metrics when any record has
/// them. A missing exact value is an empty field.
pub fn records_csv(records: &[InfluenceRecord]) -> Result<Vec<u8>> {
    let regions = records.iter().any(|r| r.region.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["unit_id", "exact", "pt", "re"];
    if regions {
        header.extend(["max_pt", "sum_pt", "max_re", "sum_re"]);
    }
    w.write_record(&header)?;
    for r in records {
        let mut rec = vec![
            r.unit_id.to_string(),
            r.exact.map(|v| v.to_string()).unwrap_or_default(),
            r.surrogate_pt.to_string(),
            r.surrogate_re.to_string(),
        ];
        if regions {
            match r.region {
                Some(m) => rec.extend([m.max_pt, m.sum_pt, m.max_re, m.sum_re].map(|v| v.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        w.write_record(&rec)?;
    }
    Ok(w.into_inner()?)
}
