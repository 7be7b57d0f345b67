use std::io::Cursor;

use efumi_core::Cube;
use image::{ImageFormat, RgbImage};

use crate::error::{ApiError, ApiResult};

/// Parses `"r,g,b"` band indices; an absent value picks three spread bands.
pub fn parse_bands(spec: Option<&str>, bands: usize) -> ApiResult<[usize; 3]> {
    let Some(spec) = spec else {
        return Ok([bands * 3 / 4, bands / 2, bands / 4].map(|b| b.min(bands - 1)));
    };
    let parsed: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::BadRequest(format!("bands must be three integers, got {spec:?}")))?;
    let [r, g, b] = parsed[..] else {
        return Err(ApiError::BadRequest(format!("bands must be three integers, got {spec:?}")));
    };
    if let Some(&bad) = [r, g, b].iter().find(|&&i| i >= bands) {
        return Err(ApiError::invalid(format!("band {bad} out of range for {bands} bands")));
    }
    Ok([r, g, b])
}

/// Value at quantile `q` of sorted `v`, nearest rank.
fn quantile(v: &[f64], q: f64) -> f64 {
    let k = ((v.len() - 1) as f64 * q).round() as usize;
    v[k]
}

/// Linear 2-98 percentile stretch of one band to 0..=255.
fn stretch(cube: &Cube, band: usize) -> Vec<u8> {
    let values: Vec<f64> = cube.pixels().map(|p| p[band]).collect();
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if sorted.is_empty() {
        return vec![0; values.len()];
    }
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile(&sorted, 0.02), quantile(&sorted, 0.98));
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span <= 0.0 || !v.is_finite() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect()
}

pub fn render_png(cube: &Cube, bands: [usize; 3]) -> ApiResult<Vec<u8>> {
    let channels = bands.map(|b| stretch(cube, b));
    let img = RgbImage::from_fn(cube.cols() as u32, cube.rows() as u32, |x, y| {
        let i = y as usize * cube.cols() + x as usize;
        image::Rgb([channels[0][i], channels[1][i], channels[2][i]])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(out.into_inner())
}
