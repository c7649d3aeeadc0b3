//! Agreement with human judgments, rank correlations against MOS,
//! sliding-window scoring of long clips, and the PSNR/SSIM baselines.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub triplet_id: String,
    pub d_a: f64,
    pub d_b: f64,
    /// Fraction of humans preferring B.
    pub h: f64,
}

/// Mean agreement credit between the metric's choice and human preference.
pub fn two_afc(results: &[PairedResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Invalid("2AFC over an empty result set".into()));
    }
    let mut total = 0.0;
    for r in results {
        if r.d_a.is_nan() || r.d_b.is_nan() || !(0.0..=1.0).contains(&r.h) {
            return Err(Error::Invalid(format!("bad paired result for `{}`", r.triplet_id)));
        }
        let g = if r.d_b < r.d_a {
            1.0
        } else if r.d_b > r.d_a {
            0.0
        } else {
            0.5
        };
        total += g * r.h + (1.0 - g) * (1.0 - r.h);
    }
    Ok(total / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub group_id: String,
    pub item_id: String,
    pub prediction: f64,
    pub mos: f64,
}

pub fn read_mos_csv(path: impl AsRef<Path>) -> Result<Vec<MosRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["group_id", "item_id", "prediction", "mos"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Invalid(format!(
            "{}: header must be {}, found {}",
            path.display(),
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; `None` when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall's tau-b.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let sx = (x[i] - x[j]).partial_cmp(&0.0)?;
            let sy = (y[i] - y[j]).partial_cmp(&0.0)?;
            use std::cmp::Ordering::Equal;
            if sx == Equal {
                ties_x += 1;
            }
            if sy == Equal {
                ties_y += 1;
            }
            if sx != Equal && sy != Equal {
                if sx == sy {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - ties_x) as f64 * (pairs - ties_y) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub srocc: f64,
    pub plcc: f64,
    pub krocc: f64,
}

pub fn correlations(pred: &[f64], mos: &[f64]) -> Option<Correlations> {
    Some(Correlations {
        srocc: spearman(pred, mos)?,
        plcc: pearson(pred, mos)?,
        krocc: kendall_tau_b(pred, mos)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCorrelation {
    pub group_id: String,
    pub items: usize,
    pub correlations: Correlations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub groups: Vec<GroupCorrelation>,
    /// Groups with fewer than two items or a constant column.
    pub excluded: Vec<String>,
    /// Equal-weight mean over the scored groups.
    pub mean: Option<Correlations>,
}

pub fn rank_correlations(records: &[MosRecord]) -> CorrelationReport {
    let mut grouped: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = grouped.entry(&r.group_id).or_default();
        e.0.push(r.prediction);
        e.1.push(r.mos);
    }
    let mut groups = Vec::new();
    let mut excluded = Vec::new();
    for (id, (pred, mos)) in grouped {
        match correlations(&pred, &mos) {
            Some(c) => groups.push(GroupCorrelation { group_id: id.to_string(), items: pred.len(), correlations: c }),
            None => {
                log::warn!("group `{id}` excluded: correlation undefined (fewer than 2 items or a constant column)");
                excluded.push(id.to_string());
            }
        }
    }
    let mean = (!groups.is_empty()).then(|| {
        let k = groups.len() as f64;
        let sum = |f: fn(&Correlations) -> f64| groups.iter().map(|g| f(&g.correlations)).sum::<f64>() / k;
        Correlations { srocc: sum(|c| c.srocc), plcc: sum(|c| c.plcc), krocc: sum(|c| c.krocc) }
    });
    CorrelationReport { groups, excluded, mean }
}

/// The results JSON document. Fields that were not computed are null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub two_afc: Option<f64>,
    pub srocc: Option<f64>,
    pub plcc: Option<f64>,
    pub krocc: Option<f64>,
    pub groups: usize,
}

impl EvalResults {
    pub fn from_correlations(report: &CorrelationReport) -> Self {
        Self {
            two_afc: None,
            srocc: report.mean.map(|c| c.srocc),
            plcc: report.mean.map(|c| c.plcc),
            krocc: report.mean.map(|c| c.krocc),
            groups: report.groups.len(),
        }
    }
}

/// Window start indices `0, stride, 2 * stride, ...` that fit inside `frames`.
pub fn window_starts(frames: usize, window: usize, stride: usize) -> Result<Vec<usize>> {
    if window == 0 || stride == 0 {
        return Err(Error::Invalid("window and stride must be positive".into()));
    }
    if frames < window {
        return Err(Error::Shape(format!("clip of {frames} frames is shorter than the {window}-frame window")));
    }
    Ok((0..=frames - window).step_by(stride).collect())
}

/// Mean of `score` over temporal windows `[i, i + window)`; a trailing
/// partial window is dropped.
pub fn sliding_window_score(
    v: &VideoClip,
    v_ref: &VideoClip,
    window: usize,
    stride: usize,
    mut score: impl FnMut(&VideoClip, &VideoClip) -> Result<f64>,
) -> Result<f64> {
    v.check_same_shape(v_ref)?;
    let starts = window_starts(v.frame_count(), window, stride)?;
    let mut total = 0.0;
    for &s in &starts {
        total += score(&v.window(s, window)?, &v_ref.window(s, window)?)?;
    }
    Ok(total / starts.len() as f64)
}

/// Peak-to-peak range of clip values.
pub const PEAK: f64 = 2.0;

/// PSNR in dB over all frames; identical clips give `+inf`.
pub fn psnr(v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
    v.check_same_shape(v_ref)?;
    let a = v.frames().data();
    let b = v_ref.frames().data();
    let sse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

pub const SSIM_TAPS: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn gaussian_taps() -> [f64; SSIM_TAPS] {
    let mut taps = [0.0; SSIM_TAPS];
    let centre = (SSIM_TAPS / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - centre).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Rec.601 luma of a `[3, H, W]` frame.
pub fn luma(frame: &[f32], hw: usize) -> Vec<f64> {
    (0..hw)
        .map(|p| 0.299 * frame[p] as f64 + 0.587 * frame[hw + p] as f64 + 0.114 * frame[2 * hw + p] as f64)
        .collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64; SSIM_TAPS]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_TAPS, w + 1 - SSIM_TAPS);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * img[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between two luma planes.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Shape(format!("SSIM needs frames of at least {SSIM_TAPS}x{SSIM_TAPS}, got {h}x{w}")));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&prod(a, a), h, w, &taps);
    let e_bb = filter_valid(&prod(b, b), h, w, &taps);
    let e_ab = filter_valid(&prod(a, b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean SSIM over the luma of every frame.
pub fn ssim(v: &VideoClip, v_ref: &VideoClip) -> Result<f64> {
    v.check_same_shape(v_ref)?;
    let (h, w) = (v.height(), v.width());
    let mut total = 0.0;
    for t in 0..v.frame_count() {
        total += ssim_plane(&luma(v.frame(t), h * w), &luma(v_ref.frame(t), h * w), h, w)?;
    }
    Ok(total / v.frame_count() as f64)
}
