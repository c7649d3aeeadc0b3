//! Triplet manifests, patch selection, automatic labels and aggregation of
//! human judgments.

use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::clip::{load_clip, VideoClip};
use crate::error::{Error, Result};
use crate::metrics::VideoMetric;

pub const AUTO_THRESHOLD: f64 = 0.15;
pub const DEFAULT_PATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Auto,
    Human,
    Unlabeled,
}

/// One sample: candidates A and B, the reference, and the fraction of
/// annotators preferring B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub a: String,
    pub b: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub h: Option<f64>,
    pub source: Source,
}

impl Triplet {
    pub fn unlabeled(id: impl Into<String>, a: impl Into<String>, b: impl Into<String>, reference: impl Into<String>) -> Self {
        Self { id: id.into(), a: a.into(), b: b.into(), reference: reference.into(), h: None, source: Source::Unlabeled }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.h, self.source) {
            (None, Source::Unlabeled) => Ok(()),
            (Some(h), Source::Auto | Source::Human) if (0.0..=1.0).contains(&h) => Ok(()),
            (Some(h), Source::Auto | Source::Human) => {
                Err(Error::Invalid(format!("triplet `{}`: h = {h} outside [0, 1]", self.id)))
            }
            (h, source) => Err(Error::Invalid(format!(
                "triplet `{}`: h = {h:?} is inconsistent with source {source:?}",
                self.id
            ))),
        }
    }

    pub fn is_labeled(&self) -> bool {
        self.h.is_some()
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Triplet = serde_json::from_str(line)
            .map_err(|e| Error::Invalid(format!("manifest line {}: {e}", lineno + 1)))?;
        t.validate()?;
        if !ids.insert(t.id.clone()) {
            return Err(Error::Invalid(format!("manifest line {}: duplicate id `{}`", lineno + 1, t.id)));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    parse_manifest(&text)
}

pub fn manifest_to_string(triplets: &[Triplet]) -> Result<String> {
    let mut s = String::new();
    for t in triplets {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    Ok(s)
}

/// Replaces the manifest atomically (write to a sibling temp file, then rename).
pub fn write_manifest(path: impl AsRef<Path>, triplets: &[Triplet]) -> Result<()> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::io(dir))?;
    tmp.write_all(manifest_to_string(triplets)?.as_bytes()).map_err(Error::io(path))?;
    tmp.as_file().sync_all().map_err(Error::io(path))?;
    tmp.persist(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

/// Clip paths in a manifest are relative to the manifest's directory.
pub fn resolve_clip(manifest: &Path, clip: &str) -> PathBuf {
    let p = Path::new(clip);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().map(|d| d.join(p)).unwrap_or_else(|| p.to_path_buf())
}

/// Loads `(V_A, V_B, V_R)` and checks they share a shape.
pub fn load_triplet(manifest: &Path, t: &Triplet) -> Result<(VideoClip, VideoClip, VideoClip)> {
    let a = load_clip(resolve_clip(manifest, &t.a))?;
    let b = load_clip(resolve_clip(manifest, &t.b))?;
    let r = load_clip(resolve_clip(manifest, &t.reference))?;
    a.check_same_shape(&r)?;
    b.check_same_shape(&r)?;
    Ok((a, b, r))
}

/// Per-pixel `|A - B|` averaged over frames and channels, `H * W` row-major.
pub fn error_map(a: &VideoClip, b: &VideoClip) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    let hw = a.height() * a.width();
    let mut map = vec![0.0f64; hw];
    for (pa, pb) in a.frames().data().chunks_exact(hw).zip(b.frames().data().chunks_exact(hw)) {
        for ((m, &x), &y) in map.iter_mut().zip(pa).zip(pb) {
            *m += (x as f64 - y as f64).abs();
        }
    }
    let planes = (a.frame_count() * 3) as f64;
    map.iter_mut().for_each(|m| *m /= planes);
    Ok(map)
}

/// Top-left corner of the `patch`-sized window with the largest summed
/// error, searched on a grid of the given stride (1 = exhaustive). Ties
/// go to the smallest `(row, col)`.
pub fn select_patch(a: &VideoClip, b: &VideoClip, patch: usize, stride: usize) -> Result<(usize, usize)> {
    let (h, w) = (a.height(), a.width());
    if patch == 0 || stride == 0 {
        return Err(Error::Invalid("patch size and stride must be positive".into()));
    }
    if patch > h || patch > w {
        return Err(Error::Invalid(format!("patch {patch} larger than {h}x{w} frames")));
    }
    let map = error_map(a, b)?;
    // summed-area table with a zero border row and column
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += map[y * w + x];
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let at = |y: usize, x: usize| sat[y * (w + 1) + x];
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for r in (0..=h - patch).step_by(stride) {
        for c in (0..=w - patch).step_by(stride) {
            let s = at(r + patch, c + patch) - at(r, c + patch) - at(r + patch, c) + at(r, c);
            if s > best.0 {
                best = (s, (r, c));
            }
        }
    }
    Ok(best.1)
}

/// Hard label from reference-metric scores of A and B (lower = closer to
/// the reference). `None` defers the triplet to human annotators.
pub fn auto_label(m_a: f64, m_b: f64, threshold: f64) -> Option<f64> {
    if (m_a - m_b).abs() > threshold {
        Some(if m_b < m_a { 1.0 } else { 0.0 })
    } else {
        None
    }
}

pub fn auto_annotate(
    a: &VideoClip,
    b: &VideoClip,
    r: &VideoClip,
    metric: &dyn VideoMetric,
    threshold: f64,
) -> Result<Option<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!("threshold must be positive, got {threshold}")));
    }
    a.check_same_shape(r)?;
    b.check_same_shape(r)?;
    let m_a = metric.distance(a, r)?;
    let m_b = metric.distance(b, r)?;
    Ok(auto_label(m_a, m_b, threshold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    #[serde(rename = "A_sure")]
    ASure,
    #[serde(rename = "A_maybe")]
    AMaybe,
    #[serde(rename = "B_maybe")]
    BMaybe,
    #[serde(rename = "B_sure")]
    BSure,
}

impl Choice {
    pub fn prefers_b(self) -> bool {
        matches!(self, Choice::BMaybe | Choice::BSure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub triplet_id: String,
    pub annotator_id: String,
    pub choice: Choice,
    pub timestamp: DateTime<Utc>,
}

pub const JUDGMENTS_PER_TRIPLET: usize = 3;

/// Fraction of the three annotators preferring B.
pub fn aggregate_judgments(judgments: &[Judgment]) -> Result<f64> {
    if judgments.len() != JUDGMENTS_PER_TRIPLET {
        return Err(Error::Invalid(format!(
            "need exactly {JUDGMENTS_PER_TRIPLET} judgments, got {}",
            judgments.len()
        )));
    }
    let triplet = &judgments[0].triplet_id;
    if judgments.iter().any(|j| &j.triplet_id != triplet) {
        return Err(Error::Invalid("judgments refer to different triplets".into()));
    }
    let annotators: HashSet<_> = judgments.iter().map(|j| &j.annotator_id).collect();
    if annotators.len() != judgments.len() {
        return Err(Error::Invalid(format!("duplicate annotator on triplet `{triplet}`")));
    }
    let votes = judgments.iter().filter(|j| j.choice.prefers_b()).count();
    Ok(votes as f64 / JUDGMENTS_PER_TRIPLET as f64)
}

/// The two-decimal value written to manifests: 0, 0.33, 0.66 or 1.
pub fn quantize_h(h: f64) -> f64 {
    match (h * 3.0).round() as i64 {
        i64::MIN..=0 => 0.0,
        1 => 0.33,
        2 => 0.66,
        _ => 1.0,
    }
}
