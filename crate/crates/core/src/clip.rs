//! Video clips: frame stacks in `[-1, 1]`, PNG directory IO and resizing.

use std::collections::BTreeMap;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use vfiqa_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Spatial sizes fed to the pyramid are multiples of this.
pub const SIZE_QUANTUM: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    /// `[N, 3, H, W]`
    frames: Tensor<f32>,
    pub fps_hint: Option<f32>,
}

impl VideoClip {
    pub fn new(id: impl Into<String>, frames: Tensor<f32>) -> Result<Self> {
        let id = id.into();
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Shape(format!("clip `{id}` must be [N>=1, 3, H, W], got {s:?}")));
        }
        if let Some(v) = frames.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("clip `{id}` holds {v}, outside [-1, 1]")));
        }
        Ok(Self { id, frames, fps_hint: None })
    }

    /// Builds a clip from `f(frame, channel, y, x)`.
    pub fn from_fn(
        id: impl Into<String>,
        [n, h, w]: [usize; 3],
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let frames = Tensor::from_fn([n, 3, h, w], |i| {
            let (x, y, c, t) = (i % w, (i / w) % h, (i / (w * h)) % 3, i / (3 * w * h));
            f(t, c, y, x)
        });
        Self::new(id, frames)
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// `[3, H, W]` values of frame `t`.
    pub fn frame(&self, t: usize) -> &[f32] {
        let len = 3 * self.height() * self.width();
        &self.frames.data()[t * len..(t + 1) * len]
    }

    pub fn same_shape(&self, other: &VideoClip) -> bool {
        self.frames.shape() == other.frames.shape()
    }

    pub fn check_same_shape(&self, other: &VideoClip) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "clips `{}` {:?} and `{}` {:?} differ in shape",
                self.id,
                self.frames.shape(),
                other.id,
                other.frames.shape()
            )))
        }
    }

    /// Frames `[start, start + len)`.
    pub fn window(&self, start: usize, len: usize) -> Result<VideoClip> {
        if len == 0 || start + len > self.frame_count() {
            return Err(Error::Shape(format!(
                "window [{start}, {}) outside clip of {} frames",
                start + len,
                self.frame_count()
            )));
        }
        let per = 3 * self.height() * self.width();
        let data = self.frames.data()[start * per..(start + len) * per].to_vec();
        let frames = Tensor::new([len, 3, self.height(), self.width()], data)?;
        Ok(VideoClip { id: format!("{}[{start}..{}]", self.id, start + len), frames, fps_hint: self.fps_hint })
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resized(&self, height: usize, width: usize) -> Result<VideoClip> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("resize target must be non-empty".into()));
        }
        if (height, width) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let (h, w) = (self.height(), self.width());
        let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let lo = (src.floor() as usize).min(inp - 1);
                    let hi = (lo + 1).min(inp - 1);
                    (lo, hi, (src - lo as f64).min(1.0) as f32)
                })
                .collect()
        };
        let (ty, tx) = (taps(height, h), taps(width, w));
        let planes = self.frame_count() * 3;
        let src = self.frames.data();
        let mut out = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push((top * (1.0 - fy) + bottom * fy).clamp(-1.0, 1.0));
                }
            }
        }
        let frames = Tensor::new([self.frame_count(), 3, height, width], out)?;
        Ok(VideoClip { id: self.id.clone(), frames, fps_hint: self.fps_hint })
    }

    /// Frames of several equally shaped clips stacked sample-major into
    /// `[clips * N, 3, H, W]`.
    pub fn stack<T: Element>(clips: &[&VideoClip]) -> Result<Tensor<T>> {
        let first = clips.first().ok_or_else(|| Error::Shape("no clips to stack".into()))?;
        let mut data = Vec::with_capacity(clips.len() * first.frames.numel());
        for c in clips {
            first.check_same_shape(c)?;
            data.extend(c.frames.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        let mut shape = first.frames.shape().to_vec();
        shape[0] *= clips.len();
        Ok(Tensor::new(shape, data)?)
    }
}

/// Rounds `extent` to the nearest multiple of [`SIZE_QUANTUM`], never below it.
pub fn snap_extent(extent: f64) -> usize {
    let q = SIZE_QUANTUM as f64;
    ((extent / q).round().max(1.0) as usize) * SIZE_QUANTUM
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:03}.png")
}

pub(crate) fn parse_frame_index(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("frame_")?.strip_suffix(".png")?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn clip_error(dir: &Path, reason: impl Into<String>) -> Error {
    Error::Clip { path: dir.to_path_buf(), reason: reason.into() }
}

/// Frame files of a clip directory in index order.
pub fn frame_paths(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut found = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let name = entry.file_name();
        let Some(index) = name.to_str().and_then(parse_frame_index) else {
            continue;
        };
        if let Some(prev) = found.insert(index, entry.path()) {
            return Err(clip_error(dir, format!("frame {index} appears twice ({})", prev.display())));
        }
    }
    if found.is_empty() {
        return Err(clip_error(dir, "no frame_NNN.png files"));
    }
    let last = *found.keys().next_back().unwrap();
    let missing: Vec<String> = (0..=last).filter(|i| !found.contains_key(i)).map(|i| i.to_string()).collect();
    if !missing.is_empty() {
        return Err(clip_error(dir, format!("missing frame(s) {}", missing.join(", "))));
    }
    Ok(found.into_values().collect())
}

/// Reads `frame_000.png ... frame_{N-1}.png`, mapping 8-bit values to `[-1, 1]`.
pub fn load_clip(dir: impl AsRef<Path>) -> Result<VideoClip> {
    let dir = dir.as_ref();
    let paths = frame_paths(dir)?;
    let mut size = None;
    let mut data = Vec::new();
    for path in &paths {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.clone(), source })?
            .to_rgb8();
        let dims = img.dimensions();
        if *size.get_or_insert(dims) != dims {
            return Err(clip_error(dir, format!("{} is {dims:?}, earlier frames {:?}", path.display(), size.unwrap())));
        }
        let (w, h) = (dims.0 as usize, dims.1 as usize);
        let raw = img.as_raw();
        for c in 0..3 {
            data.extend((0..h * w).map(|p| raw[p * 3 + c] as f32 / 127.5 - 1.0));
        }
    }
    let (w, h) = size.unwrap();
    let frames = Tensor::new([paths.len(), 3, h as usize, w as usize], data)?;
    let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    VideoClip::new(id, frames)
}

pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn store_clip(clip: &VideoClip, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let (h, w) = (clip.height(), clip.width());
    for t in 0..clip.frame_count() {
        let f = clip.frame(t);
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let p = y as usize * w + x as usize;
            Rgb([to_u8(f[p]), to_u8(f[h * w + p]), to_u8(f[2 * h * w + p])])
        });
        let path = dir.join(frame_file_name(t));
        img.save(&path).map_err(|source| Error::Image { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values_and_bad_shapes() {
        assert!(VideoClip::new("x", Tensor::full([1, 3, 2, 2], 1.5)).is_err());
        assert!(VideoClip::new("x", Tensor::zeros([1, 1, 2, 2])).is_err());
        assert!(VideoClip::new("x", Tensor::zeros([0, 3, 2, 2])).is_err());
    }

    #[test]
    fn frame_names_parse() {
        assert_eq!(parse_frame_index("frame_007.png"), Some(7));
        assert_eq!(parse_frame_index("frame_1234.png"), Some(1234));
        assert_eq!(parse_frame_index("frame_.png"), None);
        assert_eq!(parse_frame_index("frame_01.jpg"), None);
        assert_eq!(frame_file_name(3), "frame_003.png");
    }

    #[test]
    fn snapping_rounds_to_quantum() {
        assert_eq!(snap_extent(10.0), 32);
        assert_eq!(snap_extent(48.0), 64);
        assert_eq!(snap_extent(47.0), 32);
        assert_eq!(snap_extent(256.0), 256);
        assert_eq!(snap_extent(200.0), 192);
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = VideoClip::from_fn("c", [2, 8, 8], |_, ch, _, _| ch as f32 * 0.25).unwrap();
        let r = c.resized(4, 12).unwrap();
        assert_eq!(r.frames().shape(), [2, 3, 4, 12]);
        for ch in 0..3 {
            assert!(r.frame(1)[ch * 48..(ch + 1) * 48].iter().all(|&v| (v - ch as f32 * 0.25).abs() < 1e-6));
        }
        assert_eq!(c.resized(8, 8).unwrap(), c);
    }

    #[test]
    fn downscale_by_two_averages_pairs() {
        let c = VideoClip::from_fn("c", [1, 2, 4], |_, _, y, x| (y * 4 + x) as f32 / 10.0).unwrap();
        let r = c.resized(1, 2).unwrap();
        // half-pixel centres land between source pixels
        assert!((r.frame(0)[0] - (0.0 + 0.1 + 0.4 + 0.5) / 4.0).abs() < 1e-6);
        assert!((r.frame(0)[1] - (0.2 + 0.3 + 0.6 + 0.7) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn windows_slice_frames() {
        let c = VideoClip::from_fn("c", [5, 2, 2], |t, _, _, _| t as f32 / 10.0).unwrap();
        let w = c.window(2, 3).unwrap();
        assert_eq!(w.frame_count(), 3);
        assert_eq!(w.frame(0)[0], 0.2);
        assert!(c.window(3, 3).is_err());
    }
}
