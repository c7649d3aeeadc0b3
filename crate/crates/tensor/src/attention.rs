//! Windowed multi-head self-attention over NCHW feature maps.
//!
//! The map is reflect-padded up to a multiple of the window, optionally
//! rolled by half a window, split into non-overlapping windows, attended
//! per head, then merged, rolled back and cropped. Padding, rolling and
//! partitioning collapse into a single index gather so the whole op is
//! differentiable through existing primitives.

use std::rc::Rc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::AttentionMask;
use crate::tape::{Tape, Var};

/// Geometry of one window-attention call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    /// Window side actually used: `min(window, height, width)`.
    pub window: usize,
    /// Cyclic shift, zero for unshifted blocks and for maps that fit in a
    /// single window.
    pub shift: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

impl WindowPlan {
    pub fn new(shape: &[usize], window: usize, heads: usize, shifted: bool) -> Result<Self> {
        let &[batch, channels, height, width] = shape else {
            return Err(TensorError::Rank { op: "window_attention", expected: 4, shape: shape.to_vec() });
        };
        if window == 0 || heads == 0 {
            return Err(TensorError::Config("window and heads must be positive".into()));
        }
        if channels % heads != 0 {
            return Err(TensorError::Config(format!(
                "{channels} channels cannot be split across {heads} heads"
            )));
        }
        let ws = window.min(height).min(width);
        let shift = if shifted && height.min(width) > window { ws / 2 } else { 0 };
        Ok(Self {
            batch,
            channels,
            height,
            width,
            heads,
            window: ws,
            shift,
            padded_height: height.div_ceil(ws) * ws,
            padded_width: width.div_ceil(ws) * ws,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn windows_y(&self) -> usize {
        self.padded_height / self.window
    }

    pub fn windows_x(&self) -> usize {
        self.padded_width / self.window
    }

    pub fn windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    /// Leading extent of the per-head score tensors.
    pub fn matrices(&self) -> usize {
        self.batch * self.windows() * self.heads
    }

    fn reflect(p: usize, size: usize) -> usize {
        if p < size {
            p
        } else {
            2 * (size - 1) - p
        }
    }

    /// Original pixel feeding position `(py, px)` of the rolled, padded grid.
    pub fn source_pixel(&self, py: usize, px: usize) -> (usize, usize) {
        let qy = (py + self.shift) % self.padded_height;
        let qx = (px + self.shift) % self.padded_width;
        (Self::reflect(qy, self.height), Self::reflect(qx, self.width))
    }

    /// Gather indices from a `[B, 3C, H, W]` projection into per-head token
    /// matrices `[B * windows * heads, T, head_dim]`; `part` selects q, k
    /// or v.
    pub fn partition_index(&self, part: usize) -> Vec<u32> {
        let (c, d, ws) = (self.channels, self.head_dim(), self.window);
        let (h, w) = (self.height, self.width);
        let mut index = Vec::with_capacity(self.matrices() * self.tokens() * d);
        for b in 0..self.batch {
            for wy in 0..self.windows_y() {
                for wx in 0..self.windows_x() {
                    for head in 0..self.heads {
                        for ty in 0..ws {
                            for tx in 0..ws {
                                let (y, x) = self.source_pixel(wy * ws + ty, wx * ws + tx);
                                for j in 0..d {
                                    let channel = part * c + head * d + j;
                                    index.push((((b * 3 * c + channel) * h + y) * w + x) as u32);
                                }
                            }
                        }
                    }
                }
            }
        }
        index
    }

    /// Gather indices from per-head outputs back onto the `[B, C, H, W]` grid.
    pub fn merge_index(&self) -> Vec<u32> {
        let (d, ws, t) = (self.head_dim(), self.window, self.tokens());
        let mut index = Vec::with_capacity(self.batch * self.channels * self.height * self.width);
        for b in 0..self.batch {
            for head in 0..self.heads {
                for j in 0..d {
                    for y in 0..self.height {
                        let py = (y + self.padded_height - self.shift) % self.padded_height;
                        for x in 0..self.width {
                            let px = (x + self.padded_width - self.shift) % self.padded_width;
                            let win = (py / ws) * self.windows_x() + px / ws;
                            let row = (b * self.windows() + win) * self.heads + head;
                            let token = (py % ws) * ws + px % ws;
                            index.push(((row * t + token) * d + j) as u32);
                        }
                    }
                }
            }
        }
        index
    }

    fn region(p: usize, size: usize, window: usize, shift: usize) -> usize {
        if p < size - window {
            0
        } else if p < size - shift {
            1
        } else {
            2
        }
    }

    /// Mask that keeps tokens rolled in from the opposite border from
    /// attending across the seam. `None` when unshifted.
    pub fn mask(&self) -> Option<AttentionMask> {
        if self.shift == 0 {
            return None;
        }
        let ws = self.window;
        let t = self.tokens();
        let mut allowed = Vec::with_capacity(self.windows() * t * t);
        for wy in 0..self.windows_y() {
            for wx in 0..self.windows_x() {
                let labels: Vec<usize> = (0..t)
                    .map(|i| {
                        let (py, px) = (wy * ws + i / ws, wx * ws + i % ws);
                        Self::region(py, self.padded_height, ws, self.shift) * 3
                            + Self::region(px, self.padded_width, ws, self.shift)
                    })
                    .collect();
                for &li in &labels {
                    allowed.extend(labels.iter().map(|&lj| lj == li));
                }
            }
        }
        Some(AttentionMask::new(self.windows(), self.heads, t, allowed).expect("diagonal is always allowed"))
    }
}

/// Projection weights of one attention layer, as 1x1 convolutions.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a, T: Element> {
    /// `[3C, C, 1, 1]`, output channels ordered q, k, v.
    pub qkv_weight: &'a Var<T>,
    pub qkv_bias: Option<&'a Var<T>>,
    /// `[C, C, 1, 1]`
    pub proj_weight: &'a Var<T>,
    pub proj_bias: Option<&'a Var<T>>,
}

/// Output of [`Tape::window_attention_traced`].
pub struct AttentionTrace<T: Element> {
    pub output: Var<T>,
    /// `[B * windows * heads, T, T]` row-stochastic attention weights.
    pub weights: Var<T>,
    pub plan: WindowPlan,
}

impl<T: Element> Tape<T> {
    pub fn window_attention(
        &self,
        x: &Var<T>,
        window: usize,
        heads: usize,
        weights: AttentionWeights<'_, T>,
        shifted: bool,
    ) -> Result<Var<T>> {
        Ok(self.window_attention_traced(x, window, heads, weights, shifted)?.output)
    }

    /// Same as [`Tape::window_attention`] but also hands back the attention
    /// matrices.
    pub fn window_attention_traced(
        &self,
        x: &Var<T>,
        window: usize,
        heads: usize,
        weights: AttentionWeights<'_, T>,
        shifted: bool,
    ) -> Result<AttentionTrace<T>> {
        let plan = WindowPlan::new(x.shape(), window, heads, shifted)?;
        let c = plan.channels;
        if weights.qkv_weight.shape() != [3 * c, c, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "window_attention qkv",
                lhs: weights.qkv_weight.shape().to_vec(),
                rhs: vec![3 * c, c, 1, 1],
            });
        }
        if weights.proj_weight.shape() != [c, c, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "window_attention proj",
                lhs: weights.proj_weight.shape().to_vec(),
                rhs: vec![c, c, 1, 1],
            });
        }

        let qkv = self.conv2d(x, weights.qkv_weight, weights.qkv_bias, 1, 0)?;
        let token_shape = [plan.matrices(), plan.tokens(), plan.head_dim()];
        let split = |part| self.gather(&qkv, Rc::from(plan.partition_index(part)), token_shape);
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);

        let scores = self.bmm(&q, &k, false, true)?;
        let scale = T::one() / T::from_usize(plan.head_dim()).unwrap().sqrt();
        let scores = self.scale(&scores, scale);
        let attn = self.softmax(&scores, plan.mask().map(Rc::new))?;
        let mixed = self.bmm(&attn, &v, false, false)?;

        let merged = self.gather(
            &mixed,
            Rc::from(plan.merge_index()),
            [plan.batch, c, plan.height, plan.width],
        )?;
        let output = self.conv2d(&merged, weights.proj_weight, weights.proj_bias, 1, 0)?;
        Ok(AttentionTrace { output, weights: attn, plan })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_clamps_window_to_small_maps() {
        let p = WindowPlan::new(&[1, 8, 2, 2], 4, 2, true).unwrap();
        assert_eq!((p.window, p.shift, p.windows()), (2, 0, 1));
    }

    #[test]
    fn plan_pads_to_window_multiple() {
        let p = WindowPlan::new(&[1, 8, 6, 9], 4, 2, true).unwrap();
        assert_eq!((p.padded_height, p.padded_width, p.shift), (8, 12, 2));
        // rolled by two: padded row 7 is grid row 1
        assert_eq!(p.source_pixel(7, 0).0, 1);
        let flat = WindowPlan::new(&[1, 8, 6, 9], 4, 2, false).unwrap();
        // reflected rows mirror without repeating the border
        assert_eq!(flat.source_pixel(6, 0).0, 4);
        assert_eq!(flat.source_pixel(7, 0).0, 3);
        assert_eq!(flat.source_pixel(0, 11).1, 5);
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(matches!(WindowPlan::new(&[1, 6, 4, 4], 4, 4, false), Err(TensorError::Config(_))));
    }

    #[test]
    fn merge_inverts_partition_on_valid_pixels() {
        let p = WindowPlan::new(&[2, 4, 6, 5], 4, 2, true).unwrap();
        let part = p.partition_index(0);
        let merge = p.merge_index();
        // composing merge after partition must hit every pixel's own q channel
        for (i, &m) in merge.iter().enumerate() {
            let src = part[m as usize] as usize;
            let (b, rest) = (i / (4 * 30), i % (4 * 30));
            assert_eq!(src, b * 12 * 30 + rest);
        }
    }
}
