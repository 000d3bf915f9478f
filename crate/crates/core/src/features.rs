//! Observation-to-feature transforms: HOG over depth, the 16-element
//! kinematic vector and two-frame stacking.

use crate::world::RigidState;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::PI;
use thiserror::Error;

/// Number of kinematic features.
pub const KINEMATIC_DIM: usize = 16;
/// Frame offset combined with the current frame.
pub const STACK_DELTA: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("image {width}x{height} is not divisible into {cell}-pixel cells")]
    Dimensions { width: usize, height: usize, cell: usize },
    #[error("expected {expected} pixels, got {found}")]
    PixelCount { expected: usize, found: usize },
    #[error("HOG parameters need at least one block: {0:?}")]
    NoBlocks(HogParams),
    #[error("frame {0} is not in the buffer")]
    MissingFrame(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HogParams {
    /// Cell side in pixels.
    pub cell: usize,
    /// Block side in cells.
    pub block: usize,
    /// Block stride in cells.
    pub stride: usize,
    pub bins: usize,
}

impl Default for HogParams {
    fn default() -> Self {
        Self { cell: 8, block: 2, stride: 1, bins: 9 }
    }
}

pub const HOG_EPSILON: f64 = 1e-6;

impl HogParams {
    fn blocks_along(&self, cells: usize) -> usize {
        if cells < self.block {
            0
        } else {
            (cells - self.block) / self.stride + 1
        }
    }

    /// Descriptor length for an image of the given size.
    pub fn descriptor_len(&self, width: usize, height: usize) -> usize {
        let bx = self.blocks_along(width / self.cell);
        let by = self.blocks_along(height / self.cell);
        bx * by * self.block * self.block * self.bins
    }
}

/// Histogram of oriented gradients of a single-channel image.
///
/// Gradients are central differences with edge replication, orientations are
/// unsigned in `[0, pi)` and vote with linear interpolation between the two
/// nearest bin centres, weighted by magnitude. Each block of cells is
/// L2-normalised as `v / sqrt(|v|^2 + eps^2)` and blocks are concatenated in
/// row-major order.
pub fn hog(image: &[f64], width: usize, height: usize, params: &HogParams) -> Result<Vec<f64>, FeatureError> {
    if image.len() != width * height {
        return Err(FeatureError::PixelCount { expected: width * height, found: image.len() });
    }
    if params.cell == 0 || width % params.cell != 0 || height % params.cell != 0 {
        return Err(FeatureError::Dimensions { width, height, cell: params.cell });
    }
    let cells_x = width / params.cell;
    let cells_y = height / params.cell;
    if params.bins == 0 || params.stride == 0 || params.descriptor_len(width, height) == 0 {
        return Err(FeatureError::NoBlocks(*params));
    }
    let bins = params.bins;
    let bin_width = PI / bins as f64;
    let mut cells = vec![0.0f64; cells_x * cells_y * bins];
    let at = |x: usize, y: usize| image[y * width + x];
    for y in 0..height {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(height - 1));
        for x in 0..width {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(width - 1));
            let gx = at(xr, y) - at(xl, y);
            let gy = at(x, yd) - at(x, yu);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let theta = gy.atan2(gx).rem_euclid(PI);
            let pos = theta / bin_width - 0.5;
            let lower = pos.floor();
            let frac = pos - lower;
            let b0 = (lower as isize).rem_euclid(bins as isize) as usize;
            let b1 = (b0 + 1) % bins;
            let base = ((y / params.cell) * cells_x + x / params.cell) * bins;
            cells[base + b0] += mag * (1.0 - frac);
            cells[base + b1] += mag * frac;
        }
    }
    let bx = params.blocks_along(cells_x);
    let by = params.blocks_along(cells_y);
    let block_len = params.block * params.block * bins;
    let mut out = Vec::with_capacity(bx * by * block_len);
    let mut block = Vec::with_capacity(block_len);
    for j in 0..by {
        for i in 0..bx {
            block.clear();
            for cy in 0..params.block {
                for cx in 0..params.block {
                    let c = (j * params.stride + cy) * cells_x + i * params.stride + cx;
                    block.extend_from_slice(&cells[c * bins..(c + 1) * bins]);
                }
            }
            let norm = (block.iter().map(|v| v * v).sum::<f64>() + HOG_EPSILON * HOG_EPSILON).sqrt();
            out.extend(block.iter().map(|v| v / norm));
        }
    }
    Ok(out)
}

/// HOG over a single-precision depth map.
pub fn hog_f32(depth: &[f32], width: usize, height: usize, params: &HogParams) -> Result<Vec<f32>, FeatureError> {
    let d: Vec<f64> = depth.iter().map(|&v| v as f64).collect();
    Ok(hog(&d, width, height, params)?.into_iter().map(|v| v as f32).collect())
}

/// Fixed feature order:
/// `[roll, pitch, yaw, wx, wy, wz, ax_ang, ay_ang, az_ang, v_fwd, v_right, v_up,
///   a_fwd, a_right, a_up, altitude]`.
pub fn kinematic_features(state: &RigidState) -> [f64; KINEMATIC_DIM] {
    let w = state.angular_velocity;
    let aw = state.angular_acceleration;
    let v = state.linear_velocity;
    let a = state.linear_acceleration;
    [
        state.roll,
        state.pitch,
        state.yaw,
        w.x,
        w.y,
        w.z,
        aw.x,
        aw.y,
        aw.z,
        v.x,
        v.y,
        v.z,
        a.x,
        a.y,
        a.z,
        state.position.z,
    ]
}

/// RGB frame history for temporal stacking. Keeps the first frame for
/// warm-up plus the most recent `capacity` frames.
#[derive(Debug, Clone)]
pub struct FrameBuffer {
    capacity: usize,
    first: Option<Vec<u8>>,
    recent: VecDeque<(usize, Vec<u8>)>,
    next_index: usize,
}

impl FrameBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(STACK_DELTA + 1), first: None, recent: VecDeque::new(), next_index: 0 }
    }

    /// Appends the next frame and returns its step index.
    pub fn push(&mut self, rgb: Vec<u8>) -> usize {
        let idx = self.next_index;
        if self.first.is_none() {
            self.first = Some(rgb.clone());
        }
        if self.recent.len() == self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back((idx, rgb));
        self.next_index += 1;
        idx
    }

    pub fn latest_index(&self) -> Option<usize> {
        self.recent.back().map(|(i, _)| *i)
    }

    pub fn get(&self, index: usize) -> Option<&[u8]> {
        if index == 0 {
            return self.first.as_deref();
        }
        let front = self.recent.front()?.0;
        if index < front {
            return None;
        }
        self.recent.get(index - front).map(|(_, f)| f.as_slice())
    }

    pub fn clear(&mut self) {
        self.first = None;
        self.recent.clear();
        self.next_index = 0;
    }
}

/// Index of the frame stacked with frame `t`.
pub fn stacked_partner(t: usize, delta: usize) -> usize {
    if t < delta {
        0
    } else {
        t - delta
    }
}

/// Writes frames `current` and `past` (interleaved RGB bytes) as six planar
/// channels scaled to `[0, 1]`: channels 0-2 from `current`, 3-5 from `past`.
pub fn stack_pair_into(current: &[u8], past: &[u8], out: &mut [f32]) {
    let n = current.len() / 3;
    debug_assert_eq!(out.len(), 6 * n);
    for (slot, frame) in [current, past].into_iter().enumerate() {
        for c in 0..3 {
            let plane = &mut out[(slot * 3 + c) * n..(slot * 3 + c + 1) * n];
            for (p, dst) in plane.iter_mut().enumerate() {
                *dst = frame[3 * p + c] as f32 / 255.0;
            }
        }
    }
}

/// Six-channel planar stack of frame `t` and frame `t - delta`.
pub fn stack_frames(buffer: &FrameBuffer, t: usize, delta: usize) -> Result<Vec<f32>, FeatureError> {
    let current = buffer.get(t).ok_or(FeatureError::MissingFrame(t))?;
    let partner = stacked_partner(t, delta);
    let past = buffer.get(partner).ok_or(FeatureError::MissingFrame(partner))?;
    let mut out = vec![0.0; 2 * current.len()];
    stack_pair_into(current, past, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    #[test]
    fn constant_image_gives_zero_descriptor() {
        let img = vec![7.5; 64 * 48];
        let d = hog(&img, 64, 48, &HogParams::default()).unwrap();
        assert_eq!(d.len(), 1260);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_length() {
        assert_eq!(HogParams::default().descriptor_len(64, 48), (7 * 5) * (4 * 9));
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(matches!(hog(&vec![0.0; 60 * 48], 60, 48, &HogParams::default()), Err(FeatureError::Dimensions { .. })));
        assert!(matches!(hog(&vec![0.0; 10], 64, 48, &HogParams::default()), Err(FeatureError::PixelCount { .. })));
        assert!(matches!(hog(&vec![0.0; 64], 8, 8, &HogParams::default()), Err(FeatureError::NoBlocks(_))));
    }

    #[test]
    fn vertical_edge_votes_into_horizontal_gradient_bins() {
        let mut img = vec![0.0; 16 * 16];
        for y in 0..16 {
            for x in 8..16 {
                img[y * 16 + x] = 1.0;
            }
        }
        let d = hog(&img, 16, 16, &HogParams::default()).unwrap();
        // gradient angle 0 lies on the boundary between bins 8 and 0
        assert!(d[0] > 0.0 && d[8] > 0.0);
        assert!((d[0] - d[8]).abs() < 1e-12);
        assert!(d[1..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hover_state_features() {
        let s = RigidState::at(Vec3::new(12.0, 34.0, 10.0), 0.0);
        let k = kinematic_features(&s);
        assert_eq!(k.len(), 16);
        assert!(k[..15].iter().all(|&v| v == 0.0));
        assert_eq!(k[15], 10.0);
    }

    #[test]
    fn stacking_pairs_t_with_t_minus_delta() {
        let mut buf = FrameBuffer::new(9);
        for i in 0..=20u8 {
            buf.push(vec![i; 3 * 4]);
        }
        let s = stack_frames(&buf, 20, 8).unwrap();
        assert!(s[..12].iter().all(|&v| v == 20.0 / 255.0));
        assert!(s[12..].iter().all(|&v| v == 12.0 / 255.0));
        assert_eq!(buf.get(5), None);
        assert_eq!(stack_frames(&buf, 5, 8), Err(FeatureError::MissingFrame(5)));
    }

    #[test]
    fn warm_up_duplicates_first_frame() {
        let mut buf = FrameBuffer::new(9);
        buf.push(vec![3; 6]);
        let s = stack_frames(&buf, 0, 8).unwrap();
        assert_eq!(&s[..6], &s[6..]);
        buf.push(vec![4; 6]);
        buf.push(vec![5; 6]);
        let s = stack_frames(&buf, 2, 8).unwrap();
        assert!(s[..6].iter().all(|&v| v == 5.0 / 255.0));
        assert!(s[6..].iter().all(|&v| v == 3.0 / 255.0));
    }

    proptest! {
        #[test]
        fn position_is_not_a_feature(x in -100.0f64..100.0, y in -100.0f64..100.0, yaw in -3.0f64..3.0, z in 0.0f64..20.0) {
            let mut a = RigidState::at(Vec3::new(x, y, z), yaw);
            a.linear_velocity = Vec3::new(1.0, -0.5, 0.2);
            let mut b = a;
            b.position.x += 17.0;
            b.position.y -= 3.0;
            prop_assert_eq!(kinematic_features(&a), kinematic_features(&b));
        }

        #[test]
        fn hog_is_nonnegative(img in proptest::collection::vec(0.0f64..50.0, 16 * 16)) {
            let d = hog(&img, 16, 16, &HogParams::default()).unwrap();
            prop_assert!(d.iter().all(|&v| v >= 0.0));
        }
    }
}
