//! Clip-level augmentation. One transform is sampled per clip and applied
//! identically to every frame so temporal structure is preserved.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 15.0;
pub const CROP_RATIO: f64 = 0.875;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub center_crop: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
            center_crop: rng.random_bool(0.5),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.angle_deg == 0.0 && !self.center_crop
    }
}

/// Samples one transform and applies it to every frame of `[L, H, W, C]`.
pub fn augment_clip<R: Rng + ?Sized>(clip: &Tensor<f32>, rng: &mut R) -> (Tensor<f32>, AugmentParams) {
    let params = AugmentParams::sample(rng);
    (apply_augment(clip, &params), params)
}

/// Applies a fixed transform to every frame of a `[L, H, W, C]` clip.
pub fn apply_augment(clip: &Tensor<f32>, params: &AugmentParams) -> Tensor<f32> {
    let shape = clip.shape();
    assert_eq!(shape.len(), 4, "clip must be [L, H, W, C]");
    let (l, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let frame_len = h * w * c;
    let mut out = clip.clone();
    if params.is_identity() {
        return out;
    }
    let resample = params.angle_deg != 0.0 || params.center_crop;
    let data = out.data_mut();
    for f in 0..l {
        let frame = &mut data[f * frame_len..(f + 1) * frame_len];
        if resample {
            let src = frame.to_vec();
            rotate_crop(&src, frame, h, w, c, params.angle_deg, params.center_crop);
        }
        if params.hflip {
            flip_horizontal(frame, h, w, c);
        }
        if params.vflip {
            flip_vertical(frame, h, w, c);
        }
    }
    out
}

fn flip_horizontal(frame: &mut [f32], h: usize, w: usize, c: usize) {
    for y in 0..h {
        let row = &mut frame[y * w * c..(y + 1) * w * c];
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

fn flip_vertical(frame: &mut [f32], h: usize, w: usize, c: usize) {
    let stride = w * c;
    for y in 0..h / 2 {
        let (top, bottom) = frame.split_at_mut((h - 1 - y) * stride);
        top[y * stride..(y + 1) * stride].swap_with_slice(&mut bottom[..stride]);
    }
}

/// Rotation about the frame centre, optionally preceded by a centre crop
/// resized back to full size. Bilinear sampling, edge-clamped.
fn rotate_crop(
    src: &[f32],
    dst: &mut [f32],
    h: usize,
    w: usize,
    c: usize,
    angle_deg: f64,
    crop: bool,
) {
    let scale = if crop { CROP_RATIO } else { 1.0 };
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // Inverse rotation maps the output pixel back into the source.
            let ry = cos * dy - sin * dx;
            let rx = sin * dy + cos * dx;
            let sy = (cy + ry * scale).clamp(0.0, h as f64 - 1.0);
            let sx = (cx + rx * scale).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[(y * w + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}
