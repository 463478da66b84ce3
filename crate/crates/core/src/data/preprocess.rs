//! Video trimming and fixed-length segmentation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seconds removed from the start of every interview video.
pub const TRIM_HEAD_SECONDS: f64 = 180.0;
/// Seconds removed from the end of every interview video.
pub const TRIM_TAIL_SECONDS: f64 = 150.0;

/// Frame range left after trimming the head and tail of a video.
pub fn trim_video(n_frames: usize, fps: f64) -> Result<Range<usize>> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
    }
    let start = (TRIM_HEAD_SECONDS * fps).ceil() as usize;
    let tail = (TRIM_TAIL_SECONDS * fps).ceil() as usize;
    let end = n_frames.saturating_sub(tail);
    Ok(if start < end { start..end } else { start..start })
}

pub fn segment_count(n_frames: usize, clip_len: usize) -> usize {
    n_frames / clip_len
}

/// Splits `[N, ...]` frames into consecutive non-overlapping `[L, ...]`
/// segments from the start; trailing frames that do not fill a segment are
/// discarded.
pub fn segment_video<S: Scalar>(frames: &Tensor<S>, clip_len: usize) -> Result<Vec<Tensor<S>>> {
    if clip_len == 0 {
        return Err(Error::InvalidArgument("segment length must be >= 1".into()));
    }
    let shape = frames.shape();
    let per_frame: usize = shape[1..].iter().product();
    let mut seg_shape = shape.to_vec();
    seg_shape[0] = clip_len;
    frames
        .data()
        .chunks_exact(clip_len * per_frame)
        .map(|chunk| Tensor::from_vec(&seg_shape, chunk.to_vec()))
        .collect()
}
