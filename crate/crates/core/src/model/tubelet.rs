//! Tubelet embedding: non-overlapping `t x h x w` cubes projected to tokens.
//!
//! Token layout is time-major: the cube at temporal index `tau`, row `r`,
//! column `c` becomes token `tau * n_h * n_w + r * n_w + c`. Within a cube
//! the values are flattened in `(frame, row, column, channel)` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TubeletConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Embedding dimension.
    pub d: usize,
}

impl Default for TubeletConfig {
    fn default() -> Self {
        TubeletConfig {
            t: 4,
            h: 16,
            w: 16,
            d: 64,
        }
    }
}

impl TubeletConfig {
    pub fn cube_len(&self, channels: usize) -> usize {
        self.t * self.h * self.w * channels
    }
}

/// Tokens per axis, `(floor(T/t), floor(H/h), floor(W/w))`.
pub fn token_counts(cfg: &TubeletConfig, t: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
    if [t, h, w, cfg.t, cfg.h, cfg.w].contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "extents must be positive: clip {t}x{h}x{w}, cube {}x{}x{}",
            cfg.t, cfg.h, cfg.w
        )));
    }
    let counts = (t / cfg.t, h / cfg.h, w / cfg.w);
    if counts.0 == 0 || counts.1 == 0 || counts.2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "cube {}x{}x{} does not fit clip {t}x{h}x{w}",
            cfg.t, cfg.h, cfg.w
        )));
    }
    Ok(counts)
}

/// Cuts `[T, H, W, C]` into `[n_t * n_h * n_w, t * h * w * C]`. Trailing
/// frames/rows/columns that do not fill a cube are discarded.
pub fn tubelet_partition<S: Scalar>(clip: &Tensor<S>, cfg: &TubeletConfig) -> Result<Tensor<S>> {
    let shape = clip.shape();
    if shape.len() != 4 {
        return Err(Error::shape("tubelet_partition", format!("clip shape {shape:?}")));
    }
    let (tt, hh, ww, c) = (shape[0], shape[1], shape[2], shape[3]);
    let (nt, nh, nw) = token_counts(cfg, tt, hh, ww)?;
    let (t, h, w) = (cfg.t, cfg.h, cfg.w);
    let cube = t * h * w * c;
    let src = clip.data();
    let mut out = Vec::with_capacity(nt * nh * nw * cube);
    for ti in 0..nt {
        for r in 0..nh {
            for col in 0..nw {
                for dt in 0..t {
                    let f = ti * t + dt;
                    for dy in 0..h {
                        let y = r * h + dy;
                        let start = ((f * hh + y) * ww + col * w) * c;
                        out.extend_from_slice(&src[start..start + w * c]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[nt * nh * nw, cube], out)
}

/// Inverse of [`tubelet_partition`] onto the covered region
/// `[n_t * t, n_h * h, n_w * w, C]`.
pub fn tubelet_reconstruct<S: Scalar>(
    cubes: &Tensor<S>,
    cfg: &TubeletConfig,
    counts: (usize, usize, usize),
    channels: usize,
) -> Result<Tensor<S>> {
    let (nt, nh, nw) = counts;
    let (t, h, w, c) = (cfg.t, cfg.h, cfg.w, channels);
    if cubes.shape() != [nt * nh * nw, t * h * w * c] {
        return Err(Error::shape(
            "tubelet_reconstruct",
            format!("cubes {:?} for counts {counts:?}", cubes.shape()),
        ));
    }
    let (tt, hh, ww) = (nt * t, nh * h, nw * w);
    let mut out = vec![S::zero(); tt * hh * ww * c];
    let mut src = cubes.data().chunks_exact(w * c);
    for ti in 0..nt {
        for r in 0..nh {
            for col in 0..nw {
                for dt in 0..t {
                    for dy in 0..h {
                        let start = (((ti * t + dt) * hh + r * h + dy) * ww + col * w) * c;
                        out[start..start + w * c].copy_from_slice(src.next().unwrap());
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[tt, hh, ww, c], out)
}

/// Embedded token sequence: class token followed by the cube tokens, with
/// the positional embedding already added.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// `[n_t * n_h * n_w + 1, d]`
    pub tokens: Var,
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.n_t * self.n_h * self.n_w + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spatial_len(&self) -> usize {
        self.n_h * self.n_w
    }
}

/// `z = [z_cls, E x_1, ..., E x_N] + p`.
///
/// `cubes: [N, D]`, `projection: [D, d]`, `class_token: [1, d]`,
/// `position: [N + 1, d]`.
pub fn embed<S: Scalar>(
    g: &mut Graph<S>,
    cubes: Var,
    projection: Var,
    class_token: Var,
    position: Var,
    counts: (usize, usize, usize),
) -> Result<TokenSequence> {
    let n = counts.0 * counts.1 * counts.2;
    if g.shape(cubes)[0] != n {
        return Err(Error::shape(
            "embed",
            format!("{:?} cubes for counts {counts:?}", g.shape(cubes)),
        ));
    }
    let projected = g.matmul(cubes, projection)?;
    let seq = g.concat(&[class_token, projected], 0)?;
    if g.shape(position) != g.shape(seq) {
        return Err(Error::shape(
            "embed",
            format!("position {:?} for tokens {:?}", g.shape(position), g.shape(seq)),
        ));
    }
    let tokens = g.add(seq, position)?;
    Ok(TokenSequence {
        tokens,
        n_t: counts.0,
        n_h: counts.1,
        n_w: counts.2,
    })
}
