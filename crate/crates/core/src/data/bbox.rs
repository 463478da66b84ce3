//! Face-window geometry used to pick the interviewee window in a frame.

use log::warn;

use crate::error::{Error, Result};

/// Frames whose two face windows overlap at or above this IoU are dropped.
pub const IOU_DROP_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoundingBox { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let w = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let h = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameDecision {
    /// Keep the window at this index.
    Keep(usize),
    Drop,
}

/// Decides whether a frame with two detected face windows is usable.
///
/// Frames with barely overlapping windows keep the larger one; anything
/// else (overlap, wrong box count, degenerate boxes) is dropped.
pub fn filter_frame(boxes: &[BoundingBox]) -> FrameDecision {
    let [a, b] = boxes else {
        warn!("expected two face windows, got {}; dropping frame", boxes.len());
        return FrameDecision::Drop;
    };
    match iou(a, b) {
        Ok(r) if r < IOU_DROP_THRESHOLD => {
            if b.area() > a.area() {
                FrameDecision::Keep(1)
            } else {
                FrameDecision::Keep(0)
            }
        }
        Ok(_) => FrameDecision::Drop,
        Err(e) => {
            warn!("{e}; dropping frame");
            FrameDecision::Drop
        }
    }
}
