use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::patchio::{Frame, VideoTensor};

/// Per-pixel displacement from one frame to the next, with a validity mask.
///
/// Pixel `(y, x)` of the first frame is taken to move to `(y + dy, x + dx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        let n = height * width;
        FlowField {
            height,
            width,
            dx: vec![0.0; n],
            dy: vec![0.0; n],
            valid: vec![true; n],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let mut f = FlowField::zeros(height, width);
        f.dx.fill(dx);
        f.dy.fill(dy);
        f
    }

    pub fn len(&self) -> usize {
        self.dx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dx.is_empty()
    }

    pub fn magnitude(&self, k: usize) -> f64 {
        self.dx[k].hypot(self.dy[k])
    }

    /// Integer warp target of pixel `k`, if it lands inside the frame.
    pub fn target(&self, k: usize) -> Option<usize> {
        let (y, x) = ((k / self.width) as f64, (k % self.width) as f64);
        let ty = (y + self.dy[k]).round();
        let tx = (x + self.dx[k]).round();
        if ty < 0.0 || tx < 0.0 || ty >= self.height as f64 || tx >= self.width as f64 {
            return None;
        }
        Some(ty as usize * self.width + tx as usize)
    }
}

/// Block-matching parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowParams {
    pub block: usize,
    pub radius: i64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams { block: 4, radius: 4 }
    }
}

fn block_ssd(a: &Frame, b: &Frame, y0: usize, x0: usize, block: usize, dy: i64, dx: i64) -> f64 {
    let mut s = 0.0;
    for y in y0..y0 + block {
        for x in x0..x0 + block {
            let (ty, tx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
            for c in 0..a.channels {
                let d = a.at(y, x, c) - b.at(ty, tx, c);
                s += d * d;
            }
        }
    }
    s
}

/// Raw block flow without the consistency check: every displaced block
/// stays inside the frame.
fn block_flow(a: &Frame, b: &Frame, p: FlowParams) -> FlowField {
    let (h, w, bs, r) = (a.height, a.width, p.block, p.radius);
    let mut flow = FlowField::zeros(h, w);
    for by in (0..h).step_by(bs) {
        for bx in (0..w).step_by(bs) {
            let mut best = (block_ssd(a, b, by, bx, bs, 0, 0), 0i64, 0i64);
            for dy in -r..=r {
                for dx in -r..=r {
                    if (dy, dx) == (0, 0) {
                        continue;
                    }
                    let (y1, x1) = (by as i64 + dy, bx as i64 + dx);
                    if y1 < 0 || x1 < 0 || y1 + bs as i64 > h as i64 || x1 + bs as i64 > w as i64 {
                        continue;
                    }
                    let s = block_ssd(a, b, by, bx, bs, dy, dx);
                    if s < best.0 {
                        best = (s, dy, dx);
                    }
                }
            }
            for y in by..by + bs {
                for x in bx..bx + bs {
                    flow.dy[y * w + x] = best.1 as f64;
                    flow.dx[y * w + x] = best.2 as f64;
                }
            }
        }
    }
    flow
}

/// Exhaustive SSD block matching from `a` to `b`.
///
/// Ties go to zero displacement, then to the smallest `(dy, dx)` in
/// lexicographic order. A pixel is invalid when the backward flow from its
/// target does not return within 1 px.
pub fn estimate_flow(a: &Frame, b: &Frame, p: FlowParams) -> Result<FlowField> {
    if p.radius < 0 {
        return Err(Error::Config(format!("search radius must be ≥ 0, got {}", p.radius)));
    }
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::shape(
            "estimate_flow",
            &[a.height, a.width, a.channels],
            &[b.height, b.width, b.channels],
        ));
    }
    if p.block == 0 || a.height % p.block != 0 || a.width % p.block != 0 {
        return Err(Error::Config(format!(
            "block {} must divide the {}×{} frame",
            p.block, a.height, a.width
        )));
    }
    let mut fwd = block_flow(a, b, p);
    let bwd = block_flow(b, a, p);
    for k in 0..fwd.len() {
        fwd.valid[k] = match fwd.target(k) {
            None => false,
            Some(q) => {
                let ex = fwd.dx[k] + bwd.dx[q];
                let ey = fwd.dy[k] + bwd.dy[q];
                ex.hypot(ey) <= 1.0
            }
        };
    }
    Ok(fwd)
}

/// Flow for every consecutive frame pair, in pair order.
pub fn estimate_video_flows(v: &VideoTensor, p: FlowParams, exec: Execution) -> Result<Vec<FlowField>> {
    let frames = v.frames_vec();
    par::try_map_range(exec, frames.len().saturating_sub(1), |f| {
        estimate_flow(&frames[f], &frames[f + 1], p)
    })
}
