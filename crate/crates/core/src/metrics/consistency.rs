use super::flow::{estimate_video_flows, FlowField, FlowParams};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::patchio::VideoTensor;

/// Calibration constant of the motion-aware warp error.
pub const MAWE_C: f64 = 9.5;
/// Flow strength below which MAWE is undefined.
pub const OFS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpError {
    /// Mean over included pairs of the per-pair mean.
    pub value: f64,
    /// Per pair; `None` when every pixel of the pair is masked.
    pub per_pair: Vec<Option<f64>>,
}

fn check_flows(v: &VideoTensor, flows: &[FlowField]) -> Result<()> {
    if flows.len() + 1 != v.frames {
        return Err(Error::Contract(format!(
            "{} flows for {} frames",
            flows.len(),
            v.frames
        )));
    }
    if let Some(f) = flows.iter().find(|f| (f.height, f.width) != (v.height, v.width)) {
        return Err(Error::shape("warp_error", &[f.height, f.width], &[v.height, v.width]));
    }
    Ok(())
}

/// Squared L2 distance between each valid pixel and its warp target in the
/// next frame, averaged over valid pixels and then over pairs.
pub fn warp_error(v: &VideoTensor, flows: &[FlowField]) -> Result<WarpError> {
    check_flows(v, flows)?;
    let per_pair: Vec<Option<f64>> = flows
        .iter()
        .enumerate()
        .map(|(f, flow)| {
            let (mut sum, mut n) = (0.0, 0usize);
            for k in 0..flow.len() {
                if !flow.valid[k] {
                    continue;
                }
                let Some(q) = flow.target(k) else { continue };
                let (y, x) = (k / v.width, k % v.width);
                let (ty, tx) = (q / v.width, q % v.width);
                for c in 0..v.channels {
                    let d = v.at(ty, tx, f + 1, c) - v.at(y, x, f, c);
                    sum += d * d;
                }
                n += 1;
            }
            (n > 0).then(|| sum / n as f64)
        })
        .collect();
    let included: Vec<f64> = per_pair.iter().flatten().copied().collect();
    if included.is_empty() {
        return Err(Error::UndefinedMetric("every frame pair is fully occluded".into()));
    }
    Ok(WarpError {
        value: included.iter().sum::<f64>() / included.len() as f64,
        per_pair,
    })
}

/// Mean flow magnitude over all pixels and pairs.
pub fn flow_strength(flows: &[FlowField]) -> f64 {
    let (sum, n) = flows.iter().fold((0.0, 0usize), |(s, n), f| {
        (s + (0..f.len()).map(|k| f.magnitude(k)).sum::<f64>(), n + f.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Motion score; the same quantity as [`flow_strength`].
pub fn dynamic_degree(flows: &[FlowField]) -> f64 {
    flow_strength(flows)
}

/// Motion-aware warp error, or the static-video sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mawe {
    Value(f64),
    /// Flow strength below [`OFS_FLOOR`]: the ratio is undefined.
    Undefined,
}

impl Mawe {
    pub fn value(self) -> Option<f64> {
        match self {
            Mawe::Value(v) => Some(v),
            Mawe::Undefined => None,
        }
    }
}

impl std::fmt::Display for Mawe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mawe::Value(v) => write!(f, "{v:?}"),
            Mawe::Undefined => f.write_str("undefined"),
        }
    }
}

/// `W/(c·OFS)`.
pub fn mawe_from(w: f64, ofs: f64, c: f64) -> Result<Mawe> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("calibration constant must be positive, got {c}")));
    }
    if ofs < OFS_FLOOR {
        return Ok(Mawe::Undefined);
    }
    Ok(Mawe::Value(w / (c * ofs)))
}

pub fn mawe(v: &VideoTensor, flows: &[FlowField], c: f64) -> Result<Mawe> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("calibration constant must be positive, got {c}")));
    }
    let ofs = flow_strength(flows);
    if ofs < OFS_FLOOR {
        return Ok(Mawe::Undefined);
    }
    mawe_from(warp_error(v, flows)?.value, ofs, c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneCuts {
    /// Frame indices `f+1` flagged as the first frame after a cut.
    pub frames: Vec<usize>,
    pub count: usize,
    /// Cuts per frame pair.
    pub rate: f64,
    /// Mean absolute difference for each consecutive pair.
    pub diffs: Vec<f64>,
}

pub const SCENE_WINDOW: usize = 7;
const SCENE_FLOOR: f64 = 1e-9;

/// Mean absolute frame difference per consecutive pair.
pub fn frame_differences(v: &VideoTensor) -> Vec<f64> {
    let per = (v.height * v.width * v.channels) as f64;
    (0..v.frames.saturating_sub(1))
        .map(|f| {
            let mut s = 0.0;
            for y in 0..v.height {
                for x in 0..v.width {
                    for c in 0..v.channels {
                        s += (v.at(y, x, f + 1, c) - v.at(y, x, f, c)).abs();
                    }
                }
            }
            s / per
        })
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Flags pair `f` when its difference exceeds `threshold` times the median
/// over a centred window of 7 differences. Shorter clips compare against the
/// global mean difference instead.
pub fn detect_scene_cuts(v: &VideoTensor, threshold: f64) -> Result<SceneCuts> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("scene-cut threshold must be positive, got {threshold}")));
    }
    let diffs = frame_differences(v);
    let n = diffs.len();
    let half = SCENE_WINDOW / 2;
    let frames: Vec<usize> = (0..n)
        .filter(|&f| {
            let reference = if n < SCENE_WINDOW {
                diffs.iter().sum::<f64>() / n as f64
            } else {
                let lo = f.saturating_sub(half).min(n - SCENE_WINDOW);
                median(&mut diffs[lo..lo + SCENE_WINDOW].to_vec())
            };
            diffs[f] > SCENE_FLOOR && diffs[f] > threshold * reference
        })
        .map(|f| f + 1)
        .collect();
    let count = frames.len();
    Ok(SceneCuts {
        frames,
        count,
        rate: if n == 0 { 0.0 } else { count as f64 / n as f64 },
        diffs,
    })
}

/// Metrics over the window of `delta` frames ending at one chunk boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMetrics {
    /// First frame of the later chunk.
    pub frame: usize,
    /// Window `[start, end)` in frames.
    pub start: usize,
    pub end: usize,
    pub warp: Option<f64>,
    pub mawe: Mawe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionReport {
    pub boundaries: Vec<BoundaryMetrics>,
    pub mean_warp: Option<f64>,
    pub mean_mawe: Option<f64>,
}

/// Window for a boundary at frame `b`: `[max(0, b+1−Δ), b+1)`.
pub fn transition_window(b: usize, delta: usize) -> (usize, usize) {
    ((b + 1).saturating_sub(delta), b + 1)
}

pub fn transition_analysis(
    v: &VideoTensor,
    boundaries: &[usize],
    delta: usize,
    params: FlowParams,
    c: f64,
    exec: Execution,
) -> Result<TransitionReport> {
    if delta < 2 {
        return Err(Error::Config("transition window needs at least 2 frames".into()));
    }
    let mut out = Vec::with_capacity(boundaries.len());
    for &b in boundaries {
        if b == 0 || b >= v.frames {
            return Err(Error::Contract(format!("boundary frame {b} outside 1..{}", v.frames)));
        }
        let (start, end) = transition_window(b, delta);
        let clip = v.slice_frames(start, end)?;
        let flows = estimate_video_flows(&clip, params, exec)?;
        let warp = warp_error(&clip, &flows).ok().map(|w| w.value);
        let m = match warp {
            Some(w) => mawe_from(w, flow_strength(&flows), c)?,
            None => Mawe::Undefined,
        };
        out.push(BoundaryMetrics {
            frame: b,
            start,
            end,
            warp,
            mawe: m,
        });
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Ok(TransitionReport {
        mean_warp: mean(out.iter().filter_map(|b| b.warp).collect()),
        mean_mawe: mean(out.iter().filter_map(|b| b.mawe.value()).collect()),
        boundaries: out,
    })
}
