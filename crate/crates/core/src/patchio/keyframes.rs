use super::patch::{Grid, TokenSequence};
use crate::error::{Error, Result};

/// Frame stride for a keyframe interval: `round(fps·T_s)`, floored at 1.
pub fn keyframe_stride(fps: f64, interval_s: f64) -> Result<usize> {
    if !(interval_s > 0.0 && interval_s.is_finite()) {
        return Err(Error::Config(format!(
            "keyframe interval must be positive, got {interval_s}"
        )));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    Ok(((fps * interval_s).round() as usize).max(1))
}

/// Temporal slices (of `p3` frames each) that contain a keyframe.
pub fn keyframe_slices(slices: usize, p3: usize, stride: usize) -> Vec<usize> {
    (0..slices)
        .filter(|&g| {
            let (lo, hi) = (g * p3, (g + 1) * p3);
            // first multiple of stride at or after lo
            let k = lo.div_ceil(stride) * stride;
            k < hi
        })
        .collect()
}

/// Row indices of tokens whose temporal slice holds a keyframe.
pub fn keyframe_rows(index_map: &[[usize; 3]], slices: &[usize]) -> Vec<usize> {
    index_map
        .iter()
        .enumerate()
        .filter(|(_, c)| slices.binary_search(&c[2]).is_ok())
        .map(|(i, _)| i)
        .collect()
}

/// Keeps the tokens of frames `0, s, 2s, …` with `s = round(fps·T_s)`.
///
/// Kept slices are renumbered `0..k` in the returned grid; token values,
/// including their positional terms, are copied unchanged.
pub fn subsample_keyframes(ts: &TokenSequence, p3: usize, interval_s: f64) -> Result<TokenSequence> {
    let stride = keyframe_stride(ts.fps, interval_s)?;
    let slices = keyframe_slices(ts.grid.f, p3, stride);
    let rows = keyframe_rows(&ts.index_map, &slices);
    let d = ts.width();
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut index_map = Vec::with_capacity(rows.len());
    for &r in &rows {
        data.extend_from_slice(ts.tokens.row(r));
        let [h, w, f] = ts.index_map[r];
        let nf = slices.binary_search(&f).expect("kept slice");
        index_map.push([h, w, nf]);
    }
    Ok(TokenSequence {
        tokens: crate::numcore::Tensor::matrix(rows.len(), d, data)?,
        index_map,
        grid: Grid {
            h: ts.grid.h,
            w: ts.grid.w,
            f: slices.len(),
        },
        fps: ts.fps,
    })
}
