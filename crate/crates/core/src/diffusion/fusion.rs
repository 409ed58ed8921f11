use super::layout::ChunkLayout;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    None,
    #[default]
    Early,
    Mid,
    Late,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Early => "early",
            FusionMode::Mid => "mid",
            FusionMode::Late => "late",
        }
    }

    pub fn parse(s: &str) -> Option<FusionMode> {
        [FusionMode::None, FusionMode::Early, FusionMode::Mid, FusionMode::Late]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub t_alpha: usize,
    pub t_beta: usize,
    /// Overlap width in tokens; must equal the layout's `N_local`.
    pub local_tokens: usize,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == FusionMode::Mid && self.t_beta >= self.t_alpha {
            return Err(Error::Config(format!(
                "mid fusion needs t_beta < t_alpha, got {} ≥ {}",
                self.t_beta, self.t_alpha
            )));
        }
        Ok(())
    }
}

pub fn fusion_active(t: usize, cfg: &FusionConfig) -> bool {
    match cfg.mode {
        FusionMode::None => false,
        FusionMode::Early => t > cfg.t_alpha,
        FusionMode::Mid => cfg.t_beta < t && t < cfg.t_alpha,
        FusionMode::Late => t < cfg.t_alpha,
    }
}

/// `((F − W)·a + W·b)/F`, kept inside `[min(a,b), max(a,b)]`.
pub fn fuse_value(a: f64, b: f64, w: usize, f: usize) -> f64 {
    if w == f {
        return b;
    }
    if a == b {
        return a;
    }
    let v = ((f - w) as f64 * a + w as f64 * b) / f as f64;
    v.clamp(a.min(b), a.max(b))
}

fn check_predictions(preds: &[Tensor], layout: &ChunkLayout) -> Result<usize> {
    if preds.len() != layout.len() {
        return Err(Error::Layout(format!(
            "{} predictions for {} chunks",
            preds.len(),
            layout.len()
        )));
    }
    let width = preds.first().map_or(0, Tensor::cols);
    for (i, p) in preds.iter().enumerate() {
        let rows = layout.local(i).len() + layout.chunks[i].len();
        if p.rank() != 2 || p.rows() != rows || p.cols() != width {
            return Err(Error::Layout(format!(
                "chunk {i} prediction has shape {:?}, expected [{rows}, {width}]",
                p.shape()
            )));
        }
    }
    Ok(width)
}

/// Keeps each chunk's own rows, discarding the local-context rows.
pub fn drop_local(preds: &[Tensor], layout: &ChunkLayout) -> Result<Tensor> {
    let width = check_predictions(preds, layout)?;
    let mut out = Vec::with_capacity(layout.n * width);
    for (i, p) in preds.iter().enumerate() {
        let skip = layout.local(i).len();
        out.extend_from_slice(&p.data()[skip * width..]);
    }
    Tensor::matrix(layout.n, width, out)
}

/// Blends each overlap frame between chunk `i`'s own tail prediction and
/// chunk `i+1`'s local-context prediction, with frame weight `W(k) = k`.
pub fn fuse_tokens(preds: &[Tensor], layout: &ChunkLayout, cfg: &FusionConfig) -> Result<Tensor> {
    if cfg.local_tokens != layout.n_local {
        return Err(Error::Layout(format!(
            "fusion overlap of {} tokens but layout local context of {}",
            cfg.local_tokens, layout.n_local
        )));
    }
    let mut out = drop_local(preds, layout)?;
    let width = out.cols();
    let tpf = layout.tokens_per_frame;
    let f_local = layout.local_frames();
    for (i, next) in preds.iter().enumerate().skip(1) {
        let local = layout.local(i);
        for (j, row) in local.clone().enumerate() {
            let w = j / tpf + 1;
            let succ = next.row(j);
            let dst = &mut out.data_mut()[row * width..(row + 1) * width];
            for (a, &b) in dst.iter_mut().zip(succ) {
                *a = fuse_value(*a, b, w, f_local);
            }
        }
    }
    Ok(out)
}
