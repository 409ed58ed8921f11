use super::video::VideoTensor;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tape, Tensor, Var};

/// Voxel extents along (H, W, F) and the token width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub p1: usize,
    pub p2: usize,
    pub p3: usize,
    pub d: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            p1: 2,
            p2: 2,
            p3: 1,
            d: 64,
        }
    }
}

impl PatchSpec {
    /// Flattened voxel width `p1·p2·p3·C`.
    pub fn voxel_len(&self, channels: usize) -> usize {
        self.p1 * self.p2 * self.p3 * channels
    }

    /// Token grid `(H/p1, W/p2, F/p3)`, or a shape error when an extent does not divide.
    pub fn grid(&self, height: usize, width: usize, frames: usize) -> Result<Grid> {
        if self.p1 == 0 || self.p2 == 0 || self.p3 == 0 {
            return Err(Error::Config("patch extents must be positive".into()));
        }
        if height % self.p1 != 0 || width % self.p2 != 0 || frames % self.p3 != 0 {
            return Err(Error::shape(
                "patchify",
                &[height, width, frames],
                &[self.p1, self.p2, self.p3],
            ));
        }
        Ok(Grid {
            h: height / self.p1,
            w: width / self.p2,
            f: frames / self.p3,
        })
    }
}

/// Extents of the token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub f: usize,
}

impl Grid {
    pub fn tokens_per_slice(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.f
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Canonical temporal-major token order: `(f, h, w)` lexicographic.
    pub fn index_map(&self) -> Vec<[usize; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for f in 0..self.f {
            for h in 0..self.h {
                for w in 0..self.w {
                    out.push([h, w, f]);
                }
            }
        }
        out
    }
}

/// `N×d` tokens with their grid coordinates.
///
/// `index_map[i]` is the `(h, w, f)` grid coordinate of token `i`; tokens
/// are sorted by their temporal slice.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub index_map: Vec<[usize; 3]>,
    pub grid: Grid,
    pub fps: f64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn frame_group(&self, i: usize) -> usize {
        self.index_map[i][2]
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Plain (non-trainable) patch projection with factorized positional tables.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    /// `(p1·p2·p3·C)×d`
    pub proj: Tensor,
    pub pos_h: Tensor,
    pub pos_w: Tensor,
    pub pos_f: Tensor,
}

impl PatchEmbedding {
    /// Identity projection with zero positional terms.
    pub fn identity(voxel_len: usize, d: usize, grid: Grid) -> Self {
        PatchEmbedding {
            proj: Tensor::eye(voxel_len, d),
            pos_h: Tensor::zeros(&[grid.h, d]),
            pos_w: Tensor::zeros(&[grid.w, d]),
            pos_f: Tensor::zeros(&[grid.f, d]),
        }
    }
}

/// Flattens each voxel in `(h, w, f, c)` order into an `N×V` matrix.
pub fn voxelize(v: &VideoTensor, spec: &PatchSpec) -> Result<(Tensor, Grid)> {
    let grid = spec.grid(v.height, v.width, v.frames)?;
    let vl = spec.voxel_len(v.channels);
    let mut data = Vec::with_capacity(grid.len() * vl);
    for [gh, gw, gf] in grid.index_map() {
        for dh in 0..spec.p1 {
            for dw in 0..spec.p2 {
                for df in 0..spec.p3 {
                    for c in 0..v.channels {
                        data.push(v.at(gh * spec.p1 + dh, gw * spec.p2 + dw, gf * spec.p3 + df, c));
                    }
                }
            }
        }
    }
    Ok((Tensor::matrix(grid.len(), vl, data)?, grid))
}

/// Inverse of [`voxelize`] for tokens placed per `index_map`.
pub fn devoxelize(
    raw: &Tensor,
    index_map: &[[usize; 3]],
    grid: Grid,
    spec: &PatchSpec,
    fps: f64,
) -> Result<VideoTensor> {
    check_coverage(index_map, grid)?;
    let per = spec.p1 * spec.p2 * spec.p3;
    if raw.rank() != 2 || raw.cols() % per != 0 || raw.rows() != index_map.len() {
        return Err(Error::shape("unpatchify", raw.shape(), &[index_map.len(), per]));
    }
    let channels = raw.cols() / per;
    let mut v = VideoTensor::zeros(
        grid.h * spec.p1,
        grid.w * spec.p2,
        grid.f * spec.p3,
        channels,
        fps,
    );
    for (n, &[gh, gw, gf]) in index_map.iter().enumerate() {
        let row = raw.row(n);
        let mut k = 0;
        for dh in 0..spec.p1 {
            for dw in 0..spec.p2 {
                for df in 0..spec.p3 {
                    for c in 0..channels {
                        v.set(gh * spec.p1 + dh, gw * spec.p2 + dw, gf * spec.p3 + df, c, row[k]);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(v)
}

fn check_coverage(index_map: &[[usize; 3]], grid: Grid) -> Result<()> {
    if index_map.len() != grid.len() {
        return Err(Error::Coverage(format!(
            "{} tokens for a grid of {}",
            index_map.len(),
            grid.len()
        )));
    }
    let mut seen = vec![false; grid.len()];
    for &[h, w, f] in index_map {
        if h >= grid.h || w >= grid.w || f >= grid.f {
            return Err(Error::Coverage(format!("coordinate ({h},{w},{f}) outside grid")));
        }
        let k = (f * grid.h + h) * grid.w + w;
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::Coverage(format!("coordinate ({h},{w},{f}) repeated")));
        }
    }
    Ok(())
}

/// Token embedding on a tape: `raw·proj + pos_h[h] + pos_w[w] + pos_f[f + f_offset]`.
#[allow(clippy::too_many_arguments)]
pub fn embed_on_tape(
    tape: &mut Tape,
    raw: Var,
    proj: Var,
    pos_h: Var,
    pos_w: Var,
    pos_f: Var,
    index_map: &[[usize; 3]],
    f_offset: usize,
) -> Result<Var> {
    let x = tape.matmul(raw, proj)?;
    let hs = tape.gather_rows(pos_h, index_map.iter().map(|c| c[0]).collect())?;
    let ws = tape.gather_rows(pos_w, index_map.iter().map(|c| c[1]).collect())?;
    let fs = tape.gather_rows(pos_f, index_map.iter().map(|c| c[2] + f_offset).collect())?;
    let x = tape.add(x, hs)?;
    let x = tape.add(x, ws)?;
    tape.add(x, fs)
}

/// `G_θ`: voxels projected to width `d` plus positional terms.
pub fn patchify(v: &VideoTensor, spec: &PatchSpec, emb: &PatchEmbedding) -> Result<TokenSequence> {
    let (raw, grid) = voxelize(v, spec)?;
    if emb.proj.rank() != 2 || emb.proj.shape()[0] != raw.cols() || emb.proj.shape()[1] != spec.d {
        return Err(Error::shape("patchify", emb.proj.shape(), &[raw.cols(), spec.d]));
    }
    let index_map = grid.index_map();
    let mut tape = Tape::new();
    let raw = tape.constant(raw)?;
    let proj = tape.constant(emb.proj.clone())?;
    let ph = tape.constant(emb.pos_h.clone())?;
    let pw = tape.constant(emb.pos_w.clone())?;
    let pf = tape.constant(emb.pos_f.clone())?;
    let x = embed_on_tape(&mut tape, raw, proj, ph, pw, pf, &index_map, 0)?;
    Ok(TokenSequence {
        tokens: tape.value(x).clone(),
        index_map,
        grid,
        fps: v.fps,
    })
}

/// `H_θ`: tokens projected back to voxels and rearranged into a video.
pub fn unpatchify(ts: &TokenSequence, spec: &PatchSpec, proj_out: &Tensor) -> Result<VideoTensor> {
    check_coverage(&ts.index_map, ts.grid)?;
    let mut tape = Tape::new();
    let x = tape.constant(ts.tokens.clone())?;
    let p = tape.constant(proj_out.clone())?;
    let raw = tape.matmul(x, p)?;
    devoxelize(tape.value(raw), &ts.index_map, ts.grid, spec, ts.fps)
}

/// Trainable patch embedding handles.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbed {
    pub spec: PatchSpec,
    pub proj: ParamId,
    pub pos_h: ParamId,
    pub pos_w: ParamId,
    pub pos_f: ParamId,
}

impl PatchEmbed {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        spec: PatchSpec,
        channels: usize,
        max_grid: Grid,
        rng: &mut R,
    ) -> Self {
        let vl = spec.voxel_len(channels);
        let d = spec.d;
        let proj = store.add("patch.proj", Tensor::randn(&[vl, d], (1.0 / vl as f64).sqrt(), rng));
        let pos_h = store.add("patch.pos_h", Tensor::randn(&[max_grid.h, d], 0.02, rng));
        let pos_w = store.add("patch.pos_w", Tensor::randn(&[max_grid.w, d], 0.02, rng));
        let pos_f = store.add("patch.pos_f", Tensor::randn(&[max_grid.f, d], 0.02, rng));
        PatchEmbed {
            spec,
            proj,
            pos_h,
            pos_w,
            pos_f,
        }
    }

    pub fn embed(&self, g: &mut Graph, raw: Var, index_map: &[[usize; 3]], f_offset: usize) -> Result<Var> {
        let max_f = g.params().get(self.pos_f).rows();
        if let Some(c) = index_map.iter().find(|c| c[2] + f_offset >= max_f) {
            return Err(Error::Config(format!(
                "temporal slice {} exceeds the positional table of {max_f} slices",
                c[2] + f_offset
            )));
        }
        let (proj, ph, pw, pf) = (
            g.param(self.proj)?,
            g.param(self.pos_h)?,
            g.param(self.pos_w)?,
            g.param(self.pos_f)?,
        );
        embed_on_tape(&mut g.tape, raw, proj, ph, pw, pf, index_map, f_offset)
    }

    pub fn plain(&self, store: &ParamStore) -> PatchEmbedding {
        PatchEmbedding {
            proj: store.get(self.proj).clone(),
            pos_h: store.get(self.pos_h).clone(),
            pos_w: store.get(self.pos_w).clone(),
            pos_f: store.get(self.pos_f).clone(),
        }
    }
}
