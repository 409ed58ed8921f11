//! Chunk-parallel sampling with token fusion, plus the monolithic and
//! autoregressive reference samplers.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::fusion::{drop_local, fuse_tokens, fusion_active, FusionConfig};
use super::layout::{make_chunk_layout, ChunkLayout};
use super::schedule::{add_noise, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{GlobalMode, Model, TokenMeta};
use crate::numcore::Tensor;
use crate::par::{self, Execution};
use crate::patchio::{devoxelize, VideoTensor};

/// Order in which chunk denoises are evaluated within a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChunkOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug)]
pub struct SampleOptions {
    pub class: usize,
    pub fusion: FusionConfig,
    pub global: GlobalMode,
    pub order: ChunkOrder,
    pub exec: Execution,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub steps: usize,
    /// Steps `t` on which token fusion ran, in sampling order.
    pub fused_at: Vec<usize>,
}

impl SampleStats {
    pub fn fused_steps(&self) -> usize {
        self.fused_at.len()
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub video: VideoTensor,
    pub stats: SampleStats,
}

/// Leading rows held at known clean values, re-noised to level `t` before each step.
struct Known<'a> {
    rows: Range<usize>,
    x0: &'a Tensor,
    rng: ChaCha8Rng,
}

fn to_video(model: &Model, raw: &Tensor, meta: &TokenMeta) -> Result<VideoTensor> {
    devoxelize(raw, &meta.index_map, meta.grid, &model.config.patch, meta.fps)
}

fn check_finite(x: &Tensor, t: usize) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::SamplingFault {
            t,
            message: "state became non-finite".into(),
        });
    }
    Ok(())
}

fn sampling_fault(t: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(op) => Error::SamplingFault {
            t,
            message: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn sample_raw(
    model: &Model,
    meta: &TokenMeta,
    layout: &ChunkLayout,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
    rng: &mut ChaCha8Rng,
    mut known: Option<Known>,
) -> Result<(Tensor, SampleStats)> {
    opts.fusion.validate()?;
    if layout.n != meta.len() {
        return Err(Error::Layout(format!(
            "layout covers {} tokens, sequence has {}",
            layout.n,
            meta.len()
        )));
    }
    let shape = [meta.len(), model.config.voxel_len()];
    let mut x = Tensor::randn(&shape, 1.0, rng);
    let mut stats = SampleStats::default();
    let order: Vec<usize> = match opts.order {
        ChunkOrder::Forward => (0..layout.len()).collect(),
        ChunkOrder::Reverse => (0..layout.len()).rev().collect(),
    };
    for t in (1..sched.steps).rev() {
        if let Some(k) = known.as_mut() {
            let eps = Tensor::randn(k.x0.shape(), 1.0, &mut k.rng);
            let noised = add_noise(k.x0, &eps, t, sched)?;
            let w = shape[1];
            x.data_mut()[k.rows.start * w..k.rows.end * w].copy_from_slice(noised.data());
        }
        let ctx = model
            .step_context(&x, meta, t, opts.class, opts.global)
            .map_err(sampling_fault(t))?;
        // Every chunk reads the same (x_t, Z_t) snapshot; results are placed by index.
        let evaluated = par::try_map_slice(opts.exec, &order, |&i| {
            model.predict_rows(&ctx, layout.local(i), layout.chunks[i].clone(), t)
        })
        .map_err(sampling_fault(t))?;
        let mut preds: Vec<Option<Tensor>> = vec![None; layout.len()];
        for (&i, p) in order.iter().zip(evaluated) {
            preds[i] = Some(p);
        }
        let preds: Vec<Tensor> = preds.into_iter().map(|p| p.expect("every chunk evaluated")).collect();
        let eps_hat = if fusion_active(t, &opts.fusion) {
            stats.fused_at.push(t);
            fuse_tokens(&preds, layout, &opts.fusion)?
        } else {
            drop_local(&preds, layout)?
        };
        let z = Tensor::randn(&shape, 1.0, rng);
        x = ddpm_step(&x, &eps_hat, t, sched, &z)?;
        check_finite(&x, t)?;
        stats.steps += 1;
    }
    if let Some(k) = known {
        let w = shape[1];
        x.data_mut()[k.rows.start * w..k.rows.end * w].copy_from_slice(k.x0.data());
    }
    Ok((x, stats))
}

/// Parallel chunked sampling: `x_T ∼ N(0, I)`, then `t = T−1 … 1`.
pub fn sample(
    model: &Model,
    frames: usize,
    layout: &ChunkLayout,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
    seed: u64,
) -> Result<SampleOutput> {
    let meta = model.meta(frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (raw, stats) = sample_raw(model, &meta, layout, sched, opts, &mut rng, None)?;
    Ok(SampleOutput {
        video: to_video(model, &raw, &meta)?,
        stats,
    })
}

/// Plain DDPM over the whole token sequence as a single denoiser call per step.
pub fn sample_monolithic(
    model: &Model,
    frames: usize,
    sched: &NoiseSchedule,
    class: usize,
    global: GlobalMode,
    seed: u64,
) -> Result<VideoTensor> {
    let meta = model.meta(frames)?;
    let n = meta.len();
    let shape = [n, model.config.voxel_len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&shape, 1.0, &mut rng);
    for t in (1..sched.steps).rev() {
        let ctx = model.step_context(&x, &meta, t, class, global)?;
        let eps_hat = model.predict_rows(&ctx, 0..0, 0..n, t)?;
        let z = Tensor::randn(&shape, 1.0, &mut rng);
        x = ddpm_step(&x, &eps_hat, t, sched, &z)?;
        check_finite(&x, t)?;
    }
    to_video(model, &x, &meta)
}

/// One window of the autoregressive plan, in frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArWindow {
    /// First frame of the window (context included).
    pub start: usize,
    /// First newly generated frame.
    pub new_start: usize,
    pub end: usize,
}

/// Windows of `context + step` frames advancing by `step`; the first window
/// has no context and generates `min(F, context + step)` frames.
pub fn ar_plan(frames: usize, context: usize, step: usize) -> Result<Vec<ArWindow>> {
    if step == 0 || frames == 0 {
        return Err(Error::Config("autoregressive step and frame count must be positive".into()));
    }
    let mut out = vec![ArWindow {
        start: 0,
        new_start: 0,
        end: frames.min(context + step),
    }];
    while out.last().expect("non-empty").end < frames {
        let new_start = out.last().expect("non-empty").end;
        out.push(ArWindow {
            start: new_start - context.min(new_start),
            new_start,
            end: (new_start + step).min(frames),
        });
    }
    Ok(out)
}

fn derive_seed(seed: u64, window: usize, stream: u64) -> u64 {
    let mut s = ChaCha8Rng::seed_from_u64(seed ^ 0x5A17_C0DE);
    s.set_stream(window as u64 * 2 + stream);
    rand::Rng::random(&mut s)
}

/// Sequential window generation; context frames are re-noised to the
/// current level at every step and restored to their clean values at the end.
#[allow(clippy::too_many_arguments)]
pub fn sample_autoregressive(
    model: &Model,
    frames: usize,
    chunk_frames: usize,
    local_frames: usize,
    sched: &NoiseSchedule,
    opts: &SampleOptions,
    context: usize,
    step: usize,
    seed: u64,
) -> Result<VideoTensor> {
    let p3 = model.config.patch.p3;
    if context + step > model.config.max_frames {
        return Err(Error::Config(format!(
            "context {context} + step {step} frames exceed the model window of {}",
            model.config.max_frames
        )));
    }
    if context % p3 != 0 || step % p3 != 0 || frames % p3 != 0 {
        return Err(Error::Config(format!("frame counts must be multiples of p3={p3}")));
    }
    let tpf = model.config.tokens_per_frame_slice();
    let layout_for = |f: usize| {
        make_chunk_layout(
            f / p3 * tpf,
            chunk_frames / p3 * tpf,
            local_frames / p3 * tpf,
            tpf,
        )
    };
    let v = model.config.voxel_len();
    let mut done: Option<Tensor> = None;
    for (w, win) in ar_plan(frames, context, step)?.into_iter().enumerate() {
        let len = win.end - win.start;
        let meta = model.meta(len)?;
        let layout = layout_for(len)?;
        let (raw, _) = if w == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_raw(model, &meta, &layout, sched, opts, &mut rng, None)?
        } else {
            let prev = done.as_ref().expect("first window generated");
            let ctx_rows = (win.new_start - win.start) / p3 * tpf;
            let first = win.start / p3 * tpf;
            let x0 = prev.slice_rows(first, first + ctx_rows);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, w, 0));
            let known = Known {
                rows: 0..ctx_rows,
                x0: &x0,
                rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, w, 1)),
            };
            sample_raw(model, &meta, &layout, sched, opts, &mut rng, Some(known))?
        };
        done = Some(match done {
            None => raw,
            Some(prev) => {
                let skip = (win.new_start - win.start) / p3 * tpf;
                let fresh = raw.slice_rows(skip, raw.rows());
                Tensor::concat_rows(&[&prev, &fresh])?
            }
        });
    }
    let raw = done.expect("at least one window");
    debug_assert_eq!(raw.cols(), v);
    to_video(model, &raw, &model.meta(frames)?)
}
