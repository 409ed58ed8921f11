//! Chunk-parallel training objective.
//!
//! One shared tape per example holds the embedding, text tokens and global
//! tokens. Each chunk then runs on its own tape whose inputs are leaves cut
//! from the shared values, so chunks can be evaluated concurrently. Chunk
//! gradients are reduced in chunk order and pushed back through the shared
//! tape with a seeded backward pass.

use rand::Rng;

use super::layout::ChunkLayout;
use super::schedule::{add_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{GlobalMode, Model, TokenMeta};
use crate::numcore::{Adam, ParamGrads, Tensor};
use crate::par::{self, Execution};

/// One clean clip as voxel rows (`N×V`) with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub raw: Tensor,
    pub class: usize,
}

/// Diffusion step and injected noise for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub t: usize,
    pub eps: Tensor,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub global: GlobalMode,
    pub exec: Execution,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Batch mean of the per-example mean chunk loss.
    pub loss: f64,
    pub grads: ParamGrads,
    /// Per example, per chunk: mean squared error of the chunk's own rows.
    pub chunk_losses: Vec<Vec<f64>>,
    /// Per example, per chunk `i ≥ 1`: gradient reaching the local-context
    /// rows before the stop-gradient.
    pub local_grads: Vec<Vec<Tensor>>,
}

/// `t ∼ U{1..T}` and `ε ∼ N(0, I)` for each example, drawn in example order.
pub fn draw_noise<R: Rng + ?Sized>(batch: &[TrainExample], sched: &NoiseSchedule, rng: &mut R) -> Vec<StepNoise> {
    batch
        .iter()
        .map(|ex| {
            let t = rng.random_range(1..=sched.steps);
            let eps = Tensor::randn(ex.raw.shape(), 1.0, rng);
            StepNoise { t, eps }
        })
        .collect()
}

struct Shared {
    tokens: Tensor,
    globals: Tensor,
    text: Option<Tensor>,
}

struct ChunkResult {
    loss: f64,
    param_grads: Vec<Option<Tensor>>,
    d_chunk: Tensor,
    d_local: Option<Tensor>,
    d_globals: Option<Tensor>,
    d_text: Option<Tensor>,
}

fn run_chunk(
    model: &Model,
    shared: &Shared,
    eps: &Tensor,
    layout: &ChunkLayout,
    i: usize,
    t: usize,
    weight: f64,
    global: GlobalMode,
) -> Result<ChunkResult> {
    let mut g = model.graph(true);
    let chunk = layout.chunks[i].clone();
    let local = layout.local(i);
    let xc = g.tape.leaf(shared.tokens.slice_rows(chunk.start, chunk.end), true)?;
    let (xl_raw, xl) = if local.is_empty() {
        (None, None)
    } else {
        let raw = g.tape.leaf(shared.tokens.slice_rows(local.start, local.end), true)?;
        (Some(raw), Some(g.tape.stop_gradient(raw)?))
    };
    let z = g.tape.leaf(shared.globals.clone(), global == GlobalMode::Learned)?;
    let text = match &shared.text {
        Some(tx) => Some(g.tape.leaf(tx.clone(), true)?),
        None => None,
    };
    let cond = model.net.conditioning(&mut g, t, text)?;
    let pred = model.net.predict(&mut g, xc, xl, Some(z), &cond)?;
    // Drop the local rows: the loss covers the chunk's own tokens only.
    let own = g.tape.slice_rows(pred, local.len(), local.len() + chunk.len())?;
    let target = g.input(eps.slice_rows(chunk.start, chunk.end))?;
    let diff = g.tape.sub(own, target)?;
    let mse = g.tape.mean_square(diff)?;
    let scaled = g.tape.scale(mse, weight)?;
    let grads = g.tape.backward(scaled)?;
    Ok(ChunkResult {
        loss: g.value(mse).item(),
        param_grads: g.param_grads(&grads),
        d_chunk: grads.wrt(xc, &g.tape)?,
        d_local: xl_raw.map(|v| grads.wrt(v, &g.tape)).transpose()?,
        d_globals: (global == GlobalMode::Learned).then(|| grads.wrt(z, &g.tape)).transpose()?,
        d_text: text.map(|v| grads.wrt(v, &g.tape)).transpose()?,
    })
}

/// Loss and parameter gradients for fixed noise draws.
pub fn loss_and_grads(
    model: &Model,
    batch: &[TrainExample],
    noise: &[StepNoise],
    meta: &TokenMeta,
    layout: &ChunkLayout,
    sched: &NoiseSchedule,
    opts: TrainOptions,
) -> Result<LossOutput> {
    if batch.is_empty() || batch.len() != noise.len() {
        return Err(Error::Contract(format!(
            "{} examples with {} noise draws",
            batch.len(),
            noise.len()
        )));
    }
    if layout.n != meta.len() {
        return Err(Error::Layout(format!(
            "layout covers {} tokens, sequence has {}",
            layout.n,
            meta.len()
        )));
    }
    let n_chunks = layout.len();
    let weight = 1.0 / (n_chunks * batch.len()) as f64;

    // Shared tapes, one per example.
    let mains = par::try_map_range(opts.exec, batch.len(), |b| {
        let ex = &batch[b];
        let StepNoise { t, eps } = &noise[b];
        let x_t = add_noise(&ex.raw, eps, *t, sched)?;
        let mut g = model.graph(true);
        let r = g.input(x_t)?;
        let x = model.net.embed(&mut g, r, meta)?;
        let text = model.net.text(&mut g, &model.config, ex.class)?;
        let z = model.net.globals(&mut g, &model.config, x, meta, *t, text, opts.global)?;
        let shared = Shared {
            tokens: g.value(x).clone(),
            globals: g.value(z).clone(),
            text: text.map(|v| g.value(v).clone()),
        };
        Ok::<_, Error>((g, x, z, text, shared))
    })?;

    let jobs = par::try_map_range(opts.exec, batch.len() * n_chunks, |j| {
        let (b, i) = (j / n_chunks, j % n_chunks);
        run_chunk(model, &mains[b].4, &noise[b].eps, layout, i, noise[b].t, weight, opts.global)
    })?;

    let mut grads = ParamGrads::zeros_like(&model.params);
    let mut chunk_losses = Vec::with_capacity(batch.len());
    let mut local_grads = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    for (b, (g, x, z, text, shared)) in mains.iter().enumerate() {
        let results = &jobs[b * n_chunks..(b + 1) * n_chunks];
        let d = shared.tokens.cols();
        let mut dx = Tensor::zeros(shared.tokens.shape());
        let mut dz = Tensor::zeros(shared.globals.shape());
        let mut dtext = shared.text.as_ref().map(|t| Tensor::zeros(t.shape()));
        let mut losses = Vec::with_capacity(n_chunks);
        let mut locals = Vec::new();
        for (i, r) in results.iter().enumerate() {
            grads.accumulate(&r.param_grads);
            let rows = layout.chunks[i].clone();
            for (k, v) in dx.data_mut()[rows.start * d..rows.end * d].iter_mut().enumerate() {
                *v += r.d_chunk.data()[k];
            }
            if let Some(l) = &r.d_local {
                locals.push(l.clone());
            }
            if let Some(gz) = &r.d_globals {
                dz.add_assign(gz);
            }
            if let (Some(acc), Some(gt)) = (dtext.as_mut(), &r.d_text) {
                acc.add_assign(gt);
            }
            losses.push(r.loss);
        }
        let mut seeds = vec![(*x, dx)];
        if opts.global == GlobalMode::Learned {
            seeds.push((*z, dz));
        }
        if let (Some(tv), Some(dt)) = (text, dtext) {
            seeds.push((*tv, dt));
        }
        let main_grads = g.tape.backward_seeded(&seeds)?;
        grads.accumulate(&g.param_grads(&main_grads));
        total += losses.iter().sum::<f64>() / n_chunks as f64;
        chunk_losses.push(losses);
        local_grads.push(locals);
    }
    Ok(LossOutput {
        loss: total / batch.len() as f64,
        grads,
        chunk_losses,
        local_grads,
    })
}

/// Draws `t` and `ε`, computes the loss and applies one optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[TrainExample],
    meta: &TokenMeta,
    layout: &ChunkLayout,
    sched: &NoiseSchedule,
    step: u64,
    rng: &mut R,
    opts: TrainOptions,
) -> Result<LossOutput> {
    let noise = draw_noise(batch, sched, rng);
    let out = loss_and_grads(model, batch, &noise, meta, layout, sched, opts).map_err(|e| match e {
        Error::NonFinite(op) => Error::TrainingFault {
            step,
            message: format!("non-finite value in {op}"),
        },
        other => other,
    })?;
    if !out.loss.is_finite() || !out.grads.global_norm().is_finite() {
        let ts: Vec<usize> = noise.iter().map(|n| n.t).collect();
        return Err(Error::TrainingFault {
            step,
            message: format!("loss {} at t={ts:?}", out.loss),
        });
    }
    opt.update(&mut model.params, &out.grads);
    Ok(out)
}
