#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vin_core::diffusion::{
    add_noise, build_schedule, loss_and_grads, make_chunk_layout, ChunkLayout, NoiseSchedule, StepNoise, TrainExample,
    TrainOptions,
};
use vin_core::dit::DiTConfig;
use vin_core::model::{GlobalMode, Model, ModelConfig, TokenMeta};
use vin_core::numcore::{Tape, Tensor, Var};
use vin_core::par::Execution;
use vin_core::patchio::PatchSpec;
use vin_core::vin::VINConfig;

/// Central-difference step.
pub const FD_H: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely at this scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error over checked coordinates, and how many were checked.
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub coords: usize,
}

fn contraction(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FF_EE00);
    Tensor::randn(shape, 1.0, &mut rng)
}

fn scalar_loss<F>(inputs: &[Tensor], f: &F, seed: u64) -> (Tape, Vec<Var>, Var)
where
    F: Fn(&mut Tape, &[Var]) -> vin_core::Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true).unwrap()).collect();
    let out = f(&mut tape, &vars).unwrap();
    let w = tape.constant(contraction(tape.shape(out), seed)).unwrap();
    let m = tape.mul(out, w).unwrap();
    let loss = tape.sum(m).unwrap();
    (tape, vars, loss)
}

/// Compares reverse-mode gradients of `sum(f(inputs) ⊙ W)` for a fixed
/// random `W` against central differences on up to `coords` coordinates.
pub fn grad_check<F>(inputs: &[Tensor], f: F, coords: usize, seed: u64) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> vin_core::Result<Var>,
{
    let (tape, vars, loss) = scalar_loss(inputs, &f, seed);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v, &tape).unwrap()).collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let picks: Vec<(usize, usize)> = if total <= coords {
        inputs.iter().enumerate().flat_map(|(i, x)| (0..x.len()).map(move |k| (i, k))).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..coords)
            .map(|_| {
                let i = rng.random_range(0..inputs.len());
                (i, rng.random_range(0..inputs[i].len()))
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| {
        let (t, _, l) = scalar_loss(xs, &f, seed);
        t.value(l).item()
    };
    let mut max_rel: f64 = 0.0;
    for &(i, k) in &picks {
        let mut xs = inputs.to_vec();
        let x0 = xs[i].data()[k];
        xs[i].data_mut()[k] = x0 + FD_H;
        let up = eval(&xs);
        xs[i].data_mut()[k] = x0 - FD_H;
        let down = eval(&xs);
        let numeric = (up - down) / (2.0 * FD_H);
        max_rel = max_rel.max(rel_err(analytic[i].data()[k], numeric));
    }
    GradReport {
        max_rel,
        coords: picks.len(),
    }
}

/// Two DiT blocks, one processor block, width 16, on 8×8 frames with 4×4
/// patches (4 tokens per frame).
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch: PatchSpec { p1: 4, p2: 4, p3: 1, d: 16 },
        height: 8,
        width: 8,
        channels: 1,
        max_frames: 8,
        fps: 4.0,
        dit: DiTConfig {
            layers: 2,
            d: 16,
            heads: 2,
            d_text: 8,
            steps: 10,
            ffn_mult: 2,
        },
        vin: VINConfig {
            n_global: 4,
            blocks: 1,
            heads: 2,
            d: 16,
            keyframe_interval: 0.5,
            ffn_mult: 2,
            steps: 10,
        },
        n_classes: 2,
        n_text: 2,
    }
}

pub struct TinySetup {
    pub model: Model,
    pub batch: Vec<TrainExample>,
    pub noise: Vec<StepNoise>,
    pub meta: TokenMeta,
    pub layout: ChunkLayout,
    pub sched: NoiseSchedule,
}

/// Tiny model with every parameter jittered away from its initialization
/// (so zero-initialized projections carry gradient), one 4-frame clip and a
/// 2-chunk layout with one frame of overlap.
pub fn tiny_setup(seed: u64) -> TinySetup {
    let mut model = Model::new(tiny_model_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for p in model.params.values_mut() {
        let jitter = Tensor::randn(p.shape(), 0.3, &mut rng);
        p.add_assign(&jitter);
    }
    let frames = 4;
    let meta = model.meta(frames).unwrap();
    let v = model.config.voxel_len();
    let n = meta.len();
    let batch = vec![TrainExample {
        raw: Tensor::randn(&[n, v], 0.5, &mut rng),
        class: 1,
    }];
    let noise = vec![StepNoise {
        t: 6,
        eps: Tensor::randn(&[n, v], 1.0, &mut rng),
    }];
    let tpf = model.config.tokens_per_frame_slice();
    let layout = make_chunk_layout(n, 2 * tpf, tpf, tpf).unwrap();
    let sched = build_schedule(10, 0.01, 0.2).unwrap();
    TinySetup {
        model,
        batch,
        noise,
        meta,
        layout,
        sched,
    }
}

impl TinySetup {
    pub fn loss(&self, exec: Execution) -> vin_core::diffusion::LossOutput {
        loss_and_grads(
            &self.model,
            &self.batch,
            &self.noise,
            &self.meta,
            &self.layout,
            &self.sched,
            TrainOptions {
                global: Default::default(),
                exec,
            },
        )
        .unwrap()
    }
}

impl TinySetup {
    /// Embedded noisy tokens of example `b` at the current parameters.
    pub fn tokens(&self, b: usize) -> Tensor {
        let x_t = add_noise(&self.batch[b].raw, &self.noise[b].eps, self.noise[b].t, &self.sched).unwrap();
        let mut g = self.model.graph(false);
        let r = g.input(x_t).unwrap();
        let x = self.model.net.embed(&mut g, r, &self.meta).unwrap();
        g.value(x).clone()
    }

    /// Independent evaluation of the chunked objective: every chunk rebuilds
    /// the whole forward on its own graph, and local-context rows are taken
    /// from `frozen[b]` instead of the live embedding. This is the function
    /// whose derivative the stop-gradient training path computes.
    pub fn reference_loss(&self, frozen: &[Tensor]) -> f64 {
        let net = &self.model.net;
        let cfg = &self.model.config;
        let n_chunks = self.layout.len();
        let mut total = 0.0;
        for (b, ex) in self.batch.iter().enumerate() {
            let StepNoise { t, eps } = &self.noise[b];
            let x_t = add_noise(&ex.raw, eps, *t, &self.sched).unwrap();
            for i in 0..n_chunks {
                let mut g = self.model.graph(false);
                let r = g.input(x_t.clone()).unwrap();
                let x = net.embed(&mut g, r, &self.meta).unwrap();
                let text = net.text(&mut g, cfg, ex.class).unwrap();
                let z = net.globals(&mut g, cfg, x, &self.meta, *t, text, GlobalMode::Learned).unwrap();
                let cond = net.conditioning(&mut g, *t, text).unwrap();
                let chunk = self.layout.chunks[i].clone();
                let local = self.layout.local(i);
                let xc = g.tape.slice_rows(x, chunk.start, chunk.end).unwrap();
                let xl = (!local.is_empty()).then(|| g.input(frozen[b].slice_rows(local.start, local.end)).unwrap());
                let pred = net.predict(&mut g, xc, xl, Some(z), &cond).unwrap();
                let p = g.value(pred);
                let mut se = 0.0;
                for (row, k) in (local.len()..local.len() + chunk.len()).zip(chunk.clone()) {
                    for (a, e) in p.row(row).iter().zip(eps.row(k)) {
                        se += (a - e) * (a - e);
                    }
                }
                total += se / (chunk.len() * eps.cols()) as f64 / (n_chunks * self.batch.len()) as f64;
            }
        }
        total
    }
}

/// Gradient check of the chunked training loss against central differences
/// of [`TinySetup::reference_loss`] on `coords` parameter coordinates, drawn
/// tensor-first so every parameter group is represented. Also returns the
/// gap between the two loss evaluations at the base point.
pub fn tiny_model_grad_check(coords: usize, seed: u64) -> (GradReport, f64) {
    let mut s = tiny_setup(seed);
    let out = s.loss(Execution::Sequential);
    let frozen: Vec<Tensor> = (0..s.batch.len()).map(|b| s.tokens(b)).collect();
    let base_gap = (s.reference_loss(&frozen) - out.loss).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let n_params = s.model.params.len();
    let mut max_rel: f64 = 0.0;
    for _ in 0..coords {
        let p = rng.random_range(0..n_params);
        let k = rng.random_range(0..s.model.params.values()[p].len());
        let x0 = s.model.params.values()[p].data()[k];
        s.model.params.values_mut()[p].data_mut()[k] = x0 + FD_H;
        let up = s.reference_loss(&frozen);
        s.model.params.values_mut()[p].data_mut()[k] = x0 - FD_H;
        let down = s.reference_loss(&frozen);
        s.model.params.values_mut()[p].data_mut()[k] = x0;
        let numeric = (up - down) / (2.0 * FD_H);
        max_rel = max_rel.max(rel_err(out.grads.grads[p].data()[k], numeric));
    }
    (GradReport { max_rel, coords }, base_gap)
}

fn randn_seeded(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    Tensor::randn(shape, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Finite-difference reports for every differentiable tape primitive plus the
/// attention and transformer-block composites.
pub fn primitive_reports(coords: usize) -> Vec<(&'static str, GradReport)> {
    use vin_core::dit::{mha_on_tape, Block};
    use vin_core::numcore::{Graph, ParamStore};
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> vin_core::Result<Var>>);
    let r = |shape: &[usize], seed| randn_seeded(shape, seed, 1.0);
    let (a, b) = (r(&[3, 4], 5), r(&[3, 4], 6));
    let mut cases: Vec<Case> = vec![
        ("matmul", vec![r(&[3, 4], 1), r(&[4, 5], 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![r(&[3, 4], 3), r(&[5, 4], 4)], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("add_row", vec![a.clone(), r(&[1, 4], 7)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("softmax_rows", vec![r(&[4, 6], 8)], Box::new(|t, v| t.softmax_rows(v[0]))),
        (
            "layer_norm",
            vec![r(&[4, 6], 9), r(&[1, 6], 10), r(&[1, 6], 11)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("concat_rows", vec![a.clone(), r(&[2, 4], 13)], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("concat_cols", vec![a.clone(), r(&[3, 2], 14)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("slice_rows", vec![a.clone()], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], vec![2, 0, 2, 1]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("mean_square", vec![a.clone()], Box::new(|t, v| t.mean_square(v[0]))),
        ("sum", vec![a], Box::new(|t, v| t.sum(v[0]))),
    ];
    let d = 8;
    let mut mha_in = vec![r(&[3, d], 30), r(&[5, d], 31)];
    mha_in.extend((0..4).map(|i| randn_seeded(&[d, d], 20 + i, 0.4)));
    cases.push((
        "mha",
        mha_in,
        Box::new(|t, v| Ok(mha_on_tape(t, v[0], v[1], [v[2], v[3], v[4], v[5]], 2)?.output)),
    ));
    let mut out: Vec<(&'static str, GradReport)> =
        cases.into_iter().map(|(name, inputs, f)| (name, grad_check(&inputs, f, coords, 17))).collect();

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let block = Block::new(&mut store, "b", d, 2, &mut rng);
    for p in store.values_mut() {
        let j = Tensor::randn(p.shape(), 0.3, &mut rng);
        p.add_assign(&j);
    }
    let inputs = [r(&[4, d], 41), r(&[2, d], 42), r(&[1, d], 43)];
    let rep = grad_check(
        &inputs,
        |t, v| {
            let mut g = Graph::new(&store, false);
            std::mem::swap(&mut g.tape, t);
            let out = block.forward(&mut g, v[0], Some(v[1]), Some(v[2]), 2);
            std::mem::swap(&mut g.tape, t);
            out
        },
        coords,
        17,
    );
    out.push(("block", rep));
    out
}
