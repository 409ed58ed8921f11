use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::{layout_for, ExperimentConfig};
use crate::diffusion::{
    sample, sample_autoregressive, sample_monolithic, train_step, ChunkLayout, ChunkOrder, FusionMode, NoiseSchedule,
    SampleOptions, TrainExample, TrainOptions,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_video, AggregateReport, MetricParams, MetricReport};
use crate::model::{GlobalMode, Model, TokenMeta};
use crate::numcore::{Adam, ParamStore, Tensor};
use crate::patchio::{
    generate_dataset, keyframe_slices, keyframe_stride, read_video, voxelize, write_video, VideoTensor,
};
use crate::profiler::{cost_report, paper_proxy, sweep, sweep_csv, ShapeConfig, SWEEP_FRAMES};

/// Per-step RNG: independent of every other step, so resuming from a
/// checkpoint replays the same draws.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 belongs to weight initialization
    r.set_stream(step + 1);
    r
}

/// Voxelized synthetic training clips.
pub fn training_examples(cfg: &ExperimentConfig) -> Result<Vec<TrainExample>> {
    generate_dataset(&cfg.dataset(), cfg.exec)?
        .into_iter()
        .map(|c| {
            Ok(TrainExample {
                raw: voxelize(&c.video, &cfg.model.patch)?.0,
                class: c.class_id,
            })
        })
        .collect()
}

/// Training state that can advance one optimizer step at a time.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub opt: Adam,
    pub step: u64,
    data: Vec<TrainExample>,
    meta: TokenMeta,
    layout: ChunkLayout,
    sched: NoiseSchedule,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Trainer> {
        config.validate()?;
        let model = Model::new(config.model, config.seed)?;
        let opt = Adam::new(config.adam, &model.params);
        Trainer::assemble(config, model, opt, 0)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Trainer> {
        ck.config.validate()?;
        let (model, opt) = ck.restore()?;
        Trainer::assemble(&ck.config, model, opt, ck.step)
    }

    fn assemble(config: &ExperimentConfig, model: Model, opt: Adam, step: u64) -> Result<Trainer> {
        let frames = config.data.frames;
        Ok(Trainer {
            data: training_examples(config)?,
            meta: model.meta(frames)?,
            layout: config.layout(frames)?,
            sched: config.schedule()?,
            config: config.clone(),
            model,
            opt,
            step,
        })
    }

    /// One optimizer step; returns the batch loss.
    pub fn step_once(&mut self) -> Result<f64> {
        let mut rng = step_rng(self.config.seed, self.step);
        let batch: Vec<TrainExample> = (0..self.config.batch)
            .map(|_| self.data[rng.random_range(0..self.data.len())].clone())
            .collect();
        let out = train_step(
            &mut self.model,
            &mut self.opt,
            &batch,
            &self.meta,
            &self.layout,
            &self.sched,
            self.step,
            &mut rng,
            TrainOptions {
                global: GlobalMode::Learned,
                exec: self.config.exec,
            },
        )?;
        self.step += 1;
        Ok(out.loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, &self.model, &self.opt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
}

pub fn loss_csv(losses: &[(u64, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, l) in losses {
        let _ = writeln!(s, "{step},{l:?}");
    }
    s
}

/// Runs `cfg.train_steps` steps into `out`: `config.txt`, `loss.csv`,
/// `step_NNNNNN.vinc` every `checkpoint_every` steps and `final.vinc`.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out)?;
    cfg.save(out.join("config.txt"))?;
    let mut tr = Trainer::new(cfg)?;
    let mut losses = Vec::new();
    while tr.step < cfg.train_steps {
        let step = tr.step;
        losses.push((step, tr.step_once()?));
        if cfg.checkpoint_every > 0 && tr.step % cfg.checkpoint_every == 0 && tr.step < cfg.train_steps {
            tr.checkpoint().save(out.join(format!("step_{:06}.vinc", tr.step)))?;
        }
    }
    fs::write(out.join("loss.csv"), loss_csv(&losses))?;
    let final_checkpoint = out.join("final.vinc");
    tr.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        losses,
        final_checkpoint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Vin,
    Full,
    Autoregressive,
}

impl SampleMode {
    pub const ALL: [SampleMode; 3] = [SampleMode::Vin, SampleMode::Full, SampleMode::Autoregressive];

    pub fn name(self) -> &'static str {
        match self {
            SampleMode::Vin => "vin",
            SampleMode::Full => "full",
            SampleMode::Autoregressive => "autoregressive",
        }
    }

    pub fn parse(s: &str) -> Result<SampleMode> {
        SampleMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMode {
            given: s.to_string(),
            expected: SampleMode::ALL.map(|m| m.name()).join(", "),
        })
    }
}

fn sample_options(cfg: &ExperimentConfig, class: usize, global: GlobalMode) -> SampleOptions {
    SampleOptions {
        class,
        fusion: cfg.fusion(),
        global,
        order: ChunkOrder::Forward,
        exec: cfg.exec,
    }
}

/// Generates `frames` frames of class `class` with the requested sampler.
pub fn generate(
    model: &Model,
    cfg: &ExperimentConfig,
    mode: SampleMode,
    frames: usize,
    class: usize,
    global: GlobalMode,
    seed: u64,
) -> Result<VideoTensor> {
    let layout = layout_for(&model.config, frames, cfg.chunk_frames, cfg.local_frames)?;
    let sched = cfg.schedule()?;
    let opts = sample_options(cfg, class, global);
    match mode {
        SampleMode::Vin => Ok(sample(model, frames, &layout, &sched, &opts, seed)?.video),
        SampleMode::Full => sample_monolithic(model, frames, &sched, class, global, seed),
        SampleMode::Autoregressive => sample_autoregressive(
            model,
            frames,
            cfg.chunk_frames,
            cfg.local_frames,
            &sched,
            &opts,
            cfg.ar_context,
            cfg.ar_step,
            seed,
        ),
    }
}

/// Samples from a checkpoint and writes `sample_<mode>_<seed>.vinv`, plus
/// PNG frames when `png` is set. Returns the video path.
pub fn run_sample(ck: &Checkpoint, mode: SampleMode, frames: usize, seed: u64, out: &Path, png: bool) -> Result<PathBuf> {
    let (model, _) = ck.restore()?;
    let cfg = &ck.config;
    let v = generate(&model, cfg, mode, frames, cfg.sample_class, GlobalMode::Learned, seed)?;
    fs::create_dir_all(out)?;
    let name = format!("sample_{}_{seed}", mode.name());
    let path = out.join(format!("{name}.vinv"));
    write_video(&path, &v)?;
    if png {
        crate::patchio::export_png_frames(out.join(&name), "frame", &v)?;
    }
    Ok(path)
}

/// Metrics for every video plus the aggregate, written next to `out` as
/// `<stem>.metrics.txt`, `<stem>.series.vinv` and `aggregate.txt`.
pub fn run_eval(paths: &[PathBuf], out: &Path, params: MetricParams, cfg_exec: crate::par::Execution) -> Result<(Vec<MetricReport>, AggregateReport)> {
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for p in paths {
        let v = read_video(p)?;
        let r = evaluate_video(&v, params, cfg_exec)?;
        let stem = p.file_stem().map_or_else(|| "video".into(), |s| s.to_string_lossy().into_owned());
        fs::write(out.join(format!("{stem}.metrics.txt")), r.to_text())?;
        if let Some(series) = r.series_tensor()? {
            write_video(out.join(format!("{stem}.series.vinv")), &series)?;
        }
        reports.push(r);
    }
    let agg = aggregate(&reports)?;
    fs::write(out.join("aggregate.txt"), agg.to_text())?;
    Ok((reports, agg))
}

/// Inference-time variants compared against the unchanged model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    Full,
    NoGlobal,
    NoFusion,
    MidFusion,
    LateFusion,
    Local8,
    Local10,
    Keyframe05,
    Keyframe02,
}

impl AblationMode {
    pub const ALL: [AblationMode; 9] = [
        AblationMode::Full,
        AblationMode::NoGlobal,
        AblationMode::NoFusion,
        AblationMode::MidFusion,
        AblationMode::LateFusion,
        AblationMode::Local8,
        AblationMode::Local10,
        AblationMode::Keyframe05,
        AblationMode::Keyframe02,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoGlobal => "no-global",
            AblationMode::NoFusion => "no-fusion",
            AblationMode::MidFusion => "mid-fusion",
            AblationMode::LateFusion => "late-fusion",
            AblationMode::Local8 => "local-8",
            AblationMode::Local10 => "local-10",
            AblationMode::Keyframe05 => "keyframe-0.5",
            AblationMode::Keyframe02 => "keyframe-0.2",
        }
    }

    pub fn parse(s: &str) -> Result<AblationMode> {
        AblationMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::UnknownMode {
            given: s.to_string(),
            expected: AblationMode::ALL.map(|m| m.name()).join(", "),
        })
    }

    /// Overridden config and global-token mode. Local-frame rows are scaled
    /// from the reference 12-frame overlap onto the 4-frame toy overlap and
    /// rounded down.
    pub fn apply(self, cfg: &ExperimentConfig) -> (ExperimentConfig, GlobalMode) {
        let mut c = cfg.clone();
        let mut global = GlobalMode::Learned;
        match self {
            AblationMode::Full => {}
            AblationMode::NoGlobal => global = GlobalMode::Zeroed,
            AblationMode::NoFusion => c.fusion_mode = FusionMode::None,
            AblationMode::MidFusion => {
                c.fusion_mode = FusionMode::Mid;
                c.t_alpha = 35;
                c.t_beta = 15;
            }
            AblationMode::LateFusion => {
                c.fusion_mode = FusionMode::Late;
                c.t_alpha = 20;
            }
            AblationMode::Local8 => c.local_frames = 8 * cfg.local_frames / 12,
            AblationMode::Local10 => c.local_frames = 10 * cfg.local_frames / 12,
            AblationMode::Keyframe05 => c.model.vin.keyframe_interval = 0.5,
            AblationMode::Keyframe02 => c.model.vin.keyframe_interval = 0.2,
        }
        let p3 = c.model.patch.p3;
        c.local_frames -= c.local_frames % p3;
        (c, global)
    }
}

/// A model sharing `params` under a different (parameter-compatible) config.
pub fn model_with(config: &ExperimentConfig, params: &ParamStore) -> Result<Model> {
    let mut m = Model::new(config.model, config.seed)?;
    m.params.load(params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect())?;
    Ok(m)
}

/// Samples `cfg.eval_clips` clips (seed `cfg.seed + k`, class `k` modulo the
/// dataset classes) and evaluates them.
pub fn sample_and_evaluate(model: &Model, cfg: &ExperimentConfig, global: GlobalMode, params: MetricParams) -> Result<Vec<MetricReport>> {
    let classes = cfg.data.num_classes();
    (0..cfg.eval_clips)
        .map(|k| {
            let v = generate(
                model,
                cfg,
                SampleMode::Vin,
                cfg.sample_frames,
                k % classes,
                global,
                cfg.seed.wrapping_add(k as u64),
            )?;
            evaluate_video(&v, params, cfg.exec)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub baseline: AggregateReport,
    pub ablated: AggregateReport,
}

impl AblationReport {
    /// Side-by-side table: `metric,full,<mode>`.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".into(), |x| format!("{x:?}"));
        let (a, b) = (&self.baseline, &self.ablated);
        let mut s = format!("metric,full,{}\n", self.mode.name());
        let rows = [
            ("videos", a.videos.to_string(), b.videos.to_string()),
            ("mean_mawe", opt(a.mean_mawe), opt(b.mean_mawe)),
            ("undefined_mawe", a.undefined_mawe.to_string(), b.undefined_mawe.to_string()),
            ("mean_warp_error", opt(a.mean_warp_error), opt(b.mean_warp_error)),
            ("mean_flow_strength", format!("{:?}", a.mean_flow_strength), format!("{:?}", b.mean_flow_strength)),
            ("mean_scene_cut_rate", format!("{:?}", a.mean_scene_cut_rate), format!("{:?}", b.mean_scene_cut_rate)),
            ("mean_dynamic_degree", format!("{:?}", a.mean_dynamic_degree), format!("{:?}", b.mean_dynamic_degree)),
        ];
        for (k, x, y) in rows {
            let _ = writeln!(s, "{k},{x},{y}");
        }
        s
    }
}

/// Compares the checkpoint's model against the ablated variant on the same seeds.
pub fn run_ablation(ck: &Checkpoint, mode: AblationMode, params: MetricParams) -> Result<AblationReport> {
    let (model, _) = ck.restore()?;
    let base = &ck.config;
    let (cfg, global) = mode.apply(base);
    cfg.validate()?;
    let baseline = aggregate(&sample_and_evaluate(&model, base, GlobalMode::Learned, params)?)?;
    let variant = model_with(&cfg, &model.params)?;
    let ablated = aggregate(&sample_and_evaluate(&variant, &cfg, global, params)?)?;
    Ok(AblationReport {
        mode,
        baseline,
        ablated,
    })
}

/// Shape of the configured model for a `frames`-long clip.
pub fn shape_for(cfg: &ExperimentConfig, frames: usize) -> Result<ShapeConfig> {
    let m = &cfg.model;
    let layout = cfg.layout(frames)?;
    let slices = frames / m.patch.p3;
    let stride = keyframe_stride(m.fps, m.vin.keyframe_interval)?;
    let keys = keyframe_slices(slices, m.patch.p3, stride).len() * layout.tokens_per_frame;
    Ok(ShapeConfig {
        n: layout.n as u64,
        n_s: layout.n_s as u64,
        n_local: layout.n_local as u64,
        n_global: m.vin.n_global as u64,
        n_text: m.n_text as u64,
        d: m.dit.d as u64,
        heads: m.dit.heads as u64,
        layers: m.dit.layers as u64,
        m: m.vin.blocks as u64,
        n_keys: keys as u64,
        ffn_mult: m.dit.ffn_mult as u64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileOutput {
    pub report: String,
    pub csv: String,
}

/// Cost report for the configured model at `cfg.sample_frames` and for the
/// proxy shapes, plus the proxy sweep table.
pub fn run_profile(cfg: &ExperimentConfig) -> Result<ProfileOutput> {
    let mut report = String::from("# configured model\n");
    report.push_str(&cost_report(&shape_for(cfg, cfg.sample_frames)?)?);
    for f in SWEEP_FRAMES {
        let _ = writeln!(report, "# proxy {f} frames");
        report.push_str(&cost_report(&paper_proxy(f))?);
    }
    Ok(ProfileOutput {
        report,
        csv: sweep_csv(&sweep(&SWEEP_FRAMES, paper_proxy)?),
    })
}

/// Encoder read weights per keyframe of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    /// `N_global × N_keys × 1 × heads`.
    pub all: VideoTensor,
    /// One map per keyframe slice over that keyframe's tokens.
    pub per_keyframe: Vec<VideoTensor>,
    pub keyframe_slices: Vec<usize>,
}

pub fn inspect_attention(model: &Model, v: &VideoTensor) -> Result<AttentionMaps> {
    let m = &model.config;
    if (v.height, v.width, v.channels) != (m.height, m.width, m.channels) {
        return Err(Error::shape(
            "inspect_attention",
            &[m.height, m.width, m.channels],
            &[v.height, v.width, v.channels],
        ));
    }
    let meta = model.meta(v.frames)?;
    let raw = voxelize(v, &m.patch)?.0;
    let mut g = model.graph(false);
    let r = g.input(raw)?;
    let x = model.net.embed(&mut g, r, &meta)?;
    let tokens = g.value(x).clone();
    let stride = keyframe_stride(meta.fps, model.net.vin.config.keyframe_interval)?;
    let slices = keyframe_slices(meta.grid.f, m.patch.p3, stride);
    let rows = crate::patchio::keyframe_rows(&meta.index_map, &slices);
    let keys = Tensor::from_rows(&rows.iter().map(|&r| tokens.row(r).to_vec()).collect::<Vec<_>>())?;
    let export = model.net.vin.export_attention(&model.params, &keys)?;
    let heads = export.weights.len();
    let (ng, nk) = (export.weights[0].rows(), export.weights[0].cols());
    let pack = |cols: std::ops::Range<usize>| {
        let mut vals = Vec::with_capacity(ng * cols.len() * heads);
        for q in 0..ng {
            for k in cols.clone() {
                for w in &export.weights {
                    vals.push(w.get2(q, k));
                }
            }
        }
        VideoTensor::new(ng, cols.len(), 1, heads, 1.0, vals)
    };
    let per = nk / slices.len().max(1);
    Ok(AttentionMaps {
        all: pack(0..nk)?,
        per_keyframe: (0..slices.len()).map(|j| pack(j * per..(j + 1) * per)).collect::<Result<_>>()?,
        keyframe_slices: slices,
    })
}

/// Writes `attention.vinv` and `attention_kf<slice>.vinv` into `out`.
pub fn run_inspect_attention(ck: &Checkpoint, video: &Path, out: &Path) -> Result<AttentionMaps> {
    let (model, _) = ck.restore()?;
    let maps = inspect_attention(&model, &read_video(video)?)?;
    fs::create_dir_all(out)?;
    write_video(out.join("attention.vinv"), &maps.all)?;
    for (s, m) in maps.keyframe_slices.iter().zip(&maps.per_keyframe) {
        write_video(out.join(format!("attention_kf{s:03}.vinv")), m)?;
    }
    Ok(maps)
}
