use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::diffusion::{build_schedule, make_chunk_layout, ChunkLayout, FusionConfig, FusionMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numcore::AdamConfig;
use crate::par::Execution;
use crate::patchio::{DatasetSpec, Direction, PatchSpec};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub chunk_frames: usize,
    pub local_frames: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub fusion_mode: FusionMode,
    pub t_alpha: usize,
    pub t_beta: usize,
    pub data: DatasetSpec,
    pub adam: AdamConfig,
    pub batch: usize,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub sample_frames: usize,
    pub sample_class: usize,
    pub ar_context: usize,
    pub ar_step: usize,
    pub eval_clips: usize,
    pub seed: u64,
    pub exec: Execution,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig {
            patch: PatchSpec { p1: 4, p2: 4, p3: 1, d: 64 },
            ..ModelConfig::default()
        };
        ExperimentConfig {
            model,
            chunk_frames: 10,
            local_frames: 4,
            beta_start: 0.002,
            beta_end: 0.2,
            fusion_mode: FusionMode::Early,
            t_alpha: 20,
            t_beta: 15,
            data: DatasetSpec::default(),
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            batch: 1,
            train_steps: 2000,
            checkpoint_every: 500,
            sample_frames: 40,
            sample_class: 0,
            ar_context: 4,
            ar_step: 6,
            eval_clips: 10,
            seed: 0,
            exec: Execution::Parallel,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn exec_name(e: Execution) -> &'static str {
    match e {
        Execution::Sequential => "sequential",
        Execution::Parallel => "parallel",
    }
}

/// Every key in file order.
pub const CONFIG_KEYS: [&str; 52] = [
    "model.height",
    "model.width",
    "model.channels",
    "model.fps",
    "model.max_frames",
    "model.n_classes",
    "model.n_text",
    "patch.p1",
    "patch.p2",
    "patch.p3",
    "dit.layers",
    "dit.d",
    "dit.heads",
    "dit.d_text",
    "dit.ffn_mult",
    "vin.n_global",
    "vin.blocks",
    "vin.heads",
    "vin.keyframe_interval",
    "vin.ffn_mult",
    "layout.chunk_frames",
    "layout.local_frames",
    "schedule.steps",
    "schedule.beta_start",
    "schedule.beta_end",
    "fusion.mode",
    "fusion.t_alpha",
    "fusion.t_beta",
    "data.clips",
    "data.frames",
    "data.height",
    "data.width",
    "data.directions",
    "data.speeds",
    "data.palette",
    "data.max_shapes",
    "data.seed",
    "optim.lr",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "train.batch",
    "train.steps",
    "train.checkpoint_every",
    "sample.frames",
    "sample.class",
    "sample.ar_context",
    "sample.ar_step",
    "eval.clips",
    "run.seed",
    "run.exec",
    "run.out_dir",
];

impl ExperimentConfig {
    fn values(&self) -> Vec<String> {
        let m = &self.model;
        vec![
            m.height.to_string(),
            m.width.to_string(),
            m.channels.to_string(),
            fmt_f(m.fps),
            m.max_frames.to_string(),
            m.n_classes.to_string(),
            m.n_text.to_string(),
            m.patch.p1.to_string(),
            m.patch.p2.to_string(),
            m.patch.p3.to_string(),
            m.dit.layers.to_string(),
            m.dit.d.to_string(),
            m.dit.heads.to_string(),
            m.dit.d_text.to_string(),
            m.dit.ffn_mult.to_string(),
            m.vin.n_global.to_string(),
            m.vin.blocks.to_string(),
            m.vin.heads.to_string(),
            fmt_f(m.vin.keyframe_interval),
            m.vin.ffn_mult.to_string(),
            self.chunk_frames.to_string(),
            self.local_frames.to_string(),
            m.dit.steps.to_string(),
            fmt_f(self.beta_start),
            fmt_f(self.beta_end),
            self.fusion_mode.name().to_string(),
            self.t_alpha.to_string(),
            self.t_beta.to_string(),
            self.data.clips.to_string(),
            self.data.frames.to_string(),
            self.data.height.to_string(),
            self.data.width.to_string(),
            self.data.directions.iter().map(|d| d.name()).collect::<Vec<_>>().join(","),
            join(&self.data.speeds),
            self.data.palette.iter().map(|&p| fmt_f(p)).collect::<Vec<_>>().join(","),
            self.data.max_shapes.to_string(),
            self.data.seed.to_string(),
            fmt_f(self.adam.lr),
            fmt_f(self.adam.beta1),
            fmt_f(self.adam.beta2),
            fmt_f(self.adam.eps),
            self.batch.to_string(),
            self.train_steps.to_string(),
            self.checkpoint_every.to_string(),
            self.sample_frames.to_string(),
            self.sample_class.to_string(),
            self.ar_context.to_string(),
            self.ar_step.to_string(),
            self.eval_clips.to_string(),
            self.seed.to_string(),
            exec_name(self.exec).to_string(),
            self.out_dir.display().to_string(),
        ]
    }

    /// Flat `section.key = value` text, one key per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses text written by [`ExperimentConfig::to_text`]. Missing keys keep
    /// their defaults; `#` starts a comment line. Unknown keys and
    /// unparsable values are reported together.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut map = BTreeMap::new();
        let mut bad = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if CONFIG_KEYS.contains(&k.trim()) => {
                    map.insert(k.trim().to_string(), v.trim().to_string());
                }
                Some((k, _)) => bad.push(k.trim().to_string()),
                None => bad.push(line.to_string()),
            }
        }
        let mut c = ExperimentConfig::default();
        for (k, v) in &map {
            if c.set(k, v).is_err() {
                bad.push(k.clone());
            }
        }
        if !bad.is_empty() {
            return Err(Error::ConfigKeys {
                keys: bad,
                message: "unknown keys or unparsable values".into(),
            });
        }
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
        let c = Self::parse(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), ()> {
        fn p<T: std::str::FromStr>(v: &str) -> std::result::Result<T, ()> {
            v.parse().map_err(|_| ())
        }
        fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, ()> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',').map(|x| p(x.trim())).collect()
        }
        let m = &mut self.model;
        match key {
            "model.height" => m.height = p(v)?,
            "model.width" => m.width = p(v)?,
            "model.channels" => m.channels = p(v)?,
            "model.fps" => m.fps = p(v)?,
            "model.max_frames" => m.max_frames = p(v)?,
            "model.n_classes" => m.n_classes = p(v)?,
            "model.n_text" => m.n_text = p(v)?,
            "patch.p1" => m.patch.p1 = p(v)?,
            "patch.p2" => m.patch.p2 = p(v)?,
            "patch.p3" => m.patch.p3 = p(v)?,
            "dit.layers" => m.dit.layers = p(v)?,
            "dit.d" => {
                m.dit.d = p(v)?;
                m.patch.d = m.dit.d;
                m.vin.d = m.dit.d;
            }
            "dit.heads" => m.dit.heads = p(v)?,
            "dit.d_text" => m.dit.d_text = p(v)?,
            "dit.ffn_mult" => m.dit.ffn_mult = p(v)?,
            "vin.n_global" => m.vin.n_global = p(v)?,
            "vin.blocks" => m.vin.blocks = p(v)?,
            "vin.heads" => m.vin.heads = p(v)?,
            "vin.keyframe_interval" => m.vin.keyframe_interval = p(v)?,
            "vin.ffn_mult" => m.vin.ffn_mult = p(v)?,
            "layout.chunk_frames" => self.chunk_frames = p(v)?,
            "layout.local_frames" => self.local_frames = p(v)?,
            "schedule.steps" => {
                m.dit.steps = p(v)?;
                m.vin.steps = m.dit.steps;
            }
            "schedule.beta_start" => self.beta_start = p(v)?,
            "schedule.beta_end" => self.beta_end = p(v)?,
            "fusion.mode" => self.fusion_mode = FusionMode::parse(v).ok_or(())?,
            "fusion.t_alpha" => self.t_alpha = p(v)?,
            "fusion.t_beta" => self.t_beta = p(v)?,
            "data.clips" => self.data.clips = p(v)?,
            "data.frames" => self.data.frames = p(v)?,
            "data.height" => self.data.height = p(v)?,
            "data.width" => self.data.width = p(v)?,
            "data.directions" => {
                self.data.directions = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| Direction::parse(s.trim()).ok_or(()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "data.speeds" => self.data.speeds = list(v)?,
            "data.palette" => self.data.palette = list(v)?,
            "data.max_shapes" => self.data.max_shapes = p(v)?,
            "data.seed" => self.data.seed = p(v)?,
            "optim.lr" => self.adam.lr = p(v)?,
            "optim.beta1" => self.adam.beta1 = p(v)?,
            "optim.beta2" => self.adam.beta2 = p(v)?,
            "optim.eps" => self.adam.eps = p(v)?,
            "train.batch" => self.batch = p(v)?,
            "train.steps" => self.train_steps = p(v)?,
            "train.checkpoint_every" => self.checkpoint_every = p(v)?,
            "sample.frames" => self.sample_frames = p(v)?,
            "sample.class" => self.sample_class = p(v)?,
            "sample.ar_context" => self.ar_context = p(v)?,
            "sample.ar_step" => self.ar_step = p(v)?,
            "eval.clips" => self.eval_clips = p(v)?,
            "run.seed" => self.seed = p(v)?,
            "run.exec" => {
                self.exec = match v {
                    "sequential" => Execution::Sequential,
                    "parallel" => Execution::Parallel,
                    _ => return Err(()),
                }
            }
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(()),
        }
        Ok(())
    }

    /// Checks every key and reports all offenders at once.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let mut bad: Vec<&str> = Vec::new();
        let mut need = |ok: bool, keys: &[&'static str]| {
            if !ok {
                bad.extend_from_slice(keys);
            }
        };
        for (k, v) in [
            ("model.height", m.height),
            ("model.width", m.width),
            ("model.channels", m.channels),
            ("model.max_frames", m.max_frames),
            ("model.n_classes", m.n_classes),
            ("patch.p1", m.patch.p1),
            ("patch.p2", m.patch.p2),
            ("patch.p3", m.patch.p3),
            ("dit.layers", m.dit.layers),
            ("dit.d", m.dit.d),
            ("dit.heads", m.dit.heads),
            ("dit.d_text", m.dit.d_text),
            ("dit.ffn_mult", m.dit.ffn_mult),
            ("vin.n_global", m.vin.n_global),
            ("vin.heads", m.vin.heads),
            ("vin.ffn_mult", m.vin.ffn_mult),
            ("layout.chunk_frames", self.chunk_frames),
            ("data.clips", self.data.clips),
            ("data.frames", self.data.frames),
            ("data.max_shapes", self.data.max_shapes),
            ("train.batch", self.batch),
            ("sample.frames", self.sample_frames),
            ("sample.ar_step", self.ar_step),
            ("eval.clips", self.eval_clips),
        ] {
            need(v > 0, &[k]);
        }
        need(m.fps > 0.0, &["model.fps"]);
        need(m.vin.keyframe_interval > 0.0, &["vin.keyframe_interval"]);
        need(m.dit.steps >= 2, &["schedule.steps"]);
        need(
            0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0,
            &["schedule.beta_start", "schedule.beta_end"],
        );
        let p = m.patch;
        need(p.p1 > 0 && m.height % p.p1 == 0, &["model.height", "patch.p1"]);
        need(p.p2 > 0 && m.width % p.p2 == 0, &["model.width", "patch.p2"]);
        need(m.dit.heads > 0 && m.dit.d % m.dit.heads == 0, &["dit.heads"]);
        need(m.vin.heads > 0 && m.dit.d % m.vin.heads == 0, &["vin.heads"]);
        need(
            p.p3 > 0 && self.chunk_frames % p.p3 == 0 && self.local_frames % p.p3 == 0,
            &["layout.chunk_frames", "layout.local_frames"],
        );
        need(self.local_frames <= self.chunk_frames, &["layout.local_frames"]);
        need(self.t_alpha < m.dit.steps, &["fusion.t_alpha"]);
        need(
            self.fusion_mode != FusionMode::Mid || self.t_beta < self.t_alpha,
            &["fusion.t_beta"],
        );
        need(
            self.data.height == m.height && self.data.width == m.width,
            &["data.height", "data.width"],
        );
        need(
            p.p3 > 0 && self.data.frames % p.p3 == 0 && self.data.frames <= m.max_frames,
            &["data.frames"],
        );
        need(!self.data.directions.is_empty(), &["data.directions"]);
        need(
            !self.data.speeds.is_empty() && self.data.speeds.iter().all(|&s| s > 0),
            &["data.speeds"],
        );
        need(
            !self.data.palette.is_empty() && self.data.palette.iter().all(|&c| c > -1.0 && c <= 1.0),
            &["data.palette"],
        );
        need(self.data.num_classes() <= m.n_classes, &["model.n_classes"]);
        need(self.sample_class < m.n_classes, &["sample.class"]);
        need(
            p.p3 > 0 && self.sample_frames % p.p3 == 0 && self.sample_frames <= m.max_frames,
            &["sample.frames"],
        );
        need(
            p.p3 > 0
                && self.ar_context % p.p3 == 0
                && self.ar_step % p.p3 == 0
                && self.ar_context + self.ar_step <= m.max_frames,
            &["sample.ar_context", "sample.ar_step"],
        );
        need(
            self.adam.lr > 0.0
                && (0.0..1.0).contains(&self.adam.beta1)
                && (0.0..1.0).contains(&self.adam.beta2)
                && self.adam.eps > 0.0,
            &["optim.lr", "optim.beta1", "optim.beta2", "optim.eps"],
        );
        if !bad.is_empty() {
            let mut keys: Vec<String> = Vec::new();
            for k in bad {
                if !keys.iter().any(|x| x == k) {
                    keys.push(k.to_string());
                }
            }
            return Err(Error::ConfigKeys {
                keys,
                message: "values out of range or inconsistent".into(),
            });
        }
        self.model.validate()?;
        self.data.validate()
    }

    /// SHA-256 of the serialized config.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.model.dit.steps, self.beta_start, self.beta_end)
    }

    pub fn layout(&self, frames: usize) -> Result<ChunkLayout> {
        layout_for(&self.model, frames, self.chunk_frames, self.local_frames)
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            mode: self.fusion_mode,
            t_alpha: self.t_alpha,
            t_beta: self.t_beta,
            local_tokens: self.local_frames / self.model.patch.p3 * self.model.tokens_per_frame_slice(),
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            channels: self.model.channels,
            fps: self.model.fps,
            ..self.data.clone()
        }
    }
}

/// Frame-aligned chunk layout over a `frames`-long clip.
pub fn layout_for(m: &ModelConfig, frames: usize, chunk_frames: usize, local_frames: usize) -> Result<ChunkLayout> {
    let p3 = m.patch.p3;
    if frames == 0 || frames % p3 != 0 || chunk_frames % p3 != 0 || local_frames % p3 != 0 {
        return Err(Error::Config(format!(
            "frames {frames}, chunk {chunk_frames} and local {local_frames} must be positive multiples of p3={p3}"
        )));
    }
    if frames > m.max_frames {
        return Err(Error::Config(format!(
            "{frames} frames exceed the model's {} frame range",
            m.max_frames
        )));
    }
    let tpf = m.tokens_per_frame_slice();
    make_chunk_layout(frames / p3 * tpf, chunk_frames / p3 * tpf, local_frames / p3 * tpf, tpf)
}
