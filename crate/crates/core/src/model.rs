//! Assembly of patch embedding, class text table, VIN and DiT into one
//! noise predictor over voxel-space tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dit::{ConditioningBundle, DiT, DiTConfig, NoiseHead};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::patchio::{Grid, PatchEmbed, PatchSpec};
use crate::vin::{KeyframeSource, VINConfig, Vin};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchSpec,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Longest clip (in frames) the temporal positional table covers.
    pub max_frames: usize,
    pub fps: f64,
    pub dit: DiTConfig,
    pub vin: VINConfig,
    pub n_classes: usize,
    /// Text tokens per class.
    pub n_text: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: PatchSpec::default(),
            height: 16,
            width: 16,
            channels: 1,
            max_frames: 128,
            fps: 16.0,
            dit: DiTConfig::default(),
            vin: VINConfig::default(),
            n_classes: 8,
            n_text: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.dit.validate()?;
        self.vin.validate()?;
        if self.patch.d != self.dit.d || self.vin.d != self.dit.d {
            return Err(Error::Config(format!(
                "widths disagree: patch {}, dit {}, vin {}",
                self.patch.d, self.dit.d, self.vin.d
            )));
        }
        if self.vin.steps != self.dit.steps {
            return Err(Error::Config("VIN and DiT step counts disagree".into()));
        }
        self.patch.grid(self.height, self.width, self.max_frames)?;
        if self.channels == 0 || self.n_classes == 0 || !(self.fps > 0.0) {
            return Err(Error::Config("channels, classes and fps must be positive".into()));
        }
        Ok(())
    }

    pub fn voxel_len(&self) -> usize {
        self.patch.voxel_len(self.channels)
    }

    pub fn grid(&self, frames: usize) -> Result<Grid> {
        self.patch.grid(self.height, self.width, frames)
    }

    pub fn tokens_per_frame_slice(&self) -> usize {
        (self.height / self.patch.p1) * (self.width / self.patch.p2)
    }
}

/// Parameter handles of the full network.
#[derive(Clone, Debug)]
pub struct Network {
    pub patch: PatchEmbed,
    pub text_table: ParamId,
    pub text_proj: ParamId,
    pub vin: Vin,
    pub dit: DiT,
    pub head: NoiseHead,
}

/// How the global tokens reach the chunk denoiser.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalMode {
    #[default]
    Learned,
    /// Replaced by zero rows of the same shape.
    Zeroed,
}

/// Token positions of a sequence: grid coordinates and timing.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMeta {
    pub index_map: Vec<[usize; 3]>,
    pub grid: Grid,
    pub fps: f64,
}

impl TokenMeta {
    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub net: Network,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let max_grid = config.grid(config.max_frames)?;
        let patch = PatchEmbed::new(&mut params, config.patch, config.channels, max_grid, &mut rng);
        let d_text = config.dit.d_text;
        let text_table = params.add(
            "text.table",
            Tensor::randn(&[config.n_classes * config.n_text.max(1), d_text], 1.0, &mut rng),
        );
        let text_proj = params.add(
            "text.proj",
            Tensor::randn(&[d_text, config.dit.d], (1.0 / d_text as f64).sqrt(), &mut rng),
        );
        let vin = Vin::new(&mut params, config.vin, &mut rng)?;
        let dit = DiT::new(&mut params, config.dit, &mut rng)?;
        let head = NoiseHead::new(&mut params, config.dit.d, config.voxel_len());
        Ok(Model {
            config,
            params,
            net: Network {
                patch,
                text_table,
                text_proj,
                vin,
                dit,
                head,
            },
        })
    }

    pub fn meta(&self, frames: usize) -> Result<TokenMeta> {
        let grid = self.config.grid(frames)?;
        Ok(TokenMeta {
            index_map: grid.index_map(),
            grid,
            fps: self.config.fps,
        })
    }

    pub fn graph(&self, trainable: bool) -> Graph<'_> {
        Graph::new(&self.params, trainable)
    }
}

impl Network {
    /// `G_θ` applied to raw voxel rows.
    pub fn embed(&self, g: &mut Graph, raw: Var, meta: &TokenMeta) -> Result<Var> {
        self.patch.embed(g, raw, &meta.index_map, 0)
    }

    /// `n_text×d` class tokens, or `None` without text tokens.
    pub fn text(&self, g: &mut Graph, config: &ModelConfig, class: usize) -> Result<Option<Var>> {
        if config.n_text == 0 {
            return Ok(None);
        }
        if class >= config.n_classes {
            return Err(Error::Contract(format!("class {class} outside 0..{}", config.n_classes)));
        }
        let table = g.param(self.text_table)?;
        let rows = (class * config.n_text..(class + 1) * config.n_text).collect();
        let raw = g.tape.gather_rows(table, rows)?;
        let proj = g.param(self.text_proj)?;
        Ok(Some(g.tape.matmul(raw, proj)?))
    }

    pub fn globals(
        &self,
        g: &mut Graph,
        config: &ModelConfig,
        x: Var,
        meta: &TokenMeta,
        t: usize,
        text: Option<Var>,
        mode: GlobalMode,
    ) -> Result<Var> {
        match mode {
            GlobalMode::Learned => {
                let src = KeyframeSource {
                    index_map: &meta.index_map,
                    slices: meta.grid.f,
                    p3: config.patch.p3,
                    fps: meta.fps,
                };
                self.vin.forward(g, x, &src, t, text)
            }
            GlobalMode::Zeroed => g.input(Tensor::zeros(&[config.vin.n_global, config.dit.d])),
        }
    }

    pub fn conditioning(&self, g: &mut Graph, t: usize, text: Option<Var>) -> Result<ConditioningBundle> {
        self.dit.conditioning(g, t, text)
    }

    /// Voxel-space noise for the `N_local + N_s` rows of one chunk.
    pub fn predict(
        &self,
        g: &mut Graph,
        x_chunk: Var,
        x_local: Option<Var>,
        z: Option<Var>,
        cond: &ConditioningBundle,
    ) -> Result<Var> {
        let h = self.dit.denoise_chunk(g, x_chunk, x_local, z, cond)?;
        self.head.forward(g, h)
    }
}

/// Shared values computed once per diffusion step: embedded tokens, text and
/// global tokens.
pub struct StepContext {
    pub tokens: Tensor,
    pub text: Option<Tensor>,
    pub globals: Tensor,
}

impl Model {
    /// Embeds `raw` (`N×V`) and computes text and global tokens at step `t` without gradients.
    pub fn step_context(&self, raw: &Tensor, meta: &TokenMeta, t: usize, class: usize, mode: GlobalMode) -> Result<StepContext> {
        let mut g = self.graph(false);
        let r = g.input(raw.clone())?;
        let x = self.net.embed(&mut g, r, meta)?;
        let text = self.net.text(&mut g, &self.config, class)?;
        let z = self.net.globals(&mut g, &self.config, x, meta, t, text, mode)?;
        Ok(StepContext {
            tokens: g.value(x).clone(),
            text: text.map(|v| g.value(v).clone()),
            globals: g.value(z).clone(),
        })
    }

    /// Noise for token rows `[local_start, end)` given a step context, without gradients.
    pub fn predict_rows(
        &self,
        ctx: &StepContext,
        local: std::ops::Range<usize>,
        chunk: std::ops::Range<usize>,
        t: usize,
    ) -> Result<Tensor> {
        let mut g = self.graph(false);
        let xc = g.input(ctx.tokens.slice_rows(chunk.start, chunk.end))?;
        let xl = if local.is_empty() {
            None
        } else {
            Some(g.input(ctx.tokens.slice_rows(local.start, local.end))?)
        };
        let z = g.input(ctx.globals.clone())?;
        let text = match &ctx.text {
            Some(t) => Some(g.input(t.clone())?),
            None => None,
        };
        let cond = self.net.conditioning(&mut g, t, text)?;
        let y = self.net.predict(&mut g, xc, xl, Some(z), &cond)?;
        Ok(g.value(y).clone())
    }
}
