//! Global-token interface: one cross-attention read of the keyframes into a
//! fixed set of learned tokens, then self-attention processor blocks.

use rand::Rng;

use crate::dit::{mha_on_tape, Attention, Block, TimeEmbed, LN_EPS};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::patchio::{keyframe_rows, keyframe_slices, keyframe_stride};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VINConfig {
    pub n_global: usize,
    /// Processor block count.
    pub blocks: usize,
    pub heads: usize,
    pub d: usize,
    /// Keyframe interval in seconds.
    pub keyframe_interval: f64,
    pub ffn_mult: usize,
    pub steps: usize,
}

impl Default for VINConfig {
    fn default() -> Self {
        VINConfig {
            n_global: 16,
            blocks: 2,
            heads: 4,
            d: 64,
            keyframe_interval: 1.0,
            ffn_mult: 4,
            steps: 50,
        }
    }
}

impl VINConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global == 0 || self.blocks == 0 {
            return Err(Error::Config("VIN needs at least one global token and one block".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 || self.d % 2 != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.d)));
        }
        if !(self.keyframe_interval > 0.0) {
            return Err(Error::Config("keyframe interval must be positive".into()));
        }
        Ok(())
    }
}

/// Where the keyframe tokens sit inside a token sequence.
#[derive(Clone, Copy, Debug)]
pub struct KeyframeSource<'a> {
    pub index_map: &'a [[usize; 3]],
    /// Temporal slice count of the grid.
    pub slices: usize,
    pub p3: usize,
    pub fps: f64,
}

impl KeyframeSource<'_> {
    pub fn rows(&self, interval: f64) -> Result<Vec<usize>> {
        let stride = keyframe_stride(self.fps, interval)?;
        Ok(keyframe_rows(self.index_map, &keyframe_slices(self.slices, self.p3, stride)))
    }
}

#[derive(Clone, Debug)]
pub struct Vin {
    pub config: VINConfig,
    pub z_init: ParamId,
    pub q_gain: ParamId,
    pub q_bias: ParamId,
    pub kv_gain: ParamId,
    pub kv_bias: ParamId,
    pub read: Attention,
    pub time: TimeEmbed,
    pub blocks: Vec<Block>,
}

/// Encoder attention weights and the values they were computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    /// Per head, `N_global × N_keys`.
    pub weights: Vec<Tensor>,
    /// Per head projected queries (`N_global × d_head`) and keys (`N_keys × d_head`).
    pub queries: Vec<Tensor>,
    pub keys: Vec<Tensor>,
}

impl AttentionExport {
    /// Mean over heads.
    pub fn head_mean(&self) -> Tensor {
        let mut out = Tensor::zeros(self.weights[0].shape());
        for w in &self.weights {
            out.add_assign(w);
        }
        out.scale_assign(1.0 / self.weights.len() as f64);
        out
    }
}

impl Vin {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: VINConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let z_init = store.add("vin.z_init", Tensor::randn(&[config.n_global, d], 1.0, rng));
        let q_gain = store.add("vin.read.ln_q.gain", Tensor::full(&[d], 1.0));
        let q_bias = store.add("vin.read.ln_q.bias", Tensor::zeros(&[d]));
        let kv_gain = store.add("vin.read.ln_kv.gain", Tensor::full(&[d], 1.0));
        let kv_bias = store.add("vin.read.ln_kv.bias", Tensor::zeros(&[d]));
        let read = Attention::new(store, "vin.read.attn", d, false, rng);
        let time = TimeEmbed::new(store, "vin.time", d, config.steps, rng);
        let blocks = (0..config.blocks)
            .map(|m| Block::new(store, &format!("vin.block{m}"), d, config.ffn_mult, rng))
            .collect();
        Ok(Vin {
            config,
            z_init,
            q_gain,
            q_bias,
            kv_gain,
            kv_bias,
            read,
            time,
            blocks,
        })
    }

    fn read_inputs(&self, g: &mut Graph, keys: Var) -> Result<(Var, Var, Var)> {
        let s = g.tape.shape(keys).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::Contract("encoder needs at least one keyframe token".into()));
        }
        if s[1] != self.config.d {
            return Err(Error::shape("vin.encode", &s, &[s[0], self.config.d]));
        }
        let z0 = g.param(self.z_init)?;
        let (qg, qb) = (g.param(self.q_gain)?, g.param(self.q_bias)?);
        let (kg, kb) = (g.param(self.kv_gain)?, g.param(self.kv_bias)?);
        let q = g.tape.layer_norm(z0, qg, qb, LN_EPS)?;
        let kv = g.tape.layer_norm(keys, kg, kb, LN_EPS)?;
        Ok((z0, q, kv))
    }

    /// `Z = Z_init + MHA(LN(Z_init), LN(keys))`.
    pub fn encode(&self, g: &mut Graph, keys: Var) -> Result<Var> {
        let (z0, q, kv) = self.read_inputs(g, keys)?;
        let a = self.read.forward(g, q, kv, self.config.heads)?;
        g.tape.add(z0, a)
    }

    /// Processor blocks over `[z, text]`; returns the `z` rows.
    pub fn process(&self, g: &mut Graph, z: Var, text: Option<Var>) -> Result<Var> {
        let mut z = z;
        for block in &self.blocks {
            z = block.forward(g, z, text, None, self.config.heads)?;
        }
        Ok(z)
    }

    /// Keyframe rows of `x` → encode → add step embedding → process.
    pub fn forward(&self, g: &mut Graph, x: Var, src: &KeyframeSource, t: usize, text: Option<Var>) -> Result<Var> {
        let rows = src.rows(self.config.keyframe_interval)?;
        let keys = g.tape.gather_rows(x, rows)?;
        let z = self.encode(g, keys)?;
        let te = self.time.embed(g, t)?;
        let z = g.tape.add_row(z, te)?;
        self.process(g, z, text)
    }

    /// Softmax weights of the encoder read for `keys`.
    pub fn export_attention(&self, store: &ParamStore, keys: &Tensor) -> Result<AttentionExport> {
        let mut g = Graph::new(store, false);
        let kv = g.input(keys.clone())?;
        let (_, q, kv) = self.read_inputs(&mut g, kv)?;
        let w = [
            g.param(self.read.wq)?,
            g.param(self.read.wk)?,
            g.param(self.read.wv)?,
            g.param(self.read.wo)?,
        ];
        let r = mha_on_tape(&mut g.tape, q, kv, w, self.config.heads)?;
        let grab = |vs: &[Var]| vs.iter().map(|v| g.value(*v).clone()).collect::<Vec<_>>();
        Ok(AttentionExport {
            weights: grab(&r.weights),
            queries: grab(&r.queries),
            keys: grab(&r.keys),
        })
    }
}
