//! Chunk denoiser: transformer blocks over `[local, chunk, global]` rows
//! with read-only text rows, plus the token-to-voxel output head.

mod attention;
mod block;
mod time;

pub use attention::{mha_on_tape, multi_head_attention, Attention, AttentionWeights, MhaVars};
pub use block::{Block, LN_EPS};
pub use time::{sinusoid, TimeEmbed};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiTConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_text: usize,
    /// Diffusion step count covered by the time embedding.
    pub steps: usize,
    pub ffn_mult: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            layers: 4,
            d: 64,
            heads: 4,
            d_text: 64,
            steps: 50,
            ffn_mult: 4,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.d)));
        }
        if self.d % 2 != 0 {
            return Err(Error::Config("width must be even for the time embedding".into()));
        }
        if self.layers == 0 || self.steps == 0 || self.ffn_mult == 0 || self.d_text == 0 {
            return Err(Error::Config("layers, steps, ffn_mult and d_text must be positive".into()));
        }
        Ok(())
    }
}

/// Text rows and the step embedding shared by every block of one denoise call.
#[derive(Clone, Copy, Debug)]
pub struct ConditioningBundle {
    /// `n_text×d`; `None` when there are no text tokens.
    pub text: Option<Var>,
    /// `1×d`.
    pub t_emb: Var,
}

#[derive(Clone, Debug)]
pub struct DiT {
    pub config: DiTConfig,
    pub time: TimeEmbed,
    pub blocks: Vec<Block>,
}

impl DiT {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let time = TimeEmbed::new(store, "dit.time", config.d, config.steps, rng);
        let blocks = (0..config.layers)
            .map(|l| Block::new(store, &format!("dit.block{l}"), config.d, config.ffn_mult, rng))
            .collect();
        Ok(DiT { config, time, blocks })
    }

    pub fn conditioning(&self, g: &mut Graph, t: usize, text: Option<Var>) -> Result<ConditioningBundle> {
        Ok(ConditioningBundle {
            text,
            t_emb: self.time.embed(g, t)?,
        })
    }

    /// Runs every block over `[x_local, x_chunk, z]` and returns the
    /// `N_local + N_s` video rows; global rows are dropped.
    pub fn denoise_chunk(
        &self,
        g: &mut Graph,
        x_chunk: Var,
        x_local: Option<Var>,
        z: Option<Var>,
        cond: &ConditioningBundle,
    ) -> Result<Var> {
        let d = self.config.d;
        let mut parts = Vec::with_capacity(3);
        for v in [x_local, Some(x_chunk), z].into_iter().flatten() {
            let s = g.tape.shape(v);
            if s.len() != 2 || s[1] != d {
                return Err(Error::shape("denoise_chunk", s, &[s.first().copied().unwrap_or(0), d]));
            }
            parts.push(v);
        }
        let video_rows = g.tape.shape(x_chunk)[0] + x_local.map_or(0, |v| g.tape.shape(v)[0]);
        let mut x = if parts.len() == 1 { parts[0] } else { g.tape.concat_rows(&parts)? };
        for block in &self.blocks {
            x = block.forward(g, x, cond.text, Some(cond.t_emb), self.config.heads)?;
        }
        if z.is_some() {
            x = g.tape.slice_rows(x, 0, video_rows)?;
        }
        Ok(x)
    }
}

/// `H_θ`: final layer norm and projection from width `d` to voxel values.
#[derive(Clone, Copy, Debug)]
pub struct NoiseHead {
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub proj: ParamId,
    pub bias: ParamId,
}

impl NoiseHead {
    /// The projection starts at zero, so an untrained model predicts zero noise.
    pub fn new(store: &mut ParamStore, d: usize, voxel_len: usize) -> Self {
        NoiseHead {
            ln_gain: store.add("head.ln.gain", Tensor::full(&[d], 1.0)),
            ln_bias: store.add("head.ln.bias", Tensor::zeros(&[d])),
            proj: store.add("head.proj", Tensor::zeros(&[d, voxel_len])),
            bias: store.add("head.bias", Tensor::zeros(&[voxel_len])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.ln_gain)?, g.param(self.ln_bias)?);
        let h = g.tape.layer_norm(x, gain, bias, LN_EPS)?;
        let (p, b) = (g.param(self.proj)?, g.param(self.bias)?);
        let y = g.tape.matmul(h, p)?;
        g.tape.add_row(y, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(layers: usize, d: usize) -> (ParamStore, DiT) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = DiTConfig {
            layers,
            d,
            heads: 2,
            d_text: d,
            steps: 10,
            ffn_mult: 2,
        };
        let dit = DiT::new(&mut store, cfg, &mut rng).unwrap();
        (store, dit)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.values_mut() {
            for v in t.data_mut() {
                *v += 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    }

    #[test]
    fn zero_residual_projections_give_identity() {
        let (store, dit) = setup(3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store, false);
        let x = g.input(Tensor::randn(&[5, 8], 1.0, &mut rng)).unwrap();
        let text = g.input(Tensor::randn(&[2, 8], 1.0, &mut rng)).unwrap();
        let cond = dit.conditioning(&mut g, 3, Some(text)).unwrap();
        let y = dit.denoise_chunk(&mut g, x, None, None, &cond).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn output_rows_cover_local_and_chunk() {
        let (mut store, dit) = setup(1, 8);
        randomize(&mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n_local in [0usize, 8, 12] {
            let mut g = Graph::new(&store, false);
            let xc = g.input(Tensor::randn(&[20, 8], 1.0, &mut rng)).unwrap();
            let xl = if n_local > 0 {
                Some(g.input(Tensor::randn(&[n_local, 8], 1.0, &mut rng)).unwrap())
            } else {
                None
            };
            let z = g.input(Tensor::randn(&[4, 8], 1.0, &mut rng)).unwrap();
            let cond = dit.conditioning(&mut g, 1, None).unwrap();
            let y = dit.denoise_chunk(&mut g, xc, xl, Some(z), &cond).unwrap();
            assert_eq!(g.value(y).shape(), &[n_local + 20, 8]);
        }
    }

    #[test]
    fn text_permutation_leaves_output_unchanged() {
        let (mut store, dit) = setup(2, 8);
        randomize(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let text = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let perm = Tensor::from_rows(&[text.row(2).to_vec(), text.row(0).to_vec(), text.row(1).to_vec()]).unwrap();
        let run = |txt: &Tensor| {
            let mut g = Graph::new(&store, false);
            let xv = g.input(x.clone()).unwrap();
            let tv = g.input(txt.clone()).unwrap();
            let cond = dit.conditioning(&mut g, 2, Some(tv)).unwrap();
            let y = dit.denoise_chunk(&mut g, xv, None, None, &cond).unwrap();
            g.value(y).clone()
        };
        assert!(run(&text).max_abs_diff(&run(&perm)) < 1e-12);
    }

    #[test]
    fn local_context_behind_stop_gradient_gets_zero_gradient() {
        let (mut store, dit) = setup(2, 8);
        randomize(&mut store, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new(&store, true);
        let xc = g.tape.leaf(Tensor::randn(&[4, 8], 1.0, &mut rng), true).unwrap();
        let xl_raw = g.tape.leaf(Tensor::randn(&[2, 8], 1.0, &mut rng), true).unwrap();
        let xl = g.tape.stop_gradient(xl_raw).unwrap();
        let cond = dit.conditioning(&mut g, 1, None).unwrap();
        let y = dit.denoise_chunk(&mut g, xc, Some(xl), None, &cond).unwrap();
        let loss = g.tape.mean_square(y).unwrap();
        let grads = g.tape.backward(loss).unwrap();
        let gl = grads.wrt(xl_raw, &g.tape).unwrap();
        assert!(gl.data().iter().all(|v| v.to_bits() == 0));
        assert!(grads.wrt(xc, &g.tape).unwrap().data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn z_width_mismatch_is_shape_error() {
        let (store, dit) = setup(1, 8);
        let mut g = Graph::new(&store, false);
        let xc = g.input(Tensor::zeros(&[2, 8])).unwrap();
        let z = g.input(Tensor::zeros(&[2, 6])).unwrap();
        let cond = dit.conditioning(&mut g, 1, None).unwrap();
        assert!(matches!(
            dit.denoise_chunk(&mut g, xc, None, Some(z), &cond),
            Err(Error::Shape { .. })
        ));
    }
}
