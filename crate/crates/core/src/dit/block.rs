use rand::Rng;

use super::attention::Attention;
use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Pre-norm residual transformer block with read-only extra rows.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: Attention,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Block {
    /// Residual output projections (`attn.wo`, `w2`, `b2`) start at zero.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, ffn_mult: usize, rng: &mut R) -> Self {
        let hidden = ffn_mult * d;
        let ln1_gain = store.add(format!("{prefix}.ln1.gain"), Tensor::full(&[d], 1.0));
        let ln1_bias = store.add(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]));
        let attn = Attention::new(store, &format!("{prefix}.attn"), d, true, rng);
        let ln2_gain = store.add(format!("{prefix}.ln2.gain"), Tensor::full(&[d], 1.0));
        let ln2_bias = store.add(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d]));
        let w1 = store.add(
            format!("{prefix}.ffn.w1"),
            Tensor::randn(&[d, hidden], (1.0 / d as f64).sqrt(), rng),
        );
        let b1 = store.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[hidden]));
        let w2 = store.add(format!("{prefix}.ffn.w2"), Tensor::zeros(&[hidden, d]));
        let b2 = store.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]));
        Block {
            ln1_gain,
            ln1_bias,
            attn,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Updates the rows of `x`.
    ///
    /// `extra` rows join the attention as keys and values only; their own
    /// updates are never computed. `t_emb` (a `1×d` row) is added to the
    /// input of both residual branches, so zeroed output projections leave
    /// `x` untouched.
    pub fn forward(&self, g: &mut Graph, x: Var, extra: Option<Var>, t_emb: Option<Var>, heads: usize) -> Result<Var> {
        let n = g.tape.shape(x)[0];
        let u = match t_emb {
            Some(t) => g.tape.add_row(x, t)?,
            None => x,
        };
        let all = match extra {
            Some(e) => g.tape.concat_rows(&[u, e])?,
            None => u,
        };
        let (g1, b1) = (g.param(self.ln1_gain)?, g.param(self.ln1_bias)?);
        let h = g.tape.layer_norm(all, g1, b1, LN_EPS)?;
        let hq = if extra.is_some() { g.tape.slice_rows(h, 0, n)? } else { h };
        let a = self.attn.forward(g, hq, h, heads)?;
        let x = g.tape.add(x, a)?;

        let u = match t_emb {
            Some(t) => g.tape.add_row(x, t)?,
            None => x,
        };
        let (g2, b2) = (g.param(self.ln2_gain)?, g.param(self.ln2_bias)?);
        let h = g.tape.layer_norm(u, g2, b2, LN_EPS)?;
        let (w1, bias1, w2, bias2) = (g.param(self.w1)?, g.param(self.b1)?, g.param(self.w2)?, g.param(self.b2)?);
        let f = g.tape.matmul(h, w1)?;
        let f = g.tape.add_row(f, bias1)?;
        let f = g.tape.gelu(f)?;
        let f = g.tape.matmul(f, w2)?;
        let f = g.tape.add_row(f, bias2)?;
        g.tape.add(x, f)
    }
}
