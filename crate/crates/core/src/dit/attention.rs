use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tape, Tensor, Var};

/// Projection weights of one multi-head attention layer (no biases).
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Attention {
    /// Fan-in scaled normal projections; `zero_out` zeroes the output projection.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, zero_out: bool, rng: &mut R) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let wq = store.add(format!("{prefix}.wq"), Tensor::randn(&[d, d], std, rng));
        let wk = store.add(format!("{prefix}.wk"), Tensor::randn(&[d, d], std, rng));
        let wv = store.add(format!("{prefix}.wv"), Tensor::randn(&[d, d], std, rng));
        let wo_init = if zero_out {
            Tensor::zeros(&[d, d])
        } else {
            Tensor::randn(&[d, d], std, rng)
        };
        let wo = store.add(format!("{prefix}.wo"), wo_init);
        Attention { wq, wk, wv, wo }
    }

    pub fn forward(&self, g: &mut Graph, q_src: Var, kv_src: Var, heads: usize) -> Result<Var> {
        Ok(self.forward_with_weights(g, q_src, kv_src, heads)?.0)
    }

    /// Output plus the per-head softmax weights.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        q_src: Var,
        kv_src: Var,
        heads: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let w = [g.param(self.wq)?, g.param(self.wk)?, g.param(self.wv)?, g.param(self.wo)?];
        mha_on_tape(&mut g.tape, q_src, kv_src, w, heads).map(|r| (r.output, r.weights))
    }
}

/// Intermediate values of one attention evaluation.
pub struct MhaVars {
    pub output: Var,
    /// Per-head softmax weights, `n_q × n_kv`.
    pub weights: Vec<Var>,
    /// Per-head projected queries and keys (before the `1/sqrt(d_head)` scale).
    pub queries: Vec<Var>,
    pub keys: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads, concatenated and projected by `wo`.
pub fn mha_on_tape(tape: &mut Tape, q_src: Var, kv_src: Var, w: [Var; 4], heads: usize) -> Result<MhaVars> {
    let (qs, ks) = (tape.shape(q_src).to_vec(), tape.shape(kv_src).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let d = qs[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(q_src, w[0])?;
    let k = tape.matmul(kv_src, w[1])?;
    let v = tape.matmul(kv_src, w[2])?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut queries = Vec::with_capacity(heads);
    let mut keys = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale)?;
        let p = tape.softmax_rows(s)?;
        outs.push(tape.matmul(p, vh)?);
        weights.push(p);
        queries.push(qh);
        keys.push(kh);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(cat, w[3])?;
    Ok(MhaVars {
        output,
        weights,
        queries,
        keys,
    })
}

/// Plain-tensor weights for [`multi_head_attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttentionWeights {
    pub fn from_store(store: &ParamStore, a: &Attention) -> Self {
        AttentionWeights {
            wq: store.get(a.wq).clone(),
            wk: store.get(a.wk).clone(),
            wv: store.get(a.wv).clone(),
            wo: store.get(a.wo).clone(),
        }
    }
}

/// Eager multi-head attention: rows of `q_src` attend over rows of `kv_src`.
pub fn multi_head_attention(q_src: &Tensor, kv_src: &Tensor, w: &AttentionWeights, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(q_src.clone())?;
    let kv = tape.constant(kv_src.clone())?;
    let ws = [
        tape.constant(w.wq.clone())?,
        tape.constant(w.wk.clone())?,
        tape.constant(w.wv.clone())?,
        tape.constant(w.wo.clone())?,
    ];
    let r = mha_on_tape(&mut tape, q, kv, ws, heads)?;
    Ok(tape.value(r.output).clone())
}
