use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

/// Sinusoidal features of step `t`: `[sin(t·ω_i) …, cos(t·ω_i) …]`, `ω_i = 10000^(−i/(dim/2))`.
pub fn sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    out
}

/// Learned projection of the sinusoidal step features to width `d`.
#[derive(Clone, Copy, Debug)]
pub struct TimeEmbed {
    pub w: ParamId,
    pub b: ParamId,
    pub steps: usize,
}

impl TimeEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, steps: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{prefix}.w"), Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng));
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[d]));
        TimeEmbed { w, b, steps }
    }

    /// `1×d` embedding of step `t ∈ 1..=T`.
    pub fn embed(&self, g: &mut Graph, t: usize) -> Result<Var> {
        if t == 0 || t > self.steps {
            return Err(Error::Contract(format!("step {t} outside 1..={}", self.steps)));
        }
        let (w, b) = (g.param(self.w)?, g.param(self.b)?);
        let d = g.tape.shape(w)[0];
        let s = g.input(Tensor::matrix(1, d, sinusoid(t, d))?)?;
        let e = g.tape.matmul(s, w)?;
        g.tape.add_row(e, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_at_zero() {
        let s = sinusoid(0, 6);
        assert_eq!(s, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn distinct_steps_differ() {
        assert_ne!(sinusoid(1, 8), sinusoid(2, 8));
    }
}
