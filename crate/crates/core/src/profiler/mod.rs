//! Analytic FLOP counts for full-sequence attention versus chunked
//! generation with a global-token interface.
//!
//! Every multiply-accumulate costs 2 FLOPs. Softmax, normalization and
//! elementwise work are not counted. All counts are exact integers.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Token counts and widths for costing one denoiser evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeConfig {
    pub n: u64,
    pub n_s: u64,
    pub n_local: u64,
    pub n_global: u64,
    pub n_text: u64,
    pub d: u64,
    pub heads: u64,
    pub layers: u64,
    pub m: u64,
    pub n_keys: u64,
    pub ffn_mult: u64,
}

impl ShapeConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (k, v) in [
            ("n", self.n),
            ("n_s", self.n_s),
            ("d", self.d),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_mult", self.ffn_mult),
        ] {
            if v == 0 {
                bad.push(k.to_string());
            }
        }
        if self.n_s > self.n {
            bad.push("n_s".into());
        }
        if self.n_local > self.n_s {
            bad.push("n_local".into());
        }
        if self.n_global > 0 && self.n_keys == 0 {
            bad.push("n_keys".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.dedup();
            Err(Error::ConfigKeys {
                keys: bad,
                message: "shape config needs positive sizes with n_local ≤ n_s ≤ n".into(),
            })
        }
    }

    /// Config for which chunked cost collapses to full cost.
    pub fn degenerate(&self) -> ShapeConfig {
        ShapeConfig {
            n_s: self.n,
            n_local: 0,
            n_global: 0,
            m: 0,
            ..*self
        }
    }

    pub fn chunks(&self) -> u64 {
        self.n.div_ceil(self.n_s)
    }
}

/// FLOPs split by where they are spent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostBreakdown {
    pub qkv: u128,
    pub scores: u128,
    pub values: u128,
    pub output: u128,
    pub ffn: u128,
    pub vin_encode: u128,
    pub vin_process: u128,
}

impl CostBreakdown {
    pub const CATEGORIES: [&'static str; 7] = [
        "qkv_projection",
        "attention_scores",
        "attention_values",
        "output_projection",
        "feed_forward",
        "vin_encode",
        "vin_process",
    ];

    pub fn categories(&self) -> [u128; 7] {
        [
            self.qkv,
            self.scores,
            self.values,
            self.output,
            self.ffn,
            self.vin_encode,
            self.vin_process,
        ]
    }

    pub fn total(&self) -> u128 {
        self.categories().iter().sum()
    }

    fn add(&mut self, o: &CostBreakdown) {
        self.qkv += o.qkv;
        self.scores += o.scores;
        self.values += o.values;
        self.output += o.output;
        self.ffn += o.ffn;
        self.vin_encode += o.vin_encode;
        self.vin_process += o.vin_process;
    }

    fn scaled(mut self, k: u128) -> Self {
        for c in [
            &mut self.qkv,
            &mut self.scores,
            &mut self.values,
            &mut self.output,
            &mut self.ffn,
            &mut self.vin_encode,
            &mut self.vin_process,
        ] {
            *c *= k;
        }
        self
    }

    pub fn to_text(&self, prefix: &str) -> String {
        let mut s = String::new();
        for (k, v) in Self::CATEGORIES.iter().zip(self.categories()) {
            let _ = writeln!(s, "{prefix}.{k} = {v}");
        }
        let _ = writeln!(s, "{prefix}.total = {}", self.total());
        s
    }
}

/// Score and value products for `n_q` queries against `n_kv` keys.
pub fn attention_flops(n_q: u64, n_kv: u64, d: u64) -> u128 {
    4 * n_q as u128 * n_kv as u128 * d as u128
}

/// One transformer block of self-attention plus feed-forward over `n` tokens.
fn block_cost(n: u64, d: u64, ffn_mult: u64) -> CostBreakdown {
    let (n, d128) = (n as u128, d as u128);
    let half = attention_flops(n as u64, n as u64, d) / 2;
    CostBreakdown {
        qkv: 6 * n * d128 * d128,
        scores: half,
        values: half,
        output: 2 * n * d128 * d128,
        ffn: 4 * n * d128 * (ffn_mult as u128 * d128),
        ..Default::default()
    }
}

/// L blocks of self-attention over every video and text token.
pub fn full_flops(cfg: &ShapeConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    Ok(block_cost(cfg.n + cfg.n_text, cfg.d, cfg.ffn_mult).scaled(cfg.layers as u128))
}

/// Interface read and processor cost. Query and output projections of the
/// read go to their shared categories; key/value projection and attention
/// go to `vin_encode`.
pub fn vin_interface_flops(cfg: &ShapeConfig) -> CostBreakdown {
    let mut c = CostBreakdown::default();
    if cfg.n_global == 0 {
        return c;
    }
    let (g, k, d) = (cfg.n_global as u128, cfg.n_keys as u128, cfg.d as u128);
    c.qkv = 2 * g * d * d;
    c.output = 2 * g * d * d;
    c.vin_encode = 4 * k * d * d + attention_flops(cfg.n_global, cfg.n_keys, cfg.d);
    c.vin_process = block_cost(cfg.n_global + cfg.n_text, cfg.d, cfg.ffn_mult)
        .total()
        .checked_mul(cfg.m as u128)
        .unwrap_or(u128::MAX);
    c
}

/// Chunked cost: every chunk attends over its local context, its own tokens,
/// the global tokens and the text. The first chunk has no predecessor and the
/// last chunk may be short.
pub fn vin_flops(cfg: &ShapeConfig) -> Result<CostBreakdown> {
    cfg.validate()?;
    let mut total = vin_interface_flops(cfg);
    let mut start = 0;
    while start < cfg.n {
        let len = cfg.n_s.min(cfg.n - start);
        let local = if start == 0 { 0 } else { cfg.n_local };
        let n = local + len + cfg.n_global + cfg.n_text;
        total.add(&block_cost(n, cfg.d, cfg.ffn_mult).scaled(cfg.layers as u128));
        start += len;
    }
    Ok(total)
}

/// Fraction of full cost saved by chunked generation.
pub fn savings(cfg: &ShapeConfig) -> Result<f64> {
    let full = full_flops(cfg)?.total();
    let vin = vin_flops(cfg)?.total();
    Ok(1.0 - vin as f64 / full as f64)
}

/// Frame counts of the efficiency sweep.
pub const SWEEP_FRAMES: [u64; 4] = [64, 128, 256, 512];

/// Proxy for a large latent video model: frames are compressed 16:5 in time
/// into latents of 240 tokens each, chunks are 20 latent frames with 12 of
/// local context, and keyframes are taken every 5 latent frames.
pub fn paper_proxy(frames: u64) -> ShapeConfig {
    let tokens_per_latent = 240;
    let latent = (frames * 5).div_ceil(16);
    ShapeConfig {
        n: latent * tokens_per_latent,
        n_s: 20 * tokens_per_latent,
        n_local: 12 * tokens_per_latent,
        n_global: 512,
        n_text: 300,
        d: 4096,
        heads: 32,
        layers: 28,
        m: 4,
        n_keys: latent.div_ceil(5) * tokens_per_latent,
        ffn_mult: 4,
    }
}

/// Desk-scale config matching the default experiment: 16 tokens per frame,
/// chunks of 10 frames with 4 frames of context and one keyframe per second
/// at 16 fps.
pub fn toy_shape(frames: u64) -> ShapeConfig {
    let tpf = 16;
    ShapeConfig {
        n: frames * tpf,
        n_s: 10 * tpf,
        n_local: 4 * tpf,
        n_global: 16,
        n_text: 4,
        d: 64,
        heads: 4,
        layers: 4,
        m: 2,
        n_keys: frames.div_ceil(16) * tpf,
        ffn_mult: 4,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub frames: u64,
    pub full_total: u128,
    pub vin_total: u128,
    pub savings: f64,
}

pub fn sweep(frames: &[u64], shape: impl Fn(u64) -> ShapeConfig) -> Result<Vec<SweepRow>> {
    frames
        .iter()
        .map(|&f| {
            let cfg = shape(f);
            let full_total = full_flops(&cfg)?.total();
            let vin_total = vin_flops(&cfg)?.total();
            Ok(SweepRow {
                frames: f,
                full_total,
                vin_total,
                savings: 1.0 - vin_total as f64 / full_total as f64,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("frames,full_total,vin_total,savings\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.6}", r.frames, r.full_total, r.vin_total, r.savings);
    }
    s
}

/// Key-value cost report for one config.
pub fn cost_report(cfg: &ShapeConfig) -> Result<String> {
    let full = full_flops(cfg)?;
    let vin = vin_flops(cfg)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "shape.n = {}\nshape.n_s = {}\nshape.n_local = {}\nshape.n_global = {}\nshape.n_text = {}\nshape.d = {}\nshape.heads = {}\nshape.layers = {}\nshape.m = {}\nshape.n_keys = {}\nshape.ffn_mult = {}",
        cfg.n, cfg.n_s, cfg.n_local, cfg.n_global, cfg.n_text, cfg.d, cfg.heads, cfg.layers, cfg.m, cfg.n_keys, cfg.ffn_mult
    );
    s.push_str(&full.to_text("full"));
    s.push_str(&vin.to_text("vin"));
    let _ = writeln!(s, "savings = {:.6}", 1.0 - vin.total() as f64 / full.total() as f64);
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_attention() {
        assert_eq!(attention_flops(1, 1, 1), 4);
        assert_eq!(attention_flops(64, 64, 32), 524_288);
        assert_eq!(attention_flops(3, 10, 5) * 2, attention_flops(3, 20, 5));
    }

    #[test]
    fn single_layer_attention_term() {
        let cfg = ShapeConfig { layers: 1, n_text: 0, ..toy_shape(40) };
        let f = full_flops(&cfg).unwrap();
        assert_eq!(f.scores + f.values, attention_flops(cfg.n, cfg.n, cfg.d));
    }

    #[test]
    fn quadratic_attention_growth() {
        let a = ShapeConfig { n_text: 0, ..toy_shape(40) };
        let b = ShapeConfig { n: 2 * a.n, ..a };
        let (fa, fb) = (full_flops(&a).unwrap(), full_flops(&b).unwrap());
        assert_eq!(fb.scores, 4 * fa.scores);
    }

    #[test]
    fn degenerate_reduction_is_exact() {
        let cfg = toy_shape(80).degenerate();
        assert_eq!(vin_flops(&cfg).unwrap(), full_flops(&cfg).unwrap());
        assert_eq!(savings(&cfg).unwrap(), 0.0);
    }

    #[test]
    fn totals_are_category_sums() {
        let c = vin_flops(&paper_proxy(256)).unwrap();
        assert_eq!(c.total(), c.categories().iter().sum::<u128>());
    }

    #[test]
    fn invalid_shape_lists_keys() {
        let cfg = ShapeConfig { n_s: 0, d: 0, n_local: 0, ..toy_shape(40) };
        match full_flops(&cfg) {
            Err(Error::ConfigKeys { keys, .. }) => assert_eq!(keys, vec!["n_s", "d"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_has_declared_columns() {
        let rows = sweep(&SWEEP_FRAMES, paper_proxy).unwrap();
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("frames,full_total,vin_total,savings\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
