//! Attention-pooled head predicting the per-layer displacements `D`.
//!
//! The head predicts `N` positive widths summing to one. Layer `n` sits at
//! the midpoint of its width interval inside `[min d − 0.5, max d + 0.5]`,
//! which keeps `D` sorted and inside the disparity range by construction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::synthesis::SynthInputs;
use super::{Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::lf::DisplacementVector;
use crate::tensor::Tensor;

/// Margin around the disparity range, pixels.
pub const RANGE_MARGIN: f64 = 0.5;
const POOL_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementConfig {
    pub layers: usize,
    pub embed: usize,
    pub patch: usize,
}

impl Default for DisplacementConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            embed: 16,
            patch: 8,
        }
    }
}

/// Cumulative-midpoint rule: `D_n = lo + (hi − lo)·(Σ_{j<n} w_j + w_n/2)`.
pub fn bin_centers(widths: &[f64], lo: f64, hi: f64) -> Result<DisplacementVector> {
    if widths.is_empty() || widths.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Invalid("bin widths must be non-negative".into()));
    }
    let total: f64 = widths.iter().sum();
    let mut acc = 0.0;
    let values = widths
        .iter()
        .map(|w| {
            let w = w / total;
            let c = lo + (hi - lo) * (acc + 0.5 * w);
            acc += w;
            c
        })
        .collect();
    DisplacementVector::new(values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementHead {
    pub config: DisplacementConfig,
}

impl DisplacementHead {
    pub fn new(config: DisplacementConfig) -> Result<Self> {
        if config.layers == 0 || config.embed == 0 || config.patch == 0 || POOL_SIZE % config.patch != 0 {
            return Err(Error::Config(format!("bad displacement head config {config:?}")));
        }
        Ok(Self { config })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.config;
        store.init_conv("disp.embed", super::synthesis::INPUT_CHANNELS, c.embed, c.patch, rng);
        store.init_he("disp.query", &[1, 1, c.embed], c.embed, 0.5, rng);
        store.init_linear("disp.key", c.embed, c.embed, rng);
        store.init_linear("disp.mlp", c.embed, c.embed, rng);
        store.init_linear("disp.out", c.embed, c.layers, rng);
        if let Some(w) = store.get_mut("disp.out.w") {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }

    /// `D` as a `[N]` node.
    pub fn forward(&self, ctx: &mut Ctx<'_>, inputs: &SynthInputs<'_>) -> Result<Var> {
        let c = self.config;
        let (lo, hi) = inputs.disparity.min_max();
        let (lo, hi) = (lo - RANGE_MARGIN, hi + RANGE_MARGIN);
        let (x, _, _) = inputs.to_tensor(1)?;
        let x = ctx.constant(x);
        let pooled_in = ctx.g.resize_bilinear(x, POOL_SIZE, POOL_SIZE);
        let emb = ctx.conv(pooled_in, "disp.embed", c.patch, 0);
        let emb = ctx.g.relu(emb);
        // [1, E, s, s] → tokens [s·s, E]
        let side = POOL_SIZE / c.patch;
        let t = side * side;
        let index = (0..t)
            .flat_map(|tok| (0..c.embed).map(move |e| Some(e * t + tok)))
            .collect();
        let tokens = ctx.g.gather(emb, index, &[t, c.embed]);
        let keys = ctx.linear(tokens, "disp.key");
        let keys = ctx.g.reshape(keys, &[1, t, c.embed]);
        let q = ctx.p("disp.query");
        let scores = ctx.g.bmm(q, keys, true);
        let scores = ctx.g.scale(scores, 1.0 / (c.embed as f64).sqrt());
        let attn = ctx.g.softmax_rows(scores);
        let vals = ctx.g.reshape(tokens, &[1, t, c.embed]);
        let pooled = ctx.g.bmm(attn, vals, false);
        let pooled = ctx.g.reshape(pooled, &[1, c.embed]);
        let hidden = ctx.linear(pooled, "disp.mlp");
        let hidden = ctx.g.relu(hidden);
        let logits = ctx.linear(hidden, "disp.out");
        let widths = ctx.g.softmax_rows(logits);
        // cumulative midpoints as a fixed triangular matrix
        let n = c.layers;
        let tri = (0..n * n)
            .map(|i| {
                let (j, k) = (i / n, i % n);
                match j.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Greater => 0.0,
                }
            })
            .collect();
        let tri = ctx.constant(Tensor::new(vec![n, n], tri)?);
        let cum = ctx.g.matmul(widths, tri);
        let scaled = ctx.g.scale(cum, hi - lo);
        let d = ctx.g.add_scalar(scaled, lo);
        Ok(ctx.g.reshape(d, &[n]))
    }

    pub fn predict(&self, store: &ParamStore, inputs: &SynthInputs<'_>) -> Result<DisplacementVector> {
        let mut ctx = Ctx::frozen(store);
        let d = self.forward(&mut ctx, inputs)?;
        DisplacementVector::new(ctx.g.value(d).data().to_vec())
    }
}
