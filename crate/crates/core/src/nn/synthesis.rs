//! Recurrent encoder-decoder that predicts TD layers from three frames and
//! a disparity map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{TDRepresentation, CHANNELS};
use crate::tensor::Tensor;
use crate::warp::DisparityMap;

/// Three RGB frames plus one disparity channel.
pub const INPUT_CHANNELS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub base_width: usize,
    pub stages: usize,
    pub layers: usize,
    pub rank: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            base_width: 8,
            stages: 4,
            layers: 3,
            rank: 12,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.base_width == 0 || self.layers == 0 || self.rank == 0 {
            return Err(Error::Config(format!("synthesis config has a zero field: {self:?}")));
        }
        Ok(())
    }

    pub fn output_channels(&self) -> usize {
        self.layers * self.rank * CHANNELS
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level.min(3)
    }
}

/// ConvLSTM hidden and cell maps at bottleneck resolution, `[1, C, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SynthInputs<'a> {
    pub prev: &'a Image,
    pub cur: &'a Image,
    pub next: &'a Image,
    pub disparity: &'a DisparityMap,
}

impl SynthInputs<'_> {
    fn check(&self) -> Result<(usize, usize)> {
        let (h, w) = (self.cur.height(), self.cur.width());
        for img in [self.prev, self.cur, self.next] {
            if img.channels() != CHANNELS {
                return Err(Error::Shape("synthesis frames must be RGB".into()));
            }
            img.ensure_spatial(h, w, "synthesis frames")?;
        }
        if self.disparity.height() != h || self.disparity.width() != w {
            return Err(Error::Shape("disparity vs frames".into()));
        }
        Ok((h, w))
    }

    /// `[1, 10, H', W']`, edge-replicated up to a multiple of `multiple`.
    pub(crate) fn to_tensor(&self, multiple: usize) -> Result<(Tensor, usize, usize)> {
        let (h, w) = self.check()?;
        let hp = h.div_ceil(multiple) * multiple;
        let wp = w.div_ceil(multiple) * multiple;
        let mut data = Vec::with_capacity(INPUT_CHANNELS * hp * wp);
        for img in [self.prev, self.cur, self.next] {
            for c in 0..CHANNELS {
                for y in 0..hp {
                    for x in 0..wp {
                        data.push(img.get(y.min(h - 1), x.min(w - 1), c));
                    }
                }
            }
        }
        for y in 0..hp {
            for x in 0..wp {
                data.push(self.disparity.get(y.min(h - 1), x.min(w - 1)));
            }
        }
        Ok((Tensor::new(vec![1, INPUT_CHANNELS, hp, wp], data)?, h, w))
    }
}

/// Graph handles produced by one forward pass.
pub struct SynthVars {
    /// `[N, R, H, W, 3]` layer values in `(0, 1)`.
    pub f: Var,
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisNet {
    pub config: SynthesisConfig,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl SynthesisNet {
    pub fn new(config: SynthesisConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let cfg = &self.config;
        store.init_conv("synth.enc0", INPUT_CHANNELS, cfg.width_at(0), 3, rng);
        for s in 1..=cfg.stages {
            let (cin, cout) = (cfg.width_at(s - 1), cfg.width_at(s));
            store.init_conv(&format!("synth.enc{s}.a"), cin, cout, 3, rng);
            store.init_conv(&format!("synth.enc{s}.b"), cout, cout, 3, rng);
        }
        let cb = cfg.width_at(cfg.stages);
        store.init_conv("synth.lstm", 2 * cb, 4 * cb, 3, rng);
        // forget-gate bias 1 keeps the cell alive early in training
        if let Some(b) = store.get_mut("synth.lstm.b") {
            b.data_mut()[cb..2 * cb].iter_mut().for_each(|v| *v = 1.0);
        }
        for s in (0..cfg.stages).rev() {
            let (up, skip) = (if s + 1 == cfg.stages { cb } else { cfg.width_at(s + 1) }, cfg.width_at(s));
            store.init_conv(&format!("synth.dec{s}.a"), up + skip, skip, 3, rng);
            store.init_conv(&format!("synth.dec{s}.b"), skip, skip, 3, rng);
        }
        let out = cfg.output_channels();
        store.init_he("synth.head.w", &[out, cfg.width_at(0), 1, 1], cfg.width_at(0), 0.1, rng);
        // every rank term starts near 0.5/R so the clipped sum starts at 0.5
        let start = (0.5 / cfg.rank as f64).powf(1.0 / cfg.layers as f64);
        store.init_const("synth.head.b", &[out], logit(start));
    }

    /// One recurrent step. `state = None` starts a new sequence.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        inputs: &SynthInputs<'_>,
        state: Option<&RecurrentState>,
    ) -> Result<SynthVars> {
        let (x, h, w) = inputs.to_tensor(1 << self.config.stages)?;
        let x = ctx.constant(x);
        self.forward_var(ctx, x, h, w, state)
    }

    /// Forward from a padded `[1, 10, H', W']` input node; output cropped
    /// to `h × w`.
    pub(crate) fn forward_var(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        h: usize,
        w: usize,
        state: Option<&RecurrentState>,
    ) -> Result<SynthVars> {
        let cfg = self.config;
        let (hp, wp) = (ctx.g.shape(x)[2], ctx.g.shape(x)[3]);
        let e0 = ctx.conv(x, "synth.enc0", 1, 1);
        let mut cur = ctx.g.relu(e0);
        let mut skips = vec![cur];
        for s in 1..=cfg.stages {
            let a = ctx.conv(cur, &format!("synth.enc{s}.a"), 2, 1);
            let a = ctx.g.relu(a);
            let b = ctx.conv(a, &format!("synth.enc{s}.b"), 1, 1);
            cur = ctx.g.relu(b);
            if s < cfg.stages {
                skips.push(cur);
            }
        }

        let cb = cfg.width_at(cfg.stages);
        let (bh, bw) = (ctx.g.shape(cur)[2], ctx.g.shape(cur)[3]);
        let (h_prev, c_prev) = match state {
            Some(st) => {
                if st.h.shape() != [1, cb, bh, bw] || st.c.shape() != [1, cb, bh, bw] {
                    return Err(Error::Shape("recurrent state does not match the input size".into()));
                }
                (ctx.constant(st.h.clone()), ctx.constant(st.c.clone()))
            }
            None => (
                ctx.constant(Tensor::zeros(&[1, cb, bh, bw])),
                ctx.constant(Tensor::zeros(&[1, cb, bh, bw])),
            ),
        };
        let xh = ctx.g.concat_channels(&[cur, h_prev]);
        let gates = ctx.conv(xh, "synth.lstm", 1, 1);
        let gi = ctx.g.slice_channels(gates, 0, cb);
        let gf = ctx.g.slice_channels(gates, cb, cb);
        let go = ctx.g.slice_channels(gates, 2 * cb, cb);
        let gg = ctx.g.slice_channels(gates, 3 * cb, cb);
        let i = ctx.g.sigmoid(gi);
        let f = ctx.g.sigmoid(gf);
        let o = ctx.g.sigmoid(go);
        let gc = ctx.g.tanh(gg);
        let fc = ctx.g.mul(f, c_prev);
        let ig = ctx.g.mul(i, gc);
        let c_new = ctx.g.add(fc, ig);
        let tc = ctx.g.tanh(c_new);
        let h_new = ctx.g.mul(o, tc);

        cur = h_new;
        for s in (0..cfg.stages).rev() {
            let skip = skips[s];
            let (sh, sw) = (ctx.g.shape(skip)[2], ctx.g.shape(skip)[3]);
            let up = ctx.g.resize_bilinear(cur, sh, sw);
            let cat = ctx.g.concat_channels(&[up, skip]);
            let a = ctx.conv(cat, &format!("synth.dec{s}.a"), 1, 1);
            let a = ctx.g.relu(a);
            let b = ctx.conv(a, &format!("synth.dec{s}.b"), 1, 1);
            cur = ctx.g.relu(b);
        }
        let logits = ctx.conv(cur, "synth.head", 1, 0);
        let squashed = ctx.g.sigmoid(logits);

        // [1, N·R·3, H', W'] → [N, R, H, W, 3], cropping the padding
        let (n_layers, rank) = (cfg.layers, cfg.rank);
        let mut index = Vec::with_capacity(n_layers * rank * h * w * CHANNELS);
        for n in 0..n_layers {
            for r in 0..rank {
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..CHANNELS {
                            let ch = (n * rank + r) * CHANNELS + c;
                            index.push(Some((ch * hp + y) * wp + x));
                        }
                    }
                }
            }
        }
        let f = ctx.g.gather(squashed, index, &[n_layers, rank, h, w, CHANNELS]);
        Ok(SynthVars { f, h: h_new, c: c_new })
    }

    /// Inference convenience: TD layers and the next recurrent state.
    pub fn predict(
        &self,
        store: &ParamStore,
        inputs: &SynthInputs<'_>,
        state: Option<&RecurrentState>,
    ) -> Result<(TDRepresentation, RecurrentState)> {
        let mut ctx = Ctx::frozen(store);
        let vars = self.forward(&mut ctx, inputs, state)?;
        let cfg = self.config;
        let (h, w) = (inputs.cur.height(), inputs.cur.width());
        let f = TDRepresentation::new(cfg.layers, cfg.rank, h, w, ctx.g.value(vars.f).data().to_vec())?;
        let state = RecurrentState {
            h: ctx.g.value(vars.h).clone(),
            c: ctx.g.value(vars.c).clone(),
        };
        Ok((f, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frames(h: usize, w: usize, seed: u64) -> (Image, Image, Image, DisparityMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap();
        let (a, b, c) = (img(), img(), img());
        (a, b, c, DisparityMap::from_fn(h, w, |y, x| (y + x) as f64 / (h + w) as f64))
    }

    fn net(cfg: SynthesisConfig) -> (SynthesisNet, ParamStore) {
        let net = SynthesisNet::new(cfg).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (net, store)
    }

    #[test]
    fn output_shape_and_range() {
        let (net, store) = net(SynthesisConfig { base_width: 4, stages: 4, layers: 3, rank: 12 });
        assert_eq!(net.config.output_channels(), 108);
        let (a, b, c, d) = frames(64, 96, 1);
        let inputs = SynthInputs { prev: &a, cur: &b, next: &c, disparity: &d };
        let (f, _) = net.predict(&store, &inputs, None).unwrap();
        assert_eq!((f.layers(), f.rank(), f.height(), f.width()), (3, 12, 64, 96));
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (f2, _) = net.predict(&store, &inputs, None).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn sizes_that_do_not_divide_are_padded() {
        let (net, store) = net(SynthesisConfig { base_width: 2, stages: 3, layers: 2, rank: 2 });
        let (a, b, c, d) = frames(13, 10, 2);
        let inputs = SynthInputs { prev: &a, cur: &b, next: &c, disparity: &d };
        let (f, st) = net.predict(&store, &inputs, None).unwrap();
        assert_eq!((f.height(), f.width()), (13, 10));
        assert_eq!(st.h.shape(), [1, 16, 2, 2]);
    }

    #[test]
    fn gradient_reaches_every_input_channel() {
        let (net, store) = net(SynthesisConfig { base_width: 2, stages: 2, layers: 2, rank: 2 });
        let (a, b, c, d) = frames(8, 8, 3);
        let inputs = SynthInputs { prev: &a, cur: &b, next: &c, disparity: &d };
        let mut ctx = Ctx::trainable_all(&store);
        let (x, _, _) = inputs.to_tensor(4).unwrap();
        let xv = ctx.g.param(x);
        let vars = net.forward_var(&mut ctx, xv, 8, 8, None).unwrap();
        let s = ctx.g.sum(vars.f);
        let grads = ctx.g.backward(s);
        let g = grads.get(xv).unwrap();
        for ch in 0..INPUT_CHANNELS {
            let norm: f64 = g.data()[ch * 64..(ch + 1) * 64].iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "channel {ch}");
        }
        assert!(ctx.param_grads(&grads)["synth.enc0.w"].norm() > 0.0);
    }

    #[test]
    fn mismatched_frames_are_rejected() {
        let (net, store) = net(SynthesisConfig { base_width: 2, stages: 1, layers: 1, rank: 1 });
        let (a, b, _, d) = frames(8, 8, 4);
        let small = Image::zeros(4, 8, 3);
        let inputs = SynthInputs { prev: &a, cur: &b, next: &small, disparity: &d };
        assert!(net.predict(&store, &inputs, None).is_err());
    }
}
