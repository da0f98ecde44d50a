//! Patch-token angular attention that corrects a synthesized light field.
//!
//! At each patch site the `U·V` view patches and the input-frame patch become
//! tokens that attend to each other. Each view is then decoded from its own
//! tokens into a residual image and a blend mask.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{AngularGrid, LightField, CHANNELS};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub patch: usize,
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub enc_channels: usize,
    pub dec_channels: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            patch: 32,
            embed: 32,
            depth: 2,
            heads: 2,
            enc_channels: 8,
            dec_channels: 8,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 4 != 0 {
            return Err(Error::Config(format!("patch size must be a positive multiple of 4, got {}", self.patch)));
        }
        if self.heads == 0 || self.embed % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must split evenly over {} heads",
                self.embed, self.heads
            )));
        }
        if self.enc_channels == 0 || self.dec_channels == 0 {
            return Err(Error::Config("refinement channel widths must be positive".into()));
        }
        Ok(())
    }
}

/// Patch sites per view and tokens per site.
pub fn count_tokens(config: &RefinementConfig, grid: AngularGrid, height: usize, width: usize) -> (usize, usize) {
    let p = config.patch;
    (height.div_ceil(p) * width.div_ceil(p), grid.len() + 1)
}

/// `M ⊙ L + (1 − M) ⊙ residual`, per view and pixel.
pub fn blend(lf: &LightField, residual: &LightField, mask: &[Image]) -> Result<LightField> {
    lf.ensure_same_dims(residual, "blend")?;
    if mask.len() != lf.grid().len() {
        return Err(Error::Shape("one blend mask per view".into()));
    }
    let n = lf.height() * lf.width();
    let mut out = Vec::with_capacity(lf.data().len());
    for (vi, m) in mask.iter().enumerate() {
        if m.dims() != (lf.height(), lf.width(), 1) {
            return Err(Error::Shape("blend mask must be single-channel view-sized".into()));
        }
        let (a, b) = (lf.view_slice(vi), residual.view_slice(vi));
        for p in 0..n {
            let mv = m.data()[p];
            for c in 0..CHANNELS {
                let i = p * CHANNELS + c;
                out.push(mv * a[i] + (1.0 - mv) * b[i]);
            }
        }
    }
    LightField::new(lf.grid(), lf.height(), lf.width(), out)
}

pub struct RefinementVars {
    /// `[views, H, W, 3]`.
    pub refined: Var,
    pub residual: Var,
    /// `[views, H, W, 3]`, the per-pixel mask repeated over channels.
    pub mask: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementOutput {
    pub refined: LightField,
    pub residual: LightField,
    /// Single-channel mask per view.
    pub mask: Vec<Image>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementNet {
    pub config: RefinementConfig,
    pub grid: AngularGrid,
}

impl RefinementNet {
    pub fn new(config: RefinementConfig, grid: AngularGrid) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, grid })
    }

    fn tokens_per_site(&self) -> usize {
        self.grid.len() + 1
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = self.config;
        let q = c.patch / 4;
        store.init_conv("refine.enc.a", CHANNELS, c.enc_channels, 3, rng);
        store.init_conv("refine.enc.b", c.enc_channels, c.enc_channels, 3, rng);
        store.init_linear("refine.enc.proj", c.enc_channels * q * q, c.embed, rng);
        store.init_he("refine.pos", &[self.tokens_per_site(), c.embed], c.embed, 0.1, rng);
        for l in 0..c.depth {
            for ln in ["ln1", "ln2"] {
                store.init_const(&format!("refine.tf{l}.{ln}.g"), &[c.embed], 1.0);
                store.init_const(&format!("refine.tf{l}.{ln}.b"), &[c.embed], 0.0);
            }
            for lin in ["q", "k", "v", "o"] {
                store.init_linear(&format!("refine.tf{l}.{lin}"), c.embed, c.embed, rng);
            }
            store.init_linear(&format!("refine.tf{l}.mlp1"), c.embed, 2 * c.embed, rng);
            store.init_linear(&format!("refine.tf{l}.mlp2"), 2 * c.embed, c.embed, rng);
        }
        store.init_linear("refine.dec.proj", c.embed, c.dec_channels * q * q, rng);
        store.init_conv("refine.dec.up1", c.dec_channels, c.dec_channels, 3, rng);
        store.init_conv("refine.dec.up2", c.dec_channels, c.dec_channels, 3, rng);
        store.init_conv("refine.dec.out", c.dec_channels, 4, 3, rng);
        if let Some(w) = store.get_mut("refine.dec.out.w") {
            w.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
        // start close to passthrough: mask ≈ 0.88
        if let Some(b) = store.get_mut("refine.dec.out.b") {
            b.data_mut()[3] = 2.0;
        }
    }

    /// `[S·T, 3, p, p]` patches, site-major, with the input frame last at
    /// each site; edge-replicated to whole patches.
    fn patches(&self, lf: &LightField, i_t: &Image) -> Result<(Tensor, usize, usize)> {
        let p = self.config.patch;
        let (h, w) = (lf.height(), lf.width());
        let (sh, sw) = (h.div_ceil(p), w.div_ceil(p));
        let t = self.tokens_per_site();
        let mut data = Vec::with_capacity(sh * sw * t * CHANNELS * p * p);
        for sy in 0..sh {
            for sx in 0..sw {
                for tok in 0..t {
                    let src = if tok < self.grid.len() { lf.view_slice(tok) } else { i_t.data() };
                    for c in 0..CHANNELS {
                        for iy in 0..p {
                            let y = (sy * p + iy).min(h - 1);
                            for ix in 0..p {
                                let x = (sx * p + ix).min(w - 1);
                                data.push(src[(y * w + x) * CHANNELS + c]);
                            }
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(vec![sh * sw * t, CHANNELS, p, p], data)?, sh, sw))
    }

    fn attention(&self, ctx: &mut Ctx<'_>, x: Var, layer: usize, sites: usize) -> Var {
        let c = self.config;
        let t = self.tokens_per_site();
        let (heads, dh) = (c.heads, c.embed / c.heads);
        let split = |ctx: &mut Ctx<'_>, v: Var| {
            let mut idx = Vec::with_capacity(sites * t * c.embed);
            for s in 0..sites {
                for hd in 0..heads {
                    for tok in 0..t {
                        for j in 0..dh {
                            idx.push(Some((s * t + tok) * c.embed + hd * dh + j));
                        }
                    }
                }
            }
            ctx.g.gather(v, idx, &[sites * heads, t, dh])
        };
        let q = ctx.linear(x, &format!("refine.tf{layer}.q"));
        let k = ctx.linear(x, &format!("refine.tf{layer}.k"));
        let v = ctx.linear(x, &format!("refine.tf{layer}.v"));
        let (q, k, v) = (split(ctx, q), split(ctx, k), split(ctx, v));
        let scores = ctx.g.bmm(q, k, true);
        let scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = ctx.g.softmax_rows(scores);
        let mixed = ctx.g.bmm(attn, v, false);
        let mut idx = Vec::with_capacity(sites * t * c.embed);
        for s in 0..sites {
            for tok in 0..t {
                for hd in 0..heads {
                    for j in 0..dh {
                        idx.push(Some(((s * heads + hd) * t + tok) * dh + j));
                    }
                }
            }
        }
        let merged = ctx.g.gather(mixed, idx, &[sites * t, c.embed]);
        ctx.linear(merged, &format!("refine.tf{layer}.o"))
    }

    /// Refines `lf` given the input frame. `mask_override` pins the blend
    /// mask to a constant.
    pub fn forward(
        &self,
        ctx: &mut Ctx<'_>,
        lf: &LightField,
        i_t: &Image,
        mask_override: Option<f64>,
    ) -> Result<RefinementVars> {
        if lf.grid() != self.grid {
            return Err(Error::Shape("light field grid differs from the refinement grid".into()));
        }
        if i_t.dims() != (lf.height(), lf.width(), CHANNELS) {
            return Err(Error::Shape("input frame vs light field".into()));
        }
        let c = self.config;
        let (p, q) = (c.patch, c.patch / 4);
        let (h, w) = (lf.height(), lf.width());
        let views = self.grid.len();
        let t = self.tokens_per_site();
        let (patches, sh, sw) = self.patches(lf, i_t)?;
        let sites = sh * sw;
        let b = sites * t;

        let x = ctx.constant(patches);
        let a = ctx.conv(x, "refine.enc.a", 2, 1);
        let a = ctx.g.relu(a);
        let e = ctx.conv(a, "refine.enc.b", 2, 1);
        let e = ctx.g.relu(e);
        let flat = ctx.g.reshape(e, &[b, c.enc_channels * q * q]);
        let tokens = ctx.linear(flat, "refine.enc.proj");
        let pos = ctx.p("refine.pos");
        let idx = (0..b)
            .flat_map(|row| (0..c.embed).map(move |j| Some((row % t) * c.embed + j)))
            .collect();
        let pos = ctx.g.gather(pos, idx, &[b, c.embed]);
        let mut x = ctx.g.add(tokens, pos);

        for l in 0..c.depth {
            let g1 = ctx.p(&format!("refine.tf{l}.ln1.g"));
            let b1 = ctx.p(&format!("refine.tf{l}.ln1.b"));
            let n1 = ctx.g.layer_norm(x, g1, b1);
            let att = self.attention(ctx, n1, l, sites);
            x = ctx.g.add(x, att);
            let g2 = ctx.p(&format!("refine.tf{l}.ln2.g"));
            let b2 = ctx.p(&format!("refine.tf{l}.ln2.b"));
            let n2 = ctx.g.layer_norm(x, g2, b2);
            let m = ctx.linear(n2, &format!("refine.tf{l}.mlp1"));
            let m = ctx.g.relu(m);
            let m = ctx.linear(m, &format!("refine.tf{l}.mlp2"));
            x = ctx.g.add(x, m);
        }

        // drop the input-frame token; rows become view-major
        let idx = (0..views * sites)
            .flat_map(|row| {
                let (v, s) = (row / sites, row % sites);
                (0..c.embed).map(move |j| Some((s * t + v) * c.embed + j))
            })
            .collect();
        let view_tokens = ctx.g.gather(x, idx, &[views * sites, c.embed]);
        let feat = ctx.linear(view_tokens, "refine.dec.proj");
        // reassemble each view's sites into a [views, dec, H'/4, W'/4] map
        let (hq, wq) = (sh * q, sw * q);
        let dc = c.dec_channels;
        let mut idx = Vec::with_capacity(views * dc * hq * wq);
        for v in 0..views {
            for ch in 0..dc {
                for y in 0..hq {
                    for xq in 0..wq {
                        let s = (y / q) * sw + xq / q;
                        let k = ch * q * q + (y % q) * q + xq % q;
                        idx.push(Some((v * sites + s) * dc * q * q + k));
                    }
                }
            }
        }
        let fmap = ctx.g.gather(feat, idx, &[views, dc, hq, wq]);
        let u1 = ctx.g.resize_bilinear(fmap, hq * 2, wq * 2);
        let u1 = ctx.conv(u1, "refine.dec.up1", 1, 1);
        let u1 = ctx.g.relu(u1);
        let u2 = ctx.g.resize_bilinear(u1, sh * p, sw * p);
        let u2 = ctx.conv(u2, "refine.dec.up2", 1, 1);
        let u2 = ctx.g.relu(u2);
        let out = ctx.conv(u2, "refine.dec.out", 1, 1);
        let out = ctx.g.sigmoid(out);

        let (hp, wp) = (sh * p, sw * p);
        let lf_index = |ch_of: &dyn Fn(usize) -> usize| -> Vec<Option<usize>> {
            let mut idx = Vec::with_capacity(views * h * w * CHANNELS);
            for v in 0..views {
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..CHANNELS {
                            idx.push(Some(((v * 4 + ch_of(c)) * hp + y) * wp + x));
                        }
                    }
                }
            }
            idx
        };
        let residual = ctx.g.gather(out, lf_index(&|c| c), &[views, h, w, CHANNELS]);
        let mask = match mask_override {
            Some(m) => ctx.constant(Tensor::full(&[views, h, w, CHANNELS], m)),
            None => ctx.g.gather(out, lf_index(&|_| 3), &[views, h, w, CHANNELS]),
        };
        let base = ctx.constant(Tensor::new(vec![views, h, w, CHANNELS], lf.data().to_vec())?);
        let kept = ctx.g.mul(mask, base);
        let inv = ctx.g.one_minus(mask);
        let filled = ctx.g.mul(inv, residual);
        let refined = ctx.g.add(kept, filled);
        Ok(RefinementVars { refined, residual, mask })
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        lf: &LightField,
        i_t: &Image,
        mask_override: Option<f64>,
    ) -> Result<RefinementOutput> {
        let mut ctx = Ctx::frozen(store);
        let vars = self.forward(&mut ctx, lf, i_t, mask_override)?;
        let (h, w) = (lf.height(), lf.width());
        let to_lf = |v: Var| LightField::new(self.grid, h, w, ctx.g.value(v).data().to_vec());
        let refined = to_lf(vars.refined)?;
        let residual = to_lf(vars.residual)?;
        let m = ctx.g.value(vars.mask).data();
        let mask = (0..self.grid.len())
            .map(|v| {
                let start = v * h * w * CHANNELS;
                Image::new(h, w, 1, (0..h * w).map(|p| m[start + p * CHANNELS]).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RefinementOutput { refined, residual, mask })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (RefinementNet, ParamStore) {
        let cfg = RefinementConfig { patch: 8, embed: 8, depth: 2, heads: 2, enc_channels: 4, dec_channels: 4 };
        let net = RefinementNet::new(cfg, AngularGrid::square(3).unwrap()).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        (net, store)
    }

    fn textured_lf(grid: AngularGrid, h: usize, w: usize) -> LightField {
        let views: Vec<Image> = grid
            .offsets()
            .map(|(u, v)| {
                Image::from_fn(h, w, 3, |y, x, c| {
                    0.5 + 0.4 * ((0.5 * x as f64 + 0.3 * u as f64 + c as f64).sin() * (0.4 * y as f64 + 0.2 * v as f64).cos())
                })
            })
            .collect();
        LightField::from_views(grid, &views).unwrap()
    }

    #[test]
    fn token_counts() {
        let cfg = RefinementConfig::default();
        let g7 = AngularGrid::square(7).unwrap();
        assert_eq!(count_tokens(&cfg, g7, 192, 192), (36, 50));
        assert_eq!(count_tokens(&cfg, g7, 32, 32), (1, 50));
        assert_eq!(count_tokens(&cfg, AngularGrid::square(5).unwrap(), 33, 64), (4, 26));
    }

    #[test]
    fn blend_arithmetic() {
        let g = AngularGrid::square(1).unwrap();
        let a = LightField::filled(g, 1, 1, 0.2);
        let b = LightField::filled(g, 1, 1, 0.6);
        let out = blend(&a, &b, &[Image::filled(1, 1, 1, 0.5)]).unwrap();
        assert!((out.data()[0] - 0.4).abs() < 1e-12);
        assert_eq!(blend(&a, &b, &[Image::filled(1, 1, 1, 1.0)]).unwrap(), a);
        assert_eq!(blend(&a, &b, &[Image::filled(1, 1, 1, 0.0)]).unwrap(), b);
    }

    #[test]
    fn forced_masks_pass_through_or_replace() {
        let (net, store) = small();
        let lf = textured_lf(net.grid, 12, 16);
        let i_t = lf.view(0, 0).unwrap();
        let out = net.predict(&store, &lf, &i_t, Some(1.0)).unwrap();
        assert_eq!(out.refined, lf);
        let out = net.predict(&store, &lf, &i_t, Some(0.0)).unwrap();
        assert_eq!(out.refined, out.residual);
    }

    #[test]
    fn free_output_satisfies_blend_identity() {
        let (net, store) = small();
        let lf = textured_lf(net.grid, 12, 16);
        let i_t = lf.view(0, 0).unwrap();
        let out = net.predict(&store, &lf, &i_t, None).unwrap();
        let again = blend(&lf, &out.residual, &out.mask).unwrap();
        for (a, b) in again.data().iter().zip(out.refined.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(out.mask.iter().all(|m| m.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rejects_bad_configs() {
        let g = AngularGrid::square(3).unwrap();
        assert!(RefinementNet::new(RefinementConfig { patch: 6, ..Default::default() }, g).is_err());
        assert!(RefinementNet::new(RefinementConfig { embed: 7, heads: 2, ..Default::default() }, g).is_err());
    }
}
