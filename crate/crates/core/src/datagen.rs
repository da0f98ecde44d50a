//! Synthetic layered scenes with exact ground truth, LF-video simulation by
//! crop translation, and depth/flow providers.
//!
//! Layer `k` with disparity `δ_k` and velocity `vel_k` is seen from view
//! `(u, v)` at frame `t` by sampling its texture at
//! `(x + δ_k·u − vel_x·t, y + δ_k·v − vel_y·t)`. Layers are composited in
//! ascending disparity, so the largest disparity is in front.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{read_flo, read_pfm};
use crate::lf::{AngularGrid, LightField, CHANNELS};
use crate::sampling::Tap;
use crate::warp::{AffineDepthParams, DepthMap, DisparityMap, FlowField, HoleMask, Mask};

/// Alpha at or above this counts as opaque for visibility.
const OPAQUE: f64 = 0.5;

/// Default number of frames per simulated LF video.
pub const DEFAULT_FRAMES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    /// RGB texture, at least as large as the canvas; centered on it.
    pub texture: Image,
    /// Opacity in `[0, 1]`, same size as the texture. `None` is fully opaque.
    pub alpha: Option<Image>,
    pub disparity: f64,
    /// Pixels per frame.
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub layers: Vec<LayerSpec>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub grid: AngularGrid,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("scene needs at least one layer".into()));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Invalid("scene needs frames and a non-empty canvas".into()));
        }
        if self.layers.windows(2).any(|w| w[0].disparity > w[1].disparity) {
            return Err(Error::Invalid("layers must be sorted by ascending disparity".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            let (th, tw) = (l.texture.height(), l.texture.width());
            if th < self.height || tw < self.width {
                return Err(Error::Invalid(format!(
                    "layer {k} texture {tw}x{th} is smaller than the {}x{} canvas",
                    self.width, self.height
                )));
            }
            if l.texture.channels() != CHANNELS {
                return Err(Error::Invalid(format!("layer {k} texture must be RGB")));
            }
            if let Some(a) = &l.alpha {
                if a.dims() != (th, tw, 1) {
                    return Err(Error::Invalid(format!("layer {k} alpha must match its texture")));
                }
            }
            if !l.disparity.is_finite() || !l.velocity.0.is_finite() || !l.velocity.1.is_finite() {
                return Err(Error::Invalid(format!("layer {k} has non-finite motion")));
            }
        }
        Ok(())
    }
}

/// Identifies one image of a video: a center frame or a view of a frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRef {
    Center(usize),
    View { t: usize, u: i64, v: i64 },
}

impl FrameRef {
    fn parts(self) -> (usize, i64, i64) {
        match self {
            FrameRef::Center(t) => (t, 0, 0),
            FrameRef::View { t, u, v } => (t, u, v),
        }
    }
}

/// Everything known about a generated scene.
#[derive(Clone, Debug)]
pub struct SceneTruth {
    pub spec: SyntheticSceneSpec,
    pub lf: Vec<LightField>,
    pub center: Vec<Image>,
    pub disparity: Vec<DisparityMap>,
    /// `O(I_t, I_{t+1})` for consecutive center frames.
    pub center_flow: Vec<FlowField>,
    pub holes: Vec<HoleMask>,
}

struct Sampler<'a> {
    spec: &'a SyntheticSceneSpec,
}

impl Sampler<'_> {
    fn coords(&self, k: usize, t: usize, u: i64, v: i64, y: usize, x: usize) -> (f64, f64) {
        let l = &self.spec.layers[k];
        let (th, tw) = (l.texture.height(), l.texture.width());
        let ox = (tw - self.spec.width) as f64 / 2.0;
        let oy = (th - self.spec.height) as f64 / 2.0;
        (
            x as f64 + ox + l.disparity * u as f64 - l.velocity.0 * t as f64,
            y as f64 + oy + l.disparity * v as f64 - l.velocity.1 * t as f64,
        )
    }

    fn alpha(&self, k: usize, tx: f64, ty: f64) -> f64 {
        let l = &self.spec.layers[k];
        match &l.alpha {
            None => 1.0,
            Some(a) => Tap::new(tx, ty, a.width(), a.height()).sample(a.data(), 1, 0),
        }
    }

    /// Frontmost opaque layer at a pixel.
    fn visible(&self, t: usize, u: i64, v: i64, y: usize, x: usize) -> usize {
        (0..self.spec.layers.len())
            .rev()
            .find(|&k| {
                let (tx, ty) = self.coords(k, t, u, v, y, x);
                self.alpha(k, tx, ty) >= OPAQUE
            })
            .unwrap_or(0)
    }

    fn render_view(&self, t: usize, u: i64, v: i64) -> Image {
        let (h, w) = (self.spec.height, self.spec.width);
        let mut out = Image::zeros(h, w, CHANNELS);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0.0; CHANNELS];
                for (k, l) in self.spec.layers.iter().enumerate() {
                    let (tx, ty) = self.coords(k, t, u, v, y, x);
                    let tex = &l.texture;
                    let tap = Tap::new(tx, ty, tex.width(), tex.height());
                    let a = if k == 0 { 1.0 } else { self.alpha(k, tx, ty) };
                    if a == 0.0 {
                        continue;
                    }
                    for (c, p) in px.iter_mut().enumerate() {
                        *p = a * tap.sample(tex.data(), CHANNELS, c) + (1.0 - a) * *p;
                    }
                }
                for (c, p) in px.iter().enumerate() {
                    out.set(y, x, c, p.clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    fn flow(&self, a: FrameRef, b: FrameRef) -> FlowField {
        let (ta, ua, va) = a.parts();
        let (tb, ub, vb) = b.parts();
        FlowField::from_fn(self.spec.height, self.spec.width, |y, x| {
            let k = self.visible(ta, ua, va, y, x);
            let l = &self.spec.layers[k];
            let dt = tb as f64 - ta as f64;
            (
                l.disparity * (ua - ub) as f64 + l.velocity.0 * dt,
                l.disparity * (va - vb) as f64 + l.velocity.1 * dt,
            )
        })
    }

    /// A view pixel is a hole when the center frame does not show the same
    /// layer at the corresponding position.
    fn holes(&self, t: usize) -> HoleMask {
        let (h, w) = (self.spec.height, self.spec.width);
        let grid = self.spec.grid;
        let views = grid
            .offsets()
            .map(|(u, v)| {
                let mut m = Mask::zeros(h, w);
                for y in 0..h {
                    for x in 0..w {
                        let k = self.visible(t, u, v, y, x);
                        let d = self.spec.layers[k].disparity;
                        let cx = (x as f64 + d * u as f64).round();
                        let cy = (y as f64 + d * v as f64).round();
                        let hole = cx < 0.0
                            || cy < 0.0
                            || cx >= w as f64
                            || cy >= h as f64
                            || self.visible(t, 0, 0, cy as usize, cx as usize) != k;
                        m.set(y, x, hole);
                    }
                }
                m
            })
            .collect();
        HoleMask::new(grid, views).expect("mask per view")
    }
}

pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<SceneTruth> {
    spec.validate()?;
    let s = Sampler { spec };
    let (h, w) = (spec.height, spec.width);
    let mut lf = Vec::with_capacity(spec.frames);
    let mut disparity = Vec::with_capacity(spec.frames);
    let mut holes = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let views: Vec<Image> = spec.grid.offsets().map(|(u, v)| s.render_view(t, u, v)).collect();
        lf.push(LightField::from_views(spec.grid, &views)?);
        disparity.push(DisparityMap::from_fn(h, w, |y, x| {
            spec.layers[s.visible(t, 0, 0, y, x)].disparity
        }));
        holes.push(s.holes(t));
    }
    let center = lf.iter().map(crate::lf::center_view).collect();
    let center_flow = (0..spec.frames.saturating_sub(1))
        .map(|t| s.flow(FrameRef::Center(t), FrameRef::Center(t + 1)))
        .collect();
    Ok(SceneTruth {
        spec: spec.clone(),
        lf,
        center,
        disparity,
        center_flow,
        holes,
    })
}

impl SceneTruth {
    /// Oracle flow `O(a, b)` from the visible layer of `a`.
    pub fn flow(&self, a: FrameRef, b: FrameRef) -> Result<FlowField> {
        for r in [a, b] {
            let (t, u, v) = r.parts();
            if t >= self.spec.frames {
                return Err(Error::OutOfRange { what: "frame", index: t as i64, extent: self.spec.frames });
            }
            self.spec.grid.index_of(u, v)?;
        }
        Ok(Sampler { spec: &self.spec }.flow(a, b))
    }

    /// Affine parameters mapping the normalized oracle depth back to the
    /// true disparity.
    pub fn affine(&self) -> AffineDepthParams {
        let (lo, hi) = self
            .spec
            .layers
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l.disparity), b.max(l.disparity)));
        let a = if hi > lo { hi - lo } else { 1.0 };
        AffineDepthParams { a, b: lo }
    }

    pub fn frames(&self) -> usize {
        self.spec.frames
    }
}

/// Smooth random RGB texture in roughly `[0.1, 0.9]`: a sum of random
/// oriented sinusoids per channel.
pub fn random_texture(height: usize, width: usize, rng: &mut impl Rng) -> Image {
    const WAVES: usize = 6;
    let mut waves = Vec::with_capacity(CHANNELS * WAVES);
    for _ in 0..CHANNELS * WAVES {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let freq: f64 = rng.gen_range(0.06..0.3);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        waves.push((freq * theta.cos(), freq * theta.sin(), phase));
    }
    let base: Vec<f64> = (0..CHANNELS).map(|_| rng.gen_range(0.35..0.65)).collect();
    Image::from_fn(height, width, CHANNELS, |y, x, c| {
        let s: f64 = waves[c * WAVES..(c + 1) * WAVES]
            .iter()
            .map(|(fx, fy, ph)| (fx * x as f64 + fy * y as f64 + ph).sin())
            .sum();
        (base[c] + 0.35 * s / WAVES as f64 * 2.0).clamp(0.05, 0.95)
    })
}

/// Alpha mask of an axis-aligned rectangle, centered on the texture with
/// the given canvas-relative offset.
fn rect_alpha(th: usize, tw: usize, y0: usize, x0: usize, rh: usize, rw: usize) -> Image {
    Image::from_fn(th, tw, 1, |y, x, _| {
        ((y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x)) as u8 as f64
    })
}

/// Margin added around the canvas so shifted views stay on the texture.
fn texture_margin(disparities: &[f64], grid: AngularGrid, frames: usize, velocity: (f64, f64)) -> usize {
    let dmax = disparities.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let r = grid.u_radius().max(grid.v_radius()) as f64;
    let vmax = velocity.0.abs().max(velocity.1.abs()) * frames.saturating_sub(1) as f64;
    (dmax * r + vmax).ceil() as usize + 2
}

/// Builders for the standard test scenes.
pub mod scenes {
    use super::*;

    pub struct Canvas {
        pub height: usize,
        pub width: usize,
        pub grid: AngularGrid,
        pub frames: usize,
    }

    fn layer(
        canvas: &Canvas,
        margin: usize,
        rng: &mut ChaCha8Rng,
        disparity: f64,
        velocity: (f64, f64),
        rect: Option<(f64, f64, f64, f64)>,
    ) -> LayerSpec {
        let (th, tw) = (canvas.height + 2 * margin, canvas.width + 2 * margin);
        let texture = random_texture(th, tw, rng);
        let alpha = rect.map(|(fy, fx, fh, fw)| {
            let y0 = margin + (fy * canvas.height as f64) as usize;
            let x0 = margin + (fx * canvas.width as f64) as usize;
            let rh = (fh * canvas.height as f64) as usize;
            let rw = (fw * canvas.width as f64) as usize;
            rect_alpha(th, tw, y0, x0, rh, rw)
        });
        LayerSpec { texture, alpha, disparity, velocity }
    }

    /// One textured plane at constant disparity.
    pub fn single_plane(canvas: Canvas, disparity: f64, velocity: (f64, f64), seed: u64) -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = texture_margin(&[disparity], canvas.grid, canvas.frames, velocity);
        SyntheticSceneSpec {
            layers: vec![layer(&canvas, margin, &mut rng, disparity, velocity, None)],
            frames: canvas.frames,
            height: canvas.height,
            width: canvas.width,
            grid: canvas.grid,
            seed,
        }
    }

    /// Textured square at `front` disparity over a background at `back`.
    pub fn two_plane(canvas: Canvas, back: f64, front: f64, velocity: (f64, f64), seed: u64) -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let margin = texture_margin(&[back, front], canvas.grid, canvas.frames, velocity);
        let layers = vec![
            layer(&canvas, margin, &mut rng, back, velocity, None),
            layer(&canvas, margin, &mut rng, front, velocity, Some((0.3, 0.3, 0.4, 0.4))),
        ];
        SyntheticSceneSpec {
            layers,
            frames: canvas.frames,
            height: canvas.height,
            width: canvas.width,
            grid: canvas.grid,
            seed,
        }
    }

    /// Background plus two overlapping rectangles at three disparities.
    pub fn three_plane(canvas: Canvas, disparities: [f64; 3], seed: u64) -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = disparities;
        d.sort_by(f64::total_cmp);
        let margin = texture_margin(&d, canvas.grid, canvas.frames, (0.0, 0.0));
        let layers = vec![
            layer(&canvas, margin, &mut rng, d[0], (0.0, 0.0), None),
            layer(&canvas, margin, &mut rng, d[1], (0.0, 0.0), Some((0.1, 0.1, 0.55, 0.5))),
            layer(&canvas, margin, &mut rng, d[2], (0.0, 0.0), Some((0.45, 0.45, 0.4, 0.45))),
        ];
        SyntheticSceneSpec {
            layers,
            frames: canvas.frames,
            height: canvas.height,
            width: canvas.width,
            grid: canvas.grid,
            seed,
        }
    }
}

/// File name of a saved [`SceneRecipe`] inside a scene directory.
pub const RECIPE_FILE: &str = "scene.json";

/// Parametric description of one of the stock scenes, small enough to save
/// next to generated outputs and regenerate the exact truth from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecipe {
    /// Disparity per plane, back to front; 1, 2 or 3 planes.
    pub disparities: Vec<f64>,
    /// Pixels per frame, shared by all planes.
    pub velocity: (f64, f64),
    pub height: usize,
    pub width: usize,
    pub angular: usize,
    pub frames: usize,
    pub seed: u64,
}

impl SceneRecipe {
    pub fn spec(&self) -> Result<SyntheticSceneSpec> {
        let canvas = scenes::Canvas {
            height: self.height,
            width: self.width,
            grid: AngularGrid::square(self.angular)?,
            frames: self.frames,
        };
        let mut d = self.disparities.clone();
        d.sort_by(f64::total_cmp);
        let spec = match d.as_slice() {
            [a] => scenes::single_plane(canvas, *a, self.velocity, self.seed),
            [a, b] => scenes::two_plane(canvas, *a, *b, self.velocity, self.seed),
            [a, b, c] if self.velocity == (0.0, 0.0) => scenes::three_plane(canvas, [*a, *b, *c], self.seed),
            [_, _, _] => return Err(Error::Invalid("the three-plane scene is static".into())),
            _ => {
                return Err(Error::Invalid(format!(
                    "stock scenes have 1 to 3 planes, got {}",
                    self.disparities.len()
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn generate(&self) -> Result<SceneTruth> {
        generate_scene(&self.spec()?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join(RECIPE_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RECIPE_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// LF video made by sliding a crop window over a static light field.
#[derive(Clone, Debug)]
pub struct SimulatedVideo {
    pub lf: Vec<LightField>,
    pub center: Vec<Image>,
    /// Crop origin displacement per frame `(dx, dy)`.
    pub velocity: (f64, f64),
    pub origin: (f64, f64),
}

/// Crops `crop_h × crop_w` windows whose origin moves by `velocity` per
/// frame, bilinearly resampled. Fails if any window leaves the source.
pub fn simulate_lf_video_path(
    lf: &LightField,
    frames: usize,
    crop_h: usize,
    crop_w: usize,
    origin: (f64, f64),
    velocity: (f64, f64),
) -> Result<SimulatedVideo> {
    if frames == 0 || crop_h == 0 || crop_w == 0 {
        return Err(Error::Invalid("simulation needs frames and a non-empty crop".into()));
    }
    let (h, w) = (lf.height(), lf.width());
    for t in [0, frames - 1] {
        let ox = origin.0 + velocity.0 * t as f64;
        let oy = origin.1 + velocity.1 * t as f64;
        if ox < 0.0 || oy < 0.0 || ox + (crop_w - 1) as f64 > (w - 1) as f64 || oy + (crop_h - 1) as f64 > (h - 1) as f64 {
            return Err(Error::Invalid(format!(
                "crop path leaves the {w}x{h} light field at frame {t} (origin {ox:.2}, {oy:.2})"
            )));
        }
    }
    let grid = lf.grid();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let ox = origin.0 + velocity.0 * t as f64;
        let oy = origin.1 + velocity.1 * t as f64;
        let mut data = Vec::with_capacity(grid.len() * crop_h * crop_w * CHANNELS);
        for vi in 0..grid.len() {
            let view = lf.view_slice(vi);
            for y in 0..crop_h {
                for x in 0..crop_w {
                    let tap = Tap::new(ox + x as f64, oy + y as f64, w, h);
                    for c in 0..CHANNELS {
                        data.push(tap.sample(view, CHANNELS, c).clamp(0.0, 1.0));
                    }
                }
            }
        }
        out.push(LightField::new(grid, crop_h, crop_w, data)?);
    }
    let center = out.iter().map(crate::lf::center_view).collect();
    Ok(SimulatedVideo { lf: out, center, velocity, origin })
}

/// Seeded random linear crop path, sized so the whole path stays inside.
pub fn simulate_lf_video(
    lf: &LightField,
    frames: usize,
    crop_h: usize,
    crop_w: usize,
    seed: u64,
) -> Result<SimulatedVideo> {
    let (h, w) = (lf.height(), lf.width());
    if crop_h >= h || crop_w >= w {
        return Err(Error::Invalid(format!(
            "crop {crop_w}x{crop_h} must be smaller than the {w}x{h} light field"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sx, sy) = ((w - crop_w) as f64, (h - crop_h) as f64);
    let steps = frames.saturating_sub(1).max(1) as f64;
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed_cap = (sx.abs() / steps / theta.cos().abs().max(1e-9)).min(sy / steps / theta.sin().abs().max(1e-9));
    let speed = rng.gen_range(0.3..=1.0) * speed_cap.min(2.0);
    let velocity = (speed * theta.cos(), speed * theta.sin());
    let span = (velocity.0 * steps, velocity.1 * steps);
    let lo = (if span.0 < 0.0 { -span.0 } else { 0.0 }, if span.1 < 0.0 { -span.1 } else { 0.0 });
    let hi = (sx - span.0.max(0.0), sy - span.1.max(0.0));
    let origin = (
        if hi.0 > lo.0 { rng.gen_range(lo.0..=hi.0) } else { lo.0 },
        if hi.1 > lo.1 { rng.gen_range(lo.1..=hi.1) } else { lo.1 },
    );
    simulate_lf_video_path(lf, frames, crop_h, crop_w, origin, velocity)
}

/// Source of relative depth and optical flow for a monocular video.
pub trait Provider {
    /// Relative depth of center frame `t`, in `[0, 1]`.
    fn depth(&self, t: usize) -> Result<DepthMap>;
    /// `O(a, b)`: displacement that gathers `b` onto `a`.
    fn flow(&self, a: FrameRef, b: FrameRef) -> Result<FlowField>;
    /// Affine map from this provider's depth to disparity, when known.
    fn affine(&self) -> Option<AffineDepthParams>;
}

/// Exact depth and flow read off a generated scene.
pub struct OracleProvider<'a> {
    truth: &'a SceneTruth,
}

impl<'a> OracleProvider<'a> {
    pub fn new(truth: &'a SceneTruth) -> Self {
        Self { truth }
    }
}

impl Provider for OracleProvider<'_> {
    fn depth(&self, t: usize) -> Result<DepthMap> {
        let d = self
            .truth
            .disparity
            .get(t)
            .ok_or(Error::OutOfRange { what: "frame", index: t as i64, extent: self.truth.frames() })?;
        Ok(d.to_depth(self.truth.affine()))
    }

    fn flow(&self, a: FrameRef, b: FrameRef) -> Result<FlowField> {
        self.truth.flow(a, b)
    }

    fn affine(&self) -> Option<AffineDepthParams> {
        Some(self.truth.affine())
    }
}

/// A generated scene is its own oracle.
impl Provider for SceneTruth {
    fn depth(&self, t: usize) -> Result<DepthMap> {
        OracleProvider::new(self).depth(t)
    }

    fn flow(&self, a: FrameRef, b: FrameRef) -> Result<FlowField> {
        SceneTruth::flow(self, a, b)
    }

    fn affine(&self) -> Option<AffineDepthParams> {
        Some(SceneTruth::affine(self))
    }
}

/// Precomputed depth (PFM) and flow (`.flo`) files.
///
/// Layout: `{depth_dir}/depth_{t:04}.pfm` and
/// `{flow_dir}/flow_{a}_to_{b}.flo`, where a frame reference is written
/// `c{t:04}` or `v{t:04}_{u:+}_{v:+}`. Requests for flow involving views
/// fall back to composing the center-frame flow file with the depth file's
/// disparity under `affine`.
#[derive(Clone, Debug)]
pub struct FileProvider {
    pub depth_dir: PathBuf,
    pub flow_dir: PathBuf,
    pub affine: AffineDepthParams,
}

pub fn frame_ref_tag(r: FrameRef) -> String {
    match r {
        FrameRef::Center(t) => format!("c{t:04}"),
        FrameRef::View { t, u, v } => format!("v{t:04}_{u:+}_{v:+}"),
    }
}

impl FileProvider {
    pub fn depth_path(&self, t: usize) -> PathBuf {
        self.depth_dir.join(format!("depth_{t:04}.pfm"))
    }

    pub fn flow_path(&self, a: FrameRef, b: FrameRef) -> PathBuf {
        self.flow_dir.join(format!("flow_{}_to_{}.flo", frame_ref_tag(a), frame_ref_tag(b)))
    }

    fn disparity(&self, t: usize) -> Result<DisparityMap> {
        Ok(crate::warp::depth_to_disparity(&self.depth(t)?, self.affine))
    }
}

fn provider_err(e: Error) -> Error {
    match e {
        Error::MissingFile(p) => Error::MissingFile(p),
        Error::Format(m) => Error::Provider(m),
        other => other,
    }
}

impl Provider for FileProvider {
    fn depth(&self, t: usize) -> Result<DepthMap> {
        let m = read_pfm(&self.depth_path(t)).map_err(provider_err)?;
        DepthMap::new(m.height, m.width, m.data)
    }

    fn flow(&self, a: FrameRef, b: FrameRef) -> Result<FlowField> {
        let direct = self.flow_path(a, b);
        if direct.exists() || (matches!(a, FrameRef::Center(_)) && matches!(b, FrameRef::Center(_))) {
            return read_flo(&direct).map_err(provider_err);
        }
        // compose: view a → center(ta) → center(tb) → view b
        let (ta, ua, va) = a.parts();
        let (tb, ub, vb) = b.parts();
        let da = self.disparity(ta)?;
        let db = self.disparity(tb)?;
        let center = if ta == tb {
            FlowField::zeros(da.height(), da.width())
        } else {
            read_flo(&self.flow_path(FrameRef::Center(ta), FrameRef::Center(tb))).map_err(provider_err)?
        };
        if center.height() != da.height() || center.width() != da.width() {
            return Err(Error::Provider("flow and depth files disagree in size".into()));
        }
        Ok(compose_view_flow(&da, &db, &center, (ua, va), (ub, vb)))
    }

    fn affine(&self) -> Option<AffineDepthParams> {
        Some(self.affine)
    }
}

/// Flow from view `a` of frame A to view `b` of frame B, given each frame's
/// center disparity and the center flow `O(I_A, I_B)`. Positions are looked
/// up at the nearest pixel.
pub fn compose_view_flow(
    da: &DisparityMap,
    db: &DisparityMap,
    center: &FlowField,
    a: (i64, i64),
    b: (i64, i64),
) -> FlowField {
    let (h, w) = (da.height(), da.width());
    let near = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
    FlowField::from_fn(h, w, |y, x| {
        let d = da.get(y, x);
        let px = x as f64 + a.0 as f64 * d;
        let py = y as f64 + a.1 as f64 * d;
        let (cx, cy) = center.get(near(py, h), near(px, w));
        let qx = px + cx;
        let qy = py + cy;
        let d2 = db.get(near(qy, h), near(qx, w));
        (qx - b.0 as f64 * d2 - x as f64, qy - b.1 as f64 * d2 - y as f64)
    })
}
