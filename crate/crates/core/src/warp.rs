//! Geometric resampling: depth/disparity conversion, bilinear inverse
//! warping, view-to-center warps, forward splatting and flow candidates.
//!
//! Flow fields follow the optical-flow convention `O(A, B)`: pixel `p` of `A`
//! shows the same point as `B(p + O(A, B)(p))`, so gathering with
//! [`inverse_warp`]`(B, O(A, B))` reconstructs `A`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{AngularGrid, LightField};
use crate::sampling::Tap;

/// Pixels this close to the frame edge are excluded from loss and metric
/// reductions.
pub const BORDER_MARGIN: usize = 2;

/// Splat coverage below this is a hole.
pub const HOLE_WEIGHT_THRESHOLD: f64 = 0.5;

macro_rules! scalar_map {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(Image);

        impl $name {
            pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(concat!(stringify!($name), " must be finite").into()));
                }
                Ok(Self(Image::new(height, width, 1, data)?))
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Self {
                Self(Image::filled(height, width, 1, value))
            }

            pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
                Self(Image::from_fn(height, width, 1, |y, x, _| f(y, x)))
            }

            pub fn height(&self) -> usize {
                self.0.height()
            }

            pub fn width(&self) -> usize {
                self.0.width()
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize) -> f64 {
                self.0.data()[y * self.0.width() + x]
            }

            pub fn data(&self) -> &[f64] {
                self.0.data()
            }

            pub fn as_image(&self) -> &Image {
                &self.0
            }

            pub fn min_max(&self) -> (f64, f64) {
                self.0.min_max()
            }

            pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
                Self(self.0.map(f))
            }
        }
    };
}

scalar_map!(
    /// Relative depth `z`, unitless, nominally in `[0, 1]`.
    DepthMap
);
scalar_map!(
    /// Disparity `d` in pixels per unit angular offset.
    DisparityMap
);

/// Affine relation `d = a·z + b` between relative depth and disparity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDepthParams {
    pub a: f64,
    pub b: f64,
}

impl AffineDepthParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0) || !b.is_finite() || !a.is_finite() {
            return Err(Error::Invalid(format!(
                "affine depth params need a > 0 and finite b, got a={a}, b={b}"
            )));
        }
        Ok(Self { a, b })
    }
}

pub fn depth_to_disparity(z: &DepthMap, params: AffineDepthParams) -> DisparityMap {
    DisparityMap(z.0.map(|v| params.a * v + params.b))
}

impl DisparityMap {
    /// Inverse of [`depth_to_disparity`].
    pub fn to_depth(&self, params: AffineDepthParams) -> DepthMap {
        DepthMap(self.0.map(|d| (d - params.b) / params.a))
    }

    pub fn scaled(&self, s: f64) -> DisparityMap {
        self.map(|d| d * s)
    }
}

/// Per-pixel 2D displacement `(dx, dy)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Image);

impl FlowField {
    /// `data` is interleaved `dx, dy` per pixel, row-major.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("flow must be finite".into()));
        }
        Ok(Self(Image::new(height, width, 2, data)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Image::zeros(height, width, 2))
    }

    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self(Image::from_fn(height, width, 2, |_, _, c| if c == 0 { dx } else { dy }))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self(Image::new(height, width, 2, data).expect("flow dims"))
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.0.width() + x) * 2;
        (self.0.data()[i], self.0.data()[i + 1])
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Binary `[H, W]` mask, 1 = set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        if data.iter().any(|&m| m > 1) {
            return Err(Error::Invalid("mask entries must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m != 0).count()
    }
}

/// Disocclusion mask per view, `[U, V, H, W]`, 1 = hole after forward warping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HoleMask {
    grid: AngularGrid,
    views: Vec<Mask>,
}

impl HoleMask {
    pub fn new(grid: AngularGrid, views: Vec<Mask>) -> Result<Self> {
        if views.len() != grid.len() {
            return Err(Error::Shape(format!(
                "hole mask needs {} views, got {}",
                grid.len(),
                views.len()
            )));
        }
        if views.iter().any(|m| m.height != views[0].height || m.width != views[0].width) {
            return Err(Error::Shape("hole mask views differ in size".into()));
        }
        Ok(Self { grid, views })
    }

    pub fn empty(grid: AngularGrid, height: usize, width: usize) -> Self {
        Self {
            grid,
            views: vec![Mask::zeros(height, width); grid.len()],
        }
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.views[0].height
    }

    pub fn width(&self) -> usize {
        self.views[0].width
    }

    pub fn view(&self, index: usize) -> &Mask {
        &self.views[index]
    }

    pub fn views(&self) -> &[Mask] {
        &self.views
    }

    pub fn count(&self) -> usize {
        self.views.iter().map(Mask::count).sum()
    }
}

/// Inclusive-exclusive row/column ranges that survive a border margin.
pub fn interior(height: usize, width: usize, margin: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let ys = margin.min(height)..height.saturating_sub(margin).max(margin.min(height));
    let xs = margin.min(width)..width.saturating_sub(margin).max(margin.min(width));
    (ys, xs)
}

pub(crate) fn warp_raw(src: &[f64], height: usize, width: usize, channels: usize, disp: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; height * width * channels];
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let tap = Tap::new(x as f64 + disp[2 * p], y as f64 + disp[2 * p + 1], width, height);
            for c in 0..channels {
                out[p * channels + c] = tap.sample(src, channels, c);
            }
        }
    }
    out
}

/// Gradients of `Σ grad_out ⊙ warp(src, disp)` w.r.t. `src` and `disp`.
pub(crate) fn warp_backward_raw(
    src: &[f64],
    height: usize,
    width: usize,
    channels: usize,
    disp: &[f64],
    grad_out: &[f64],
    want_disp: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut g_src = vec![0.0; src.len()];
    let mut g_disp = if want_disp { vec![0.0; disp.len()] } else { Vec::new() };
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            let go = &grad_out[p * channels..(p + 1) * channels];
            if go.iter().all(|&g| g == 0.0) {
                continue;
            }
            let tap = Tap::new(x as f64 + disp[2 * p], y as f64 + disp[2 * p + 1], width, height);
            for (c, &g) in go.iter().enumerate() {
                tap.scatter(&mut g_src, channels, c, g);
                if want_disp {
                    let (_, gx, gy) = tap.sample_with_grad(src, channels, c);
                    g_disp[2 * p] += g * gx;
                    g_disp[2 * p + 1] += g * gy;
                }
            }
        }
    }
    (g_src, g_disp)
}

fn check_flow(img: &Image, flow: &FlowField) -> Result<()> {
    img.ensure_spatial(flow.height(), flow.width(), "displacement field vs image")
}

/// `out(p) = img(p + displacement(p))`, bilinear with border clamping.
pub fn inverse_warp(img: &Image, displacement: &FlowField) -> Result<Image> {
    check_flow(img, displacement)?;
    let (h, w, c) = img.dims();
    Image::new(h, w, c, warp_raw(img.data(), h, w, c, displacement.data()))
}

/// Gradients of `Σ grad_out ⊙ inverse_warp(img, displacement)` w.r.t. the
/// image and the displacement field (interleaved `dx, dy`).
pub fn inverse_warp_backward(
    img: &Image,
    displacement: &FlowField,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_flow(img, displacement)?;
    if grad_out.len() != img.data().len() {
        return Err(Error::Shape("warp output gradient has the wrong length".into()));
    }
    let (h, w, c) = img.dims();
    Ok(warp_backward_raw(img.data(), h, w, c, displacement.data(), grad_out, true))
}

/// Gather field that maps view `(u, v)` onto the center view for disparity `d`.
pub fn sai_displacement(u: i64, v: i64, d: &DisparityMap) -> FlowField {
    let (uf, vf) = (u as f64, v as f64);
    FlowField::from_fn(d.height(), d.width(), |y, x| {
        let dp = d.get(y, x);
        (-uf * dp, -vf * dp)
    })
}

/// Warps view `(u, v)` of `lf` onto the center view using the center-view
/// disparity `d`.
pub fn warp_sai_to_center(lf: &LightField, u: i64, v: i64, d: &DisparityMap) -> Result<Image> {
    let index = lf.grid().index_of(u, v)?;
    if d.height() != lf.height() || d.width() != lf.width() {
        return Err(Error::Shape("disparity map vs light field".into()));
    }
    inverse_warp(&lf.view_by_index(index), &sai_displacement(u, v, d))
}

/// Forward-splats `img` to view `(u, v)`: source pixel `p` lands at
/// `p − (u, v)·d(p)` with bilinear weights. Where splats overlap, the
/// contributions with the largest disparity win. Targets with total weight
/// below [`HOLE_WEIGHT_THRESHOLD`] are holes; their color is zero.
pub fn forward_splat_disparity(
    img: &Image,
    d: &DisparityMap,
    u: i64,
    v: i64,
) -> Result<(Image, Mask)> {
    let (h, w, c) = img.dims();
    img.ensure_spatial(d.height(), d.width(), "disparity map vs image")?;
    // z-buffered accumulators: winning disparity, its weight and color sum,
    // plus total weight from every source
    let mut zbuf = vec![f64::NEG_INFINITY; h * w];
    let mut front_weight = vec![0.0; h * w];
    let mut front_color = vec![0.0; h * w * c];
    let mut total = vec![0.0; h * w];
    const SAME_SURFACE: f64 = 1e-6;
    for y in 0..h {
        for x in 0..w {
            let dp = d.get(y, x);
            let tx = x as f64 - u as f64 * dp;
            let ty = y as f64 - v as f64 * dp;
            let x0 = tx.floor();
            let y0 = ty.floor();
            let fx = tx - x0;
            let fy = ty - y0;
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (cx, cy, wgt) in corners {
                if wgt <= 0.0 || cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                    continue;
                }
                let t = cy as usize * w + cx as usize;
                total[t] += wgt;
                if dp > zbuf[t] + SAME_SURFACE {
                    zbuf[t] = dp;
                    front_weight[t] = 0.0;
                    front_color[t * c..(t + 1) * c].iter_mut().for_each(|v| *v = 0.0);
                }
                if (dp - zbuf[t]).abs() <= SAME_SURFACE {
                    front_weight[t] += wgt;
                    for ch in 0..c {
                        front_color[t * c + ch] += wgt * img.get(y, x, ch);
                    }
                }
            }
        }
    }
    let mut out = Image::zeros(h, w, c);
    let mut holes = Mask::zeros(h, w);
    for t in 0..h * w {
        if total[t] < HOLE_WEIGHT_THRESHOLD {
            holes.data[t] = 1;
            continue;
        }
        for ch in 0..c {
            out.data_mut()[t * c + ch] = front_color[t * c + ch] / front_weight[t];
        }
    }
    Ok((out, holes))
}

/// Disocclusion masks for every view of `grid`, from forward-splatting `img`.
pub fn hole_mask(img: &Image, d: &DisparityMap, grid: AngularGrid) -> Result<HoleMask> {
    let views = grid
        .offsets()
        .map(|(u, v)| forward_splat_disparity(img, d, u, v).map(|(_, m)| m))
        .collect::<Result<Vec<_>>>()?;
    HoleMask::new(grid, views)
}

/// Candidate for a target view gathered from an adjacent frame: `flow` must
/// be `O(target, I_adj)`.
pub fn flow_warp_candidate(i_adj: &Image, flow: &FlowField) -> Result<Image> {
    inverse_warp(i_adj, flow)
}
