//! Light-field containers and the tensor-display (TD) synthesis model.
//!
//! Angular convention: a scene plane at disparity `δ` with texture `T` is
//! seen in view `(u, v)` as `L(x, y, u, v) = T(x + δu, y + δv)`. A TD layer
//! sampled at `x + D_n u` therefore represents the plane at disparity `D_n`,
//! and an EPI row at angular offset `u` equals the center row resampled at
//! `x + δu`.
//!
//! TD layers are stored with index `i ∈ 0..N`; the fixed (non-adaptive) model
//! places layer `i` at the integer offset `i − (N − 1) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampling::{Shift, Tap};

/// Number of color channels in every light field.
pub const CHANNELS: usize = 3;

/// Odd-sized `U × V` grid of angular offsets centred on `(0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AngularGrid {
    u: usize,
    v: usize,
}

impl AngularGrid {
    pub fn new(u: usize, v: usize) -> Result<Self> {
        if u == 0 || v == 0 || u % 2 == 0 || v % 2 == 0 {
            return Err(Error::EvenGrid(u, v));
        }
        Ok(Self { u, v })
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn u_count(&self) -> usize {
        self.u
    }

    pub fn v_count(&self) -> usize {
        self.v
    }

    /// Number of views.
    pub fn len(&self) -> usize {
        self.u * self.v
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn u_radius(&self) -> i64 {
        (self.u as i64 - 1) / 2
    }

    pub fn v_radius(&self) -> i64 {
        (self.v as i64 - 1) / 2
    }

    /// Signed offset of the view stored at `index` (row-major over `u`, then `v`).
    pub fn offset_of(&self, index: usize) -> (i64, i64) {
        let iu = index / self.v;
        let iv = index % self.v;
        (iu as i64 - self.u_radius(), iv as i64 - self.v_radius())
    }

    pub fn index_of(&self, u: i64, v: i64) -> Result<usize> {
        let iu = u + self.u_radius();
        let iv = v + self.v_radius();
        if iu < 0 || iu >= self.u as i64 {
            return Err(Error::OutOfRange {
                what: "angular u",
                index: u,
                extent: self.u,
            });
        }
        if iv < 0 || iv >= self.v as i64 {
            return Err(Error::OutOfRange {
                what: "angular v",
                index: v,
                extent: self.v,
            });
        }
        Ok(iu as usize * self.v + iv as usize)
    }

    pub fn center_index(&self) -> usize {
        self.len() / 2
    }

    /// All `(u, v)` offsets in storage order.
    pub fn offsets(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        (0..self.len()).map(move |i| self.offset_of(i))
    }
}

/// A `U × V × H × W × 3` light field with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightField {
    grid: AngularGrid,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LightField {
    pub fn new(grid: AngularGrid, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "light field {}x{}x{height}x{width}x3 needs {expected} samples, got {}",
                grid.u_count(),
                grid.v_count(),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!(
                "light field sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            grid,
            height,
            width,
            data,
        })
    }

    /// Builds a light field from views given in storage order.
    pub fn from_views(grid: AngularGrid, views: &[Image]) -> Result<Self> {
        if views.len() != grid.len() {
            return Err(Error::Shape(format!(
                "expected {} views, got {}",
                grid.len(),
                views.len()
            )));
        }
        let (h, w, c) = views[0].dims();
        if c != CHANNELS {
            return Err(Error::Shape(format!("views must be RGB, got {c} channels")));
        }
        let mut data = Vec::with_capacity(grid.len() * h * w * CHANNELS);
        for view in views {
            view.ensure_same_dims(&views[0], "light field views")?;
            data.extend_from_slice(view.data());
        }
        Self::new(grid, h, w, data)
    }

    /// Every view equal to `image`.
    pub fn replicate(grid: AngularGrid, image: &Image) -> Result<Self> {
        Self::from_views(grid, &vec![image.clone(); grid.len()])
    }

    pub fn filled(grid: AngularGrid, height: usize, width: usize, value: f64) -> Self {
        Self {
            grid,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); grid.len() * height * width * CHANNELS],
        }
    }

    pub fn grid(&self) -> AngularGrid {
        self.grid
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn view_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Samples of the view stored at `index`.
    pub fn view_slice(&self, index: usize) -> &[f64] {
        let n = self.view_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn view_by_index(&self, index: usize) -> Image {
        Image::new(
            self.height,
            self.width,
            CHANNELS,
            self.view_slice(index).to_vec(),
        )
        .expect("view dims are consistent")
    }

    pub fn view(&self, u: i64, v: i64) -> Result<Image> {
        Ok(self.view_by_index(self.grid.index_of(u, v)?))
    }

    pub fn views(&self) -> Vec<Image> {
        (0..self.grid.len()).map(|i| self.view_by_index(i)).collect()
    }

    pub fn ensure_same_dims(&self, other: &LightField, what: &str) -> Result<()> {
        if self.grid != other.grid || self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{what}: {}x{}x{}x{} vs {}x{}x{}x{}",
                self.grid.u_count(),
                self.grid.v_count(),
                self.height,
                self.width,
                other.grid.u_count(),
                other.grid.v_count(),
                other.height,
                other.width
            )));
        }
        Ok(())
    }
}

/// Returns view `(0, 0)`.
pub fn center_view(lf: &LightField) -> Image {
    lf.view_by_index(lf.grid.center_index())
}

/// Low-rank layer stack `f_n^r`, stored `[N, R, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TDRepresentation {
    layers: usize,
    rank: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl TDRepresentation {
    pub fn new(
        layers: usize,
        rank: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if layers == 0 || rank == 0 {
            return Err(Error::Invalid(format!(
                "TD representation needs N >= 1 and R >= 1, got N={layers}, R={rank}"
            )));
        }
        let expected = layers * rank * height * width * CHANNELS;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "TD representation {layers}x{rank}x{height}x{width}x3 needs {expected} samples, got {}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Invalid(format!("TD layer value {bad} outside [0, 1]")));
        }
        Ok(Self {
            layers,
            rank,
            height,
            width,
            data,
        })
    }

    pub fn filled(layers: usize, rank: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            layers,
            rank,
            height,
            width,
            data: vec![value; layers * rank * height * width * CHANNELS],
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn layer_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    /// Samples of `f_i^r` for storage layer index `i`.
    pub fn layer(&self, i: usize, r: usize) -> &[f64] {
        let n = self.layer_len();
        let start = (i * self.rank + r) * n;
        &self.data[start..start + n]
    }

    pub fn layer_mut(&mut self, i: usize, r: usize) -> &mut [f64] {
        let n = self.layer_len();
        let start = (i * self.rank + r) * n;
        &mut self.data[start..start + n]
    }

    /// Conceptual signed layer index of storage index `i`.
    pub fn conceptual_index(&self, i: usize) -> f64 {
        i as f64 - (self.layers as f64 - 1.0) / 2.0
    }
}

/// Per-layer displacements `D_n` in pixels per unit angular offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementVector(Vec<f64>);

impl DisplacementVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("displacement vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "displacements must be finite: {values:?}"
            )));
        }
        Ok(Self(values))
    }

    /// Uniform integer spacing `i − (N − 1) / 2` of the standard TD model.
    pub fn fixed(layers: usize) -> Self {
        Self(
            (0..layers)
                .map(|i| i as f64 - (layers as f64 - 1.0) / 2.0)
                .collect(),
        )
    }

    /// `n` values spaced evenly over `[lo, hi]` (endpoints included).
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Self {
        if n == 1 {
            return Self(vec![0.5 * (lo + hi)]);
        }
        Self(
            (0..n)
                .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
                .collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.0.windows(2).all(|w| w[0] <= w[1])
    }

    pub fn sort(&mut self) {
        self.0.sort_by(|a, b| a.total_cmp(b));
    }
}

fn check_td_inputs(f: &TDRepresentation, d: &DisplacementVector) -> Result<()> {
    if f.layers != d.len() {
        return Err(Error::Shape(format!(
            "TD representation has {} layers but {} displacements",
            f.layers,
            d.len()
        )));
    }
    Ok(())
}

/// Adaptive TD synthesis: `L(x, y, u, v) = Σ_r Π_n f_n^r(x + D_n u, y + D_n v)`,
/// bilinear with border clamping, clipped to `[0, 1]`.
pub fn td_synthesize(
    f: &TDRepresentation,
    d: &DisplacementVector,
    grid: AngularGrid,
) -> Result<LightField> {
    check_td_inputs(f, d)?;
    let data = td_forward_raw(f.data(), f.layers, f.rank, f.height, f.width, d.values(), grid);
    Ok(LightField {
        grid,
        height: f.height,
        width: f.width,
        data,
    })
}

/// Standard TD synthesis with layers at uniform integer offsets.
pub fn td_synthesize_fixed(f: &TDRepresentation, grid: AngularGrid) -> Result<LightField> {
    td_synthesize(f, &DisplacementVector::fixed(f.layers), grid)
}

/// Gradient of `Σ grad_out ⊙ td_synthesize(f, d)` w.r.t. the layers and the
/// displacements. `grad_out` has the light-field layout.
pub fn td_synthesize_backward(
    f: &TDRepresentation,
    d: &DisplacementVector,
    grid: AngularGrid,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_td_inputs(f, d)?;
    let expected = grid.len() * f.height * f.width * CHANNELS;
    if grad_out.len() != expected {
        return Err(Error::Shape(format!(
            "TD output gradient needs {expected} samples, got {}",
            grad_out.len()
        )));
    }
    Ok(td_backward_raw(
        f.data(),
        f.layers,
        f.rank,
        f.height,
        f.width,
        d.values(),
        grid,
        grad_out,
    ))
}

pub(crate) fn td_forward_raw(
    f: &[f64],
    _layers: usize,
    rank: usize,
    height: usize,
    width: usize,
    d: &[f64],
    grid: AngularGrid,
) -> Vec<f64> {
    let layer_len = height * width * CHANNELS;
    let mut out = vec![0.0; grid.len() * layer_len];
    let mut prod = vec![0.0; layer_len];
    let mut sample = vec![0.0; layer_len];
    for (vi, (u, v)) in grid.offsets().enumerate() {
        let shifts: Vec<Shift> = d
            .iter()
            .map(|dn| Shift::new(height, width, dn * u as f64, dn * v as f64))
            .collect();
        let view = &mut out[vi * layer_len..(vi + 1) * layer_len];
        for r in 0..rank {
            prod.fill(1.0);
            for (n, shift) in shifts.iter().enumerate() {
                let start = (n * rank + r) * layer_len;
                shift.apply(&f[start..start + layer_len], &mut sample);
                prod.iter_mut().zip(&sample).for_each(|(p, s)| *p *= s);
            }
            view.iter_mut().zip(&prod).for_each(|(o, p)| *o += p);
        }
        view.iter_mut().for_each(|o| *o = o.clamp(0.0, 1.0));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn td_backward_raw(
    f: &[f64],
    layers: usize,
    rank: usize,
    height: usize,
    width: usize,
    d: &[f64],
    grid: AngularGrid,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let layer_len = height * width * CHANNELS;
    let mut grad_f = vec![0.0; f.len()];
    let mut grad_d = vec![0.0; layers];
    // per (n, r): resampled layer
    let mut s = vec![vec![0.0; layer_len]; layers * rank];
    let mut acc = vec![0.0; layer_len];
    let mut g = vec![0.0; layer_len];
    let mut suffix = vec![0.0; layer_len];
    let mut prefix = vec![vec![0.0; layer_len]; layers];
    let mut gn = vec![0.0; layer_len];
    for (vi, (u, v)) in grid.offsets().enumerate() {
        let g_view = &grad_out[vi * layer_len..(vi + 1) * layer_len];
        if g_view.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (uf, vf) = (u as f64, v as f64);
        let shifts: Vec<Shift> = d.iter().map(|dn| Shift::new(height, width, dn * uf, dn * vf)).collect();
        for n in 0..layers {
            for r in 0..rank {
                let start = (n * rank + r) * layer_len;
                shifts[n].apply(&f[start..start + layer_len], &mut s[n * rank + r]);
            }
        }
        // clip to [0, 1]: values are products of [0, 1] samples so the sum is >= 0
        acc.fill(0.0);
        for r in 0..rank {
            suffix.fill(1.0);
            for n in 0..layers {
                suffix.iter_mut().zip(&s[n * rank + r]).for_each(|(p, x)| *p *= x);
            }
            acc.iter_mut().zip(&suffix).for_each(|(a, p)| *a += p);
        }
        for ((gi, &go), &a) in g.iter_mut().zip(g_view).zip(&acc) {
            *gi = if a > 1.0 { 0.0 } else { go };
        }
        for r in 0..rank {
            prefix[0].fill(1.0);
            for n in 1..layers {
                let (done, rest) = prefix.split_at_mut(n);
                let src = &s[(n - 1) * rank + r];
                rest[0].iter_mut().zip(&done[n - 1]).zip(src).for_each(|((p, q), x)| *p = q * x);
            }
            suffix.fill(1.0);
            for n in (0..layers).rev() {
                let sn = &s[n * rank + r];
                for i in 0..layer_len {
                    gn[i] = g[i] * prefix[n][i] * suffix[i];
                    suffix[i] *= sn[i];
                }
                let start = (n * rank + r) * layer_len;
                let (dx, dy) = shifts[n].backward(&f[start..start + layer_len], &gn, &mut grad_f[start..start + layer_len]);
                grad_d[n] += dx * uf + dy * vf;
            }
        }
    }
    (grad_f, grad_d)
}

/// Orientation of an epipolar-plane image slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EpiAxis {
    /// Row `y0` of views `(u, 0)`: an image of `U` rows by `W` columns.
    Horizontal,
    /// Column `x0` of views `(0, v)`: an image of `V` rows by `H` columns.
    Vertical,
}

pub fn extract_epi(lf: &LightField, axis: EpiAxis, index: usize) -> Result<Image> {
    let grid = lf.grid;
    match axis {
        EpiAxis::Horizontal => {
            if index >= lf.height {
                return Err(Error::OutOfRange {
                    what: "EPI row",
                    index: index as i64,
                    extent: lf.height,
                });
            }
            let rows = grid.u_count();
            let mut out = Image::zeros(rows, lf.width, CHANNELS);
            for row in 0..rows {
                let u = row as i64 - grid.u_radius();
                let view = lf.view_slice(grid.index_of(u, 0)?);
                for x in 0..lf.width {
                    for c in 0..CHANNELS {
                        out.set(row, x, c, view[(index * lf.width + x) * CHANNELS + c]);
                    }
                }
            }
            Ok(out)
        }
        EpiAxis::Vertical => {
            if index >= lf.width {
                return Err(Error::OutOfRange {
                    what: "EPI column",
                    index: index as i64,
                    extent: lf.width,
                });
            }
            let rows = grid.v_count();
            let mut out = Image::zeros(rows, lf.height, CHANNELS);
            for row in 0..rows {
                let v = row as i64 - grid.v_radius();
                let view = lf.view_slice(grid.index_of(0, v)?);
                for y in 0..lf.height {
                    for c in 0..CHANNELS {
                        out.set(row, y, c, view[(y * lf.width + index) * CHANNELS + c]);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Fits the EPI line slope `s` such that row `a` (angular offset `a` from the
/// centre row) matches the centre row resampled at `x + s·a`.
///
/// Exhaustive search over `[-max_slope, max_slope]` on a 0.01 grid followed by
/// golden-section refinement; the cost is the mean squared luma difference
/// over in-bounds samples. A constant-disparity-`δ` light field yields `δ`.
pub fn estimate_epi_slope(epi: &Image, max_slope: f64) -> Result<f64> {
    let rows = epi.height();
    if rows < 3 || rows % 2 == 0 {
        return Err(Error::Invalid(format!(
            "EPI slope fit needs an odd number (>= 3) of angular rows, got {rows}"
        )));
    }
    let luma = epi.luma();
    if luma.variance() < 1e-10 {
        return Err(Error::Invalid("EPI is flat; slope is undefined".into()));
    }
    let width = epi.width();
    let center = rows / 2;
    let cost = |s: f64| -> f64 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for row in 0..rows {
            if row == center {
                continue;
            }
            let a = row as f64 - center as f64;
            for x in 0..width {
                let pos = x as f64 + s * a;
                if pos < 0.0 || pos > (width - 1) as f64 {
                    continue;
                }
                let x0 = pos.floor() as usize;
                let x1 = (x0 + 1).min(width - 1);
                let t = pos - x0 as f64;
                let reference = (1.0 - t) * luma.get(center, x0, 0) + t * luma.get(center, x1, 0);
                let diff = luma.get(row, x, 0) - reference;
                acc += diff * diff;
                count += 1;
            }
        }
        if count < width / 4 {
            f64::INFINITY
        } else {
            acc / count as f64
        }
    };
    let step = 0.01;
    let steps = (max_slope / step).ceil() as i64;
    let mut best = (f64::INFINITY, 0.0);
    for k in -steps..=steps {
        let s = k as f64 * step;
        let c = cost(s);
        if c < best.0 {
            best = (c, s);
        }
    }
    let (mut lo, mut hi) = (best.1 - step, best.1 + step);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let (mut fa, mut fb) = (cost(a), cost(b));
    for _ in 0..40 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = cost(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = cost(b);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Shift-and-add refocusing: mean over views of `L(u, v)` sampled at
/// `(x − αu, y − αv)`. Content at disparity `α` comes out sharp.
pub fn refocus(lf: &LightField, alpha: f64) -> Result<Image> {
    if !alpha.is_finite() {
        return Err(Error::Invalid(format!("refocus slope must be finite, got {alpha}")));
    }
    let (h, w) = (lf.height, lf.width);
    let mut out = Image::zeros(h, w, CHANNELS);
    let scale = 1.0 / lf.grid.len() as f64;
    for (vi, (u, v)) in lf.grid.offsets().enumerate() {
        let view = lf.view_slice(vi);
        for y in 0..h {
            for x in 0..w {
                let tap = Tap::new(
                    x as f64 - alpha * u as f64,
                    y as f64 - alpha * v as f64,
                    w,
                    h,
                );
                for c in 0..CHANNELS {
                    let i = out.index(y, x, c);
                    out.data_mut()[i] += scale * tap.sample(view, CHANNELS, c);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            0.5 + 0.2 * ((x as f64 * 0.9 + c as f64).sin() * (y as f64 * 0.7).cos())
        })
    }

    #[test]
    fn grid_rejects_even_sizes() {
        assert!(AngularGrid::new(4, 3).is_err());
        assert!(AngularGrid::new(0, 1).is_err());
        let g = AngularGrid::new(5, 3).unwrap();
        assert_eq!(g.offset_of(g.center_index()), (0, 0));
        assert_eq!(g.index_of(-2, -1).unwrap(), 0);
        assert!(g.index_of(3, 0).is_err());
    }

    #[test]
    fn identity_layers_reproduce_the_image() {
        let img = textured(6, 7);
        let grid = AngularGrid::square(3).unwrap();
        let mut f = TDRepresentation::filled(3, 1, 6, 7, 1.0);
        f.layer_mut(1, 0).copy_from_slice(img.data());
        let d = DisplacementVector::new(vec![-1.0, 0.0, 1.0]).unwrap();
        let lf = td_synthesize(&f, &d, grid).unwrap();
        for view in lf.views() {
            assert_eq!(view, img);
        }
    }

    #[test]
    fn zero_layers_give_zero_field() {
        let f = TDRepresentation::filled(3, 2, 4, 4, 0.0);
        let lf = td_synthesize_fixed(&f, AngularGrid::square(3).unwrap()).unwrap();
        assert!(lf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_displacements_are_rejected() {
        let f = TDRepresentation::filled(3, 1, 4, 4, 0.5);
        let d = DisplacementVector::new(vec![0.0, 1.0]).unwrap();
        assert!(matches!(
            td_synthesize(&f, &d, AngularGrid::square(3).unwrap()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn center_view_ignores_displacements() {
        let img = textured(5, 5);
        let grid = AngularGrid::square(3).unwrap();
        let mut f = TDRepresentation::filled(2, 1, 5, 5, 1.0);
        f.layer_mut(0, 0).copy_from_slice(img.data());
        for d in [vec![0.0, 3.3], vec![-7.1, 2.0]] {
            let lf = td_synthesize(&f, &DisplacementVector::new(d).unwrap(), grid).unwrap();
            assert_eq!(center_view(&lf), img);
        }
    }

    #[test]
    fn single_view_center_and_epi() {
        let img = textured(4, 6);
        let lf = LightField::replicate(AngularGrid::square(1).unwrap(), &img).unwrap();
        assert_eq!(center_view(&lf), img);
        let epi = extract_epi(&lf, EpiAxis::Horizontal, 2).unwrap();
        assert_eq!(epi.height(), 1);
        for x in 0..6 {
            assert_eq!(epi.pixel(0, x), img.pixel(2, x));
        }
    }

    #[test]
    fn epi_of_static_field_is_constant_along_angle() {
        let img = textured(8, 8);
        let lf = LightField::replicate(AngularGrid::square(5).unwrap(), &img).unwrap();
        let epi = extract_epi(&lf, EpiAxis::Vertical, 3).unwrap();
        for row in 1..5 {
            for col in 0..8 {
                assert_eq!(epi.pixel(row, col), epi.pixel(0, col));
            }
        }
        assert!(extract_epi(&lf, EpiAxis::Horizontal, 8).is_err());
    }

    #[test]
    fn refocus_of_static_field_is_the_view() {
        let img = textured(6, 6);
        let lf = LightField::replicate(AngularGrid::square(3).unwrap(), &img).unwrap();
        let out = refocus(&lf, 0.0).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // a constant field is unchanged for any slope
        let flat = LightField::filled(AngularGrid::square(3).unwrap(), 5, 5, 0.3);
        let out = refocus(&flat, 1.7).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(refocus(&lf, f64::NAN).is_err());
    }

    #[test]
    fn light_field_rejects_out_of_range_samples() {
        let grid = AngularGrid::square(1).unwrap();
        assert!(LightField::new(grid, 1, 1, vec![0.2, 1.5, 0.0]).is_err());
        assert!(LightField::new(grid, 1, 1, vec![0.2, f64::NAN, 0.0]).is_err());
        assert!(LightField::new(grid, 1, 1, vec![0.2, 0.3]).is_err());
    }
}
