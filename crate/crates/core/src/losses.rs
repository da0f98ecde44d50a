//! Self-supervised loss terms and the supervised refinement loss.
//!
//! Every L1 term is a mean, so the default weights do not depend on
//! resolution. Terms that involve warping skip a [`BORDER_MARGIN`]-pixel
//! frame. Each `*_grad` function returns the loss together with its gradient
//! w.r.t. the light field samples (or the displacements, for the bins term).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{AngularGrid, DisplacementVector, LightField, CHANNELS};
use crate::warp::{
    interior, sai_displacement, warp_backward_raw, warp_raw, DisparityMap, FlowField, HoleMask,
    BORDER_MARGIN,
};

/// Upper bound on pixels used by the bins chamfer.
pub const BINS_MAX_SAMPLES: usize = 10_000;
const BINS_SEED: u64 = 0x5eed_b175;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub photo: f64,
    pub geo: f64,
    pub temp: f64,
    pub occ: f64,
    pub bins: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            geo: 1.0,
            temp: 0.5,
            occ: 0.2,
            bins: 2.0,
            tv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.photo, self.geo, self.temp, self.occ, self.bins, self.tv]
    }

    pub fn validate(&self) -> Result<()> {
        let names = ["photo", "geo", "temp", "occ", "bins", "tv"];
        for (name, w) in names.iter().zip(self.as_array()) {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("loss weight {name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss values for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub geo: f64,
    pub temp: f64,
    pub occ: f64,
    pub bins: f64,
    pub tv: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 6] {
        [self.photo, self.geo, self.temp, self.occ, self.bins, self.tv]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub photo: f64,
    pub geo: f64,
    pub temp: f64,
    pub occ: f64,
    pub bins: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossReport {
    /// One-line `key=value` record for the training log.
    pub fn record(&self, step: usize) -> String {
        format!(
            "step={step} photo={:.6e} geo={:.6e} temp={:.6e} occ={:.6e} bins={:.6e} tv={:.6e} total={:.6e}",
            self.photo, self.geo, self.temp, self.occ, self.bins, self.tv, self.total
        )
    }

    /// Averages several reports term by term.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.photo += r.photo / n;
            out.geo += r.geo / n;
            out.temp += r.temp / n;
            out.occ += r.occ / n;
            out.bins += r.bins / n;
            out.tv += r.tv / n;
            out.total += r.total / n;
        }
        out
    }
}

pub fn total_self_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    weights.validate()?;
    let t = terms.as_array();
    if let Some(bad) = t.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Invalid(format!("loss terms must be >= 0, got {bad}")));
    }
    let total = t.iter().zip(weights.as_array()).map(|(a, w)| a * w).sum();
    Ok(LossReport {
        photo: terms.photo,
        geo: terms.geo,
        temp: terms.temp,
        occ: terms.occ,
        bins: terms.bins,
        tv: terms.tv,
        total,
    })
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_image(lf: &LightField, img: &Image, what: &str) -> Result<()> {
    if img.channels() != CHANNELS {
        return Err(Error::Shape(format!("{what}: expected {CHANNELS} channels, got {}", img.channels())));
    }
    img.ensure_spatial(lf.height(), lf.width(), what)
}

fn check_disparity(lf: &LightField, d: &DisparityMap) -> Result<()> {
    if d.height() != lf.height() || d.width() != lf.width() {
        return Err(Error::Shape(format!(
            "disparity map is {}x{}, light field is {}x{}",
            d.height(),
            d.width(),
            lf.height(),
            lf.width()
        )));
    }
    Ok(())
}

/// Mean |a − b| over the interior; writes `sign(a − b)/count` into `grad`
/// when given.
fn interior_mae(
    a: &[f64],
    b: &[f64],
    height: usize,
    width: usize,
    margin: usize,
    grad: Option<&mut [f64]>,
    scale: f64,
) -> f64 {
    let (ys, xs) = interior(height, width, margin);
    let count = ys.len() * xs.len() * CHANNELS;
    if count == 0 {
        return 0.0;
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let mut grad = grad;
    for y in ys {
        for x in xs.clone() {
            for c in 0..CHANNELS {
                let i = (y * width + x) * CHANNELS + c;
                let diff = a[i] - b[i];
                sum += diff.abs();
                if let Some(g) = grad.as_deref_mut() {
                    g[i] += scale * sign(diff) * inv;
                }
            }
        }
    }
    sum * inv
}

/// `‖L̂(0) − I_t‖₁`, mean over all center-view samples.
pub fn photometric_loss(lf: &LightField, i_t: &Image) -> Result<f64> {
    Ok(photometric_loss_grad(lf, i_t)?.0)
}

pub fn photometric_loss_grad(lf: &LightField, i_t: &Image) -> Result<(f64, Vec<f64>)> {
    check_image(lf, i_t, "photometric loss")?;
    let mut grad = vec![0.0; lf.data().len()];
    let ci = lf.grid().center_index();
    let n = lf.view_len();
    let loss = interior_mae(
        lf.view_slice(ci),
        i_t.data(),
        lf.height(),
        lf.width(),
        0,
        Some(&mut grad[ci * n..(ci + 1) * n]),
        1.0,
    );
    Ok((loss, grad))
}

/// Mean over views of the interior MAE between each view warped to the
/// center with `d` and `I_t`.
pub fn geometric_loss(lf: &LightField, i_t: &Image, d: &DisparityMap) -> Result<f64> {
    Ok(geometric_loss_grad(lf, i_t, d)?.0)
}

pub fn geometric_loss_grad(lf: &LightField, i_t: &Image, d: &DisparityMap) -> Result<(f64, Vec<f64>)> {
    check_image(lf, i_t, "geometric loss")?;
    check_disparity(lf, d)?;
    Ok(geo_raw(lf.data(), lf.grid(), lf.height(), lf.width(), i_t.data(), d, None))
}

/// Shared geometric/temporal kernel on raw samples. With `flow`, the
/// center-aligned view is warped again by the flow before comparison.
pub(crate) fn geo_raw(
    data: &[f64],
    grid: AngularGrid,
    height: usize,
    width: usize,
    target: &[f64],
    d: &DisparityMap,
    flow: Option<&FlowField>,
) -> (f64, Vec<f64>) {
    let n = height * width * CHANNELS;
    let views = grid.len();
    let mut grad = vec![0.0; data.len()];
    let mut loss = 0.0;
    let scale = 1.0 / views as f64;
    for (idx, (u, v)) in grid.offsets().enumerate() {
        let view = &data[idx * n..(idx + 1) * n];
        let disp = sai_displacement(u, v, d);
        let aligned = warp_raw(view, height, width, CHANNELS, disp.data());
        let mut g_out = vec![0.0; n];
        match flow {
            None => {
                loss += scale
                    * interior_mae(&aligned, target, height, width, BORDER_MARGIN, Some(&mut g_out), scale);
                let (g_view, _) =
                    warp_backward_raw(view, height, width, CHANNELS, disp.data(), &g_out, false);
                add_into(&mut grad[idx * n..(idx + 1) * n], &g_view);
            }
            Some(o) => {
                let moved = warp_raw(&aligned, height, width, CHANNELS, o.data());
                loss += scale
                    * interior_mae(&moved, target, height, width, BORDER_MARGIN, Some(&mut g_out), scale);
                let (g_aligned, _) =
                    warp_backward_raw(&aligned, height, width, CHANNELS, o.data(), &g_out, false);
                let (g_view, _) =
                    warp_backward_raw(view, height, width, CHANNELS, disp.data(), &g_aligned, false);
                add_into(&mut grad[idx * n..(idx + 1) * n], &g_view);
            }
        }
    }
    (loss, grad)
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Temporal consistency against the next frame. `flow` is `O(I_next, I_t)`:
/// it gathers content of frame `t` onto frame `t + 1`.
pub fn temporal_loss(lf: &LightField, i_next: &Image, d: &DisparityMap, flow: &FlowField) -> Result<f64> {
    Ok(temporal_loss_grad(lf, i_next, d, flow)?.0)
}

pub fn temporal_loss_grad(
    lf: &LightField,
    i_next: &Image,
    d: &DisparityMap,
    flow: &FlowField,
) -> Result<(f64, Vec<f64>)> {
    check_image(lf, i_next, "temporal loss")?;
    check_disparity(lf, d)?;
    if flow.height() != lf.height() || flow.width() != lf.width() {
        return Err(Error::Shape("flow vs light field".into()));
    }
    Ok(geo_raw(lf.data(), lf.grid(), lf.height(), lf.width(), i_next.data(), d, Some(flow)))
}

/// Per-view candidates for the disocclusion term, one image per view in grid
/// order.
#[derive(Clone, Debug)]
pub struct Candidates {
    pub prev: Vec<Image>,
    pub next: Vec<Image>,
}

/// Per-pixel minimum re-projection error over the two candidates, averaged
/// over masked interior samples. Zero when nothing is masked.
pub fn disocclusion_loss(lf: &LightField, candidates: &Candidates, mask: &HoleMask) -> Result<f64> {
    Ok(disocclusion_loss_grad(lf, candidates, mask)?.0)
}

pub fn disocclusion_loss_grad(
    lf: &LightField,
    candidates: &Candidates,
    mask: &HoleMask,
) -> Result<(f64, Vec<f64>)> {
    let views = lf.grid().len();
    if candidates.prev.len() != views || candidates.next.len() != views || mask.grid() != lf.grid() {
        return Err(Error::Shape("disocclusion candidates/mask do not match the grid".into()));
    }
    if mask.height() != lf.height() || mask.width() != lf.width() {
        return Err(Error::Shape("hole mask vs light field".into()));
    }
    for img in candidates.prev.iter().chain(&candidates.next) {
        check_image(lf, img, "disocclusion candidate")?;
    }
    let (h, w) = (lf.height(), lf.width());
    let (ys, xs) = interior(h, w, BORDER_MARGIN);
    let n = lf.view_len();
    let mut count = 0usize;
    for m in mask.views() {
        for y in ys.clone() {
            for x in xs.clone() {
                count += m.get(y, x) as usize;
            }
        }
    }
    let mut grad = vec![0.0; lf.data().len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / (count * CHANNELS) as f64;
    let mut sum = 0.0;
    for idx in 0..views {
        let view = lf.view_slice(idx);
        let (prev, next) = (candidates.prev[idx].data(), candidates.next[idx].data());
        let m = mask.view(idx);
        for y in ys.clone() {
            for x in xs.clone() {
                if !m.get(y, x) {
                    continue;
                }
                for c in 0..CHANNELS {
                    let i = (y * w + x) * CHANNELS + c;
                    let ep = view[i] - prev[i];
                    let en = view[i] - next[i];
                    let e = if ep.abs() <= en.abs() { ep } else { en };
                    sum += e.abs();
                    grad[idx * n + i] += sign(e) * inv;
                }
            }
        }
    }
    Ok((sum * inv, grad))
}

fn bins_samples(d: &DisparityMap) -> Vec<f64> {
    let all = d.data();
    if all.len() <= BINS_MAX_SAMPLES {
        return all.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BINS_SEED);
    let mut idx = sample(&mut rng, all.len(), BINS_MAX_SAMPLES).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i]).collect()
}

/// Bidirectional chamfer distance between the displacements and the
/// disparity values.
pub fn bin_density_loss(dv: &DisplacementVector, d: &DisparityMap) -> Result<f64> {
    Ok(bin_density_loss_grad(dv, d)?.0)
}

/// Loss and gradient w.r.t. the displacement values.
pub fn bin_density_loss_grad(dv: &DisplacementVector, d: &DisparityMap) -> Result<(f64, Vec<f64>)> {
    bins_raw(dv.values(), d)
}

pub(crate) fn bins_raw(dv: &[f64], d: &DisparityMap) -> Result<(f64, Vec<f64>)> {
    if dv.is_empty() {
        return Err(Error::Invalid("bins loss needs at least one displacement".into()));
    }
    let pts = bins_samples(d);
    if pts.is_empty() {
        return Err(Error::Invalid("bins loss needs a non-empty disparity map".into()));
    }
    let mut grad = vec![0.0; dv.len()];
    let inv_p = 1.0 / pts.len() as f64;
    let inv_n = 1.0 / dv.len() as f64;
    let mut sum_p = 0.0;
    for &p in &pts {
        let (best, _) = dv
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &v)| {
                let e = (p - v).abs();
                if e < acc.1 { (k, e) } else { acc }
            });
        let e = p - dv[best];
        sum_p += e.abs();
        grad[best] -= sign(e) * inv_p;
    }
    let mut sum_n = 0.0;
    for (k, &v) in dv.iter().enumerate() {
        let nearest = pts
            .iter()
            .copied()
            .min_by(|a, b| (v - a).abs().total_cmp(&(v - b).abs()))
            .expect("non-empty");
        let e = v - nearest;
        sum_n += e.abs();
        grad[k] += sign(e) * inv_n;
    }
    Ok((sum_p * inv_p + sum_n * inv_n, grad))
}

/// Mean absolute horizontal plus mean absolute vertical first difference,
/// over every view.
pub fn tv_loss(lf: &LightField) -> f64 {
    tv_loss_grad(lf).0
}

pub fn tv_loss_grad(lf: &LightField) -> (f64, Vec<f64>) {
    tv_raw(lf.data(), lf.grid().len(), lf.height(), lf.width())
}

pub(crate) fn tv_raw(data: &[f64], views: usize, h: usize, w: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; data.len()];
    let n = h * w * CHANNELS;
    let nx = views * h * w.saturating_sub(1) * CHANNELS;
    let ny = views * h.saturating_sub(1) * w * CHANNELS;
    let (mut sx, mut sy) = (0.0, 0.0);
    for view in 0..views {
        let base = view * n;
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    let i = base + (y * w + x) * CHANNELS + c;
                    if x + 1 < w {
                        let j = i + CHANNELS;
                        let e = data[j] - data[i];
                        sx += e.abs();
                        let g = sign(e) / nx as f64;
                        grad[j] += g;
                        grad[i] -= g;
                    }
                    if y + 1 < h {
                        let j = i + w * CHANNELS;
                        let e = data[j] - data[i];
                        sy += e.abs();
                        let g = sign(e) / ny as f64;
                        grad[j] += g;
                        grad[i] -= g;
                    }
                }
            }
        }
    }
    let tx = if nx > 0 { sx / nx as f64 } else { 0.0 };
    let ty = if ny > 0 { sy / ny as f64 } else { 0.0 };
    (tx + ty, grad)
}

/// Mean absolute error over every sample of two light fields.
pub fn refinement_loss(refined: &LightField, truth: &LightField) -> Result<f64> {
    Ok(refinement_loss_grad(refined, truth)?.0)
}

pub fn refinement_loss_grad(refined: &LightField, truth: &LightField) -> Result<(f64, Vec<f64>)> {
    refined.ensure_same_dims(truth, "refinement loss")?;
    Ok(mae_raw(refined.data(), truth.data()))
}

pub(crate) fn mae_raw(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let inv = 1.0 / a.len().max(1) as f64;
    let mut sum = 0.0;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            sum += (x - y).abs();
            sign(x - y) * inv
        })
        .collect();
    (sum * inv, grad)
}
