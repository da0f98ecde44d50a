//! Direct per-frame optimization of the layer stack and displacements
//! against the self-supervised loss, without a network in the loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{FrameRef, Provider};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lf::{td_backward_raw, td_forward_raw, AngularGrid, DisplacementVector, LightField, TDRepresentation};
use crate::losses::{
    bins_raw, disocclusion_loss_grad, geometric_loss_grad, photometric_loss_grad, temporal_loss_grad,
    tv_raw, Candidates, LossReport, LossTerms, LossWeights, total_self_loss,
};
use crate::warp::{depth_to_disparity, flow_warp_candidate, hole_mask, DisparityMap, FlowField, HoleMask};

/// Amplitude of the seeded jitter added to the initial layers so the rank
/// terms do not stay identical.
const INIT_JITTER: f64 = 0.02;
/// Final step size as a fraction of the initial one (cosine schedule).
const LR_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FInit {
    /// Every layer sample at `(0.5 / R)^(1/N)`, so the synthesized LF is 0.5.
    Uniform,
    /// Every layer set to `(I_t / R)^(1/N)`, so each view starts as `I_t`.
    CenterBroadcast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    /// Step size for the layers.
    pub lr: f64,
    /// Step size for the displacements, pixels.
    pub lr_d: f64,
    pub layers: usize,
    pub rank: usize,
    pub f_init: FInit,
    /// Starting displacements; `None` spreads them evenly over the
    /// disparity range.
    pub d_init: Option<Vec<f64>>,
    /// Optimize the displacements jointly with the layers.
    pub adaptive: bool,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.02,
            lr_d: 0.01,
            layers: 3,
            rank: 4,
            f_init: FInit::Uniform,
            d_init: None,
            adaptive: true,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("fit needs at least one iteration".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_d > 0.0) {
            return Err(Error::Config(format!("fit step sizes must be > 0, got {} and {}", self.lr, self.lr_d)));
        }
        if self.layers == 0 || self.rank == 0 {
            return Err(Error::Config("fit needs N >= 1 and R >= 1".into()));
        }
        if let Some(d) = &self.d_init {
            if d.len() != self.layers {
                return Err(Error::Config(format!(
                    "d_init has {} values for {} layers",
                    d.len(),
                    self.layers
                )));
            }
        }
        self.weights.validate()
    }
}

/// Everything one frame's loss needs.
#[derive(Clone, Debug)]
pub struct FitInputs {
    pub grid: AngularGrid,
    pub cur: Image,
    pub disparity: DisparityMap,
    /// `I_{t+1}` and `O(I_{t+1}, I_t)`, for the temporal term.
    pub next: Option<(Image, FlowField)>,
    /// Per-view images gathered from the adjacent frames.
    pub candidates: Option<Candidates>,
    /// Disocclusion masks; computed by splatting `cur` when built here.
    pub holes: HoleMask,
}

impl FitInputs {
    /// Inputs with only the photometric, geometric, bins and TV terms
    /// available.
    pub fn single(grid: AngularGrid, cur: Image, disparity: DisparityMap) -> Result<Self> {
        let holes = hole_mask(&cur, &disparity, grid)?;
        Ok(Self { grid, cur, disparity, next: None, candidates: None, holes })
    }

    /// Builds the inputs for frame `t` of `frames` from a depth/flow
    /// provider. Candidates use whichever neighbors exist.
    pub fn from_provider(provider: &dyn Provider, frames: &[Image], t: usize, grid: AngularGrid) -> Result<Self> {
        let cur = frames
            .get(t)
            .ok_or(Error::OutOfRange { what: "frame", index: t as i64, extent: frames.len() })?
            .clone();
        let affine = provider
            .affine()
            .ok_or_else(|| Error::Provider("provider has no depth-to-disparity mapping".into()))?;
        let disparity = depth_to_disparity(&provider.depth(t)?, affine);
        let mut inputs = Self::single(grid, cur, disparity)?;
        if t + 1 < frames.len() {
            let flow = provider.flow(FrameRef::Center(t + 1), FrameRef::Center(t))?;
            inputs.next = Some((frames[t + 1].clone(), flow));
        }
        let neighbors: Vec<usize> = [t.checked_sub(1), Some(t + 1).filter(|n| *n < frames.len())]
            .into_iter()
            .flatten()
            .collect();
        if neighbors.is_empty() {
            return Ok(inputs);
        }
        let mut sets = Vec::with_capacity(neighbors.len());
        for &n in &neighbors {
            let views = grid
                .offsets()
                .map(|(u, v)| {
                    let flow = provider.flow(FrameRef::View { t, u, v }, FrameRef::Center(n))?;
                    flow_warp_candidate(&frames[n], &flow)
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push(views);
        }
        let prev = sets[0].clone();
        let next = sets.last().cloned().unwrap_or_default();
        inputs.candidates = Some(Candidates { prev, next });
        Ok(inputs)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub f: TDRepresentation,
    pub d: DisplacementVector,
    /// Loss terms at the returned iterate.
    pub report: LossReport,
    /// Total loss before every step.
    pub trace: Vec<f64>,
    /// Step at which the returned iterate was reached.
    pub best_step: usize,
}

impl FitOutcome {
    pub fn light_field(&self, grid: AngularGrid) -> Result<LightField> {
        crate::lf::td_synthesize(&self.f, &self.d, grid)
    }
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, len: usize) -> Self {
        Self { lr, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64], scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let lr = self.lr * scale;
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn initial_layers(config: &FitConfig, cur: &Image) -> Vec<f64> {
    let (n, r) = (config.layers, config.rank);
    let exp = 1.0 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layer_len = cur.data().len();
    let mut out = Vec::with_capacity(n * r * layer_len);
    for _ in 0..n * r {
        for &p in cur.data() {
            let base = match config.f_init {
                FInit::Uniform => (0.5 / r as f64).powf(exp),
                FInit::CenterBroadcast => (p.clamp(0.0, 1.0) / r as f64).powf(exp),
            };
            let jitter = if r > 1 { rng.gen_range(-INIT_JITTER..INIT_JITTER) } else { 0.0 };
            out.push((base + jitter).clamp(0.0, 1.0));
        }
    }
    out
}

fn initial_displacements(config: &FitConfig, d: &DisparityMap) -> Vec<f64> {
    match &config.d_init {
        Some(v) => {
            let mut v = v.clone();
            v.sort_by(|a, b| a.total_cmp(b));
            v
        }
        None => {
            let (lo, hi) = d.min_max();
            DisplacementVector::linspace(lo, hi, config.layers).values().to_vec()
        }
    }
}

pub(crate) struct Evaluation {
    pub report: LossReport,
    pub grad_lf: Vec<f64>,
    pub grad_d: Vec<f64>,
}

pub(crate) fn evaluate(
    inputs: &FitInputs,
    weights: &LossWeights,
    lf: &LightField,
    d: &[f64],
) -> Result<Evaluation> {
    let mut terms = LossTerms::default();
    let mut grad_lf = vec![0.0; lf.data().len()];
    let mut accumulate = |w: f64, g: &[f64]| {
        if w != 0.0 {
            for (a, b) in grad_lf.iter_mut().zip(g) {
                *a += w * b;
            }
        }
    };
    if weights.photo > 0.0 {
        let (l, g) = photometric_loss_grad(lf, &inputs.cur)?;
        terms.photo = l;
        accumulate(weights.photo, &g);
    }
    if weights.geo > 0.0 {
        let (l, g) = geometric_loss_grad(lf, &inputs.cur, &inputs.disparity)?;
        terms.geo = l;
        accumulate(weights.geo, &g);
    }
    if weights.temp > 0.0 {
        let (next, flow) = inputs
            .next
            .as_ref()
            .ok_or_else(|| Error::Invalid("temporal weight set but no next frame given".into()))?;
        let (l, g) = temporal_loss_grad(lf, next, &inputs.disparity, flow)?;
        terms.temp = l;
        accumulate(weights.temp, &g);
    }
    if weights.occ > 0.0 {
        let cands = inputs
            .candidates
            .as_ref()
            .ok_or_else(|| Error::Invalid("disocclusion weight set but no candidates given".into()))?;
        let (l, g) = disocclusion_loss_grad(lf, cands, &inputs.holes)?;
        terms.occ = l;
        accumulate(weights.occ, &g);
    }
    if weights.tv > 0.0 {
        let (l, g) = tv_raw(lf.data(), lf.grid().len(), lf.height(), lf.width());
        terms.tv = l;
        accumulate(weights.tv, &g);
    }
    let mut grad_d = vec![0.0; d.len()];
    if weights.bins > 0.0 {
        let (l, g) = bins_raw(d, &inputs.disparity)?;
        terms.bins = l;
        for (a, b) in grad_d.iter_mut().zip(g) {
            *a += weights.bins * b;
        }
    }
    let report = total_self_loss(&terms, weights)?;
    Ok(Evaluation { report, grad_lf, grad_d })
}

/// Fits `(F, D)` to one frame by Adam on the weighted self-supervised loss.
///
/// `F` is projected back to `[0, 1]` and `D` re-sorted after every step. The
/// returned iterate is the one with the lowest total loss seen; a non-finite
/// loss aborts with [`Error::Diverged`].
pub fn direct_fit(inputs: &FitInputs, config: &FitConfig) -> Result<FitOutcome> {
    config.validate()?;
    let (h, w) = (inputs.cur.height(), inputs.cur.width());
    inputs.disparity.as_image().ensure_spatial(h, w, "fit disparity")?;
    let grid = inputs.grid;
    let (n, r) = (config.layers, config.rank);
    let mut f = initial_layers(config, &inputs.cur);
    let mut d = initial_displacements(config, &inputs.disparity);
    let synth = |f: &[f64], d: &[f64]| -> Result<LightField> {
        LightField::new(grid, h, w, td_forward_raw(f, n, r, h, w, d, grid))
    };

    let lf = synth(&f, &d)?;
    let first = evaluate(inputs, &config.weights, &lf, &d)?;
    let finish = |f: Vec<f64>, d: Vec<f64>, report, trace, best_step| -> Result<FitOutcome> {
        Ok(FitOutcome {
            f: TDRepresentation::new(n, r, h, w, f)?,
            d: DisplacementVector::new(d)?,
            report,
            trace,
            best_step,
        })
    };
    if config.weights.as_array().iter().all(|w| *w == 0.0) {
        return finish(f, d, first.report, vec![first.report.total], 0);
    }

    let mut opt_f = Adam::new(config.lr, f.len());
    let mut opt_d = Adam::new(config.lr_d, d.len());
    let mut best = (f.clone(), d.clone(), first.report, 0usize);
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut eval = first;
    for step in 0..=config.iterations {
        let total = eval.report.total;
        if !total.is_finite() {
            return Err(Error::Diverged { step, detail: format!("total loss {total}") });
        }
        trace.push(total);
        if total < best.2.total {
            best = (f.clone(), d.clone(), eval.report, step);
        }
        if step == config.iterations {
            break;
        }
        let (grad_f, grad_td) = td_backward_raw(&f, n, r, h, w, &d, grid, &eval.grad_lf);
        let progress = step as f64 / config.iterations as f64;
        let scale = LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt_f.step(&mut f, &grad_f, scale);
        f.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if config.adaptive {
            let g: Vec<f64> = grad_td.iter().zip(&eval.grad_d).map(|(a, b)| a + b).collect();
            opt_d.step(&mut d, &g, scale);
            d.sort_by(|a, b| a.total_cmp(b));
        }
        if f.iter().chain(&d).any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step, detail: "non-finite parameters".into() });
        }
        let lf = synth(&f, &d)?;
        eval = evaluate(inputs, &config.weights, &lf, &d)?;
    }
    let (f, d, report, best_step) = best;
    finish(f, d, report, trace, best_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::scenes::{single_plane, Canvas};
    use crate::datagen::{generate_scene, OracleProvider};

    fn small_scene(d: f64) -> (crate::datagen::SceneTruth, AngularGrid) {
        let grid = AngularGrid::square(3).unwrap();
        let canvas = Canvas { height: 20, width: 20, grid, frames: 2 };
        (generate_scene(&single_plane(canvas, d, (0.0, 0.0), 4)).unwrap(), grid)
    }

    #[test]
    fn zero_weights_return_the_initialization() {
        let (truth, grid) = small_scene(0.5);
        let inputs = FitInputs::single(grid, truth.center[0].clone(), truth.disparity[0].clone()).unwrap();
        let zero = LossWeights { photo: 0.0, geo: 0.0, temp: 0.0, occ: 0.0, bins: 0.0, tv: 0.0 };
        let config = FitConfig { weights: zero, iterations: 10, ..FitConfig::default() };
        let out = direct_fit(&inputs, &config).unwrap();
        assert_eq!(out.f.data(), initial_layers(&config, &inputs.cur).as_slice());
        assert_eq!(out.d.values(), initial_displacements(&config, &inputs.disparity).as_slice());
    }

    #[test]
    fn fit_decreases_the_loss_and_keeps_layers_in_range() {
        let (truth, grid) = small_scene(1.0);
        let provider = OracleProvider::new(&truth);
        let inputs = FitInputs::from_provider(&provider, &truth.center, 0, grid).unwrap();
        let config = FitConfig { iterations: 60, ..FitConfig::default() };
        let out = direct_fit(&inputs, &config).unwrap();
        assert!(out.report.total < 0.5 * out.trace[0], "{:?}", out.report);
        assert!(out.f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.d.is_sorted());
        assert_eq!(out.trace.len(), 61);
    }

    #[test]
    fn missing_neighbors_are_rejected_for_temporal_terms() {
        let (truth, grid) = small_scene(0.0);
        let inputs = FitInputs::single(grid, truth.center[0].clone(), truth.disparity[0].clone()).unwrap();
        let err = direct_fit(&inputs, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn seeded_fits_repeat_exactly() {
        let (truth, grid) = small_scene(0.5);
        let inputs = FitInputs::single(grid, truth.center[0].clone(), truth.disparity[0].clone()).unwrap();
        let weights = LossWeights { temp: 0.0, occ: 0.0, ..LossWeights::default() };
        let config = FitConfig { iterations: 15, weights, seed: 9, ..FitConfig::default() };
        let a = direct_fit(&inputs, &config).unwrap();
        let b = direct_fit(&inputs, &config).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.f, b.f);
    }
}
