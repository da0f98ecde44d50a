//! Quality metrics, ablation and baseline-scaling drivers, and report files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{FrameRef, OracleProvider, Provider, SceneTruth};
use crate::error::{Error, Result};
use crate::fit::{direct_fit, FitConfig, FitInputs};
use crate::image::Image;
use crate::io::{save_png, write_atomic};
use crate::lf::{extract_epi, estimate_epi_slope, refocus, DisplacementVector, EpiAxis, LightField, CHANNELS};
use crate::nn::{ParamStore, RefinementNet};
use crate::warp::{interior, inverse_warp, DisparityMap, FlowField, HoleMask, BORDER_MARGIN};

/// PSNR reported for identical inputs.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// Baseline scales swept by default.
pub const BASELINE_SCALES: [f64; 4] = [1.0, 1.5, 2.0, 2.5];

/// Anything made of samples in `[0, 1]` with a comparable shape.
pub trait Signal {
    fn samples(&self) -> &[f64];
    fn shape(&self) -> Vec<usize>;
}

impl Signal for Image {
    fn samples(&self) -> &[f64] {
        self.data()
    }

    fn shape(&self) -> Vec<usize> {
        vec![self.height(), self.width(), self.channels()]
    }
}

impl Signal for LightField {
    fn samples(&self) -> &[f64] {
        self.data()
    }

    fn shape(&self) -> Vec<usize> {
        let g = self.grid();
        vec![g.u_count(), g.v_count(), self.height(), self.width(), CHANNELS]
    }
}

fn check_shapes(a: &impl Signal, b: &impl Signal) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(1 / MSE)` with peak 1, capped at [`PSNR_CAP`].
pub fn psnr<S: Signal>(a: &S, b: &S) -> Result<f64> {
    check_shapes(a, b)?;
    let (x, y) = (a.samples(), b.samples());
    if x.is_empty() {
        return Err(Error::Invalid("PSNR of empty inputs".into()));
    }
    let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Visits `(view, sample index)` for every interior sample outside the holes
/// (or inside them, with `inside`).
fn for_masked(lf: &LightField, holes: &HoleMask, margin: usize, inside: bool, mut f: impl FnMut(usize)) {
    let (h, w) = (lf.height(), lf.width());
    let (ys, xs) = interior(h, w, margin);
    let n = lf.view_len();
    for v in 0..lf.grid().len() {
        let m = holes.view(v);
        for y in ys.clone() {
            for x in xs.clone() {
                if m.get(y, x) != inside {
                    continue;
                }
                for c in 0..CHANNELS {
                    f(v * n + (y * w + x) * CHANNELS + c);
                }
            }
        }
    }
}

fn check_holes(lf: &LightField, holes: &HoleMask) -> Result<()> {
    if holes.grid() != lf.grid() || holes.height() != lf.height() || holes.width() != lf.width() {
        return Err(Error::Shape("hole mask does not match the light field".into()));
    }
    Ok(())
}

/// PSNR over interior samples that are not disoccluded.
pub fn psnr_visible(pred: &LightField, truth: &LightField, holes: &HoleMask, margin: usize) -> Result<f64> {
    check_shapes(pred, truth)?;
    check_holes(truth, holes)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for_masked(truth, holes, margin, false, |i| {
        let e = pred.data()[i] - truth.data()[i];
        sum += e * e;
        count += 1;
    });
    if count == 0 {
        return Err(Error::Invalid("no visible samples to score".into()));
    }
    Ok(psnr_from_mse(sum / count as f64))
}

/// Mean absolute error over disoccluded interior samples; `None` when the
/// mask is empty.
pub fn hole_mae(pred: &LightField, truth: &LightField, holes: &HoleMask, margin: usize) -> Result<Option<f64>> {
    check_shapes(pred, truth)?;
    check_holes(truth, holes)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for_masked(truth, holes, margin, true, |i| {
        sum += (pred.data()[i] - truth.data()[i]).abs();
        count += 1;
    });
    Ok((count > 0).then(|| sum / count as f64))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / mu_a.len() as f64
}

/// Gaussian-window SSIM per channel, mean-pooled, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_dims(b, "SSIM")?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let total: f64 = (0..c)
        .map(|ch| ssim_plane(a.channel(ch).data(), b.channel(ch).data(), h, w))
        .sum();
    Ok(total / c as f64)
}

/// SSIM averaged over the views of two light fields.
pub fn ssim_lf(a: &LightField, b: &LightField) -> Result<f64> {
    check_shapes(a, b)?;
    let views = a.grid().len();
    let mut total = 0.0;
    for v in 0..views {
        total += ssim(&a.view_by_index(v), &b.view_by_index(v))?;
    }
    Ok(total / views as f64)
}

/// Flicker measure for one frame: each view of `pred_t` is gathered onto the
/// previous frame with `flows[v] = O(L_{t−1}(v), L_t(v))` and compared to
/// `truth_prev`. Per view the error is the root mean square over interior
/// pixels whose sample lands inside the image; views are summed.
pub fn temporal_stability(
    pred_t: &LightField,
    truth_t: &LightField,
    truth_prev: &LightField,
    flows: &[FlowField],
) -> Result<f64> {
    check_shapes(pred_t, truth_t)?;
    check_shapes(pred_t, truth_prev)?;
    let views = pred_t.grid().len();
    if flows.len() != views {
        return Err(Error::Shape(format!("{} flows for {views} views", flows.len())));
    }
    let (h, w) = (pred_t.height(), pred_t.width());
    let (ys, xs) = interior(h, w, BORDER_MARGIN);
    let mut total = 0.0;
    for (v, flow) in flows.iter().enumerate() {
        if flow.height() != h || flow.width() != w {
            return Err(Error::Shape("temporal stability flow size".into()));
        }
        let moved = inverse_warp(&pred_t.view_by_index(v), flow)?;
        let prev = truth_prev.view_slice(v);
        let (mut sum, mut count) = (0.0, 0usize);
        for y in ys.clone() {
            for x in xs.clone() {
                let (dx, dy) = flow.get(y, x);
                let (sx, sy) = (x as f64 + dx, y as f64 + dy);
                if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                    continue;
                }
                for c in 0..CHANNELS {
                    let i = (y * w + x) * CHANNELS + c;
                    let e = moved.data()[i] - prev[i];
                    sum += e * e;
                    count += 1;
                }
            }
        }
        if count > 0 {
            total += (sum / count as f64).sqrt();
        }
    }
    Ok(total)
}

/// Per-view flows `O(L_{t−1}(v), L_t(v))` from a provider.
pub fn view_flows_to_prev(provider: &dyn Provider, pred: &LightField, t: usize) -> Result<Vec<FlowField>> {
    if t == 0 {
        return Err(Error::Invalid("temporal stability needs a previous frame".into()));
    }
    pred.grid()
        .offsets()
        .map(|(u, v)| provider.flow(FrameRef::View { t: t - 1, u, v }, FrameRef::View { t, u, v }))
        .collect()
}

/// Temporal stability averaged over frames `1..T` of a predicted video.
pub fn temporal_stability_video(preds: &[LightField], truth: &[LightField], provider: &dyn Provider) -> Result<f64> {
    if preds.len() != truth.len() || preds.len() < 2 {
        return Err(Error::Invalid("temporal stability needs two or more matching frames".into()));
    }
    let mut total = 0.0;
    for t in 1..preds.len() {
        let flows = view_flows_to_prev(provider, &preds[t], t)?;
        total += temporal_stability(&preds[t], &truth[t], &truth[t - 1], &flows)?;
    }
    Ok(total / (preds.len() - 1) as f64)
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub scene: String,
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub e_temp: Option<f64>,
    pub seed: u64,
    /// Not part of the CSV table.
    #[serde(skip)]
    pub hole_mae: Option<f64>,
    #[serde(skip)]
    pub config: serde_json::Value,
}

impl MetricReport {
    /// Mean over rows, tagged with `scene = "mean"`.
    pub fn aggregate(rows: &[MetricReport]) -> Option<MetricReport> {
        let first = rows.first()?;
        let n = rows.len() as f64;
        let mean_opt = |f: fn(&MetricReport) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(MetricReport {
            experiment: first.experiment.clone(),
            scene: "mean".into(),
            variant: first.variant.clone(),
            psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            e_temp: mean_opt(|r| r.e_temp),
            seed: first.seed,
            hole_mae: mean_opt(|r| r.hole_mae),
            config: first.config.clone(),
        })
    }
}

/// A frame of a generated scene to fit and score.
pub struct AblationScene<'a> {
    pub name: String,
    pub truth: &'a SceneTruth,
    pub frame: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub occ: bool,
    pub adaptive: bool,
    pub refine: bool,
}

/// Shared settings for every ablation row. `refinement` is required only
/// when the refine toggle is on.
pub struct AblationSetup<'a> {
    pub fit: FitConfig,
    pub refinement: Option<(&'a RefinementNet, &'a ParamStore)>,
}

fn variants(toggles: Toggles) -> Vec<(String, Toggles)> {
    let mut out = vec![("Base".to_string(), Toggles::default())];
    let mut cur = Toggles::default();
    let mut name = "Base".to_string();
    let steps = [
        (toggles.occ, "occ", (|t: &mut Toggles| t.occ = true) as fn(&mut Toggles)),
        (toggles.adaptive, "adpt", |t: &mut Toggles| t.adaptive = true),
        (toggles.refine, "ref", |t: &mut Toggles| t.refine = true),
    ];
    for (on, tag, set) in steps {
        if !on {
            continue;
        }
        set(&mut cur);
        name = format!("{name}+{tag}");
        let label = if cur.occ && cur.adaptive && cur.refine { "Proposed".to_string() } else { name.clone() };
        out.push((label, cur));
    }
    out
}

fn variant_config(base: &FitConfig, t: Toggles) -> FitConfig {
    let mut cfg = base.clone();
    if !t.occ {
        cfg.weights.occ = 0.0;
    }
    if t.adaptive {
        cfg.adaptive = true;
        cfg.d_init = None;
    } else {
        cfg.adaptive = false;
        cfg.weights.bins = 0.0;
        cfg.d_init = Some(DisplacementVector::fixed(cfg.layers).values().to_vec());
    }
    cfg
}

/// Fits every scene under each successive variant (Base, then adding the
/// disocclusion term, adaptive displacements and refinement in that order)
/// and scores the result against the scene truth.
pub fn run_ablation(
    experiment: &str,
    scenes: &[AblationScene<'_>],
    toggles: Toggles,
    setup: &AblationSetup<'_>,
) -> Result<Vec<MetricReport>> {
    if toggles.refine && setup.refinement.is_none() {
        return Err(Error::MissingArtifact("refinement weights for the refined ablation row".into()));
    }
    let mut rows = Vec::new();
    for scene in scenes {
        let truth = scene.truth;
        let provider = OracleProvider::new(truth);
        let grid = truth.spec.grid;
        let inputs = FitInputs::from_provider(&provider, &truth.center, scene.frame, grid)?;
        let gt = &truth.lf[scene.frame];
        for (variant, t) in variants(toggles) {
            let cfg = variant_config(&setup.fit, t);
            let fitted = direct_fit(&inputs, &cfg)?;
            let mut pred = fitted.light_field(grid)?;
            if t.refine {
                let (net, store) = setup.refinement.expect("checked above");
                pred = net.predict(store, &pred, &inputs.cur, None)?.refined;
            }
            let e_temp = if scene.frame > 0 {
                let flows = view_flows_to_prev(&provider, &pred, scene.frame)?;
                Some(temporal_stability(&pred, gt, &truth.lf[scene.frame - 1], &flows)?)
            } else {
                None
            };
            rows.push(MetricReport {
                experiment: experiment.to_string(),
                scene: scene.name.clone(),
                variant,
                psnr_db: psnr(&pred, gt)?,
                ssim: ssim_lf(&pred, gt)?,
                e_temp,
                seed: cfg.seed,
                hole_mae: hole_mae(&pred, gt, &truth.holes[scene.frame], BORDER_MARGIN)?,
                config: serde_json::to_value(&cfg)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub scale: f64,
    pub slope: f64,
    /// `slope(s) / slope(1)`.
    pub ratio: f64,
}

/// Fits the frame at each disparity scale and measures the EPI slope of the
/// synthesized light field through its central row.
pub fn variable_baseline_experiment(
    truth: &SceneTruth,
    frame: usize,
    scales: &[f64],
    fit: &FitConfig,
) -> Result<Vec<SlopeRow>> {
    let cur = truth
        .center
        .get(frame)
        .ok_or(Error::OutOfRange { what: "frame", index: frame as i64, extent: truth.frames() })?;
    if cur.luma().variance() < 1e-6 {
        return Err(Error::Invalid("baseline sweep needs a textured frame".into()));
    }
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Invalid(format!("baseline scales must be positive: {scales:?}")));
    }
    let d = &truth.disparity[frame];
    let (lo, hi) = d.min_max();
    let grid = truth.spec.grid;
    let mut slopes = Vec::with_capacity(scales.len());
    for &s in scales {
        let scaled = d.scaled(s);
        let inputs = FitInputs::single(grid, cur.clone(), scaled)?;
        let mut cfg = fit.clone();
        cfg.weights.temp = 0.0;
        cfg.weights.occ = 0.0;
        let out = direct_fit(&inputs, &cfg)?;
        let lf = out.light_field(grid)?;
        let epi = extract_epi(&lf, EpiAxis::Horizontal, lf.height() / 2)?;
        let max_slope = s * lo.abs().max(hi.abs()) * 1.5 + 1.0;
        slopes.push(estimate_epi_slope(&epi, max_slope)?);
    }
    let reference = if scales[0] == 1.0 {
        slopes[0]
    } else {
        let inputs = FitInputs::single(grid, cur.clone(), d.clone())?;
        let out = direct_fit(&inputs, fit)?;
        let lf = out.light_field(grid)?;
        estimate_epi_slope(&extract_epi(&lf, EpiAxis::Horizontal, lf.height() / 2)?, hi.abs().max(lo.abs()) * 1.5 + 1.0)?
    };
    if reference.abs() < 1e-9 {
        return Err(Error::Invalid("reference EPI slope is zero; scene has no parallax".into()));
    }
    Ok(scales
        .iter()
        .zip(slopes)
        .map(|(&scale, slope)| SlopeRow { scale, slope, ratio: slope / reference })
        .collect())
}

pub const CSV_HEADER: [&str; 7] = ["experiment", "scene", "variant", "psnr_db", "ssim", "e_temp", "seed"];

/// Writes the results table; an empty slice yields a header-only file.
pub fn write_report_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record([
            r.experiment.clone(),
            r.scene.clone(),
            r.variant.clone(),
            r.psnr_db.to_string(),
            r.ssim.to_string(),
            r.e_temp.map(|v| v.to_string()).unwrap_or_default(),
            r.seed.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Draws a histogram of the disparity values with the displacements marked
/// as vertical red lines.
pub fn render_histogram(d: &DisparityMap, dv: &DisplacementVector, width: usize, height: usize) -> Result<Image> {
    if width < 8 || height < 8 {
        return Err(Error::Invalid("histogram plot too small".into()));
    }
    let (dl, dh) = d.min_max();
    let lo = dv.values().iter().fold(dl, |a, v| a.min(*v)) - 0.5;
    let hi = dv.values().iter().fold(dh, |a, v| a.max(*v)) + 0.5;
    let column = |v: f64| (((v - lo) / (hi - lo)) * (width - 1) as f64).round() as usize;
    let mut counts = vec![0usize; width];
    for &v in d.data() {
        counts[column(v)] += 1;
    }
    let peak = *counts.iter().max().unwrap_or(&1) as f64;
    let mut img = Image::filled(height, width, CHANNELS, 1.0);
    for (x, &c) in counts.iter().enumerate() {
        let bar = ((c as f64 / peak) * (height - 1) as f64).round() as usize;
        for y in height - bar..height {
            for ch in 0..CHANNELS {
                img.set(y, x, ch, 0.35);
            }
        }
    }
    for &v in dv.values() {
        let x = column(v);
        for y in 0..height {
            img.set(y, x, 0, 0.85);
            img.set(y, x, 1, 0.1);
            img.set(y, x, 2, 0.1);
        }
    }
    Ok(img)
}

/// Extra figures written next to the table.
#[derive(Default)]
pub struct ReportArtifacts<'a> {
    /// Light fields to slice into horizontal EPI strips through `row`.
    pub epis: Vec<(String, &'a LightField, usize)>,
    /// Light fields to refocus over the given slopes.
    pub refocus: Vec<(String, &'a LightField, Vec<f64>)>,
    /// Disparity maps with the displacements fitted to them.
    pub histograms: Vec<(String, &'a DisparityMap, &'a DisplacementVector)>,
}

/// Writes `metrics.csv` plus the requested figures into `dir`; returns the
/// written paths.
pub fn emit_report(reports: &[MetricReport], artifacts: &ReportArtifacts<'_>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let csv_path = dir.join("metrics.csv");
    write_report_csv(reports, &csv_path)?;
    written.push(csv_path);
    for (name, lf, row) in &artifacts.epis {
        let path = dir.join(format!("epi_{name}.png"));
        save_png(&extract_epi(lf, EpiAxis::Horizontal, *row)?, &path)?;
        written.push(path);
    }
    for (name, lf, alphas) in &artifacts.refocus {
        for (k, alpha) in alphas.iter().enumerate() {
            let path = dir.join(format!("refocus_{name}_{k:03}.png"));
            save_png(&refocus(lf, *alpha)?, &path)?;
            written.push(path);
        }
    }
    for (name, d, dv) in &artifacts.histograms {
        let path = dir.join(format!("hist_{name}.png"));
        save_png(&render_histogram(d, dv, 256, 128)?, &path)?;
        written.push(path);
    }
    Ok(written)
}
