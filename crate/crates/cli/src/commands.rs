use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use lfvid::datagen::{FileProvider, FrameRef, SceneRecipe};
use lfvid::eval::{
    emit_report, psnr, run_ablation, ssim_lf, temporal_stability_video, variable_baseline_experiment,
    AblationScene, AblationSetup, MetricReport, ReportArtifacts, Toggles, BASELINE_SCALES,
};
use lfvid::fit::{direct_fit, FitInputs};
use lfvid::losses::LossWeights;
use lfvid::io::{load_lf, save_lf_grid, save_png, write_atomic, write_flo, write_pfm, ScalarMap};
use lfvid::lf::{estimate_epi_slope, extract_epi, EpiAxis};
use lfvid::nn::Checkpoint;
use lfvid::train::{
    checkpoint_config, train_refinement, train_selfsup, Clip, Pipeline, RefineSample, RunOptions,
    TrainConfig,
};
use lfvid::{refocus, AngularGrid, DisplacementVector};
use log::info;

use crate::scene::{frame_name, lf_name, provider_step, SceneDir, DEPTH_DIR, FLOW_DIR, FRAMES_DIR, LF_DIR};
use crate::{Run, Usage};

fn grid(run: &Run) -> Result<AngularGrid> {
    Ok(AngularGrid::square(run.config.angular_res)?)
}

fn scenes_or_out(scenes: &[PathBuf], run: &Run) -> Vec<SceneDir> {
    if scenes.is_empty() {
        vec![SceneDir::new(&run.out)]
    } else {
        scenes.iter().map(SceneDir::new).collect()
    }
}

fn load_checkpoint(path: &PathBuf) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(lfvid::Error::MissingFile(path.clone()).into());
    }
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn fmt_d(d: &DisplacementVector) -> String {
    let v: Vec<String> = d.values().iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", v.join(", "))
}

#[derive(Args, Debug)]
pub struct GenScene {
    /// Number of planes (1 to 3).
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Plane disparities, back to front, comma separated. Defaults spread
    /// the planes over [-1, 1].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    disparity: Vec<f64>,
    /// Per-frame motion `dx,dy` in pixels.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0,0")]
    velocity: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

impl GenScene {
    pub fn run(self, run: &Run) -> Result<()> {
        let disparities = match (self.k, self.disparity.len()) {
            (k, 0) if k == 1 => vec![1.0],
            (k, 0) => DisplacementVector::linspace(-1.0, 1.0, k).values().to_vec(),
            (k, n) if k == n => self.disparity.clone(),
            (k, n) => bail!(Usage(format!("--k {k} needs {k} disparities, got {n}"))),
        };
        let [vx, vy] = self.velocity[..] else {
            bail!(Usage(format!("--velocity takes dx,dy, got {:?}", self.velocity)));
        };
        let recipe = SceneRecipe {
            disparities,
            velocity: (vx, vy),
            height: self.height,
            width: self.width,
            angular: run.config.angular_res,
            frames: self.frames,
            seed: run.config.seed,
        };
        let truth = recipe.generate().map_err(|e| match e {
            lfvid::Error::Invalid(m) => anyhow::Error::new(Usage(m)),
            other => other.into(),
        })?;
        let out = run.out_dir("")?;
        recipe.save(&out)?;
        for sub in [FRAMES_DIR, LF_DIR, DEPTH_DIR, FLOW_DIR] {
            run.out_dir(sub)?;
        }
        let files = FileProvider {
            depth_dir: out.join(DEPTH_DIR),
            flow_dir: out.join(FLOW_DIR),
            affine: truth.affine(),
        };
        let provider: &dyn lfvid::datagen::Provider = &truth;
        for t in 0..truth.frames() {
            save_png(&truth.center[t], &out.join(FRAMES_DIR).join(frame_name(t)))?;
            save_lf_grid(&truth.lf[t], &out.join(LF_DIR).join(lf_name(t)))?;
            let z = provider.depth(t)?;
            let map = ScalarMap { height: z.height(), width: z.width(), data: z.data().to_vec() };
            write_pfm(&files.depth_path(t), &map)?;
            if t + 1 < truth.frames() {
                for (a, b) in [(t, t + 1), (t + 1, t)] {
                    let (a, b) = (FrameRef::Center(a), FrameRef::Center(b));
                    write_flo(&files.flow_path(a, b), &provider.flow(a, b)?)?;
                }
            }
        }
        let affine = truth.affine();
        let conf = format!(
            "provider.kind = files\nprovider.a = {}\nprovider.b = {}\nangular_res = {}\n",
            affine.a, affine.b, recipe.angular
        );
        write_atomic(&out.join("scene.conf"), conf.as_bytes())?;
        println!(
            "scene: {} frames of {}x{}, {}x{} views, planes {:?} -> {}",
            recipe.frames,
            recipe.width,
            recipe.height,
            recipe.angular,
            recipe.angular,
            recipe.disparities,
            out.display()
        );
        Ok(())
    }
}

/// Zeroes the weights of terms the frame has no data for.
fn drop_unavailable(w: &mut LossWeights, has_next: bool, has_candidates: bool) {
    if !has_next && w.temp > 0.0 {
        info!("no next frame: temporal term off");
        w.temp = 0.0;
    }
    if !has_candidates && w.occ > 0.0 {
        info!("no neighboring frames: disocclusion term off");
        w.occ = 0.0;
    }
}

#[derive(Args, Debug)]
pub struct Fit {
    /// Scene directory; defaults to the output directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Optimizer steps; overrides the config file.
    #[arg(long)]
    iterations: Option<usize>,
    /// Keep the displacements at the uniform integer spacing.
    #[arg(long)]
    fixed: bool,
}

impl Fit {
    pub fn run(self, run: &Run) -> Result<()> {
        let scene = SceneDir::new(self.scene.clone().unwrap_or_else(|| run.out.clone()));
        let grid = grid(run)?;
        let frames = scene.frames()?;
        let source = scene.source(&run.config)?;
        let inputs = provider_step(FitInputs::from_provider(source.provider(), &frames, self.frame, grid))?;
        let mut config = run.config.fit_config();
        if let Some(n) = self.iterations {
            config.iterations = n;
        }
        if self.fixed {
            config.adaptive = false;
            config.d_init = Some(DisplacementVector::fixed(config.layers).values().to_vec());
            config.weights.bins = 0.0;
        }
        drop_unavailable(&mut config.weights, inputs.next.is_some(), inputs.candidates.is_some());
        info!("fitting frame {} of {}", self.frame, scene.root.display());
        let out = direct_fit(&inputs, &config)?;
        let lf = out.light_field(grid)?;
        let dir = run.out_dir("fit")?;
        save_lf_grid(&lf, &dir.join(lf_name(self.frame)))?;
        let mut trace = String::from("step,total\n");
        for (i, v) in out.trace.iter().enumerate() {
            writeln!(trace, "{i},{v}")?;
        }
        write_atomic(&dir.join("trace.csv"), trace.as_bytes())?;
        let psnr_db = match scene.truth_lf(self.frame, grid)? {
            Some(truth) => Some(psnr(&lf, &truth)?),
            None => None,
        };
        let summary = serde_json::json!({
            "frame": self.frame,
            "displacements": out.d.values(),
            "report": out.report,
            "best_step": out.best_step,
            "psnr_db": psnr_db,
            "config": config,
        });
        write_atomic(&dir.join("fit.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
        println!("frame {}: total {:.4e}, D {}", self.frame, out.report.total, fmt_d(&out.d));
        if let Some(p) = psnr_db {
            println!("PSNR against ground truth: {p:.2} dB");
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Train {
    /// Scene directories used as training clips; defaults to the output
    /// directory.
    #[arg(long = "scene")]
    scenes: Vec<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl Train {
    pub fn run(self, run: &Run) -> Result<()> {
        let config = run.config.train_config(TrainConfig::selfsup())?;
        let mut clips = Vec::new();
        for scene in scenes_or_out(&self.scenes, run) {
            let frames = scene.frames()?;
            let source = scene.source(&run.config)?;
            clips.push(provider_step(Clip::from_provider(scene.name(), frames, source.provider()))?);
        }
        let opts = RunOptions {
            checkpoint_dir: Some(run.out_dir("checkpoints")?),
            resume: self.resume.as_ref().map(load_checkpoint).transpose()?,
        };
        let outcome = train_selfsup(&clips, &config, &opts)?;
        for r in &outcome.history {
            println!("epoch {}: train {:.4e}, val {:.4e}, lr {:.2e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct TrainRefine {
    /// Scene directories with ground-truth light fields.
    #[arg(long = "scene")]
    scenes: Vec<PathBuf>,
    /// Self-supervised checkpoint providing the frozen backbone.
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl TrainRefine {
    pub fn run(self, run: &Run) -> Result<()> {
        let backbone = load_checkpoint(&self.backbone)?;
        let saved = checkpoint_config(&backbone)?;
        let mut config = TrainConfig::refine();
        config.grid = saved.grid;
        config.synthesis = saved.synthesis;
        config.displacement = saved.displacement;
        config.refinement.patch = run.config.patch_size;
        run.config.apply_schedule(&mut config);
        let mut samples = Vec::new();
        for scene in scenes_or_out(&self.scenes, run) {
            let source = scene.source(&run.config)?;
            let n = scene.frames()?.len();
            for t in 0..n {
                let Some(lf) = scene.truth_lf(t, config.grid)? else { continue };
                let depth = provider_step(source.provider().depth(t))?;
                samples.push(RefineSample { name: format!("{}:{t}", scene.name()), lf, depth });
            }
        }
        if samples.is_empty() {
            return Err(lfvid::Error::MissingArtifact("ground-truth light fields under lf/".into()).into());
        }
        let opts = RunOptions {
            checkpoint_dir: Some(run.out_dir("checkpoints")?),
            resume: self.resume.as_ref().map(load_checkpoint).transpose()?,
        };
        let outcome = train_refinement(&samples, &backbone, &config, &opts)?;
        for r in &outcome.history {
            println!("epoch {}: train {:.4e}, val {:.4e}, lr {:.2e}", r.epoch, r.train_loss, r.val_loss, r.lr);
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Synthesize {
    /// Checkpoint of either training phase.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Video directory; defaults to the output directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Disparity scale (baseline control).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

impl Synthesize {
    pub fn run(self, run: &Run) -> Result<()> {
        if !(self.scale > 0.0) {
            bail!(Usage(format!("--scale must be positive, got {}", self.scale)));
        }
        let pipeline = Pipeline::from_checkpoint(&load_checkpoint(&self.checkpoint)?)?;
        let scene = SceneDir::new(self.scene.clone().unwrap_or_else(|| run.out.clone()));
        let frames = scene.frames()?;
        let source = scene.source(&run.config)?;
        let disparity = (0..frames.len())
            .map(|t| Ok(source.disparity(t)?.scaled(self.scale)))
            .collect::<Result<Vec<_>>>()?;
        let lfs = pipeline.synthesize(&frames, &disparity)?;
        let dir = run.out_dir("synth")?;
        for (t, lf) in lfs.iter().enumerate() {
            save_lf_grid(lf, &dir.join(lf_name(t)))?;
        }
        println!("{} light fields -> {}", lfs.len(), dir.display());
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Directory of predicted light field grids, one per frame.
    #[arg(long)]
    pred: PathBuf,
    /// Scene directory with the ground truth; defaults to the output
    /// directory.
    #[arg(long)]
    scene: Option<PathBuf>,
}

impl Eval {
    pub fn run(self, run: &Run) -> Result<()> {
        let grid = grid(run)?;
        let scene = SceneDir::new(self.scene.clone().unwrap_or_else(|| run.out.clone()));
        let preds = crate::scene::load_lfs(&self.pred, grid)?;
        let truth = crate::scene::load_lfs(&scene.lf_dir(), grid)?;
        if preds.len() != truth.len() {
            bail!(Usage(format!("{} predictions for {} ground-truth frames", preds.len(), truth.len())));
        }
        let mut rows = Vec::new();
        for (t, (p, g)) in preds.iter().zip(&truth).enumerate() {
            rows.push(MetricReport {
                experiment: "eval".into(),
                scene: format!("{}:{t}", scene.name()),
                variant: "pred".into(),
                psnr_db: psnr(p, g)?,
                ssim: ssim_lf(p, g)?,
                e_temp: None,
                seed: run.config.seed,
                hole_mae: None,
                config: serde_json::Value::Null,
            });
        }
        let mut mean = MetricReport::aggregate(&rows).expect("at least one frame");
        if preds.len() > 1 {
            let source = scene.source(&run.config)?;
            mean.e_temp = Some(provider_step(temporal_stability_video(&preds, &truth, source.provider()))?);
        }
        rows.push(mean);
        let row = preds[0].height() / 2;
        let artifacts = ReportArtifacts {
            epis: vec![("pred".into(), &preds[0], row), ("truth".into(), &truth[0], row)],
            refocus: vec![],
            histograms: vec![],
        };
        emit_report(&rows, &artifacts, &run.out_dir("eval")?)?;
        print_rows(&rows);
        Ok(())
    }
}

fn print_rows(rows: &[MetricReport]) {
    for r in rows {
        let e = r.e_temp.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
        println!("{:<14} {:<16} PSNR {:6.2} dB  SSIM {:.4}  E_temp {e}", r.scene, r.variant, r.psnr_db, r.ssim);
    }
}

#[derive(Args, Debug)]
pub struct Ablate {
    /// Scene directories (generated scenes); defaults to the output
    /// directory.
    #[arg(long = "scene")]
    scenes: Vec<PathBuf>,
    /// Frame to fit; defaults to the second frame when a third follows it.
    #[arg(long)]
    frame: Option<usize>,
    /// Refinement checkpoint; adds the refined row.
    #[arg(long)]
    refine: Option<PathBuf>,
}

impl Ablate {
    pub fn run(self, run: &Run) -> Result<()> {
        let mut config = run.config.clone();
        config.provider.kind = lfvid::config::ProviderKind::Oracle;
        let dirs = scenes_or_out(&self.scenes, run);
        let mut sources = Vec::new();
        for d in &dirs {
            sources.push((d.name(), d.source(&config)?));
        }
        let mut scenes = Vec::new();
        for (name, source) in &sources {
            let truth = source.truth().expect("oracle source");
            let frame = self.frame.unwrap_or(usize::from(truth.frames() > 2));
            scenes.push(AblationScene { name: name.clone(), truth, frame });
        }
        let pipeline = match &self.refine {
            Some(p) => Some(Pipeline::from_checkpoint(&load_checkpoint(p)?)?),
            None => None,
        };
        let refinement = match &pipeline {
            Some(p) => Some((
                p.refinement
                    .as_ref()
                    .ok_or_else(|| Usage("--refine needs a refinement checkpoint".into()))?,
                &p.params,
            )),
            None => None,
        };
        let toggles = Toggles { occ: true, adaptive: true, refine: refinement.is_some() };
        let mut fit = run.config.fit_config();
        for s in &scenes {
            let n = s.truth.frames();
            drop_unavailable(&mut fit.weights, s.frame + 1 < n, n > 1);
        }
        let setup = AblationSetup { fit, refinement };
        let mut rows = run_ablation("ablation", &scenes, toggles, &setup)?;
        let variants: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        if scenes.len() > 1 {
            let means: Vec<MetricReport> = variants
                .iter()
                .filter_map(|v| MetricReport::aggregate(&rows.iter().filter(|r| &r.variant == v).cloned().collect::<Vec<_>>()))
                .collect();
            rows.extend(means);
        }
        let artifacts = ReportArtifacts { epis: vec![], refocus: vec![], histograms: vec![] };
        emit_report(&rows, &artifacts, &run.out_dir("ablate")?)?;
        print_rows(&rows);
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct BaselineSweep {
    /// Generated scene directory; defaults to the output directory.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Disparity scales, comma separated.
    #[arg(long, value_delimiter = ',')]
    scale: Vec<f64>,
}

impl BaselineSweep {
    pub fn run(self, run: &Run) -> Result<()> {
        let scene = SceneDir::new(self.scene.clone().unwrap_or_else(|| run.out.clone()));
        let mut config = run.config.clone();
        config.provider.kind = lfvid::config::ProviderKind::Oracle;
        let source = scene.source(&config)?;
        let truth = source.truth().expect("oracle source");
        let scales = if self.scale.is_empty() { BASELINE_SCALES.to_vec() } else { self.scale.clone() };
        let rows = variable_baseline_experiment(truth, self.frame, &scales, &run.config.fit_config())?;
        let mut csv = String::from("scale,slope,ratio\n");
        for r in &rows {
            writeln!(csv, "{},{},{}", r.scale, r.slope, r.ratio)?;
            println!("scale {:.2}: slope {:.4}, ratio {:.4}", r.scale, r.slope, r.ratio);
        }
        write_atomic(&run.out_dir("")?.join("baseline.csv"), csv.as_bytes())?;
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Refocus {
    /// Light field grid PNG.
    #[arg(long)]
    lf: PathBuf,
    /// Refocus slopes in pixels per view, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    alpha: Vec<f64>,
}

impl Refocus {
    pub fn run(self, run: &Run) -> Result<()> {
        let lf = load_lf(&self.lf, grid(run)?)?;
        let dir = run.out_dir("refocus")?;
        for (k, alpha) in self.alpha.iter().enumerate() {
            let path = dir.join(format!("refocus_{k:03}.png"));
            save_png(&refocus(&lf, *alpha)?, &path)?;
            println!("alpha {alpha}: {}", path.display());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    H,
    V,
}

#[derive(Args, Debug)]
pub struct Epi {
    /// Light field grid PNG.
    #[arg(long)]
    lf: PathBuf,
    /// Row (horizontal EPI) or column (vertical EPI) to slice.
    #[arg(long)]
    row: usize,
    #[arg(long, value_enum, default_value = "h")]
    axis: Axis,
    /// Largest slope considered by the fit, pixels per view.
    #[arg(long, default_value_t = 4.0)]
    max_slope: f64,
}

impl Epi {
    pub fn run(self, run: &Run) -> Result<()> {
        let lf = load_lf(&self.lf, grid(run)?)?;
        let (axis, tag) = match self.axis {
            Axis::H => (EpiAxis::Horizontal, "h"),
            Axis::V => (EpiAxis::Vertical, "v"),
        };
        let epi = extract_epi(&lf, axis, self.row)?;
        let slope = estimate_epi_slope(&epi, self.max_slope)?;
        let path = run.out_dir("")?.join(format!("epi_{tag}_{:04}.png", self.row));
        save_png(&epi, &path)?;
        println!("slope {slope:.6}");
        println!("epi: {}", path.display());
        Ok(())
    }
}
