//! Network training: the self-supervised phase on monocular clips and the
//! supervised refinement phase on LF images with a frozen backbone.
//!
//! Each optimizer step consumes one clip: the recurrent state is reset,
//! frames are visited in order and the per-frame losses are averaged. The
//! state is carried forward as a constant, so gradients stop at frame
//! boundaries.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datagen::{FrameRef, Provider};
use crate::error::{Error, Result};
use crate::fit::{evaluate, FitInputs};
use crate::image::Image;
use crate::lf::{center_view, AngularGrid, DisplacementVector, LightField, TDRepresentation};
use crate::losses::{Candidates, LossReport, LossWeights};
use crate::nn::{
    ops, AdamW, Checkpoint, Ctx, DisplacementConfig, DisplacementHead, ParamStore, RecurrentState,
    RefinementConfig, RefinementNet, SynthInputs, SynthesisConfig, SynthesisNet,
};
use crate::tensor::Tensor;
use crate::warp::{depth_to_disparity, flow_warp_candidate, AffineDepthParams, DepthMap, DisparityMap, FlowField};

/// Values of `a` drawn from during self-supervised training.
pub const SELFSUP_A: [f64; 4] = [0.8, 1.6, 2.4, 3.2];
/// Range `b` is drawn from during self-supervised training.
pub const SELFSUP_B: (f64, f64) = (0.2, 0.4);
/// `(a, b)` used for the refinement phase.
pub const REFINE_AFFINE: (f64, f64) = (1.2, 0.3);
/// A validation loss that improves by less than this fraction of the best
/// so far counts as a plateau epoch.
pub const PLATEAU_TOL: f64 = 1e-3;
/// Trailing share of the dataset held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

pub const SELFSUP_KIND: &str = "selfsup";
pub const REFINE_KIND: &str = "refinement";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Selfsup,
    Refine,
}

/// How `(a, b)` in `d = a·z + b` is chosen per clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AffineSpec {
    Random { a: Vec<f64>, b: (f64, f64) },
    Fixed { a: f64, b: f64 },
}

impl AffineSpec {
    fn sample(&self, rng: &mut impl Rng) -> AffineDepthParams {
        match self {
            AffineSpec::Random { a, b } => AffineDepthParams {
                a: a[rng.gen_range(0..a.len())],
                b: if b.1 > b.0 { rng.gen_range(b.0..=b.1) } else { b.0 },
            },
            AffineSpec::Fixed { a, b } => AffineDepthParams { a: *a, b: *b },
        }
    }

    /// Deterministic choice for validation: the middle of the spec.
    fn central(&self) -> AffineDepthParams {
        match self {
            AffineSpec::Random { a, b } => AffineDepthParams {
                a: a.iter().sum::<f64>() / a.len() as f64,
                b: 0.5 * (b.0 + b.1),
            },
            AffineSpec::Fixed { a, b } => AffineDepthParams { a: *a, b: *b },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            AffineSpec::Random { a, b } => !a.is_empty() && a.iter().all(|v| *v > 0.0) && b.0 <= b.1,
            AffineSpec::Fixed { a, .. } => *a > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("bad (a, b) sampling spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Plateau epochs tolerated before the step size is halved.
    pub patience: usize,
    /// Crop `(height, width)`; clips smaller than this are used whole.
    pub crop: (usize, usize),
    pub affine: AffineSpec,
    pub seq_len: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub grid: AngularGrid,
    pub synthesis: SynthesisConfig,
    pub displacement: DisplacementConfig,
    pub refinement: RefinementConfig,
}

impl TrainConfig {
    pub fn selfsup() -> Self {
        Self {
            phase: Phase::Selfsup,
            epochs: 25,
            lr: 1e-4,
            weight_decay: 1e-3,
            patience: 4,
            crop: (176, 264),
            affine: AffineSpec::Random { a: SELFSUP_A.to_vec(), b: SELFSUP_B },
            seq_len: 7,
            seed: 0,
            weights: LossWeights::default(),
            grid: AngularGrid::square(7).expect("odd"),
            synthesis: SynthesisConfig::default(),
            displacement: DisplacementConfig::default(),
            refinement: RefinementConfig::default(),
        }
    }

    pub fn refine() -> Self {
        Self {
            phase: Phase::Refine,
            epochs: 15,
            lr: 1e-3,
            affine: AffineSpec::Fixed { a: REFINE_AFFINE.0, b: REFINE_AFFINE.1 },
            ..Self::selfsup()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.seq_len == 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("epochs, sequence length and crop must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr and weight decay must be >= 0, got {} and {}",
                self.lr, self.weight_decay
            )));
        }
        if self.synthesis.layers != self.displacement.layers {
            return Err(Error::Config(format!(
                "synthesis has {} layers but the displacement head predicts {}",
                self.synthesis.layers, self.displacement.layers
            )));
        }
        self.affine.validate()?;
        self.weights.validate()?;
        self.synthesis.validate()?;
        self.refinement.validate()
    }
}

/// A monocular clip with its depth and center-frame flows materialized.
#[derive(Clone, Debug)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<Image>,
    pub depth: Vec<DepthMap>,
    /// `O(I_t, I_{t−1})`; `None` at the first frame.
    pub to_prev: Vec<Option<FlowField>>,
    /// `O(I_t, I_{t+1})`; `None` at the last frame.
    pub to_next: Vec<Option<FlowField>>,
}

impl Clip {
    pub fn from_provider(name: impl Into<String>, frames: Vec<Image>, provider: &dyn Provider) -> Result<Self> {
        let name = name.into();
        if frames.is_empty() {
            return Err(Error::Invalid(format!("clip {name} has no frames")));
        }
        let n = frames.len();
        let depth = (0..n).map(|t| provider.depth(t)).collect::<Result<Vec<_>>>()?;
        let to_prev = (0..n)
            .map(|t| (t > 0).then(|| provider.flow(FrameRef::Center(t), FrameRef::Center(t - 1))).transpose())
            .collect::<Result<Vec<_>>>()?;
        let to_next = (0..n)
            .map(|t| (t + 1 < n).then(|| provider.flow(FrameRef::Center(t), FrameRef::Center(t + 1))).transpose())
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = (frames[0].height(), frames[0].width());
        for img in &frames {
            img.ensure_spatial(h, w, "clip frames")?;
        }
        for d in &depth {
            d.as_image().ensure_spatial(h, w, "clip depth")?;
        }
        Ok(Self { name, frames, depth, to_prev, to_next })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn height(&self) -> usize {
        self.frames[0].height()
    }

    fn width(&self) -> usize {
        self.frames[0].width()
    }

    /// Frames `start..start + len` cropped to the window at `(y0, x0)`.
    fn window(&self, start: usize, len: usize, y0: usize, x0: usize, h: usize, w: usize) -> Result<Clip> {
        let crop_flow = |f: &FlowField| -> Result<FlowField> {
            let img = Image::new(f.height(), f.width(), 2, f.data().to_vec())?.crop(y0, x0, h, w)?;
            FlowField::new(h, w, img.into_data())
        };
        let end = start + len;
        let mut to_prev: Vec<Option<FlowField>> = self.to_prev[start..end].iter().map(|f| f.as_ref().map(crop_flow).transpose()).collect::<Result<_>>()?;
        let mut to_next: Vec<Option<FlowField>> = self.to_next[start..end].iter().map(|f| f.as_ref().map(crop_flow).transpose()).collect::<Result<_>>()?;
        to_prev[0] = None;
        to_next[len - 1] = None;
        Ok(Clip {
            name: self.name.clone(),
            frames: self.frames[start..end].iter().map(|f| f.crop(y0, x0, h, w)).collect::<Result<_>>()?,
            depth: self.depth[start..end]
                .iter()
                .map(|d| DepthMap::new(h, w, d.as_image().crop(y0, x0, h, w)?.into_data()))
                .collect::<Result<_>>()?,
            to_prev,
            to_next,
        })
    }

    /// Random window of at most `seq_len` frames and `crop` pixels.
    fn sample_window(&self, seq_len: usize, crop: (usize, usize), rng: &mut impl Rng) -> Result<Clip> {
        let len = seq_len.min(self.len());
        let (h, w) = (crop.0.min(self.height()), crop.1.min(self.width()));
        let start = rng.gen_range(0..=self.len() - len);
        let y0 = rng.gen_range(0..=self.height() - h);
        let x0 = rng.gen_range(0..=self.width() - w);
        self.window(start, len, y0, x0, h, w)
    }

    /// Leading frames, centered crop.
    fn central_window(&self, seq_len: usize, crop: (usize, usize)) -> Result<Clip> {
        let len = seq_len.min(self.len());
        let (h, w) = (crop.0.min(self.height()), crop.1.min(self.width()));
        self.window(0, len, (self.height() - h) / 2, (self.width() - w) / 2, h, w)
    }
}

/// Loss inputs of frame `t` under the disparities `disp`. View flows to the
/// neighbors are composed from the center flows and `disp`.
fn frame_inputs(clip: &Clip, disp: &[DisparityMap], t: usize, grid: AngularGrid) -> Result<FitInputs> {
    let mut inputs = FitInputs::single(grid, clip.frames[t].clone(), disp[t].clone())?;
    if let Some(Some(flow)) = clip.to_prev.get(t + 1) {
        inputs.next = Some((clip.frames[t + 1].clone(), flow.clone()));
    }
    let mut sets = Vec::new();
    for (n, center) in [(t.wrapping_sub(1), &clip.to_prev[t]), (t + 1, &clip.to_next[t])] {
        let Some(center) = center else { continue };
        let views = grid
            .offsets()
            .map(|(u, v)| {
                let flow = crate::datagen::compose_view_flow(&disp[t], &disp[n], center, (u, v), (0, 0));
                flow_warp_candidate(&clip.frames[n], &flow)
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(views);
    }
    if let (Some(first), Some(last)) = (sets.first(), sets.last()) {
        inputs.candidates = Some(Candidates { prev: first.clone(), next: last.clone() });
    }
    Ok(inputs)
}

/// Self-supervised objective of one frame as a graph node over `(F, D)`.
fn self_loss_node(g: &mut Graph, lf: Var, d: Var, inputs: &FitInputs, weights: &LossWeights) -> Result<(Var, LossReport)> {
    let shape = g.shape(lf).to_vec();
    let field = LightField::new(inputs.grid, shape[1], shape[2], g.value(lf).data().to_vec())?;
    let ev = evaluate(inputs, weights, &field, g.value(d).data())?;
    let (grad_lf, grad_d) = (ev.grad_lf, ev.grad_d);
    let node = g.custom(
        &[lf, d],
        Tensor::scalar(ev.report.total),
        Box::new(move |_, _, go| {
            let k = go.item();
            vec![
                Some(Tensor::new(shape.clone(), grad_lf.iter().map(|v| v * k).collect()).expect("shape")),
                Some(Tensor::from_vec(grad_d.iter().map(|v| v * k).collect())),
            ]
        }),
    );
    Ok((node, ev.report))
}

/// Mean absolute difference to a fixed target.
fn l1_node(g: &mut Graph, x: Var, target: &[f64]) -> Var {
    let xv = g.value(x);
    let n = xv.len() as f64;
    let value = xv.data().iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let sign: Vec<f64> = xv.data().iter().zip(target).map(|(a, b)| (a - b).signum() / n).collect();
    let shape = xv.shape().to_vec();
    g.custom(
        &[x],
        Tensor::scalar(value),
        Box::new(move |_, _, go| {
            let k = go.item();
            vec![Some(Tensor::new(shape.clone(), sign.iter().map(|v| v * k).collect()).expect("shape"))]
        }),
    )
}

type Grads = BTreeMap<String, Tensor>;

fn accumulate(into: &mut Grads, from: Grads, scale: f64) {
    for (k, mut v) in from {
        v.data_mut().iter_mut().for_each(|x| *x *= scale);
        match into.get_mut(&k) {
            Some(acc) => acc.add_assign(&v),
            None => {
                into.insert(k, v);
            }
        }
    }
}

/// Synthesis network plus displacement head, sharing one parameter store.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Backbone {
    pub synthesis: SynthesisNet,
    pub head: DisplacementHead,
    pub grid: AngularGrid,
}

impl Backbone {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            synthesis: SynthesisNet::new(config.synthesis)?,
            head: DisplacementHead::new(config.displacement)?,
            grid: config.grid,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.synthesis.init(store, &mut rng);
        self.head.init(store, &mut rng);
    }

    /// Predicted light fields for a whole video, state carried across frames.
    pub fn run_video(&self, store: &ParamStore, frames: &[Image], disparity: &[DisparityMap]) -> Result<Vec<LightField>> {
        if frames.len() != disparity.len() || frames.is_empty() {
            return Err(Error::Invalid("one disparity map per frame, at least one frame".into()));
        }
        let mut state = None;
        let mut out = Vec::with_capacity(frames.len());
        for t in 0..frames.len() {
            let (f, d, next) = self.predict(store, &neighbors(frames, disparity, t), state.as_ref())?;
            out.push(crate::lf::td_synthesize(&f, &d, self.grid)?);
            state = Some(next);
        }
        Ok(out)
    }

    pub fn predict(
        &self,
        store: &ParamStore,
        inputs: &SynthInputs<'_>,
        state: Option<&RecurrentState>,
    ) -> Result<(TDRepresentation, DisplacementVector, RecurrentState)> {
        let (f, next) = self.synthesis.predict(store, inputs, state)?;
        let d = self.head.predict(store, inputs)?;
        Ok((f, d, next))
    }
}

fn neighbors<'a>(frames: &'a [Image], disparity: &'a [DisparityMap], t: usize) -> SynthInputs<'a> {
    let last = frames.len() - 1;
    SynthInputs {
        prev: &frames[t.saturating_sub(1)],
        cur: &frames[t],
        next: &frames[(t + 1).min(last)],
        disparity: &disparity[t],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Scheduler and bookkeeping carried in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Progress {
    epochs_done: usize,
    lr: f64,
    best_val: Option<f64>,
    plateau_epochs: usize,
    history: Vec<EpochRecord>,
}

impl Progress {
    /// Halves the step size once the validation loss has plateaued for more
    /// than `patience` epochs.
    fn observe(&mut self, val: f64, patience: usize) {
        match self.best_val {
            Some(best) if val >= best * (1.0 - PLATEAU_TOL) => {
                self.plateau_epochs += 1;
                if self.plateau_epochs > patience {
                    self.lr *= 0.5;
                    self.plateau_epochs = 0;
                    info!("validation plateau, step size now {:.3e}", self.lr);
                }
            }
            _ => {
                self.best_val = Some(val);
                self.plateau_epochs = 0;
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for per-epoch checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this checkpoint.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step taken in this run.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn params(&self) -> &ParamStore {
        &self.checkpoint.params
    }
}

/// Training indices and validation indices: the last 10% of the list, at
/// least one item. A single-item dataset validates on its training item.
fn split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 2 {
        return ((0..n).collect(), (0..n).collect());
    }
    let val = ((n as f64 * VALIDATION_FRACTION).ceil() as usize).clamp(1, n - 1);
    ((0..n - val).collect(), (n - val..n).collect())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn checkpoint_for(kind: &str, config: &TrainConfig, params: &ParamStore, opt: &AdamW, progress: &Progress) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: kind.into(),
        config: serde_json::json!({ "train": config, "progress": progress }),
        params: params.clone(),
        optimizer: Some(opt.clone()),
        step: opt.step,
    })
}

fn save_epoch(dir: &Option<PathBuf>, ck: &Checkpoint) -> Result<()> {
    let Some(dir) = dir else { return Ok(()) };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let epoch = ck.config["progress"]["epochs_done"].as_u64().unwrap_or(0);
    ck.save(&dir.join(format!("{}_epoch_{epoch:03}.json", ck.kind)))?;
    ck.save(&dir.join(format!("{}_last.json", ck.kind)))
}

/// The training config echoed in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_value(ck.config["train"].clone())
        .map_err(|e| Error::Checkpoint(format!("{} checkpoint has no readable training config: {e}", ck.kind)))
}

fn checkpoint_progress(ck: &Checkpoint) -> Result<Progress> {
    serde_json::from_value(ck.config["progress"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint has no readable progress record: {e}")))
}

fn same_architecture(a: &TrainConfig, b: &TrainConfig) -> bool {
    a.synthesis == b.synthesis && a.displacement == b.displacement && a.grid == b.grid
}

/// Restores parameters, optimizer and schedule from `resume`, or starts
/// fresh with `init`.
fn start_state(
    kind: &str,
    config: &TrainConfig,
    resume: &Option<Checkpoint>,
    init: impl FnOnce() -> Result<ParamStore>,
) -> Result<(ParamStore, AdamW, Progress)> {
    match resume {
        Some(ck) => {
            ck.expect_kind(kind)?;
            let saved = checkpoint_config(ck)?;
            if !same_architecture(&saved, config) || saved.refinement != config.refinement {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different architecture".into()));
            }
            let progress = checkpoint_progress(ck)?;
            let mut opt = ck
                .optimizer
                .clone()
                .ok_or_else(|| Error::Checkpoint("resume checkpoint has no optimizer state".into()))?;
            opt.lr = progress.lr;
            Ok((ck.params.clone(), opt, progress))
        }
        None => {
            let opt = AdamW::new(config.lr, config.weight_decay);
            let progress = Progress { epochs_done: 0, lr: config.lr, best_val: None, plateau_epochs: 0, history: Vec::new() };
            Ok((init()?, opt, progress))
        }
    }
}

/// Mean per-frame loss of one clip and, when `train` is set, the averaged
/// parameter gradients.
fn clip_step(
    backbone: &Backbone,
    store: &ParamStore,
    clip: &Clip,
    affine: AffineDepthParams,
    weights: &LossWeights,
    train: bool,
) -> Result<(f64, Grads)> {
    let disp: Vec<DisparityMap> = clip.depth.iter().map(|z| depth_to_disparity(z, affine)).collect();
    let n = clip.len();
    let mut total = 0.0;
    let mut grads = Grads::new();
    let mut state: Option<RecurrentState> = None;
    for t in 0..n {
        let mut weights = *weights;
        let inputs = frame_inputs(clip, &disp, t, backbone.grid)?;
        if inputs.next.is_none() {
            weights.temp = 0.0;
        }
        if inputs.candidates.is_none() {
            weights.occ = 0.0;
        }
        let si = neighbors(&clip.frames, &disp, t);
        let mut ctx = if train { Ctx::trainable_all(store) } else { Ctx::frozen(store) };
        let vars = backbone.synthesis.forward(&mut ctx, &si, state.as_ref())?;
        let d = backbone.head.forward(&mut ctx, &si)?;
        let lf = ops::td_synthesize(&mut ctx.g, vars.f, d, backbone.grid);
        let (loss, report) = self_loss_node(&mut ctx.g, lf, d, &inputs, &weights)?;
        if !report.total.is_finite() {
            return Err(Error::Diverged { step: t, detail: format!("non-finite loss on clip {} frame {t}", clip.name) });
        }
        total += report.total / n as f64;
        if train {
            let g = ctx.g.backward(loss);
            accumulate(&mut grads, ctx.param_grads(&g), 1.0 / n as f64);
        }
        state = Some(RecurrentState { h: ctx.g.value(vars.h).clone(), c: ctx.g.value(vars.c).clone() });
    }
    Ok((total, grads))
}

/// Self-supervised training of the synthesis network and displacement head.
///
/// One step per clip window; windows, crops and `(a, b)` are drawn from a
/// generator seeded by `(seed, epoch)`, so resuming at an epoch boundary
/// replays exactly what an uninterrupted run would do.
pub fn train_selfsup(clips: &[Clip], config: &TrainConfig, opts: &RunOptions) -> Result<TrainOutcome> {
    config.validate()?;
    if clips.is_empty() {
        return Err(Error::Invalid("training needs at least one clip".into()));
    }
    let backbone = Backbone::new(config)?;
    let (mut store, mut opt, mut progress) = start_state(SELFSUP_KIND, config, &opts.resume, || {
        let mut s = ParamStore::new();
        backbone.init(&mut s, config.seed);
        Ok(s)
    })?;
    let (train_idx, val_idx) = split(clips.len());
    let val_clips = val_idx
        .iter()
        .map(|&i| clips[i].central_window(config.seq_len, config.crop))
        .collect::<Result<Vec<_>>>()?;
    let mut step_losses = Vec::new();
    let mut last = checkpoint_for(SELFSUP_KIND, config, &store, &opt, &progress)?;
    for epoch in progress.epochs_done..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        opt.lr = progress.lr;
        let mut epoch_loss = 0.0;
        for &i in &order {
            let window = clips[i].sample_window(config.seq_len, config.crop, &mut rng)?;
            let affine = config.affine.sample(&mut rng);
            let (loss, grads) = clip_step(&backbone, &store, &window, affine, &config.weights, true)
                .map_err(|e| with_step(e, opt.step as usize))?;
            opt.step(&mut store, &grads);
            if !store.all_finite() {
                return Err(Error::Diverged { step: opt.step as usize, detail: "non-finite weights".into() });
            }
            step_losses.push(loss);
            epoch_loss += loss / order.len() as f64;
        }
        let mut val = 0.0;
        for clip in &val_clips {
            val += clip_step(&backbone, &store, clip, config.affine.central(), &config.weights, false)?.0 / val_clips.len() as f64;
        }
        progress.history.push(EpochRecord { epoch, train_loss: epoch_loss, val_loss: val, lr: progress.lr });
        info!("selfsup epoch {epoch}: train {epoch_loss:.5} val {val:.5} lr {:.3e}", progress.lr);
        progress.epochs_done = epoch + 1;
        progress.observe(val, config.patience);
        last = checkpoint_for(SELFSUP_KIND, config, &store, &opt, &progress)?;
        save_epoch(&opts.checkpoint_dir, &last)?;
    }
    Ok(TrainOutcome { checkpoint: last, history: progress.history, step_losses })
}

fn with_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { detail, .. } => Error::Diverged { step, detail },
        other => other,
    }
}

/// One supervised refinement sample: a ground-truth LF image and the
/// relative depth of its center view.
#[derive(Clone, Debug)]
pub struct RefineSample {
    pub name: String,
    pub lf: LightField,
    pub depth: DepthMap,
}

/// Backbone output for a refinement sample, computed once since the
/// backbone is frozen.
struct RefineItem {
    truth: LightField,
    predicted: LightField,
    center: Image,
}

impl RefineItem {
    fn window(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<RefineItem> {
        let crop_lf = |lf: &LightField| -> Result<LightField> {
            let views = lf.views().iter().map(|v| v.crop(y0, x0, h, w)).collect::<Result<Vec<_>>>()?;
            LightField::from_views(lf.grid(), &views)
        };
        Ok(RefineItem {
            truth: crop_lf(&self.truth)?,
            predicted: crop_lf(&self.predicted)?,
            center: self.center.crop(y0, x0, h, w)?,
        })
    }
}

fn refine_loss(net: &RefinementNet, store: &ParamStore, item: &RefineItem, train: bool) -> Result<(f64, Grads)> {
    let mut ctx = if train { Ctx::new(store, |n| n.starts_with("refine.")) } else { Ctx::frozen(store) };
    let vars = net.forward(&mut ctx, &item.predicted, &item.center, None)?;
    let loss = l1_node(&mut ctx.g, vars.refined, item.truth.data());
    let value = ctx.g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Diverged { step: 0, detail: "non-finite refinement loss".into() });
    }
    let grads = if train { ctx.param_grads(&ctx.g.backward(loss)) } else { Grads::new() };
    Ok((value, grads))
}

/// Mean L1 of the unrefined and refined predictions against the truth.
pub fn refinement_l1(
    backbone_store: &ParamStore,
    refine: Option<(&RefinementNet, &ParamStore)>,
    backbone: &Backbone,
    samples: &[RefineSample],
    affine: AffineDepthParams,
) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let item = refine_item(backbone, backbone_store, s, affine)?;
        let lf = match refine {
            Some((net, store)) => net.predict(store, &item.predicted, &item.center, None)?.refined,
            None => item.predicted,
        };
        let n = lf.data().len() as f64;
        total += lf.data().iter().zip(item.truth.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    }
    Ok(total / samples.len().max(1) as f64)
}

fn refine_item(backbone: &Backbone, store: &ParamStore, s: &RefineSample, affine: AffineDepthParams) -> Result<RefineItem> {
    if s.lf.grid() != backbone.grid {
        return Err(Error::Shape(format!("sample {} grid differs from the backbone grid", s.name)));
    }
    let center = center_view(&s.lf);
    let disp = depth_to_disparity(&s.depth, affine);
    let frames = [center.clone()];
    let predicted = backbone.run_video(store, &frames, std::slice::from_ref(&disp))?.remove(0);
    Ok(RefineItem { truth: s.lf.clone(), predicted, center })
}

/// Supervised training of the refinement block on LF images, with the
/// backbone loaded from `backbone_ck` and never updated.
pub fn train_refinement(
    samples: &[RefineSample],
    backbone_ck: &Checkpoint,
    config: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("refinement training needs at least one LF image".into()));
    }
    backbone_ck.expect_kind(SELFSUP_KIND)?;
    let saved = checkpoint_config(backbone_ck)?;
    if !same_architecture(&saved, config) {
        return Err(Error::Checkpoint(
            "backbone checkpoint architecture differs from the refinement config".into(),
        ));
    }
    let backbone = Backbone::new(config)?;
    let net = RefinementNet::new(config.refinement, config.grid)?;
    let frozen: ParamStore = {
        let mut s = ParamStore::new();
        for (k, v) in backbone_ck.params.iter().filter(|(k, _)| !k.starts_with("refine.")) {
            s.insert(k.clone(), v.clone());
        }
        s
    };
    let (mut store, mut opt, mut progress) = start_state(REFINE_KIND, config, &opts.resume, || {
        let mut s = frozen.clone();
        net.init(&mut s, &mut ChaCha8Rng::seed_from_u64(config.seed));
        Ok(s)
    })?;
    let affine = config.affine.central();
    let items = samples
        .iter()
        .map(|s| refine_item(&backbone, &frozen, s, affine))
        .collect::<Result<Vec<_>>>()?;
    let (train_idx, val_idx) = split(items.len());
    let mut step_losses = Vec::new();
    let mut last = checkpoint_for(REFINE_KIND, config, &store, &opt, &progress)?;
    for epoch in progress.epochs_done..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        opt.lr = progress.lr;
        let mut epoch_loss = 0.0;
        for &i in &order {
            let it = &items[i];
            let (h, w) = (config.crop.0.min(it.truth.height()), config.crop.1.min(it.truth.width()));
            let y0 = rng.gen_range(0..=it.truth.height() - h);
            let x0 = rng.gen_range(0..=it.truth.width() - w);
            let window = it.window(y0, x0, h, w)?;
            let (loss, grads) = refine_loss(&net, &store, &window, true).map_err(|e| with_step(e, opt.step as usize))?;
            opt.step(&mut store, &grads);
            step_losses.push(loss);
            epoch_loss += loss / order.len() as f64;
        }
        let mut val = 0.0;
        for &i in &val_idx {
            val += refine_loss(&net, &store, &items[i], false)?.0 / val_idx.len() as f64;
        }
        progress.history.push(EpochRecord { epoch, train_loss: epoch_loss, val_loss: val, lr: progress.lr });
        info!("refine epoch {epoch}: train {epoch_loss:.5} val {val:.5} lr {:.3e}", progress.lr);
        progress.epochs_done = epoch + 1;
        progress.observe(val, config.patience);
        last = checkpoint_for(REFINE_KIND, config, &store, &opt, &progress)?;
        save_epoch(&opts.checkpoint_dir, &last)?;
    }
    ensure_frozen(&frozen, &store)?;
    Ok(TrainOutcome { checkpoint: last, history: progress.history, step_losses })
}

/// Fails unless every backbone tensor in `store` is bit-identical to `frozen`.
fn ensure_frozen(frozen: &ParamStore, store: &ParamStore) -> Result<()> {
    for (k, v) in frozen.iter() {
        let now = store.get(k)?;
        if now.data().iter().zip(v.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(Error::Checkpoint(format!("backbone parameter {k} changed during refinement")));
        }
    }
    Ok(())
}

/// A trained pipeline loaded from a checkpoint of either phase.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub backbone: Backbone,
    pub refinement: Option<RefinementNet>,
    pub params: ParamStore,
}

impl Pipeline {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = checkpoint_config(ck)?;
        let backbone = Backbone::new(&config)?;
        let refinement = match ck.kind.as_str() {
            SELFSUP_KIND => None,
            REFINE_KIND => Some(RefinementNet::new(config.refinement, config.grid)?),
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other}"))),
        };
        Ok(Self { backbone, refinement, params: ck.params.clone() })
    }

    pub fn grid(&self) -> AngularGrid {
        self.backbone.grid
    }

    /// Light field video from frames and their disparity maps.
    pub fn synthesize(&self, frames: &[Image], disparity: &[DisparityMap]) -> Result<Vec<LightField>> {
        let lfs = self.backbone.run_video(&self.params, frames, disparity)?;
        match &self.refinement {
            None => Ok(lfs),
            Some(net) => lfs
                .iter()
                .zip(frames)
                .map(|(lf, img)| Ok(net.predict(&self.params, lf, img, None)?.refined))
                .collect(),
        }
    }
}
