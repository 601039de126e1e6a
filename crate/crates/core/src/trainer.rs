//! Per-timestep optimization and training of whole sequences.
//!
//! Every time step is fitted independently from its own images: a fresh field seeded by
//! `(seed, t)`, pixel batches drawn from the training views, mean squared error against
//! the background-composited pixels, manual backpropagation and Adam. Because nothing is
//! shared between time steps, [`train_sequence`] can hand them to any number of workers
//! and still emit byte-identical results in time order.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, MultiViewFrameSet, Split};
use crate::error::{Error, Result};
use crate::field::{FieldConfig, TimestepField};
use crate::geometry::Ray;
use crate::metrics::psnr_from_mse;
use crate::occupancy::{OccupancyConfig, OccupancyGrid};
use crate::renderer::{RayBatch, RenderParams, Sampling};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelSampler {
    /// Every training pixel once per epoch, in a fresh random order each epoch.
    Permutation,
    /// Independent uniform draws.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_rays: usize,
    pub lr_table: f64,
    pub lr_mlp: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the pull toward the previous time step's parameters; 0 trains every
    /// time step independently.
    pub kappa: f64,
    pub render: RenderParams,
    pub seed: u64,
    pub precision: Precision,
    pub sampler: PixelSampler,
    /// Random sample offsets within each ray sub-interval.
    pub jitter: bool,
    /// Start from the previous time step's parameters instead of a fresh initialization.
    pub warm_start: bool,
    /// Loss is logged every this many iterations.
    pub log_every: usize,
    /// Rays rendered together inside one batch; bounds activation memory.
    pub chunk_rays: usize,
    /// Skip empty space during training; rendering outside training stays exact.
    #[serde(default)]
    pub occupancy: Option<OccupancyConfig>,
}

impl TrainConfig {
    pub fn new(iterations: usize, batch_rays: usize, render: RenderParams) -> Self {
        Self {
            iterations,
            batch_rays,
            lr_table: 1e-2,
            lr_mlp: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-15,
            kappa: 0.0,
            render,
            seed: 0,
            precision: Precision::F32,
            sampler: PixelSampler::Permutation,
            jitter: false,
            warm_start: false,
            log_every: 100,
            chunk_rays: 1024,
            occupancy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_rays < 1 || self.chunk_rays < 1 || self.log_every < 1 {
            return Err(Error::Config(
                "batch_rays, chunk_rays and log_every must be at least 1".into(),
            ));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be non-negative, got {}", self.kappa)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} not in [0, 1)")));
            }
        }
        if !(self.adam_eps >= 0.0) || !(self.lr_table >= 0.0) || !(self.lr_mlp >= 0.0) {
            return Err(Error::Config("learning rates and epsilon must be non-negative".into()));
        }
        self.render.validate()
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of time step `t`; depends only on `(seed, t)`.
pub fn timestep_seed(seed: u64, t: u32) -> u64 {
    splitmix64(seed ^ splitmix64(u64::from(t)))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// A contiguous parameter range sharing one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub lr: f64,
}

/// Hash table at `lr_table`, every network layer at `lr_mlp`.
pub fn param_groups(field_config: &FieldConfig, lr_table: f64, lr_mlp: f64) -> Vec<ParamGroup> {
    let layout = field_config.layout();
    let mut groups = vec![ParamGroup {
        name: "hash table".into(),
        range: layout.table.clone(),
        lr: lr_table,
    }];
    groups.extend(layout.layers().map(|l| ParamGroup {
        name: l.name.to_string(),
        range: l.range(),
        lr: lr_mlp,
    }));
    groups
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![S::zero(); len],
            v: vec![S::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients are rejected before anything
/// changes.
pub fn adam_step<S: Scalar>(
    theta: &mut [S],
    grads: &[S],
    state: &mut AdamState<S>,
    groups: &[ParamGroup],
    hyper: AdamHyper,
) -> Result<()> {
    if grads.len() != theta.len() || state.m.len() != theta.len() || state.v.len() != theta.len() {
        return Err(Error::LayoutMismatch {
            expected: theta.len(),
            actual: grads.len(),
        });
    }
    for g in groups {
        if let Some(i) = grads[g.range.clone()].iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("gradient of {} (entry {i})", g.name),
            });
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let bc1 = S::lit(1.0 - hyper.beta1.powi(k));
    let bc2 = S::lit(1.0 - hyper.beta2.powi(k));
    let (b1, b2, eps) = (S::lit(hyper.beta1), S::lit(hyper.beta2), S::lit(hyper.eps));
    let (c1, c2) = (S::one() - b1, S::one() - b2);
    for group in groups {
        let lr = S::lit(group.lr);
        for i in group.range.clone() {
            let g = grads[i];
            let (m, v) = (state.m[i], state.v[i]);
            // entries that have never seen a gradient stay exactly where they are
            if g == S::zero() && m == S::zero() && v == S::zero() {
                continue;
            }
            let m = b1 * m + c1 * g;
            let v = b2 * v + c2 * g * g;
            state.m[i] = m;
            state.v[i] = v;
            theta[i] = theta[i] - lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Sum of squared errors and its gradient scaled by `2 / norm`.
fn squared_error<S: Scalar>(pred: &[[S; 3]], target: &[[S; 3]], norm: usize) -> (f64, Vec<[S; 3]>) {
    let scale = S::lit(2.0 / norm as f64);
    let mut sum = 0.0;
    let grads = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
            sum += d.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            d.map(|v| v * scale)
        })
        .collect();
    (sum, grads)
}

/// Batch mean of `‖pred - target‖²` and its gradient with respect to `pred`.
pub fn photometric_loss<S: Scalar>(pred: &[[S; 3]], target: &[[S; 3]]) -> Result<(f64, Vec<[S; 3]>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "prediction has {} rays, target {}",
            pred.len(),
            target.len()
        )));
    }
    let (sum, grads) = squared_error(pred, target, pred.len());
    Ok((sum / pred.len() as f64, grads))
}

/// `κ Σ (θ - θ_prev)²`; adds `2κ(θ - θ_prev)` to `grads` when given.
pub fn temporal_regularizer<S: Scalar>(theta: &[S], prev: &[S], kappa: f64, grads: Option<&mut [S]>) -> Result<f64> {
    if theta.len() != prev.len() {
        return Err(Error::LayoutMismatch {
            expected: theta.len(),
            actual: prev.len(),
        });
    }
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let value = kappa
        * theta
            .iter()
            .zip(prev)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>();
    if let Some(grads) = grads {
        let k2 = S::lit(2.0 * kappa);
        for ((g, &a), &b) in grads.iter_mut().zip(theta).zip(prev) {
            *g = *g + k2 * (a - b);
        }
    }
    Ok(value)
}

/// Every training pixel of a frame set as a ray and its composited target color.
pub struct RayPool<S> {
    pub rays: Vec<Ray<S>>,
    pub targets: Vec<[S; 3]>,
    /// Index into the frame set's views for each pixel.
    pub view_of: Vec<u32>,
}

impl<S: Scalar> RayPool<S> {
    pub fn from_frames(frames: &MultiViewFrameSet) -> Result<Self> {
        let n = frames.pixel_count();
        let mut rays = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        let mut view_of = Vec::with_capacity(n);
        for (vi, view) in frames.views.iter().enumerate() {
            let composite = view.image.composite(frames.background);
            for y in 0..view.image.height {
                for x in 0..view.image.width {
                    rays.push(view.camera.generate_ray(x, y)?.cast());
                    targets.push(composite[(y * view.image.width + x) as usize].map(S::lit));
                    view_of.push(vi as u32);
                }
            }
        }
        if rays.is_empty() {
            return Err(Error::Dataset(format!(
                "time {} has no training pixels",
                frames.time_index
            )));
        }
        Ok(Self { rays, targets, view_of })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Draws pixel indices from a pool of `total` pixels.
pub struct PixelDraw {
    kind: PixelSampler,
    total: usize,
    rng: ChaCha8Rng,
    order: Vec<u32>,
    cursor: usize,
}

impl PixelDraw {
    pub fn new(kind: PixelSampler, total: usize, rng: ChaCha8Rng) -> Self {
        Self {
            kind,
            total,
            rng,
            order: Vec::new(),
            cursor: 0,
        }
    }

    pub fn next_index(&mut self) -> usize {
        match self.kind {
            PixelSampler::Uniform => self.rng.gen_range(0..self.total),
            PixelSampler::Permutation => {
                if self.cursor == self.order.len() {
                    if self.order.is_empty() {
                        self.order = (0..self.total as u32).collect();
                    }
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1] as usize
            }
        }
    }

    pub fn batch(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Rays with the target color of each.
pub type RayTargets<S> = (Vec<Ray<S>>, Vec<[S; 3]>);

/// `n` rays drawn uniformly over all pixels of all views, with composited targets.
pub fn sample_ray_batch<S: Scalar>(
    frames: &MultiViewFrameSet,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RayTargets<S>> {
    let total = frames.pixel_count();
    if total == 0 {
        return Err(Error::Dataset("empty frame set".into()));
    }
    let mut rays = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let mut i = rng.gen_range(0..total);
        let view = frames
            .views
            .iter()
            .find(|v| {
                let c = v.image.pixel_count();
                if i < c {
                    true
                } else {
                    i -= c;
                    false
                }
            })
            .expect("index within total");
        let (x, y) = (
            (i % view.image.width as usize) as u32,
            (i / view.image.width as usize) as u32,
        );
        rays.push(view.camera.generate_ray(x, y)?.cast());
        let p = view.image.pixel(x, y);
        let c = crate::image::composite_alpha([p[0] as f64, p[1] as f64, p[2] as f64, p[3] as f64], frames.background);
        targets.push(c.map(S::lit));
    }
    Ok((rays, targets))
}

/// One line of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: u32,
    pub iter: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_train: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_val: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log records serialize") + "\n")
            .collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.psnr_train.is_none())
            .map(|r| r.loss)
            .collect()
    }

    pub fn final_record(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// Mean squared error of rendering every ray of `pool`.
pub fn pool_mse<S: Scalar>(
    field: &TimestepField<S>,
    pool: &RayPool<S>,
    params: &RenderParams,
    chunk: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for (rays, targets) in pool.rays.chunks(chunk).zip(pool.targets.chunks(chunk)) {
        let batch = RayBatch::render(field, rays, params, None)?;
        sum += squared_error(&batch.colors, targets, 1).0;
    }
    Ok(sum / (3 * pool.len()) as f64)
}

/// Fits one time step to `frames`. `prev` is the previous time step's field, used by the
/// temporal pull (`kappa > 0`) and by warm starts.
pub fn train_timestep<S: Scalar>(
    frames: &MultiViewFrameSet,
    field_config: &FieldConfig,
    cfg: &TrainConfig,
    prev: Option<&TimestepField<S>>,
    val: Option<&MultiViewFrameSet>,
) -> Result<(TimestepField<S>, TrainLog)> {
    cfg.validate()?;
    let start = Instant::now();
    let t = frames.time_index;
    let seed = timestep_seed(cfg.seed, t);
    let mut field = match prev {
        Some(p) if cfg.warm_start => {
            TimestepField::from_params(field_config.clone(), t, frames.scene_scale, p.params().to_vec())?
        }
        _ => TimestepField::init(field_config.clone(), t, seed)?,
    };
    field.scene_scale = frames.scene_scale;
    let mut log = TrainLog::default();
    if cfg.iterations == 0 {
        return Ok((field, log));
    }
    if let Some(p) = prev {
        if p.parameter_count() != field.parameter_count() {
            return Err(Error::LayoutMismatch {
                expected: field.parameter_count(),
                actual: p.parameter_count(),
            });
        }
    }

    let pool = RayPool::<S>::from_frames(frames)?;
    let mut draw = PixelDraw::new(cfg.sampler, pool.len(), stream_rng(seed, 1));
    let mut jitter_rng = stream_rng(seed, 2);
    let groups = param_groups(field_config, cfg.lr_table, cfg.lr_mlp);
    let mut adam = AdamState::<S>::new(field.parameter_count());
    let mut grads = vec![S::zero(); field.parameter_count()];
    let mut rays = Vec::with_capacity(cfg.chunk_rays);
    let mut targets = Vec::with_capacity(cfg.chunk_rays);
    let mut occupancy = cfg.occupancy.as_ref().map(|o| {
        let step = match cfg.render.sampling {
            Sampling::FixedCount { samples } => 2.0 * field.half_extent() / samples as f64,
            Sampling::FixedStep { step } => step,
        };
        (o, OccupancyGrid::new(o, field.half_extent(), step), stream_rng(seed, 3))
    });

    for iter in 0..cfg.iterations {
        if let Some((o, grid, rng)) = occupancy.as_mut() {
            if iter % o.update_every.max(1) == 0 {
                grid.update(&field, rng)?;
            }
        }
        let skip_grid = occupancy
            .as_ref()
            .filter(|(o, _, _)| iter >= o.warmup)
            .map(|(_, g, _)| g);
        grads.iter_mut().for_each(|g| *g = S::zero());
        let picks = draw.batch(cfg.batch_rays);
        let mut loss = 0.0;
        for chunk in picks.chunks(cfg.chunk_rays) {
            rays.clear();
            targets.clear();
            rays.extend(chunk.iter().map(|&i| pool.rays[i]));
            targets.extend(chunk.iter().map(|&i| pool.targets[i]));
            let jitter = if cfg.jitter { Some(&mut jitter_rng) } else { None };
            let batch = RayBatch::render_with(&field, &rays, &cfg.render, jitter, skip_grid).map_err(|e| match e {
                Error::NonFinite { location } => Error::NonFinite {
                    location: format!("{location} at iteration {iter}"),
                },
                other => other,
            })?;
            let (sum, d_colors) = squared_error(&batch.colors, &targets, cfg.batch_rays);
            loss += sum / cfg.batch_rays as f64;
            batch.backward(&field, &d_colors, &mut grads);
        }
        if let (Some(p), true) = (prev, cfg.kappa > 0.0) {
            loss += temporal_regularizer(field.params(), p.params(), cfg.kappa, Some(&mut grads))?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: iter, loss });
        }
        adam_step(field.params_mut(), &grads, &mut adam, &groups, cfg.adam())?;
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iterations {
            log::debug!(
                "t={t} iter={iter} loss={loss:.6}{}",
                occupancy
                    .as_ref()
                    .map(|(_, g, _)| format!(" occupied={:.3}", g.occupied_fraction()))
                    .unwrap_or_default()
            );
            log.records.push(LogRecord {
                t,
                iter,
                loss,
                psnr_train: None,
                psnr_val: None,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }

    let last_loss = log.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let psnr_train = psnr_from_mse(pool_mse(&field, &pool, &cfg.render, cfg.chunk_rays)?);
    let psnr_val = match val {
        Some(v) => Some(psnr_from_mse(pool_mse(
            &field,
            &RayPool::from_frames(v)?,
            &cfg.render,
            cfg.chunk_rays,
        )?)),
        None => None,
    };
    log::info!(
        "t={t}: {} iterations, train PSNR {psnr_train:.2} dB{}",
        cfg.iterations,
        psnr_val.map(|p| format!(", val PSNR {p:.2} dB")).unwrap_or_default()
    );
    log.records.push(LogRecord {
        t,
        iter: cfg.iterations,
        loss: last_loss,
        psnr_train: Some(psnr_train),
        psnr_val,
        wall_ms: start.elapsed().as_millis() as u64,
    });
    Ok((field, log))
}

/// Supplies per-timestep training (and optional validation) views.
pub trait FrameSource: Sync {
    fn train_frames(&self, t: u32) -> Result<MultiViewFrameSet>;
    fn val_frames(&self, t: u32) -> Result<Option<MultiViewFrameSet>>;
}

/// A dataset restricted to a split.
pub struct SplitSource<'a> {
    pub dataset: &'a Dataset,
    pub split: Split,
}

impl FrameSource for SplitSource<'_> {
    fn train_frames(&self, t: u32) -> Result<MultiViewFrameSet> {
        self.dataset.load_frame_set(t, &self.split.train)
    }

    fn val_frames(&self, t: u32) -> Result<Option<MultiViewFrameSet>> {
        if self.split.val.is_empty() {
            return Ok(None);
        }
        self.dataset.load_frame_set(t, &self.split.val).map(Some)
    }
}

/// Frame sets already in memory, looked up by time index.
pub struct InMemoryFrames {
    pub train: Vec<MultiViewFrameSet>,
    pub val: Vec<MultiViewFrameSet>,
}

impl FrameSource for InMemoryFrames {
    fn train_frames(&self, t: u32) -> Result<MultiViewFrameSet> {
        self.train
            .iter()
            .find(|f| f.time_index == t)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("no frames for time {t}")))
    }

    fn val_frames(&self, t: u32) -> Result<Option<MultiViewFrameSet>> {
        Ok(self.val.iter().find(|f| f.time_index == t).cloned())
    }
}

#[derive(Debug, Default)]
pub struct SequenceOutcome {
    /// Time indices handed to the sink, in order.
    pub trained: Vec<u32>,
    pub failures: Vec<(u32, Error)>,
    pub logs: Vec<TrainLog>,
    pub wall_seconds: f64,
}

fn train_one<S: Scalar>(
    source: &dyn FrameSource,
    t: u32,
    field_config: &FieldConfig,
    cfg: &TrainConfig,
    prev: Option<&TimestepField<S>>,
) -> Result<(TimestepField<S>, TrainLog)> {
    let frames = source.train_frames(t)?;
    let val = source.val_frames(t)?;
    train_timestep(&frames, field_config, cfg, prev, val.as_ref())
}

/// Trains every time index in `times` and passes each result to `sink` in the order of
/// `times`.
///
/// With `kappa = 0` time steps are independent and are distributed over `workers`
/// threads; a failed time step is reported in the outcome without affecting the
/// others. With `kappa > 0` each step depends on the previous one, so training is
/// sequential and `workers` must be 1.
pub fn train_sequence<S, F>(
    source: &dyn FrameSource,
    times: &[u32],
    field_config: &FieldConfig,
    cfg: &TrainConfig,
    workers: usize,
    mut sink: F,
) -> Result<SequenceOutcome>
where
    S: Scalar,
    F: FnMut(TimestepField<S>, &TrainLog) -> Result<()>,
{
    cfg.validate()?;
    field_config.validate()?;
    if workers < 1 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    if cfg.kappa > 0.0 && workers > 1 {
        return Err(Error::Config(
            "kappa > 0 couples consecutive time steps; train with a single worker".into(),
        ));
    }
    let start = Instant::now();
    let mut outcome = SequenceOutcome::default();

    if cfg.kappa > 0.0 || cfg.warm_start {
        if workers > 1 {
            return Err(Error::Config(
                "warm starts are sequential; train with a single worker".into(),
            ));
        }
        let mut prev: Option<TimestepField<S>> = None;
        for &t in times {
            let (field, log) = train_one(source, t, field_config, cfg, prev.as_ref()).map_err(|e| Error::Timestep {
                time: t,
                source: Box::new(e),
            })?;
            sink(field.clone(), &log)?;
            outcome.trained.push(t);
            outcome.logs.push(log);
            prev = Some(field);
        }
        outcome.wall_seconds = start.elapsed().as_secs_f64();
        return Ok(outcome);
    }

    let next_job = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, Result<(TimestepField<S>, TrainLog)>)>();
    let sink_result = std::thread::scope(|scope| {
        for _ in 0..workers.min(times.len()) {
            let tx = tx.clone();
            let (next_job, abort) = (&next_job, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let job = next_job.fetch_add(1, Ordering::SeqCst);
                let Some(&t) = times.get(job) else { break };
                let result = train_one::<S>(source, t, field_config, cfg, None);
                if tx.send((job, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut expected = 0usize;
        for (job, result) in rx.iter() {
            pending.insert(job, result);
            while let Some(result) = pending.remove(&expected) {
                let t = times[expected];
                match result {
                    Ok((field, log)) => {
                        if let Err(e) = sink(field, &log) {
                            abort.store(true, Ordering::SeqCst);
                            return Err(e);
                        }
                        outcome.trained.push(t);
                        outcome.logs.push(log);
                    }
                    Err(e) => {
                        log::error!("time step {t} failed: {e}");
                        outcome.failures.push((t, e));
                    }
                }
                expected += 1;
            }
        }
        Ok(())
    });
    sink_result?;
    outcome.wall_seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::View;
    use crate::encoding::{GridConfig, TableLayout};
    use crate::geometry::{look_at_zup, CameraModel, Vec3};
    use crate::image::RgbaImage;

    #[test]
    fn adam_matches_scripted_trajectory() {
        let expected = [
            0.9,
            0.8003885665541842,
            0.7014971672520679,
            0.6037236381214508,
            0.5075422300817535,
            0.41351272147954743,
            0.32228667189847915,
            0.234608005350088,
            0.151304333051768,
            0.07326523133614721,
        ];
        let mut theta = vec![1.0f64];
        let mut state = AdamState::new(1);
        let groups = [ParamGroup {
            name: "x".into(),
            range: 0..1,
            lr: 0.1,
        }];
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        };
        for want in expected {
            let g = [2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut state, &groups, hyper).unwrap();
            assert!((theta[0] - want).abs() < 1e-10);
        }
        assert_eq!(state.step, 10);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let groups = [
            ParamGroup {
                name: "a".into(),
                range: 0..2,
                lr: 0.01,
            },
            ParamGroup {
                name: "b".into(),
                range: 2..3,
                lr: 0.001,
            },
        ];
        let hyper = AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        };
        let mut theta = vec![0.5f64, -0.25, 2.0];
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &[0.0; 3], &mut state, &groups, hyper).unwrap();
        assert_eq!(theta, vec![0.5, -0.25, 2.0]);
        assert_eq!(state.step, 1);
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &[3.0, -1e-3, 7.0], &mut state, &groups, hyper).unwrap();
        assert!((theta[0] - 0.49).abs() < 1e-12);
        assert!((theta[1] - -0.24).abs() < 1e-12);
        assert!((theta[2] - 1.999).abs() < 1e-12);
        let err = adam_step(&mut theta, &[0.0, 0.0, f64::NAN], &mut state, &groups, hyper).unwrap_err();
        assert!(err.to_string().contains("gradient of b"));
    }

    #[test]
    fn loss_values() {
        let p = vec![[0.2f64, 0.3, 0.4]];
        assert_eq!(photometric_loss(&p, &p).unwrap().0, 0.0);
        let (l, g) = photometric_loss(&[[0.6f64, 0.5, 0.5]], &[[0.5, 0.5, 0.5]]).unwrap();
        assert!((l - 0.01).abs() < 1e-15);
        assert!((g[0][0] - 0.2).abs() < 1e-15);
        assert!(photometric_loss(&p, &[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<[f64; 3]> = (0..37).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let target: Vec<[f64; 3]> = (0..37).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let mut oracle = 0.0;
        for (a, b) in pred.iter().zip(&target) {
            for c in 0..3 {
                oracle += (a[c] - b[c]) * (a[c] - b[c]);
            }
        }
        assert!((photometric_loss(&pred, &target).unwrap().0 - oracle / 37.0).abs() < 1e-10);
    }

    #[test]
    fn regularizer_values_and_gradient() {
        let prev = vec![0.0f64; 4];
        assert_eq!(
            temporal_regularizer(&[3.0, 4.0, 0.0, 0.0], &prev, 1.0, None).unwrap(),
            25.0
        );
        assert_eq!(temporal_regularizer(&prev, &prev, 2.0, None).unwrap(), 0.0);
        let mut g = vec![0.0; 4];
        assert_eq!(
            temporal_regularizer(&[1.0, 2.0, 3.0, 4.0], &prev, 0.0, Some(&mut g)).unwrap(),
            0.0
        );
        assert_eq!(g, vec![0.0; 4]);
        assert!(temporal_regularizer(&[1.0], &prev, 1.0, None).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let prev: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = vec![0.0; 6];
        temporal_regularizer(&theta, &prev, 0.7, Some(&mut g)).unwrap();
        for i in 0..6 {
            let h = 1e-4;
            let mut a = theta.clone();
            a[i] += h;
            let up = temporal_regularizer(&a, &prev, 0.7, None).unwrap();
            a[i] -= 2.0 * h;
            let down = temporal_regularizer(&a, &prev, 0.7, None).unwrap();
            assert!(((up - down) / (2.0 * h) - g[i]).abs() < 1e-8);
        }
    }

    fn frames(n_views: u32, size: u32) -> MultiViewFrameSet {
        let views = (0..n_views)
            .map(|c| {
                let a = c as f64 * 0.9;
                let pose = look_at_zup(Vec3::new(1.8 * a.cos(), 1.8 * a.sin(), 0.6), Vec3::new(0.0, 0.0, 0.0)).unwrap();
                let camera = CameraModel::from_fov_x(size, size, 0.8, pose).unwrap();
                let mut image = RgbaImage::new(size, size);
                for y in 0..size {
                    for x in 0..size {
                        let inside = (x as i32 - size as i32 / 2).pow(2) + (y as i32 - size as i32 / 2).pow(2)
                            < (size as i32 / 4).pow(2);
                        image.set_pixel(x, y, if inside { [0.9, 0.2, 0.1, 1.0] } else { [0.0; 4] });
                    }
                }
                View {
                    camera_index: c,
                    camera,
                    image,
                }
            })
            .collect();
        MultiViewFrameSet::new(0, views, [1.0; 3]).unwrap()
    }

    #[test]
    fn permutation_covers_every_pixel_each_epoch() {
        let mut d = PixelDraw::new(PixelSampler::Permutation, 50, ChaCha8Rng::seed_from_u64(1));
        for _ in 0..3 {
            let mut b = d.batch(50);
            b.sort();
            assert_eq!(b, (0..50).collect::<Vec<_>>());
        }
        let mut again = PixelDraw::new(PixelSampler::Permutation, 50, ChaCha8Rng::seed_from_u64(1));
        let mut first = PixelDraw::new(PixelSampler::Permutation, 50, ChaCha8Rng::seed_from_u64(1));
        assert_eq!(again.batch(120), first.batch(120));
    }

    #[test]
    fn uniform_batches_are_uniform_over_views() {
        let f = frames(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 7];
        let pool = RayPool::<f64>::from_frames(&f).unwrap();
        let mut d = PixelDraw::new(PixelSampler::Uniform, pool.len(), rng.clone());
        for _ in 0..100_000 {
            counts[pool.view_of[d.next_index()] as usize] += 1;
        }
        let e = 100_000.0 / 7.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 0.999 quantile of chi-square with 6 degrees of freedom
        assert!(chi2 < 22.457744484825323, "chi2 = {chi2}");
        let (rays, targets) = sample_ray_batch::<f64>(&f, 10, &mut rng).unwrap();
        assert_eq!((rays.len(), targets.len()), (10, 10));
    }

    fn small_field_config() -> FieldConfig {
        FieldConfig::with_grid(GridConfig {
            levels: 4,
            channels: 2,
            table_size: 1 << 12,
            r_min: 4.0,
            r_max_factor: 8.0,
            half_extent: 2.0,
            layout: TableLayout::PerLevel,
        })
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let cfg = TrainConfig::new(0, 16, RenderParams::inference(8, [1.0; 3]));
        let (field, log) = train_timestep::<f32>(&frames(2, 8), &small_field_config(), &cfg, None, None).unwrap();
        let init = TimestepField::<f32>::init(small_field_config(), 0, timestep_seed(0, 0)).unwrap();
        assert_eq!(field.params(), init.params());
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut cfg = TrainConfig::new(40, 64, RenderParams::inference(16, [1.0; 3]));
        cfg.log_every = 1;
        cfg.chunk_rays = 24;
        let f = frames(3, 8);
        let (a, log) = train_timestep::<f32>(&f, &small_field_config(), &cfg, None, None).unwrap();
        let (b, _) = train_timestep::<f32>(&f, &small_field_config(), &cfg, None, None).unwrap();
        assert_eq!(a.params(), b.params());
        let losses = log.losses();
        assert_eq!(losses.len(), 40);
        assert!(losses[35..].iter().sum::<f64>() < losses[..5].iter().sum::<f64>());
        let jsonl = log.to_jsonl();
        assert_eq!(jsonl.lines().count(), 41);
        assert!(jsonl.lines().last().unwrap().contains("psnr_train"));
    }

    #[test]
    fn kappa_requires_single_worker() {
        let mut cfg = TrainConfig::new(1, 8, RenderParams::inference(4, [1.0; 3]));
        cfg.kappa = 0.1;
        let src = InMemoryFrames {
            train: vec![frames(1, 4)],
            val: vec![],
        };
        let err = train_sequence::<f32, _>(&src, &[0], &small_field_config(), &cfg, 2, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn failed_timestep_does_not_block_others() {
        let cfg = TrainConfig::new(2, 8, RenderParams::inference(4, [1.0; 3]));
        let mut f1 = frames(1, 4);
        f1.time_index = 1;
        let src = InMemoryFrames {
            train: vec![frames(1, 4), f1],
            val: vec![],
        };
        let mut seen = Vec::new();
        let out = train_sequence::<f32, _>(&src, &[0, 5, 1], &small_field_config(), &cfg, 2, |f, _| {
            seen.push(f.time_index);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(out.trained, vec![0, 1]);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, 5);
    }

    #[test]
    fn timestep_seeds_differ() {
        assert_ne!(timestep_seed(0, 0), timestep_seed(0, 1));
        assert_ne!(timestep_seed(1, 0), timestep_seed(0, 0));
        assert_eq!(timestep_seed(7, 3), timestep_seed(7, 3));
    }
}
