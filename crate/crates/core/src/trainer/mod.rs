//! Frame-by-frame optimization.
//!
//! The field for frame `k` starts from the field of frame `k - 1` and is
//! optimized for `iters_per_frame` steps against frame `k`'s training images
//! only. The occupancy grid is blurred once at each frame boundary and
//! raised during the frame wherever the field reports density.

mod adam;
mod loss;
mod metrics;

use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::psnr;
use crate::field::{Conditioning, FieldConfig, FieldTape, RadianceField};
use crate::geometry::{Camera, CameraRig};
use crate::occgrid::{
    global_update_baseline, occupancy_score, threshold_schedule, OccupancyGrid, SamplerConfig,
    TransitionKernel,
};
use crate::raster::{Image, Rgb};
use crate::renderer::{
    composite_backward, march_rays, render_image, ConditionSource, PixelRay, RenderConfig,
    RenderedView,
};
use crate::scene::{Dataset, FrameObservation};

pub use adam::{adam_step, AdamMoments, BETA1, BETA2, EPSILON};
pub use loss::{depth_smoothness_loss, depth_smoothness_with_grad, rgb_loss, DEPTH_LOSS_EPS};
pub use metrics::{
    CsvSink, Extrapolation, FrameMetrics, MetricsSink, RenderSink, ViewOutput, CSV_HEADER,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub hash: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            hash: 1e-2,
            mlp: 1e-3,
        }
    }
}

/// How the grid learns from the field during streaming.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridUpdate {
    /// Per-sample updates from every evaluated sample.
    #[default]
    Bayesian,
    /// Re-estimate every voxel from scratch at the start of each frame.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccupancyConfig {
    pub resolution: usize,
    /// Blur the grid at frame boundaries. Off keeps it unchanged.
    pub transition: bool,
    pub kernel_size: usize,
    pub kernel_stddev: f64,
    pub update: GridUpdate,
    /// Iteration of the first warm-up grid re-estimate; later ones follow
    /// at each doubling.
    pub warmup_refresh_interval: usize,
    pub points_per_voxel: usize,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            transition: true,
            kernel_size: 3,
            kernel_stddev: 0.8,
            update: GridUpdate::Bayesian,
            warmup_refresh_interval: 16,
            points_per_voxel: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_iters: usize,
    pub iters_per_frame: usize,
    pub rays_per_iter: usize,
    pub learning_rates: LearningRates,
    pub depth_loss_weight: f64,
    pub model_variant: Conditioning,
    pub seed: u64,
    /// Zeroes the timing columns so metrics files are reproducible byte for byte.
    pub deterministic: bool,
    pub samples_per_ray: usize,
    pub field: FieldConfig,
    pub sampler: SamplerConfig,
    pub occupancy: OccupancyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_iters: 500,
            iters_per_frame: 10,
            rays_per_iter: 4096,
            learning_rates: LearningRates::default(),
            depth_loss_weight: 0.0,
            model_variant: Conditioning::ProjectedColor,
            seed: 0,
            deterministic: false,
            samples_per_ray: 128,
            field: FieldConfig::default(),
            sampler: SamplerConfig::default(),
            occupancy: OccupancyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.warmup_iters < self.iters_per_frame {
            return fail(format!(
                "warmup_iters ({}) must be at least iters_per_frame ({})",
                self.warmup_iters, self.iters_per_frame
            ));
        }
        if self.rays_per_iter < 9 {
            return fail(format!(
                "rays_per_iter must be at least 9 (one 3x3 patch), got {}",
                self.rays_per_iter
            ));
        }
        let lr = self.learning_rates;
        if !(lr.hash >= 0.0 && lr.mlp >= 0.0 && self.depth_loss_weight >= 0.0) {
            return fail("learning rates and loss weights must be non-negative".into());
        }
        if self.samples_per_ray == 0 {
            return fail("samples_per_ray must be positive".into());
        }
        let occ = &self.occupancy;
        if occ.resolution == 0 || occ.points_per_voxel == 0 || occ.warmup_refresh_interval == 0 {
            return fail("occupancy resolution, points_per_voxel and warmup_refresh_interval must be positive".into());
        }
        self.field.validate()?;
        self.sampler.validate()?;
        TransitionKernel::gaussian(occ.kernel_size, occ.kernel_stddev)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn kernel(&self) -> Result<TransitionKernel> {
        TransitionKernel::gaussian(self.occupancy.kernel_size, self.occupancy.kernel_stddev)
    }

    /// Occupancy value used for rejection at frame `k`: the scheduled
    /// density threshold expressed as a voxel occupancy score.
    pub fn occupancy_threshold(&self, k: usize) -> f64 {
        occupancy_score(
            threshold_schedule(k, &self.sampler),
            self.occupancy.resolution,
        )
    }
}

/// Read access to a multi-view video. The trainer reads frames only
/// through this trait.
pub trait FrameSource {
    fn rig(&self) -> &CameraRig;
    fn background(&self) -> Rgb;
    fn frame_count(&self) -> usize;
    fn observation(&self, k: usize) -> Result<FrameObservation>;
    /// Ground truth of an evaluation camera, used only for metrics.
    fn test_image(&self, k: usize, camera_id: &str) -> Result<Image>;
}

impl FrameSource for Dataset {
    fn rig(&self) -> &CameraRig {
        &self.rig
    }

    fn background(&self) -> Rgb {
        self.background
    }

    fn frame_count(&self) -> usize {
        Dataset::frame_count(self)
    }

    fn observation(&self, k: usize) -> Result<FrameObservation> {
        Dataset::observation(self, k)
    }

    fn test_image(&self, k: usize, camera_id: &str) -> Result<Image> {
        self.image(k, camera_id).cloned()
    }
}

/// Cameras used for metrics: the rig's test cameras, or the first training
/// camera when there are none.
pub fn evaluation_cameras(rig: &CameraRig) -> Vec<&Camera> {
    if rig.test_cameras.is_empty() {
        vec![&rig.train_cameras[0]]
    } else {
        rig.test_cameras.iter().collect()
    }
}

/// Time input of the space-time variant: frame index scaled to [0, 1].
pub fn normalized_time(k: usize, frame_count: usize) -> f64 {
    if frame_count <= 1 {
        0.0
    } else {
        k as f64 / (frame_count - 1) as f64
    }
}

/// Hidden state after frame `frame_index`.
#[derive(Clone, Debug)]
pub struct FrameState {
    pub frame_index: usize,
    pub field: RadianceField,
    pub moments: AdamMoments,
    pub grid: OccupancyGrid,
    pub observation: FrameObservation,
    pub rig: CameraRig,
    pub background: Rgb,
    pub frame_count: usize,
    /// Loss of each iteration of the most recent frame.
    pub losses: Vec<f64>,
    rng: ChaCha8Rng,
}

impl FrameState {
    /// Conditioning for frame `k` given that frame's observation.
    pub fn condition_source<'a>(
        &'a self,
        observation: &'a FrameObservation,
        k: usize,
    ) -> ConditionSource<'a> {
        match self.field.conditioning() {
            Conditioning::ProjectedColor => ConditionSource::Frame {
                observation,
                rig: &self.rig,
            },
            Conditioning::SpaceTime => ConditionSource::Time(normalized_time(k, self.frame_count)),
            Conditioning::None => ConditionSource::None,
        }
    }

    fn check(&self) -> Result<()> {
        if self.grid.frame_index != self.frame_index {
            return Err(Error::Contract(format!(
                "grid is at frame {} but state is at frame {}",
                self.grid.frame_index, self.frame_index
            )));
        }
        if self.moments.len() != self.field.params().len() {
            return Err(Error::Contract(
                "optimizer moments do not match field parameters".into(),
            ));
        }
        Ok(())
    }

    /// Renders `camera` at frame `k` using the given observation for conditioning.
    pub fn render(
        &self,
        camera: &Camera,
        observation: &FrameObservation,
        k: usize,
        config: &TrainConfig,
    ) -> Result<RenderedView> {
        let cond = self.condition_source(observation, k);
        let rc = RenderConfig {
            samples_per_ray: config.samples_per_ray,
            threshold: config.occupancy_threshold(k),
            interval: config.sampler.interval,
            background: self.background,
            jitter_seed: None,
        };
        render_image(&self.field, Some(&self.grid), camera, &cond, &rc)
    }
}

/// Mean squared color error over every training pixel of `observation`,
/// rendered with bin-midpoint samples.
pub fn frame_loss(
    state: &FrameState,
    observation: &FrameObservation,
    config: &TrainConfig,
) -> Result<f64> {
    let k = observation.index;
    let mut total = 0.0;
    let mut count = 0usize;
    for (cam, img) in state.rig.train_cameras.iter().zip(&observation.images) {
        let view = state.render(cam, observation, k, config)?;
        let (rendered, truth) = (view.image.pixels(), img.pixels());
        total += rgb_loss(rendered, truth)?.0 * rendered.len() as f64;
        count += rendered.len();
    }
    Ok(total / count.max(1) as f64)
}

const PATCHES_PER_CHUNK: usize = 16;

struct ChunkOutcome {
    grads: Vec<f64>,
    loss: f64,
    evaluated: Vec<(Vector3<f64>, f64)>,
}

fn lr_groups(field: &RadianceField, lr: &LearningRates) -> [(Range<usize>, f64); 2] {
    [(field.table_range(), lr.hash), (field.mlp_range(), lr.mlp)]
}

/// One optimization step on `observation` (frame `k`). Returns the loss.
fn iterate(
    state: &mut FrameState,
    observation: &FrameObservation,
    k: usize,
    config: &TrainConfig,
) -> Result<f64> {
    let rig = &state.rig;
    let (w, h) = rig.image_size();
    if w < 3 || h < 3 {
        return Err(Error::Config(format!(
            "images of {w}x{h} cannot hold a 3x3 patch"
        )));
    }
    let n_patches = config.rays_per_iter / 9;
    let patches: Vec<(usize, u32, u32)> = (0..n_patches)
        .map(|_| {
            (
                state.rng.gen_range(0..rig.train_cameras.len()),
                state.rng.gen_range(0..w - 2),
                state.rng.gen_range(0..h - 2),
            )
        })
        .collect();
    let chunk_seeds: Vec<u64> = patches
        .chunks(PATCHES_PER_CHUNK)
        .map(|_| state.rng.gen())
        .collect();
    let total_rays = (n_patches * 9) as f64;
    let rc = RenderConfig {
        samples_per_ray: config.samples_per_ray,
        threshold: config.occupancy_threshold(k),
        interval: config.sampler.interval,
        background: state.background,
        jitter_seed: None,
    };
    let cond = state.condition_source(observation, k);
    let field = &state.field;
    let grid = &state.grid;
    let bg = state.background;
    let depth_w = config.depth_loss_weight;

    let outcomes: Vec<Result<ChunkOutcome>> = patches
        .par_chunks(PATCHES_PER_CHUNK)
        .zip(chunk_seeds.par_iter())
        .map(|(chunk, seed)| {
            let mut rays = Vec::with_capacity(chunk.len() * 9);
            let mut truth = Vec::with_capacity(chunk.len() * 9);
            for &(ci, x0, y0) in chunk {
                let cam = &rig.train_cameras[ci];
                let img = &observation.images[ci];
                for dy in 0..3 {
                    for dx in 0..3 {
                        rays.push(PixelRay::from_camera(cam, x0 + dx, y0 + dy));
                        truth.push(img.get(x0 + dx, y0 + dy));
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut tape = FieldTape::default();
            let batch = march_rays(
                field,
                Some(grid),
                &rays,
                &cond,
                &rc,
                Some(&mut rng),
                Some(&mut tape),
            )?;

            let mut loss = 0.0;
            let mut dl_color = Vec::with_capacity(rays.len());
            for (r, t) in batch.results.iter().zip(&truth) {
                let c = r.over(&bg);
                let d = [c[0] - t[0], c[1] - t[1], c[2] - t[2]];
                loss += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / total_rays;
                dl_color.push([
                    2.0 * d[0] / total_rays,
                    2.0 * d[1] / total_rays,
                    2.0 * d[2] / total_rays,
                ]);
            }
            let mut dl_depth = vec![0.0; rays.len()];
            if depth_w > 0.0 {
                for p in 0..chunk.len() {
                    let depths: [f64; 9] =
                        std::array::from_fn(|i| batch.results[9 * p + i].expected_depth);
                    if depths.iter().any(|d| !(*d > 0.0)) {
                        continue;
                    }
                    let colors: [Rgb; 9] = std::array::from_fn(|i| truth[9 * p + i]);
                    let far = rays[9 * p].far;
                    let (l, g) = depth_smoothness_with_grad(&depths, &colors, far)?;
                    loss += depth_w * l / n_patches as f64;
                    for i in 0..9 {
                        dl_depth[9 * p + i] = depth_w * g[i] / n_patches as f64;
                    }
                }
            }

            let mut d_sigma = Vec::with_capacity(batch.samples.len());
            let mut d_color = Vec::with_capacity(batch.samples.len());
            for r in 0..rays.len() {
                let (ds, dc) = composite_backward(&batch.shaded(r), &bg, &dl_color[r], dl_depth[r]);
                d_sigma.extend(ds);
                d_color.extend(dc);
            }
            let mut grads = vec![0.0; field.params().len()];
            field.backward(&tape, &d_sigma, &d_color, &mut grads)?;
            let evaluated = batch
                .samples
                .iter()
                .zip(&batch.outputs)
                .map(|(s, o)| (s.x, o.sigma))
                .collect();
            Ok(ChunkOutcome {
                grads,
                loss,
                evaluated,
            })
        })
        .collect();

    let mut grads = vec![0.0; state.field.params().len()];
    let mut loss = 0.0;
    let mut evaluated = Vec::new();
    for outcome in outcomes {
        let o = outcome?;
        for (g, v) in grads.iter_mut().zip(&o.grads) {
            *g += v;
        }
        loss += o.loss;
        evaluated.extend(o.evaluated);
    }

    let groups = lr_groups(&state.field, &config.learning_rates);
    if let Err(e) = adam_step(
        state.field.params_mut(),
        &grads,
        &mut state.moments,
        &groups,
    ) {
        log::error!("frame {k}: optimization step aborted: {e}");
        return Err(e);
    }
    if config.occupancy.update == GridUpdate::Bayesian {
        for (x, sigma) in &evaluated {
            state.grid.update_at(x, *sigma, config.sampler.update_mode);
        }
    }
    state.grid.advance_iteration();
    Ok(loss)
}

/// Re-estimates every voxel from the field's density, conditioned on `observation`.
fn refresh_grid(
    state: &mut FrameState,
    observation: &FrameObservation,
    k: usize,
    config: &TrainConfig,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(state.rng.gen());
    let cond = state.condition_source(observation, k);
    let field = &state.field;
    let kind = field.conditioning();
    let grid = global_update_baseline(
        &state.grid,
        |points: &[Vector3<f64>]| {
            let per_chunk: Vec<Result<Vec<f64>>> = points
                .par_chunks(1024)
                .map(|pts| {
                    let mut cond_values = Vec::with_capacity(pts.len() * kind.dim());
                    for x in pts {
                        cond.fill(kind, x, &mut cond_values)?;
                    }
                    let dirs = vec![Vector3::z(); pts.len()];
                    Ok(field
                        .forward(pts, &dirs, &cond_values, None)?
                        .iter()
                        .map(|o| o.sigma)
                        .collect())
                })
                .collect();
            let mut out = Vec::with_capacity(points.len());
            for c in per_chunk {
                out.extend(c?);
            }
            Ok(out)
        },
        config.occupancy.points_per_voxel,
        &mut rng,
    )?;
    state.grid = grid;
    Ok(())
}

/// Builds the initial state and optimizes it on frame 0. The grid starts
/// fully occupied and is re-estimated from the field after
/// `warmup_refresh_interval` iterations, then at every doubling of that
/// count, and once more at the end.
pub fn warmup_first_frame(source: &dyn FrameSource, config: &TrainConfig) -> Result<FrameState> {
    config.validate()?;
    if source.frame_count() == 0 {
        return Err(Error::Data("dataset has no frames".into()));
    }
    let observation = source.observation(0)?;
    let field = RadianceField::new(config.field.clone(), config.model_variant, config.seed)?;
    let mut state = FrameState {
        frame_index: 0,
        moments: AdamMoments::zeros(field.params().len()),
        field,
        grid: OccupancyGrid::filled(config.occupancy.resolution, 1.0),
        observation: observation.clone(),
        rig: source.rig().clone(),
        background: source.background(),
        frame_count: source.frame_count(),
        losses: Vec::with_capacity(config.warmup_iters),
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_F1E1_D000_0000),
    };
    let mut next_refresh = config.occupancy.warmup_refresh_interval;
    for i in 0..config.warmup_iters {
        let loss = iterate(&mut state, &observation, 0, config)?;
        state.losses.push(loss);
        if i + 1 == next_refresh || i + 1 == config.warmup_iters {
            refresh_grid(&mut state, &observation, 0, config)?;
            next_refresh *= 2;
        }
    }
    state.grid.iteration_index = 0;
    log::info!(
        "warm-up done: {} iterations, final loss {:.5}, grid mean {:.4}",
        config.warmup_iters,
        state.losses.last().copied().unwrap_or(f64::NAN),
        state.grid.mean()
    );
    Ok(state)
}

/// Advances the state from frame `k - 1` to frame `k = observation.index`:
/// one grid transition, then `iters_per_frame` optimization steps on this
/// frame's images.
pub fn train_frame(
    mut state: FrameState,
    observation: FrameObservation,
    config: &TrainConfig,
) -> Result<FrameState> {
    state.check()?;
    let k = observation.index;
    if k != state.frame_index + 1 {
        return Err(Error::Contract(format!(
            "state is at frame {} but received frame {k}",
            state.frame_index
        )));
    }
    if observation.images.len() != state.rig.train_cameras.len() {
        return Err(Error::Data(format!(
            "frame {k}: {} images for {} training cameras",
            observation.images.len(),
            state.rig.train_cameras.len()
        )));
    }
    advance_grid(&mut state, config)?;
    state.frame_index = k;
    if config.occupancy.update == GridUpdate::Global {
        refresh_grid(&mut state, &observation, k, config)?;
    }
    state.losses.clear();
    for _ in 0..config.iters_per_frame {
        let loss = iterate(&mut state, &observation, k, config)?;
        state.losses.push(loss);
    }
    state.observation = observation;
    Ok(state)
}

fn advance_grid(state: &mut FrameState, config: &TrainConfig) -> Result<()> {
    if config.occupancy.transition {
        state.grid = state.grid.transition(&config.kernel()?)?;
    } else {
        state.grid.frame_index += 1;
        state.grid.iteration_index = 0;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StreamOptions {
    /// Before training on frame `k`, render it with the frame `k - 1`
    /// state and record the result.
    pub extrapolate: bool,
}

pub struct StreamOutcome {
    pub metrics: Vec<FrameMetrics>,
    pub state: FrameState,
}

fn elapsed_ms(start: Instant, config: &TrainConfig) -> f64 {
    if config.deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64() * 1e3
    }
}

fn mean_psnr(source: &dyn FrameSource, views: &[(String, RenderedView)], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for (id, v) in views {
        total += psnr(&v.image, &source.test_image(k, id)?)?;
    }
    Ok(total / views.len() as f64)
}

fn render_views(
    state: &FrameState,
    observation: &FrameObservation,
    k: usize,
    config: &TrainConfig,
) -> Result<Vec<(String, RenderedView)>> {
    evaluation_cameras(&state.rig)
        .into_iter()
        .map(|cam| Ok((cam.id.clone(), state.render(cam, observation, k, config)?)))
        .collect()
}

fn emit(
    sinks: &mut [&mut dyn MetricsSink],
    metrics: &FrameMetrics,
    views: &[(String, RenderedView)],
    rig: &CameraRig,
) -> Result<()> {
    let outputs: Vec<ViewOutput> = views
        .iter()
        .map(|(id, view)| ViewOutput {
            camera_id: id,
            view,
            far: rig.camera(id).map_or(1.0, |c| c.far),
        })
        .collect();
    for sink in sinks.iter_mut() {
        sink.record(metrics, &outputs)?;
    }
    Ok(())
}

/// Warm-up on frame 0, then train and evaluate every later frame in order.
/// Emits one metrics row per frame to every sink.
pub fn stream(
    source: &dyn FrameSource,
    config: &TrainConfig,
    sinks: &mut [&mut dyn MetricsSink],
) -> Result<StreamOutcome> {
    stream_with(source, config, StreamOptions::default(), sinks)
}

pub fn stream_with(
    source: &dyn FrameSource,
    config: &TrainConfig,
    options: StreamOptions,
    sinks: &mut [&mut dyn MetricsSink],
) -> Result<StreamOutcome> {
    let result = run_stream(source, config, options, sinks);
    for sink in sinks.iter_mut() {
        let flushed = sink.flush();
        if result.is_ok() {
            flushed?;
        }
    }
    result
}

fn run_stream(
    source: &dyn FrameSource,
    config: &TrainConfig,
    options: StreamOptions,
    sinks: &mut [&mut dyn MetricsSink],
) -> Result<StreamOutcome> {
    let mut metrics = Vec::with_capacity(source.frame_count());

    let start = Instant::now();
    let mut state = warmup_first_frame(source, config)?;
    let train_ms = elapsed_ms(start, config);
    let start = Instant::now();
    let views = render_views(&state, &state.observation, 0, config)?;
    let render_ms = elapsed_ms(start, config);
    let row = FrameMetrics {
        frame: 0,
        psnr_db: mean_psnr(source, &views, 0)?,
        train_ms,
        render_ms,
        mean_samples_per_ray: views
            .iter()
            .map(|(_, v)| v.mean_samples_per_ray)
            .sum::<f64>()
            / views.len() as f64,
        extrapolation: None,
    };
    emit(sinks, &row, &views, &state.rig)?;
    metrics.push(row);

    for k in 1..source.frame_count() {
        let observation = source.observation(k)?;
        let extrapolation = if options.extrapolate {
            let mut probe = state.clone();
            advance_grid(&mut probe, config)?;
            let views = render_views(&probe, &observation, k, config)?;
            Some(Extrapolation {
                psnr_db: mean_psnr(source, &views, k)?,
                psnr_prev_db: mean_psnr(source, &views, k - 1)?,
            })
        } else {
            None
        };

        let start = Instant::now();
        state = train_frame(state, observation, config)?;
        let train_ms = elapsed_ms(start, config);
        let start = Instant::now();
        let views = render_views(&state, &state.observation, k, config)?;
        let render_ms = elapsed_ms(start, config);
        let row = FrameMetrics {
            frame: k,
            psnr_db: mean_psnr(source, &views, k)?,
            train_ms,
            render_ms,
            mean_samples_per_ray: views
                .iter()
                .map(|(_, v)| v.mean_samples_per_ray)
                .sum::<f64>()
                / views.len() as f64,
            extrapolation,
        };
        log::info!(
            "frame {k}: {:.2} dB, {:.1} samples/ray",
            row.psnr_db,
            row.mean_samples_per_ray
        );
        emit(sinks, &row, &views, &state.rig)?;
        metrics.push(row);
    }
    Ok(StreamOutcome { metrics, state })
}
