//! Two-stage amortized optimization.
//!
//! Stage 1 renders the field volumetrically and trains the generator, SDF
//! and color networks; stage 2 extracts and rasterizes a mesh and trains
//! everything including the zero-initialized deformation head. Every step
//! draws a batch of seen prompts, renders each from a random camera, asks
//! the guidance source for `d loss / d pixel`, back-propagates that as the
//! seed of the image node and applies Adam.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::camera::Camera;
use crate::dataset::Dataset;
use crate::dmtet::{extract, MeshStats, TetGrid};
use crate::embedding::directional_prompt;
use crate::error::{Error, Result};
use crate::guidance::{Guidance, GuidanceError, GuidanceRequest, TargetKey, ViewSnap};
use crate::io::{Image, Mesh};
use crate::model::Model;
use crate::neus::{render_stage1, render_stage1_image, RayStats, Stage1Options};
use crate::par;
use crate::params::Group;
use crate::raster::{render_stage2, render_stage2_image, Stage2Options};
use crate::shading::{Light, Shading, ShadingMode};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub distance: f64,
    /// Elevation band, degrees.
    pub elevation: [f64; 2],
    /// Vertical FOV range per stage, degrees.
    pub fov_stage1: [f64; 2],
    pub fov_stage2: [f64; 2],
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { distance: 3.0, elevation: [-10.0, 60.0], fov_stage1: [40.0, 70.0], fov_stage2: [30.0, 40.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub iterations: u64,
    /// Square render size.
    pub resolution: usize,
    /// Ray samples (stage 1 only).
    pub samples: usize,
    pub lr: f64,
    pub batch: usize,
    /// Diffusion timestep fractions forwarded to the guidance source.
    pub noise_range: (f64, f64),
    pub schedule: LrSchedule,
}

/// Learning rate over a stage's iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Linear decay from `lr` to zero at `iterations`; the last iterate is
    /// what gets exported, so it should not carry full-rate noise.
    #[default]
    Linear,
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            iterations: 3000,
            resolution: 64,
            samples: 64,
            lr: 4e-4,
            batch: 16,
            noise_range: (0.2, 0.98),
            schedule: LrSchedule::Linear,
        }
    }

    pub fn stage2() -> Self {
        Self {
            iterations: 1500,
            resolution: 128,
            samples: 0,
            lr: 2e-4,
            batch: 16,
            noise_range: (0.02, 0.5),
            schedule: LrSchedule::Linear,
        }
    }

    /// Scheduled rate for the step taken at `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - iteration as f64 / self.iterations.max(1) as f64).max(0.0),
        }
    }
}

fn stage2_overrides<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<StageConfig, D::Error> {
    let given = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(StageConfig::stage2()).map_err(D::Error::custom)?;
    match (base.as_object_mut(), given.as_object()) {
        (Some(b), Some(o)) => b.extend(o.iter().map(|(k, v)| (k.clone(), v.clone()))),
        _ => return Err(D::Error::custom("stage2 must be an object")),
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
    pub stage1: StageConfig,
    /// Missing keys fall back to the stage-2 defaults, not the stage-1 ones.
    #[serde(deserialize_with = "stage2_overrides")]
    pub stage2: StageConfig,
    pub camera: CameraConfig,
    pub adam: AdamConfig,
    pub seed: u64,
    pub guidance_scale: f64,
    /// Probability of a textureless (white albedo) render.
    pub textureless_prob: f64,
    pub background: [f64; 3],
    /// Tet grid resolution for stage 2.
    pub grid_resolution: usize,
    /// Consecutive non-finite steps before the learning rate is halved.
    pub max_skips: u32,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seen: Vec::new(),
            unseen: Vec::new(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            camera: CameraConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            guidance_scale: 20.0,
            textureless_prob: 0.5,
            background: [1.0; 3],
            grid_resolution: 32,
            max_skips: 3,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn stage(&self, stage: u8) -> &StageConfig {
        if stage == 1 {
            &self.stage1
        } else {
            &self.stage2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seen.is_empty() {
            return bad("no seen prompts".into());
        }
        if let Some(p) = self.seen.iter().find(|p| self.unseen.contains(p)) {
            return bad(format!("prompt {p:?} is both seen and unseen"));
        }
        if self.stage1.resolution > self.stage2.resolution {
            return bad(format!(
                "stage-1 resolution {} exceeds stage-2 resolution {}",
                self.stage1.resolution, self.stage2.resolution
            ));
        }
        for (i, s) in [&self.stage1, &self.stage2].into_iter().enumerate() {
            let (lo, hi) = s.noise_range;
            if s.batch == 0 || s.resolution == 0 || !(s.lr > 0.0) || !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return bad(format!("invalid stage-{} settings", i + 1));
            }
        }
        if self.stage1.samples < 2 {
            return bad("stage 1 needs at least 2 samples per ray".into());
        }
        let c = &self.camera;
        for r in [c.elevation, c.fov_stage1, c.fov_stage2] {
            if !(r[0] <= r[1]) {
                return bad(format!("empty range {r:?}"));
            }
        }
        if !(c.fov_stage1[0] > 0.0 && c.fov_stage2[0] > 0.0 && c.fov_stage1[1] < 180.0 && c.fov_stage2[1] < 180.0) {
            return bad("field of view outside (0, 180)".into());
        }
        if !(c.distance > 0.0) || !(0.0..=1.0).contains(&self.textureless_prob) || self.grid_resolution == 0 {
            return bad("invalid camera distance, shading probability or grid size".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SampledCamera {
    pub azimuth: f64,
    pub elevation: f64,
    pub camera: Camera,
}

/// Eye at the configured distance, uniform azimuth, elevation uniform in the
/// band, FOV uniform in the stage's range, looking at the origin.
pub fn sample_camera(cfg: &CameraConfig, stage: u8, resolution: usize, rng: &mut impl Rng) -> SampledCamera {
    let az = rng.gen_range(0.0..360.0);
    let [elo, ehi] = cfg.elevation;
    let el = if ehi > elo { rng.gen_range(elo..=ehi) } else { elo };
    let [flo, fhi] = if stage == 1 { cfg.fov_stage1 } else { cfg.fov_stage2 };
    let fov = if fhi > flo { rng.gen_range(flo..=fhi) } else { flo };
    SampledCamera { azimuth: az, elevation: el, camera: Camera::orbit(az, el, cfg.distance, fov, resolution, resolution) }
}

/// Independent stream per (seed, stage, iteration), so resumed runs replay exactly.
pub fn step_rng(seed: u64, stage: u8, iteration: u64) -> ChaCha8Rng {
    let mut z = seed ^ ((stage as u64) << 56) ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Adam with per-parameter first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, sizes: &[usize]) -> Self {
        Self { cfg, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    /// One update of `params[i]` by `grads[i]`; `None` gradients leave both
    /// the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[Option<Vec<f32>>], lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut params[i]);
            for k in 0..g.len() {
                let gk = g[k] as f64;
                let mk = beta1 * m[k] as f64 + (1.0 - beta1) * gk;
                let vk = beta2 * v[k] as f64 + (1.0 - beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                p[k] = (p[k] as f64 - lr * (mk / c1) / ((vk / c2).sqrt() + eps)) as f32;
            }
        }
    }
}

/// Progress counters that a checkpoint must carry.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Stage currently being optimized (1 or 2).
    pub stage: u8,
    /// Completed iterations of that stage.
    pub iteration: u64,
    pub lr_scale: f64,
    pub consecutive_skips: u32,
    pub skipped_steps: u64,
    pub empty_mesh_samples: u64,
    pub guidance_failures: u64,
    pub ray_stats: RayStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    pub iteration: u64,
    /// Mean guidance loss over the samples that produced one.
    pub loss: Option<f64>,
    pub used: usize,
    pub skipped: bool,
    pub lr: f64,
}

#[derive(Clone, Debug)]
struct Plan {
    prompt: String,
    cam: SampledCamera,
    snap: Option<ViewSnap>,
    shading: Shading,
}

enum SampleOut {
    Done { grads: Vec<Option<Vec<f32>>>, loss: Option<f64>, stats: RayStats, finite: bool },
    EmptyMesh,
    GuidanceFailed,
}

fn soft_failure(e: &GuidanceError) -> bool {
    matches!(
        e,
        GuidanceError::Timeout(_)
            | GuidanceError::ShapeMismatch { .. }
            | GuidanceError::Service(_)
            | GuidanceError::Protocol(_)
            | GuidanceError::InvalidRequest(_)
    )
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: Adam,
    pub state: TrainState,
    pub history: Vec<StepLog>,
    grid: Option<TetGrid>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: Model<f32>) -> Result<Self> {
        cfg.validate()?;
        let sizes: Vec<usize> = model.store.iter().map(|(_, p)| p.value.numel()).collect();
        let adam = Adam::new(cfg.adam, &sizes);
        let state = TrainState { stage: 1, lr_scale: 1.0, ..TrainState::default() };
        Ok(Self { cfg, model, adam, state, history: Vec::new(), grid: None })
    }

    pub fn grid(&mut self) -> Result<&TetGrid> {
        let he = self.model.cfg.heads.half_extent;
        let r = self.cfg.grid_resolution;
        if self.grid.as_ref().map_or(true, |g| g.resolution != r || g.half_extent != he) {
            self.grid = Some(TetGrid::build(r, he)?);
        }
        Ok(self.grid.as_ref().expect("grid just built"))
    }

    /// Moves to stage 2 with fresh optimizer moments and learning-rate scale.
    pub fn begin_stage2(&mut self) {
        if self.state.stage == 2 {
            return;
        }
        let sizes: Vec<usize> = self.model.store.iter().map(|(_, p)| p.value.numel()).collect();
        self.adam = Adam::new(self.cfg.adam, &sizes);
        self.state = TrainState { stage: 2, lr_scale: 1.0, ray_stats: self.state.ray_stats, ..TrainState::default() };
    }

    fn trainable(stage: u8) -> impl Fn(Group) -> bool + Copy + Send + Sync {
        move |g| stage == 2 || g != Group::Deform
    }

    fn plan(&self, rng: &mut ChaCha8Rng, guidance: &dyn Guidance) -> Vec<Plan> {
        let stage = self.state.stage;
        let sc = self.cfg.stage(stage);
        (0..sc.batch)
            .map(|_| {
                let prompt = self.cfg.seen.choose(rng).expect("validated non-empty").clone();
                let mut cam = sample_camera(&self.cfg.camera, stage, sc.resolution, rng);
                let mode = if rng.gen_bool(self.cfg.textureless_prob) { ShadingMode::Textureless } else { ShadingMode::Diffuse };
                let snap = guidance.snap(stage, cam.azimuth, cam.elevation);
                let light = match snap {
                    Some(s) => {
                        cam = SampledCamera {
                            azimuth: s.azimuth,
                            elevation: s.elevation,
                            camera: Camera::orbit(s.azimuth, s.elevation, self.cfg.camera.distance, s.fov, sc.resolution, sc.resolution),
                        };
                        Light::headlight(&cam.camera)
                    }
                    None => Light::random(&cam.camera, rng),
                };
                Plan { prompt, cam, snap, shading: Shading { mode, light } }
            })
            .collect()
    }

    fn run_sample(&self, plan: &Plan, guidance: &Mutex<&mut dyn Guidance>) -> Result<SampleOut> {
        let stage = self.state.stage;
        let sc = self.cfg.stage(stage);
        let model = &self.model;
        let tape = Tape::<f32>::new();
        let p = model.store.bind(&tape, Self::trainable(stage));
        let emb = model.embed(&plan.prompt)?;
        let planes = model.triplane_var(&tape, &p, &emb)?;
        let (image, stats) = if stage == 1 {
            let opts = Stage1Options { samples: sc.samples, shading: plan.shading, background: self.cfg.background };
            let r = render_stage1(model, &tape, &p, planes, &plan.cam.camera, &opts)?;
            (r.image, r.stats)
        } else {
            let opts = Stage2Options { shading: plan.shading, background: self.cfg.background };
            let grid = self.grid.as_ref().expect("grid built before stage-2 steps");
            let r = render_stage2(model, &tape, &p, planes, grid, &plan.cam.camera, &opts)?;
            if !r.has_mesh {
                return Ok(SampleOut::EmptyMesh);
            }
            (r.image, RayStats::default())
        };
        let vals = tape.value(image);
        if vals.iter().any(|v| !v.is_finite()) {
            return Ok(SampleOut::Done { grads: Vec::new(), loss: None, stats, finite: false });
        }
        let img = Image::new(sc.resolution, sc.resolution, vals.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
        let req = GuidanceRequest {
            prompt: directional_prompt(&plan.prompt, plan.cam.azimuth, plan.cam.elevation),
            image: img,
            stage,
            noise_range: sc.noise_range,
            guidance_scale: self.cfg.guidance_scale,
            target: plan.snap.map(|s| TargetKey { view: s.view, mode: plan.shading.mode, background: self.cfg.background }),
        };
        let resp = guidance.lock().expect("guidance lock").guide(&req);
        let resp = match resp {
            Ok(r) => r,
            Err(e) if soft_failure(&e) => {
                warn!("guidance failed for {:?}: {e}; sample skipped", req.prompt);
                return Ok(SampleOut::GuidanceFailed);
            }
            Err(e) => return Err(e.into()),
        };
        let finite = resp.loss.map_or(true, f64::is_finite) && resp.grad.iter().all(|g| g.is_finite());
        if !finite {
            return Ok(SampleOut::Done { grads: Vec::new(), loss: resp.loss, stats, finite });
        }
        let mut g = tape.backward_with(image, resp.grad)?;
        let grads = model
            .store
            .iter()
            .map(|(id, prm)| Self::trainable(stage)(prm.group).then(|| g.take(p.get(id))))
            .collect();
        Ok(SampleOut::Done { grads, loss: resp.loss, stats, finite: true })
    }

    /// One optimizer step of the current stage.
    pub fn step(&mut self, guidance: &mut dyn Guidance) -> Result<StepLog> {
        let stage = self.state.stage;
        if stage == 2 {
            self.grid()?;
        }
        let mut rng = step_rng(self.cfg.seed, stage, self.state.iteration);
        let plans = self.plan(&mut rng, guidance);
        let parallel = guidance.parallel_safe();
        let lock = Mutex::new(guidance);
        let outs: Vec<Result<SampleOut>> = if parallel {
            par::map(&plans, |pl| self.run_sample(pl, &lock))
        } else {
            plans.iter().map(|pl| self.run_sample(pl, &lock)).collect()
        };

        let n = self.model.store.len();
        let mut sum: Vec<Option<Vec<f32>>> = vec![None; n];
        let (mut used, mut finite, mut losses) = (0usize, true, Vec::new());
        for out in outs {
            match out? {
                SampleOut::EmptyMesh => self.state.empty_mesh_samples += 1,
                SampleOut::GuidanceFailed => self.state.guidance_failures += 1,
                SampleOut::Done { grads, loss, stats, finite: f } => {
                    self.state.ray_stats.merge(stats);
                    losses.extend(loss);
                    if !f {
                        finite = false;
                        continue;
                    }
                    used += 1;
                    for (acc, g) in sum.iter_mut().zip(grads) {
                        let Some(g) = g else { continue };
                        match acc {
                            Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *acc = Some(g),
                        }
                    }
                }
            }
        }
        let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        let lr = self.cfg.stage(stage).lr_at(self.state.iteration) * self.state.lr_scale;
        let finite = finite && sum.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()));
        let mut skipped = false;
        if !finite {
            skipped = true;
            self.state.skipped_steps += 1;
            self.state.consecutive_skips += 1;
            warn!("stage {stage} iteration {}: non-finite loss or gradient, step skipped", self.state.iteration);
            if self.state.consecutive_skips >= self.cfg.max_skips {
                self.state.lr_scale *= 0.5;
                self.state.consecutive_skips = 0;
                warn!("{} consecutive skips: learning rate scale now {}", self.cfg.max_skips, self.state.lr_scale);
            }
        } else if used == 0 {
            skipped = true;
            self.state.skipped_steps += 1;
        } else {
            self.state.consecutive_skips = 0;
            let inv = 1.0 / used as f32;
            for g in sum.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            let mut bufs: Vec<&mut [f32]> =
                self.model.store.iter_mut().map(|(_, p)| p.value.data_mut().as_mut_slice()).collect();
            self.adam.step(&mut bufs, &sum, lr);
        }
        let log = StepLog { stage, iteration: self.state.iteration, loss, used, skipped, lr };
        self.state.iteration += 1;
        if self.cfg.log_every > 0 && log.iteration % self.cfg.log_every == 0 {
            info!("stage {stage} iteration {}: loss {:?} ({} samples, lr {lr:.2e})", log.iteration, loss, used);
        } else {
            debug!("stage {stage} iteration {}: loss {:?}", log.iteration, loss);
        }
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs the current stage until `until` iterations are complete.
    pub fn run(&mut self, guidance: &mut dyn Guidance, until: u64) -> Result<()> {
        while self.state.iteration < until {
            self.step(guidance)?;
        }
        Ok(())
    }
}

/// Stage 1 from the trainer's current state.
pub fn train_stage1(trainer: &mut Trainer, guidance: &mut dyn Guidance) -> Result<()> {
    if trainer.state.stage != 1 {
        return Err(Error::Invalid("trainer is past stage 1".into()));
    }
    let n = trainer.cfg.stage1.iterations;
    trainer.run(guidance, n)
}

/// Stage 2, switching over from stage 1 if needed.
pub fn train_stage2(trainer: &mut Trainer, guidance: &mut dyn Guidance) -> Result<()> {
    trainer.begin_stage2();
    let n = trainer.cfg.stage2.iterations;
    trainer.run(guidance, n)
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub mesh: Mesh,
    pub stats: MeshStats,
    pub elapsed: Duration,
}

/// Prompt to colored mesh in one pass: embed, generate, extract.
pub fn infer(model: &Model<f32>, prompt: &str, grid: &TetGrid) -> Result<Inference> {
    let start = Instant::now();
    let planes = model.triplane(prompt)?;
    let (mesh, stats) = extract(model, &planes.data, grid)?;
    Ok(Inference { mesh, stats, elapsed: start.elapsed() })
}

/// Which renderer an evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Renderer {
    Volume { samples: usize },
    Mesh,
}

/// Render of `prompt` from a stored dataset view, diffuse under a headlight.
pub fn render_view(
    model: &Model<f32>,
    prompt: &str,
    cam: &Camera,
    renderer: Renderer,
    grid: &TetGrid,
    background: [f64; 3],
) -> Result<Image> {
    let planes = model.triplane(prompt)?;
    let shading = Shading { mode: ShadingMode::Diffuse, light: Light::headlight(cam) };
    match renderer {
        Renderer::Volume { samples } => {
            let opts = Stage1Options { samples, shading, background };
            Ok(render_stage1_image(model, &planes.data, cam, &opts, 256)?.0)
        }
        Renderer::Mesh => render_stage2_image(model, &planes.data, grid, cam, &Stage2Options { shading, background }),
    }
}

/// PSNR of a render against the dataset target for one view.
pub fn view_psnr(
    model: &Model<f32>,
    ds: &Dataset,
    prompt: &str,
    view: usize,
    resolution: usize,
    renderer: Renderer,
    grid: &TetGrid,
    background: [f64; 3],
) -> Result<f64> {
    let v = ds.view(view)?;
    let cam = v.camera(ds.manifest.config.views.distance, resolution, resolution);
    let img = render_view(model, prompt, &cam, renderer, grid, background)?;
    let key = TargetKey { view, mode: ShadingMode::Diffuse, background };
    let target = ds.composite(prompt, &key, resolution, resolution)?;
    img.psnr(&target)
}

/// Mean PSNR over `views`.
pub fn mean_psnr(
    model: &Model<f32>,
    ds: &Dataset,
    prompt: &str,
    views: &[usize],
    resolution: usize,
    renderer: Renderer,
    grid: &TetGrid,
    background: [f64; 3],
) -> Result<f64> {
    let mut s = 0.0;
    for &v in views {
        s += view_psnr(model, ds, prompt, v, resolution, renderer, grid, background)?;
    }
    Ok(s / views.len().max(1) as f64)
}
