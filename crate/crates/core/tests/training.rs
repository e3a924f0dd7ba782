//! Trainer contracts: frozen deformation in stage 1, zero offsets entering
//! stage 2, checkpoint resume, determinism, per-prompt reduction, loss
//! injection, and the skip paths.

mod common;

use std::sync::OnceLock;

use atom_core::camera::Camera;
use atom_core::checkpoint::Checkpoint;
use atom_core::dataset::{build, Dataset, DatasetConfig, Manifest};
use atom_core::dmtet::TetGrid;
use atom_core::embedding::directional_prompt;
use atom_core::guidance::{
    photometric_guidance, Guidance, GuidanceError, GuidanceRequest, GuidanceResponse, PhotometricOracle, TargetKey,
};
use atom_core::heads::Want;
use atom_core::io::Image;
use atom_core::model::Model;
use atom_core::neus::{render_stage1, Stage1Options};
use atom_core::params::Group;
use atom_core::par;
use atom_core::shading::{Light, Shading, ShadingMode};
use atom_core::tensor::Tape;
use atom_core::train::{sample_camera, step_rng, Adam, TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    root: std::path::PathBuf,
    manifest: Manifest,
}

/// 2x2 grid (2 seen, 2 unseen) at 32 px, built once per test binary.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = DatasetConfig { shapes: 2, colors: 2, resolution: 32, ..DatasetConfig::default() };
        let manifest = build(&cfg, dir.path()).expect("dataset");
        Fixture { root: dir.path().to_path_buf(), _dir: dir, manifest }
    })
}

fn oracle() -> PhotometricOracle<Dataset> {
    PhotometricOracle { targets: Dataset::open(&fixture().root).expect("open dataset") }
}

fn config() -> TrainConfig {
    let mut c = common::tiny_train(fixture().manifest.seen());
    c.unseen = fixture().manifest.unseen();
    c
}

fn trainer(cfg: TrainConfig) -> Trainer {
    Trainer::new(cfg, Model::new(common::tiny_model()).expect("model")).expect("trainer")
}

fn bits(t: &Trainer, keep: impl Fn(Group) -> bool) -> Vec<u32> {
    t.model
        .store
        .iter()
        .filter(|(_, p)| keep(p.group))
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn all(t: &Trainer) -> Vec<u32> {
    bits(t, |_| true)
}

#[test]
fn stage1_never_touches_deformation() {
    let mut t = trainer(config());
    let deform = bits(&t, |g| g == Group::Deform);
    let rest = bits(&t, |g| g != Group::Deform);
    t.run(&mut oracle(), 4).unwrap();
    assert_eq!(bits(&t, |g| g == Group::Deform), deform);
    assert_ne!(bits(&t, |g| g != Group::Deform), rest, "stage 1 must train something");
}

#[test]
fn stage2_starts_with_zero_offsets() {
    let mut t = trainer(config());
    t.run(&mut oracle(), 3).unwrap();
    t.begin_stage2();
    let grid = TetGrid::build(t.cfg.grid_resolution, t.model.cfg.heads.half_extent).unwrap();
    let tape = Tape::<f32>::new();
    let p = t.model.store.bind_constant(&tape);
    for prompt in fixture().manifest.seen() {
        let planes = t.model.triplane(&prompt).unwrap();
        let pv = tape.constant(&planes.data);
        let want = Want { deform: Some(grid.max_offset()), ..Want::default() };
        let out = t.model.heads.eval(&tape, &p, pv, &grid.flat_verts::<f32>(), want).unwrap();
        assert!(tape.value(out.deform.unwrap()).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut straight = trainer(config());
    straight.run(&mut oracle(), 10).unwrap();
    straight.begin_stage2();
    straight.run(&mut oracle(), 4).unwrap();

    let mut a = trainer(config());
    a.run(&mut oracle(), 5).unwrap();
    let bytes = Checkpoint::from_trainer(&a).encode();
    let mut b = Checkpoint::decode(&bytes).unwrap().trainer().unwrap();
    b.run(&mut oracle(), 10).unwrap();
    b.begin_stage2();
    b.run(&mut oracle(), 2).unwrap();
    let mut c = Checkpoint::decode(&Checkpoint::from_trainer(&b).encode()).unwrap().trainer().unwrap();
    c.run(&mut oracle(), 4).unwrap();

    assert_eq!(all(&c), all(&straight));
    assert_eq!(c.adam.t, straight.adam.t);
    assert_eq!(c.adam.m, straight.adam.m);
    assert_eq!(c.adam.v, straight.adam.v);
    assert_eq!(c.state, straight.state);
}

#[test]
fn checkpoint_reload_reproduces_forward_outputs() {
    let mut t = trainer(config());
    t.run(&mut oracle(), 2).unwrap();
    let m = Checkpoint::decode(&Checkpoint::from_trainer(&t).encode()).unwrap().model().unwrap();
    for prompt in fixture().manifest.seen() {
        let a = t.model.triplane(&prompt).unwrap();
        let b = m.triplane(&prompt).unwrap();
        assert_eq!(a.data.data(), b.data.data());
    }
}

#[test]
fn identical_seeds_give_identical_runs_in_either_execution_mode() {
    let run = |parallel: bool| {
        par::set_enabled(parallel);
        let mut t = trainer(config());
        t.run(&mut oracle(), 4).unwrap();
        par::set_enabled(true);
        let losses: Vec<Option<u64>> = t.history.iter().map(|h| h.loss.map(f64::to_bits)).collect();
        (all(&t), losses)
    };
    let first = run(true);
    assert_eq!(run(true), first);
    assert_eq!(run(false), first);
}

/// Plain single-prompt optimization written against the public pieces:
/// the camera, render, oracle and Adam the trainer is built from.
fn per_prompt_reference(cfg: &TrainConfig, steps: u64) -> Vec<u32> {
    let mut model = Model::<f32>::new(common::tiny_model()).unwrap();
    let sizes: Vec<usize> = model.store.iter().map(|(_, p)| p.value.numel()).collect();
    let mut adam = Adam::new(cfg.adam, &sizes);
    let mut guide = oracle();
    let sc = &cfg.stage1;
    for it in 0..steps {
        let mut rng = step_rng(cfg.seed, 1, it);
        let prompt = cfg.seen.choose(&mut rng).unwrap().clone();
        let cam = sample_camera(&cfg.camera, 1, sc.resolution, &mut rng);
        let mode = if rng.gen_bool(cfg.textureless_prob) { ShadingMode::Textureless } else { ShadingMode::Diffuse };
        let snap = guide.snap(1, cam.azimuth, cam.elevation).unwrap();
        let camera = Camera::orbit(snap.azimuth, snap.elevation, cfg.camera.distance, snap.fov, sc.resolution, sc.resolution);
        let shading = Shading { mode, light: Light::headlight(&camera) };

        let tape = Tape::<f32>::new();
        let p = model.store.bind(&tape, |g| g != Group::Deform);
        let planes = model.triplane_var(&tape, &p, &model.embed(&prompt).unwrap()).unwrap();
        let opts = Stage1Options { samples: sc.samples, shading, background: cfg.background };
        let r = render_stage1(&model, &tape, &p, planes, &camera, &opts).unwrap();
        let img = Image::new(sc.resolution, sc.resolution, tape.value(r.image).iter().map(|v| v.clamp(0.0, 1.0)).collect()).unwrap();
        let req = GuidanceRequest {
            prompt: directional_prompt(&prompt, snap.azimuth, snap.elevation),
            image: img,
            stage: 1,
            noise_range: sc.noise_range,
            guidance_scale: cfg.guidance_scale,
            target: Some(TargetKey { view: snap.view, mode, background: cfg.background }),
        };
        let resp = guide.guide(&req).unwrap();
        let mut g = tape.backward_with(r.image, resp.grad).unwrap();
        let grads: Vec<Option<Vec<f32>>> =
            model.store.iter().map(|(id, prm)| (prm.group != Group::Deform).then(|| g.take(p.get(id)))).collect();
        let mut bufs: Vec<&mut [f32]> = model.store.iter_mut().map(|(_, p)| p.value.data_mut().as_mut_slice()).collect();
        adam.step(&mut bufs, &grads, sc.lr_at(it));
    }
    model.store.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn batch_one_single_prompt_is_per_prompt_optimization() {
    let mut cfg = config();
    cfg.seen.truncate(1);
    cfg.stage1.batch = 1;
    let mut t = trainer(cfg.clone());
    t.run(&mut oracle(), 5).unwrap();
    assert_eq!(all(&t), per_prompt_reference(&cfg, 5));
}

#[test]
fn injected_gradient_equals_direct_mse_backprop() {
    let m = Model::<f32>::new(common::tiny_model()).unwrap();
    let ds = Dataset::open(&fixture().root).unwrap();
    let prompt = fixture().manifest.seen()[0].clone();
    let view = ds.view(0).unwrap();
    let cam = view.camera(ds.manifest.config.views.distance, 16, 16);
    let shading = Shading { mode: ShadingMode::Diffuse, light: Light::headlight(&cam) };
    let key = TargetKey { view: 0, mode: ShadingMode::Diffuse, background: [1.0; 3] };
    let target = ds.composite(&prompt, &key, 16, 16).unwrap();
    let opts = Stage1Options { samples: 8, shading, background: [1.0; 3] };

    let grads = |inject: bool| -> Vec<Vec<f32>> {
        let tape = Tape::<f32>::new();
        let p = m.store.bind(&tape, |_| true);
        let planes = m.triplane_var(&tape, &p, &m.embed(&prompt).unwrap()).unwrap();
        let r = render_stage1(&m, &tape, &p, planes, &cam, &opts).unwrap();
        let mut g = if inject {
            let img = Image::new(16, 16, tape.value(r.image).to_vec()).unwrap();
            tape.backward_with(r.image, photometric_guidance(&img, &target).unwrap().grad).unwrap()
        } else {
            let t = tape.constant_vec([256, 3], target.data.clone());
            let loss = tape.mean(tape.square(tape.sub(r.image, t).unwrap()));
            tape.backward(loss).unwrap()
        };
        m.store.ids().map(|id| g.take(p.get(id))).collect()
    };
    let (a, b) = (grads(true), grads(false));
    let scale = b.iter().flatten().fold(0.0f32, |m, v| m.max(v.abs()));
    assert!(scale > 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() <= 1e-4 * scale, "{x} vs {y}");
    }
}

#[test]
fn photometric_gradient_matches_finite_differences() {
    let ds = Dataset::open(&fixture().root).unwrap();
    let key = TargetKey { view: 3, mode: ShadingMode::Textureless, background: [0.2, 0.4, 0.6] };
    let target = ds.composite(&fixture().manifest.seen()[0], &key, 16, 16).unwrap();
    let image = Image::new(16, 16, (0..768).map(|i| ((i * 37 % 101) as f32) / 100.0).collect()).unwrap();
    let g = photometric_guidance(&image, &target).unwrap();
    let h = 1e-3f32;
    for i in (0..768).step_by(7) {
        let mut plus = image.clone();
        let mut minus = image.clone();
        plus.data[i] += h;
        minus.data[i] -= h;
        let fd = (plus.mse(&target).unwrap() - minus.mse(&target).unwrap()) / ((plus.data[i] - minus.data[i]) as f64);
        assert!((fd - g.grad[i] as f64).abs() < 1e-5, "pixel {i}: {fd} vs {}", g.grad[i]);
    }
}

/// Returns NaN gradients; counts calls.
struct Poisoned(usize);

impl Guidance for Poisoned {
    fn guide(&mut self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        self.0 += 1;
        Ok(GuidanceResponse { grad: vec![f32::NAN; req.image.data.len()], loss: Some(f64::NAN) })
    }
}

#[test]
fn non_finite_steps_are_skipped_and_halve_the_rate() {
    let mut t = trainer(config());
    let before = all(&t);
    let mut g = Poisoned(0);
    for _ in 0..3 {
        assert!(t.step(&mut g).unwrap().skipped);
    }
    assert_eq!(all(&t), before);
    assert_eq!(t.state.skipped_steps, 3);
    assert_eq!(t.state.lr_scale, 0.5);
    assert_eq!(t.state.consecutive_skips, 0);
    assert_eq!(g.0, 3 * t.cfg.stage1.batch);
    // a good step resets the streak and uses the halved rate
    let log = t.step(&mut oracle()).unwrap();
    assert!(!log.skipped);
    assert_eq!(log.lr, 0.5 * t.cfg.stage1.lr_at(3));
}

#[test]
fn empty_meshes_are_skipped_and_counted() {
    // sphere bias of radius -1 puts the whole grid outside the surface
    let mut mc = common::tiny_model();
    mc.heads.sphere_radius = -1.0;
    let mut t = Trainer::new(config(), Model::new(mc).unwrap()).unwrap();
    t.begin_stage2();
    let before = all(&t);
    let log = t.step(&mut oracle()).unwrap();
    assert!(log.skipped);
    assert_eq!(log.used, 0);
    assert_eq!(t.state.empty_mesh_samples, t.cfg.stage2.batch as u64);
    assert_eq!(all(&t), before);
}

#[test]
fn stage2_trains_every_group() {
    let mut t = trainer(config());
    t.run(&mut oracle(), 2).unwrap();
    t.begin_stage2();
    let before: Vec<(Group, Vec<u32>)> = t
        .model
        .store
        .iter()
        .map(|(_, p)| (p.group, p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect();
    t.run(&mut oracle(), 3).unwrap();
    for g in [Group::Generator, Group::Sdf, Group::Deform, Group::Color] {
        let changed = t.model.store.iter().zip(&before).any(|((_, p), (grp, old))| {
            *grp == g && p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>() != *old
        });
        assert!(changed, "{g:?} did not move in stage 2");
    }
}
