//! Finite-difference suite over every differentiable op and both render
//! pipelines, in `f64`. Backs the `gradcheck` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::dmtet::TetGrid;
use crate::error::Result;
use crate::gradcheck::{check, CheckOptions, CheckReport};
use crate::heads::Want;
use crate::model::{Model, ModelConfig};
use crate::neus::{render_stage1, Stage1Options};
use crate::params::Bound;
use crate::raster::{rasterize, render_stage2, Stage2Options};
use crate::shading::{Light, Shading, ShadingMode};
use crate::tensor::{Tape, Tensor};
use crate::triplane::{aware3d_gather, GeneratorConfig};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Small model with every parameter jittered so no head is identically zero.
pub fn jittered_model(channels: usize, plane_res: usize, hidden: usize, scale: f64, seed: u64) -> Result<Model<f64>> {
    let mut cfg = ModelConfig::default();
    cfg.embed.max_tokens = 6;
    cfg.embed.dim = 8;
    cfg.generator = GeneratorConfig { channels, resolution: plane_res, blocks: 1, heads: 2 };
    cfg.heads.hidden = hidden;
    cfg.heads.octaves = 2;
    cfg.seed = seed;
    let mut model = Model::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    let s = model.sharpness;
    for (id, p) in model.store.iter_mut() {
        if id == s {
            continue;
        }
        for v in p.value.data_mut().iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
    Ok(model)
}

fn params_of(model: &Model<f64>) -> Vec<Tensor<f64>> {
    model.store.iter().map(|(_, p)| p.value.clone()).collect()
}

pub fn op_checks(seed: u64, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let x = rand_tensor(&mut rng, &[4, 3]);
    let w = rand_tensor(&mut rng, &[3, 5]);
    let b = rand_tensor(&mut rng, &[5]);
    let c = rand_tensor(&mut rng, &[4, 5]);
    out.push(check(
        "elementwise+linear",
        &[x, w, b, c],
        |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let s = t.sigmoid(t.gelu(h));
            let m = t.mul(s, t.tanh(h))?;
            let d = t.sub(t.exp(t.scale(m, 0.5)), v[3])?;
            let mr = t.mul_row(t.add_scalar(t.square(d), 0.1), v[2])?;
            let sm = t.softmax_rows(mr);
            let cat = t.concat_cols(&[t.slice_cols(mr, 1, 4)?, v[0]])?;
            let n = t.normalize_rows(cat, 1e-9);
            let g = t.gather_rows(n, &[0, 2, 2])?;
            let sc = t.scatter_rows(g, &[1, 0, 3], 5, &[0.2; 6])?;
            let r = t.reshape(sc, [30])?;
            let add = t.add_row(t.matmul(v[0], v[1])?, v[2])?;
            t.add_n(&[t.sum(t.relu(r)), t.sum(t.transpose(sm)?), t.mean(t.square(r)), t.mean(add)])
        },
        opts,
    )?);

    let x = rand_tensor(&mut rng, &[5, 3]);
    let s = rand_tensor(&mut rng, &[5]);
    let cw = weights(&mut rng, 15);
    out.push(check("mul_col+dot_const", &[x, s], |t, v| t.dot_const(t.tanh(t.mul_col(v[0], v[1])?), &cw), opts)?);

    let x = rand_tensor(&mut rng, &[1, 4, 5, 5]);
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[4]);
    let dw = rand_tensor(&mut rng, &[4, 1, 7, 7]);
    out.push(check(
        "conv2d",
        &[x, k, b, dw],
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            Ok(t.sum(t.tanh(t.conv2d(y, v[3], None, 4, 3)?)))
        },
        opts,
    )?);

    let plane = rand_tensor(&mut rng, &[3, 4, 5]);
    // away from texel boundaries, where the uv derivative jumps
    let uv = Tensor::from_fn([6, 2], |i| {
        let cells = if i % 2 == 0 { 3.0 } else { 4.0 };
        let k = rng.gen_range(0..cells as usize) as f64;
        (k + rng.gen_range(0.2..0.8)) / cells * 2.0 - 1.0
    });
    out.push(check("interp_bilinear", &[plane, uv], |t, v| Ok(t.sum(t.square(t.interp_bilinear(v[0], v[1])?))), opts)?);

    let q = rand_tensor(&mut rng, &[5, 4]);
    let k = rand_tensor(&mut rng, &[3, 4]);
    let v = rand_tensor(&mut rng, &[3, 4]);
    out.push(check("attention", &[q, k, v], |t, x| Ok(t.sum(t.tanh(t.attention(x[0], x[1], x[2], 2)?))), opts)?);

    let x = rand_tensor(&mut rng, &[3, 2, 4, 4]);
    let gw = weights(&mut rng, 3 * 6 * 16);
    out.push(check("aware3d_gather", &[x], |t, v| t.dot_const(aware3d_gather(t, v[0])?, &gw), opts)?);

    let n = 6;
    let mut f: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    f[n..].copy_from_slice(&[0.5, 0.3, 0.1, -0.1, -0.3, -0.5]);
    let col = Tensor::from_fn([2 * n, 3], |_| rng.gen());
    let nw = weights(&mut rng, 8);
    out.push(check(
        "neus_composite",
        &[Tensor::new([2 * n, 1], f)?, col, Tensor::new([1], vec![4.0])?],
        |t, v| t.dot_const(t.neus_composite(v[0], v[1], v[2], n, [0.3, 0.5, 0.9])?.0, &nw),
        opts,
    )?);

    let attrs = rand_tensor(&mut rng, &[4, 5]);
    let sdf = Tensor::new([4, 1], vec![-0.7, 0.4, 0.9, -0.2])?;
    let edges = [(0, 1), (0, 2), (1, 3), (2, 3)];
    let ew = weights(&mut rng, 20);
    out.push(check("edge_interp", &[attrs, sdf], |t, v| t.dot_const(t.edge_interp(v[0], v[1], &edges)?, &ew), opts)?);

    let cam = Camera::orbit(0.0, 0.0, 3.0, 40.0, 6, 6);
    let pos = [[-0.6, -0.5, 0.1], [0.7, -0.4, 0.0], [-0.1, 0.8, -0.1]];
    let faces = [[0u32, 1, 2]];
    let frag = rasterize(&pos, &faces, &cam)?;
    let rays = cam.make_rays()?;
    let rw = weights(&mut rng, 108);
    let light = Light { dir: crate::camera::normalize([0.3, 0.4, 0.9]), ambient: 0.1 };
    for (name, mode) in [("raster_shade/diffuse", ShadingMode::Diffuse), ("raster_shade/textureless", ShadingMode::Textureless)] {
        let shading = Shading { mode, light };
        out.push(check(
            name,
            &[Tensor::new([3, 3], pos.iter().flatten().copied().collect())?, Tensor::from_fn([3, 3], |i| 0.05 + 0.1 * i as f64)],
            |t, v| t.dot_const(t.raster_shade(v[0], v[1], &faces, &frag, &rays, &shading, [0.3; 3])?, &rw),
            opts,
        )?);
    }

    let model = jittered_model(4, 5, 12, 0.3, seed)?;
    let planes = rand_tensor(&mut rng, &[3, 4, 5, 5]);
    let pts: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let mut inputs = params_of(&model);
    let np = inputs.len();
    inputs.push(planes);
    out.push(check(
        "heads",
        &inputs,
        |t, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let o = model.heads.eval(t, &p, v[np], &pts, Want { color: true, normals: true, deform: Some(0.1) })?;
            t.add_n(&[
                t.sum(t.square(o.sdf)),
                t.sum(t.square(o.color.expect("color"))),
                t.dot_const(o.normal.expect("normals"), &[0.3, -0.7, 0.2].repeat(6))?,
                t.sum(t.square(o.deform.expect("deform"))),
            ])
        },
        opts,
    )?);

    let emb = model.embed("a tall yellow cone")?;
    let inputs = params_of(&model);
    out.push(check(
        "triplane_generator",
        &inputs,
        |t, v| Ok(t.sum(t.tanh(model.generator.generate(t, &Bound::from_vars(v.to_vec()), &emb)?))),
        opts,
    )?);
    Ok(out)
}

/// Full stage-1 chain (prompt -> triplane -> heads -> NeuS image) on an
/// 8x8 render with 8 samples per ray and 4 triplane channels.
pub fn stage1_check(seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let model = jittered_model(4, 6, 16, 0.15, seed)?;
    let emb = model.embed("a red cube")?;
    let cam = Camera::orbit(20.0, 15.0, 3.0, 50.0, 8, 8);
    let so = Stage1Options {
        samples: 8,
        shading: Shading { mode: ShadingMode::Diffuse, light: Light::headlight(&cam) },
        background: [1.0; 3],
    };
    let w = weights(&mut ChaCha8Rng::seed_from_u64(seed + 1), 8 * 8 * 3);
    check(
        "stage1_pipeline",
        &params_of(&model),
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let planes = model.triplane_var(t, &p, &emb)?;
            let r = render_stage1(&model, t, &p, planes, &cam, &so)?;
            t.dot_const(r.image, &w)
        },
        opts,
    )
}

/// Full stage-2 chain on a single tetrahedron whose surface is one triangle.
pub fn stage2_check(seed: u64, opts: &CheckOptions) -> Result<CheckReport> {
    let model = jittered_model(4, 6, 16, 0.05, seed)?;
    let emb = model.embed("a red cube")?;
    // the origin is inside the analytic sphere, the other corners outside
    let grid = TetGrid {
        resolution: 1,
        half_extent: 1.0,
        verts: vec![[0.0, 0.0, 0.0], [0.9, 0.0, 0.0], [0.0, 0.9, 0.0], [0.0, 0.0, 0.9]],
        tets: vec![[0, 1, 2, 3]],
    };
    let cam = Camera::orbit(45.0, 35.0, 3.0, 12.0, 8, 8);
    let s2 = Stage2Options {
        shading: Shading { mode: ShadingMode::Diffuse, light: Light { dir: crate::camera::normalize([0.2, 0.9, 0.4]), ambient: 0.1 } },
        background: [1.0; 3],
    };
    let w = weights(&mut ChaCha8Rng::seed_from_u64(seed + 2), 8 * 8 * 3);
    let probe = {
        let tape = Tape::new();
        let p = model.store.bind_constant(&tape);
        let planes = model.triplane_var(&tape, &p, &emb)?;
        let r = render_stage2(&model, &tape, &p, planes, &grid, &cam, &s2)?;
        (r.has_mesh, r.covered)
    };
    if !probe.0 || probe.1 == 0 {
        return Err(crate::error::Error::Invalid(format!("stage-2 check setup renders nothing: {probe:?}")));
    }
    check(
        "stage2_pipeline",
        &params_of(&model),
        |t, v| {
            let p = Bound::from_vars(v.to_vec());
            let planes = model.triplane_var(t, &p, &emb)?;
            let r = render_stage2(&model, t, &p, planes, &grid, &cam, &s2)?;
            t.dot_const(r.image, &w)
        },
        opts,
    )
}

/// Tolerance used by the suite: relative error below `1e-3`.
pub fn suite_options(seed: u64) -> CheckOptions {
    CheckOptions { step: 1e-6, tol: 1e-3, abs_floor: 1e-7, max_entries: 200, seed }
}

pub fn suite(seed: u64) -> Result<Vec<CheckReport>> {
    let opts = suite_options(seed);
    let mut out = op_checks(seed, &opts)?;
    out.push(stage1_check(seed, &opts)?);
    out.push(stage2_check(seed, &opts)?);
    Ok(out)
}
