//! Volumetric SDF rendering.
//!
//! Consecutive SDF samples along a ray give an interval opacity through the
//! logistic CDF with learnable sharpness `s`:
//! `alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0)`, composited
//! front to back with transmittance `T_i = prod_{j<i} (1 - alpha_j)`.

use serde::{Deserialize, Serialize};

use crate::camera::{ray_box, Camera};
use crate::error::{Error, Result};
use crate::heads::Want;
use crate::io::Image;
use crate::model::Model;
use crate::params::Bound;
use crate::par;
use crate::scalar::Real;
use crate::shading::{Shading, ShadingMode};
use crate::tensor::{log_sigmoid, sigmoid, Tape, Tensor, Var};

/// Interval opacity, computed as `-expm1(log sigma(s f_{i+1}) - log sigma(s f_i))`
/// for stability, clamped at zero. Also returns whether the clamp was active.
fn alpha_raw<T: Real>(x: T, y: T) -> (T, bool) {
    let a = -(log_sigmoid(y) - log_sigmoid(x)).exp_m1();
    if a > T::zero() {
        (a.min(T::one()), false)
    } else {
        (T::zero(), true)
    }
}

pub fn alpha_from_sdf<T: Real>(f_i: T, f_next: T, s: T) -> Result<T> {
    if !(f_i.is_finite() && f_next.is_finite() && s.is_finite()) {
        return Err(Error::NonFinite("alpha_from_sdf inputs".into()));
    }
    if s <= T::zero() {
        return Err(Error::Invalid(format!("sharpness must be positive, got {s}")));
    }
    Ok(alpha_raw(s * f_i, s * f_next).0)
}

/// Front-to-back compositing of one ray. Returns the pixel (with `bg` behind
/// the accumulated opacity) and the opacity `sum T_i alpha_i`.
pub fn composite<T: Real>(alphas: &[T], colors: &[[T; 3]], bg: [T; 3]) -> ([T; 3], T) {
    let mut trans = T::one();
    let mut rgb = [T::zero(); 3];
    let mut opacity = T::zero();
    for (&a, c) in alphas.iter().zip(colors) {
        let w = trans * a;
        for k in 0..3 {
            rgb[k] += w * c[k];
        }
        opacity += w;
        trans *= T::one() - a;
    }
    let rest = T::one() - opacity;
    (std::array::from_fn(|k| rgb[k] + rest * bg[k]), opacity)
}

/// Counts of rays checked and rays that broke a compositing invariant
/// (alpha outside [0, 1], increasing transmittance, or opacity above 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RayStats {
    pub rays: u64,
    pub violations: u64,
}

impl RayStats {
    pub fn merge(&mut self, o: RayStats) {
        self.rays += o.rays;
        self.violations += o.violations;
    }
}

impl<T: Real> Tape<T> {
    /// Fused SDF-to-pixel compositing over `rays` rays of `n` samples each.
    /// `sdf: [rays*n, 1]`, `color: [rays*n, 3]`, `s: [1]`. Uses `n - 1`
    /// intervals, each colored by its first sample. Output `[rays, 4]`:
    /// RGB over `bg`, then opacity.
    pub fn neus_composite(&self, sdf: Var, color: Var, s: Var, n: usize, bg: [T; 3]) -> Result<(Var, RayStats)> {
        let (ss, sc, sv) = (self.shape(sdf), self.shape(color), self.shape(s));
        if n < 2 || ss.len() != 2 || ss[1] != 1 || sc != [ss[0], 3] || sv != [1] || ss[0] % n != 0 {
            return Err(Error::shape("neus_composite", format!("sdf {ss:?}, color {sc:?}, s {sv:?}, n {n}")));
        }
        let rays = ss[0] / n;
        let (vf, vc) = (self.value(sdf), self.value(color));
        let sh = self.value(s)[0];
        if sh <= T::zero() || !sh.is_finite() {
            return Err(Error::Invalid(format!("sharpness must be positive, got {sh}")));
        }
        if vf.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sdf samples".into()));
        }
        let m = n - 1;
        let mut alpha = vec![T::zero(); rays * m];
        let mut clamped = vec![false; rays * m];
        let mut trans = vec![T::zero(); rays * m];
        let mut out = vec![T::zero(); rays * 4];
        let mut stats = RayStats { rays: rays as u64, violations: 0 };
        let tol = T::of(1e-6);
        for r in 0..rays {
            let mut t = T::one();
            let mut rgb = [T::zero(); 3];
            let mut op = T::zero();
            let mut bad = false;
            for i in 0..m {
                let k = r * n + i;
                let (a, cl) = alpha_raw(sh * vf[k], sh * vf[k + 1]);
                alpha[r * m + i] = a;
                clamped[r * m + i] = cl;
                trans[r * m + i] = t;
                let w = t * a;
                for c in 0..3 {
                    rgb[c] += w * vc[3 * k + c];
                }
                op += w;
                let next = t * (T::one() - a);
                bad |= !(T::zero()..=T::one()).contains(&a) || next > t || next < T::zero();
                t = next;
            }
            bad |= op > T::one() + tol;
            stats.violations += bad as u64;
            let rest = T::one() - op;
            for c in 0..3 {
                out[4 * r + c] = rgb[c] + rest * bg[c];
            }
            out[4 * r + 3] = op;
        }
        let var = self.push(out, vec![rays, 4], &[sdf, color, s], move |g, sink| {
            let mut df = vec![T::zero(); rays * n];
            let mut dc = vec![T::zero(); rays * n * 3];
            let mut ds = T::zero();
            let mut u = vec![T::zero(); m];
            for r in 0..rays {
                let gr = &g[4 * r..4 * r + 4];
                for i in 0..m {
                    let k = r * n + i;
                    let w = trans[r * m + i] * alpha[r * m + i];
                    u[i] = gr[3];
                    for c in 0..3 {
                        u[i] += gr[c] * (vc[3 * k + c] - bg[c]);
                        dc[3 * k + c] += gr[c] * w;
                    }
                }
                // d L / d alpha_k = T_k (u_k - R_k), R_k = sum over later samples
                // of u_i alpha_i prod_{k<j<i} (1 - alpha_j).
                let mut rest = T::zero();
                for i in (0..m).rev() {
                    let a = alpha[r * m + i];
                    let da = trans[r * m + i] * (u[i] - rest);
                    rest = u[i] * a + (T::one() - a) * rest;
                    if clamped[r * m + i] {
                        continue;
                    }
                    let k = r * n + i;
                    let (x, y) = (sh * vf[k], sh * vf[k + 1]);
                    let keep = T::one() - a;
                    let dx = keep * sigmoid(-x);
                    let dy = -keep * sigmoid(-y);
                    df[k] += da * dx * sh;
                    df[k + 1] += da * dy * sh;
                    ds += da * (dx * vf[k] + dy * vf[k + 1]);
                }
            }
            if let Some(d) = sink.get(0) {
                d.iter_mut().zip(&df).for_each(|(d, &x)| *d += x);
            }
            if let Some(d) = sink.get(1) {
                d.iter_mut().zip(&dc).for_each(|(d, &x)| *d += x);
            }
            if let Some(d) = sink.get(2) {
                d[0] += ds;
            }
        });
        Ok((var, stats))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Options {
    pub samples: usize,
    pub shading: Shading,
    pub background: [f64; 3],
}

/// Differentiable render: `image` is `[H*W, 3]`.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: Var,
    pub opacity: Vec<f64>,
    pub stats: RayStats,
}

struct RaySet<T> {
    /// Pixel index of each ray that hits the bound.
    hit: Vec<usize>,
    /// Sample positions, `3 * hit.len() * samples`.
    pts: Vec<T>,
}

fn sample_rays<T: Real>(cam: &Camera, pixels: &[usize], dirs: &[f64], he: f64, n: usize) -> RaySet<T> {
    let mut hit = Vec::new();
    let mut pts = Vec::new();
    for &px in pixels {
        let d = [dirs[3 * px], dirs[3 * px + 1], dirs[3 * px + 2]];
        let Some((near, far)) = ray_box(cam.eye, d, he) else { continue };
        hit.push(px);
        for i in 0..n {
            let t = near + (far - near) * i as f64 / (n - 1) as f64;
            pts.extend((0..3).map(|a| T::of(cam.eye[a] + t * d[a])));
        }
    }
    RaySet { hit, pts }
}

/// Renders the hitting subset of `pixels`; returns `[hits, 4]` and their pixel ids.
fn render_subset<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    p: &Bound,
    planes: Var,
    cam: &Camera,
    dirs: &[f64],
    pixels: &[usize],
    opts: &Stage1Options,
) -> Result<Option<(Var, Vec<usize>, RayStats)>> {
    let set = sample_rays::<T>(cam, pixels, dirs, model.cfg.heads.half_extent, opts.samples);
    if set.hit.is_empty() {
        return Ok(None);
    }
    let diffuse = opts.shading.mode == ShadingMode::Diffuse;
    let want = Want { color: diffuse, normals: true, deform: None };
    let f = model.heads.eval(tape, p, planes, &set.pts, want)?;
    let shaded = opts.shading.shade(tape, f.color, f.normal.expect("normals requested"))?;
    let bg = opts.background.map(T::of);
    let (px, stats) = tape.neus_composite(f.sdf, shaded, p.get(model.sharpness), opts.samples, bg)?;
    Ok(Some((px, set.hit, stats)))
}

pub fn render_stage1<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    p: &Bound,
    planes: Var,
    cam: &Camera,
    opts: &Stage1Options,
) -> Result<Render> {
    if opts.samples < 2 {
        return Err(Error::Invalid("at least 2 samples per ray are required".into()));
    }
    let rays = cam.make_rays()?;
    let npx = cam.width * cam.height;
    let all: Vec<usize> = (0..npx).collect();
    let bg: Vec<T> = opts.background.iter().map(|&v| T::of(v)).collect();
    let mut opacity = vec![0.0; npx];
    match render_subset(model, tape, p, planes, cam, &rays.dirs, &all, opts)? {
        None => Ok(Render {
            image: tape.constant_vec([npx, 3], bg.repeat(npx)),
            opacity,
            stats: RayStats::default(),
        }),
        Some((px, hit, stats)) => {
            let vals = tape.value(px);
            for (j, &i) in hit.iter().enumerate() {
                opacity[i] = vals[4 * j + 3].f64();
            }
            let rgb = tape.slice_cols(px, 0, 3)?;
            let image = tape.scatter_rows(rgb, &hit, npx, &bg)?;
            Ok(Render { image, opacity, stats })
        }
    }
}

/// Gradient-free render of a detached triplane, in ray chunks.
pub fn render_stage1_image<T: Real>(
    model: &Model<T>,
    planes: &Tensor<T>,
    cam: &Camera,
    opts: &Stage1Options,
    chunk: usize,
) -> Result<(Image, Vec<f64>, RayStats)> {
    if opts.samples < 2 {
        return Err(Error::Invalid("at least 2 samples per ray are required".into()));
    }
    let rays = cam.make_rays()?;
    let npx = cam.width * cam.height;
    let chunks: Vec<Vec<usize>> = (0..npx).collect::<Vec<_>>().chunks(chunk.max(1)).map(<[usize]>::to_vec).collect();
    let parts = par::map(&chunks, |px| -> Result<Option<(Vec<T>, Vec<usize>, RayStats)>> {
        let tape = Tape::new();
        let p = model.store.bind_constant(&tape);
        let pv = tape.constant(planes);
        Ok(render_subset(model, &tape, &p, pv, cam, &rays.dirs, px, opts)?
            .map(|(v, hit, st)| (tape.value(v).to_vec(), hit, st)))
    });
    let mut data: Vec<f32> = opts.background.map(|v| v as f32).repeat(npx);
    let mut opacity = vec![0.0; npx];
    let mut stats = RayStats::default();
    for part in parts {
        let Some((vals, hit, st)) = part? else { continue };
        stats.merge(st);
        for (j, &i) in hit.iter().enumerate() {
            for c in 0..3 {
                data[3 * i + c] = vals[4 * j + c].f64() as f32;
            }
            opacity[i] = vals[4 * j + 3].f64();
        }
    }
    Ok((Image::new(cam.width, cam.height, data)?, opacity, stats))
}
