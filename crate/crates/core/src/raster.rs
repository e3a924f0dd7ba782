//! Z-buffered triangle rasterization with differentiable shading.
//!
//! Each pixel-center ray is intersected with candidate triangles exactly, so
//! barycentrics are perspective-correct by construction. Shading treats
//! coverage as locally constant (gradients reach positions through the
//! barycentric weights and face normals); [`Tape::antialias`] then blends
//! across silhouette edges, which is where positions learn about coverage.

use serde::{Deserialize, Serialize};

use crate::camera::{cross, dot, sub, Camera, Rays, Vec3};
use crate::dmtet::{extract_var, TetGrid};
use crate::error::{Error, Result};
use crate::io::{Image, Mesh};
use crate::model::Model;
use crate::params::Bound;
use crate::scalar::Real;
use crate::shading::{Shading, ShadingMode};
use crate::tensor::{Tape, Tensor, Var};

/// Ray/triangle intersection: `(t, u, v)` with the hit at
/// `p0 + u (p1 - p0) + v (p2 - p0)`, or `None` if the ray misses.
pub fn intersect(o: Vec3, d: Vec3, p: [Vec3; 3]) -> Option<(f64, f64, f64)> {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let h = cross(d, e2);
    let det = dot(e1, h);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = sub(o, p[0]);
    let u = dot(s, h) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = cross(s, e1);
    let v = dot(d, q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = dot(e2, q) * inv;
    (t > 0.0).then_some((t, u, v))
}

/// Barycentric `(u, v)` of the ray's hit on the triangle's plane, without
/// an inside test.
fn plane_uv(o: Vec3, d: Vec3, p: [Vec3; 3]) -> (f64, f64) {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let h = cross(d, e2);
    let inv = 1.0 / dot(e1, h);
    let s = sub(o, p[0]);
    (dot(s, h) * inv, dot(d, cross(s, e1)) * inv)
}

/// Per-pixel nearest front-facing triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub face: Vec<Option<u32>>,
    /// `(w0, w1, w2)` per pixel; zero where uncovered.
    pub bary: Vec<[f64; 3]>,
    /// View-space depth along the camera axis.
    pub depth: Vec<f64>,
}

impl Fragments {
    pub fn covered(&self) -> usize {
        self.face.iter().filter(|f| f.is_some()).count()
    }
}

fn front_facing(p: [Vec3; 3], d: Vec3) -> bool {
    dot(cross(sub(p[1], p[0]), sub(p[2], p[0])), d) < 0.0
}

pub fn rasterize(positions: &[Vec3], faces: &[[u32; 3]], cam: &Camera) -> Result<Fragments> {
    let rays = cam.make_rays()?;
    let frame = cam.frame()?;
    let (w, h) = (cam.width, cam.height);
    let mut frag = Fragments {
        width: w,
        height: h,
        face: vec![None; w * h],
        bary: vec![[0.0; 3]; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    for (fi, f) in faces.iter().enumerate() {
        if f.iter().any(|&i| i as usize >= positions.len()) {
            return Err(Error::Invalid(format!("face {fi} indexes past {} vertices", positions.len())));
        }
        let p = f.map(|i| positions[i as usize]);
        // Screen-space bounding box, or the whole screen if a vertex is behind the eye.
        let proj: Vec<(f64, f64, f64)> = p.iter().map(|&q| cam.project(q)).collect::<Result<_>>()?;
        let (c0, c1, r0, r1) = if proj.iter().all(|q| q.2 > 1e-9) {
            let cmin = proj.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
            let cmax = proj.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max);
            let rmin = proj.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
            let rmax = proj.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max);
            let lo = |v: f64, n: usize| (v - 1.0).floor().clamp(0.0, n as f64) as usize;
            let hi = |v: f64, n: usize| (v + 1.0).ceil().clamp(0.0, n as f64) as usize;
            (lo(cmin, w), hi(cmax, w), lo(rmin, h), hi(rmax, h))
        } else {
            (0, w, 0, h)
        };
        for row in r0..r1 {
            for col in c0..c1 {
                let i = row * w + col;
                let d = rays.dir(i);
                if !front_facing(p, d) {
                    continue;
                }
                let Some((t, u, v)) = intersect(rays.origin, d, p) else { continue };
                let z = t * dot(d, frame.forward);
                // Strict test: equal depths keep the lower face id.
                if z < frag.depth[i] {
                    frag.depth[i] = z;
                    frag.face[i] = Some(fi as u32);
                    frag.bary[i] = [1.0 - u - v, u, v];
                }
            }
        }
    }
    Ok(frag)
}

/// Inverse-transpose solve `M^T y = g` for `M = [-d | e1 | e2]`.
fn solve_transpose(d: Vec3, e1: Vec3, e2: Vec3, g: Vec3) -> Vec3 {
    // Rows of M^T are -d, e1, e2; Cramer's rule.
    let rows = [[-d[0], -d[1], -d[2]], e1, e2];
    let det = dot(rows[0], cross(rows[1], rows[2]));
    let col = |k: usize| {
        let mut r = rows;
        for (j, row) in r.iter_mut().enumerate() {
            row[k] = g[j];
        }
        dot(r[0], cross(r[1], r[2])) / det
    };
    [col(0), col(1), col(2)]
}

impl<T: Real> Tape<T> {
    /// Shades a fragment buffer from vertex positions and colors (`[V, 3]`
    /// each). Uncovered pixels get `bg`. Output `[H*W, 3]`.
    pub fn raster_shade(
        &self,
        positions: Var,
        colors: Var,
        faces: &[[u32; 3]],
        frag: &Fragments,
        rays: &Rays,
        shading: &Shading,
        bg: [f64; 3],
    ) -> Result<Var> {
        let (sp, sc) = (self.shape(positions), self.shape(colors));
        if sp.len() != 2 || sp[1] != 3 || sc != sp {
            return Err(Error::shape("raster_shade", format!("positions {sp:?}, colors {sc:?}")));
        }
        let npx = frag.width * frag.height;
        if rays.len() != npx {
            return Err(Error::shape("raster_shade", format!("{} rays for {npx} pixels", rays.len())));
        }
        let vp = self.value(positions);
        let vc = self.value(colors);
        let pos = |i: u32| -> Vec3 { std::array::from_fn(|k| vp[3 * i as usize + k].f64()) };
        let col = |i: u32| -> Vec3 { std::array::from_fn(|k| vc[3 * i as usize + k].f64()) };
        let light = shading.light;
        let textureless = shading.mode == ShadingMode::Textureless;

        struct Px {
            pixel: usize,
            face: [u32; 3],
            w: [f64; 3],
            normal: Vec3,
            mlen: f64,
            lit: bool,
            k: f64,
        }
        let mut out = vec![T::zero(); npx * 3];
        let mut cache = Vec::new();
        for i in 0..npx {
            let Some(fi) = frag.face[i] else {
                for c in 0..3 {
                    out[3 * i + c] = T::of(bg[c]);
                }
                continue;
            };
            let f = faces[fi as usize];
            let p = f.map(pos);
            let m = cross(sub(p[1], p[0]), sub(p[2], p[0]));
            let mlen = dot(m, m).sqrt().max(1e-30);
            let n = m.map(|x| x / mlen);
            let ndl = dot(n, light.dir);
            let k = light.ambient + (1.0 - light.ambient) * ndl.max(0.0);
            // Coverage is fixed; the weights follow the current positions.
            let (u, v) = plane_uv(rays.origin, rays.dir(i), p);
            let w = [1.0 - u - v, u, v];
            for c in 0..3 {
                let albedo = if textureless { 1.0 } else { (0..3).map(|v| w[v] * col(f[v])[c]).sum() };
                out[3 * i + c] = T::of(albedo * k);
            }
            cache.push(Px { pixel: i, face: f, w, normal: n, mlen, lit: ndl > 0.0, k });
        }
        let dirs = rays.dirs.clone();
        let nv = sp[0];
        Ok(self.push(out, vec![npx, 3], &[positions, colors], move |g, s| {
            let pos = |i: u32| -> Vec3 { std::array::from_fn(|k| vp[3 * i as usize + k].f64()) };
            let col = |i: u32| -> Vec3 { std::array::from_fn(|k| vc[3 * i as usize + k].f64()) };
            let mut dpos = vec![0.0f64; nv * 3];
            let mut dcol = vec![0.0f64; nv * 3];
            for px in &cache {
                let gp: Vec3 = std::array::from_fn(|c| g[3 * px.pixel + c].f64());
                let cols = px.face.map(col);
                let albedo: Vec3 = if textureless {
                    [1.0; 3]
                } else {
                    std::array::from_fn(|c| (0..3).map(|v| px.w[v] * cols[v][c]).sum())
                };
                // through the light intensity into the face normal
                let gk = dot(gp, albedo);
                if px.lit && gk != 0.0 {
                    let gn = light.dir.map(|l| gk * (1.0 - light.ambient) * l);
                    let proj = dot(px.normal, gn);
                    let gm: Vec3 = std::array::from_fn(|a| (gn[a] - px.normal[a] * proj) / px.mlen);
                    let p = px.face.map(pos);
                    let (e1, e2) = (sub(p[1], p[0]), sub(p[2], p[0]));
                    let g1 = cross(e2, gm);
                    let g2 = cross(gm, e1);
                    for a in 0..3 {
                        dpos[3 * px.face[0] as usize + a] -= g1[a] + g2[a];
                        dpos[3 * px.face[1] as usize + a] += g1[a];
                        dpos[3 * px.face[2] as usize + a] += g2[a];
                    }
                }
                if textureless {
                    continue;
                }
                // colors, and the barycentric weights
                let mut gw = [0.0; 3];
                for v in 0..3 {
                    for c in 0..3 {
                        dcol[3 * px.face[v] as usize + c] += gp[c] * px.k * px.w[v];
                        gw[v] += gp[c] * px.k * cols[v][c];
                    }
                }
                // w = (1 - u - v, u, v)
                let (gu, gv) = (gw[1] - gw[0], gw[2] - gw[0]);
                let p = px.face.map(pos);
                let d: Vec3 = std::array::from_fn(|a| dirs[3 * px.pixel + a]);
                let y = solve_transpose(d, sub(p[1], p[0]), sub(p[2], p[0]), [0.0, gu, gv]);
                for v in 0..3 {
                    for a in 0..3 {
                        dpos[3 * px.face[v] as usize + a] -= px.w[v] * y[a];
                    }
                }
            }
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(&dpos).for_each(|(d, &x)| *d += T::of(x));
            }
            if let Some(d) = s.get(1) {
                d.iter_mut().zip(&dcol).for_each(|(d, &x)| *d += T::of(x));
            }
        }))
    }
}

/// Front-facing test against the eye, per face.
fn facing(pos: &[Vec3], faces: &[[u32; 3]], eye: Vec3) -> Vec<bool> {
    faces
        .iter()
        .map(|f| {
            let p = f.map(|i| pos[i as usize]);
            let c: Vec3 = std::array::from_fn(|a| (p[0][a] + p[1][a] + p[2][a]) / 3.0);
            front_facing(p, sub(c, eye))
        })
        .collect()
}

/// Edges with exactly one front-facing neighbour face: open boundaries and
/// the contour between front and back.
fn silhouette_edges(faces: &[[u32; 3]], front: &[bool]) -> std::collections::HashSet<(u32, u32)> {
    let mut count: std::collections::HashMap<(u32, u32), usize> = std::collections::HashMap::new();
    for (f, &fr) in faces.iter().zip(front) {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += fr as usize;
        }
    }
    count.into_iter().filter(|&(_, c)| c == 1).map(|(e, _)| e).collect()
}

/// Screen position of a vertex and its Jacobian rows `(d col/dp, d row/dp)`.
struct Projector {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    sx: f64,
    sy: f64,
    w: f64,
    h: f64,
}

impl Projector {
    fn new(cam: &Camera) -> Result<Self> {
        let f = cam.frame()?;
        let t = cam.tan_half();
        let aspect = cam.width as f64 / cam.height as f64;
        let (w, h) = (cam.width as f64, cam.height as f64);
        Ok(Self { eye: cam.eye, right: f.right, up: f.up, forward: f.forward, sx: w / (2.0 * t * aspect), sy: h / (2.0 * t), w, h })
    }

    /// `None` behind the eye.
    fn screen(&self, p: Vec3) -> Option<[f64; 2]> {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        (z > 1e-9).then(|| [self.sx * dot(d, self.right) / z + 0.5 * self.w, 0.5 * self.h - self.sy * dot(d, self.up) / z])
    }

    fn jacobian(&self, p: Vec3) -> [Vec3; 2] {
        let d = sub(p, self.eye);
        let z = dot(d, self.forward);
        let (x, y) = (dot(d, self.right) / z, dot(d, self.up) / z);
        [
            std::array::from_fn(|a| self.sx * (self.right[a] - x * self.forward[a]) / z),
            std::array::from_fn(|a| -self.sy * (self.up[a] - y * self.forward[a]) / z),
        ]
    }
}

/// One blended pixel: `target` moves toward `other` by `|t|`.
struct Blend {
    target: usize,
    front: usize,
    back: usize,
    t: f64,
    sign: f64,
    axis: usize,
    u: f64,
    edge: (u32, u32),
    s0: [f64; 2],
    s1: [f64; 2],
}

impl<T: Real> Tape<T> {
    /// Analytic silhouette antialiasing over a shaded `[H*W, 3]` image.
    ///
    /// For every horizontally or vertically adjacent pixel pair covered by
    /// different surfaces, a silhouette edge of the nearer face that crosses
    /// the segment between the two centers splits that segment; the pixel the
    /// edge reaches into is blended toward its neighbour by the covered length.
    /// The blend is continuous in the edge's screen position, so positions
    /// receive gradients where coverage changes.
    pub fn antialias(&self, image: Var, positions: Var, faces: &[[u32; 3]], frag: &Fragments, cam: &Camera) -> Result<Var> {
        let (w, h) = (frag.width, frag.height);
        let si = self.shape(image);
        if si != [w * h, 3] || (cam.width, cam.height) != (w, h) {
            return Err(Error::shape("antialias", format!("image {si:?}, fragments {w}x{h}, camera {}x{}", cam.width, cam.height)));
        }
        let sp = self.shape(positions);
        if sp.len() != 2 || sp[1] != 3 {
            return Err(Error::shape("antialias", format!("positions {sp:?}")));
        }
        let vp = self.value(positions);
        let pos: Vec<Vec3> = vp.chunks_exact(3).map(|c| [c[0].f64(), c[1].f64(), c[2].f64()]).collect();
        let proj = Projector::new(cam)?;
        let sil = silhouette_edges(faces, &facing(&pos, faces, cam.eye));
        let screen: Vec<Option<[f64; 2]>> = pos.iter().map(|&p| proj.screen(p)).collect();

        let mut blends = Vec::new();
        for row in 0..h {
            for col in 0..w {
                let a = row * w + col;
                for (axis, b) in [(0, (col + 1 < w).then(|| a + 1)), (1, (row + 1 < h).then(|| a + w))] {
                    let Some(b) = b else { continue };
                    if frag.face[a] == frag.face[b] {
                        continue;
                    }
                    let (front, back) = if frag.depth[a] <= frag.depth[b] { (a, b) } else { (b, a) };
                    let Some(fi) = frag.face[front] else { continue };
                    // centers along the pair axis; the other coordinate is fixed
                    let center = |i: usize| if axis == 0 { (i % w) as f64 + 0.5 } else { (i / w) as f64 + 0.5 };
                    let across = if axis == 0 { row as f64 + 0.5 } else { col as f64 + 0.5 };
                    let (cf, cb) = (center(front), center(back));
                    let f = faces[fi as usize];
                    for k in 0..3 {
                        let (v0, v1) = (f[k], f[(k + 1) % 3]);
                        if !sil.contains(&(v0.min(v1), v0.max(v1))) {
                            continue;
                        }
                        let (Some(s0), Some(s1)) = (screen[v0 as usize], screen[v1 as usize]) else { continue };
                        let (q, o) = (axis, 1 - axis);
                        let dy = s1[o] - s0[o];
                        if dy.abs() < 1e-12 {
                            continue;
                        }
                        let u = (across - s0[o]) / dy;
                        if !(0.0..=1.0).contains(&u) {
                            continue;
                        }
                        let x = s0[q] + u * (s1[q] - s0[q]);
                        let sign = (cb - cf).signum();
                        let t = (x - 0.5 * (cf + cb)) * sign;
                        if t.abs() >= 0.5 {
                            continue;
                        }
                        let target = if t > 0.0 { back } else { front };
                        blends.push(Blend { target, front, back, t, sign, axis, u, edge: (v0, v1), s0, s1 });
                        break;
                    }
                }
            }
        }

        let img = self.value(image);
        let mut out = img.to_vec();
        for bl in &blends {
            let other = if bl.target == bl.front { bl.back } else { bl.front };
            let wt = T::of(bl.t.abs());
            for c in 0..3 {
                out[3 * bl.target + c] += wt * (img[3 * other + c] - img[3 * bl.target + c]);
            }
        }
        let nv = sp[0];
        Ok(self.push(out, vec![w * h, 3], &[image, positions], move |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                for bl in &blends {
                    let other = if bl.target == bl.front { bl.back } else { bl.front };
                    let wt = T::of(bl.t.abs());
                    for c in 0..3 {
                        let gt = g[3 * bl.target + c] * wt;
                        d[3 * other + c] += gt;
                        d[3 * bl.target + c] -= gt;
                    }
                }
            }
            if let Some(d) = s.get(1) {
                let mut dpos = vec![0.0f64; nv * 3];
                for bl in &blends {
                    let gt: f64 = (0..3).map(|c| (g[3 * bl.target + c] * (img[3 * bl.front + c] - img[3 * bl.back + c])).f64()).sum();
                    if gt == 0.0 {
                        continue;
                    }
                    // t = (x - mid) sign, x = s0[q] + u (s1[q] - s0[q]), u = (across - s0[o]) / (s1[o] - s0[o])
                    let (q, o) = (bl.axis, 1 - bl.axis);
                    let gx = gt * bl.sign;
                    let (dx, dy) = (bl.s1[q] - bl.s0[q], bl.s1[o] - bl.s0[o]);
                    let mut g0 = [0.0; 2];
                    let mut g1 = [0.0; 2];
                    g0[q] = gx * (1.0 - bl.u);
                    g1[q] = gx * bl.u;
                    g0[o] = gx * dx * (bl.u - 1.0) / dy;
                    g1[o] = -gx * dx * bl.u / dy;
                    for (v, gs) in [(bl.edge.0, g0), (bl.edge.1, g1)] {
                        let p: Vec3 = std::array::from_fn(|a| vp[3 * v as usize + a].f64());
                        let j = proj.jacobian(p);
                        for a in 0..3 {
                            dpos[3 * v as usize + a] += gs[0] * j[0][a] + gs[1] * j[1][a];
                        }
                    }
                }
                d.iter_mut().zip(&dpos).for_each(|(d, &x)| *d += T::of(x));
            }
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Options {
    pub shading: Shading,
    pub background: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Stage2Render {
    /// `[H*W, 3]`
    pub image: Var,
    /// `false` when the surface was empty and the image is pure background.
    pub has_mesh: bool,
    pub covered: usize,
}

fn vec3s<T: Real>(v: &[T]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| [c[0].f64(), c[1].f64(), c[2].f64()]).collect()
}

/// Extract, rasterize and shade on `tape`.
pub fn render_stage2<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    p: &Bound,
    planes: Var,
    grid: &TetGrid,
    cam: &Camera,
    opts: &Stage2Options,
) -> Result<Stage2Render> {
    let npx = cam.width * cam.height;
    let Some(mesh) = extract_var(model, tape, p, planes, grid, true)? else {
        let bg: Vec<T> = opts.background.iter().map(|&v| T::of(v)).collect();
        return Ok(Stage2Render { image: tape.constant_vec([npx, 3], bg.repeat(npx)), has_mesh: false, covered: 0 });
    };
    let pos = vec3s(&tape.value(mesh.positions));
    let frag = rasterize(&pos, &mesh.topology.faces, cam)?;
    let rays = cam.make_rays()?;
    let image = tape.raster_shade(
        mesh.positions,
        mesh.colors,
        &mesh.topology.faces,
        &frag,
        &rays,
        &opts.shading,
        opts.background,
    )?;
    let image = tape.antialias(image, mesh.positions, &mesh.topology.faces, &frag, cam)?;
    Ok(Stage2Render { image, has_mesh: true, covered: frag.covered() })
}

/// Gradient-free render of an explicit mesh.
pub fn render_mesh(mesh: &Mesh, cam: &Camera, opts: &Stage2Options) -> Result<Image> {
    let pos: Vec<Vec3> = mesh.positions.iter().map(|p| p.map(f64::from)).collect();
    let frag = rasterize(&pos, &mesh.faces, cam)?;
    let rays = cam.make_rays()?;
    let tape = Tape::<f64>::new();
    let pv = tape.constant_vec([pos.len(), 3], pos.iter().flatten().copied().collect());
    let cv = tape.constant_vec([pos.len(), 3], mesh.colors.iter().flatten().map(|&c| c as f64).collect());
    let img = tape.raster_shade(pv, cv, &mesh.faces, &frag, &rays, &opts.shading, opts.background)?;
    let img = tape.antialias(img, pv, &mesh.faces, &frag, cam)?;
    Image::new(cam.width, cam.height, tape.value(img).iter().map(|&v| v as f32).collect())
}

/// Gradient-free stage-2 render of a detached triplane.
pub fn render_stage2_image<T: Real>(
    model: &Model<T>,
    planes: &Tensor<T>,
    grid: &TetGrid,
    cam: &Camera,
    opts: &Stage2Options,
) -> Result<Image> {
    let (mesh, _) = crate::dmtet::extract(model, planes, grid)?;
    if mesh.faces.is_empty() {
        return Ok(Image::filled(cam.width, cam.height, opts.background.map(|v| v as f32)));
    }
    render_mesh(&mesh, cam, opts)
}
