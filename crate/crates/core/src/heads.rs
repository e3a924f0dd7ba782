//! Implicit field heads on top of a triplane.
//!
//! A point is encoded as the sum of its three bilinear plane samples
//! concatenated with a sinusoidal encoding of the raw position, and fed to
//! three independent 3-layer ReLU MLPs: SDF, vertex deformation and color.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{taps, Tape, Taps, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadsConfig {
    pub hidden: usize,
    pub octaves: usize,
    /// Half-extent of the cubic object bound, in meters.
    pub half_extent: f64,
    /// Radius of the analytic sphere added to the SDF output.
    pub sphere_radius: f64,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { hidden: 64, octaves: 6, half_extent: 1.0, sphere_radius: 0.5 }
    }
}

/// Sinusoidal position encoding, `[p, sin(2^k pi p), cos(2^k pi p)]` for
/// `k < octaves`, each block over the three coordinates.
pub fn posenc<T: Real>(p: [T; 3], octaves: usize, out: &mut Vec<T>) {
    out.extend_from_slice(&p);
    for k in 0..octaves {
        let f = T::of((1u64 << k) as f64) * T::PI();
        out.extend(p.iter().map(|&x| (f * x).sin()));
        out.extend(p.iter().map(|&x| (f * x).cos()));
    }
}

pub fn posenc_dim(octaves: usize) -> usize {
    3 + 6 * octaves
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub w: [ParamId; 3],
    pub b: [ParamId; 3],
}

impl Mlp {
    fn new<T: Real>(
        name: &str,
        group: Group,
        dims: [usize; 4],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        for l in 0..3 {
            let (i, o) = (dims[l], dims[l + 1]);
            // The last layer starts at zero: the sphere bias, mid-gray and
            // zero offsets define the initial state.
            w.push(if l == 2 {
                store.zeros(format!("{name}.l{l}.w"), group, &[i, o])
            } else {
                store.uniform(format!("{name}.l{l}.w"), group, &[i, o], i, rng)
            });
            b.push(store.zeros(format!("{name}.l{l}.b"), group, &[o]));
        }
        Self { w: [w[0], w[1], w[2]], b: [b[0], b[1], b[2]] }
    }

    /// Returns the output and both hidden pre-activations.
    fn forward<T: Real>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<(Var, [Var; 2])> {
        let z1 = tape.linear(x, p.get(self.w[0]), Some(p.get(self.b[0])))?;
        let h1 = tape.relu(z1);
        let z2 = tape.linear(h1, p.get(self.w[1]), Some(p.get(self.b[1])))?;
        let h2 = tape.relu(z2);
        let y = tape.linear(h2, p.get(self.w[2]), Some(p.get(self.b[2])))?;
        Ok((y, [z1, z2]))
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub cfg: HeadsConfig,
    pub channels: usize,
    pub sdf: Mlp,
    pub deform: Mlp,
    pub color: Mlp,
}

/// Which outputs to compute in [`Heads::eval`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Want {
    pub color: bool,
    pub normals: bool,
    /// Deformation, scaled to this maximum per-axis offset.
    pub deform: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct FieldOut {
    /// `[n, 1]`
    pub sdf: Var,
    /// `[n, 3]` in [0, 1].
    pub color: Option<Var>,
    /// `[n, 3]` unit normals from the analytic SDF gradient.
    pub normal: Option<Var>,
    /// `[n, 3]` offsets.
    pub deform: Option<Var>,
}

impl Heads {
    pub fn new<T: Real>(
        cfg: HeadsConfig,
        channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 || !(cfg.half_extent > 0.0) {
            return Err(Error::Config("heads need hidden > 0 and a positive half-extent".into()));
        }
        let d = channels + posenc_dim(cfg.octaves);
        let h = cfg.hidden;
        let sdf = Mlp::new("heads.sdf", Group::Sdf, [d, h, h, 1], store, rng);
        let deform = Mlp::new("heads.deform", Group::Deform, [d, h, h, 3], store, rng);
        let color = Mlp::new("heads.color", Group::Color, [d, h, h, 3], store, rng);
        Ok(Self { cfg, channels, sdf, deform, color })
    }

    pub fn input_dim(&self) -> usize {
        self.channels + posenc_dim(self.cfg.octaves)
    }

    /// Evaluates the heads at `pts` (`3n` coordinates, treated as constants).
    pub fn eval<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        planes: Var,
        pts: &[T],
        want: Want,
    ) -> Result<FieldOut> {
        if pts.len() % 3 != 0 {
            return Err(Error::shape("heads", format!("{} coordinates", pts.len())));
        }
        let n = pts.len() / 3;
        let he = T::of(self.cfg.half_extent);
        let feat = query_triplane(tape, planes, pts, he)?;
        let mut enc = Vec::with_capacity(n * posenc_dim(self.cfg.octaves));
        for q in pts.chunks_exact(3) {
            posenc([q[0], q[1], q[2]], self.cfg.octaves, &mut enc);
        }
        let enc = tape.constant_vec([n, posenc_dim(self.cfg.octaves)], enc);
        let x = tape.concat_cols(&[feat, enc])?;

        let (raw, [z1, z2]) = self.sdf.forward(tape, p, x)?;
        let r0 = T::of(self.cfg.sphere_radius);
        let bias: Vec<T> = pts.chunks_exact(3).map(|q| norm3(q) - r0).collect();
        let bias = tape.constant_vec([n, 1], bias);
        let sdf = tape.add(raw, bias)?;

        let color = if want.color {
            let (y, _) = self.color.forward(tape, p, x)?;
            Some(tape.sigmoid(y))
        } else {
            None
        };
        let deform = match want.deform {
            Some(max) => {
                let (y, _) = self.deform.forward(tape, p, x)?;
                Some(tape.scale(tape.tanh(y), T::of(max)))
            }
            None => None,
        };
        let normal = if want.normals {
            Some(self.sdf_normals(tape, p, planes, pts, [z1, z2])?)
        } else {
            None
        };
        Ok(FieldOut { sdf, color, normal, deform })
    }

    /// Input gradient of the SDF MLP written with tape ops (ReLU masks are
    /// locally constant), chained through the triplane lookup and the
    /// encoding, plus the sphere-bias gradient; then normalized.
    fn sdf_normals<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        planes: Var,
        pts: &[T],
        [z1, z2]: [Var; 2],
    ) -> Result<Var> {
        let n = pts.len() / 3;
        let h = self.cfg.hidden;
        let mask = |z: Var| {
            let v = tape.value(z);
            tape.constant_vec([n, h], v.iter().map(|&x| if x > T::zero() { T::one() } else { T::zero() }).collect())
        };
        let (m1, m2) = (mask(z1), mask(z2));
        let w3 = tape.reshape(p.get(self.sdf.w[2]), [h])?;
        let g2 = tape.mul_row(m2, w3)?;
        let g1 = tape.matmul(g2, tape.transpose(p.get(self.sdf.w[1]))?)?;
        let g1 = tape.mul(g1, m1)?;
        let g_in = tape.matmul(g1, tape.transpose(p.get(self.sdf.w[0]))?)?;
        let c = self.channels;
        let g_feat = tape.slice_cols(g_in, 0, c)?;
        let g_enc = tape.slice_cols(g_in, c, self.input_dim())?;
        let he = T::of(self.cfg.half_extent);
        let from_feat = triplane_grad_dot(tape, planes, pts, he, g_feat)?;
        let from_enc = posenc_vjp(tape, g_enc, pts, self.cfg.octaves)?;
        let sphere: Vec<T> = pts
            .chunks_exact(3)
            .flat_map(|q| {
                let r = norm3(q).max(T::of(1e-9));
                [q[0] / r, q[1] / r, q[2] / r]
            })
            .collect();
        let sphere = tape.constant_vec([n, 3], sphere);
        let g = tape.add_n(&[from_feat, from_enc, sphere])?;
        Ok(tape.normalize_rows(g, T::of(1e-12)))
    }
}

fn norm3<T: Real>(q: &[T]) -> T {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()
}

/// Per-point taps on the XY, XZ and YZ planes for positions scaled by the
/// half-extent.
fn plane_taps<T: Real>(pts: &[T], he: T, r: usize) -> Vec<[Taps<T>; 3]> {
    pts.chunks_exact(3)
        .map(|q| {
            let (x, y, z) = (q[0] / he, q[1] / he, q[2] / he);
            [taps(x, y, r, r), taps(x, z, r, r), taps(y, z, r, r)]
        })
        .collect()
}

fn check_planes(tape_shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if tape_shape.len() != 4 || tape_shape[0] != 3 || tape_shape[2] != tape_shape[3] {
        return Err(Error::shape(op, format!("planes {tape_shape:?}")));
    }
    Ok((tape_shape[1], tape_shape[2]))
}

fn check_points<T: Real>(pts: &[T], op: &'static str) -> Result<()> {
    if pts.len() % 3 != 0 {
        return Err(Error::shape(op, format!("{} coordinates", pts.len())));
    }
    if pts.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{op} positions")));
    }
    Ok(())
}

/// Sum of the three bilinear plane samples at each point: `[3, C, R, R]` ->
/// `[n, C]`. Points outside the bound clamp to the border.
pub fn query_triplane<T: Real>(tape: &Tape<T>, planes: Var, pts: &[T], he: T) -> Result<Var> {
    let (c, r) = check_planes(&tape.shape(planes), "query_triplane")?;
    check_points(pts, "query_triplane")?;
    let n = pts.len() / 3;
    let rr = r * r;
    let vp = tape.value(planes);
    let tp = plane_taps(pts, he, r);
    let mut out = vec![T::zero(); n * c];
    for (i, t3) in tp.iter().enumerate() {
        let row = &mut out[i * c..(i + 1) * c];
        for (pl, t) in t3.iter().enumerate() {
            for (ch, o) in row.iter_mut().enumerate() {
                let base = (pl * c + ch) * rr;
                for k in 0..4 {
                    *o += t.w[k] * vp[base + t.idx[k]];
                }
            }
        }
    }
    Ok(tape.push(out, vec![n, c], &[planes], move |g, s| {
        let Some(d) = s.get(0) else { return };
        for (i, t3) in tp.iter().enumerate() {
            for (pl, t) in t3.iter().enumerate() {
                for ch in 0..c {
                    let gv = g[i * c + ch];
                    let base = (pl * c + ch) * rr;
                    for k in 0..4 {
                        d[base + t.idx[k]] += t.w[k] * gv;
                    }
                }
            }
        }
    }))
}

/// `J[i, :] = sum_c g[i, c] * d feat_c / d p` at each point, where `feat` is
/// [`query_triplane`]. Differentiable in `g` and the planes.
pub fn triplane_grad_dot<T: Real>(tape: &Tape<T>, planes: Var, pts: &[T], he: T, g: Var) -> Result<Var> {
    let (c, r) = check_planes(&tape.shape(planes), "triplane_grad_dot")?;
    check_points(pts, "triplane_grad_dot")?;
    let n = pts.len() / 3;
    if tape.shape(g) != [n, c] {
        return Err(Error::shape("triplane_grad_dot", format!("g {:?}", tape.shape(g))));
    }
    let rr = r * r;
    let vp = tape.value(planes);
    let vg = tape.value(g);
    let tp = plane_taps(pts, he, r);
    let inv = T::one() / he;
    // Plane pl's two sample coordinates are these position axes.
    const AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];
    // d feat_c / d p_axis for every (point, channel): [n, c, 3]
    let mut jac = vec![T::zero(); n * c * 3];
    for (i, t3) in tp.iter().enumerate() {
        for (pl, t) in t3.iter().enumerate() {
            let [a0, a1] = AXES[pl];
            for ch in 0..c {
                let base = (pl * c + ch) * rr;
                let (mut da, mut db) = (T::zero(), T::zero());
                for k in 0..4 {
                    let v = vp[base + t.idx[k]];
                    da += t.dw_da[k] * v;
                    db += t.dw_db[k] * v;
                }
                jac[(i * c + ch) * 3 + a0] += da * inv;
                jac[(i * c + ch) * 3 + a1] += db * inv;
            }
        }
    }
    let mut out = vec![T::zero(); n * 3];
    for i in 0..n {
        for ch in 0..c {
            let gv = vg[i * c + ch];
            for a in 0..3 {
                out[i * 3 + a] += gv * jac[(i * c + ch) * 3 + a];
            }
        }
    }
    Ok(tape.push(out, vec![n, 3], &[planes, g], move |go, s| {
        if let Some(d) = s.get(1) {
            for i in 0..n {
                for ch in 0..c {
                    d[i * c + ch] += (0..3).fold(T::zero(), |acc, a| acc + go[i * 3 + a] * jac[(i * c + ch) * 3 + a]);
                }
            }
        }
        if let Some(d) = s.get(0) {
            for (i, t3) in tp.iter().enumerate() {
                for (pl, t) in t3.iter().enumerate() {
                    let [a0, a1] = AXES[pl];
                    let (ga, gb) = (go[i * 3 + a0] * inv, go[i * 3 + a1] * inv);
                    for ch in 0..c {
                        let gv = vg[i * c + ch];
                        let base = (pl * c + ch) * rr;
                        for k in 0..4 {
                            d[base + t.idx[k]] += gv * (t.dw_da[k] * ga + t.dw_db[k] * gb);
                        }
                    }
                }
            }
        }
    }))
}

/// Pulls a cotangent on the position encoding back to the positions:
/// `g_enc [n, 3 + 6K]` -> `[n, 3]`. Linear in `g_enc`.
pub fn posenc_vjp<T: Real>(tape: &Tape<T>, g_enc: Var, pts: &[T], octaves: usize) -> Result<Var> {
    check_points(pts, "posenc_vjp")?;
    let n = pts.len() / 3;
    let e = posenc_dim(octaves);
    if tape.shape(g_enc) != [n, e] {
        return Err(Error::shape("posenc_vjp", format!("g {:?}", tape.shape(g_enc))));
    }
    // d enc_j / d p_axis(j): each encoding entry depends on one coordinate.
    let mut deriv = vec![T::zero(); n * e];
    for (i, q) in pts.chunks_exact(3).enumerate() {
        let row = &mut deriv[i * e..(i + 1) * e];
        row[..3].fill(T::one());
        for k in 0..octaves {
            let f = T::of((1u64 << k) as f64) * T::PI();
            for a in 0..3 {
                row[3 + 6 * k + a] = f * (f * q[a]).cos();
                row[3 + 6 * k + 3 + a] = -f * (f * q[a]).sin();
            }
        }
    }
    let vg = tape.value(g_enc);
    let mut out = vec![T::zero(); n * 3];
    for i in 0..n {
        for j in 0..e {
            out[i * 3 + j % 3] += vg[i * e + j] * deriv[i * e + j];
        }
    }
    Ok(tape.push(out, vec![n, 3], &[g_enc], move |go, s| {
        let Some(d) = s.get(0) else { return };
        for i in 0..n {
            for j in 0..e {
                d[i * e + j] += go[i * 3 + j % 3] * deriv[i * e + j];
            }
        }
    }))
}

/// Convenience for tests and export: evaluates the SDF at `pts` without a
/// persistent tape.
pub fn sdf_values<T: Real>(heads: &Heads, store: &ParamStore<T>, planes: &Tensor<T>, pts: &[T]) -> Result<Vec<T>> {
    let tape = Tape::new();
    let p = store.bind_constant(&tape);
    let pv = tape.constant(planes);
    let out = heads.eval(&tape, &p, pv, pts, Want::default())?;
    Ok(tape.value(out.sdf).to_vec())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::{check, CheckOptions};
    use crate::params::Bound;

    fn setup(c: usize, r: usize, seed: u64) -> (Heads, ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = HeadsConfig { hidden: 16, octaves: 2, ..HeadsConfig::default() };
        let heads = Heads::new(cfg, c, &mut store, &mut rng).unwrap();
        let planes = Tensor::from_fn([3, c, r, r], |_| rng.gen_range(-1.0..1.0));
        (heads, store, planes)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            let n = p.value.numel();
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        }
    }

    fn rand_pts(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * n).map(|_| rng.gen_range(-0.9..0.9)).collect()
    }

    #[test]
    fn posenc_examples() {
        let mut v = Vec::new();
        posenc([0.0f64; 3], 3, &mut v);
        assert_eq!(&v[..3], &[0.0; 3]);
        for k in 0..3 {
            assert_eq!(&v[3 + 6 * k..6 + 6 * k], &[0.0; 3]);
            assert_eq!(&v[6 + 6 * k..9 + 6 * k], &[1.0; 3]);
        }
        v.clear();
        posenc([0.3, -0.2, 0.7], 0, &mut v);
        assert_eq!(v, vec![0.3, -0.2, 0.7]);
        v.clear();
        posenc([0.25f64, 0.0, 0.0], 2, &mut v);
        let pi = std::f64::consts::PI;
        let want = [
            0.25, 0.0, 0.0,
            (pi * 0.25).sin(), 0.0, 0.0, (pi * 0.25).cos(), 1.0, 1.0,
            (2.0 * pi * 0.25).sin(), 0.0, 0.0, (2.0 * pi * 0.25).cos(), 1.0, 1.0,
        ];
        for (a, b) in v.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn query_constant_and_zero_planes() {
        let tape = Tape::<f64>::new();
        let planes = Tensor::from_fn([3, 2, 5, 5], |i| [0.5, -1.0, 2.0][i / 50] + (i / 25 % 2) as f64);
        let pv = tape.constant(&planes);
        let pts = rand_pts(10, 1);
        let f = tape.value(query_triplane(&tape, pv, &pts, 1.0).unwrap());
        for row in f.chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12);
            assert!((row[1] - 4.5).abs() < 1e-12);
        }
        let z = tape.constant(&Tensor::zeros([3, 2, 5, 5]));
        let f = tape.value(query_triplane(&tape, z, &pts, 1.0).unwrap());
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn query_matches_three_bilinear_lookups() {
        let (_, _, planes) = setup(3, 6, 2);
        let he = 1.3;
        let pts: Vec<f64> = rand_pts(20, 3).iter().map(|v| v * he).collect();
        let tape = Tape::new();
        let pv = tape.constant(&planes);
        let f = tape.value(query_triplane(&tape, pv, &pts, he).unwrap());
        // independent closed-form bilinear oracle
        let bil = |pl: usize, ch: usize, a: f64, b: f64| {
            let r = 6;
            let x = (a + 1.0) * 0.5 * (r - 1) as f64;
            let y = (b + 1.0) * 0.5 * (r - 1) as f64;
            let (i, j) = ((x.floor() as usize).min(r - 2), (y.floor() as usize).min(r - 2));
            let (fx, fy) = (x - i as f64, y - j as f64);
            let at = |ii: usize, jj: usize| planes.data()[((pl * 3 + ch) * r + ii) * r + jj];
            at(i, j) * (1.0 - fx) * (1.0 - fy)
                + at(i, j + 1) * (1.0 - fx) * fy
                + at(i + 1, j) * fx * (1.0 - fy)
                + at(i + 1, j + 1) * fx * fy
        };
        for (k, q) in pts.chunks(3).enumerate() {
            let (x, y, z) = (q[0] / he, q[1] / he, q[2] / he);
            for ch in 0..3 {
                let want = bil(0, ch, x, y) + bil(1, ch, x, z) + bil(2, ch, y, z);
                assert!((f[k * 3 + ch] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_state_is_a_gray_sphere_without_offsets() {
        let (heads, store, planes) = setup(4, 8, 4);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let pv = tape.constant(&planes);
        let pts = vec![0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, -0.3, 0.4, 0.2, 0.3, 0.1];
        let out = heads
            .eval(&tape, &p, pv, &pts, Want { color: true, normals: true, deform: Some(0.05) })
            .unwrap();
        let sdf = tape.value(out.sdf);
        assert!((sdf[0] + 0.5).abs() < 1e-15);
        assert!(sdf[1].abs() < 1e-15 && sdf[2].abs() < 1e-15);
        assert!(tape.value(out.color.unwrap()).iter().all(|&c| c == 0.5));
        assert!(tape.value(out.deform.unwrap()).iter().all(|&d| d == 0.0));
        // sphere normals point radially
        let nrm = tape.value(out.normal.unwrap());
        let q = &pts[9..12];
        let r = norm3(q);
        for a in 0..3 {
            assert!((nrm[9 + a] - q[a] / r).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_respect_their_ranges() {
        let (heads, mut store, planes) = setup(4, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (_, p) in store.iter_mut() {
            let n = p.value.numel();
            let s = p.value.shape().to_vec();
            p.value = Tensor::new(s, (0..n).map(|_| rng.gen_range(-20.0..20.0)).collect()).unwrap();
        }
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let pv = tape.constant(&planes);
        let out = heads
            .eval(&tape, &p, pv, &rand_pts(200, 7), Want { color: true, normals: true, deform: Some(0.03) })
            .unwrap();
        assert!(tape.value(out.color.unwrap()).iter().all(|&c| (0.0..=1.0).contains(&c)));
        assert!(tape.value(out.deform.unwrap()).iter().all(|&d| d.abs() <= 0.03));
        for n in tape.value(out.normal.unwrap()).chunks(3) {
            assert!((norm3(n) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normals_match_finite_differences_of_the_sdf() {
        let (heads, mut store, planes) = setup(3, 6, 8);
        randomize(&mut store, 9);
        let pts = rand_pts(12, 10);
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        let pv = tape.constant(&planes);
        let out = heads.eval(&tape, &p, pv, &pts, Want { normals: true, ..Want::default() }).unwrap();
        let nrm = tape.value(out.normal.unwrap());
        let h = 1e-7;
        let mut checked = 0;
        for i in 0..12 {
            let mut grad = [0.0; 3];
            for a in 0..3 {
                let mut q = pts[3 * i..3 * i + 3].to_vec();
                q[a] += h;
                let fp = sdf_values(&heads, &store, &planes, &q).unwrap()[0];
                q[a] -= 2.0 * h;
                let fm = sdf_values(&heads, &store, &planes, &q).unwrap()[0];
                grad[a] = (fp - fm) / (2.0 * h);
            }
            let g = norm3(&grad);
            // Skip points that sit within h of a ReLU or texel kink.
            let want: Vec<f64> = grad.iter().map(|v| v / g).collect();
            let err = (0..3).map(|a| (nrm[3 * i + a] - want[a]).abs()).fold(0.0, f64::max);
            if err < 1e-5 {
                checked += 1;
            }
        }
        assert!(checked >= 11, "only {checked} of 12 normals agree");
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let (heads, mut store, planes) = setup(3, 5, 11);
        randomize(&mut store, 12);
        let pts = rand_pts(6, 13);
        let mut inputs: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
        inputs.push(planes);
        let np = store.len();
        let r = check(
            "heads",
            &inputs,
            |t, v| {
                let bound = Bound::from_vars(v[..np].to_vec());
                let o = heads.eval(t, &bound, v[np], &pts, Want { color: true, normals: true, deform: Some(0.1) })?;
                let parts = [
                    t.sum(t.square(o.sdf)),
                    t.sum(t.square(o.color.unwrap())),
                    t.dot_const(o.normal.unwrap(), &[0.3, -0.7, 0.2].repeat(6))?,
                    t.sum(t.square(o.deform.unwrap())),
                ];
                Ok(t.sum(t.add_n(&parts)?))
            },
            &CheckOptions { max_entries: 300, ..CheckOptions::default() },
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
