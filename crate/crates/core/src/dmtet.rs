//! Deformable tetrahedral grid and differentiable marching tetrahedra.
//!
//! The bound is split into `R^3` cubes, each cut into six tetrahedra along
//! its main diagonal (Kuhn split, so shared faces agree without parity
//! tricks). Each lattice vertex carries an SDF value, an offset and a color;
//! the surface is the zero crossing on every edge with a sign change,
//! interpolated linearly and deduplicated per undirected edge.

use std::collections::HashMap;
use std::sync::OnceLock;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::Want;
use crate::io::Mesh;
use crate::model::Model;
use crate::par;
use crate::params::Bound;
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct TetGrid {
    pub resolution: usize,
    pub half_extent: f64,
    /// Undeformed lattice positions.
    pub verts: Vec<[f64; 3]>,
    /// Positively oriented tetrahedra.
    pub tets: Vec<[u32; 4]>,
}

pub fn signed_volume(p: [[f64; 3]; 4]) -> f64 {
    let d = |a: usize| [p[a][0] - p[0][0], p[a][1] - p[0][1], p[a][2] - p[0][2]];
    let (a, b, c) = (d(1), d(2), d(3));
    a[0] * (b[1] * c[2] - b[2] * c[1]) - a[1] * (b[0] * c[2] - b[2] * c[0]) + a[2] * (b[0] * c[1] - b[1] * c[0])
}

impl TetGrid {
    pub fn build(resolution: usize, half_extent: f64) -> Result<Self> {
        if resolution == 0 || !(half_extent > 0.0) {
            return Err(Error::Invalid(format!(
                "tet grid needs R >= 1 and a positive bound, got R={resolution}, h={half_extent}"
            )));
        }
        let n = resolution + 1;
        let id = |i: usize, j: usize, k: usize| ((i * n + j) * n + k) as u32;
        let coord = |i: usize| -half_extent + 2.0 * half_extent * i as f64 / resolution as f64;
        let mut verts = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    verts.push([coord(i), coord(j), coord(k)]);
                }
            }
        }
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut tets = Vec::with_capacity(6 * resolution.pow(3));
        for i in 0..resolution {
            for j in 0..resolution {
                for k in 0..resolution {
                    for perm in PERMS {
                        let mut c = [i, j, k];
                        let mut t = [id(c[0], c[1], c[2]); 4];
                        for (s, &axis) in perm.iter().enumerate() {
                            c[axis] += 1;
                            t[s + 1] = id(c[0], c[1], c[2]);
                        }
                        let p = t.map(|v| verts[v as usize]);
                        if signed_volume(p) < 0.0 {
                            t.swap(2, 3);
                        }
                        tets.push(t);
                    }
                }
            }
        }
        Ok(Self { resolution, half_extent, verts, tets })
    }

    pub fn cell(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    /// Largest per-axis offset the deformation head may apply.
    pub fn max_offset(&self) -> f64 {
        0.5 * self.cell()
    }

    pub fn flat_verts<T: Real>(&self) -> Vec<T> {
        self.verts.iter().flat_map(|p| p.map(T::of)).collect()
    }
}

/// Local vertex pairs of a tetrahedron's six edges.
const TET_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Per sign case (bit `i` set when vertex `i` is negative), triangles as
/// indices into [`TET_EDGES`], oriented toward positive SDF for a positively
/// oriented tetrahedron.
pub fn case_table() -> &'static [Vec<[usize; 3]>; 16] {
    static TABLE: OnceLock<[Vec<[usize; 3]>; 16]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let reference = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let edge = |a: usize, b: usize| TET_EDGES.iter().position(|&e| e == (a.min(b), a.max(b))).unwrap();
        let mid = |e: usize| {
            let (a, b) = TET_EDGES[e];
            std::array::from_fn::<f64, 3, _>(|k| 0.5 * (reference[a][k] + reference[b][k]))
        };
        std::array::from_fn(|case| {
            let neg: Vec<usize> = (0..4).filter(|i| case >> i & 1 == 1).collect();
            let pos: Vec<usize> = (0..4).filter(|i| case >> i & 1 == 0).collect();
            let tris: Vec<[usize; 3]> = match neg.len() {
                1 | 3 => {
                    let (lone, rest) = if neg.len() == 1 { (neg[0], &pos) } else { (pos[0], &neg) };
                    vec![[edge(lone, rest[0]), edge(lone, rest[1]), edge(lone, rest[2])]]
                }
                2 => {
                    let (i0, i1, o0, o1) = (neg[0], neg[1], pos[0], pos[1]);
                    vec![
                        [edge(i0, o0), edge(i0, o1), edge(i1, o1)],
                        [edge(i0, o0), edge(i1, o1), edge(i1, o0)],
                    ]
                }
                _ => Vec::new(),
            };
            // Canonical triangle order, so a global sign flip only reverses
            // orientation. Then orient each normal toward a positive vertex.
            let mut tris = tris;
            tris.sort_by_key(|t| {
                let mut k = *t;
                k.sort_unstable();
                k
            });
            tris.into_iter()
                .map(|t| {
                    let [a, b, c] = t.map(mid);
                    let n = crate::camera::cross(crate::camera::sub(b, a), crate::camera::sub(c, a));
                    let out = reference[pos[0]];
                    let to = crate::camera::sub(out, a);
                    if crate::camera::dot(n, to) < 0.0 {
                        [t[0], t[2], t[1]]
                    } else {
                        t
                    }
                })
                .collect()
        })
    })
}

/// Surface connectivity for a given sign pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Topology {
    /// Crossing edges `(a, b)` with `a < b`; one output vertex each.
    pub edges: Vec<(u32, u32)>,
    /// First tetrahedron that produced each crossing vertex.
    pub tet_of: Vec<u32>,
    pub faces: Vec<[u32; 3]>,
}

impl Topology {
    /// Sorted lattice vertices touched by a crossing edge.
    pub fn endpoints(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.edges.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

pub fn topology<T: Real>(grid: &TetGrid, sdf: &[T]) -> Result<Topology> {
    if sdf.len() != grid.verts.len() {
        return Err(Error::shape("march_tets", format!("{} sdf values for {} vertices", sdf.len(), grid.verts.len())));
    }
    if sdf.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sdf values on the grid".into()));
    }
    let table = case_table();
    let mut topo = Topology::default();
    let mut index: HashMap<(u32, u32), u32> = HashMap::new();
    for (ti, tet) in grid.tets.iter().enumerate() {
        let case = (0..4).fold(0, |c, i| c | ((sdf[tet[i] as usize] < T::zero()) as usize) << i);
        let tris = &table[case];
        if tris.is_empty() {
            continue;
        }
        // Register crossing vertices in fixed edge order so numbering does
        // not depend on triangle orientation.
        let mut local = [u32::MAX; 6];
        for (e, &(a, b)) in TET_EDGES.iter().enumerate() {
            if (case >> a & 1) == (case >> b & 1) {
                continue;
            }
            let (va, vb) = (tet[a], tet[b]);
            let key = (va.min(vb), va.max(vb));
            local[e] = *index.entry(key).or_insert_with(|| {
                topo.edges.push(key);
                topo.tet_of.push(ti as u32);
                (topo.edges.len() - 1) as u32
            });
        }
        for t in tris {
            topo.faces.push(t.map(|e| local[e]));
        }
    }
    Ok(topo)
}

/// Zero-crossing parameter on edge `(a, b)`.
fn crossing<T: Real>(sa: T, sb: T) -> T {
    sa / (sa - sb)
}

impl<T: Real> Tape<T> {
    /// Linear interpolation of per-vertex attributes `[V, k]` at the zero
    /// crossing of `sdf: [V, 1]` along each edge. Output `[edges, k]`.
    pub fn edge_interp(&self, attrs: Var, sdf: Var, edges: &[(u32, u32)]) -> Result<Var> {
        let (sa, ss) = (self.shape(attrs), self.shape(sdf));
        if sa.len() != 2 || ss != [sa[0], 1] {
            return Err(Error::shape("edge_interp", format!("attrs {sa:?}, sdf {ss:?}")));
        }
        let (nv, k) = (sa[0], sa[1]);
        if edges.iter().any(|&(a, b)| a as usize >= nv || b as usize >= nv) {
            return Err(Error::shape("edge_interp", "edge index out of range"));
        }
        let (va, vs) = (self.value(attrs), self.value(sdf));
        let mut t = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            let (x, y) = (vs[a as usize], vs[b as usize]);
            if (x < T::zero()) == (y < T::zero()) {
                return Err(Error::Invalid(format!("edge ({a}, {b}) has no sign change")));
            }
            t.push(crossing(x, y));
        }
        let mut out = vec![T::zero(); edges.len() * k];
        for (e, &(a, b)) in edges.iter().enumerate() {
            let (a, b) = (a as usize, b as usize);
            for c in 0..k {
                out[e * k + c] = va[a * k + c] + t[e] * (va[b * k + c] - va[a * k + c]);
            }
        }
        let edges = edges.to_vec();
        Ok(self.push(out, vec![edges.len(), k], &[attrs, sdf], move |g, s| {
            if let Some(d) = s.get(0) {
                for (e, &(a, b)) in edges.iter().enumerate() {
                    let (a, b) = (a as usize, b as usize);
                    for c in 0..k {
                        d[a * k + c] += (T::one() - t[e]) * g[e * k + c];
                        d[b * k + c] += t[e] * g[e * k + c];
                    }
                }
            }
            if let Some(d) = s.get(1) {
                for (e, &(a, b)) in edges.iter().enumerate() {
                    let (a, b) = (a as usize, b as usize);
                    let (x, y) = (vs[a], vs[b]);
                    let den = (x - y) * (x - y);
                    // dt/dx = -y / (x - y)^2, dt/dy = x / (x - y)^2
                    let gt = (0..k).fold(T::zero(), |acc, c| acc + g[e * k + c] * (va[b * k + c] - va[a * k + c]));
                    d[a] += gt * (-y) / den;
                    d[b] += gt * x / den;
                }
            }
        }))
    }
}

/// Mesh with crossing-edge provenance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub mesh: Mesh,
    pub topology: Topology,
}

/// Marching tetrahedra on explicit per-vertex buffers (`offsets` and
/// `colors` hold 3 values per vertex).
pub fn march_tets<T: Real>(grid: &TetGrid, sdf: &[T], offsets: &[T], colors: &[T]) -> Result<TriMesh> {
    let nv = grid.verts.len();
    if offsets.len() != 3 * nv || colors.len() != 3 * nv {
        return Err(Error::shape("march_tets", "offset/color buffers must hold 3 values per vertex"));
    }
    let topo = topology(grid, sdf)?;
    let mut mesh = Mesh::default();
    for &(a, b) in &topo.edges {
        let (a, b) = (a as usize, b as usize);
        let t = crossing(sdf[a], sdf[b]);
        let pa: [T; 3] = std::array::from_fn(|k| T::of(grid.verts[a][k]) + offsets[3 * a + k]);
        let pb: [T; 3] = std::array::from_fn(|k| T::of(grid.verts[b][k]) + offsets[3 * b + k]);
        mesh.positions.push(std::array::from_fn(|k| (pa[k] + t * (pb[k] - pa[k])).f64() as f32));
        mesh.colors.push(std::array::from_fn(|k| {
            (colors[3 * a + k] + t * (colors[3 * b + k] - colors[3 * a + k])).f64() as f32
        }));
    }
    mesh.faces = topo.faces.clone();
    Ok(TriMesh { mesh, topology: topo })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeshStats {
    pub vertices: usize,
    pub faces: usize,
    pub edges: usize,
    pub degenerate_faces: usize,
    /// Edges used by exactly one face.
    pub boundary_edges: usize,
    /// Edges used by more than two faces.
    pub nonmanifold_edges: usize,
    /// Edges whose two faces traverse them in the same direction.
    pub inconsistent_edges: usize,
}

impl MeshStats {
    pub fn euler(&self) -> i64 {
        self.vertices as i64 - self.edges as i64 + self.faces as i64
    }

    pub fn watertight(&self) -> bool {
        self.faces > 0 && self.boundary_edges == 0 && self.nonmanifold_edges == 0
    }
}

pub fn mesh_stats(mesh: &Mesh) -> MeshStats {
    let mut edges: HashMap<(u32, u32), (usize, i32)> = HashMap::new();
    let mut degenerate = 0;
    for f in &mesh.faces {
        let p = f.map(|i| mesh.positions[i as usize].map(f64::from));
        let n = crate::camera::cross(crate::camera::sub(p[1], p[0]), crate::camera::sub(p[2], p[0]));
        if crate::camera::norm(n) < 1e-12 {
            degenerate += 1;
        }
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let e = edges.entry((a.min(b), a.max(b))).or_insert((0, 0));
            e.0 += 1;
            e.1 += if a < b { 1 } else { -1 };
        }
    }
    MeshStats {
        vertices: mesh.positions.len(),
        faces: mesh.faces.len(),
        edges: edges.len(),
        degenerate_faces: degenerate,
        boundary_edges: edges.values().filter(|e| e.0 == 1).count(),
        nonmanifold_edges: edges.values().filter(|e| e.0 > 2).count(),
        inconsistent_edges: edges.values().filter(|e| e.0 == 2 && e.1 != 0).count(),
    }
}

/// Symmetric Hausdorff distance between two vertex sets.
pub fn hausdorff(a: &Mesh, b: &Mesh) -> f64 {
    fn one_way(x: &[[f32; 3]], y: &[[f32; 3]]) -> f64 {
        let d = par::map(x, |p| {
            y.iter()
                .map(|q| (0..3).map(|k| ((p[k] - q[k]) as f64).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        });
        d.into_iter().fold(0.0, f64::max).sqrt()
    }
    if a.positions.is_empty() || b.positions.is_empty() {
        return f64::INFINITY;
    }
    one_way(&a.positions, &b.positions).max(one_way(&b.positions, &a.positions))
}

/// SDF values at every lattice vertex, without gradients, in parallel chunks.
pub fn grid_sdf<T: Real>(model: &Model<T>, planes: &Tensor<T>, grid: &TetGrid, chunk: usize) -> Result<Vec<T>> {
    let pts = grid.flat_verts::<T>();
    let parts = par::map(&pts.chunks(3 * chunk.max(1)).collect::<Vec<_>>(), |c| -> Result<Vec<T>> {
        let tape = Tape::new();
        let p = model.store.bind_constant(&tape);
        let pv = tape.constant(planes);
        let f = model.heads.eval(&tape, &p, pv, c, Want::default())?;
        Ok(tape.value(f.sdf).to_vec())
    });
    let mut out = Vec::with_capacity(grid.verts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Differentiable surface on a tape: positions and colors of the crossing
/// vertices, `[E, 3]` each.
#[derive(Clone, Debug)]
pub struct MeshVar {
    pub positions: Var,
    pub colors: Var,
    pub topology: Topology,
}

/// Extracts the surface for `planes` on `tape`. SDF signs come from a
/// gradient-free pass; the heads are then re-evaluated with gradients only
/// at crossing-edge endpoints. Returns `None` for an empty surface.
pub fn extract_var<T: Real>(
    model: &Model<T>,
    tape: &Tape<T>,
    p: &Bound,
    planes: Var,
    grid: &TetGrid,
    deform: bool,
) -> Result<Option<MeshVar>> {
    let sdf = grid_sdf(model, &tape.tensor(planes), grid, 8192)?;
    let topo = topology(grid, &sdf)?;
    if topo.faces.is_empty() {
        return Ok(None);
    }
    let ends = topo.endpoints();
    let local: HashMap<u32, u32> = ends.iter().enumerate().map(|(i, &v)| (v, i as u32)).collect();
    let pts: Vec<T> = ends.iter().flat_map(|&v| grid.verts[v as usize].map(T::of)).collect();
    let want = Want { color: true, normals: false, deform: deform.then(|| grid.max_offset()) };
    let f = model.heads.eval(tape, p, planes, &pts, want)?;
    let base = tape.constant_vec([ends.len(), 3], pts);
    let pos = match f.deform {
        Some(d) => tape.add(base, d)?,
        None => base,
    };
    let attrs = tape.concat_cols(&[pos, f.color.expect("color requested")])?;
    let edges: Vec<(u32, u32)> = topo.edges.iter().map(|&(a, b)| (local[&a], local[&b])).collect();
    let out = tape.edge_interp(attrs, f.sdf, &edges)?;
    Ok(Some(MeshVar {
        positions: tape.slice_cols(out, 0, 3)?,
        colors: tape.slice_cols(out, 3, 6)?,
        topology: topo,
    }))
}

/// Detached colored mesh for a triplane.
pub fn extract<T: Real>(model: &Model<T>, planes: &Tensor<T>, grid: &TetGrid) -> Result<(Mesh, MeshStats)> {
    let tape = Tape::new();
    let p = model.store.bind_constant(&tape);
    let pv = tape.constant(planes);
    let Some(m) = extract_var(model, &tape, &p, pv, grid, true)? else {
        warn!("extracted mesh is empty: the SDF has no sign change on the grid");
        return Ok((Mesh::default(), MeshStats::default()));
    };
    let to_f32 = |v: Var| -> Vec<[f32; 3]> {
        tape.value(v).chunks(3).map(|c| [c[0].f64() as f32, c[1].f64() as f32, c[2].f64() as f32]).collect()
    };
    let mesh = Mesh { positions: to_f32(m.positions), colors: to_f32(m.colors), faces: m.topology.faces };
    let stats = mesh_stats(&mesh);
    Ok((mesh, stats))
}
