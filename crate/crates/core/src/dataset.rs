//! Compositional desk dataset: a shapes x colors prompt grid with a
//! diagonal holdout, and procedurally rendered target views per prompt.
//!
//! Targets are ray-cast superquadrics lit by a headlight. Each view stores
//! premultiplied diffuse and textureless renders plus a coverage (alpha)
//! image, so a target can be composited over any background and box-
//! downsampled to any divisor of the stored resolution.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{dot, normalize, orbit_eye, ray_box, Camera, Vec3};
use crate::embedding::{strip_direction, Sector};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceError, TargetKey, TargetSource, ViewSnap};
use crate::io::{read_ppm, write_ppm, Image};
use crate::par;
use crate::shading::{Light, Shading, ShadingMode};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// Superquadric `((|x/a|^(2/e2) + |z/c|^(2/e2))^(e2/e1) + |y/b|^(2/e1)) = 1`, y up.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Superquadric {
    /// Semi-axes along x, y, z.
    pub scale: [f64; 3],
    /// Vertical and horizontal roundness exponents.
    pub e1: f64,
    pub e2: f64,
}

impl Superquadric {
    /// Inside-outside function; < 1 inside.
    pub fn inside(&self, p: Vec3) -> f64 {
        let [a, b, c] = self.scale;
        let h = (p[0] / a).abs().powf(2.0 / self.e2) + (p[2] / c).abs().powf(2.0 / self.e2);
        h.powf(self.e2 / self.e1) + (p[1] / b).abs().powf(2.0 / self.e1)
    }

    pub fn bound(&self) -> f64 {
        self.scale.iter().cloned().fold(0.0, f64::max)
    }

    fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let g: Vec3 = std::array::from_fn(|a| {
            let (mut lo, mut hi) = (p, p);
            lo[a] -= h;
            hi[a] += h;
            self.inside(hi) - self.inside(lo)
        });
        normalize(g)
    }

    /// First surface crossing along `o + t d`, by fixed stepping then bisection.
    pub fn hit(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
        let (near, far) = ray_box(o, d, self.bound())?;
        const STEPS: usize = 96;
        let at = |t: f64| -> Vec3 { std::array::from_fn(|a| o[a] + t * d[a]) };
        let mut prev = near;
        if self.inside(at(near)) < 1.0 {
            return Some((near, self.normal(at(near))));
        }
        for i in 1..=STEPS {
            let t = near + (far - near) * i as f64 / STEPS as f64;
            if self.inside(at(t)) < 1.0 {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if self.inside(at(mid)) < 1.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some((hi, self.normal(at(hi))));
            }
            prev = t;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub name: String,
    pub geometry: Superquadric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    pub rgb: [f64; 3],
}

fn sq(name: &str, scale: [f64; 3], e1: f64, e2: f64) -> ShapeSpec {
    ShapeSpec { name: name.into(), geometry: Superquadric { scale, e1, e2 } }
}

/// Shape axis of the grid, in order; an `n`-row grid uses the first `n`.
pub fn shape_catalog() -> Vec<ShapeSpec> {
    vec![
        sq("sphere", [0.6, 0.6, 0.6], 1.0, 1.0),
        sq("cube", [0.48, 0.48, 0.48], 0.2, 0.2),
        sq("cylinder", [0.45, 0.62, 0.45], 0.2, 1.0),
        sq("disc", [0.72, 0.28, 0.72], 1.0, 1.0),
        sq("pillar", [0.3, 0.72, 0.3], 0.5, 0.5),
        sq("octahedron", [0.7, 0.7, 0.7], 1.8, 1.8),
        sq("slab", [0.7, 0.3, 0.45], 0.3, 0.3),
        sq("egg", [0.42, 0.7, 0.42], 1.0, 1.0),
    ]
}

fn color(name: &str, rgb: [f64; 3]) -> ColorSpec {
    ColorSpec { name: name.into(), rgb }
}

/// Attribute axis of the grid.
pub fn color_catalog() -> Vec<ColorSpec> {
    vec![
        color("red", [0.85, 0.15, 0.12]),
        color("green", [0.2, 0.75, 0.25]),
        color("blue", [0.15, 0.3, 0.9]),
        color("yellow", [0.92, 0.85, 0.2]),
        color("purple", [0.6, 0.25, 0.75]),
        color("orange", [0.95, 0.55, 0.1]),
        color("white", [0.92, 0.92, 0.92]),
        color("teal", [0.1, 0.65, 0.65]),
    ]
}

pub fn prompt_text(shape: &str, color: &str) -> String {
    format!("a {color} {shape}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub azimuth_bins: usize,
    pub elevations: Vec<f64>,
    /// Extra view above the overhead threshold, degrees; `None` disables it.
    pub overhead_elevation: Option<f64>,
    /// Vertical FOV of the stage-1 and stage-2 view sets, degrees.
    pub fov: [f64; 2],
    pub distance: f64,
    /// Azimuth jitter as a fraction of the bin width, drawn from the seed.
    pub jitter: f64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            azimuth_bins: 8,
            elevations: vec![0.0, 30.0],
            overhead_elevation: Some(75.0),
            fov: [55.0, 35.0],
            distance: 3.0,
            jitter: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub shapes: usize,
    pub colors: usize,
    /// Stored target resolution (square).
    pub resolution: usize,
    pub seed: u64,
    pub views: ViewConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { shapes: 4, colors: 4, resolution: 128, seed: 0, views: ViewConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Seen,
    Unseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt: String,
    pub shape: usize,
    pub color: usize,
    pub split: Split,
    /// Directory of this prompt's images, relative to the dataset root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub index: usize,
    /// 1 or 2: which stage's FOV band this view belongs to.
    pub stage: u8,
    pub azimuth: f64,
    pub elevation: f64,
    pub fov: f64,
    pub sector: Sector,
}

impl ViewSpec {
    pub fn camera(&self, distance: f64, width: usize, height: usize) -> Camera {
        Camera::orbit(self.azimuth, self.elevation, distance, self.fov, width, height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub shapes: Vec<ShapeSpec>,
    pub colors: Vec<ColorSpec>,
    pub prompts: Vec<PromptEntry>,
    pub views: Vec<ViewSpec>,
    /// Lighting used for every target.
    pub light: String,
}

impl Manifest {
    pub fn seen(&self) -> Vec<String> {
        self.split(Split::Seen)
    }

    pub fn unseen(&self) -> Vec<String> {
        self.split(Split::Unseen)
    }

    fn split(&self, s: Split) -> Vec<String> {
        self.prompts.iter().filter(|p| p.split == s).map(|p| p.prompt.clone()).collect()
    }

    pub fn prompt(&self, prompt: &str) -> Option<&PromptEntry> {
        let base = strip_direction(prompt);
        self.prompts.iter().find(|p| p.prompt == base)
    }

    pub fn stage_views(&self, stage: u8) -> impl Iterator<Item = &ViewSpec> {
        self.views.iter().filter(move |v| v.stage == stage)
    }

    /// Nearest stored view of `stage` to a camera direction, by angle.
    pub fn snap(&self, stage: u8, azimuth: f64, elevation: f64) -> Option<&ViewSpec> {
        let d = orbit_eye(azimuth, elevation, 1.0);
        self.stage_views(stage).max_by(|a, b| {
            let da = dot(d, orbit_eye(a.azimuth, a.elevation, 1.0));
            let db = dot(d, orbit_eye(b.azimuth, b.elevation, 1.0));
            da.total_cmp(&db).then(b.index.cmp(&a.index))
        })
    }
}

/// Seen/unseen prompt grid: the holdout is the diagonal `shape == color`.
pub fn prompt_grid(shapes: usize, colors: usize) -> Result<Vec<PromptEntry>> {
    let (sc, cc) = (shape_catalog(), color_catalog());
    if shapes < 2 || colors < 2 || shapes > sc.len() || colors > cc.len() {
        return Err(Error::Config(format!(
            "grid {shapes}x{colors} outside 2..={}x2..={}",
            sc.len(),
            cc.len()
        )));
    }
    let mut out = Vec::new();
    for (s, shape) in sc.iter().take(shapes).enumerate() {
        for (c, col) in cc.iter().take(colors).enumerate() {
            out.push(PromptEntry {
                prompt: prompt_text(&shape.name, &col.name),
                shape: s,
                color: c,
                split: if s == c { Split::Unseen } else { Split::Seen },
                dir: format!("{}_{}", col.name, shape.name),
            });
        }
    }
    Ok(out)
}

pub fn view_set(cfg: &ViewConfig, seed: u64) -> Result<Vec<ViewSpec>> {
    if cfg.azimuth_bins == 0 || cfg.elevations.is_empty() {
        return Err(Error::Config("view set needs azimuth bins and elevations".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7669_6577);
    let bin = 360.0 / cfg.azimuth_bins as f64;
    let mut views = Vec::new();
    for (si, &fov) in cfg.fov.iter().enumerate() {
        let stage = si as u8 + 1;
        for &el in &cfg.elevations {
            for k in 0..cfg.azimuth_bins {
                let j = if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..cfg.jitter) * bin } else { 0.0 };
                let az = (k as f64 * bin + j).rem_euclid(360.0);
                views.push(ViewSpec {
                    index: views.len(),
                    stage,
                    azimuth: az,
                    elevation: el,
                    fov,
                    sector: Sector::classify(az, el),
                });
            }
        }
        if let Some(el) = cfg.overhead_elevation {
            views.push(ViewSpec { index: views.len(), stage, azimuth: 0.0, elevation: el, fov, sector: Sector::classify(0.0, el) });
        }
    }
    Ok(views)
}

/// Per-pixel surface normal (or `None` on a miss) of one shape in one view.
pub fn cast(shape: &Superquadric, cam: &Camera) -> Result<Vec<Option<Vec3>>> {
    let rays = cam.make_rays()?;
    Ok(par::map_range(rays.len(), |i| shape.hit(rays.origin, rays.dir(i)).map(|(_, n)| n)))
}

/// Premultiplied shaded image and coverage for one prompt in one view.
pub fn shade_target(normals: &[Option<Vec3>], albedo: [f64; 3], cam: &Camera, mode: ShadingMode) -> Result<(Image, Image)> {
    let sh = Shading { mode, light: Light::headlight(cam) };
    let mut rgb = Vec::with_capacity(normals.len() * 3);
    let mut alpha = Vec::with_capacity(normals.len() * 3);
    for n in normals {
        match n {
            Some(n) => {
                rgb.extend(sh.shade_scalar(albedo, *n).map(|v| v as f32));
                alpha.extend([1.0f32; 3]);
            }
            None => {
                rgb.extend([0.0f32; 3]);
                alpha.extend([0.0f32; 3]);
            }
        }
    }
    Ok((Image::new(cam.width, cam.height, rgb)?, Image::new(cam.width, cam.height, alpha)?))
}

fn mode_name(m: ShadingMode) -> &'static str {
    match m {
        ShadingMode::Diffuse => "diffuse",
        ShadingMode::Textureless => "textureless",
    }
}

pub fn image_name(view: usize, kind: &str) -> String {
    format!("v{view:03}_{kind}.ppm")
}

/// Renders and writes the whole dataset under `root`.
pub fn build(cfg: &DatasetConfig, root: &Path) -> Result<Manifest> {
    if cfg.resolution == 0 {
        return Err(Error::Config("dataset resolution must be positive".into()));
    }
    let prompts = prompt_grid(cfg.shapes, cfg.colors)?;
    let views = view_set(&cfg.views, cfg.seed)?;
    let shapes: Vec<ShapeSpec> = shape_catalog().into_iter().take(cfg.shapes).collect();
    let colors: Vec<ColorSpec> = color_catalog().into_iter().take(cfg.colors).collect();
    for p in &prompts {
        let d = root.join(&p.dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let res = cfg.resolution;
    for v in &views {
        let cam = v.camera(cfg.views.distance, res, res);
        for (si, shape) in shapes.iter().enumerate() {
            let normals = cast(&shape.geometry, &cam)?;
            for p in prompts.iter().filter(|p| p.shape == si) {
                let dir = root.join(&p.dir);
                let mut alpha = None;
                for mode in [ShadingMode::Diffuse, ShadingMode::Textureless] {
                    let (img, a) = shade_target(&normals, colors[p.color].rgb, &cam, mode)?;
                    write_ppm(&img, &dir.join(image_name(v.index, mode_name(mode))))?;
                    alpha = Some(a);
                }
                write_ppm(&alpha.expect("two modes rendered"), &dir.join(image_name(v.index, "alpha")))?;
            }
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        shapes,
        colors,
        prompts,
        views,
        light: "headlight".into(),
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Format(format!("manifest version {} (expected {MANIFEST_VERSION})", m.version)));
    }
    Ok(m)
}

/// Number of views per directional sector and stage for each prompt.
pub fn coverage(m: &Manifest) -> HashMap<(String, u8, Sector), usize> {
    let mut out = HashMap::new();
    for p in &m.prompts {
        for v in &m.views {
            *out.entry((p.prompt.clone(), v.stage, v.sector)).or_insert(0) += 1;
        }
    }
    out
}

/// Prompts/stages lacking a view in some sector, or whose images are missing on disk.
pub fn audit(m: &Manifest, root: &Path) -> Vec<String> {
    let cov = coverage(m);
    let mut gaps = Vec::new();
    for p in &m.prompts {
        for stage in [1u8, 2] {
            for s in Sector::ALL {
                if cov.get(&(p.prompt.clone(), stage, s)).copied().unwrap_or(0) == 0 {
                    gaps.push(format!("{} stage {stage}: no {s:?} view", p.prompt));
                }
            }
        }
        for v in &m.views {
            for kind in ["diffuse", "textureless", "alpha"] {
                let f = root.join(&p.dir).join(image_name(v.index, kind));
                if !f.is_file() {
                    gaps.push(format!("missing {}", f.display()));
                }
            }
        }
    }
    gaps
}

type CacheKey = (usize, usize, ShadingMode, [u64; 3], usize, usize);

/// Dataset on disk with a cache of composited, downsampled targets.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    cache: RwLock<HashMap<CacheKey, Arc<Image>>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
        }
        let manifest = read_manifest(root)?;
        Ok(Self { root: root.to_path_buf(), manifest, cache: RwLock::new(HashMap::new()) })
    }

    pub fn view(&self, index: usize) -> Result<&ViewSpec> {
        self.manifest.views.get(index).ok_or_else(|| Error::Invalid(format!("no view {index}")))
    }

    /// `premultiplied + (1 - alpha) * bg`, box-downsampled to `width x height`.
    pub fn composite(&self, prompt: &str, key: &TargetKey, width: usize, height: usize) -> Result<Arc<Image>> {
        let pi = self
            .manifest
            .prompts
            .iter()
            .position(|p| p.prompt == strip_direction(prompt))
            .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))?;
        self.view(key.view)?;
        let ck = (pi, key.view, key.mode, key.background.map(f64::to_bits), width, height);
        if let Some(img) = self.cache.read().expect("cache lock").get(&ck) {
            return Ok(img.clone());
        }
        let res = self.manifest.config.resolution;
        if width != height || width == 0 || res % width != 0 {
            return Err(Error::Invalid(format!("target size {width}x{height} does not divide {res}")));
        }
        let dir = self.root.join(&self.manifest.prompts[pi].dir);
        let color = read_ppm(&dir.join(image_name(key.view, mode_name(key.mode))))?;
        let alpha = read_ppm(&dir.join(image_name(key.view, "alpha")))?;
        if (color.width, color.height, alpha.width, alpha.height) != (res, res, res, res) {
            return Err(Error::Format(format!("target images in {} are not {res}x{res}", dir.display())));
        }
        let data = color
            .data
            .iter()
            .zip(&alpha.data)
            .enumerate()
            .map(|(i, (&c, &a))| c + (1.0 - a) * key.background[i % 3] as f32)
            .collect();
        let img = Arc::new(Image::new(res, res, data)?.downsample(res / width)?);
        self.cache.write().expect("cache lock").insert(ck, img.clone());
        Ok(img)
    }
}

impl TargetSource for Dataset {
    fn target(&self, prompt: &str, key: &TargetKey, width: usize, height: usize) -> Result<Image, GuidanceError> {
        self.composite(prompt, key, width, height).map(|a| (*a).clone()).map_err(|e| match e {
            Error::UnknownPrompt(p) => GuidanceError::UnknownPrompt(p),
            other => GuidanceError::NoTarget(other.to_string()),
        })
    }

    fn snap(&self, stage: u8, azimuth: f64, elevation: f64) -> Option<ViewSnap> {
        self.manifest
            .snap(stage, azimuth, elevation)
            .map(|v| ViewSnap { view: v.index, azimuth: v.azimuth, elevation: v.elevation, fov: v.fov })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let g = prompt_grid(8, 8).unwrap();
        assert_eq!(g.iter().filter(|p| p.split == Split::Seen).count(), 56);
        assert_eq!(g.iter().filter(|p| p.split == Split::Unseen).count(), 8);
        let g = prompt_grid(4, 4).unwrap();
        assert_eq!(g.iter().filter(|p| p.split == Split::Seen).count(), 12);
        assert_eq!(g.iter().filter(|p| p.split == Split::Unseen).count(), 4);
        assert!(prompt_grid(1, 4).is_err());
        let mut names: Vec<_> = g.iter().map(|p| p.prompt.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn views_cover_every_sector() {
        let v = view_set(&ViewConfig::default(), 3).unwrap();
        assert_eq!(v.len(), 2 * (8 * 2 + 1));
        for stage in [1, 2] {
            for s in Sector::ALL {
                assert!(v.iter().any(|x| x.stage == stage && x.sector == s), "{stage} {s:?}");
            }
        }
    }

    #[test]
    fn sphere_hit_matches_analytic() {
        let s = Superquadric { scale: [0.6; 3], e1: 1.0, e2: 1.0 };
        let (t, n) = s.hit([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((t - 2.4).abs() < 1e-9);
        assert!((n[2] - 1.0).abs() < 1e-6);
        assert!(s.hit([0.0, 0.7, 3.0], [0.0, 0.0, -1.0]).is_none());
        // off-axis ray: chord entry at sqrt(r^2 - y^2)
        let (t, _) = s.hit([0.0, 0.3, 3.0], [0.0, 0.0, -1.0]).unwrap();
        assert!((t - (3.0 - (0.36f64 - 0.09).sqrt())).abs() < 1e-9);
    }

    #[test]
    fn cube_silhouette_is_square() {
        let s = Superquadric { scale: [0.5; 3], e1: 0.1, e2: 0.1 };
        assert!(s.hit([0.45, 0.45, 3.0], [0.0, 0.0, -1.0]).is_some());
        assert!(s.hit([0.52, 0.0, 3.0], [0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn snap_picks_nearest() {
        let cfg = DatasetConfig::default();
        let m = Manifest {
            version: 1,
            config: cfg.clone(),
            shapes: vec![],
            colors: vec![],
            prompts: vec![],
            views: view_set(&ViewConfig { jitter: 0.0, ..cfg.views.clone() }, 0).unwrap(),
            light: "headlight".into(),
        };
        let v = m.snap(2, 93.0, 5.0).unwrap();
        assert_eq!((v.stage, v.azimuth, v.elevation), (2, 90.0, 0.0));
        let v = m.snap(1, 10.0, 80.0).unwrap();
        assert_eq!(v.sector, Sector::Overhead);
    }

    #[test]
    fn build_open_composite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            shapes: 2,
            colors: 2,
            resolution: 16,
            views: ViewConfig { azimuth_bins: 4, elevations: vec![10.0], ..ViewConfig::default() },
            ..DatasetConfig::default()
        };
        let m = build(&cfg, dir.path()).unwrap();
        assert!(audit(&m, dir.path()).is_empty(), "{:?}", audit(&m, dir.path()));
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest, m);
        let key = TargetKey { view: 0, mode: ShadingMode::Diffuse, background: [1.0; 3] };
        let full = ds.composite("a red sphere, front view", &key, 16, 16).unwrap();
        // corners are background, the center is lit red under a headlight
        assert_eq!(full.pixel(0, 0), [1.0; 3]);
        let c = full.pixel(8, 8);
        assert!(c[0] > 0.7 && c[1] < 0.3, "{c:?}");
        let small = ds.composite("a red sphere", &key, 4, 4).unwrap();
        assert_eq!(*small, full.downsample(4).unwrap());
        assert!(matches!(ds.composite("a mauve cone", &key, 4, 4), Err(Error::UnknownPrompt(_))));
        assert!(ds.composite("a red sphere", &key, 5, 5).is_err());
    }
}
