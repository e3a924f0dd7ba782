//! Lambertian shading shared by both renderers and the target generator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{dot, normalize, sub, Camera, Vec3};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadingMode {
    /// Albedo replaced by white.
    Textureless,
    Diffuse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Light {
    /// Unit vector from the surface toward the light.
    pub dir: Vec3,
    pub ambient: f64,
}

pub const AMBIENT: f64 = 0.1;

impl Light {
    /// Headlight: the light sits at the camera.
    pub fn headlight(cam: &Camera) -> Self {
        Self { dir: normalize(sub(cam.eye, cam.look_at)), ambient: AMBIENT }
    }

    /// Uniform direction on the hemisphere facing the camera.
    pub fn random(cam: &Camera, rng: &mut impl Rng) -> Self {
        let toward = normalize(sub(cam.eye, cam.look_at));
        let mut d: Vec3 = std::array::from_fn(|_| StandardNormal.sample(rng));
        if dot(d, toward) < 0.0 {
            d = [-d[0], -d[1], -d[2]];
        }
        Self { dir: normalize(d), ambient: AMBIENT }
    }

    /// `ambient + (1 - ambient) * max(0, n . l)`
    pub fn intensity(&self, n: Vec3) -> f64 {
        self.ambient + (1.0 - self.ambient) * dot(n, self.dir).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shading {
    pub mode: ShadingMode,
    pub light: Light,
}

impl Shading {
    pub fn shade_scalar(&self, albedo: Vec3, normal: Vec3) -> Vec3 {
        let k = self.light.intensity(normal);
        match self.mode {
            ShadingMode::Textureless => [k; 3],
            ShadingMode::Diffuse => albedo.map(|c| c * k),
        }
    }

    /// Shaded colors `[n, 3]` from albedo `[n, 3]` and unit normals `[n, 3]`.
    /// Albedo may be omitted in textureless mode.
    pub fn shade<T: Real>(&self, tape: &Tape<T>, albedo: Option<Var>, normal: Var) -> Result<Var> {
        let l = tape.constant_vec([3, 1], self.light.dir.iter().map(|&v| T::of(v)).collect());
        let ndl = tape.relu(tape.matmul(normal, l)?);
        let amb = T::of(self.light.ambient);
        let k = tape.add_scalar(tape.scale(ndl, T::one() - amb), amb);
        match self.mode {
            ShadingMode::Textureless => tape.concat_cols(&[k, k, k]),
            ShadingMode::Diffuse => {
                let albedo = albedo.ok_or_else(|| Error::Invalid("diffuse shading needs albedo".into()))?;
                let n = tape.shape(k)[0];
                tape.mul_col(albedo, tape.reshape(k, [n])?)
            }
        }
    }
}
