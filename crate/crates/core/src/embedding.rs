//! Deterministic prompt embeddings.
//!
//! Each whitespace-separated word is hashed to a seed that draws a unit-norm
//! Gaussian row, so a prompt maps to an `L_e x C_e` token matrix whose rows
//! beyond the word count are zero padding. Any externally produced embedding
//! matrix can be loaded instead through [`PromptEmbedding::read_file`].

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    /// Maximum token rows (L_e).
    pub max_tokens: usize,
    /// Channels per token (C_e).
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { max_tokens: 16, dim: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    pub prompt: String,
    pub dim: usize,
    /// `max_tokens x dim`, row-major.
    pub rows: Vec<f32>,
    /// `true` for padding rows (all zero).
    pub pad: Vec<bool>,
}

/// FNV-1a, stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn word_row(word: &str, dim: usize, seed: u64) -> Vec<f32> {
    let key = fnv1a(word.to_lowercase().as_bytes()) ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v.into_iter().map(|x| x as f32).collect()
}

pub fn normalize_prompt(prompt: &str) -> String {
    prompt.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn embed(prompt: &str, cfg: &EmbedConfig) -> Result<PromptEmbedding> {
    let text = normalize_prompt(prompt);
    if text.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if cfg.max_tokens == 0 || cfg.dim == 0 {
        return Err(Error::Invalid("embedding needs max_tokens > 0 and dim > 0".into()));
    }
    let words: Vec<&str> = text.split(' ').collect();
    if words.len() > cfg.max_tokens {
        log::warn!(
            "prompt {text:?} has {} words; keeping the first {}",
            words.len(),
            cfg.max_tokens
        );
    }
    let mut rows = vec![0.0f32; cfg.max_tokens * cfg.dim];
    let mut pad = vec![true; cfg.max_tokens];
    for (i, w) in words.iter().take(cfg.max_tokens).enumerate() {
        rows[i * cfg.dim..(i + 1) * cfg.dim].copy_from_slice(&word_row(w, cfg.dim, cfg.seed));
        pad[i] = false;
    }
    Ok(PromptEmbedding { prompt: text, dim: cfg.dim, rows, pad })
}

impl PromptEmbedding {
    pub fn max_tokens(&self) -> usize {
        self.pad.len()
    }

    pub fn token_count(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Non-pad rows, in order, as a `tokens x dim` buffer.
    pub fn tokens(&self) -> Vec<f32> {
        (0..self.max_tokens())
            .filter(|&i| !self.pad[i])
            .flat_map(|i| self.row(i).iter().copied())
            .collect()
    }

    /// Mean over non-pad rows.
    pub fn mean(&self) -> Result<Vec<f32>> {
        let n = self.token_count();
        if n == 0 {
            return Err(Error::AllPadding);
        }
        let mut acc = vec![0.0f64; self.dim];
        for i in (0..self.max_tokens()).filter(|&i| !self.pad[i]) {
            acc.iter_mut().zip(self.row(i)).for_each(|(a, &v)| *a += v as f64);
        }
        Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
    }

    /// Builds an embedding from an explicit matrix; all-zero rows count as padding.
    pub fn from_matrix(prompt: &str, max_tokens: usize, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != max_tokens * dim {
            return Err(Error::shape(
                "embedding",
                format!("{max_tokens}x{dim} needs {} values, got {}", max_tokens * dim, rows.len()),
            ));
        }
        let pad = rows.chunks(dim.max(1)).map(|r| r.iter().all(|&v| v == 0.0)).collect();
        Ok(Self { prompt: normalize_prompt(prompt), dim, rows, pad })
    }

    /// Reads the binary import format: `u32 L_e`, `u32 C_e` (little endian),
    /// then `L_e * C_e` little-endian `f32` values, row-major.
    pub fn read_file(prompt: &str, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(prompt, &bytes)
    }

    pub fn decode(prompt: &str, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("embedding file shorter than its header".into()));
        }
        let l = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != l * c * 4 {
            return Err(Error::Format(format!(
                "embedding header says {l}x{c}, payload has {} bytes",
                body.len()
            )));
        }
        let rows = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_matrix(prompt, l, c, rows)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.rows.len() * 4);
        out.extend_from_slice(&(self.max_tokens() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.encode()))
            .map_err(|e| Error::io(path, e))
    }
}

pub const FRONT_VIEW: &str = ", front view";
pub const SIDE_VIEW: &str = ", side view";
pub const BACK_VIEW: &str = ", back view";
pub const OVERHEAD_VIEW: &str = ", overhead view";

pub const VIEW_SUFFIXES: [&str; 4] = [FRONT_VIEW, SIDE_VIEW, BACK_VIEW, OVERHEAD_VIEW];

/// Elevation above which a view counts as overhead, degrees.
pub const OVERHEAD_ELEVATION: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Front,
    Side,
    Back,
    Overhead,
}

impl Sector {
    pub const ALL: [Sector; 4] = [Sector::Front, Sector::Side, Sector::Back, Sector::Overhead];

    /// Front is `|az| < 45`, side `45..=135`, back beyond; overhead wins above 60 deg elevation.
    pub fn classify(azimuth_deg: f64, elevation_deg: f64) -> Sector {
        if elevation_deg > OVERHEAD_ELEVATION {
            return Sector::Overhead;
        }
        let mut az = azimuth_deg.rem_euclid(360.0);
        if az > 180.0 {
            az -= 360.0;
        }
        let a = az.abs();
        if a < 45.0 {
            Sector::Front
        } else if a <= 135.0 {
            Sector::Side
        } else {
            Sector::Back
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Sector::Front => FRONT_VIEW,
            Sector::Side => SIDE_VIEW,
            Sector::Back => BACK_VIEW,
            Sector::Overhead => OVERHEAD_VIEW,
        }
    }
}

pub fn directional_prompt(prompt: &str, azimuth_deg: f64, elevation_deg: f64) -> String {
    format!("{prompt}{}", Sector::classify(azimuth_deg, elevation_deg).suffix())
}

/// Removes a trailing directional suffix, if any.
pub fn strip_direction(prompt: &str) -> &str {
    VIEW_SUFFIXES
        .iter()
        .find_map(|s| prompt.strip_suffix(s))
        .unwrap_or(prompt)
}
