//! Binary PPM images and binary little-endian PLY meshes.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width x 3` RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", format!("{} values for {width}x{height}", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self { width, height, data: rgb.repeat(width * height) }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape("mse", format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Peak signal-to-noise ratio for unit peak, capped at 100 dB.
    pub fn psnr(&self, other: &Image) -> Result<f64> {
        let m = self.mse(other)?;
        Ok(if m <= 1e-10 { 100.0 } else { -10.0 * m.log10() })
    }

    /// Box-filter downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::Invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let inv = 1.0 / (factor * factor) as f32;
        let mut data = vec![0.0; w * h * 3];
        for r in 0..self.height {
            for c in 0..self.width {
                let o = 3 * ((r / factor) * w + c / factor);
                let i = 3 * (r * self.width + c);
                for k in 0..3 {
                    data[o + k] += self.data[i + k] * inv;
                }
            }
        }
        Image::new(w, h, data)
    }
}

/// `round(255 v)` after clamping to [0, 1].
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut toks = Vec::new();
    let mut i = 0;
    while toks.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PPM header".into()));
        }
        toks.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    Ok((toks, i + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (t, off) = header_tokens(bytes, 4)?;
    if t[0] != "P6" {
        return Err(Error::Format(format!("not a binary PPM (magic {:?})", t[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
    let (w, h, max) = (parse(&t[1])?, parse(&t[2])?, parse(&t[3])?);
    if max != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {max}")));
    }
    let body = bytes.get(off..off + w * h * 3).ok_or_else(|| Error::Format("truncated PPM raster".into()))?;
    Image::new(w, h, body.iter().map(|&b| b as f32 / 255.0).collect())
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Indexed triangle mesh with per-vertex colors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub positions: Vec<[f32; 3]>,
    pub colors: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
}

pub fn encode_ply(mesh: &Mesh) -> Vec<u8> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\n\
         property float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.positions.len(),
        mesh.faces.len()
    )
    .into_bytes();
    for (p, c) in mesh.positions.iter().zip(&mesh.colors) {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(c.iter().map(|&v| quantize(v)));
    }
    for f in &mesh.faces {
        out.push(3);
        for &i in f {
            out.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    out
}

pub fn write_ply(mesh: &Mesh, path: &Path) -> Result<()> {
    if mesh.positions.len() != mesh.colors.len() {
        return Err(Error::Invalid("mesh colors do not match vertices".into()));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_ply(mesh)).map_err(|e| Error::io(path, e))
}

/// Reads exactly the layout [`encode_ply`] writes.
pub fn decode_ply(bytes: &[u8]) -> Result<Mesh> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let (mut nv, mut nf) = (None, None);
    loop {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))? == 0 {
            return Err(Error::Format("PLY header has no end_header".into()));
        }
        let l = line.trim_end();
        if let Some(n) = l.strip_prefix("element vertex ") {
            nv = n.parse::<usize>().ok();
        } else if let Some(n) = l.strip_prefix("element face ") {
            nf = n.parse::<usize>().ok();
        } else if l == "end_header" {
            break;
        } else if l.starts_with("format") && l != "format binary_little_endian 1.0" {
            return Err(Error::Format(format!("unsupported PLY format {l:?}")));
        }
    }
    let (nv, nf) = nv.zip(nf).ok_or_else(|| Error::Format("PLY header lacks element counts".into()))?;
    let mut mesh = Mesh::default();
    let mut buf = [0u8; 15];
    let truncated = |_| Error::Format("truncated PLY body".into());
    for _ in 0..nv {
        reader.read_exact(&mut buf).map_err(truncated)?;
        let f = |k: usize| f32::from_le_bytes(buf[4 * k..4 * k + 4].try_into().unwrap());
        mesh.positions.push([f(0), f(1), f(2)]);
        mesh.colors.push([buf[12], buf[13], buf[14]].map(|b| b as f32 / 255.0));
    }
    let mut fb = [0u8; 13];
    for _ in 0..nf {
        reader.read_exact(&mut fb).map_err(truncated)?;
        if fb[0] != 3 {
            return Err(Error::Format(format!("non-triangle face with {} indices", fb[0])));
        }
        let i = |k: usize| i32::from_le_bytes(fb[1 + 4 * k..5 + 4 * k].try_into().unwrap()) as u32;
        mesh.faces.push([i(0), i(1), i(2)]);
    }
    Ok(mesh)
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    decode_ply(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
