//! Text-to-triplane network.
//!
//! The averaged prompt embedding is linearly projected to three `C x R x R`
//! feature planes (XY, XZ, YZ), then refined by a stack of text-conditioned
//! blocks. Each block runs, in order: cross-attention from plane pixels to
//! prompt tokens, a 3D-aware convolution over each pixel concatenated with
//! the axis-aligned means of the other two planes, and a ConvNeXt-style
//! depthwise 7x7 plus channel MLP, with residuals around each and around the
//! whole block.
//!
//! Plane layout is `[3, C, R, R]`. Plane 0 is indexed `(x, y)`, plane 1
//! `(x, z)`, plane 2 `(y, z)`; the first index is the row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::PromptEmbedding;
use crate::error::{Error, Result};
use crate::params::{Bound, Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Feature channels per plane (C_T).
    pub channels: usize,
    /// Plane height and width (H_T = W_T).
    pub resolution: usize,
    /// Number of triplane ConvNeXt blocks (N).
    pub blocks: usize,
    /// Cross-attention heads.
    pub heads: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { channels: 16, resolution: 32, blocks: 2, heads: 4 }
    }
}

/// A generated triplane, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<T> {
    pub channels: usize,
    pub resolution: usize,
    /// `[3, C, R, R]`.
    pub data: Tensor<T>,
}

impl<T: Real> Triplane<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
            return Err(Error::shape("triplane", format!("{s:?}")));
        }
        Ok(Self { channels: s[1], resolution: s[2], data })
    }

    pub fn at(&self, plane: usize, c: usize, i: usize, j: usize) -> T {
        let r = self.resolution;
        self.data.data()[((plane * self.channels + c) * r + i) * r + j]
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub aware_w: ParamId,
    pub aware_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct TriplaneGenerator {
    pub cfg: GeneratorConfig,
    pub embed_dim: usize,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub blocks: Vec<BlockParams>,
}

/// For plane `p`, the two gathered mean vectors come from
/// `(source plane, reduce along columns?, indexed by pixel row?)`.
/// Reducing along columns gives a per-row mean; otherwise a per-column mean.
const GATHER: [[(usize, bool, bool); 2]; 3] = [
    // XY(x, y): XZ row x, YZ row y
    [(1, true, true), (2, true, false)],
    // XZ(x, z): XY row x, YZ column z
    [(0, true, true), (2, false, false)],
    // YZ(y, z): XY column y, XZ column z
    [(0, false, true), (1, false, false)],
];

impl TriplaneGenerator {
    pub fn new<T: Real>(
        cfg: GeneratorConfig,
        embed_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (c, r) = (cfg.channels, cfg.resolution);
        if c == 0 || r == 0 || embed_dim == 0 {
            return Err(Error::Invalid("generator dimensions must be positive".into()));
        }
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(Error::Invalid(format!(
                "{} attention heads do not divide {c} channels",
                cfg.heads
            )));
        }
        let g = Group::Generator;
        let out = 3 * c * r * r;
        let proj_w = store.uniform("gen.proj.w", g, &[embed_dim, out], embed_dim, rng);
        let proj_b = store.zeros("gen.proj.b", g, &[out]);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let n = |s: &str| format!("gen.block{i}.{s}");
            let q_w = store.uniform(n("attn.q.w"), g, &[c, c], c, rng);
            let q_b = store.zeros(n("attn.q.b"), g, &[c]);
            let k_w = store.uniform(n("attn.k.w"), g, &[embed_dim, c], embed_dim, rng);
            let k_b = store.zeros(n("attn.k.b"), g, &[c]);
            let v_w = store.uniform(n("attn.v.w"), g, &[embed_dim, c], embed_dim, rng);
            let v_b = store.zeros(n("attn.v.b"), g, &[c]);
            let o_w = store.zeros(n("attn.o.w"), g, &[c, c]);
            let o_b = store.zeros(n("attn.o.b"), g, &[c]);
            // Scaled-down rather than zero: a zero conv under ReLU has no gradient.
            let fan = 3 * c * 9;
            let bound = 0.1 / (fan as f64).sqrt();
            let aware = Tensor::from_fn(vec![3 * c, 3 * c, 3, 3], |_| T::of(rng.gen_range(-bound..bound)));
            let aware_w = store.add(n("aware.w"), g, aware);
            let aware_b = store.zeros(n("aware.b"), g, &[3 * c]);
            let dw_w = store.zeros(n("ffn.dw.w"), g, &[3 * c, 1, 7, 7]);
            let dw_b = store.zeros(n("ffn.dw.b"), g, &[3 * c]);
            let ff1_w = store.uniform(n("ffn.fc1.w"), g, &[3 * 4 * c, c, 1, 1], c, rng);
            let ff1_b = store.zeros(n("ffn.fc1.b"), g, &[3 * 4 * c]);
            let ff2_w = store.zeros(n("ffn.fc2.w"), g, &[3 * c, 4 * c, 1, 1]);
            let ff2_b = store.zeros(n("ffn.fc2.b"), g, &[3 * c]);
            blocks.push(BlockParams {
                q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, aware_w, aware_b, dw_w, dw_b, ff1_w,
                ff1_b, ff2_w, ff2_b,
            });
        }
        Ok(Self { cfg, embed_dim, proj_w, proj_b, blocks })
    }

    fn plane_shape(&self) -> Vec<usize> {
        let (c, r) = (self.cfg.channels, self.cfg.resolution);
        vec![3, c, r, r]
    }

    /// Affine map of the mean embedding, reshaped to `[3, C, R, R]`.
    pub fn project<T: Real>(&self, tape: &Tape<T>, p: &Bound, mean: &[f32]) -> Result<Var> {
        if mean.len() != self.embed_dim {
            return Err(Error::shape(
                "project",
                format!("embedding width {} vs {}", mean.len(), self.embed_dim),
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mean embedding".into()));
        }
        let e = tape.constant_vec([1, self.embed_dim], mean.iter().map(|&v| T::of(v as f64)).collect());
        let y = tape.linear(e, p.get(self.proj_w), Some(p.get(self.proj_b)))?;
        tape.reshape(y, self.plane_shape())
    }

    /// Residual of multi-head cross-attention: every plane pixel queries the
    /// non-pad prompt tokens.
    pub fn cross_attention<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        block: &BlockParams,
        x: Var,
        emb: &PromptEmbedding,
    ) -> Result<Var> {
        let (c, r) = (self.cfg.channels, self.cfg.resolution);
        let tokens = emb.tokens();
        let l = emb.token_count();
        if l == 0 {
            return Err(Error::AllPadding);
        }
        if emb.dim != self.embed_dim {
            return Err(Error::shape("cross_attention", format!("embedding width {}", emb.dim)));
        }
        let e = tape.constant_vec([l, self.embed_dim], tokens.iter().map(|&v| T::of(v as f64)).collect());
        let flat = tape.reshape(x, [3, c, r * r])?;
        let pix = tape.transpose(flat)?;
        let pix = tape.reshape(pix, [3 * r * r, c])?;
        let q = tape.linear(pix, p.get(block.q_w), Some(p.get(block.q_b)))?;
        let k = tape.linear(e, p.get(block.k_w), Some(p.get(block.k_b)))?;
        let v = tape.linear(e, p.get(block.v_w), Some(p.get(block.v_b)))?;
        let a = tape.attention(q, k, v, self.cfg.heads)?;
        let o = tape.linear(a, p.get(block.o_w), Some(p.get(block.o_b)))?;
        let o = tape.reshape(o, [3, r * r, c])?;
        let o = tape.transpose(o)?;
        tape.reshape(o, self.plane_shape())
    }

    /// Residual of the 3D-aware convolution, `relu(conv3x3(gather(x)))`.
    pub fn aware3d_conv<T: Real>(&self, tape: &Tape<T>, p: &Bound, block: &BlockParams, x: Var) -> Result<Var> {
        let (c, r) = (self.cfg.channels, self.cfg.resolution);
        let g = aware3d_gather(tape, x)?;
        let g = tape.reshape(g, [1, 9 * c, r, r])?;
        let y = tape.conv2d(g, p.get(block.aware_w), Some(p.get(block.aware_b)), 3, 1)?;
        let y = tape.relu(y);
        tape.reshape(y, self.plane_shape())
    }

    /// Residual of the ConvNeXt feed-forward part: a depthwise 7x7 step with
    /// its own residual followed by a per-plane channel MLP `C -> 4C -> C`.
    pub fn convnext_ffn<T: Real>(&self, tape: &Tape<T>, p: &Bound, block: &BlockParams, x: Var) -> Result<Var> {
        let (c, r) = (self.cfg.channels, self.cfg.resolution);
        let xi = tape.reshape(x, [1, 3 * c, r, r])?;
        let dw = tape.conv2d(xi, p.get(block.dw_w), Some(p.get(block.dw_b)), 3 * c, 3)?;
        let x1 = tape.add(xi, dw)?;
        let h = tape.conv2d(x1, p.get(block.ff1_w), Some(p.get(block.ff1_b)), 3, 0)?;
        let h = tape.gelu(h);
        let m = tape.conv2d(h, p.get(block.ff2_w), Some(p.get(block.ff2_b)), 3, 0)?;
        let res = tape.add(dw, m)?;
        tape.reshape(res, self.plane_shape())
    }

    /// One block: `inp + (x + ca; + relu(aware); + ffn)`.
    pub fn block<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        block: &BlockParams,
        x: Var,
        emb: &PromptEmbedding,
    ) -> Result<Var> {
        let inp = x;
        let ca = self.cross_attention(tape, p, block, x, emb)?;
        let x = tape.add(x, ca)?;
        let aw = self.aware3d_conv(tape, p, block, x)?;
        let x = tape.add(x, aw)?;
        let ff = self.convnext_ffn(tape, p, block, x)?;
        let x = tape.add(x, ff)?;
        tape.add(inp, x)
    }

    pub fn generate<T: Real>(&self, tape: &Tape<T>, p: &Bound, emb: &PromptEmbedding) -> Result<Var> {
        let mean = emb.mean()?;
        let mut x = self.project(tape, p, &mean)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = self.block(tape, p, block, x, emb)?;
            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("triplane block {i}")));
            }
        }
        Ok(x)
    }
}

/// Per-plane row means (`[3][C][R]`) and column means of a `[3, C, R, R]` buffer.
fn axis_means<T: Real>(x: &[T], c: usize, r: usize) -> (Vec<T>, Vec<T>) {
    let inv = T::one() / T::of(r as f64);
    let mut rows = vec![T::zero(); 3 * c * r];
    let mut cols = vec![T::zero(); 3 * c * r];
    for pc in 0..3 * c {
        let plane = &x[pc * r * r..(pc + 1) * r * r];
        for i in 0..r {
            for j in 0..r {
                let v = plane[i * r + j];
                rows[pc * r + i] += v;
                cols[pc * r + j] += v;
            }
        }
    }
    rows.iter_mut().chain(cols.iter_mut()).for_each(|v| *v *= inv);
    (rows, cols)
}

/// Concatenates every pixel's features with the two axis-aligned mean
/// vectors from the other planes: `[3, C, R, R] -> [3, 3C, R, R]`.
pub fn aware3d_gather<T: Real>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 || s[0] != 3 || s[2] != s[3] {
        return Err(Error::shape("aware3d_gather", format!("{s:?}")));
    }
    let (c, r) = (s[1], s[2]);
    let vx = tape.value(x);
    let (rows, cols) = axis_means(&vx, c, r);
    let rr = r * r;
    let mut out = vec![T::zero(); 3 * 3 * c * rr];
    for p in 0..3 {
        let dst = &mut out[p * 3 * c * rr..(p + 1) * 3 * c * rr];
        dst[..c * rr].copy_from_slice(&vx[p * c * rr..(p + 1) * c * rr]);
        for (slot, &(src, per_row, by_row)) in GATHER[p].iter().enumerate() {
            let means = if per_row { &rows } else { &cols };
            for ch in 0..c {
                let m = &means[(src * c + ch) * r..(src * c + ch + 1) * r];
                let d = &mut dst[((1 + slot) * c + ch) * rr..((1 + slot) * c + ch + 1) * rr];
                for i in 0..r {
                    for j in 0..r {
                        d[i * r + j] = m[if by_row { i } else { j }];
                    }
                }
            }
        }
    }
    Ok(tape.push(out, vec![3, 3 * c, r, r], &[x], move |g, sink| {
        let Some(d) = sink.get(0) else { return };
        let inv = T::one() / T::of(r as f64);
        let mut grow = vec![T::zero(); 3 * c * r];
        let mut gcol = vec![T::zero(); 3 * c * r];
        for p in 0..3 {
            let gp = &g[p * 3 * c * rr..(p + 1) * 3 * c * rr];
            d[p * c * rr..(p + 1) * c * rr]
                .iter_mut()
                .zip(&gp[..c * rr])
                .for_each(|(d, &g)| *d += g);
            for (slot, &(src, per_row, by_row)) in GATHER[p].iter().enumerate() {
                let acc = if per_row { &mut grow } else { &mut gcol };
                for ch in 0..c {
                    let gs = &gp[((1 + slot) * c + ch) * rr..((1 + slot) * c + ch + 1) * rr];
                    let a = &mut acc[(src * c + ch) * r..(src * c + ch + 1) * r];
                    for i in 0..r {
                        for j in 0..r {
                            a[if by_row { i } else { j }] += gs[i * r + j];
                        }
                    }
                }
            }
        }
        for pc in 0..3 * c {
            let plane = &mut d[pc * rr..(pc + 1) * rr];
            for i in 0..r {
                for j in 0..r {
                    plane[i * r + j] += (grow[pc * r + i] + gcol[pc * r + j]) * inv;
                }
            }
        }
    }))
}
