use super::ops::softmax_in_place;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-stochastic attention probabilities, laid out `[head][query][key]`.
pub fn attention_probs<T: Real>(q: &[T], k: &[T], m: usize, l: usize, d: usize, heads: usize) -> Vec<T> {
    let dh = d / heads;
    let inv = T::one() / T::of(dh as f64).sqrt();
    let mut p = vec![T::zero(); heads * m * l];
    for h in 0..heads {
        for i in 0..m {
            let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
            let row = &mut p[(h * m + i) * l..(h * m + i + 1) * l];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
                *r = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * inv;
            }
            softmax_in_place(row);
        }
    }
    p
}

impl<T: Real> Tape<T> {
    /// Multi-head scaled dot-product attention. `q: [m, d]`, `k, v: [l, d]`;
    /// heads split `d` into equal contiguous slices. Output `[m, d]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv != sk || sq[1] != sk[1] {
            return Err(Error::shape("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let (m, l, d) = (sq[0], sk[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads for width {d}")));
        }
        if l == 0 {
            return Err(Error::Invalid("attention over zero keys".into()));
        }
        let dh = d / heads;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let p = attention_probs(&vq, &vk, m, l, d, heads);
        let mut out = vec![T::zero(); m * d];
        for h in 0..heads {
            for i in 0..m {
                let prow = &p[(h * m + i) * l..(h * m + i + 1) * l];
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in prow.iter().enumerate() {
                    let vj = &vv[j * d + h * dh..j * d + (h + 1) * dh];
                    orow.iter_mut().zip(vj).for_each(|(o, &x)| *o += pj * x);
                }
            }
        }
        let inv = T::one() / T::of(dh as f64).sqrt();
        Ok(self.push(out, vec![m, d], &[q, k, v], move |g, s| {
            let mut dq = vec![T::zero(); m * d];
            let mut dk = vec![T::zero(); l * d];
            let mut dv = vec![T::zero(); l * d];
            let mut ds = vec![T::zero(); l];
            for h in 0..heads {
                let sl = |i: usize| i * d + h * dh..i * d + (h + 1) * dh;
                for i in 0..m {
                    let prow = &p[(h * m + i) * l..(h * m + i + 1) * l];
                    let gi = &g[sl(i)];
                    let mut dot = T::zero();
                    for j in 0..l {
                        let vj = &vv[sl(j)];
                        let dp = gi.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        ds[j] = dp;
                        dot += prow[j] * dp;
                        dv[sl(j)].iter_mut().zip(gi).for_each(|(d, &x)| *d += prow[j] * x);
                    }
                    for j in 0..l {
                        let sc = prow[j] * (ds[j] - dot) * inv;
                        let (kj, qi) = (&vk[sl(j)], &vq[sl(i)]);
                        dq[sl(i)].iter_mut().zip(kj).for_each(|(d, &x)| *d += sc * x);
                        dk[sl(j)].iter_mut().zip(qi).for_each(|(d, &x)| *d += sc * x);
                    }
                }
            }
            for (slot, buf) in [dq, dk, dv].into_iter().enumerate() {
                if let Some(d) = s.get(slot) {
                    d.iter_mut().zip(&buf).for_each(|(d, &x)| *d += x);
                }
            }
        }))
    }
}
