use std::sync::Arc;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{matmul_into, Real};

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.iter().zip(vb.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.push(out, shape, &[a, b], |g, s| {
            for slot in 0..2 {
                if let Some(d) = s.get(slot) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.iter().zip(vb.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.push(out, shape, &[a, b], |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = s.get(1) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
            }
        }))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.iter().zip(vb.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.push(out, shape, &[a, b], move |g, s| {
            if let Some(d) = s.get(0) {
                for ((d, &g), &y) in d.iter_mut().zip(g).zip(vb.iter()) {
                    *d += g * y;
                }
            }
            if let Some(d) = s.get(1) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(va.iter()) {
                    *d += g * x;
                }
            }
        }))
    }

    /// Sum of many same-shape tensors.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Invalid("add_n of nothing".into()))?;
        let shape = self.shape(first);
        let mut out = self.value(first).to_vec();
        for &x in &xs[1..] {
            if self.shape(x) != shape {
                return Err(Error::shape("add_n", format!("{shape:?} vs {:?}", self.shape(x))));
            }
            out.iter_mut().zip(self.value(x).iter()).for_each(|(o, &v)| *o += v);
        }
        let n = xs.len();
        Ok(self.push(out, shape, xs, move |g, s| {
            for slot in 0..n {
                if let Some(d) = s.get(slot) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(out, self.shape(x), &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
            }
        })
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push(out, self.shape(x), &[x], |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        })
    }

    /// `x[..., c] + b[c]`.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = last_dim(&sx);
        if self.numel(b) != c {
            return Err(Error::shape("add_row", format!("{sx:?} + {sb:?}")));
        }
        let (vx, vb) = (self.value(x), self.value(b));
        let mut out = vx.to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(vb.iter()).for_each(|(o, &b)| *o += b);
        }
        Ok(self.push(out, sx, &[x, b], move |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
            if let Some(d) = s.get(1) {
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    /// `x[..., c] * w[c]`.
    pub fn mul_row(&self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = last_dim(&sx);
        if self.numel(w) != c {
            return Err(Error::shape("mul_row", format!("{sx:?} * {:?}", self.shape(w))));
        }
        let (vx, vw) = (self.value(x), self.value(w));
        let mut out = vx.to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(vw.iter()).for_each(|(o, &w)| *o *= w);
        }
        Ok(self.push(out, sx, &[x, w], move |g, s| {
            if let Some(d) = s.get(0) {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(c)) {
                    for ((d, &g), &w) in drow.iter_mut().zip(grow).zip(vw.iter()) {
                        *d += g * w;
                    }
                }
            }
            if let Some(d) = s.get(1) {
                for (grow, xrow) in g.chunks(c).zip(vx.chunks(c)) {
                    for ((d, &g), &x) in d.iter_mut().zip(grow).zip(xrow) {
                        *d += g * x;
                    }
                }
            }
        }))
    }

    /// `x[n, c] * s[n]` (per-row scale).
    pub fn mul_col(&self, x: Var, sc: Var) -> Result<Var> {
        let sx = self.shape(x);
        let c = last_dim(&sx);
        let rows = self.numel(x) / c.max(1);
        if self.numel(sc) != rows {
            return Err(Error::shape("mul_col", format!("{sx:?} * {:?}", self.shape(sc))));
        }
        let (vx, vs) = (self.value(x), self.value(sc));
        let mut out = vx.to_vec();
        for (row, &k) in out.chunks_mut(c).zip(vs.iter()) {
            row.iter_mut().for_each(|o| *o *= k);
        }
        Ok(self.push(out, sx, &[x, sc], move |g, s| {
            if let Some(d) = s.get(0) {
                for ((drow, grow), &k) in d.chunks_mut(c).zip(g.chunks(c)).zip(vs.iter()) {
                    drow.iter_mut().zip(grow).for_each(|(d, &g)| *d += g * k);
                }
            }
            if let Some(d) = s.get(1) {
                for ((d, grow), xrow) in d.iter_mut().zip(g.chunks(c)).zip(vx.chunks(c)) {
                    *d += grow.iter().zip(xrow).fold(T::zero(), |a, (&g, &x)| a + g * x);
                }
            }
        }))
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    pub fn map<F, D>(&self, x: Var, f: F, df: D) -> Var
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + 'static,
    {
        let vx = self.value(x);
        let out: Arc<Vec<T>> = Arc::new(vx.iter().map(|&v| f(v)).collect());
        let vy = out.clone();
        self.push_arc(out, self.shape(x), &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(vx.iter()).zip(vy.iter()) {
                    *d += g * df(x, y);
                }
            }
        })
    }

    pub fn relu(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        self.push(out, self.shape(x), &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for ((d, &g), &x) in d.iter_mut().zip(g).zip(vx.iter()) {
                    if x > T::zero() {
                        *d += g;
                    }
                }
            }
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.map(x, sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.map(x, |v| v.exp(), |_, y| y)
    }

    pub fn square(&self, x: Var) -> Var {
        self.map(x, |v| v * v, |x, _| x + x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.map(x, gelu, |x, _| gelu_grad(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).iter().copied().sum();
        self.push(vec![total], vec![], &[x], |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::of(self.numel(x) as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `sum(x * c)` for a constant `c`. Used to inject an externally supplied
    /// output gradient `c` as a scalar objective.
    pub fn dot_const(&self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.numel(x) {
            return Err(Error::shape(
                "dot_const",
                format!("{} vs {}", self.numel(x), c.len()),
            ));
        }
        let vx = self.value(x);
        let total = vx.iter().zip(c).fold(T::zero(), |a, (&x, &c)| a + x * c);
        let c = c.to_vec();
        Ok(self.push(vec![total], vec![], &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(&c).for_each(|(d, &c)| *d += g[0] * c);
            }
        }))
    }

    pub fn reshape(&self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        Ok(self.push_arc(self.value(x), shape, &[x], |g, s| {
            if let Some(d) = s.get(0) {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
            }
        }))
    }

    /// `a(m x k) @ b(k x n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); m * n];
        matmul_into(&va, &vb, &mut out, m, k, n, false, false, false);
        Ok(self.push(out, vec![m, n], &[a, b], move |g, s| {
            // dA = G B^T, dB = A^T G
            if let Some(d) = s.get(0) {
                matmul_into(g, &vb, d, m, n, k, false, true, true);
            }
            if let Some(d) = s.get(1) {
                matmul_into(&va, g, d, k, m, n, true, false, true);
            }
        }))
    }

    /// Affine layer `x(m x k) @ w(k x n) + b(n)`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Transpose of the last two axes; leading axes are batch.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape("transpose", format!("{sx:?}")));
        }
        let r = sx.len();
        let (rows, cols) = (sx[r - 2], sx[r - 1]);
        let batch = self.numel(x) / (rows * cols).max(1);
        let vx = self.value(x);
        let out = transpose_batched(&vx, batch, rows, cols);
        let mut shape = sx.clone();
        shape.swap(r - 2, r - 1);
        Ok(self.push(out, shape, &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                let gt = transpose_batched(g, batch, cols, rows);
                d.iter_mut().zip(&gt).for_each(|(d, &g)| *d += g);
            }
        }))
    }

    /// Concatenates 2-D tensors along columns.
    pub fn concat_cols(&self, xs: &[Var]) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = xs.iter().map(|&x| self.shape(x)).collect();
        let rows = shapes.first().map(|s| s[0]).unwrap_or(0);
        if shapes.iter().any(|s| s.len() != 2 || s[0] != rows) {
            return Err(Error::shape("concat_cols", format!("{shapes:?}")));
        }
        let widths: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        let total: usize = widths.iter().sum();
        let vals: Vec<Arc<Vec<T>>> = xs.iter().map(|&x| self.value(x)).collect();
        let mut out = vec![T::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
                off += w;
            }
        }
        Ok(self.push(out, vec![rows, total], xs, move |g, s| {
            let mut off = 0;
            for (slot, &w) in widths.iter().enumerate() {
                if let Some(d) = s.get(slot) {
                    for r in 0..rows {
                        let src = &g[r * total + off..r * total + off + w];
                        d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
                off += w;
            }
        }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || start > end || end > sx[1] {
            return Err(Error::shape("slice_cols", format!("{sx:?}[{start}..{end}]")));
        }
        let (rows, cols, w) = (sx[0], sx[1], end - start);
        let vx = self.value(x);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&vx[r * cols + start..r * cols + end]);
        }
        Ok(self.push(out, vec![rows, w], &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for r in 0..rows {
                    d[r * cols + start..r * cols + end]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    /// Selects rows of a 2-D tensor by index (rows may repeat).
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || idx.iter().any(|&i| i >= sx[0]) {
            return Err(Error::shape("gather_rows", format!("{sx:?}")));
        }
        let c = sx[1];
        let vx = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&vx[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        Ok(self.push(out, vec![idx.len(), c], &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for (k, &i) in idx.iter().enumerate() {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&g[k * c..(k + 1) * c])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    /// Places the rows of `x` at `idx` in an `n_rows x c` tensor; other rows are `fill`.
    pub fn scatter_rows(&self, x: Var, idx: &[usize], n_rows: usize, fill: &[T]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != idx.len() || fill.len() != sx[1] {
            return Err(Error::shape("scatter_rows", format!("{sx:?}")));
        }
        if idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::shape("scatter_rows", "index out of range".to_string()));
        }
        let c = sx[1];
        let vx = self.value(x);
        let mut out = Vec::with_capacity(n_rows * c);
        for _ in 0..n_rows {
            out.extend_from_slice(fill);
        }
        for (k, &i) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&vx[k * c..(k + 1) * c]);
        }
        let idx = idx.to_vec();
        Ok(self.push(out, vec![n_rows, c], &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for (k, &i) in idx.iter().enumerate() {
                    d[k * c..(k + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(d, &g)| *d += g);
                }
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, x: Var) -> Var {
        let sx = self.shape(x);
        let c = last_dim(&sx).max(1);
        let vx = self.value(x);
        let mut out = vx.to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let out = Arc::new(out);
        let vy = out.clone();
        self.push_arc(out, sx, &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(vy.chunks(c)) {
                    let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&g, &y)| a + g * y);
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
        })
    }

    /// Row-wise L2 normalization of an `n x c` tensor (with a small floor on the norm).
    pub fn normalize_rows(&self, x: Var, eps: T) -> Var {
        let sx = self.shape(x);
        let c = last_dim(&sx).max(1);
        let vx = self.value(x);
        let norms: Vec<T> = vx
            .chunks(c)
            .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt().max(eps))
            .collect();
        let mut out = vx.to_vec();
        for (row, &n) in out.chunks_mut(c).zip(&norms) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Arc::new(out);
        let vy = out.clone();
        self.push_arc(out, sx, &[x], move |g, s| {
            if let Some(d) = s.get(0) {
                for (((drow, grow), yrow), (&n, xrow)) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(vy.chunks(c))
                    .zip(norms.iter().zip(vx.chunks(c)))
                {
                    let raw = xrow.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                    if raw < eps {
                        // norm clamped: y = x / eps
                        drow.iter_mut().zip(grow).for_each(|(d, &g)| *d += g / n);
                    } else {
                        let dot = grow.iter().zip(yrow).fold(T::zero(), |a, (&g, &y)| a + g * y);
                        for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (g - y * dot) / n;
                        }
                    }
                }
            }
        })
    }
}

pub(crate) fn transpose_batched<T: Copy>(x: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for b in 0..batch {
        let src = &x[b * rows * cols..(b + 1) * rows * cols];
        for j in 0..cols {
            for i in 0..rows {
                out.push(src[i * cols + j]);
            }
        }
    }
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))`, stable for large |x|.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Real>(x: T) -> T {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c, half) = (T::of(GELU_K), T::of(GELU_C), T::of(0.5));
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
