use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Four texel taps of a bilinear lookup plus the derivatives of each weight
/// with respect to the two continuous coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub idx: [usize; 4],
    pub w: [T; 4],
    /// d w / d a (row coordinate, in [-1, 1] units); zero where clamped.
    pub dw_da: [T; 4],
    /// d w / d b (column coordinate).
    pub dw_db: [T; 4],
}

fn axis<T: Real>(c: T, n: usize) -> (usize, usize, T, T) {
    // align-corners: -1 maps to texel 0's center, +1 to texel n-1's center.
    if n == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let one = T::one();
    let inside = c > -one && c < one;
    let cc = c.max(-one).min(one);
    let scale = T::of((n - 1) as f64) * T::of(0.5);
    let x = (cc + one) * scale;
    let i0 = (x.floor().to_usize().unwrap_or(0)).min(n - 2);
    let f = x - T::of(i0 as f64);
    let dfdc = if inside { scale } else { T::zero() };
    (i0, i0 + 1, f, dfdc)
}

/// Bilinear taps for `(a, b)` on an `h x w` grid, `a` indexing rows and `b`
/// columns, both in [-1, 1] with border clamping.
pub(crate) fn taps<T: Real>(a: T, b: T, h: usize, w: usize) -> Taps<T> {
    let (r0, r1, fr, dfr) = axis(a, h);
    let (c0, c1, fc, dfc) = axis(b, w);
    let one = T::one();
    let (gr, gc) = (one - fr, one - fc);
    Taps {
        idx: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        w: [gr * gc, gr * fc, fr * gc, fr * fc],
        dw_da: [-dfr * gc, -dfr * fc, dfr * gc, dfr * fc],
        dw_db: [-gr * dfc, gr * dfc, -fr * dfc, fr * dfc],
    }
}

impl<T: Real> Tape<T> {
    /// Samples a `[C, H, W]` plane at `n` continuous coordinates `uv: [n, 2]`
    /// (`uv[.., 0]` indexes rows, `uv[.., 1]` columns, both in [-1, 1],
    /// texel centers at the grid nodes, border clamping outside). Output `[n, C]`.
    pub fn interp_bilinear(&self, plane: Var, uv: Var) -> Result<Var> {
        let sp = self.shape(plane);
        let su = self.shape(uv);
        if sp.len() != 3 || su.len() != 2 || su[1] != 2 {
            return Err(Error::shape("interp_bilinear", format!("plane {sp:?}, uv {su:?}")));
        }
        let (c, h, w) = (sp[0], sp[1], sp[2]);
        let n = su[0];
        let vp = self.value(plane);
        let vu = self.value(uv);
        if vu.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("interp_bilinear coordinates".into()));
        }
        let hw = h * w;
        let all: Vec<Taps<T>> = (0..n).map(|i| taps(vu[2 * i], vu[2 * i + 1], h, w)).collect();
        let mut out = vec![T::zero(); n * c];
        for (i, t) in all.iter().enumerate() {
            let row = &mut out[i * c..(i + 1) * c];
            for (ch, o) in row.iter_mut().enumerate() {
                let base = ch * hw;
                *o = (0..4).fold(T::zero(), |a, k| a + t.w[k] * vp[base + t.idx[k]]);
            }
        }
        Ok(self.push(out, vec![n, c], &[plane, uv], move |g, s| {
            if let Some(d) = s.get(0) {
                for (i, t) in all.iter().enumerate() {
                    for ch in 0..c {
                        let gv = g[i * c + ch];
                        let base = ch * hw;
                        for k in 0..4 {
                            d[base + t.idx[k]] += t.w[k] * gv;
                        }
                    }
                }
            }
            if let Some(d) = s.get(1) {
                for (i, t) in all.iter().enumerate() {
                    let (mut ga, mut gb) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let gv = g[i * c + ch];
                        let base = ch * hw;
                        for k in 0..4 {
                            let p = vp[base + t.idx[k]];
                            ga += gv * t.dw_da[k] * p;
                            gb += gv * t.dw_db[k] * p;
                        }
                    }
                    d[2 * i] += ga;
                    d[2 * i + 1] += gb;
                }
            }
        }))
    }
}
