use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    groups: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Visits every (input row span, output row span, weight) triple of the
    /// cross-correlation: `f(in_offset, out_offset, len, weight_index)`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (cpg, opg) = (self.cin_per_group(), self.cout_per_group());
        let p = self.pad as isize;
        for n in 0..self.n {
            for o in 0..self.cout {
                let g = o / opg;
                let out_base = (n * self.cout + o) * self.ho * self.wo;
                for cl in 0..cpg {
                    let ci = g * cpg + cl;
                    let in_base = (n * self.cin + ci) * self.h * self.w;
                    for ky in 0..self.k {
                        for kx in 0..self.k {
                            let widx = ((o * cpg + cl) * self.k + ky) * self.k + kx;
                            let dy = ky as isize - p;
                            let dx = kx as isize - p;
                            let y0 = (-dy).max(0) as usize;
                            let y1 = ((self.h as isize - dy).min(self.ho as isize)).max(0) as usize;
                            let x0 = (-dx).max(0) as usize;
                            let x1 = ((self.w as isize - dx).min(self.wo as isize)).max(0) as usize;
                            if x1 <= x0 {
                                continue;
                            }
                            for y in y0..y1 {
                                let iy = (y as isize + dy) as usize;
                                let ix0 = (x0 as isize + dx) as usize;
                                f(in_base + iy * self.w + ix0, out_base + y * self.wo + x0, x1 - x0, widx);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// Grouped 2-D cross-correlation, stride 1, zero padding.
    ///
    /// `input` is `[N, C_in, H, W]`, `kernel` is `[C_out, C_in / groups, K, K]`
    /// with odd `K`, `bias` (optional) is `[C_out]`.
    pub fn conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        padding: usize,
    ) -> Result<Var> {
        let si = self.shape(input);
        let sk = self.shape(kernel);
        let bad = |msg: &str| Error::shape("conv2d", format!("{msg}: input {si:?}, kernel {sk:?}"));
        if si.len() != 4 || sk.len() != 4 {
            return Err(bad("expected 4-d tensors"));
        }
        if groups == 0 || si[1] % groups != 0 || sk[0] % groups != 0 {
            return Err(bad("channels not divisible by groups"));
        }
        if sk[1] != si[1] / groups {
            return Err(bad("kernel input channels"));
        }
        if sk[2] != sk[3] || sk[2] % 2 == 0 {
            return Err(bad("kernel must be square with odd size"));
        }
        let k = sk[2];
        if si[2] + 2 * padding < k || si[3] + 2 * padding < k {
            return Err(bad("kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n: si[0],
            cin: si[1],
            h: si[2],
            w: si[3],
            cout: sk[0],
            k,
            groups,
            pad: padding,
            ho: si[2] + 2 * padding - k + 1,
            wo: si[3] + 2 * padding - k + 1,
        };
        if let Some(b) = bias {
            if self.numel(b) != geom.cout {
                return Err(bad("bias length"));
            }
        }
        let vin = self.value(input);
        let vk = self.value(kernel);
        let mut out = vec![T::zero(); geom.n * geom.cout * geom.ho * geom.wo];
        if let Some(b) = bias {
            let vb = self.value(b);
            for (plane, &bv) in out.chunks_mut(geom.ho * geom.wo).zip(vb.iter().cycle()) {
                plane.iter_mut().for_each(|v| *v = bv);
            }
        }
        geom.for_each_tap(|ii, oi, len, wi| {
            let wv = vk[wi];
            for (o, &x) in out[oi..oi + len].iter_mut().zip(&vin[ii..ii + len]) {
                *o += wv * x;
            }
        });
        let has_bias = bias.is_some();
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let shape = vec![geom.n, geom.cout, geom.ho, geom.wo];
        Ok(self.push(out, shape, &parents, move |g, s| {
            if let Some(d) = s.get(0) {
                geom.for_each_tap(|ii, oi, len, wi| {
                    let wv = vk[wi];
                    for (d, &g) in d[ii..ii + len].iter_mut().zip(&g[oi..oi + len]) {
                        *d += wv * g;
                    }
                });
            }
            if let Some(d) = s.get(1) {
                geom.for_each_tap(|ii, oi, len, wi| {
                    d[wi] += g[oi..oi + len]
                        .iter()
                        .zip(&vin[ii..ii + len])
                        .fold(T::zero(), |a, (&g, &x)| a + g * x);
                });
            }
            if has_bias {
                if let Some(d) = s.get(2) {
                    for (i, plane) in g.chunks(geom.ho * geom.wo).enumerate() {
                        d[i % geom.cout] += plane.iter().copied().sum::<T>();
                    }
                }
            }
        }))
    }
}
