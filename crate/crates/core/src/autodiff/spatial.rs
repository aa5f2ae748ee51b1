//! Spatial rearrangement and bilinear sampling ops.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Float;

/// The four clamped bilinear taps `(row, col, weight)` around `(sy, sx)` on an
/// `h × w` grid. Weights are non-negative and sum to one; taps that fall off
/// the grid are clamped to the nearest border cell.
#[inline]
pub fn bilinear_taps<T: Float>(sy: T, sx: T, h: usize, w: usize) -> [(usize, usize, T); 4] {
    let (y0, fy) = floor_frac(sy);
    let (x0, fx) = floor_frac(sx);
    let ya = clamp_index(y0, h);
    let yb = clamp_index(y0 + 1, h);
    let xa = clamp_index(x0, w);
    let xb = clamp_index(x0 + 1, w);
    let one = T::one();
    [
        (ya, xa, (one - fy) * (one - fx)),
        (ya, xb, (one - fy) * fx),
        (yb, xa, fy * (one - fx)),
        (yb, xb, fy * fx),
    ]
}

#[inline]
fn floor_frac<T: Float>(s: T) -> (isize, T) {
    let f = s.floor();
    (f.to_isize().unwrap_or(0), s - f)
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Where fine-grid position `(i, j)` samples the coarse grid for flow `(dx, dy)`:
/// `p_coarse = (p_fine + Δ) / 2`.
#[inline]
pub(crate) fn warp_point<T: Float>(i: usize, j: usize, dx: T, dy: T) -> (T, T) {
    let half = T::lit(0.5);
    ((T::lit(i as f64) + dy) * half, (T::lit(j as f64) + dx) * half)
}

/// Half-pixel-centred source coordinate for resizing by an integer factor.
#[inline]
fn resize_source<T: Float>(p: usize, factor: usize) -> T {
    let s = (T::lit(p as f64) + T::lit(0.5)) / T::lit(factor as f64) - T::lit(0.5);
    s.max(T::zero())
}

impl<T: Float> Tape<T> {
    /// Spatial reorganization of two `C×H×W` maps into one `C×2H×2W` map:
    /// cell `(2m+a, 2n+b)` holds `t1[m,n]` when `a ≠ b` and `t2[m,n]` when `a = b`.
    pub fn interleave(&mut self, t1: Var, t2: Var) -> Result<Var> {
        let s = self.shape(t1).to_vec();
        if s.len() != 3 || self.shape(t2) != s.as_slice() {
            return Err(Error::shape(format!(
                "interleave needs equal C×H×W maps, got {s:?} and {:?}",
                self.shape(t2)
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (v1, v2) = (self.value(t1), self.value(t2));
        let mut out = vec![T::zero(); 4 * c * h * w];
        let w2 = 2 * w;
        for ch in 0..c {
            for m in 0..h {
                for n in 0..w {
                    let src = (ch * h + m) * w + n;
                    let base = (ch * 2 * h + 2 * m) * w2 + 2 * n;
                    out[base] = v2[src];
                    out[base + 1] = v1[src];
                    out[base + w2] = v1[src];
                    out[base + w2 + 1] = v2[src];
                }
            }
        }
        Ok(self.push(vec![c, 2 * h, 2 * w], out, Op::Interleave(t1, t2), &[t1, t2]))
    }

    pub(super) fn backward_interleave(&self, t1: Var, t2: Var, g: &[T], grads: &mut Grads<T>) {
        let s = &self.nodes[t1.0].shape;
        let (c, h, w) = (s[0], s[1], s[2]);
        let w2 = 2 * w;
        let mut g1 = vec![T::zero(); c * h * w];
        let mut g2 = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for m in 0..h {
                for n in 0..w {
                    let src = (ch * h + m) * w + n;
                    let base = (ch * 2 * h + 2 * m) * w2 + 2 * n;
                    g2[src] = g[base] + g[base + w2 + 1];
                    g1[src] = g[base + 1] + g[base + w2];
                }
            }
        }
        grads.add_owned(t1, g1);
        grads.add_owned(t2, g2);
    }

    /// The `(row, col)` phase sub-grid of a `C×2H×2W` map: `out[c,m,n] = x[c,2m+row,2n+col]`.
    pub fn phase(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) || row > 1 || col > 1 {
            return Err(Error::shape(format!("phase ({row},{col}) of {s:?}")));
        }
        let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
        let v = self.value(x);
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for m in 0..h {
                for n in 0..w {
                    out.push(v[(ch * s[1] + 2 * m + row) * s[2] + 2 * n + col]);
                }
            }
        }
        Ok(self.push(vec![c, h, w], out, Op::Phase { x, row, col }, &[x]))
    }

    pub(super) fn backward_phase(&self, x: Var, row: usize, col: usize, g: &[T], grads: &mut Grads<T>) {
        if !grads.wants(x) {
            return;
        }
        let s = self.nodes[x.0].shape.clone();
        let (c, h, w) = (s[0], s[1] / 2, s[2] / 2);
        let buf = grads.buf(x);
        for ch in 0..c {
            for m in 0..h {
                for n in 0..w {
                    buf[(ch * s[1] + 2 * m + row) * s[2] + 2 * n + col] += g[(ch * h + m) * w + n];
                }
            }
        }
    }

    /// Flow-guided upsampling. `coarse` is `C×H×W`, `flow` is `2×H'×W'` with
    /// channel 0 = dx and channel 1 = dy in fine-grid units; output position
    /// `p` bilinearly samples `coarse` at `(p + flow(p)) / 2` with clamp-to-edge.
    pub fn warp(&mut self, coarse: Var, flow: Var) -> Result<Var> {
        let cs = self.shape(coarse).to_vec();
        let fs = self.shape(flow).to_vec();
        if cs.len() != 3 || fs.len() != 3 || fs[0] != 2 {
            return Err(Error::shape(format!(
                "warp needs a C×H×W map and a 2×H'×W' flow, got {cs:?} and {fs:?}"
            )));
        }
        let (c, h, w) = (cs[0], cs[1], cs[2]);
        let (fh, fw) = (fs[1], fs[2]);
        let fv = self.value(flow);
        if fv.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("flow field".into()));
        }
        let cv = self.value(coarse);
        let fp = fh * fw;
        let mut out = vec![T::zero(); c * fp];
        for i in 0..fh {
            for j in 0..fw {
                let q = i * fw + j;
                let (sy, sx) = warp_point(i, j, fv[q], fv[fp + q]);
                let taps = bilinear_taps(sy, sx, h, w);
                for ch in 0..c {
                    let plane = &cv[ch * h * w..][..h * w];
                    out[ch * fp + q] = taps
                        .iter()
                        .fold(T::zero(), |acc, &(y, x, wt)| acc + wt * plane[y * w + x]);
                }
            }
        }
        Ok(self.push(vec![c, fh, fw], out, Op::Warp { coarse, flow }, &[coarse, flow]))
    }

    pub(super) fn backward_warp(&self, coarse: Var, flow: Var, g: &[T], grads: &mut Grads<T>) {
        let cs = &self.nodes[coarse.0].shape;
        let fs = &self.nodes[flow.0].shape;
        let (c, h, w) = (cs[0], cs[1], cs[2]);
        let (fh, fw) = (fs[1], fs[2]);
        let fp = fh * fw;
        let fv = &self.nodes[flow.0].value;
        let cv = &self.nodes[coarse.0].value;
        let want_c = grads.wants(coarse);
        let want_f = grads.wants(flow);
        let mut gc = vec![T::zero(); if want_c { c * h * w } else { 0 }];
        let mut gf = vec![T::zero(); if want_f { 2 * fp } else { 0 }];
        let half = T::lit(0.5);
        let one = T::one();
        for i in 0..fh {
            for j in 0..fw {
                let q = i * fw + j;
                let (sy, sx) = warp_point(i, j, fv[q], fv[fp + q]);
                let taps = bilinear_taps(sy, sx, h, w);
                if want_c {
                    for ch in 0..c {
                        let gv = g[ch * fp + q];
                        for &(y, x, wt) in &taps {
                            gc[ch * h * w + y * w + x] += wt * gv;
                        }
                    }
                }
                if want_f {
                    let fy = sy - sy.floor();
                    let fx = sx - sx.floor();
                    let (mut dsx, mut dsy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let p = &cv[ch * h * w..][..h * w];
                        let v00 = p[taps[0].0 * w + taps[0].1];
                        let v01 = p[taps[1].0 * w + taps[1].1];
                        let v10 = p[taps[2].0 * w + taps[2].1];
                        let v11 = p[taps[3].0 * w + taps[3].1];
                        let gv = g[ch * fp + q];
                        dsx += gv * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                        dsy += gv * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                    }
                    gf[q] = dsx * half;
                    gf[fp + q] = dsy * half;
                }
            }
        }
        if want_c {
            grads.add_owned(coarse, gc);
        }
        if want_f {
            grads.add_owned(flow, gf);
        }
    }

    /// Plain bilinear resize of a `C×H×W` map by an integer factor with
    /// half-pixel-centred sampling and clamp-to-edge.
    pub fn resize_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::shape(format!("resize ×{factor} of {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = vec![T::zero(); c * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                let taps = bilinear_taps(resize_source::<T>(i, factor), resize_source(j, factor), h, w);
                for ch in 0..c {
                    let p = &v[ch * h * w..][..h * w];
                    out[(ch * oh + i) * ow + j] =
                        taps.iter().fold(T::zero(), |acc, &(y, xx, wt)| acc + wt * p[y * w + xx]);
                }
            }
        }
        Ok(self.push(vec![c, oh, ow], out, Op::Resize { x, factor }, &[x]))
    }

    pub(super) fn backward_resize(&self, x: Var, factor: usize, g: &[T], grads: &mut Grads<T>) {
        if !grads.wants(x) {
            return;
        }
        let s = self.nodes[x.0].shape.clone();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let buf = grads.buf(x);
        for i in 0..oh {
            for j in 0..ow {
                let taps = bilinear_taps(resize_source::<T>(i, factor), resize_source(j, factor), h, w);
                for ch in 0..c {
                    let gv = g[(ch * oh + i) * ow + j];
                    for &(y, xx, wt) in &taps {
                        buf[ch * h * w + y * w + xx] += wt * gv;
                    }
                }
            }
        }
    }
}
