use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{matmul_dims, matmul_into, Float};

pub(crate) struct LayerNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Float> Tape<T> {
    /// `a[M×K] · b[K×N]`; adjoints `dA = dY·Bᵀ`, `dB = Aᵀ·dY`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    pub(super) fn backward_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut Grads<T>) {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        if grads.wants(a) {
            let vb = &self.nodes[b.0].value;
            let buf = grads.buf(a);
            // dA[m×k] += dY[m×n] · Bᵀ
            T::gemm(m, n, k, g, (n as isize, 1), vb, (1, n as isize), buf, k as isize, true);
        }
        if grads.wants(b) {
            let va = &self.nodes[a.0].value;
            let buf = grads.buf(b);
            // dB[k×n] += Aᵀ · dY
            T::gemm(k, m, n, va, (1, k as isize), g, (n as isize, 1), buf, n as isize, true);
        }
    }

    /// Cross-correlation of `x[C_in×H×W]` with `weight[C_out×C_in/groups×kh×kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::shape(format!(
                    "conv2d bias shape {:?} does not match {} output channels",
                    self.shape(b),
                    geom.c_out
                )));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(geom.out_shape(), out, Op::Conv2d { x, weight, bias, geom }, &inputs))
    }

    pub(super) fn backward_conv(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeometry,
        g: &[T],
        grads: &mut Grads<T>,
    ) {
        let (need_dx, need_dw) = (grads.wants(x), grads.wants(weight));
        let (dx, dw, db) = kernels::conv2d_backward(
            &self.nodes[x.0].value,
            &self.nodes[weight.0].value,
            g,
            geom,
            need_dx,
            need_dw,
        );
        if need_dx {
            grads.add_owned(x, dx);
        }
        if need_dw {
            grads.add_owned(weight, dw);
        }
        if let Some(b) = bias {
            grads.add_owned(b, db);
        }
    }

    /// Layer normalization across the leading (channel) axis at every spatial
    /// site, with per-channel affine `gamma`, `beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.first().ok_or_else(|| Error::shape("layer norm on a scalar"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!(
                "layer norm affine must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let plane = self.value(x).len() / c.max(1);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let inv_c = T::lit(1.0 / c as f64);
        let mut mean = vec![T::zero(); plane];
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xv[ch * plane..][..plane]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        let mut var = vec![T::zero(); plane];
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xv[ch * plane..][..plane]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_c + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for q in 0..plane {
                let i = ch * plane + q;
                xhat[i] = (xv[i] - mean[q]) * inv_std[q];
                out[i] = gv[ch] * xhat[i] + bv[ch];
            }
        }
        let saved = LayerNormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(shape, out, Op::LayerNorm(Box::new(saved)), &[x, gamma, beta]))
    }

    pub(super) fn backward_layer_norm(&self, s: &LayerNormSaved<T>, g: &[T], grads: &mut Grads<T>) {
        let c = self.nodes[s.gamma.0].value.len();
        let plane = g.len() / c;
        if grads.wants(s.gamma) || grads.wants(s.beta) {
            let mut dg = vec![T::zero(); c];
            let mut db = vec![T::zero(); c];
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                dg[ch] = g[r.clone()].iter().zip(&s.xhat[r.clone()]).map(|(&a, &b)| a * b).sum();
                db[ch] = g[r].iter().copied().sum();
            }
            grads.add_owned(s.gamma, dg);
            grads.add_owned(s.beta, db);
        }
        if grads.wants(s.x) {
            let gamma = &self.nodes[s.gamma.0].value;
            let inv_c = T::lit(1.0 / c as f64);
            let mut sum_d = vec![T::zero(); plane];
            let mut sum_dx = vec![T::zero(); plane];
            for ch in 0..c {
                for q in 0..plane {
                    let i = ch * plane + q;
                    let d = g[i] * gamma[ch];
                    sum_d[q] += d;
                    sum_dx[q] += d * s.xhat[i];
                }
            }
            let buf = grads.buf(s.x);
            for ch in 0..c {
                for q in 0..plane {
                    let i = ch * plane + q;
                    let d = g[i] * gamma[ch];
                    buf[i] += s.inv_std[q] * (d - inv_c * sum_d[q] - s.xhat[i] * inv_c * sum_dx[q]);
                }
            }
        }
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut value = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(format!(
                    "concat: {s:?} does not match trailing extents {tail:?}"
                )));
            }
            lead += s[0];
            value.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape(format!("slice {start}..{} out of {s:?}", start + len)));
        }
        let plane: usize = s[1..].iter().product();
        let value = self.value(x)[start * plane..(start + len) * plane].to_vec();
        let mut shape = s;
        shape[0] = len;
        Ok(self.push(shape, value, Op::Slice { x, start }, &[x]))
    }

    fn softmax_impl(&mut self, x: Var, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.first().ok_or_else(|| Error::shape("softmax on a scalar"))?;
        let v = self.value(x);
        let plane = v.len() / k.max(1);
        let mut out = vec![T::zero(); v.len()];
        for q in 0..plane {
            let m = (0..k).map(|c| v[c * plane + q]).fold(T::neg_infinity(), T::max);
            let z: T = (0..k).map(|c| (v[c * plane + q] - m).exp()).sum();
            let lz = z.ln();
            for c in 0..k {
                let i = c * plane + q;
                out[i] = if log { v[i] - m - lz } else { (v[i] - m).exp() / z };
            }
        }
        let op = if log { Op::LogSoftmax(x) } else { Op::Softmax(x) };
        Ok(self.push(shape, out, op, &[x]))
    }

    /// Softmax across the leading (class) axis at every site.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    pub(super) fn backward_softmax(&self, x: Var, out: &[T], g: &[T], grads: &mut Grads<T>, log: bool) {
        if !grads.wants(x) {
            return;
        }
        let k = self.nodes[x.0].shape[0];
        let plane = out.len() / k;
        let buf = grads.buf(x);
        for q in 0..plane {
            if log {
                let gs: T = (0..k).map(|c| g[c * plane + q]).sum();
                for c in 0..k {
                    let i = c * plane + q;
                    buf[i] += g[i] - out[i].exp() * gs;
                }
            } else {
                let dot: T = (0..k).map(|c| g[c * plane + q] * out[c * plane + q]).sum();
                for c in 0..k {
                    let i = c * plane + q;
                    buf[i] += out[i] * (g[i] - dot);
                }
            }
        }
    }
}
