//! Raw slice kernels shared by the eager API and the tape.

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Geometry of a grouped 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        if x_shape.len() != 3 || w_shape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects C×H×W input and O×I×kh×kw weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        let (c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
        let (c_out, c_in_g, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_in / groups != c_in_g {
            return Err(Error::shape(format!(
                "conv2d groups={groups} incompatible with input channels {c_in} and weight {w_shape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let (pad_h, pad_w) = padding;
        if kh > h + 2 * pad_h {
            return Err(Error::KernelTooLarge {
                kernel: kh,
                extent: h + 2 * pad_h,
            });
        }
        if kw > w + 2 * pad_w {
            return Err(Error::KernelTooLarge {
                kernel: kw,
                extent: w + 2 * pad_w,
            });
        }
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            groups,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.c_out, self.out_h(), self.out_w()]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }

    /// Input coordinate for output row `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// Unfolds one group of input channels into a `(cin_g·kh·kw) × (oh·ow)` matrix.
fn im2col<T: Float>(x: &[T], g: &ConvGeometry, group: usize, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.h * g.w;
    for ci in 0..g.cin_g() {
        let src = &x[(group * g.cin_g() + ci) * plane..][..plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let line = &mut dst[oy * ow..][..ow];
                    match ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match ConvGeometry::src(ox, kx, g.stride, g.pad_w, g.w) {
                                    Some(ix) => src[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, group: usize, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.h * g.w;
    for ci in 0..g.cin_g() {
        let dst = &mut dx[(group * g.cin_g() + ci) * plane..][..plane];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) else {
                        continue;
                    };
                    for ox in 0..ow {
                        if let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_w, g.w) {
                            dst[iy * g.w + ix] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let opix = oh * ow;
    let mut out = vec![T::zero(); g.c_out * opix];
    if g.is_depthwise() {
        depthwise_forward(x, weight, g, &mut out);
    } else if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0 {
        for grp in 0..g.groups {
            let (cin, cout) = (g.cin_g(), g.cout_g());
            T::gemm(
                cout,
                cin,
                opix,
                &weight[grp * cout * cin..],
                (cin as isize, 1),
                &x[grp * cin * opix..],
                (opix as isize, 1),
                &mut out[grp * cout * opix..],
                opix as isize,
                false,
            );
        }
    } else {
        let rows = g.col_rows();
        let mut cols = vec![T::zero(); rows * opix];
        for grp in 0..g.groups {
            im2col(x, g, grp, &mut cols);
            let cout = g.cout_g();
            T::gemm(
                cout,
                rows,
                opix,
                &weight[grp * cout * rows..],
                (rows as isize, 1),
                &cols,
                (opix as isize, 1),
                &mut out[grp * cout * opix..],
                opix as isize,
                false,
            );
        }
    }
    if let Some(b) = bias {
        for (co, plane) in out.chunks_mut(opix).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeometry,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let opix = g.out_h() * g.out_w();
    let dbias: Vec<T> = dy.chunks(opix).map(|p| p.iter().copied().sum()).collect();
    let mut dx = vec![T::zero(); if need_dx { x.len() } else { 0 }];
    let mut dw = vec![T::zero(); if need_dw { weight.len() } else { 0 }];
    if g.is_depthwise() {
        depthwise_backward(x, weight, dy, g, need_dx.then_some(&mut dx[..]), need_dw.then_some(&mut dw[..]));
        return (dx, dw, dbias);
    }
    let rows = g.col_rows();
    let (cin, cout) = (g.cin_g(), g.cout_g());
    let pointwise = g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;
    let mut cols = vec![T::zero(); if pointwise { 0 } else { rows * opix }];
    let mut dcols = vec![T::zero(); if pointwise || !need_dx { 0 } else { rows * opix }];
    for grp in 0..g.groups {
        let dy_g = &dy[grp * cout * opix..][..cout * opix];
        let w_g = &weight[grp * cout * rows..][..cout * rows];
        if need_dw {
            let xs: &[T] = if pointwise {
                &x[grp * cin * opix..][..cin * opix]
            } else {
                im2col(x, g, grp, &mut cols);
                &cols
            };
            // dW = dY · colsᵀ
            T::gemm(
                cout,
                opix,
                rows,
                dy_g,
                (opix as isize, 1),
                xs,
                (1, opix as isize),
                &mut dw[grp * cout * rows..],
                rows as isize,
                false,
            );
        }
        if need_dx {
            // dcols = Wᵀ · dY
            if pointwise {
                T::gemm(
                    rows,
                    cout,
                    opix,
                    w_g,
                    (1, rows as isize),
                    dy_g,
                    (opix as isize, 1),
                    &mut dx[grp * cin * opix..],
                    opix as isize,
                    false,
                );
            } else {
                T::gemm(
                    rows,
                    cout,
                    opix,
                    w_g,
                    (1, rows as isize),
                    dy_g,
                    (opix as isize, 1),
                    &mut dcols,
                    opix as isize,
                    false,
                );
                col2im(&dcols, g, grp, &mut dx);
            }
        }
    }
    (dx, dw, dbias)
}

fn depthwise_forward<T: Float>(x: &[T], weight: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    for c in 0..g.c_in {
        let src = &x[c * plane..][..plane];
        let k = &weight[c * taps..][..taps];
        let dst = &mut out[c * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ky in 0..g.kh {
                let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) else {
                    continue;
                };
                let row = &src[iy * g.w..][..g.w];
                for kx in 0..g.kw {
                    let wv = k[ky * g.kw + kx];
                    for ox in 0..ow {
                        if let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_w, g.w) {
                            dst[oy * ow + ox] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeometry,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.h * g.w;
    let taps = g.kh * g.kw;
    for c in 0..g.c_in {
        let src = &x[c * plane..][..plane];
        let gy = &dy[c * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ky in 0..g.kh {
                let Some(iy) = ConvGeometry::src(oy, ky, g.stride, g.pad_h, g.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let wv = weight[c * taps + ky * g.kw + kx];
                    let mut acc = T::zero();
                    for ox in 0..ow {
                        if let Some(ix) = ConvGeometry::src(ox, kx, g.stride, g.pad_w, g.w) {
                            let gv = gy[oy * ow + ox];
                            acc += gv * src[iy * g.w + ix];
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[c * plane + iy * g.w + ix] += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[c * taps + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        let (cin, cout) = (g.c_in / g.groups, g.c_out / g.groups);
        for co in 0..g.c_out {
            let grp = co / cout;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad_h as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((grp * cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = w[((co * cin + ci) * g.kh + ky) * g.kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_across_geometries() {
        let cases = [
            // (cin, cout, h, w, k, stride, pad, groups)
            (2, 3, 5, 6, 3, 1, 1, 1),
            (3, 4, 8, 8, 3, 2, 1, 1),
            (4, 4, 6, 5, 3, 1, 1, 4),
            (4, 8, 4, 4, 2, 2, 0, 1),
            (3, 2, 4, 4, 1, 1, 0, 1),
            (4, 6, 5, 5, 3, 1, 0, 2),
        ];
        for (i, &(cin, cout, h, w, k, stride, pad, groups)) in cases.iter().enumerate() {
            let g = ConvGeometry::new(&[cin, h, w], &[cout, cin / groups, k, k], stride, (pad, pad), groups).unwrap();
            let x = pseudo(cin * h * w, i as u64);
            let wt = pseudo(cout * cin / groups * k * k, 100 + i as u64);
            let fast = conv2d_forward(&x, &wt, None, &g);
            let slow = naive_conv(&x, &wt, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn identity_and_counting_kernels() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let g = ConvGeometry::new(&[1, 3, 3], &[1, 1, 1, 1], 1, (0, 0), 1).unwrap();
        assert_eq!(conv2d_forward(&x, &[1.0], None, &g), x);

        let ones = vec![1.0f64; 25];
        let g = ConvGeometry::new(&[1, 5, 5], &[1, 1, 3, 3], 1, (1, 1), 1).unwrap();
        let out = conv2d_forward(&ones, &[1.0; 9], None, &g);
        assert_eq!(out[2 * 5 + 2], 9.0);
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let err = ConvGeometry::new(&[1, 2, 2], &[1, 1, 5, 5], 1, (1, 1), 1).unwrap_err();
        assert!(matches!(err, Error::KernelTooLarge { kernel: 5, extent: 4 }));
    }
}
