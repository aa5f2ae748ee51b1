//! Fused selective-scan node: discretization, the scan itself (2D two-pass or
//! row-major flattened 1D) over one or four orientations, and the `C`
//! aggregation, with an analytic adjoint.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::scan2d::{self, Orientation};
use crate::tensor::Float;

/// How a `H×W` plane is traversed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// Horizontal pass along rows, then vertical pass along columns.
    TwoD,
    /// The plane flattened row-major into one sequence of length `H·W`.
    Flattened,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Directions {
    /// Only the raw, lower-right causal scan.
    Single,
    /// Identity, horizontal flip, vertical flip and both, summed.
    Four,
}

impl Directions {
    fn orientations(self) -> &'static [Orientation] {
        match self {
            Directions::Single => &Orientation::ALL[..1],
            Directions::Four => &Orientation::ALL,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanSpec {
    pub mode: ScanMode,
    pub directions: Directions,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self {
            mode: ScanMode::TwoD,
            directions: Directions::Four,
        }
    }
}

pub(crate) struct ScanSaved<T> {
    u: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    spec: ScanSpec,
    dims: (usize, usize, usize, usize),
    /// `[D×N×P]`, physical orientation.
    a_bar: Vec<T>,
    /// `[D×N×O×P]`. Empty in flattened mode.
    hor: Vec<T>,
    /// `[D×N×O×P]`.
    states: Vec<T>,
}

impl<T: Float> Tape<T> {
    /// Selective scan over `u[D×H×W]`.
    ///
    /// * `delta[D×H×W]` – positive step sizes (already through softplus)
    /// * `a[D×N]` – negative transition rates
    /// * `b[N×H×W]`, `c[N×H×W]` – input-dependent projections shared by channels
    ///
    /// Per channel `k` and state `d`: `Ā = exp(Δ_k A_kd)`, `B̄x = Δ_k B_d u_k`,
    /// and `y_k = Σ_o Σ_d C_d ⊙ scan_o(Ā, B̄x)` over the orientations in `spec`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, spec: ScanSpec) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return Err(Error::shape(format!("selective scan input must be D×H×W, got {us:?}")));
        }
        let (dd, h, w) = (us[0], us[1], us[2]);
        let as_ = self.shape(a).to_vec();
        if as_.len() != 2 || as_[0] != dd {
            return Err(Error::shape(format!("A must be {dd}×N, got {as_:?}")));
        }
        let n = as_[1];
        if self.shape(delta) != us.as_slice() {
            return Err(Error::shape(format!("Δ shape {:?} != {us:?}", self.shape(delta))));
        }
        for (name, v) in [("B", b), ("C", c)] {
            if self.shape(v) != [n, h, w] {
                return Err(Error::shape(format!(
                    "{name} must be {n}×{h}×{w}, got {:?}",
                    self.shape(v)
                )));
            }
        }
        let p = h * w;
        let orients = spec.directions.orientations();
        let no = orients.len();
        let (uv, dv, av, bv, cv) = (self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c));

        let mut a_bar = vec![T::zero(); dd * n * p];
        let keep_hor = spec.mode == ScanMode::TwoD;
        let mut hor = vec![T::zero(); if keep_hor { dd * n * no * p } else { 0 }];
        let mut states = vec![T::zero(); dd * n * no * p];
        let mut y = vec![T::zero(); dd * p];
        let mut bx = vec![T::zero(); p];
        for k in 0..dd {
            let du = &dv[k * p..][..p];
            let uu = &uv[k * p..][..p];
            for d in 0..n {
                let rate = av[k * n + d];
                let ab = &mut a_bar[(k * n + d) * p..][..p];
                let bd = &bv[d * p..][..p];
                for q in 0..p {
                    ab[q] = (du[q] * rate).exp();
                    bx[q] = du[q] * bd[q] * uu[q];
                }
                let cd = &cv[d * p..][..p];
                for (oi, &o) in orients.iter().enumerate() {
                    let slot = ((k * n + d) * no + oi) * p;
                    let st = &mut states[slot..slot + p];
                    match spec.mode {
                        ScanMode::TwoD => {
                            scan2d::scan_plane_oriented(o, ab, &bx, h, w, &mut hor[slot..slot + p], st)
                        }
                        ScanMode::Flattened => scan2d::scan_flat_oriented(o, ab, &bx, h, w, st),
                    }
                    let yk = &mut y[k * p..][..p];
                    for q in 0..p {
                        yk[q] += cd[q] * st[q];
                    }
                }
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("selective scan".into()));
        }
        let saved = ScanSaved {
            u,
            delta,
            a,
            b,
            c,
            spec,
            dims: (dd, n, h, w),
            a_bar,
            hor,
            states,
        };
        Ok(self.push(us, y, Op::SelectiveScan(Box::new(saved)), &[u, delta, a, b, c]))
    }

    pub(super) fn backward_scan(&self, s: &ScanSaved<T>, g: &[T], grads: &mut Grads<T>) -> Result<()> {
        let (dd, n, h, w) = s.dims;
        let p = h * w;
        let orients = s.spec.directions.orientations();
        let no = orients.len();
        let uv = &self.nodes[s.u.0].value;
        let dv = &self.nodes[s.delta.0].value;
        let av = &self.nodes[s.a.0].value;
        let bv = &self.nodes[s.b.0].value;
        let cv = &self.nodes[s.c.0].value;

        let mut gu = vec![T::zero(); dd * p];
        let mut gdelta = vec![T::zero(); dd * p];
        let mut ga = vec![T::zero(); dd * n];
        let mut gb = vec![T::zero(); n * p];
        let mut gc = vec![T::zero(); n * p];

        let mut gh = vec![T::zero(); p];
        let mut gbx_o = vec![T::zero(); p];
        let mut ga_phys = vec![T::zero(); p];
        let mut gbx_phys = vec![T::zero(); p];
        for k in 0..dd {
            let gy = &g[k * p..][..p];
            let du = &dv[k * p..][..p];
            let uu = &uv[k * p..][..p];
            for d in 0..n {
                let ab = &s.a_bar[(k * n + d) * p..][..p];
                let cd = &cv[d * p..][..p];
                for q in 0..p {
                    gh[q] = gy[q] * cd[q];
                }
                ga_phys.fill(T::zero());
                gbx_phys.fill(T::zero());
                for (oi, &o) in orients.iter().enumerate() {
                    let slot = ((k * n + d) * no + oi) * p;
                    let st = &s.states[slot..slot + p];
                    let gcd = &mut gc[d * p..][..p];
                    for q in 0..p {
                        gcd[q] += gy[q] * st[q];
                    }
                    gbx_o.copy_from_slice(&gh);
                    match s.spec.mode {
                        ScanMode::TwoD => scan2d::scan_plane_oriented_backward(
                            o,
                            ab,
                            &s.hor[slot..slot + p],
                            st,
                            h,
                            w,
                            &mut ga_phys,
                            &mut gbx_o,
                        ),
                        ScanMode::Flattened => {
                            scan2d::scan_flat_oriented_backward(o, ab, st, h, w, &mut ga_phys, &mut gbx_o)
                        }
                    }
                    for q in 0..p {
                        gbx_phys[q] += gbx_o[q];
                    }
                }
                let rate = av[k * n + d];
                let bd = &bv[d * p..][..p];
                let mut ga_acc = T::zero();
                for q in 0..p {
                    let e = ga_phys[q] * ab[q];
                    gdelta[k * p + q] += e * rate + gbx_phys[q] * bd[q] * uu[q];
                    ga_acc += e * du[q];
                    gb[d * p + q] += gbx_phys[q] * du[q] * uu[q];
                    gu[k * p + q] += gbx_phys[q] * du[q] * bd[q];
                }
                ga[k * n + d] += ga_acc;
            }
        }
        grads.add_owned(s.u, gu);
        grads.add_owned(s.delta, gdelta);
        grads.add_owned(s.a, ga);
        grads.add_owned(s.b, gb);
        grads.add_owned(s.c, gc);
        Ok(())
    }
}
