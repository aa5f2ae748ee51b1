//! The 2D selective scan: a horizontal recurrence along every row followed by
//! a vertical recurrence along every column that reuses the same `Ā`.
//!
//! ```text
//!   hor[i,j] = Ā[i,j]·hor[i,j−1] + B̄x[i,j]       hor[i,−1] = 0
//!   h[i,j]   = Ā[i,j]·h[i−1,j]   + hor[i,j]       h[−1,j]   = 0
//!   y[i,j]   = Σ_d C^d[i,j]·h^d[i,j]
//! ```
//!
//! Each output position sees every input at or above-left of it. Planes are
//! stored row-major; multi-state inputs are stacked state-major (`N×H×W`).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Largest grid accepted by [`scan2d_oracle`].
pub const ORACLE_MAX_POSITIONS: usize = 1024;

/// A stack of `states` planes of `height × width` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2d<T> {
    pub height: usize,
    pub width: usize,
    pub states: usize,
    pub values: Vec<T>,
}

impl<T: Float> Grid2d<T> {
    pub fn new(height: usize, width: usize, states: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || states == 0 {
            return Err(Error::shape("grid extents must be at least 1"));
        }
        if values.len() != height * width * states {
            return Err(Error::shape(format!(
                "grid {states}×{height}×{width} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            states,
            values,
        })
    }

    pub fn plane(&self, d: usize) -> &[T] {
        let p = self.height * self.width;
        &self.values[d * p..][..p]
    }

    pub fn at(&self, d: usize, i: usize, j: usize) -> T {
        self.values[(d * self.height + i) * self.width + j]
    }
}

/// Output of [`scan2d_forward`] with the intermediates its adjoint needs.
#[derive(Clone, Debug)]
pub struct Scan2dOutput<T> {
    /// `[H×W]`
    pub y: Vec<T>,
    /// Horizontal-pass states, `N×H×W`.
    pub hor: Grid2d<T>,
    /// Final states, `N×H×W`.
    pub states: Grid2d<T>,
}

/// Gradients returned by [`scan2d_backward`].
#[derive(Clone, Debug)]
pub struct Scan2dGrads<T> {
    pub a_bar: Vec<T>,
    pub bx: Vec<T>,
    pub c: Vec<T>,
}

/// One of the four scan orientations; each is an involution on a plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    FlipBoth,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::Identity,
        Orientation::FlipHorizontal,
        Orientation::FlipVertical,
        Orientation::FlipBoth,
    ];

    fn flips(self) -> (bool, bool) {
        match self {
            Orientation::Identity => (false, false),
            Orientation::FlipHorizontal => (false, true),
            Orientation::FlipVertical => (true, false),
            Orientation::FlipBoth => (true, true),
        }
    }

    /// Writes the reoriented plane `src` into `dst`.
    pub fn apply<T: Copy>(self, src: &[T], h: usize, w: usize, dst: &mut [T]) {
        let (fv, fh) = self.flips();
        for i in 0..h {
            let si = if fv { h - 1 - i } else { i };
            let s = &src[si * w..][..w];
            let d = &mut dst[i * w..][..w];
            if fh {
                d.iter_mut().zip(s.iter().rev()).for_each(|(d, &s)| *d = s);
            } else {
                d.copy_from_slice(s);
            }
        }
    }

    /// Adds the reoriented plane `src` into `dst`.
    pub fn apply_add<T: Float>(self, src: &[T], h: usize, w: usize, dst: &mut [T]) {
        let (fv, fh) = self.flips();
        for i in 0..h {
            let si = if fv { h - 1 - i } else { i };
            let s = &src[si * w..][..w];
            let d = &mut dst[i * w..][..w];
            if fh {
                d.iter_mut().zip(s.iter().rev()).for_each(|(d, &s)| *d += s);
            } else {
                d.iter_mut().zip(s).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

/// One row of the recurrence, run right to left when `rev`, starting from
/// `init`. Returns the last state in traversal order.
#[inline]
fn row_scan<T: Float>(a: &[T], b: &[T], out: &mut [T], rev: bool, init: T) -> T {
    let mut s = init;
    if rev {
        for j in (0..a.len()).rev() {
            s = a[j] * s + b[j];
            out[j] = s;
        }
    } else {
        for j in 0..a.len() {
            s = a[j] * s + b[j];
            out[j] = s;
        }
    }
    s
}

/// Adjoint of [`row_scan`], in place: `g` holds `∂L/∂h` on entry and the
/// total state adjoint on exit. `carry` is the adjoint arriving from beyond
/// the row end; `∂L/∂Ā` is added into `g_a`. Returns the adjoint of `init`.
#[inline]
fn row_adjoint<T: Float>(a: &[T], states: &[T], g: &mut [T], g_a: &mut [T], rev: bool, init: T, carry: T) -> T {
    let w = a.len();
    let mut carry = carry;
    if rev {
        for j in 0..w {
            let gj = g[j] + carry;
            g[j] = gj;
            g_a[j] += gj * if j + 1 < w { states[j + 1] } else { init };
            carry = a[j] * gj;
        }
    } else {
        for j in (0..w).rev() {
            let gj = g[j] + carry;
            g[j] = gj;
            g_a[j] += gj * if j > 0 { states[j - 1] } else { init };
            carry = a[j] * gj;
        }
    }
    carry
}

/// Index visited at step `t` of a traversal over `h` rows or columns.
#[inline]
fn visit(fv: bool, t: usize, h: usize) -> usize {
    if fv {
        h - 1 - t
    } else {
        t
    }
}

/// Two-pass scan of a single `h × w` plane. `hor` and `out` receive the
/// horizontal and final states.
pub fn scan_plane<T: Float>(a_bar: &[T], bx: &[T], h: usize, w: usize, hor: &mut [T], out: &mut [T]) {
    scan_plane_oriented(Orientation::Identity, a_bar, bx, h, w, hor, out);
}

/// [`scan_plane`] of the reoriented plane, with inputs and states kept in
/// physical layout.
pub fn scan_plane_oriented<T: Float>(
    o: Orientation,
    a_bar: &[T],
    bx: &[T],
    h: usize,
    w: usize,
    hor: &mut [T],
    out: &mut [T],
) {
    for t0 in (0..h).step_by(STRIP) {
        scan_strip(o, a_bar, bx, h, w, t0..(t0 + STRIP).min(h), hor, out);
    }
}

/// Rows handled together by the strip kernel.
const STRIP: usize = 8;

/// Both passes for traversal rows `rows` of a plane, assuming the traversal
/// row before them is final. Working on strips keeps the touched rows
/// cache-resident whatever the grid size.
fn scan_strip<T: Float>(
    o: Orientation,
    a_bar: &[T],
    bx: &[T],
    h: usize,
    w: usize,
    rows: std::ops::Range<usize>,
    hor: &mut [T],
    out: &mut [T],
) {
    let (fv, fh) = o.flips();
    for t in rows.clone() {
        let r = visit(fv, t, h) * w;
        row_scan(&a_bar[r..][..w], &bx[r..][..w], &mut hor[r..][..w], fh, T::zero());
    }
    for t in rows {
        let i = visit(fv, t, h);
        if t == 0 {
            out[i * w..][..w].copy_from_slice(&hor[i * w..][..w]);
            continue;
        }
        let (prev, cur) = if fv {
            let (lo, hi) = out.split_at_mut((i + 1) * w);
            (&hi[..w], &mut lo[i * w..])
        } else {
            let (lo, hi) = out.split_at_mut(i * w);
            (&lo[(i - 1) * w..], &mut hi[..w])
        };
        let a = &a_bar[i * w..][..w];
        let hh = &hor[i * w..][..w];
        for j in 0..w {
            cur[j] = a[j] * prev[j] + hh[j];
        }
    }
}

/// Adjoint of [`scan_plane`]. Given `∂L/∂h` in `g_states`, writes `∂L/∂Ā` and
/// `∂L/∂(B̄x)`.
pub fn scan_plane_backward<T: Float>(
    a_bar: &[T],
    hor: &[T],
    states: &[T],
    g_states: &[T],
    h: usize,
    w: usize,
    g_a: &mut [T],
    g_bx: &mut [T],
) {
    g_bx.copy_from_slice(g_states);
    g_a.fill(T::zero());
    scan_plane_oriented_backward(Orientation::Identity, a_bar, hor, states, h, w, g_a, g_bx);
}

/// Adjoint of [`scan_plane_oriented`]. `g_bx` holds `∂L/∂h` on entry and
/// `∂L/∂(B̄x)` on exit; `∂L/∂Ā` is added into `g_a`.
pub fn scan_plane_oriented_backward<T: Float>(
    o: Orientation,
    a_bar: &[T],
    hor: &[T],
    states: &[T],
    h: usize,
    w: usize,
    g_a: &mut [T],
    g_bx: &mut [T],
) {
    let (fv, fh) = o.flips();
    // vertical adjoint, against traversal order
    for t in (0..h.saturating_sub(1)).rev() {
        let i = visit(fv, t, h);
        let nx = visit(fv, t + 1, h);
        let (cur, next) = if fv {
            let (lo, hi) = g_bx.split_at_mut(i * w);
            (&mut hi[..w], &lo[nx * w..][..w])
        } else {
            let (lo, hi) = g_bx.split_at_mut(nx * w);
            (&mut lo[i * w..], &hi[..w])
        };
        let a_next = &a_bar[nx * w..][..w];
        for j in 0..w {
            cur[j] += a_next[j] * next[j];
        }
    }
    for t in 1..h {
        let i = visit(fv, t, h) * w;
        let pv = visit(fv, t - 1, h) * w;
        for j in 0..w {
            g_a[i + j] += g_bx[i + j] * states[pv + j];
        }
    }
    // horizontal adjoint, columns against traversal order
    for t in (0..w).rev() {
        let j = visit(fh, t, w);
        if t + 1 < w {
            let nj = visit(fh, t + 1, w);
            for r in (0..h * w).step_by(w) {
                g_bx[r + j] += a_bar[r + nj] * g_bx[r + nj];
            }
        }
        if t > 0 {
            let pj = visit(fh, t - 1, w);
            for r in (0..h * w).step_by(w) {
                g_a[r + j] += g_bx[r + j] * hor[r + pj];
            }
        }
    }
}

/// The reoriented plane flattened row-major into one chain of `h·w` steps,
/// with inputs and states in physical layout.
pub fn scan_flat_oriented<T: Float>(o: Orientation, a_bar: &[T], bx: &[T], h: usize, w: usize, out: &mut [T]) {
    let (fv, fh) = o.flips();
    let mut s = T::zero();
    for t in 0..h {
        let r = visit(fv, t, h) * w;
        s = row_scan(&a_bar[r..r + w], &bx[r..r + w], &mut out[r..r + w], fh, s);
    }
}

/// Adjoint of [`scan_flat_oriented`], with the conventions of
/// [`scan_plane_oriented_backward`].
pub fn scan_flat_oriented_backward<T: Float>(
    o: Orientation,
    a_bar: &[T],
    states: &[T],
    h: usize,
    w: usize,
    g_a: &mut [T],
    g_bx: &mut [T],
) {
    let (fv, fh) = o.flips();
    let mut carry = T::zero();
    for t in (0..h).rev() {
        let r = visit(fv, t, h) * w;
        let init = if t > 0 {
            let pv = visit(fv, t - 1, h) * w;
            states[pv + if fh { 0 } else { w - 1 }]
        } else {
            T::zero()
        };
        carry = row_adjoint(&a_bar[r..r + w], &states[r..r + w], &mut g_bx[r..r + w], &mut g_a[r..r + w], fh, init, carry);
    }
}

fn check_planes<T>(h: usize, w: usize, n: usize, arrays: &[(&str, &[T])]) -> Result<()> {
    if h == 0 || w == 0 || n == 0 {
        return Err(Error::shape("scan2d extents must be at least 1"));
    }
    for (name, a) in arrays {
        if a.len() != n * h * w {
            return Err(Error::shape(format!(
                "scan2d {name} has {} values, expected {n}×{h}×{w}",
                a.len()
            )));
        }
    }
    Ok(())
}

/// Runs the scan for every state plane and aggregates `y = Σ_d C^d ⊙ h^d`.
///
/// `a_bar`, `bx` and `c` are `N×H×W` stacks.
pub fn scan2d_forward<T: Float>(a_bar: &[T], bx: &[T], c: &[T], h: usize, w: usize) -> Result<Scan2dOutput<T>> {
    let mut out = Scan2dOutput::empty();
    scan2d_forward_into(a_bar, bx, c, h, w, &mut out)?;
    Ok(out)
}

/// [`scan2d_forward`] writing into `out`, reusing its buffers.
pub fn scan2d_forward_into<T: Float>(a_bar: &[T], bx: &[T], c: &[T], h: usize, w: usize, out: &mut Scan2dOutput<T>) -> Result<()> {
    let n = prepare(a_bar, bx, c, h, w, out)?;
    let p = h * w;
    // one strip of every plane at a time, so y is aggregated while hot
    for t0 in (0..h).step_by(STRIP) {
        let rows = t0..(t0 + STRIP).min(h);
        for d in 0..n {
            let s = d * p..(d + 1) * p;
            let (hor, st) = (&mut out.hor.values[s.clone()], &mut out.states.values[s.clone()]);
            scan_strip(Orientation::Identity, &a_bar[s.clone()], &bx[s], h, w, rows.clone(), hor, st);
        }
        let states = &out.states.values;
        for i in rows {
            aggregate_row(&mut out.y[i * w..][..w], c, states, n, p, i * w);
        }
    }
    Ok(())
}

/// Parallel form: state planes run in parallel, then rows of `y` are
/// aggregated in parallel.
pub fn scan2d_forward_par<T: Float>(a_bar: &[T], bx: &[T], c: &[T], h: usize, w: usize) -> Result<Scan2dOutput<T>> {
    let mut out = Scan2dOutput::empty();
    scan2d_forward_par_into(a_bar, bx, c, h, w, &mut out)?;
    Ok(out)
}

/// [`scan2d_forward_par`] writing into `out`, reusing its buffers.
pub fn scan2d_forward_par_into<T: Float>(
    a_bar: &[T],
    bx: &[T],
    c: &[T],
    h: usize,
    w: usize,
    out: &mut Scan2dOutput<T>,
) -> Result<()> {
    let n = prepare(a_bar, bx, c, h, w, out)?;
    let p = h * w;
    out.hor
        .values
        .par_chunks_mut(p)
        .zip(out.states.values.par_chunks_mut(p))
        .enumerate()
        .for_each(|(d, (hor, st))| scan_plane(&a_bar[d * p..][..p], &bx[d * p..][..p], h, w, hor, st));
    let states = &out.states.values;
    out.y.par_chunks_mut(w).enumerate().for_each(|(i, row)| aggregate_row(row, c, states, n, p, i * w));
    Ok(())
}

/// One row of `y = Σ_d C^d ⊙ h^d`, starting at flat offset `at` of a plane.
fn aggregate_row<T: Float>(row: &mut [T], c: &[T], states: &[T], n: usize, p: usize, at: usize) {
    let w = row.len();
    row.fill(T::zero());
    for d in 0..n {
        let o = d * p + at;
        for ((yv, &cv), &hv) in row.iter_mut().zip(&c[o..][..w]).zip(&states[o..][..w]) {
            *yv += cv * hv;
        }
    }
}

impl<T: Float> Scan2dOutput<T> {
    /// An output with no storage, to be filled by the `_into` forms.
    pub fn empty() -> Self {
        let grid = || Grid2d {
            height: 0,
            width: 0,
            states: 0,
            values: Vec::new(),
        };
        Self {
            y: Vec::new(),
            hor: grid(),
            states: grid(),
        }
    }
}

/// Validates the stacks and sizes `out` for them. Returns the state count.
fn prepare<T: Float>(a_bar: &[T], bx: &[T], c: &[T], h: usize, w: usize, out: &mut Scan2dOutput<T>) -> Result<usize> {
    let n = a_bar.len() / (h * w).max(1);
    check_planes(h, w, n, &[("a_bar", a_bar), ("bx", bx), ("c", c)])?;
    let p = h * w;
    out.y.resize(p, T::zero());
    for g in [&mut out.hor, &mut out.states] {
        g.values.resize(n * p, T::zero());
        (g.height, g.width, g.states) = (h, w, n);
    }
    Ok(n)
}

/// Closed-form states for small grids:
///
/// ```text
///   h[i,j] = Σ_{i'≤i, j'≤j} (Π_{l=i'+1..i} Ā[l,j]) (Π_{k=j'+1..j} Ā[i',k]) B̄x[i',j']
/// ```
///
/// i.e. every source is carried right along its own row, then down the target
/// column. With constant `Ā = a` the coefficient is `a^(Manhattan distance)`.
/// Works on `N×H×W` stacks; rejects grids above [`ORACLE_MAX_POSITIONS`].
pub fn scan2d_oracle<T: Float>(a_bar: &[T], bx: &[T], h: usize, w: usize) -> Result<Vec<T>> {
    if h * w > ORACLE_MAX_POSITIONS {
        return Err(Error::TooLarge(h * w, ORACLE_MAX_POSITIONS));
    }
    let n = a_bar.len() / (h * w).max(1);
    check_planes(h, w, n, &[("a_bar", a_bar), ("bx", bx)])?;
    let p = h * w;
    let mut out = vec![T::zero(); n * p];
    for d in 0..n {
        let a = &a_bar[d * p..][..p];
        let b = &bx[d * p..][..p];
        for i in 0..h {
            for j in 0..w {
                let mut total = T::zero();
                // vertical factor for source row i' (product over rows i'+1..=i in column j)
                let mut vert = T::one();
                for ip in (0..=i).rev() {
                    if ip < i {
                        vert *= a[(ip + 1) * w + j];
                    }
                    let mut horiz = T::one();
                    for jp in (0..=j).rev() {
                        if jp < j {
                            horiz *= a[ip * w + jp + 1];
                        }
                        total += vert * horiz * b[ip * w + jp];
                    }
                }
                out[d * p + i * w + j] = total;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`scan2d_forward`] given `∂L/∂y`.
pub fn scan2d_backward<T: Float>(
    grad_y: &[T],
    a_bar: &[T],
    c: &[T],
    saved: &Scan2dOutput<T>,
) -> Result<Scan2dGrads<T>> {
    let (h, w, n) = (saved.states.height, saved.states.width, saved.states.states);
    let p = h * w;
    if grad_y.len() != p {
        return Err(Error::shape(format!("grad_y has {} values, expected {p}", grad_y.len())));
    }
    check_planes(h, w, n, &[("a_bar", a_bar), ("c", c)])?;
    let mut g_a = vec![T::zero(); n * p];
    let mut g_bx = vec![T::zero(); n * p];
    let mut g_c = vec![T::zero(); n * p];
    let mut g_h = vec![T::zero(); p];
    for d in 0..n {
        let s = d * p..(d + 1) * p;
        let cd = &c[s.clone()];
        let hd = saved.states.plane(d);
        for q in 0..p {
            g_h[q] = grad_y[q] * cd[q];
            g_c[d * p + q] = grad_y[q] * hd[q];
        }
        scan_plane_backward(
            &a_bar[s.clone()],
            saved.hor.plane(d),
            hd,
            &g_h,
            h,
            w,
            &mut g_a[s.clone()],
            &mut g_bx[s],
        );
    }
    Ok(Scan2dGrads {
        a_bar: g_a,
        bx: g_bx,
        c: g_c,
    })
}
