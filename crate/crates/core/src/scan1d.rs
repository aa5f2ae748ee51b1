//! Input-dependent discretization and the 1D selective scan.
//!
//! A sequence `x[L×C]` drives a depthwise state-space model with `N` states per
//! channel:
//!
//! ```text
//!   Δ_t  = softplus(W_Δ x_t + b_Δ)          (per channel)
//!   Ā_t  = exp(Δ_t · A)                      A = −exp(log_a) < 0
//!   B̄_t  = Δ_t · B(x_t),   C_t = C(x_t)
//!   h_t  = Ā_t ⊙ h_{t−1} + B̄_t x_t,   h_0 = 0
//!   y_t  = Σ_d C_t^d h_t^d
//! ```
//!
//! There is no direct feedthrough term: `y_t` depends on `x_t` only through
//! the state.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Default number of positions per chunk in [`scan_parallel`].
pub const DEFAULT_CHUNK: usize = 64;

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) without overflow for large x
    if x > T::lit(20.0) {
        x
    } else if x < T::lit(-20.0) {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Learnable parameters of a depthwise selective SSM over `channels` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T> {
    pub channels: usize,
    pub state_dim: usize,
    /// `[C×N]`; `A = −exp(log_a)`.
    pub log_a: Vec<T>,
    /// `[N×C]`
    pub proj_b: Vec<T>,
    /// `[N×C]`
    pub proj_c: Vec<T>,
    /// `[C×C]`
    pub proj_delta: Vec<T>,
    /// `[C]`
    pub delta_bias: Vec<T>,
}

impl<T: Float> SsmParams<T> {
    /// Random projections with `A^d = −d` for `d = 1..N` in every channel.
    pub fn init(channels: usize, state_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || state_dim == 0 {
            return Err(Error::Config("SSM needs at least one channel and one state".into()));
        }
        let scale = 1.0 / (channels as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("finite scale");
        let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::lit(normal.sample(rng))).collect() };
        Ok(Self {
            channels,
            state_dim,
            log_a: a_log_init(channels, state_dim),
            proj_b: draw(state_dim * channels),
            proj_c: draw(state_dim * channels),
            proj_delta: draw(channels * channels),
            delta_bias: vec![T::lit(-2.0); channels],
        })
    }

    /// The (strictly negative) transition rates `A[c, d]`.
    pub fn a(&self) -> Vec<T> {
        self.log_a.iter().map(|&v| -v.exp()).collect()
    }
}

/// `log_a[c, d] = ln d` for `d = 1..N`, so that `A[c, d] = −d`.
pub fn a_log_init<T: Float>(channels: usize, state_dim: usize) -> Vec<T> {
    (0..channels)
        .flat_map(|_| (1..=state_dim).map(|d| T::lit((d as f64).ln())))
        .collect()
}

/// Discretized per-position coefficients for every channel.
#[derive(Clone, Debug)]
pub struct Discretized<T> {
    pub len: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// `[L×C]`, post-softplus step sizes.
    pub delta: Vec<T>,
    /// `[C×L×N]`, `Ā_t` per channel.
    pub a_bar: Vec<T>,
    /// `[C×L×N]`, `B̄_t x_t` per channel.
    pub bx: Vec<T>,
    /// `[L×N]`, shared output projection `C_t`.
    pub c: Vec<T>,
}

impl<T: Float> Discretized<T> {
    pub fn channel_a_bar(&self, channel: usize) -> &[T] {
        let n = self.len * self.state_dim;
        &self.a_bar[channel * n..][..n]
    }

    pub fn channel_bx(&self, channel: usize) -> &[T] {
        let n = self.len * self.state_dim;
        &self.bx[channel * n..][..n]
    }
}

pub fn discretize<T: Float>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Discretized<T>> {
    let (len, ch, n) = (x.shape()[0], params.channels, params.state_dim);
    if x.rank() != 2 || x.shape()[1] != ch || len == 0 {
        return Err(Error::shape(format!(
            "discretize expects a non-empty L×{ch} input, got {:?}",
            x.shape()
        )));
    }
    let a = params.a();
    let xs = x.data();
    let mut delta = vec![T::zero(); len * ch];
    let mut b = vec![T::zero(); len * n];
    let mut c = vec![T::zero(); len * n];
    for t in 0..len {
        let xt = &xs[t * ch..][..ch];
        for o in 0..ch {
            let row = &params.proj_delta[o * ch..][..ch];
            let pre = dot(row, xt) + params.delta_bias[o];
            delta[t * ch + o] = softplus(pre);
        }
        for d in 0..n {
            b[t * n + d] = dot(&params.proj_b[d * ch..][..ch], xt);
            c[t * n + d] = dot(&params.proj_c[d * ch..][..ch], xt);
        }
    }
    if delta.iter().chain(&b).chain(&c).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("SSM projection".into()));
    }
    let mut a_bar = vec![T::zero(); ch * len * n];
    let mut bx = vec![T::zero(); ch * len * n];
    for k in 0..ch {
        for t in 0..len {
            let dt = delta[t * ch + k];
            let xv = xs[t * ch + k];
            for d in 0..n {
                let i = (k * len + t) * n + d;
                a_bar[i] = (dt * a[k * n + d]).exp();
                bx[i] = dt * b[t * n + d] * xv;
            }
        }
    }
    Ok(Discretized {
        len,
        channels: ch,
        state_dim: n,
        delta,
        a_bar,
        bx,
        c,
    })
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// One element of the linear recurrence `s ↦ a·s + b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanElement<T> {
    pub a: T,
    pub b: T,
}

impl<T: Float> ScanElement<T> {
    pub const fn new(a: T, b: T) -> Self {
        Self { a, b }
    }

    /// Apply `self` first, then `next`: `(a₁,b₁)∘(a₂,b₂) = (a₁a₂, a₂b₁ + b₂)`.
    #[inline]
    pub fn then(self, next: Self) -> Self {
        Self {
            a: self.a * next.a,
            b: next.a * self.b + next.b,
        }
    }

    #[inline]
    pub fn apply(self, state: T) -> T {
        self.a * state + self.b
    }
}

fn check_steps<T>(a_bar: &[T], bx: &[T], len: usize, n: usize) -> Result<()> {
    if a_bar.len() != len * n || bx.len() != len * n {
        return Err(Error::shape(format!(
            "scan expects {len}×{n} coefficients, got {} and {}",
            a_bar.len(),
            bx.len()
        )));
    }
    Ok(())
}

/// Left-to-right recurrence over `[L×N]` coefficients; returns states `[L×N]`.
pub fn scan_sequential<T: Float>(a_bar: &[T], bx: &[T], len: usize, n: usize) -> Result<Vec<T>> {
    check_steps(a_bar, bx, len, n)?;
    let mut h = vec![T::zero(); len * n];
    scan_into(a_bar, bx, n, &mut h);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sequential scan".into()));
    }
    Ok(h)
}

/// Unchecked recurrence used by the fused kernels. `out` may alias neither input.
#[inline]
pub(crate) fn scan_into<T: Float>(a_bar: &[T], bx: &[T], n: usize, out: &mut [T]) {
    if n == 1 {
        let mut s = T::zero();
        for ((o, &a), &b) in out.iter_mut().zip(a_bar).zip(bx) {
            s = a * s + b;
            *o = s;
        }
        return;
    }
    let len = out.len() / n;
    out[..n].copy_from_slice(&bx[..n]);
    for t in 1..len {
        let (prev, cur) = out[(t - 1) * n..(t + 1) * n].split_at_mut(n);
        let a = &a_bar[t * n..][..n];
        let b = &bx[t * n..][..n];
        for d in 0..n {
            cur[d] = a[d] * prev[d] + b[d];
        }
    }
}

/// Chunked parallel scan with the associative operator [`ScanElement::then`].
///
/// Each chunk computes its local inclusive prefix in parallel, chunk carries are
/// combined sequentially, and a second parallel pass folds the carry into every
/// position.
pub fn scan_parallel<T: Float>(a_bar: &[T], bx: &[T], len: usize, n: usize, chunk: usize) -> Result<Vec<T>> {
    check_steps(a_bar, bx, len, n)?;
    let chunk = chunk.max(1);
    let span = chunk * n;
    // local inclusive prefixes per chunk, as (cumulative a, cumulative b)
    let mut cum_a = vec![T::zero(); len * n];
    let mut cum_b = vec![T::zero(); len * n];
    cum_a
        .par_chunks_mut(span)
        .zip(cum_b.par_chunks_mut(span))
        .zip(a_bar.par_chunks(span).zip(bx.par_chunks(span)))
        .for_each(|((ca, cb), (a, b))| {
            let steps = a.len() / n;
            for d in 0..n {
                let mut acc = ScanElement::new(a[d], b[d]);
                ca[d] = acc.a;
                cb[d] = acc.b;
                for t in 1..steps {
                    let i = t * n + d;
                    acc = acc.then(ScanElement::new(a[i], b[i]));
                    ca[i] = acc.a;
                    cb[i] = acc.b;
                }
            }
        });
    // exclusive carries: state entering each chunk
    let chunks = len.div_ceil(chunk);
    let mut carry = vec![T::zero(); chunks * n];
    for k in 1..chunks {
        let last = (k * chunk - 1) * n;
        for d in 0..n {
            let total = ScanElement::new(cum_a[last + d], cum_b[last + d]);
            carry[k * n + d] = total.apply(carry[(k - 1) * n + d]);
        }
    }
    let mut h = vec![T::zero(); len * n];
    h.par_chunks_mut(span).enumerate().for_each(|(k, out)| {
        let base = k * span;
        let c = &carry[k * n..][..n];
        for (j, o) in out.iter_mut().enumerate() {
            let d = j % n;
            *o = ScanElement::new(cum_a[base + j], cum_b[base + j]).apply(c[d]);
        }
    });
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("parallel scan".into()));
    }
    Ok(h)
}

/// `y_t = Σ_d C_t^d h_t^d` for states and projections laid out `[L×N]`.
pub fn aggregate_output<T: Float>(h: &[T], c: &[T], n: usize) -> Result<Vec<T>> {
    if h.len() != c.len() || n == 0 || !h.len().is_multiple_of(n) {
        return Err(Error::shape(format!(
            "aggregate_output: {} states vs {} coefficients with N={n}",
            h.len(),
            c.len()
        )));
    }
    Ok(h.chunks(n).zip(c.chunks(n)).map(|(hs, cs)| dot(hs, cs)).collect())
}

/// Adjoint of the recurrence: given `∂L/∂h` returns `(∂L/∂Ā, ∂L/∂(B̄x))`.
///
/// The adjoint state runs right to left: `G_t = g_t + Ā_{t+1} G_{t+1}`.
pub fn scan_backward<T: Float>(a_bar: &[T], states: &[T], grad_states: &[T], len: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut g_a = vec![T::zero(); len * n];
    let mut g_b = vec![T::zero(); len * n];
    scan_backward_into(a_bar, states, grad_states, n, &mut g_a, &mut g_b);
    (g_a, g_b)
}

/// Accumulating form of [`scan_backward`]: `g_b` receives the adjoint state
/// (overwritten), `g_a` is overwritten with the transition gradients.
pub(crate) fn scan_backward_into<T: Float>(
    a_bar: &[T],
    states: &[T],
    grad_states: &[T],
    n: usize,
    g_a: &mut [T],
    g_b: &mut [T],
) {
    let len = states.len() / n;
    if len == 0 {
        return;
    }
    for t in (0..len).rev() {
        for d in 0..n {
            let i = t * n + d;
            let carried = if t + 1 < len {
                a_bar[i + n] * g_b[i + n]
            } else {
                T::zero()
            };
            let g = grad_states[i] + carried;
            g_b[i] = g;
            g_a[i] = if t > 0 { g * states[i - n] } else { T::zero() };
        }
    }
}

/// Full 1D selective SSM on `x[L×C]`, sequential scan; returns `y[L×C]`.
pub fn selective_scan_1d<T: Float>(params: &SsmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let disc = discretize(params, x)?;
    let (len, ch, n) = (disc.len, disc.channels, disc.state_dim);
    let mut y = vec![T::zero(); len * ch];
    for k in 0..ch {
        let h = scan_sequential(disc.channel_a_bar(k), disc.channel_bx(k), len, n)?;
        let yk = aggregate_output(&h, &disc.c, n)?;
        for t in 0..len {
            y[t * ch + k] = yk[t];
        }
    }
    Tensor::new(vec![len, ch], y)
}
