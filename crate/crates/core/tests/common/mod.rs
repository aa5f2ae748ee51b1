#![allow(dead_code)]

use mcg_core::autodiff::{Tape, Var};
use mcg_core::model::{Bound, Init, ParamStore};
use mcg_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Contracts `y` with fixed random weights so every output element matters.
pub fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed);
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let w = tape.constant(tape.shape(y).to_vec(), w)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error between analytic and central-difference gradients with
/// respect to every parameter in `store` and every tensor in `inputs`.
pub fn module_grad_check(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Tape<f64>, &Bound, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(&t.clone().with_requires_grad(true))).collect();
    let loss = build(&mut tape, &bound, &vars).unwrap();
    tape.backward(loss).unwrap();
    let mut analytic: Vec<f64> = store.grads(&tape, &bound).into_iter().flatten().collect();
    for (&v, t) in vars.iter().zip(inputs) {
        analytic.extend(tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]));
    }

    let eval = |s: &ParamStore<f64>, ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape, false);
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &bound, &vars).unwrap();
        tape.value(loss)[0]
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = store.clone();
    let sizes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = work.tensors_mut().nth(k).unwrap().data()[i];
            let at = |v: f64, w: &mut ParamStore<f64>| {
                w.tensors_mut().nth(k).unwrap().data_mut()[i] = v;
                eval(w, inputs)
            };
            let up = at(orig + FD_STEP, &mut work);
            let down = at(orig - FD_STEP, &mut work);
            at(orig, &mut work);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let mut ins = inputs.to_vec();
    for k in 0..ins.len() {
        for i in 0..ins[k].numel() {
            let orig = ins[k].data()[i];
            ins[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(store, &ins);
            ins[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(store, &ins);
            ins[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Gradient check with respect to `inputs` only.
pub fn grad_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    module_grad_check(&ParamStore::new(), inputs, &|t, _, v| build(t, v))
}

/// Builds a parameter store with `make`, then jitters every value so that
/// zero- or identity-initialized tensors do not hide gradient paths.
pub fn random_store<X>(seed: u64, make: impl FnOnce(&mut Init<'_, f64, ChaCha8Rng>) -> X) -> (ParamStore<f64>, X) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let module = {
        let mut init = Init::new(&mut store, &mut r);
        make(&mut init)
    };
    let mut r = rng(seed ^ 0x5eed);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    (store, module)
}
