mod common;

use common::{grad_check, module_grad_check, rand_tensor, random_store, rng, weighted_sum};
use mcg_core::autodiff::{bilinear_taps, Directions, ScanMode, ScanSpec};
use mcg_core::model::{
    ccf, deinterleave, srf, upsample2, Bound, CfgLevel, ChangeDetector, Decoder, DepthwiseKernel, Encoder,
    EncoderConfig, FlowMake, Mamba2dBlock, ModelConfig, ParamStore, StcBlock, Stem,
};
use mcg_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const FULL: ScanSpec = ScanSpec {
    mode: ScanMode::TwoD,
    directions: Directions::Four,
};

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        base_channels: 4,
        state_dim: 2,
        stage_depths: [1, 1, 2, 1],
        ..EncoderConfig::default()
    }
}

fn block(init_seed: u64, channels: usize, scan: ScanSpec) -> (ParamStore<f64>, Mamba2dBlock) {
    random_store(init_seed, |init| {
        Mamba2dBlock::new(init, "b", channels, 2, 2, 3, DepthwiseKernel::Square, scan)
    })
}

/// Evaluates `f` once on a fresh tape without gradients.
fn eval(
    store: &ParamStore<f64>,
    inputs: &[&Tensor<f64>],
    f: impl FnOnce(&mut Tape<f64>, &Bound, &[Var]) -> mcg_core::Result<Var>,
) -> mcg_core::Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let y = f(&mut tape, &p, &vars)?;
    Ok(tape.tensor(y))
}

#[test]
fn stem_quarters_extents() {
    let (store, stem) = random_store(1, |init| Stem::new(init, 16));
    let x = rand_tensor(&mut rng(2), &[3, 64, 64], 0.0, 1.0);
    let y = eval(&store, &[&x], |t, p, v| stem.forward(t, p, v[0])).unwrap();
    assert_eq!(y.shape(), &[16, 16, 16]);
}

#[test]
fn stem_maps_zero_to_zero_without_bias() {
    let (mut store, stem) = random_store(1, |init| Stem::new(init, 8));
    for b in [stem.conv1.bias, stem.conv2.bias].into_iter().flatten() {
        store.get_mut(b).data_mut().fill(0.0);
    }
    let x = Tensor::zeros([3, 32, 32]);
    let y = eval(&store, &[&x], |t, p, v| stem.forward(t, p, v[0])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_gradient() {
    let (store, stem) = random_store(3, |init| Stem::new(init, 4));
    let x = rand_tensor(&mut rng(4), &[3, 8, 8], 0.0, 1.0);
    let err = module_grad_check(&store, &[x], &|t, p, v| {
        let y = stem.forward(t, p, v[0])?;
        weighted_sum(t, y, 5)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn block_preserves_shape() {
    let (store, b) = block(1, 4, FULL);
    let x = rand_tensor(&mut rng(2), &[4, 5, 7], -1.0, 1.0);
    let y = eval(&store, &[&x], |t, p, v| b.forward(t, p, v[0])).unwrap();
    assert_eq!(y.shape(), x.shape());
}

#[test]
fn zeroed_output_projection_gives_identity() {
    let (mut store, b) = block(1, 4, FULL);
    store.get_mut(b.out_proj.weight).data_mut().fill(0.0);
    let x = rand_tensor(&mut rng(2), &[4, 6, 6], -1.0, 1.0);
    let y = eval(&store, &[&x], |t, p, v| b.forward(t, p, v[0])).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn block_gradient() {
    for (seed, scan) in [
        (10, FULL),
        (
            11,
            ScanSpec {
                mode: ScanMode::Flattened,
                directions: Directions::Four,
            },
        ),
    ] {
        let (store, b) = block(seed, 4, scan);
        let x = rand_tensor(&mut rng(seed + 1), &[4, 6, 6], -1.0, 1.0);
        let err = module_grad_check(&store, &[x], &|t, p, v| {
            let y = b.forward(t, p, v[0])?;
            weighted_sum(t, y, 7)
        });
        assert!(err < 1e-5, "{err}");
    }
}

#[test]
fn row_kernel_block_gradient() {
    let (store, b) = random_store(12, |init| {
        Mamba2dBlock::new(init, "b", 2, 2, 2, 3, DepthwiseKernel::Row, FULL)
    });
    let x = rand_tensor(&mut rng(13), &[2, 4, 5], -1.0, 1.0);
    let err = module_grad_check(&store, &[x], &|t, p, v| {
        let y = b.forward(t, p, v[0])?;
        weighted_sum(t, y, 8)
    });
    assert!(err < 1e-5, "{err}");
}

/// A single perturbed pixel reaches every output position through the scan.
#[test]
fn block_has_global_receptive_field() {
    let (mut store, b) = block(20, 2, FULL);
    // a 1×1 spatial mixer isolates the scan as the only path between sites
    let w = store.get_mut(b.dwconv.weight);
    let (c, k) = (w.shape()[0], w.shape()[2]);
    for ch in 0..c {
        for i in 0..k * k {
            w.data_mut()[ch * k * k + i] = if i == k * k / 2 { 1.0 } else { 0.0 };
        }
    }
    let x = rand_tensor(&mut rng(21), &[2, 4, 4], -1.0, 1.0);
    let base = eval(&store, &[&x], |t, p, v| b.forward(t, p, v[0])).unwrap();
    for q in 0..16 {
        let mut x2 = x.clone();
        x2.data_mut()[q] += 0.5;
        let moved = eval(&store, &[&x2], |t, p, v| b.forward(t, p, v[0])).unwrap();
        for pos in 0..16 {
            let changed = (0..2).any(|ch| moved.data()[ch * 16 + pos] != base.data()[ch * 16 + pos]);
            assert!(changed, "pixel {q} does not reach {pos}");
        }
    }
}

#[test]
fn encoder_shape_chain() {
    let cfg = EncoderConfig::default();
    let (store, enc) = random_store(1, |init| Encoder::new(init, &cfg, FULL));
    let x = rand_tensor(&mut rng(2), &[3, 64, 64], 0.0, 1.0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let v = tape.leaf(&x);
    let feats = enc.encode(&mut tape, &p, v).unwrap();
    let shapes: Vec<Vec<usize>> = feats.iter().map(|&f| tape.shape(f).to_vec()).collect();
    assert_eq!(shapes, vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4], vec![128, 2, 2]]);
}

#[test]
fn encoder_rejects_indivisible_extents() {
    let (store, enc) = random_store(1, |init| Encoder::new(init, &small_cfg(), FULL));
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let v = tape.leaf(&Tensor::zeros([3, 48, 64]));
    assert!(matches!(enc.encode(&mut tape, &p, v), Err(Error::Shape(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn shape_chain_holds_for_divisible_extents(hm in 1usize..4, wm in 1usize..4) {
        let cfg = small_cfg();
        let (store, enc) = random_store(1, |init| Encoder::new(init, &cfg, FULL));
        let (h, w) = (32 * hm, 32 * wm);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let v = tape.leaf(&Tensor::full([3, h, w], 0.5));
        let feats = enc.encode(&mut tape, &p, v).unwrap();
        for (s, &f) in feats.iter().enumerate() {
            prop_assert_eq!(tape.shape(f), &[4 << s, h >> (s + 2), w >> (s + 2)][..]);
        }
    }
}

#[test]
fn both_dates_share_encoder_parameters() {
    let cfg = ModelConfig {
        encoder: small_cfg(),
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    let model = ChangeDetector::<f64>::new(cfg, 0).unwrap();
    let mut r = rng(1);
    let (x1, x2) = (rand_tensor(&mut r, &[3, 32, 32], 0.0, 1.0), rand_tensor(&mut r, &[3, 32, 32], 0.0, 1.0));
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let (v1, v2) = (tape.leaf(&x1), tape.leaf(&x2));
    let out = model.forward(&mut tape, &p, v1, v2).unwrap();
    // the second date encoded on its own with the same bound store
    let alone = model.net.encoder.encode(&mut tape, &p, v2).unwrap();
    for s in 0..4 {
        assert_eq!(tape.value(out.features_t2[s]), tape.value(alone[s]));
    }
    // no date-specific copies of the encoder exist
    assert_eq!(model.params.iter().filter(|(n, _)| n.starts_with("encoder")).count(), {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(0);
        let mut init = mcg_core::model::Init::new(&mut store, &mut r);
        Encoder::new(&mut init, &small_cfg(), FULL);
        store.len()
    });
}

#[test]
fn encoding_is_deterministic() {
    let (store, enc) = random_store(5, |init| Encoder::new(init, &small_cfg(), FULL));
    let x = rand_tensor(&mut rng(6), &[3, 32, 32], 0.0, 1.0);
    let run = || {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let v = tape.leaf(&x);
        let f = enc.encode(&mut tape, &p, v).unwrap();
        f.iter().map(|&v| tape.value(v).to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn downsample_halves_extents_and_doubles_channels() {
    let (store, enc) = random_store(1, |init| Encoder::new(init, &small_cfg(), FULL));
    let x = rand_tensor(&mut rng(2), &[4, 8, 8], -1.0, 1.0);
    let y = eval(&store, &[&x], |t, p, v| enc.downsample(t, p, 0, v[0])).unwrap();
    assert_eq!(y.shape(), &[8, 4, 4]);
    let odd = rand_tensor(&mut rng(2), &[4, 7, 8], -1.0, 1.0);
    assert!(matches!(eval(&store, &[&odd], |t, p, v| enc.downsample(t, p, 0, v[0])), Err(Error::Shape(_))));
}

#[test]
fn selecting_kernel_picks_top_left_of_each_cell() {
    let (mut store, enc) = random_store(1, |init| Encoder::new(init, &small_cfg(), FULL));
    let conv = &enc.downsamples[0];
    let c = 4;
    let w = store.get_mut(conv.weight);
    w.data_mut().fill(0.0);
    for o in 0..c {
        w.data_mut()[((o * c + o) * 2) * 2] = 1.0;
    }
    store.get_mut(conv.bias.unwrap()).data_mut().fill(0.0);
    let x = rand_tensor(&mut rng(2), &[c, 8, 8], -1.0, 1.0);
    let y = eval(&store, &[&x], |t, p, v| enc.downsample(t, p, 0, v[0])).unwrap();
    for ch in 0..c {
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(y.at(&[ch, i, j]), x.at(&[ch, 2 * i, 2 * j]));
                assert_eq!(y.at(&[ch + c, i, j]), 0.0);
            }
        }
    }
}

#[test]
fn downsample_gradient() {
    let (store, enc) = random_store(7, |init| Encoder::new(init, &small_cfg(), FULL));
    let conv = enc.downsamples[0].clone();
    let mut sub = ParamStore::new();
    let w = sub.add("w", store.get(conv.weight).clone());
    let b = sub.add("b", store.get(conv.bias.unwrap()).clone());
    let x = rand_tensor(&mut rng(8), &[4, 4, 6], -1.0, 1.0);
    let err = module_grad_check(&sub, &[x], &|t, p, v| {
        let y = t.conv2d(v[0], p.var(w), Some(p.var(b)), 2, (0, 0), 1)?;
        weighted_sum(t, y, 9)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn ccf_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant([1, 1, 1], vec![5.0]).unwrap();
    let b = tape.constant([1, 1, 1], vec![7.0]).unwrap();
    let y = ccf(&mut tape, a, b).unwrap();
    assert_eq!(tape.value(y), &[5.0, 7.0]);

    let x = rand_tensor(&mut rng(1), &[4, 8, 8], -1.0, 1.0);
    let v = tape.leaf(&x);
    let y = ccf(&mut tape, v, v).unwrap();
    assert_eq!(tape.shape(y), &[8, 8, 8]);
    let (lo, hi) = tape.value(y).split_at(256);
    assert_eq!(lo, hi);

    let odd = tape.leaf(&Tensor::zeros([4, 8, 7]));
    assert!(matches!(ccf(&mut tape, v, odd), Err(Error::Shape(_))));
    assert!(matches!(srf(&mut tape, v, odd), Err(Error::Shape(_))));
}

#[test]
fn srf_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant([1, 1, 1], vec![1.5]).unwrap();
    let q = tape.constant([1, 1, 1], vec![-2.0]).unwrap();
    let y = srf(&mut tape, p, q).unwrap();
    assert_eq!(tape.value(y), &[-2.0, 1.5, 1.5, -2.0]);

    let x = rand_tensor(&mut rng(2), &[2, 3, 4], -1.0, 1.0);
    let v = tape.leaf(&x);
    let y = srf(&mut tape, v, v).unwrap();
    let out = tape.tensor(y);
    for ch in 0..2 {
        for m in 0..3 {
            for n in 0..4 {
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    assert_eq!(out.at(&[ch, 2 * m + a, 2 * n + b]), out.at(&[ch, 2 * m, 2 * n]));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn srf_round_trips(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (rand_tensor(&mut r, &[c, h, w], -1.0, 1.0), rand_tensor(&mut r, &[c, h, w], -1.0, 1.0));
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let y = srf(&mut tape, va, vb).unwrap();
        let [p00, p01, p10, p11] = deinterleave(&mut tape, y).unwrap();
        prop_assert_eq!(tape.value(p00), b.data());
        prop_assert_eq!(tape.value(p01), a.data());
        prop_assert_eq!(tape.value(p10), a.data());
        prop_assert_eq!(tape.value(p11), b.data());
        // swapping dates swaps phases
        let z = srf(&mut tape, vb, va).unwrap();
        prop_assert!(a.data() == b.data() || tape.value(y) != tape.value(z));
    }

    #[test]
    fn ccf_keeps_every_value(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (rand_tensor(&mut r, &[c, h, w], -1.0, 1.0), rand_tensor(&mut r, &[c, h, w], -1.0, 1.0));
        let mut tape = Tape::<f64>::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let y = ccf(&mut tape, va, vb).unwrap();
        let mut got = tape.value(y).to_vec();
        let mut want: Vec<f64> = a.data().iter().chain(b.data()).copied().collect();
        got.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        prop_assert_eq!(got, want);
    }
}

#[test]
fn stc_output_shape_and_order_sensitivity() {
    let cfg = small_cfg();
    let (store, stc) = random_store(3, |init| StcBlock::new(init, "stc", 3, 1, &cfg, FULL));
    let mut r = rng(4);
    let (a, b) = (rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0), rand_tensor(&mut r, &[3, 4, 5], -1.0, 1.0));
    let ab = eval(&store, &[&a, &b], |t, p, v| stc.forward(t, p, v[0], v[1])).unwrap();
    let ba = eval(&store, &[&b, &a], |t, p, v| stc.forward(t, p, v[1], v[0])).unwrap();
    let ba_swapped = eval(&store, &[&a, &b], |t, p, v| stc.forward(t, p, v[1], v[0])).unwrap();
    assert_eq!(ab.shape(), &[3, 4, 5]);
    assert_eq!(ab.data(), ba.data());
    assert_ne!(ab.data(), ba_swapped.data());
}

/// With identity blocks the four phases of an equal-date pair coincide.
#[test]
fn stc_phases_agree_on_equal_dates_with_identity_blocks() {
    let cfg = small_cfg();
    let (mut store, stc) = random_store(3, |init| StcBlock::new(init, "stc", 3, 2, &cfg, FULL));
    for b in &stc.blocks {
        store.get_mut(b.out_proj.weight).data_mut().fill(0.0);
    }
    let x = rand_tensor(&mut rng(4), &[3, 4, 4], -1.0, 1.0);
    let cat = eval(&store, &[&x], |t, p, v| stc.phases(t, p, v[0], v[0])).unwrap();
    let n = 3 * 16;
    for k in 1..4 {
        assert_eq!(&cat.data()[k * n..(k + 1) * n], &cat.data()[..n]);
    }
}

#[test]
fn stc_gradient() {
    let cfg = small_cfg();
    let (store, stc) = random_store(5, |init| StcBlock::new(init, "stc", 2, 1, &cfg, FULL));
    let mut r = rng(6);
    let ins = [rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0), rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0)];
    let err = module_grad_check(&store, &ins, &|t, p, v| {
        let y = stc.forward(t, p, v[0], v[1])?;
        weighted_sum(t, y, 3)
    });
    assert!(err < 1e-5, "{err}");
}

/// Independent `p ↦ p/2` bilinear upsampler with clamped borders.
fn upsample_oracle(x: &Tensor<f64>) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let pick = |ch: usize, i: usize, j: usize| x.at(&[ch, i.min(h - 1), j.min(w - 1)]);
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                let rows = if i % 2 == 0 { [i / 2, i / 2] } else { [i / 2, i / 2 + 1] };
                let cols = if j % 2 == 0 { [j / 2, j / 2] } else { [j / 2, j / 2 + 1] };
                let mut s = 0.0;
                for &r in &rows {
                    for &q in &cols {
                        s += pick(ch, r, q);
                    }
                }
                out.push(s / 4.0);
            }
        }
    }
    out
}

fn warp(coarse: &Tensor<f64>, flow: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (c, f) = (tape.leaf(coarse), tape.leaf(flow));
    let y = tape.warp(c, f).unwrap();
    tape.tensor(y)
}

#[test]
fn zero_flow_is_bilinear_upsampling() {
    for (seed, (c, h, w)) in [(1u64, (1, 1, 1)), (2, (2, 3, 4)), (3, (3, 5, 2)), (4, (1, 8, 8))] {
        let x = rand_tensor(&mut rng(seed), &[c, h, w], -1.0, 1.0);
        let y = warp(&x, &Tensor::zeros([2, 2 * h, 2 * w]));
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let up = upsample2(&mut tape, v).unwrap();
        assert!(common::max_abs_diff(y.data(), &upsample_oracle(&x)) <= 1e-6);
        assert_eq!(tape.value(up), y.data());
    }
}

#[test]
fn bilinear_weights_sum_to_one_everywhere() {
    let mut r = rng(9);
    for _ in 0..2000 {
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let (sy, sx) = (r.random_range(-3.0..9.0f64), r.random_range(-3.0..9.0f64));
        let taps = bilinear_taps(sy, sx, h, w);
        let total: f64 = taps.iter().map(|t| t.2).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(taps.iter().all(|t| t.0 < h && t.1 < w && t.2 >= 0.0));
    }
}

#[test]
fn constant_map_warps_to_constant() {
    let mut r = rng(2);
    let x = Tensor::full([2, 3, 4], 0.75);
    let flow = rand_tensor(&mut r, &[2, 6, 8], -5.0, 5.0);
    assert!(warp(&x, &flow).data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
}

#[test]
fn horizontal_flow_of_two_shifts_ramp_by_one_column() {
    let (h, w) = (3, 5);
    let ramp = Tensor::from_fn([1, h, w], |i| (i % w) as f64);
    let flow = Tensor::from_fn([2, 2 * h, 2 * w], |i| if i < 4 * h * w { 2.0 } else { 0.0 });
    let y = warp(&ramp, &flow);
    let base = warp(&ramp, &Tensor::zeros([2, 2 * h, 2 * w]));
    for i in 0..2 * h {
        for j in 0..2 * w {
            let want = (base.at(&[0, i, j]) + 1.0).min((w - 1) as f64);
            assert_eq!(y.at(&[0, i, j]), want);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn warp_is_linear_in_the_map(alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0), rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0));
        let flow = rand_tensor(&mut r, &[2, 6, 6], -3.0, 3.0);
        let mix = Tensor::from_fn([2, 3, 3], |i| alpha * a.data()[i] + beta * b.data()[i]);
        let (wa, wb, wm) = (warp(&a, &flow), warp(&b, &flow), warp(&mix, &flow));
        for i in 0..wm.numel() {
            prop_assert!((wm.data()[i] - alpha * wa.data()[i] - beta * wb.data()[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn warp_gradient() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let coarse = rand_tensor(&mut r, &[2, 3, 3], -1.0, 1.0);
        // keep sample points away from integer kinks of the bilinear weights
        let flow = Tensor::from_fn([2, 6, 6], |_| 2.0 * r.random_range(-2i32..2) as f64 + r.random_range(0.2..1.8));
        let err = grad_check(&[coarse, flow], &|t, v| {
            let y = t.warp(v[0], v[1])?;
            weighted_sum(t, y, seed)
        });
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn flow_make_starts_at_zero() {
    let (store, fm) = {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(1);
        let fm = FlowMake::new(&mut mcg_core::model::Init::new(&mut store, &mut r), 3);
        (store, fm)
    };
    let mut r = rng(2);
    let (c, f) = (rand_tensor(&mut r, &[3, 8, 8], -1.0, 1.0), rand_tensor(&mut r, &[3, 16, 16], -1.0, 1.0));
    let y = eval(&store, &[&c, &f], |t, p, v| fm.forward(t, p, v[0], v[1])).unwrap();
    assert_eq!(y.shape(), &[2, 16, 16]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    let bad = Tensor::zeros([3, 15, 16]);
    assert!(matches!(eval(&store, &[&c, &bad], |t, p, v| fm.forward(t, p, v[0], v[1])), Err(Error::Shape(_))));
}

#[test]
fn flow_make_gradient() {
    let (store, fm) = random_store(3, |init| FlowMake::new(init, 2));
    let mut r = rng(4);
    let ins = [rand_tensor(&mut r, &[2, 2, 3], -1.0, 1.0), rand_tensor(&mut r, &[2, 4, 6], -1.0, 1.0)];
    let err = module_grad_check(&store, &ins, &|t, p, v| {
        let y = fm.forward(t, p, v[0], v[1])?;
        weighted_sum(t, y, 5)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn cfg_with_zero_fine_is_conv_of_upsampled_coarse() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let level = CfgLevel::new(&mut mcg_core::model::Init::new(&mut store, &mut r), "cfg", 3, true);
    let coarse = rand_tensor(&mut r, &[3, 8, 8], -1.0, 1.0);
    let fine = Tensor::zeros([3, 16, 16]);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let (c, f) = (tape.leaf(&coarse), tape.leaf(&fine));
    let (out, flow) = level.forward(&mut tape, &p, c, f).unwrap();
    let up = upsample2(&mut tape, c).unwrap();
    let want = level.fuse.forward(&mut tape, &p, up).unwrap();
    assert_eq!(tape.shape(out), &[3, 16, 16]);
    assert_eq!(tape.value(out), tape.value(want));
    assert!(tape.value(flow.unwrap()).iter().all(|&v| v == 0.0));
}

#[test]
fn cfg_gradient() {
    for use_flow in [true, false] {
        let (store, level) = random_store(6, |init| CfgLevel::new(init, "cfg", 2, use_flow));
        let mut r = rng(7);
        let ins = [rand_tensor(&mut r, &[2, 2, 2], -1.0, 1.0), rand_tensor(&mut r, &[2, 4, 4], -1.0, 1.0)];
        let err = module_grad_check(&store, &ins, &|t, p, v| {
            let (y, _) = level.forward(t, p, v[0], v[1])?;
            weighted_sum(t, y, 8)
        });
        assert!(err < 1e-5, "use_flow {use_flow}: {err}");
    }
}

fn pyramid(r: &mut impl Rng, d: usize, finest: usize) -> Vec<Tensor<f64>> {
    (0..4).map(|s| rand_tensor(r, &[d, finest >> s, finest >> s], -1.0, 1.0)).collect()
}

#[test]
fn decoder_outputs_a_probability_simplex() {
    let (store, dec) = random_store(8, |init| Decoder::new(init, 4, true));
    let levels = pyramid(&mut rng(9), 4, 8);
    let refs: Vec<&Tensor<f64>> = levels.iter().collect();
    let mut flows = 0;
    let lp = eval(&store, &refs, |t, p, v| {
        let out = dec.forward(t, p, &[v[0], v[1], v[2], v[3]])?;
        flows = out.flows.len();
        for &f in &out.flows {
            let extent = (t.shape(f)[1] + t.shape(f)[2]) as f64;
            assert!(t.value(f).iter().all(|d| d.is_finite() && d.abs() < extent));
        }
        Ok(out.log_probs)
    })
    .unwrap();
    assert_eq!(flows, 3);
    assert_eq!(lp.shape(), &[2, 32, 32]);
    for q in 0..32 * 32 {
        let (p0, p1) = (lp.data()[q].exp(), lp.data()[1024 + q].exp());
        assert!(p0 >= 0.0 && p1 >= 0.0);
        assert!((p0 + p1 - 1.0).abs() <= 1e-6);
    }
    let again = eval(&store, &refs, |t, p, v| Ok(dec.forward(t, p, &[v[0], v[1], v[2], v[3]])?.log_probs)).unwrap();
    assert_eq!(lp.data(), again.data());
}

#[test]
fn decoder_without_flow_has_no_flow_layers() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let dec = Decoder::new(&mut mcg_core::model::Init::new(&mut store, &mut r), 4, false);
    assert!(dec.levels.iter().all(|l| l.flow.is_none()));
    assert!(store.iter().all(|(n, _)| !n.contains("flow")));
    let model = ChangeDetector::<f64>::new(
        ModelConfig {
            use_flow: false,
            ..ModelConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(model.params.iter().all(|(n, _)| !n.contains("flow")));
    let full = ChangeDetector::<f64>::new(ModelConfig::default(), 0).unwrap();
    assert_eq!(full.params.iter().filter(|(n, _)| n.contains("flow_make")).count(), 3 * 4);
}

#[test]
fn decoder_gradient() {
    let (store, dec) = random_store(10, |init| Decoder::new(init, 2, true));
    let levels = pyramid(&mut rng(11), 2, 8);
    let err = module_grad_check(&store, &levels, &|t, p, v| {
        let out = dec.forward(t, p, &[v[0], v[1], v[2], v[3]])?;
        weighted_sum(t, out.log_probs, 12)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn predict_matches_argmax_and_sizes() {
    let cfg = ModelConfig {
        encoder: small_cfg(),
        decoder_channels: 4,
        ..ModelConfig::default()
    };
    let model = ChangeDetector::<f64>::new(cfg, 3).unwrap();
    let mut r = rng(4);
    let (a, b) = (rand_tensor(&mut r, &[3, 32, 64], 0.0, 1.0), rand_tensor(&mut r, &[3, 32, 64], 0.0, 1.0));
    let pred = model.predict(&a, &b).unwrap();
    assert_eq!(pred.probs.shape(), &[2, 32, 64]);
    assert_eq!(pred.mask.len(), 32 * 64);
    assert_eq!(pred.flows.len(), 3);
    let plane = 32 * 64;
    for q in 0..plane {
        assert_eq!(pred.mask[q], u8::from(pred.probs.data()[plane + q] > pred.probs.data()[q]));
    }
    let mismatched = Tensor::zeros([3, 32, 32]);
    assert!(model.predict(&a, &mismatched).is_err());
}
