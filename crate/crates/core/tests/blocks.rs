use candle_core::{DType, Device, Tensor};
use lsm_yolo::lae::{depth_to_space, lightweight_branch, space_to_depth_regroup, Lae, LaeConfig, SLICES};
use lsm_yolo::msfm::{channel_match, directional_pools, MatchNeck, Msfm, MsfmConfig};
use lsm_yolo::nn::{Conv2d, ConvSpec, Ctx, ParamStore};
use lsm_yolo::rfa::{RfaConfig, RfaConv};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    // Small LCG so inputs are reproducible without touching candle's RNG.
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v: Vec<f64> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regroup_is_a_bijection(b in 1usize..3, c in 1usize..4, h2 in 1usize..5, w2 in 1usize..5, seed in any::<u64>()) {
        let x = randn(&[b, c, 2 * h2, 2 * w2], seed);
        let y = space_to_depth_regroup(&x).unwrap();
        prop_assert_eq!(y.dims(), &[b, c, h2, w2, SLICES]);
        prop_assert_eq!(flat(&depth_to_space(&y).unwrap()), flat(&x));
        let mut a = flat(&x);
        let mut z = flat(&y);
        a.sort_by(f64::total_cmp);
        z.sort_by(f64::total_cmp);
        prop_assert_eq!(a, z);
    }

    #[test]
    fn lae_weights_are_a_softmax(h2 in 1usize..5, w2 in 1usize..5, seed in any::<u64>()) {
        let store = ParamStore::new(seed, DType::F64);
        let lae = Lae::new(&store.root().pp("lae"), LaeConfig::new(8, 8, 4)).unwrap();
        let x = randn(&[2, 8, 2 * h2, 2 * w2], seed ^ 1);
        let w = lae.adaptive_weights(&x, &Ctx::eval()).unwrap();
        prop_assert_eq!(w.dims(), &[2, 1, h2, w2, SLICES]);
        let v = flat(&w);
        for cell in v.chunks(SLICES) {
            prop_assert!((cell.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(cell.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn lae_output_is_a_convex_combination(seed in any::<u64>()) {
        let store = ParamStore::new(seed, DType::F64);
        let lae = Lae::new(&store.root().pp("lae"), LaeConfig::new(8, 8, 4)).unwrap();
        let x = randn(&[1, 8, 6, 4], seed ^ 2);
        let ctx = Ctx::eval();
        let out = flat(&lae.forward(&x, &ctx).unwrap());
        let slices = lightweight_branch(&space_to_depth_regroup(&x).unwrap(), lae.extract_conv(), &ctx).unwrap();
        let s = flat(&slices);
        for (i, o) in out.iter().enumerate() {
            let cell = &s[i * SLICES..(i + 1) * SLICES];
            let lo = cell.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
        }
    }

    #[test]
    fn descriptors_are_consistent(c in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = randn(&[2, c, h, w], seed);
        let d = directional_pools(&x).unwrap();
        let fc = flat(&d.channel);
        let via_h = flat(&d.height.mean_keepdim(2).unwrap());
        let via_w = flat(&d.width.mean_keepdim(3).unwrap());
        for i in 0..fc.len() {
            prop_assert!((fc[i] - via_h[i]).abs() < 1e-6);
            prop_assert!((fc[i] - via_w[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn msfm_weights_lie_strictly_inside_unit_interval(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let store = ParamStore::new(seed, DType::F64);
        let m = Msfm::new(&store.root().pp("m"), MsfmConfig::new(8, true)).unwrap();
        let x = randn(&[1, 8, h, w], seed ^ 3);
        let s = m.spatial_match(&directional_pools(&x).unwrap(), &Ctx::eval()).unwrap().unwrap();
        prop_assert_eq!(s.height.dims(), &[1, 8, h, 1]);
        prop_assert_eq!(s.width.dims(), &[1, 8, 1, w]);
        for t in [&s.height_weight, &s.width_weight] {
            prop_assert!(flat(t).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn msfm_and_matchneck_preserve_shape(c2 in 4usize..7, h in 1usize..6, w in 1usize..6, residual in any::<bool>()) {
        let c = 2 * c2;
        let store = ParamStore::new(1, DType::F64);
        let m = Msfm::new(&store.root().pp("m"), MsfmConfig::new(c, residual)).unwrap();
        let x = randn(&[2, c, h, w], 9);
        let y = m.forward(&x, &Ctx::eval()).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
        let neck = MatchNeck::new(&store.root().pp("n"), 2 * c, 12, 2, MsfmConfig::new(c, residual)).unwrap();
        let x = randn(&[1, 2 * c, h, w], 10);
        let y = neck.forward(&x, &Ctx::eval()).unwrap();
        prop_assert_eq!(y.dims(), &[1, 12, h, w]);
    }
}

#[test]
fn regroup_orders_slices_row_major() {
    let x = Tensor::from_vec(vec![1f64, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
    assert_eq!(flat(&space_to_depth_regroup(&x).unwrap()), vec![1., 2., 3., 4.]);
}

#[test]
fn odd_dims_are_rejected() {
    let store = ParamStore::new(0, DType::F64);
    let lae = Lae::new(&store.root(), LaeConfig::new(4, 4, 2)).unwrap();
    let e = lae.forward(&randn(&[1, 4, 5, 4], 0), &Ctx::eval()).unwrap_err();
    assert_eq!(e.kind(), "odd-spatial-dims");
    let e = lae.forward(&randn(&[1, 6, 4, 4], 0), &Ctx::eval()).unwrap_err();
    assert_eq!(e.kind(), "config-mismatch");
    let e = Lae::new(&store.root().pp("x"), LaeConfig { enable_dm: false, ..LaeConfig::new(4, 8, 2) }).unwrap_err();
    assert_eq!(e.kind(), "config-mismatch");
}

#[test]
fn group_conv_has_exactly_one_nth_of_the_parameters() {
    for (cin, cout, k) in [(64, 128, 1), (16, 32, 3), (24, 24, 1)] {
        let dense = ParamStore::new(0, DType::F32);
        Conv2d::new(&dense.root(), ConvSpec::new(cin, cout, k)).unwrap();
        for n in [1, 2, 4, 8] {
            let grouped = ParamStore::new(0, DType::F32);
            Conv2d::new(&grouped.root(), ConvSpec::new(cin, cout, k).groups(n)).unwrap();
            assert_eq!(grouped.count_learnable() * n, dense.count_learnable(), "{cin}->{cout} k{k} N{n}");
        }
    }
    let s = ParamStore::new(0, DType::F32);
    Conv2d::new(&s.root(), ConvSpec::new(64, 128, 1).groups(4)).unwrap();
    assert_eq!(s.count_learnable(), 2048);
}

#[test]
fn lae_branch_shares_weights_across_slices() {
    let store = ParamStore::new(3, DType::F64);
    let lae = Lae::new(&store.root().pp("lae"), LaeConfig::new(4, 4, 2)).unwrap();
    // Every 2×2 cell constant → all four slices identical.
    let base = randn(&[1, 4, 3, 3], 5);
    let x = base.upsample_nearest2d(6, 6).unwrap();
    let out = lightweight_branch(&space_to_depth_regroup(&x).unwrap(), lae.extract_conv(), &Ctx::eval()).unwrap();
    for cell in flat(&out).chunks(SLICES) {
        assert!(cell.iter().all(|v| *v == cell[0]));
    }
}

#[test]
fn zeroed_logits_give_the_slice_mean() {
    let store = ParamStore::new(4, DType::F64);
    let lae = Lae::new(&store.root().pp("lae"), LaeConfig::new(4, 8, 2)).unwrap();
    let wc = lae.weight_conv().unwrap();
    wc.weight().set(&wc.weight().zeros_like().unwrap()).unwrap();
    wc.bias_var().unwrap().set(&wc.bias_var().unwrap().zeros_like().unwrap()).unwrap();
    let x = randn(&[2, 4, 4, 6], 6);
    let ctx = Ctx::eval();
    let w = flat(&lae.adaptive_weights(&x, &ctx).unwrap());
    assert!(w.iter().all(|v| *v == 0.25));
    let slices = lightweight_branch(&space_to_depth_regroup(&x).unwrap(), lae.extract_conv(), &ctx).unwrap();
    let expect = lae.dimension_mapping(&slices.mean(4).unwrap(), &ctx).unwrap();
    let got = lae.forward(&x, &ctx).unwrap();
    let diff = (got - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn lae_halves_spatial_dims_and_maps_channels() {
    let store = ParamStore::new(0, DType::F32);
    let lae = Lae::new(&store.root(), LaeConfig::new(64, 128, 4)).unwrap();
    let x = Tensor::zeros((1, 64, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(lae.forward(&x, &Ctx::eval()).unwrap().dims(), &[1, 128, 32, 32]);
}

#[test]
fn msfm_without_attention_is_a_plain_merge() {
    for residual in [false, true] {
        let store = ParamStore::new(2, DType::F64);
        let cfg = MsfmConfig {
            enable_spatial: false,
            enable_channel: false,
            ..MsfmConfig::new(8, residual)
        };
        let m = Msfm::new(&store.root(), cfg).unwrap();
        let x = randn(&[2, 8, 5, 3], 7);
        let ctx = Ctx::eval();
        let res = if residual { (&x + &x).unwrap() } else { x.clone() };
        let expect = m.merge_conv().forward(&Tensor::cat(&[&x, &res], 1).unwrap(), &ctx).unwrap();
        assert_eq!(flat(&m.forward(&x, &ctx).unwrap()), flat(&expect));
    }
}

#[test]
fn channel_match_examples() {
    let fc = randn(&[1, 3, 1, 1], 1);
    let zero_logits = Tensor::zeros((1, 3, 7, 1), DType::F64, &Device::Cpu).unwrap();
    let half = zero_logits.affine(0.0, 0.5).unwrap();
    let got = flat(&channel_match(&fc, &half).unwrap());
    for (g, f) in got.iter().zip(flat(&fc)) {
        assert_eq!(*g, 0.5 * f);
    }
    let zero = channel_match(&fc.zeros_like().unwrap(), &half).unwrap();
    assert!(flat(&zero).iter().all(|v| *v == 0.0));
}

#[test]
fn msfm_propagates_spatial_constancy() {
    let store = ParamStore::new(8, DType::F64);
    let m = Msfm::new(&store.root(), MsfmConfig::new(8, true)).unwrap();
    let x = randn(&[1, 8, 1, 1], 3).broadcast_as((1, 8, 4, 5)).unwrap().contiguous().unwrap();
    let y = flat(&m.forward(&x, &Ctx::eval()).unwrap());
    for ch in y.chunks(20) {
        assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-12));
    }
}

#[test]
fn rfa_attention_sums_to_one_per_field() {
    let store = ParamStore::new(5, DType::F64);
    let cfg = RfaConfig {
        in_channels: 3,
        out_channels: 6,
        kernel_size: 3,
        stride: 1,
    };
    let rfa = RfaConv::new(&store.root(), cfg).unwrap();
    let x = randn(&[2, 3, 5, 7], 4);
    let att = rfa.attention_map(&x, &Ctx::eval()).unwrap();
    assert_eq!(att.dims(), &[2, 3, 9, 5, 7]);
    let s = flat(&att.sum(2).unwrap());
    assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9));
    assert_eq!(rfa.forward(&x, &Ctx::eval()).unwrap().dims(), &[2, 6, 5, 7]);
    let strided = RfaConv::new(&store.root().pp("s"), RfaConfig { stride: 2, ..cfg }).unwrap();
    assert_eq!(strided.forward(&x, &Ctx::eval()).unwrap().dims(), &[2, 6, 3, 4]);
}

#[test]
fn matchneck_rejects_odd_channels() {
    let store = ParamStore::new(0, DType::F32);
    let e = MatchNeck::new(&store.root(), 9, 8, 1, MsfmConfig::new(8, false)).unwrap_err();
    assert_eq!(e.kind(), "config-mismatch");
}
