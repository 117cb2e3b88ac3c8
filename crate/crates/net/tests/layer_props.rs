use candle_core::{Device, Tensor, Var};
use pivdiff_net::layers::conv2d_im2col;
use pivdiff_net::update::{convex_upsample, convex_weight_sums, timestep_code};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i as f64 * 0.618 + seed as f64 * 0.37).sin() * 43758.5453).fract()).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    // the patch-matrix convolution against candle's direct kernel, values and gradients
    #[test]
    fn im2col_conv_matches_direct(
        b in 1usize..3, c in 1usize..4, o in 1usize..4,
        h in 5usize..12, w in 5usize..12,
        k in prop::sample::select(vec![1usize, 3, 5, 7]), stride in 1usize..3, seed in 0u64..1000,
    ) {
        let x = Var::from_tensor(&randn(&[b, c, h, w], seed)).unwrap();
        let wt = Var::from_tensor(&randn(&[o, c, k, k], seed + 1)).unwrap();
        let pad = k / 2;
        let ours = conv2d_im2col(x.as_tensor(), wt.as_tensor(), None, pad, stride).unwrap();
        // candle's own strided backward is unreliable, so subsample a stride-1 result
        let full = x.as_tensor().conv2d(wt.as_tensor(), pad, 1, 1, 1).unwrap();
        let pick = |n: usize| Tensor::from_vec((0..n).step_by(stride).map(|i| i as u32).collect::<Vec<_>>(), n.div_ceil(stride), &Device::Cpu).unwrap();
        let direct = full.index_select(&pick(full.dim(2).unwrap()), 2).unwrap().index_select(&pick(full.dim(3).unwrap()), 3).unwrap();
        prop_assert_eq!(ours.dims(), direct.dims());
        let diff = (&ours - &direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(diff < 1e-10, "forward diff {}", diff);

        let probe = randn(ours.dims(), seed + 2);
        let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (&direct * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &wt] {
            let a = g1.get(v.as_tensor()).unwrap();
            let d = g2.get(v.as_tensor()).unwrap();
            let diff = (a - d).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            prop_assert!(diff < 1e-9, "gradient diff {}", diff);
        }
    }

    #[test]
    fn convex_weights_sum_to_one(seed in 0u64..500, h in 1usize..4, w in 1usize..4) {
        let mask = (randn(&[2, 576, h, w], seed) * 20.0).unwrap();
        let sums: Vec<f64> = convex_weight_sums(&mask).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        prop_assert_eq!(sums.len(), 2 * 64 * h * w);
        for s in sums {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn convex_upsample_of_constant_flow_is_eight_times_constant_inside() {
    let (h, w) = (3, 4);
    let mut data = vec![1.5f64; h * w];
    data.extend(vec![-0.25f64; h * w]);
    let flow = Tensor::from_vec(data, (1, 2, h, w), &Device::Cpu).unwrap();
    let mask = randn(&[1, 576, h, w], 4);
    let up: Vec<Vec<Vec<f64>>> = convex_upsample(&flow, &mask).unwrap().squeeze(0).unwrap().to_vec3().unwrap();
    assert_eq!((up[0].len(), up[0][0].len()), (8 * h, 8 * w));
    // the centre coarse pixel's block sees only in-range neighbours
    for y in 8..16 {
        for x in 8..16 {
            assert!((up[0][y][x] - 12.0).abs() < 1e-12);
            assert!((up[1][y][x] + 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn convex_upsample_with_peaked_mask_copies_the_coarse_value() {
    // all weight on the centre tap: each 8x8 block equals 8x its own coarse pixel
    let (h, w) = (2, 2);
    let flow = randn(&[1, 2, h, w], 9);
    let mut m = vec![-50f64; 576 * h * w];
    for s in 0..64 {
        for p in 0..h * w {
            m[(4 * 64 + s) * h * w + p] = 50.0;
        }
    }
    let mask = Tensor::from_vec(m, (1, 576, h, w), &Device::Cpu).unwrap();
    let up: Vec<Vec<Vec<f64>>> = convex_upsample(&flow, &mask).unwrap().squeeze(0).unwrap().to_vec3().unwrap();
    let coarse: Vec<Vec<Vec<f64>>> = flow.squeeze(0).unwrap().to_vec3().unwrap();
    for c in 0..2 {
        for y in 0..8 * h {
            for x in 0..8 * w {
                assert!((up[c][y][x] - 8.0 * coarse[c][y / 8][x / 8]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn timestep_code_layout() {
    let like = Tensor::zeros(1, candle_core::DType::F64, &Device::Cpu).unwrap();
    let code: Vec<Vec<f64>> = timestep_code(&[0, 7], 8, &like).unwrap().to_vec2().unwrap();
    assert_eq!(code[0], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    assert!((code[1][0] - 7f64.sin()).abs() < 1e-15);
    assert!((code[1][4] - 7f64.cos()).abs() < 1e-15);
    assert!((code[1][1] - (7.0 * 10000f64.powf(-0.25)).sin()).abs() < 1e-12);
}
