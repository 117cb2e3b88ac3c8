use candle_core::{DType, Device, Tensor};
use pivdiff_net::corr::{coords_grid, CorrPyramid};
use proptest::prelude::*;

fn features(b: usize, d: usize, h: usize, w: usize, seed: u64) -> Tensor {
    // cheap deterministic pseudo-random values
    let data: Vec<f64> = (0..b * d * h * w)
        .map(|i| (((i as u64 + 1).wrapping_mul(seed.wrapping_mul(2654435761) | 1) % 1000) as f64) / 500.0 - 1.0)
        .collect();
    Tensor::from_vec(data, (b, d, h, w), &Device::Cpu).unwrap()
}

fn brute(f1: &Tensor, f2: &Tensor) -> Vec<Vec<f64>> {
    let (_, d, h, w) = f1.dims4().unwrap();
    let a: Vec<f64> = f1.flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f64> = f2.flatten_all().unwrap().to_vec1().unwrap();
    let n = h * w;
    (0..n)
        .map(|i| (0..n).map(|j| (0..d).map(|c| a[c * n + i] * b[c * n + j]).sum::<f64>() / (d as f64).sqrt()).collect())
        .collect()
}

#[test]
fn level_zero_matches_loop_and_levels_pool() {
    let (f1, f2) = (features(1, 5, 8, 8, 3), features(1, 5, 8, 8, 7));
    let pyr = CorrPyramid::new(&f1, &f2, 3).unwrap();
    let want = brute(&f1, &f2);
    let l0: Vec<Vec<Vec<f64>>> = pyr.level(0).unwrap().to_vec3().unwrap();
    let l1: Vec<Vec<Vec<f64>>> = pyr.level(1).unwrap().to_vec3().unwrap();
    assert_eq!(pyr.level_sizes(), &[(8, 8), (4, 4), (2, 2)]);
    for i in 0..64 {
        for j in 0..64 {
            assert!((l0[i][j / 8][j % 8] - want[i][j]).abs() < 1e-12);
        }
        for (y, row) in l1[i].iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                let m = (want[i][16 * y + 2 * x] + want[i][16 * y + 2 * x + 1] + want[i][16 * y + 8 + 2 * x] + want[i][16 * y + 9 + 2 * x]) / 4.0;
                assert!((v - m).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn integer_lookup_reads_the_window() {
    let (f1, f2) = (features(2, 4, 8, 8, 5), features(2, 4, 8, 8, 9));
    let pyr = CorrPyramid::new(&f1, &f2, 2).unwrap();
    let r = 2usize;
    let grid = coords_grid(2, 8, 8, &f1).unwrap();
    let taps: Vec<f64> = pyr.lookup(&grid, r).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(pyr.channels(r), 2 * 25);
    let l0: Vec<Vec<Vec<f64>>> = pyr.level(0).unwrap().to_vec3().unwrap();
    for b in 0..2 {
        for y in 0..8i64 {
            for x in 0..8i64 {
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let ch = ((dy + 2) * 5 + dx + 2) as usize;
                        let got = taps[((b * 50 + ch) * 8 + y as usize) * 8 + x as usize];
                        let (yy, xx) = (y + dy, x + dx);
                        let want = if (0..8).contains(&yy) && (0..8).contains(&xx) {
                            l0[b * 64 + (y * 8 + x) as usize][yy as usize][xx as usize]
                        } else {
                            0.0
                        };
                        assert!((got - want).abs() < 1e-12, "b{b} y{y} x{x} dy{dy} dx{dx}");
                    }
                }
            }
        }
    }
}

#[test]
fn half_pixel_lookup_averages_neighbours() {
    let (f1, f2) = (features(1, 3, 8, 8, 2), features(1, 3, 8, 8, 4));
    let pyr = CorrPyramid::new(&f1, &f2, 1).unwrap();
    let shift = Tensor::from_vec(vec![0.5f64, 0.0], (1, 2, 1, 1), &Device::Cpu).unwrap();
    let coords = coords_grid(1, 8, 8, &f1).unwrap().broadcast_add(&shift).unwrap();
    let taps: Vec<Vec<Vec<f64>>> = pyr.lookup(&coords, 0).unwrap().squeeze(0).unwrap().to_vec3().unwrap();
    let l0: Vec<Vec<Vec<f64>>> = pyr.level(0).unwrap().to_vec3().unwrap();
    let (y, x) = (3, 4);
    let want = (l0[y * 8 + x][y][x] + l0[y * 8 + x][y][x + 1]) / 2.0;
    assert!((taps[0][y][x] - want).abs() < 1e-12);
}

#[test]
fn pyramid_rejects_too_many_levels() {
    let f = features(1, 2, 4, 4, 1);
    assert!(CorrPyramid::new(&f, &f, 4).is_err());
    let g = features(1, 2, 4, 8, 1);
    assert!(CorrPyramid::new(&f, &g, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lookup_is_differentiable_in_coords(dx in 0.05f64..0.95, dy in 0.05f64..0.95) {
        let (f1, f2) = (features(1, 3, 8, 8, 11), features(1, 3, 8, 8, 13));
        let pyr = CorrPyramid::new(&f1, &f2, 2).unwrap();
        let off = Tensor::from_vec(vec![dx, dy], (1, 2, 1, 1), &Device::Cpu).unwrap();
        let base = coords_grid(1, 8, 8, &f1).unwrap().broadcast_add(&off).unwrap();
        let var = candle_core::Var::from_tensor(&base).unwrap();
        let total = pyr.lookup(var.as_tensor(), 1).unwrap().sum_all().unwrap();
        let grads = total.backward().unwrap();
        let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // compare one coordinate against a central difference
        let h = 1e-6;
        let bump = |e: f64| {
            let mut d = vec![0f64; 128];
            d[27] = e;
            let t = (&base + Tensor::from_vec(d, (1, 2, 8, 8), &Device::Cpu).unwrap()).unwrap();
            pyr.lookup(&t, 1).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        prop_assert!((g[27] - numeric).abs() < 1e-6 * numeric.abs().max(1.0));
    }
}

#[test]
fn lookup_keeps_dtype() {
    let f = features(1, 2, 8, 8, 1).to_dtype(DType::F32).unwrap();
    let pyr = CorrPyramid::new(&f, &f, 2).unwrap();
    let out = pyr.lookup(&coords_grid(1, 8, 8, &f).unwrap(), 1).unwrap();
    assert_eq!(out.dtype(), DType::F32);
    assert_eq!(out.dims(), &[1, 18, 8, 8]);
}
