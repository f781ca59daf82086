use super::*;
use crate::gradcheck::finite_diff_check_many;
use crate::networks::params::Bound;
use crate::random::{stream, uniform};

fn smooth_blob(size: usize) -> Tensor {
    // off-center anisotropic blob, near zero at the border
    Tensor::from_fn(&[1, 1, size, size], |i| {
        let (r, c) = ((i / size) as f64, (i % size) as f64);
        let s = (size - 1) as f64;
        let (y, x) = (2.0 * r / s - 1.0, 2.0 * c / s - 1.0);
        let (dx, dy) = (x - 0.15, y + 0.1);
        (-(dx * dx / 0.12 + dy * dy / 0.05)).exp() + 0.5 * (-(x + 0.3).powi(2) / 0.02 - (y - 0.3).powi(2) / 0.08).exp()
    })
}

/// Independent per-pixel bilinear interpolation with zero outside the image.
fn sample_oracle(img: &[f64], h: usize, w: usize, gx: f64, gy: f64) -> f64 {
    let px = (gx + 1.0) / 2.0 * (w as f64 - 1.0);
    let py = (gy + 1.0) / 2.0 * (h as f64 - 1.0);
    let get = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
            0.0
        } else {
            img[r as usize * w + c as usize]
        }
    };
    let (c0, r0) = (px.floor() as i64, py.floor() as i64);
    let (ax, ay) = (px - c0 as f64, py - r0 as f64);
    let top = get(r0, c0) + ax * (get(r0, c0 + 1) - get(r0, c0));
    let bottom = get(r0 + 1, c0) + ax * (get(r0 + 1, c0 + 1) - get(r0 + 1, c0));
    top + ay * (bottom - top)
}

#[test]
fn identity_grid_is_meshgrid() {
    let grid = affine_grid(AffineParams::IDENTITY, 3, 5).unwrap();
    for r in 0..3 {
        for c in 0..5 {
            assert_eq!(grid.at(r, c), (c as f64 / 2.0 - 1.0, r as f64 - 1.0));
        }
    }
}

#[test]
fn translation_shifts_x_only() {
    let id = affine_grid(AffineParams::IDENTITY, 4, 4).unwrap();
    let shifted = affine_grid(
        AffineParams {
            tx: 0.5,
            ..AffineParams::IDENTITY
        },
        4,
        4,
    )
    .unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let (x0, y0) = id.at(r, c);
            let (x1, y1) = shifted.at(r, c);
            assert_eq!(x1, x0 + 0.5);
            assert_eq!(y1, y0);
        }
    }
}

#[test]
fn quarter_turn_maps_target_to_rotated_source() {
    let p = AffineParams {
        a: 0.0,
        b: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
    assert_eq!(p.matrix(), [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]);
    let grid = affine_grid(p, 3, 3).unwrap();
    // target (x=1, y=0) sits at row 1, col 2
    assert_eq!(grid.at(1, 2), (0.0, 1.0));
}

#[test]
fn identity_sample_is_exact() {
    let mut rng = stream(20, 0);
    for (h, w) in [(5, 7), (16, 16), (1, 3), (32, 32)] {
        let x = uniform(&[2, 3, h, w], -1.0, 1.0, &mut rng);
        let grid = affine_grid(AffineParams::IDENTITY, h, w).unwrap();
        assert_eq!(bilinear_sample(&x, &grid).unwrap(), x);
    }
}

#[test]
fn center_of_two_by_two_is_mean() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let grid = SamplingGrid {
        h: 1,
        w: 1,
        coords: vec![0.0, 0.0],
    };
    assert_eq!(bilinear_sample(&x, &grid).unwrap().data(), &[1.5]);
}

#[test]
fn sampler_matches_scalar_oracle() {
    let mut rng = stream(21, 0);
    for _ in 0..20 {
        let (h, w) = (6, 5);
        let x = uniform(&[2, 2, h, w], -1.0, 1.0, &mut rng);
        let coords = uniform(&[4 * 3 * 2], -1.2, 1.2, &mut rng).into_data();
        let grid = SamplingGrid { h: 4, w: 3, coords };
        let out = bilinear_sample(&x, &grid).unwrap();
        for i in 0..2 {
            for ch in 0..2 {
                let img = &x.data()[(i * 2 + ch) * h * w..][..h * w];
                for r in 0..4 {
                    for c in 0..3 {
                        let (gx, gy) = grid.at(r, c);
                        let expect = sample_oracle(img, h, w, gx, gy);
                        let got = out.data()[((i * 2 + ch) * 4 + r) * 3 + c];
                        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
                    }
                }
            }
        }
    }
}

#[test]
fn stn_tables_feed_eighty_values() {
    // full resolution attachment shapes
    for (idx, c, s) in [(1, 32, 64), (2, 64, 32), (3, 128, 16), (4, 64, 32)] {
        let cfg = StnConfig::table(idx, c, s).unwrap();
        assert_eq!(cfg.flattened_width(), 80);
        assert!(cfg.pool_plan().iter().all(|&p| p), "STN{idx} pools at every stage");
    }
    // desk resolution: same layers, fewer pools
    for (idx, c, s) in [(1, 32, 16), (2, 64, 8), (3, 128, 4), (4, 64, 8)] {
        assert_eq!(StnConfig::table(idx, c, s).unwrap().flattened_width(), 80);
    }
    assert!(StnConfig::table(3, 128, 2).is_err());
    assert!(StnConfig::table(5, 1, 16).is_err());
}

#[test]
fn zero_final_layer_gives_identity() {
    let cfg = StnConfig::table(3, 2, 16).unwrap();
    let params = build_stn(&cfg, 7);
    let mut rng = stream(22, 0);
    let x = uniform(&[3, 2, 16, 16], 0.0, 1.0, &mut rng);
    for p in localize(&x, &cfg, &params).unwrap() {
        assert_eq!(p, AffineParams::IDENTITY);
    }
    assert_eq!(apply_stn(&x, &cfg, &params).unwrap(), x);
}

#[test]
fn identical_items_get_identical_params() {
    let cfg = StnConfig::table(3, 1, 8).unwrap();
    let mut params = build_stn(&cfg, 3);
    let mut rng = stream(23, 0);
    *params.param_mut("stn3.fc2.weight").unwrap() = uniform(&[4, 20], -0.1, 0.1, &mut rng);
    let one = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
    let x = Tensor::stack_batch(&[&one, &one]).unwrap();
    let ps = localize(&x, &cfg, &params).unwrap();
    assert_eq!(ps[0], ps[1]);
    assert_ne!(ps[0], AffineParams::IDENTITY);
}

#[test]
fn localize_rejects_wrong_shape() {
    let cfg = StnConfig::table(3, 2, 16).unwrap();
    let params = build_stn(&cfg, 1);
    assert!(localize(&Tensor::zeros(&[1, 3, 16, 16]), &cfg, &params).is_err());
    assert!(localize(&Tensor::zeros(&[1, 2, 8, 8]), &cfg, &params).is_err());
}

#[test]
fn hand_set_inverse_rotation_recovers_image() {
    let size = 32;
    let img = smooth_blob(size);
    let angle = 25f64.to_radians();
    // forward-warp oracle: rotated(t) = img(R t)
    let rotated = bilinear_sample(
        &img,
        &affine_grid(AffineParams::similarity(angle, 1.0, 0.0, 0.0), size, size).unwrap(),
    )
    .unwrap();
    let cfg = StnConfig::table(4, 1, size).unwrap();
    let mut params = build_stn(&cfg, 11);
    let inverse = AffineParams::similarity(-angle, 1.0, 0.0, 0.0).to_array();
    *params.param_mut("stn4.fc2.bias").unwrap() = Tensor::new(&[4], inverse.to_vec()).unwrap();
    let recovered = apply_stn(&rotated, &cfg, &params).unwrap();
    let mean_abs: f64 = recovered
        .data()
        .iter()
        .zip(img.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / img.numel() as f64;
    let untouched: f64 = rotated
        .data()
        .iter()
        .zip(img.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / img.numel() as f64;
    assert!(mean_abs < 0.05, "mean |delta| = {mean_abs}");
    assert!(mean_abs < untouched / 4.0, "{mean_abs} vs {untouched}");
}

#[test]
fn one_pixel_shift_is_compensated_by_translation() {
    let size = 9;
    let mut rng = stream(24, 0);
    let img = uniform(&[1, 2, size, size], 0.0, 1.0, &mut rng);
    // content moved one pixel to the right
    let shifted = Tensor::from_fn(img.shape(), |i| {
        let c = i % size;
        if c == 0 {
            0.0
        } else {
            img.data()[i - 1]
        }
    });
    let step = 2.0 / (size - 1) as f64;
    let grid = affine_grid(
        AffineParams {
            tx: step,
            ..AffineParams::IDENTITY
        },
        size,
        size,
    )
    .unwrap();
    let back = bilinear_sample(&shifted, &grid).unwrap();
    for i in 0..img.numel() {
        if i % size < size - 1 {
            assert!((back.data()[i] - img.data()[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn warp_then_identity_equals_warp() {
    let mut rng = stream(25, 0);
    let img = uniform(&[2, 1, 10, 10], 0.0, 1.0, &mut rng);
    let p = AffineParams::similarity(0.3, 0.9, 0.1, -0.05);
    let once = bilinear_sample(&img, &affine_grid(p, 10, 10).unwrap()).unwrap();
    let twice =
        bilinear_sample(&once, &affine_grid(AffineParams::IDENTITY, 10, 10).unwrap()).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn gradients_reach_localization_and_features() {
    let cfg = StnConfig::table(3, 2, 8).unwrap();
    let mut params = build_stn(&cfg, 5);
    let mut rng = stream(26, 0);
    *params.param_mut("stn3.fc2.weight").unwrap() = uniform(&[4, 20], -0.2, 0.2, &mut rng);
    let x = uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let xv = g.param(x);
    let mut ctx = Ctx::new(&mut g, &bound, &params, Mode::Train);
    let out = apply_stn_var(&mut ctx, &cfg, xv).unwrap();
    let target = g.constant(uniform(&[2, 2, 8, 8], 0.0, 1.0, &mut rng));
    let loss = g.mse(out, target).unwrap();
    let grads = g.backward(loss).unwrap();
    let nonzero = |t: &Tensor| t.data().iter().any(|&v| v != 0.0);
    assert!(nonzero(grads.get(xv).unwrap()));
    for (name, v) in bound.iter() {
        assert!(nonzero(grads.get(*v).unwrap()), "no gradient for {name}");
    }
}

#[test]
fn stn_gradients_match_finite_differences() {
    let cfg = StnConfig::table(3, 1, 4).unwrap();
    let mut params = build_stn(&cfg, 8);
    let mut rng = stream(27, 0);
    *params.param_mut("stn3.fc2.weight").unwrap() = uniform(&[4, 20], -0.2, 0.2, &mut rng);
    let x = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    let names: Vec<String> = params.params().keys().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(names.iter().map(|n| params.param(n).unwrap().clone()));
    let target = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
    let errs = finite_diff_check_many(
        |g, vars| {
            let b = Bound::from_pairs(names.iter().cloned().zip(vars[1..].iter().copied()));
            let mut ctx = Ctx::new(g, &b, &params, Mode::Train);
            let out = apply_stn_var(&mut ctx, &cfg, vars[0])?;
            let t = g.constant(target.clone());
            g.mse(out, t)
        },
        &inputs,
        1e-6,
        Some(24),
    )
    .unwrap();
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < 1e-3, "input {i}: {errs:?}");
    }
}
