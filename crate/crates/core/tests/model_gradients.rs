use afl_core::loss::{evaluate, LossKind, LossSpec};
use afl_core::model::{TinySeg3D, B1, B2, B3, HIDDEN, PARAM_COUNT, W1, W2, W3};
use afl_core::rng::Xoshiro256StarStar;
use afl_core::{Dims, MaskVolume, Volume3D};

/// Direct nested-loop evaluation of the network, written independently of
/// the strided implementation.
fn naive_forward(p: &[f64], img: &Volume3D) -> Vec<f64> {
    let d = img.dims();
    let (nz, ny, nx) = (d.nz as isize, d.ny as isize, d.nx as isize);
    let at = |ch: &[Vec<f64>], c: usize, z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= nz || y >= ny || x >= nx {
            0.0
        } else {
            ch[c][((z * ny + y) * nx + x) as usize]
        }
    };
    let conv = |input: &[Vec<f64>], w: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
        let cin = input.len();
        (0..HIDDEN)
            .map(|o| {
                let mut out = Vec::with_capacity(d.len());
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            let mut s = b[o];
                            for i in 0..cin {
                                for kz in 0..3 {
                                    for ky in 0..3 {
                                        for kx in 0..3 {
                                            let wi = (((o * cin + i) * 3 + kz) * 3 + ky) * 3 + kx;
                                            s += w[wi]
                                                * at(input, i, z + kz as isize - 1, y + ky as isize - 1, x + kx as isize - 1);
                                        }
                                    }
                                }
                            }
                            out.push(s.max(0.0));
                        }
                    }
                }
                out
            })
            .collect()
    };
    let h1 = conv(&[img.data().to_vec()], &p[W1..B1], &p[B1..W2]);
    let h2 = conv(&h1, &p[W2..B2], &p[B2..W3]);
    (0..d.len())
        .map(|v| {
            let z: f64 = p[B3] + (0..HIDDEN).map(|c| p[W3 + c] * h2[c][v]).sum::<f64>();
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

fn sample(seed: u64, d: Dims) -> (Volume3D, MaskVolume) {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let c = [d.nz as f64 / 2.0 - 0.3, d.ny as f64 / 2.0 + 0.2, d.nx as f64 / 2.0 - 0.1];
    let mask = MaskVolume::from_fn(d, |z, y, x| {
        let r2 = (z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2);
        r2 <= 2.2f64.powi(2)
    })
    .unwrap();
    let img = Volume3D::new(
        d,
        mask.data().iter().map(|&m| m as f64 + rng.normal(0.0, 0.3)).collect(),
    )
    .unwrap();
    (img, mask)
}

#[test]
fn forward_matches_naive_convolution() {
    let d = Dims::cube(8);
    let (img, _) = sample(1, d);
    for seed in 0..3 {
        let mut m = TinySeg3D::init(seed);
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed + 100);
        for b in &mut m.params_mut()[B1..W2] {
            *b = rng.normal(0.0, 0.1);
        }
        let fast = m.forward(&img).unwrap();
        let slow = naive_forward(m.params(), &img);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

fn loss_of(m: &TinySeg3D, img: &Volume3D, mask: &MaskVolume, spec: &LossSpec) -> f64 {
    evaluate(&m.forward(img).unwrap(), mask, spec, None).unwrap().value
}

/// Central finite differences over every parameter.
fn check_all_parameters(kind: LossKind) {
    let d = Dims::cube(6);
    let (img, mask) = sample(7, d);
    let mut model = TinySeg3D::init(21);
    let spec = LossSpec::of_kind(kind);
    let (_, grads) = model.backward(&img, &mask, &spec, None).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..PARAM_COUNT {
        let w = model.params()[i];
        model.params_mut()[i] = w + h;
        let up = loss_of(&model, &img, &mask, &spec);
        model.params_mut()[i] = w - h;
        let down = loss_of(&model, &img, &mask, &spec);
        model.params_mut()[i] = w;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.0[i];
        if analytic.abs() < 1e-8 {
            assert!((numeric - analytic).abs() < 1e-7, "{kind} param {i}: {analytic} vs {numeric}");
        } else {
            let rel = (numeric - analytic).abs() / analytic.abs();
            worst = worst.max(rel);
            assert!(rel < 1e-3, "{kind} param {i}: {analytic} vs {numeric} (rel {rel:e})");
        }
    }
    eprintln!("{kind}: worst relative error {worst:e}");
}

#[test]
fn parameter_gradients_focal_baseline() {
    check_all_parameters(LossKind::FocalBaseline);
}

#[test]
fn parameter_gradients_afl() {
    check_all_parameters(LossKind::Afl);
}

#[test]
fn parameter_gradients_overlap_losses() {
    for kind in [LossKind::Dice, LossKind::Iou, LossKind::Tversky] {
        check_all_parameters(kind);
    }
}

#[test]
fn parameter_gradients_entropy_and_hybrids() {
    for kind in [LossKind::CrossEntropy, LossKind::DiceCe, LossKind::DiceFocal] {
        check_all_parameters(kind);
    }
}

#[test]
fn near_perfect_prediction_is_stationary() {
    // A huge positive logit on foreground-only data saturates the output.
    let d = Dims::cube(4);
    let mask = MaskVolume::new(d, vec![1; d.len()]).unwrap();
    let img = Volume3D::filled(d, 1.0).unwrap();
    let mut m = TinySeg3D::zeros();
    m.params_mut()[B3] = 40.0;
    let (loss, g) = m.backward(&img, &mask, &LossSpec::of_kind(LossKind::CrossEntropy), None).unwrap();
    assert!(loss < 1e-6);
    assert!(g.max_abs() <= 1e-5);
}
