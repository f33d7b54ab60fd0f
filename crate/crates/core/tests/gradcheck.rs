use canopyseg::autodiff::{Tape, Tensor};
use canopyseg::gradcheck::{primitive_checks, unet_check};
use canopyseg::model::{Mode, UNet, UNetConfig};

const TOLERANCE: f64 = 1e-4;

#[test]
fn every_primitive_matches_central_differences() {
    for seed in [1, 2] {
        for r in primitive_checks(seed).unwrap() {
            assert!(r.probes > 0, "{}", r.name);
            assert!(r.worst_rel_err < TOLERANCE, "{}: {:e}", r.name, r.worst_rel_err);
        }
    }
}

#[test]
fn unet_loss_matches_central_differences() {
    let r = unet_check(40, 9).unwrap();
    assert_eq!(r.probes, 40);
    assert!(r.worst_rel_err < TOLERANCE, "{:e}", r.worst_rel_err);
}

/// d(Σ conv(x))/dx at each pixel is the sum of the kernel taps that reach it.
#[test]
fn conv2d_sum_gradient_matches_tap_sums() {
    let w = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, -0.9];
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full(&[1, 1, 5, 5], 1.0));
    let k = tape.constant(Tensor::new(&[1, 1, 3, 3], w.to_vec()).unwrap());
    let b = tape.constant(Tensor::new(&[1], vec![0.25]).unwrap());
    let y = tape.conv2d(x, k, b).unwrap();
    let loss = tape.sum(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(x).unwrap();
    for iy in 0..5i32 {
        for ix in 0..5i32 {
            let mut expected = 0.0;
            for ky in 0..3i32 {
                for kx in 0..3i32 {
                    let (oy, ox) = (iy - ky + 1, ix - kx + 1);
                    if (0..5).contains(&oy) && (0..5).contains(&ox) {
                        expected += w[(ky * 3 + kx) as usize];
                    }
                }
            }
            let got = g.data()[(iy * 5 + ix) as usize];
            assert!((got - expected).abs() < 1e-12, "({iy},{ix}): {got} vs {expected}");
        }
    }
}

/// A small step against the gradient lowers the loss.
#[test]
fn sgd_step_descends() {
    let mut cfg = UNetConfig::small(2, 4);
    cfg.dropout_p = 0.0;
    let model = UNet::<f64>::build(cfg, 4).unwrap();
    let input = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 7919) % 101) as f64 / 100.0);
    let target = Tensor::from_fn(&[2, 1, 8, 8], |i| (i % 4 == 0) as u8 as f64);
    let loss_and_grads = |m: &UNet<f64>| {
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let x = tape.constant(input.clone());
        let y = m.forward(&mut tape, &vars, x, Mode::Eval).unwrap();
        let l = tape.bce_loss(y, &target, &[1.0, 2.0]).unwrap();
        let g = tape.backward(l).unwrap();
        let grads: Vec<_> = vars.iter().map(|v| g.get(*v).unwrap().clone()).collect();
        (tape.value(l).unwrap().data()[0], grads)
    };
    let (before, grads) = loss_and_grads(&model);
    let mut stepped = model.clone();
    for (p, g) in stepped.params_mut().iter_mut().zip(&grads) {
        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= 1e-5 * d;
        }
    }
    let (after, _) = loss_and_grads(&stepped);
    assert!(after < before, "{after} >= {before}");
}
