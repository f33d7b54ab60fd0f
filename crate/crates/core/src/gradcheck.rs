//! Central finite-difference verification of the tape, in 64-bit precision.
//!
//! Inputs are drawn away from zero and pairwise distinct so a small nudge
//! never crosses a ReLU kink or changes a max-pool winner.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::model::{Mode, UNet, UNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

/// Outcome of one check: how many coordinates were probed and the largest
/// relative error seen.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub worst_rel_err: f64,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Builds a scalar on a fresh tape from `inputs`; returns the scalar and the
/// handles the inputs were registered under.
pub type UnaryOp = fn(&mut Tape<f64>, Var) -> Result<Var>;

type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)> + 'a;

/// Compares the tape gradient of `build` against central differences at
/// every coordinate of every input.
pub fn check_graph(name: &str, inputs: &[Tensor<f64>], build: &Graph<'_>) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, inputs)?;
    let grads = tape.backward(loss)?;
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, ins)?;
        Ok(t.value(l)?.data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (k, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("inputs are trainable leaves");
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
            probes += 1;
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        probes,
        worst_rel_err: worst,
    })
}

fn kink_free(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let mag = rng.gen_range(0.05..1.0) + i as f64 * 1e-3;
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Weighted sum with fixed coefficients so each output element carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, x: Var) -> Result<Var> {
    let shape = tape.value(x)?.shape().to_vec();
    let coef = Tensor::from_fn(&shape, |i| ((i * 37 % 17) as f64 - 8.0) / 7.0);
    let c = tape.constant(coef);
    let prod = tape.mul(x, c)?;
    tape.sum(prod)
}

fn params(t: &mut Tape<f64>, ins: &[Tensor<f64>]) -> Vec<Var> {
    ins.iter().map(|x| t.param(x.clone())).collect()
}

/// One check per primitive: conv (3×3 and 1×1), max-pool, upsample, ReLU,
/// sigmoid, dropout, concat and the weighted cross-entropy.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let conv = [
        kink_free(&mut rng, &[2, 3, 5, 4]),
        kink_free(&mut rng, &[2, 3, 3, 3]),
        kink_free(&mut rng, &[2]),
    ];
    out.push(check_graph("conv2d 3×3", &conv, &|t, ins| {
        let vs = params(t, ins);
        let y = t.conv2d(vs[0], vs[1], vs[2])?;
        Ok((project(t, y)?, vs))
    })?);

    let pointwise = [
        kink_free(&mut rng, &[1, 4, 3, 3]),
        kink_free(&mut rng, &[2, 4, 1, 1]),
        kink_free(&mut rng, &[2]),
    ];
    out.push(check_graph("conv2d 1×1", &pointwise, &|t, ins| {
        let vs = params(t, ins);
        let y = t.conv2d(vs[0], vs[1], vs[2])?;
        Ok((project(t, y)?, vs))
    })?);

    let unary: [(&str, UnaryOp, Vec<usize>); 5] = [
        ("max_pool2d", |t, x| t.max_pool2d(x), vec![2, 2, 4, 6]),
        ("upsample_nearest2x", |t, x| t.upsample_nearest2x(x), vec![1, 2, 3, 2]),
        ("relu", |t, x| t.relu(x), vec![3, 7]),
        ("sigmoid", |t, x| t.sigmoid(x), vec![3, 7]),
        ("dropout", |t, x| t.dropout(x, 0.3, true, 99), vec![1, 2, 4, 4]),
    ];
    for (name, op, shape) in unary {
        let input = [kink_free(&mut rng, &shape)];
        out.push(check_graph(name, &input, &|t, ins| {
            let vs = params(t, ins);
            let y = op(t, vs[0])?;
            Ok((project(t, y)?, vs))
        })?);
    }

    let cat = [kink_free(&mut rng, &[2, 1, 2, 3]), kink_free(&mut rng, &[2, 3, 2, 3])];
    out.push(check_graph("concat_channels", &cat, &|t, ins| {
        let vs = params(t, ins);
        let y = t.concat_channels(vs[0], vs[1])?;
        Ok((project(t, y)?, vs))
    })?);

    let probs = [Tensor::from_fn(&[3, 1, 2, 2], |_| rng.gen_range(0.05..0.95))];
    let target = Tensor::from_fn(&[3, 1, 2, 2], |i| (i % 3 == 0) as u8 as f64);
    out.push(check_graph("bce_loss", &probs, &|t, ins| {
        let vs = params(t, ins);
        let l = t.bce_loss(vs[0], &target, &[1.0, 2.5, 11.24])?;
        Ok((l, vs))
    })?);
    Ok(out)
}

/// Probes `probes` randomly chosen parameters of a depth-2 U-Net on the
/// weighted loss, with dropout active. The 8×8 input keeps the number of
/// pre-activations small enough that no probe straddles a kink.
pub fn unet_check(probes: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = UNet::<f64>::build(UNetConfig::small(2, 4), seed)?;
    for p in model.params_mut() {
        if p.name.ends_with(".bias") {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
    }
    let input = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i / 8 + i % 8) % 3 == 0) as u8 as f64);
    let weights = [1.0, 3.5];
    let mode = Mode::Train { seed: seed ^ 5 };

    let loss_of = |m: &UNet<f64>, want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let x = tape.constant(input.clone());
        let y = m.forward(&mut tape, &vars, x, mode)?;
        let l = tape.bce_loss(y, &target, &weights)?;
        let value = tape.value(l)?.data()[0];
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(l)?;
        let g = vars
            .iter()
            .map(|v| grads.get(*v).expect("parameters are trainable").clone())
            .collect();
        Ok((value, g))
    };
    let (_, grads) = loss_of(&model, true)?;

    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let k = rng.gen_range(0..model.params().len());
        let i = rng.gen_range(0..model.params()[k].value.len());
        let mut plus = model.clone();
        plus.params_mut()[k].value.data_mut()[i] += STEP;
        let mut minus = model.clone();
        minus.params_mut()[k].value.data_mut()[i] -= STEP;
        let numeric = (loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * STEP);
        worst = worst.max(rel_err(grads[k].data()[i], numeric));
    }
    Ok(CheckResult {
        name: "unet loss".into(),
        probes,
        worst_rel_err: worst,
    })
}
