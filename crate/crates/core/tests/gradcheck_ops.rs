//! Finite-difference verification of every differentiable tape operation.
//!
//! Each op is wrapped in a loss that weights the op output elementwise with a
//! fixed random tensor before summing, so every output coordinate receives a
//! distinct adjoint. Analytic gradients from the tape are compared against
//! central finite differences at 20 seeds per op.

use mmfas_core::gradcheck::{finite_diff_grad, max_rel_err, DEFAULT_H, DEFAULT_TOL};
use mmfas_core::tape::{Tape, Var};
use mmfas_core::tensor::{Tensor, TensorError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Runs one gradcheck: `build` assembles the loss scalar from leaf vars placed
/// in the same order as `inputs`.
fn gradcheck_op<F>(name: &str, inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().requires_grad(true)))
        .collect();
    let loss = build(&mut tape, &vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    assert_eq!(tape.value(loss).numel(), 1, "{name}: loss must be scalar");
    tape.backward(loss).unwrap();

    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[i])
            .unwrap_or_else(|| panic!("{name}: input {i} received no gradient"))
            .to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut t2 = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, orig)| t2.leaf(if j == i { probe.clone() } else { orig.clone() }))
                    .collect();
                let l = build(&mut t2, &vs)?;
                Ok(t2.data(l)[0])
            },
            input,
            DEFAULT_H,
        )
        .unwrap();
        let err = max_rel_err(&analytic, &numeric.data);
        assert!(
            err < DEFAULT_TOL,
            "{name}: input {i} max relative error {err:.3e} exceeds {DEFAULT_TOL:.1e}"
        );
    }
}

/// Weighted sum of an arbitrary tensor so each coordinate gets its own adjoint.
fn weighted_sum(
    tape: &mut Tape<f64>,
    v: Var,
    rng: &mut ChaCha12Rng,
) -> Result<Var, TensorError> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(rand_tensor(rng, &shape, -1.0, 1.0));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum_all(prod))
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[4, 2], -2.0, 2.0);
        let wrng = ChaCha12Rng::seed_from_u64(seed + 1000);
        gradcheck_op("matmul", &[a, b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

#[test]
fn conv2d_gradients() {
    // Shapes cover the adapter cases: 3x3 stride 1 pad 1, 1x1, and a strided
    // 2x2 reduction.
    let cases: &[(&[usize], &[usize], usize, usize)] = &[
        (&[2, 5, 5], &[3, 2, 3, 3], 1, 1),
        (&[3, 4, 4], &[2, 3, 1, 1], 1, 0),
        (&[1, 4, 4], &[2, 1, 2, 2], 2, 0),
    ];
    for (ishape, kshape, stride, padding) in cases {
        for seed in 0..SEEDS {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, ishape, -1.0, 1.0);
            let k = rand_tensor(&mut rng, kshape, -1.0, 1.0);
            let wrng = ChaCha12Rng::seed_from_u64(seed + 2000);
            gradcheck_op("conv2d", &[x, k], |t, v| {
                let y = t.conv2d(v[0], v[1], *stride, *padding)?;
                weighted_sum(t, y, &mut wrng.clone())
            });
        }
    }
}

#[test]
fn elementwise_and_bias_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let cmap = rand_tensor(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let cbias = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        let scalar = rand_tensor(&mut rng, &[1], 0.5, 1.5);
        let wrng = ChaCha12Rng::seed_from_u64(seed + 3000);

        gradcheck_op("add", &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("mul", &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("add_last_axis_bias", &[a.clone(), bias], |t, v| {
            let y = t.add_last_axis_bias(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("add_channel_bias", &[cmap, cbias], |t, v| {
            let y = t.add_channel_bias(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("scale", &[a.clone()], |t, v| {
            let y = t.scale(v[0], -1.75);
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("scale_by", &[a.clone(), scalar], |t, v| {
            let y = t.scale_by(v[0], v[1])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

#[test]
fn activation_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 4], -3.0, 3.0);
        let pos = rand_tensor(&mut rng, &[2, 4], 0.1, 4.0);
        let wrng = ChaCha12Rng::seed_from_u64(seed + 4000);

        gradcheck_op("gelu", &[x.clone()], |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("sigmoid", &[x.clone()], |t, v| {
            let y = t.sigmoid(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("arctan", &[x.clone()], |t, v| {
            let y = t.arctan(v[0]);
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("sqrt", &[pos], |t, v| {
            let y = t.sqrt(v[0])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

#[test]
fn normalization_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[3, 5], -2.0, 2.0);
        let scale = rand_tensor(&mut rng, &[5], 0.5, 1.5);
        let shift = rand_tensor(&mut rng, &[5], -0.5, 0.5);
        let wrng = ChaCha12Rng::seed_from_u64(seed + 5000);

        for axis in [0usize, 1] {
            gradcheck_op("softmax", &[x.clone()], |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, &mut wrng.clone())
            });
        }
        gradcheck_op("layer_norm", &[x.clone(), scale, shift], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

#[test]
fn structural_op_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let m = rand_tensor(&mut rng, &[4, 3], -2.0, 2.0);
        let cmap = rand_tensor(&mut rng, &[3, 2, 4], -2.0, 2.0);
        let wrng = ChaCha12Rng::seed_from_u64(seed + 6000);

        for axis in [0usize, 1] {
            gradcheck_op("concat", &[a.clone(), b.clone()], |t, v| {
                let y = t.concat(&[v[0], v[1]], axis)?;
                weighted_sum(t, y, &mut wrng.clone())
            });
        }
        gradcheck_op("slice", &[m.clone()], |t, v| {
            let y = t.slice(v[0], 0, 1, 2)?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("slice_cols", &[m.clone()], |t, v| {
            let y = t.slice(v[0], 1, 1, 2)?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("reshape", &[m.clone()], |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("transpose", &[m.clone()], |t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("gather_rows", &[m.clone()], |t, v| {
            let y = t.gather_rows(v[0], &[0, 2, 2, 3])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
        gradcheck_op("gap2d", &[cmap], |t, v| {
            let y = t.gap2d(v[0])?;
            weighted_sum(t, y, &mut wrng.clone())
        });
    }
}

#[test]
fn reduction_and_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let target = rand_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        let logits = rand_tensor(&mut rng, &[4, 3], -3.0, 3.0);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3usize)).collect();

        gradcheck_op("mean_all", &[a.clone()], |t, v| Ok(t.mean_all(v[0])));
        gradcheck_op("sum_all", &[a.clone()], |t, v| Ok(t.sum_all(v[0])));
        gradcheck_op("mse", &[a.clone(), target], |t, v| t.mse(v[0], v[1]));
        gradcheck_op("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &labels));
    }
}

#[test]
fn composite_chain_gradients() {
    // A miniature network exercising op composition: linear -> gelu ->
    // layer_norm -> linear -> softmax cross-entropy.
    for seed in 0..SEEDS {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b1 = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let g = rand_tensor(&mut rng, &[4], 0.5, 1.5);
        let s = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        gradcheck_op("composite_chain", &[x, w1, b1, g, s, w2], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_last_axis_bias(h, v[2])?;
            let h = t.gelu(h);
            let h = t.layer_norm(h, v[3], v[4])?;
            let logits = t.matmul(h, v[5])?;
            t.cross_entropy(logits, &[0, 1])
        });
    }
}
