//! Finite-difference coverage of every tape primitive.
//!
//! Each op is wrapped into a scalar loss via a fixed random projection and
//! compared against central differences on 20 seeds, at 1e-4 relative
//! tolerance with a 1e-7 absolute floor.

use amplifier_core::tensor::{grad_check, Tape, Tensor, Var};
use amplifier_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

/// Project any output to a scalar through a fixed elementwise weighting so
/// every entry of the op output influences the loss.
fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.leaf(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.mean_all(p))
}

fn check_op<F>(name: &str, shape: &[usize], out_shape_of: F, build: impl Fn(&mut Tape, Var) -> Result<Var>)
where
    F: Fn(&[usize]) -> Vec<usize>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + 13);
        // keep entries away from the kinks of leaky_relu/abs/max_scalar
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| {
                let v: f64 = rng.gen_range(0.15..1.5);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::new(shape.to_vec(), data).unwrap();
        let wshape = out_shape_of(shape);
        let weights = Tensor::rand_uniform(wshape, -1.0, 1.0, &mut rng);
        let report = grad_check(
            |tape, v| {
                let out = build(tape, v)?;
                project(tape, out, &weights)
            },
            &x,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(
            report.max_rel_error < TOL,
            "{}: seed {} max rel error {:.3e} at entry {}",
            name,
            seed,
            report.max_rel_error,
            report.worst_index
        );
    }
}

fn same(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}

#[test]
fn add_sub_mul_div_gradients() {
    let other = Tensor::new([2, 3], vec![0.7, -1.2, 2.1, 0.4, -0.8, 1.6]).unwrap();
    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let other = other.clone();
        check_op(name, &[2, 3], same, move |tape, v| {
            let o = tape.leaf(other.clone());
            match f {
                0 => tape.add(v, o),
                1 => tape.sub(v, o),
                2 => tape.mul(v, o),
                _ => tape.div(v, o),
            }
        });
    }
}

#[test]
fn div_gradient_wrt_denominator() {
    let num = Tensor::new([2, 3], vec![0.9, -1.1, 0.3, 2.2, -0.5, 1.0]).unwrap();
    check_op("div-denominator", &[2, 3], same, move |tape, v| {
        let n = tape.leaf(num.clone());
        // shift denominator away from zero
        let d = tape.add_scalar(v, 3.0);
        tape.div(n, d)
    });
}

#[test]
fn scale_add_scalar_max_scalar_gradients() {
    check_op("scale", &[2, 3], same, |tape, v| Ok(tape.scale(v, -1.7)));
    check_op("add_scalar", &[2, 3], same, |tape, v| {
        Ok(tape.add_scalar(v, 0.9))
    });
    check_op("max_scalar", &[2, 3], same, |tape, v| {
        Ok(tape.max_scalar(v, 0.05))
    });
}

#[test]
fn leaky_relu_and_abs_gradients() {
    check_op("leaky_relu", &[3, 4], same, |tape, v| {
        Ok(tape.leaky_relu(v, 0.01))
    });
    check_op("abs", &[3, 4], same, |tape, v| Ok(tape.abs(v)));
}

#[test]
fn sqrt_gradient_on_positive_inputs() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 400);
        let x = Tensor::rand_uniform([2, 5], 0.3, 2.0, &mut rng);
        let weights = Tensor::rand_uniform([2, 5], -1.0, 1.0, &mut rng);
        let report = grad_check(
            |tape, v| {
                let s = tape.sqrt(v);
                project(tape, s, &weights)
            },
            &x,
            1e-5,
            1e-7,
        )
        .unwrap();
        assert!(report.max_rel_error < TOL, "sqrt: {}", report.max_rel_error);
    }
}

#[test]
fn matmul_gradients_rank2_and_rank3() {
    let w = Tensor::new([4, 3], (0..12).map(|i| 0.21 * i as f64 - 1.0).collect()).unwrap();
    {
        let w = w.clone();
        check_op("matmul-lhs-rank2", &[5, 4], |_| vec![5, 3], move |tape, v| {
            let wv = tape.leaf(w.clone());
            tape.matmul(v, wv)
        });
    }
    {
        let w = w.clone();
        check_op(
            "matmul-lhs-rank3",
            &[2, 5, 4],
            |_| vec![2, 5, 3],
            move |tape, v| {
                let wv = tape.leaf(w.clone());
                tape.matmul(v, wv)
            },
        );
    }
    // gradient with respect to the weight
    let a = Tensor::new([2, 5, 4], (0..40).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    check_op("matmul-rhs", &[4, 3], |_| vec![2, 5, 3], move |tape, v| {
        let av = tape.leaf(a.clone());
        tape.matmul(av, v)
    });
}

#[test]
fn reduction_gradients() {
    check_op("mean_axis0", &[3, 4], |_| vec![4], |tape, v| {
        tape.mean_axis(v, 0)
    });
    check_op("mean_axis_last", &[2, 3, 4], |_| vec![2, 3], |tape, v| {
        tape.mean_axis(v, 2)
    });
    check_op("var_axis_last", &[2, 3, 4], |_| vec![2, 3], |tape, v| {
        tape.var_axis(v, 2)
    });
    check_op("var_axis_mid", &[2, 3, 4], |_| vec![2, 4], |tape, v| {
        tape.var_axis(v, 1)
    });
    check_op("mean_all", &[3, 4], |_| vec![], |tape, v| {
        Ok(tape.mean_all(v))
    });
}

#[test]
fn bias_broadcast_gradients() {
    let bias = Tensor::new([4], vec![0.4, -0.2, 0.9, -1.3]).unwrap();
    {
        let bias = bias.clone();
        check_op("add_bias-lhs", &[2, 3, 4], same, move |tape, v| {
            let b = tape.leaf(bias.clone());
            tape.add_bias(v, b)
        });
    }
    let a = Tensor::new([2, 3, 4], (0..24).map(|i| (i as f64 * 0.21).cos()).collect()).unwrap();
    check_op("add_bias-rhs", &[4], |_| vec![2, 3, 4], move |tape, v| {
        let av = tape.leaf(a.clone());
        tape.add_bias(av, v)
    });
    check_op(
        "broadcast_trailing",
        &[2, 3],
        |_| vec![2, 3, 5],
        |tape, v| tape.broadcast_trailing(v, 5),
    );
    check_op(
        "broadcast_channel",
        &[2, 1, 4],
        |_| vec![2, 3, 4],
        |tape, v| tape.broadcast_channel(v, 3),
    );
}

#[test]
fn structural_op_gradients() {
    check_op("slice_trailing", &[2, 6], |_| vec![2, 3], |tape, v| {
        tape.slice_trailing(v, 2, 3)
    });
    let other = Tensor::new([2, 2], vec![1.0, -1.0, 0.5, 0.25]).unwrap();
    check_op("concat_trailing", &[2, 3], |_| vec![2, 5], move |tape, v| {
        let o = tape.leaf(other.clone());
        tape.concat_trailing(v, o)
    });
    check_op(
        "transpose_trailing",
        &[2, 3, 4],
        |_| vec![2, 4, 3],
        |tape, v| tape.transpose_trailing(v),
    );
    check_op("flip_trailing", &[2, 6], same, |tape, v| {
        tape.flip_trailing(v)
    });
    check_op("moving_avg", &[2, 9], same, |tape, v| {
        tape.moving_avg_trailing(v, 3)
    });
}

#[test]
fn spectral_op_gradients() {
    check_op("dft", &[2, 6], |_| vec![2, 12], |tape, v| tape.dft(v));
    check_op("dft_pow2", &[2, 8], |_| vec![2, 16], |tape, v| tape.dft(v));
    check_op("idft_real", &[2, 12], |_| vec![2, 6], |tape, v| {
        tape.idft_real(v)
    });
    check_op("dft_then_idft", &[1, 2, 8], same, |tape, v| {
        let f = tape.dft(v)?;
        tape.idft_real(f)
    });
}

#[test]
fn composite_graph_matches_finite_differences() {
    // exercise a deep mixed graph reusing the input several times
    let w = Tensor::new([4, 4], (0..16).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect())
        .unwrap();
    check_op("composite", &[2, 3, 4], |_| vec![2, 3], move |tape, v| {
        let wv = tape.leaf(w.clone());
        let h = tape.matmul(v, wv)?;
        let h = tape.leaky_relu(h, 0.05);
        let s = tape.add(h, v)?;
        let p = tape.mul(s, s)?;
        let m = tape.moving_avg_trailing(p, 3)?;
        let f = tape.dft(m)?;
        let b = tape.idft_real(f)?;
        let sliced = tape.slice_trailing(b, 1, 2)?;
        tape.mean_axis(sliced, 2)
    });
}
