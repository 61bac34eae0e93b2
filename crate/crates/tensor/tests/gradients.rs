//! Backward-vs-central-difference checks for every primitive, plus the
//! determinism and stop-gradient properties of the tape.

use std::rc::Rc;

use adastate_tensor::{finite_diff_grad, max_rel_error, SeededRng, Tape, Tensor, Var};

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;

/// Builds a scalar from op outputs with fixed random weights so every
/// output coordinate influences the loss.
fn weighted_scalar(v: &Var, weights: &Tensor) -> Var {
    let w = v.tape().constant(weights);
    v.mul(&w).unwrap().sum_all()
}

fn check_unary(
    name: &str,
    seed: u64,
    shape: Vec<usize>,
    positive_input: bool,
    build: impl Fn(&Var) -> Var,
) {
    let mut rng = SeededRng::with_stream(seed, 11);
    let mut x = rng.normal_tensor(shape.clone());
    if positive_input {
        for v in x.data_mut() {
            *v = v.abs() + 0.5;
        }
    }

    let tape = Tape::new();
    let xv = tape.param(&x);
    let out = build(&xv);
    let weights = rng.normal_tensor(out.shape().to_vec());
    let loss = weighted_scalar(&out, &weights);
    let grads = tape.backward(&loss).unwrap();
    let got = grads.wrt(&xv).expect("gradient must reach the input");

    let fd = finite_diff_grad(
        |t| {
            let tape = Tape::new();
            let xv = tape.param(t);
            weighted_scalar(&build(&xv), &weights).scalar_value()
        },
        &x,
        FD_STEP,
    )
    .unwrap();
    let err = max_rel_error(&got, &fd, ABS_FLOOR);
    assert!(err < REL_TOL, "{name} seed {seed}: max rel err {err:e}");
}

fn check_binary(name: &str, seed: u64, sa: Vec<usize>, sb: Vec<usize>, build: impl Fn(&Var, &Var) -> Var) {
    let mut rng = SeededRng::with_stream(seed, 13);
    let a = rng.normal_tensor(sa);
    let b = rng.normal_tensor(sb);

    let tape = Tape::new();
    let av = tape.param(&a);
    let bv = tape.param(&b);
    let out = build(&av, &bv);
    let weights = rng.normal_tensor(out.shape().to_vec());
    let loss = weighted_scalar(&out, &weights);
    let grads = tape.backward(&loss).unwrap();

    for (label, leaf, base, other, first) in [
        ("lhs", grads.wrt(&av).unwrap(), &a, &b, true),
        ("rhs", grads.wrt(&bv).unwrap(), &b, &a, false),
    ] {
        let fd = finite_diff_grad(
            |t| {
                let tape = Tape::new();
                let (av, bv) = if first {
                    (tape.param(t), tape.param(other))
                } else {
                    (tape.param(other), tape.param(t))
                };
                weighted_scalar(&build(&av, &bv), &weights).scalar_value()
            },
            base,
            FD_STEP,
        )
        .unwrap();
        let err = max_rel_error(&leaf, &fd, ABS_FLOOR);
        assert!(err < REL_TOL, "{name}/{label} seed {seed}: max rel err {err:e}");
    }
}

#[test]
fn elementwise_and_reduction_primitives_match_oracle() {
    for seed in 0..100 {
        let mut dims = SeededRng::with_stream(seed, 5);
        let r = 1 + dims.index(7);
        let c = 1 + dims.index(7);
        check_unary("affine", seed, vec![r, c], false, |x| x.affine(1.7, -0.3));
        check_unary("exp", seed, vec![r, c], false, |x| x.exp());
        check_unary("sigmoid", seed, vec![r, c], false, |x| x.sigmoid());
        check_unary("silu", seed, vec![r, c], false, |x| x.silu().unwrap());
        check_unary("rsqrt", seed, vec![r, c], true, |x| x.rsqrt());
        check_unary("sum_all", seed, vec![r, c], false, |x| x.sum_all());
        check_unary("mean_rows", seed, vec![r, c], false, |x| x.mean_rows().unwrap());
        check_unary("softmax_rows", seed, vec![r, c], false, |x| {
            x.softmax_rows().unwrap()
        });
        check_unary("reshape", seed, vec![r, c], false, |x| {
            x.reshape(vec![x.numel()]).unwrap().reshape(vec![x.numel(), 1]).unwrap()
        });
    }
}

#[test]
fn broadcast_binary_primitives_match_oracle() {
    for seed in 0..100 {
        let mut dims = SeededRng::with_stream(seed, 6);
        let r = 1 + dims.index(7);
        let c = 1 + dims.index(7);
        check_binary("add", seed, vec![r, c], vec![r, c], |a, b| a.add(b).unwrap());
        check_binary("sub", seed, vec![r, c], vec![r, c], |a, b| a.sub(b).unwrap());
        check_binary("mul", seed, vec![r, c], vec![r, c], |a, b| a.mul(b).unwrap());
        // broadcast variants: row vector, column, scalar
        check_binary("add_bcast_row", seed, vec![r, c], vec![c], |a, b| a.add(b).unwrap());
        check_binary("mul_bcast_col", seed, vec![r, c], vec![r, 1], |a, b| a.mul(b).unwrap());
        check_binary("sub_bcast_scalar", seed, vec![r, c], vec![1], |a, b| a.sub(b).unwrap());
    }
}

#[test]
fn matmul_primitives_match_oracle() {
    for seed in 0..100 {
        let mut dims = SeededRng::with_stream(seed, 7);
        let m = 1 + dims.index(5);
        let k = 1 + dims.index(5);
        let n = 1 + dims.index(5);
        check_binary("matmul", seed, vec![m, k], vec![k, n], |a, b| a.matmul(b).unwrap());
        check_binary("matmul_nt", seed, vec![m, k], vec![n, k], |a, b| {
            a.matmul_nt(b).unwrap()
        });
    }
}

#[test]
fn structural_primitives_match_oracle() {
    for seed in 0..100 {
        let mut dims = SeededRng::with_stream(seed, 8);
        let r = 2 + dims.index(5);
        let c = 2 * (1 + dims.index(3));
        let start = dims.index(r - 1);
        let len = 1 + dims.index(r - start);
        check_unary("slice_rows", seed, vec![r, c], false, move |x| {
            x.slice_rows(start, len).unwrap()
        });
        let cstart = dims.index(c - 1);
        let clen = 1 + dims.index(c - cstart);
        check_unary("slice_cols", seed, vec![r, c], false, move |x| {
            x.slice_cols(cstart, clen).unwrap()
        });

        let mut phase_rng = SeededRng::with_stream(seed, 9);
        let phases: Rc<Vec<f64>> =
            Rc::new((0..r * c / 2).map(|_| phase_rng.uniform_range(-3.0, 3.0)).collect());
        check_unary("rope", seed, vec![r, c], false, move |x| {
            x.rope(phases.clone()).unwrap()
        });

        check_binary("concat_rows", seed, vec![r, c], vec![2, c], |a, b| {
            Var::concat_rows(&[a.clone(), b.clone()]).unwrap()
        });
        check_binary("concat_cols", seed, vec![r, c], vec![r, 2], |a, b| {
            Var::concat_cols(&[a.clone(), b.clone()]).unwrap()
        });
    }
}

#[test]
fn softmax_cross_term_matches_oracle_on_random_5_vector() {
    let mut rng = SeededRng::with_stream(2024, 21);
    let x = rng.normal_tensor(vec![1, 5]);
    let target = rng.normal_tensor(vec![1, 5]);

    let eval = |t: &Tensor| {
        let tape = Tape::new();
        let xv = tape.param(t);
        let tv = tape.constant(&target);
        xv.softmax_rows().unwrap().mul(&tv).unwrap().sum_all()
    };

    let tape = Tape::new();
    let xv = tape.param(&x);
    let tv = tape.constant(&target);
    let loss = xv.softmax_rows().unwrap().mul(&tv).unwrap().sum_all();
    let grads = tape.backward(&loss).unwrap();
    let got = grads.wrt(&xv).unwrap();

    let fd = finite_diff_grad(|t| eval(t).scalar_value(), &x, 1e-6).unwrap();
    let err = max_rel_error(&got, &fd, ABS_FLOOR);
    assert!(err < 1e-5, "softmax cross term: {err:e}");
}

#[test]
fn forward_is_bit_deterministic_across_runs() {
    let run = || {
        let mut rng = SeededRng::with_stream(77, 3);
        let a = rng.normal_tensor(vec![6, 6]);
        let b = rng.normal_tensor(vec![6, 6]);
        let tape = Tape::new();
        let av = tape.constant(&a);
        let bv = tape.constant(&b);
        av.matmul(&bv)
            .unwrap()
            .softmax_rows()
            .unwrap()
            .sum_all()
            .scalar_value()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn stop_gradient_changes_no_forward_value_and_zeroes_exactly_its_path() {
    let mut rng = SeededRng::with_stream(5, 50);
    let x = rng.normal_tensor(vec![3, 3]);
    let y = rng.normal_tensor(vec![3, 3]);

    let eval = |detach: bool| {
        let tape = Tape::new();
        let xv = tape.param(&x);
        let yv = tape.param(&y);
        let branch = if detach { xv.stop_gradient() } else { xv.clone() };
        // x participates both through the (maybe detached) branch and directly.
        let loss = branch
            .mul(&yv)
            .unwrap()
            .add(&xv)
            .unwrap()
            .sum_all();
        let grads = tape.backward(&loss).unwrap();
        (loss.scalar_value(), grads.wrt(&xv).unwrap(), grads.wrt(&yv).unwrap())
    };

    let (v_plain, gx_plain, gy_plain) = eval(false);
    let (v_sg, gx_sg, gy_sg) = eval(true);
    assert_eq!(v_plain.to_bits(), v_sg.to_bits(), "sg must not change forward");
    assert_eq!(gy_plain, gy_sg, "gradient not flowing through sg is untouched");
    // through the detached branch only the direct path remains: d/dx = 1
    for (i, v) in gx_sg.data().iter().enumerate() {
        assert_eq!(*v, 1.0, "coord {i}");
        assert!((gx_plain.data()[i] - (y.data()[i] + 1.0)).abs() < 1e-12);
    }
}
