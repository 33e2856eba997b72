mod common;

use daan_core::tensor::{fold, unfold, Tape, Tensor, Var};
use daan_core::DaanError;
use daan_oracles::{fd_gradient, max_rel_err};
use proptest::prelude::*;

type Build = dyn Fn(&mut Tape, &[Var]) -> daan_core::Result<Var>;

/// Compare reverse-mode gradients of `sum(build(inputs) * w)` with central
/// differences, returning the worst relative error over all inputs.
fn grad_check(shapes: &[&[usize]], seed: u64, build: &Build) -> f64 {
    let mut rng = common::rng(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::new(s.to_vec(), common::normal_vec(&mut rng, n, 1.0)).unwrap()
        })
        .collect();

    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = Tensor::new(
        out_shape.clone(),
        common::normal_vec(&mut rng, out_shape.iter().product(), 1.0),
    )
    .unwrap();

    let eval = |ins: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let s = tape.sum(prod).unwrap();
        (tape, vars, s)
    };

    let (tape, vars, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], t.len());
        let numeric = fd_gradient(
            |x| {
                let mut ins = inputs.clone();
                ins[k] = Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap();
                let (tape, _, s) = eval(&ins);
                tape.scalar_value(s)
            },
            t.data(),
            1e-6,
        )
        .unwrap();
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-6));
    }
    worst
}

fn assert_grad(name: &str, shapes: &[&[usize]], build: &Build) {
    for seed in 0..3 {
        let err = grad_check(shapes, seed, build);
        assert!(err < 1e-5, "{name} seed {seed}: relative error {err:.3e}");
    }
}

#[test]
fn matmul_and_transpose_gradients() {
    assert_grad("matmul", &[&[3, 4], &[4, 5]], &|t, v| t.matmul(v[0], v[1]));
    assert_grad("transpose", &[&[3, 4]], &|t, v| t.transpose(v[0]));
}

#[test]
fn elementwise_gradients() {
    assert_grad("add", &[&[2, 3], &[2, 3]], &|t, v| t.add(v[0], v[1]));
    assert_grad("sub", &[&[2, 3], &[2, 3]], &|t, v| t.sub(v[0], v[1]));
    assert_grad("mul", &[&[2, 3], &[2, 3]], &|t, v| t.mul(v[0], v[1]));
    assert_grad("scale", &[&[2, 3]], &|t, v| t.scale(v[0], -1.7));
    assert_grad("mul_const", &[&[2, 2]], &|t, v| t.mul_const(v[0], vec![0.0, 2.0, 1.0, -3.0]));
    assert_grad("relu", &[&[3, 5]], &|t, v| t.relu(v[0]));
}

#[test]
fn row_broadcast_gradients() {
    assert_grad("add_row", &[&[4, 3], &[1, 3]], &|t, v| t.add_row(v[0], v[1]));
    assert_grad("mul_row", &[&[4, 3], &[1, 3]], &|t, v| t.mul_row(v[0], v[1]));
}

#[test]
fn softmax_and_normalization_gradients() {
    assert_grad("softmax_rows", &[&[3, 4]], &|t, v| t.softmax_rows(v[0]));
    assert_grad("normalize_rows", &[&[3, 6]], &|t, v| t.normalize_rows(v[0], 1e-5));
    assert_grad("normalize_cols", &[&[4, 2]], &|t, v| {
        t.normalize_cols(v[0], &[0.3, -0.1], &[2.0, 0.5])
    });
}

#[test]
fn layout_gradients() {
    assert_grad("reshape", &[&[2, 6]], &|t, v| t.reshape(v[0], &[3, 4]));
    assert_grad("slice_cols", &[&[3, 5]], &|t, v| t.slice_cols(v[0], 1, 3));
    assert_grad("slice_rows", &[&[4, 2]], &|t, v| t.slice_rows(v[0], 1, 2));
    assert_grad("concat_cols", &[&[2, 2], &[2, 3]], &|t, v| t.concat_cols(&[v[0], v[1], v[0]]));
}

#[test]
fn conv_gradients() {
    for dilation in 1..=3 {
        assert_grad("conv1d_causal", &[&[3, 7], &[2, 3, 2]], &move |t, v| {
            t.conv1d_causal(v[0], v[1], dilation)
        });
    }
}

#[test]
fn reduction_and_distance_gradients() {
    assert_grad("sum", &[&[2, 3]], &|t, v| t.sum(v[0]));
    assert_grad("sum_sq", &[&[2, 3]], &|t, v| t.sum_sq(v[0]));
    assert_grad("distance", &[&[1, 5], &[1, 5]], &|t, v| t.distance(v[0], v[1]));
    assert_grad("mean_sq_distance", &[&[1, 5], &[1, 5]], &|t, v| t.mean_sq_distance(v[0], v[1]));
    assert_grad("sqrt", &[&[1, 4]], &|t, v| {
        let sq = t.mul(v[0], v[0])?;
        let one = t.constant(Tensor::filled(&[1, 4], 1.0));
        let pos = t.add(sq, one)?;
        t.sqrt(pos)
    });
}

#[test]
fn shared_node_accumulates() {
    // x used twice: d/dx sum(x * x) = 2x
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(vec![1.0, -2.0, 3.0]));
    let y = tape.mul(x, x).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 6.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::row(vec![1.0, 2.0]));
    let p = tape.param(Tensor::row(vec![3.0, 4.0]));
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
}

#[test]
fn shape_mismatches_are_errors() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[2, 3]));
    let c = tape.param(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.matmul(a, b), Err(DaanError::Dimension { .. })));
    assert!(matches!(tape.add(a, c), Err(DaanError::Dimension { .. })));
    assert!(tape.matmul(a, c).is_ok());
    assert!(tape.slice_cols(a, 2, 2).is_err());
    assert!(tape.reshape(a, &[4, 2]).is_err());
    let w = tape.param(Tensor::zeros(&[1, 2, 2]));
    assert!(matches!(tape.conv1d_causal(a, w, 0), Err(DaanError::Parameter(_))));
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
}

#[test]
fn overflow_is_reported() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::row(vec![1e300, 1.0]));
    let err = tape.scale(a, 1e10).unwrap_err();
    assert!(matches!(err, DaanError::NonFinite { op: "scale" }));
    let neg = tape.param(Tensor::row(vec![-1.0]));
    assert!(tape.sqrt(neg).is_err());
}

#[test]
fn backward_needs_scalar() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(a), Err(DaanError::Contract(_))));
    assert!(Tape::new().backward(a).is_err());
}

fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 1usize..7).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-50.0f64..50.0, r * c))
    })
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((r, c, data) in matrix_strategy()) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(r, c, data).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let t = tape.value(y);
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_row_shift((r, c, data) in matrix_strategy(), shift in -100.0f64..100.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(r, c, data.clone()).unwrap());
        let shifted = tape.constant(Tensor::matrix(r, c, data.iter().map(|v| v + shift).collect()).unwrap());
        let a = tape.softmax_rows(x).unwrap();
        let b = tape.softmax_rows(shifted).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn fold_unfold_roundtrip(tokens in 1usize..6, width in 1usize..8, seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let x = common::normal_vec(&mut rng, tokens * width, 1.0);
        let t = fold(&x, tokens).unwrap();
        prop_assert_eq!(t.shape(), &[tokens, width]);
        prop_assert_eq!(unfold(&t), x);
    }

    #[test]
    fn fold_rejects_uneven_splits(tokens in 2usize..6, width in 1usize..8, extra in 1usize..2) {
        let x = vec![0.0; tokens * width + extra];
        prop_assert!(fold(&x, tokens).is_err());
    }

    #[test]
    fn normalized_rows_have_zero_mean((r, c, data) in matrix_strategy()) {
        prop_assume!(c > 1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(r, c, data).unwrap());
        let y = tape.normalize_rows(x, 1e-5).unwrap();
        let t = tape.value(y);
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            prop_assert!((row.iter().sum::<f64>() / c as f64).abs() < 1e-9);
        }
    }
}
