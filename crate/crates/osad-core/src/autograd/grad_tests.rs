//! Finite-difference checks for every tape op.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{finite_diff_grad, max_rel_error};
use super::{Tape, Var};

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Check d(f)/d(input) against central differences for a graph builder that
/// maps one input leaf to a scalar root.
fn check_input_grad<F>(build: F, x: &ArrayD<f64>, tol: f64)
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let root = build(&mut tape, xv);
    let grads = tape.backward(root).unwrap();
    let analytic = grads.get(xv).expect("input grad");

    let numeric = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            let v = t.leaf(probe.clone());
            let r = build(&mut t, v);
            t.scalar(r)
        },
        x,
        1e-5,
    );
    let err = max_rel_error(analytic, &numeric);
    assert!(err < tol, "gradient mismatch: rel err {err}");
}

#[test]
fn grad_add_mul_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_array(&mut rng, &[2, 3, 2, 2]);
    let bias = rand_array(&mut rng, &[1, 3, 1, 1]);
    check_input_grad(
        |t, v| {
            let b = t.constant(bias.clone());
            let s = t.add(v, b);
            let m = t.mul(s, v);
            t.sum_all(m)
        },
        &x,
        1e-6,
    );
}

#[test]
fn grad_broadcast_reduces_to_small_side() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let big = rand_array(&mut rng, &[2, 4, 3, 3]);
    let small = rand_array(&mut rng, &[1, 4, 1, 1]);
    check_input_grad(
        |t, v| {
            let b = t.constant(big.clone());
            let m = t.mul(v, b);
            t.sum_all(m)
        },
        &small,
        1e-6,
    );
}

#[test]
fn grad_matmul_relu_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_array(&mut rng, &[3, 4]);
    let w = rand_array(&mut rng, &[4, 5]);
    check_input_grad(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv);
            let r = t.relu(y);
            let s = t.sigmoid(r);
            t.mean_all(s)
        },
        &x,
        1e-5,
    );
    // also wrt the weight
    check_input_grad(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, v);
            let s = t.sigmoid(y);
            t.sum_all(s)
        },
        &w,
        1e-5,
    );
}

#[test]
fn grad_log_softmax_select() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_array(&mut rng, &[4, 6]);
    check_input_grad(
        |t, v| {
            let lp = t.log_softmax_rows(v);
            let picked = t.select_rows(lp, vec![0, 3, 5, 2]);
            let s = t.sum_all(picked);
            t.neg(s)
        },
        &x,
        1e-6,
    );
}

#[test]
fn grad_ln_floored() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_array(&mut rng, &[3, 3]).mapv(|v| v.abs() + 0.5);
    check_input_grad(
        |t, v| {
            let l = t.ln_floored(v, 1e-12);
            t.sum_all(l)
        },
        &x,
        1e-6,
    );
}

#[test]
fn grad_conv2d_input_and_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_array(&mut rng, &[2, 3, 5, 5]);
    let w = rand_array(&mut rng, &[4, 3, 3, 3]);
    check_input_grad(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(v, wv, 2, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        },
        &x,
        1e-5,
    );
    check_input_grad(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v, 1, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        },
        &w,
        1e-5,
    );
}

#[test]
fn grad_conv_t2d_input_and_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_array(&mut rng, &[2, 3, 4, 4]);
    let w = rand_array(&mut rng, &[3, 2, 4, 4]);
    check_input_grad(
        |t, v| {
            let wv = t.constant(w.clone());
            let y = t.conv_t2d(v, wv, 2, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        },
        &x,
        1e-5,
    );
    check_input_grad(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv_t2d(xv, v, 2, 1);
            let s = t.sigmoid(y);
            t.sum_all(s)
        },
        &w,
        1e-5,
    );
}

#[test]
fn conv_t2d_upsamples_shape() {
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 4, 1, 1])));
    let w = tape.leaf(ArrayD::zeros(IxDyn(&[4, 2, 4, 4])));
    let y = tape.conv_t2d(x, w, 1, 0);
    assert_eq!(tape.shape(y), &[1, 2, 4, 4]);
    let w2 = tape.leaf(ArrayD::zeros(IxDyn(&[2, 2, 4, 4])));
    let y2 = tape.conv_t2d(y, w2, 2, 1);
    assert_eq!(tape.shape(y2), &[1, 2, 8, 8]);
}

#[test]
fn grad_pooling_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_array(&mut rng, &[2, 4, 3, 3]);
    check_input_grad(
        |t, v| {
            let p = t.global_avg_pool(v);
            let s = t.sigmoid(p);
            t.sum_all(s)
        },
        &x,
        1e-6,
    );
    check_input_grad(
        |t, v| {
            let p = t.global_max_pool(v);
            let s = t.sigmoid(p);
            t.sum_all(s)
        },
        &x,
        1e-5,
    );
    check_input_grad(
        |t, v| {
            let m = t.channel_mean(v);
            let s = t.sigmoid(m);
            t.sum_all(s)
        },
        &x,
        1e-6,
    );
    check_input_grad(
        |t, v| {
            let m = t.channel_max(v);
            let s = t.sigmoid(m);
            t.sum_all(s)
        },
        &x,
        1e-5,
    );
}

#[test]
fn grad_concat_reshape_mean_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_array(&mut rng, &[2, 2, 4, 4]);
    check_input_grad(
        |t, v| {
            let a = t.channel_mean(v);
            let b = t.channel_max(v);
            let c = t.concat_channels(a, b);
            let f = t.mean_filter3x3(c);
            let r = t.reshape(f, &[2, 2 * 16]);
            let s = t.sigmoid(r);
            t.sum_all(s)
        },
        &x,
        1e-5,
    );
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
    let d = tape.detach(x);
    let y = tape.mul(d, d);
    let root = tape.sum_all(y);
    let grads = tape.backward(root).unwrap();
    assert!(grads.get(x).is_none(), "detached path must not reach the leaf");
}

#[test]
fn shared_subexpression_accumulates() {
    // f(x) = x*x summed; grad = 2x through two parent slots of one node.
    let x = ArrayD::from_elem(IxDyn(&[3]), 2.0);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.mul(v, v);
    let root = tape.sum_all(y);
    let grads = tape.backward(root).unwrap();
    let g = grads.get(v).unwrap();
    for &gi in g.iter() {
        assert!((gi - 4.0).abs() < 1e-12);
    }
}
