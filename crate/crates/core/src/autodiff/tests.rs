use super::gradcheck::{check, project};
use super::*;
use crate::rng::SplitMix64;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>())
}

#[test]
fn relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn sigmoid_at_zero() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::scalar(0.0));
    let y = tape.sigmoid(w);
    assert_eq!(tape.value(y).item(), 0.5);
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(w).unwrap().item(), 0.25);
}

#[test]
fn conv_of_ones_sums_input() {
    let mut tape = Tape::<f64>::new();
    let vals: Vec<f64> = (1..=9).map(|v| v as f64 * 0.5).collect();
    let x = tape.constant(t(&[1, 1, 3, 3], &vals));
    let w = tape.constant(t(&[1, 1, 3, 3], &[1.0; 9]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
    let direct: f64 = vals.iter().sum();
    assert_eq!(tape.value(y).item(), direct);
}

#[test]
fn conv_padding_and_stride_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
    let w_bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, w_bad, None, 1, 1), Err(AutodiffError::Shape(_))));
}

#[test]
fn sum_grad_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[1.0, -4.0, 2.0]));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn shared_input_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[3.0, -1.0]));
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn non_scalar_root_is_graph_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let y = tape.relu(x);
    assert!(matches!(tape.backward(y), Err(AutodiffError::Graph(_))));
}

#[test]
fn matmul_shape_error_names_dims() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = SplitMix64::new(4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&mut rng, &[4, 6]));
    let s = tape.softmax(x).unwrap();
    for row in tape.value(s).data().chunks(6) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn max_pool_picks_maximum() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0]));
    let y = tape.max_pool2(x).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 9.0]);
}

#[test]
fn batch_norm_eval_uses_running_stats() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 1, 1, 1], &[3.0, 5.0]));
    let g = tape.constant(t(&[1], &[2.0]));
    let b = tape.constant(t(&[1], &[1.0]));
    let mean = [1.0];
    let var = [4.0 - BN_EPS];
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Eval { mean: &mean, var: &var }, BN_EPS).unwrap();
    assert!(stats.is_none());
    let out = tape.value(y).data();
    assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
}

#[test]
fn batch_norm_train_normalizes() {
    let mut rng = SplitMix64::new(8);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random(&mut rng, &[4, 2, 3, 3]));
    let g = tape.constant(t(&[2], &[1.0, 1.0]));
    let b = tape.constant(t(&[2], &[0.0, 0.0]));
    let (y, stats) = tape.batch_norm(x, g, b, BnMode::Train, BN_EPS).unwrap();
    assert_eq!(stats.unwrap().mean.len(), 2);
    let out = tape.value(y).data();
    let ch0: Vec<f64> = out.chunks(9).step_by(2).flatten().copied().collect();
    let mean = ch0.iter().sum::<f64>() / ch0.len() as f64;
    assert!(mean.abs() < 1e-12);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = SplitMix64::new(12);
    let x = random(&mut rng, &[3, 2, 6, 6]);
    let w = random(&mut rng, &[4, 2, 3, 3]);
    let run = || {
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

fn assert_grads(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>) {
    let report = check(inputs, 1e-3, f).unwrap();
    assert!(report.max_rel_error() <= 1e-4, "rel error {}", report.max_rel_error());
}

#[test]
fn gradcheck_conv_bias_stride() {
    let mut rng = SplitMix64::new(21);
    for (stride, pad) in [(1, 1), (2, 0), (2, 1)] {
        let x = random(&mut rng, &[2, 2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let proj: Vec<f64> = (0..200).map(|_| rng.uniform(-1.0, 1.0)).collect();
        assert_grads(&[x, w, b], |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            let n = tape.value(y).numel();
            project(tape, y, &proj[..n])
        });
    }
}

#[test]
fn gradcheck_matmul_softmax() {
    let mut rng = SplitMix64::new(22);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    let proj: Vec<f64> = (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect();
    assert_grads(&[a, b], |tape, v| {
        let y = tape.matmul(v[0], v[1])?;
        let s = tape.softmax(y)?;
        project(tape, s, &proj)
    });
}

#[test]
fn gradcheck_batch_norm_train() {
    let mut rng = SplitMix64::new(23);
    let x = random(&mut rng, &[3, 2, 2, 2]);
    let g = random(&mut rng, &[2]);
    let b = random(&mut rng, &[2]);
    let proj: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
    assert_grads(&[x, g, b], |tape, v| {
        let (y, _) = tape.batch_norm(v[0], v[1], v[2], BnMode::Train, BN_EPS)?;
        project(tape, y, &proj)
    });
}
