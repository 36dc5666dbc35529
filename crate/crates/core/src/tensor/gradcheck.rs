//! Central finite-difference verification of tape gradients in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, Var};

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;

/// `||a - b|| / max(||a||, ||b||)`, with a floor so two zero gradients compare as equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-10)
}

/// Compares analytic and central-difference gradients of a scalar function of
/// several tensors. `build` receives one trainable leaf per input and must
/// return a scalar node. Returns the worst relative error over all inputs.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|x| tape.param(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("trainable leaf");
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[j];
            probe[k].data_mut()[j] = orig + FD_EPS;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = orig - FD_EPS;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    Ok(worst)
}

/// Reduces an arbitrary-shape node to a scalar through a fixed random
/// projection, so every output entry contributes a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// A named randomized gradient check: draws shapes and inputs from the
/// generator and returns the worst relative error.
pub type OpCheck = (&'static str, fn(&mut ChaCha8Rng) -> Result<f64>);

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Normal draws pushed at least 0.05 away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng).map(|v| v.signum() * (v.abs() + 0.05))
}

fn projected(
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    // Probe the output shape once to size the projection weights.
    let mut probe = Tape::new();
    let vars = inputs.iter().map(|x| probe.constant(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut probe, &vars)?;
    let weights = randn(probe.shape(out), rng);
    check(&inputs, |tape, v| {
        let y = f(tape, v)?;
        project(tape, y, &weights)
    })
}

/// Every differentiable op exposed by [`Tape`].
pub fn op_suite() -> Vec<OpCheck> {
    vec![
        ("conv2d", |rng| {
            let (n, c, f) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let (k, stride, pad) = (dims(rng, 1, 3), dims(rng, 1, 2), dims(rng, 0, 1));
            let side = dims(rng, k.max(3), 6);
            let x = randn(&[n, c, side, side], rng);
            let w = randn(&[f, c, k, k], rng);
            projected(vec![x, w], rng, |t, v| t.conv2d(v[0], v[1], stride, pad))
        }),
        ("conv_transpose2d", |rng| {
            let (n, c, f) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let (k, stride) = (dims(rng, 2, 4), dims(rng, 1, 3));
            let pad = dims(rng, 0, (k - 1) / 2);
            let side = dims(rng, 1, 4);
            let x = randn(&[n, c, side, side], rng);
            let w = randn(&[c, f, k, k], rng);
            projected(vec![x, w], rng, |t, v| t.conv_transpose2d(v[0], v[1], stride, pad))
        }),
        ("maxpool2d", |rng| {
            let (n, c) = (dims(rng, 1, 2), dims(rng, 1, 2));
            let (window, stride) = (dims(rng, 1, 3), dims(rng, 1, 3));
            let side = dims(rng, window, 6);
            let x = randn(&[n, c, side, side], rng);
            projected(vec![x], rng, |t, v| t.maxpool2d(v[0], window, stride))
        }),
        ("dense", |rng| {
            let (n, i, o) = (dims(rng, 1, 4), dims(rng, 1, 5), dims(rng, 1, 5));
            let x = randn(&[n, i], rng);
            let w = randn(&[i, o], rng);
            let b = randn(&[o], rng);
            projected(vec![x, w, b], rng, |t, v| t.dense(v[0], v[1], Some(v[2])))
        }),
        ("transpose", |rng| {
            let x = randn(&[dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            projected(vec![x], rng, |t, v| t.transpose(v[0]))
        }),
        ("add_channel_bias", |rng| {
            let c = dims(rng, 1, 3);
            let x = randn(&[dims(rng, 1, 2), c, dims(rng, 1, 3), dims(rng, 1, 3)], rng);
            let b = randn(&[c], rng);
            projected(vec![x, b], rng, |t, v| t.add_channel_bias(v[0], v[1]))
        }),
        ("leaky_relu", |rng| {
            let slope = rng.random_range(0.0..0.5);
            let x = away_from_zero(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            projected(vec![x], rng, move |t, v| t.leaky_relu(v[0], slope))
        }),
        ("sigmoid", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            projected(vec![x], rng, |t, v| t.sigmoid(v[0]))
        }),
        ("tanh", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            projected(vec![x], rng, |t, v| t.tanh(v[0]))
        }),
        ("batchnorm_train", |rng| {
            let c = dims(rng, 1, 3);
            let x = randn(&[dims(rng, 2, 3), c, dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            let gamma = randn(&[c], rng);
            let beta = randn(&[c], rng);
            projected(vec![x, gamma, beta], rng, |t, v| Ok(t.batchnorm_train(v[0], v[1], v[2], 1e-5)?.0))
        }),
        ("batchnorm_eval", |rng| {
            let c = dims(rng, 1, 3);
            let x = randn(&[dims(rng, 1, 3), c, dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            let gamma = randn(&[c], rng);
            let beta = randn(&[c], rng);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..2.0)).collect();
            projected(vec![x, gamma, beta], rng, move |t, v| t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5))
        }),
        ("bce_loss", |rng| {
            let n = dims(rng, 1, 8);
            let p = Tensor::from_fn(&[n, 1], |_| rng.random_range(0.05..0.95));
            let targets = Tensor::from_fn(&[n, 1], |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
            check(&[p], move |t, v| t.bce(v[0], &targets))
        }),
        ("softmax_cross_entropy", |rng| {
            let (n, k) = (dims(rng, 1, 4), dims(rng, 2, 5));
            let x = randn(&[n, k], rng);
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            check(&[x], move |t, v| t.softmax_cross_entropy(v[0], &targets))
        }),
        ("reshape", |rng| {
            let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
            let x = randn(&[a, b], rng);
            projected(vec![x], rng, move |t, v| t.reshape(v[0], &[b, a]))
        }),
        ("add_sub_mul", |rng| {
            let shape = [dims(rng, 1, 3), dims(rng, 1, 4)];
            let a = randn(&shape, rng);
            let b = randn(&shape, rng);
            projected(vec![a, b], rng, |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                t.mul(s, d)
            })
        }),
        ("scale", |rng| {
            let s = rng.random_range(-2.0..2.0);
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 4)], rng);
            projected(vec![x], rng, move |t, v| t.scale(v[0], s))
        }),
        ("abs", |rng| {
            let x = away_from_zero(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            projected(vec![x], rng, |t, v| t.abs(v[0]))
        }),
        ("square", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            projected(vec![x], rng, |t, v| t.square(v[0]))
        }),
        ("sum_mean", |rng| {
            let x = randn(&[dims(rng, 1, 3), dims(rng, 1, 6)], rng);
            check(&[x], |t, v| {
                let sq = t.square(v[0])?;
                let s = t.sum(sq)?;
                let m = t.mean(v[0])?;
                let m2 = t.square(m)?;
                t.add(s, m2)
            })
        }),
        ("sum_rows", |rng| {
            let x = randn(&[dims(rng, 1, 4), dims(rng, 1, 3), dims(rng, 1, 3)], rng);
            projected(vec![x], rng, |t, v| t.sum_rows(v[0]))
        }),
        ("global_avg_pool", |rng| {
            let x = randn(&[dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)], rng);
            projected(vec![x], rng, |t, v| t.global_avg_pool(v[0]))
        }),
        ("l2_normalize", |rng| {
            let x = away_from_zero(&[dims(rng, 1, 4), dims(rng, 2, 6)], rng);
            projected(vec![x], rng, |t, v| t.l2_normalize(v[0]))
        }),
    ]
}
