//! Analytic gradients against central finite differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slom::attack::{slom_loss_type1, slom_loss_type2, tap_loss_gradient};
use slom::tensor::ops;
use slom::{Graph, Network, NetworkSpec, Padding, Tensor, Var};

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-9;
const H: f64 = 1e-6;
const COORDS: usize = 100;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    assert!(
        err <= REL_TOL * scale + ABS_FLOOR,
        "{what}: analytic {analytic:e} vs numeric {numeric:e}"
    );
}

/// Checks `d f / d inputs[which]` at up to `COORDS` random coordinates.
///
/// `build` records the scalar loss from leaves holding `inputs`.
fn check(
    inputs: &[Tensor],
    which: usize,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
    seed: u64,
    what: &str,
) {
    let eval = |inputs: &[Tensor], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), grad && i == which))
            .collect();
        let loss = build(&mut g, &vars);
        let value = g.value(loss).data()[0];
        if grad {
            g.backward(loss).unwrap();
            (value, g.take_grad(vars[which]))
        } else {
            (value, None)
        }
    };
    let (_, grad) = eval(inputs, true);
    let grad = grad.unwrap();
    let n = inputs[which].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, n, COORDS.min(n)) {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += H;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= H;
        let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        assert_close(grad[i], numeric, &format!("{what}[{i}]"));
    }
}

/// Projects an op's output onto a fixed random direction so every output
/// element contributes to the scalar loss.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = random(&shape, -1.0, 1.0, &mut rng);
    let d = g.leaf(dir.map(|_| 0.0), false);
    let dirv = g.leaf(dir, false);
    // mse(out, 0) - mse(out - dir, 0) is linear in out up to a constant.
    let shifted = g.scale(dirv, -1.0);
    let moved = g.add(out, shifted).unwrap();
    let a = g.mse(out, d).unwrap();
    let b = g.mse(moved, d).unwrap();
    let nb = g.scale(b, -1.0);
    g.add(a, nb).unwrap()
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for padding in [Padding::Same, Padding::Valid] {
        let inputs = vec![
            random(&[3, 9, 9], -1.0, 1.0, &mut rng),
            random(&[4, 3, 3, 3], -1.0, 1.0, &mut rng),
            random(&[4], -1.0, 1.0, &mut rng),
        ];
        for which in 0..3 {
            check(
                &inputs,
                which,
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], padding).unwrap();
                    project(g, y, 9)
                },
                which as u64,
                &format!("conv2d {padding:?} input {which}"),
            );
        }
    }
}

#[test]
fn pooling_and_relu_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = vec![random(&[3, 8, 8], -1.0, 1.0, &mut rng)];
    check(
        &x,
        0,
        |g, v| {
            let y = g.maxpool2d(v[0], 2).unwrap();
            project(g, y, 1)
        },
        1,
        "maxpool",
    );
    check(
        &x,
        0,
        |g, v| {
            let y = g.meanpool2d(v[0], 2).unwrap();
            project(g, y, 2)
        },
        2,
        "meanpool",
    );
    check(
        &x,
        0,
        |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 3)
        },
        3,
        "relu",
    );
}

#[test]
fn dense_and_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[20], -1.0, 1.0, &mut rng),
        random(&[7, 20], -1.0, 1.0, &mut rng),
        random(&[7], -1.0, 1.0, &mut rng),
    ];
    for which in 0..3 {
        check(
            &inputs,
            which,
            |g, v| {
                let y = g.dense(v[0], v[1], v[2]).unwrap();
                g.softmax_cross_entropy(y, 4).unwrap()
            },
            which as u64,
            &format!("dense input {which}"),
        );
    }
    let pair = vec![
        random(&[2, 5, 5], -1.0, 1.0, &mut rng),
        random(&[2, 5, 5], -1.0, 1.0, &mut rng),
    ];
    check(&pair, 0, |g, v| g.mse(v[0], v[1]).unwrap(), 4, "mse a");
    check(&pair, 1, |g, v| g.mse(v[0], v[1]).unwrap(), 5, "mse b");
    check(
        &pair,
        0,
        |g, v| {
            let f = g.flatten(v[0]);
            let s = g.sum(f);
            g.scale(s, 0.3)
        },
        6,
        "sum",
    );
}

fn trained_like_target(seed: u64) -> Network {
    Network::init(&NetworkSpec::mnist_target(), seed)
}

fn input_fd(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &[f64], seed: u64, what: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, x.len(), COORDS) {
        let mut plus = x.clone();
        plus.data_mut()[i] += H;
        let mut minus = x.clone();
        minus.data_mut()[i] -= H;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
        assert_close(analytic[i], numeric, &format!("{what}[{i}]"));
    }
}

#[test]
fn target_network_input_gradients_at_every_tap() {
    let net = trained_like_target(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 28, 28], 0.0, 1.0, &mut rng);
    let x_bar = random(&[1, 28, 28], 0.0, 1.0, &mut rng);
    let donor = random(&[1, 28, 28], 0.0, 1.0, &mut rng);
    for (name, tap) in net.spec().taps() {
        let reference = net.encode(&x_bar, tap).unwrap();
        let (_, grad) = tap_loss_gradient(&net, tap, &x, &reference).unwrap();
        input_fd(
            |x| slom_loss_type1(&net, tap, x, &x_bar).unwrap(),
            &x,
            &grad,
            6,
            &format!("type1 {name}"),
        );

        let latent = net.encode(&donor, tap).unwrap();
        let (_, grad) = tap_loss_gradient(&net, tap, &x, &latent).unwrap();
        input_fd(
            |x| slom_loss_type2(&net, tap, x, &latent).unwrap(),
            &x,
            &grad,
            7,
            &format!("type2 {name}"),
        );
    }
}

#[test]
fn target_network_classifier_gradients() {
    let net = trained_like_target(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[1, 28, 28], 0.0, 1.0, &mut rng);
    let ce = |net: &Network, x: &Tensor| {
        ops::softmax_cross_entropy(&net.logits(x).unwrap(), 3)
            .unwrap()
            .0
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let rec = net.record_logits(&mut g, xv, true).unwrap();
    let loss = g.softmax_cross_entropy(rec.last(), 3).unwrap();
    g.backward(loss).unwrap();
    let input_grad = g.grad(xv).unwrap().to_vec();
    input_fd(|x| ce(&net, x), &x, &input_grad, 10, "logits input");

    // Sampled weight coordinates of every weighted layer.
    for &(layer, wv, bv) in &rec.params {
        for (var, is_bias) in [(wv, false), (bv, true)] {
            let analytic = g.grad(var).unwrap().to_vec();
            let n = analytic.len();
            let mut rng = ChaCha8Rng::seed_from_u64(layer as u64);
            for i in sample(&mut rng, n, 20.min(n)) {
                let bump = |d: f64| {
                    let mut n2 = net.clone();
                    let p = n2.params_mut()[layer].as_mut().unwrap();
                    let t = if is_bias { &mut p.bias } else { &mut p.weights };
                    t.data_mut()[i] += d;
                    ce(&n2, &x)
                };
                let numeric = (bump(H) - bump(-H)) / (2.0 * H);
                assert_close(
                    analytic[i],
                    numeric,
                    &format!("layer {layer} bias={is_bias} [{i}]"),
                );
            }
        }
    }
}
