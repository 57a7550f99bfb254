use proptest::prelude::*;
use slom::network::{read_weights, write_weights};
use slom::structural::{amplification_bound, decoupled_pool_objective, decoupled_relu_objective};
use slom::tensor::ops::{maxpool2d, relu};
use slom::{Network, NetworkSpec, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #[test]
    fn lowering_non_maxima_preserves_maxpool(
        x in tensor(vec![2, 6, 6]),
        fractions in prop::collection::vec(0.0f64..1.0, 72),
    ) {
        let (out, argmax) = maxpool2d(&x, 2).unwrap();
        let mut y = x.clone();
        for (o, &keep) in argmax.iter().enumerate() {
            let (c, pi, pj) = (o / 9, (o / 3) % 3, o % 3);
            for u in 0..2 {
                for v in 0..2 {
                    let idx = (c * 6 + 2 * pi + u) * 6 + 2 * pj + v;
                    if idx != keep {
                        // anywhere between -3 and the patch maximum
                        let max = out.data()[o];
                        y.data_mut()[idx] = -3.0 + fractions[idx] * (max + 3.0);
                    }
                }
            }
        }
        let (out_y, _) = maxpool2d(&y, 2).unwrap();
        prop_assert_eq!(out_y.data(), out.data());
        prop_assert_eq!(decoupled_pool_objective(&y, &x, 2).unwrap(), 0.0);
    }

    #[test]
    fn changing_non_positive_entries_preserves_relu(
        x in tensor(vec![40]),
        replacement in prop::collection::vec(-5.0f64..=0.0, 40),
    ) {
        let mut y = x.clone();
        for ((yi, &xi), &r) in y.data_mut().iter_mut().zip(x.data()).zip(&replacement) {
            if xi <= 0.0 {
                *yi = r;
            }
        }
        prop_assert_eq!(relu(&y), relu(&x));
        prop_assert_eq!(decoupled_relu_objective(&y, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_relu_objective_implies_equal_relu(x in tensor(vec![30]), y in tensor(vec![30])) {
        if decoupled_relu_objective(&y, &x).unwrap() == 0.0 {
            prop_assert_eq!(relu(&y), relu(&x));
        } else {
            prop_assert!(decoupled_relu_objective(&y, &x).unwrap() > 0.0);
        }
    }

    #[test]
    fn bound_scales_with_layer_count(
        a in tensor(vec![2, 1, 3, 3]),
        b in tensor(vec![2, 2, 3, 3]),
        t in 1.0f64..5.0,
    ) {
        prop_assume!(a.data().iter().any(|v| *v != 0.0) && b.data().iter().any(|v| *v != 0.0));
        let base = amplification_bound(&[&a, &b]).unwrap().factor;
        let (sa, sb) = (a.map(|v| v * t), b.map(|v| v * t));
        let scaled = amplification_bound(&[&sa, &sb]).unwrap().factor;
        prop_assert!((scaled - base * t * t).abs() <= 1e-9 * scaled);
    }

    #[test]
    fn weights_round_trip(seed in any::<u64>()) {
        let spec = NetworkSpec::parse("input 1 8 8\nconv3-2\nmaxpooling-2\nFC-5\nFC-3").unwrap();
        let net = Network::init(&spec, seed);
        let back = read_weights(&spec, &write_weights(&net)).unwrap();
        prop_assert_eq!(back.params(), net.params());
    }

    #[test]
    fn spec_text_round_trip(c1 in 1usize..9, c2 in 1usize..9, fc in 1usize..64) {
        let text = format!("input 1 28 28\nconv3-{c1}\nmaxpooling-2\nconv3-{c2}\nmaxpooling-2\nFC-{fc}\nFC-10");
        let spec = NetworkSpec::parse(&text).unwrap();
        let again = NetworkSpec::parse(&spec.to_text().unwrap()).unwrap();
        prop_assert_eq!(again, spec);
    }
}
