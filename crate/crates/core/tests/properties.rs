mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use vericert::bounds::{interval_bounds, Parametrization};
use vericert::dual::{optimize_duals_subgradient, verify_example, DualSource, DualVariables, SubgradientConfig};
use vericert::network::forward;
use vericert::oracle::{corner_and_random_max, grid_max, reference_forward};
use vericert::verifier::{VerifierKind, VerifierNet, VerifierSpec};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn dual_bound_dominates_grid_maximum(seed in any::<u64>(), eps in 0.0f64..0.5, scale in prop::sample::select(vec![0.0, 0.3, 3.0, 50.0])) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let (_, _, spec) = random_spec(&mut r, net.classes);
        let lam = random_duals(&mut r, &net, scale);
        let z = zeta(&net, &p, &x, eps, None, &spec, &lam);
        let dim = x.len();
        let best = grid_max(&net, &p, &x.to_f64_vec(), eps, None, &spec.c, spec.d, grid_resolution(dim).min(41)).unwrap();
        prop_assert!(best.value <= z + 1e-6, "oracle {} > bound {}", best.value, z);
    }

    #[test]
    fn dual_bound_is_convex_in_lambda(seed in any::<u64>(), eps in 0.01f64..0.4, theta in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let (_, _, spec) = random_spec(&mut r, net.classes);
        let a = random_duals(&mut r, &net, 2.0);
        let b = random_duals(&mut r, &net, 2.0);
        let mix = DualVariables {
            lambdas: a.lambdas.iter().zip(&b.lambdas).map(|(s, t)| s.zip_map(t, |u, v| theta * u + (1.0 - theta) * v).unwrap()).collect(),
        };
        let (za, zb, zm) = (zeta(&net, &p, &x, eps, None, &spec, &a), zeta(&net, &p, &x, eps, None, &spec, &b), zeta(&net, &p, &x, eps, None, &spec, &mix));
        prop_assert!(zm <= theta * za + (1.0 - theta) * zb + 1e-9 * (1.0 + za.abs() + zb.abs()));
    }

    #[test]
    fn boxes_grow_with_epsilon(seed in any::<u64>(), e1 in 0.0f64..0.3, de in 0.0f64..0.3) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let small = interval_bounds(&net, &p, &x, e1, Some((0.0, 1.0)), Parametrization::CenterRadius).unwrap();
        let large = interval_bounds(&net, &p, &x, e1 + de, Some((0.0, 1.0)), Parametrization::CenterRadius).unwrap();
        for k in 0..small.layers() {
            for i in 0..small.lower[k].len() {
                prop_assert!(large.lower[k].data()[i] <= small.lower[k].data()[i] + 1e-12);
                prop_assert!(large.upper[k].data()[i] >= small.upper[k].data()[i] - 1e-12);
            }
        }
    }

    #[test]
    fn parametrizations_agree(seed in any::<u64>(), eps in 0.0f64..0.5) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let cr = interval_bounds(&net, &p, &x, eps, None, Parametrization::CenterRadius).unwrap();
        let lu = interval_bounds(&net, &p, &x, eps, None, Parametrization::LowerUpper).unwrap();
        for k in 0..cr.layers() {
            for (a, b) in cr.lower[k].data().iter().zip(lu.lower[k].data()).chain(cr.upper[k].data().iter().zip(lu.upper[k].data())) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sampled_activations_stay_in_boxes(seed in any::<u64>(), eps in 0.0f64..0.4) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let b = interval_bounds(&net, &p, &x, eps, Some((0.0, 1.0)), Parametrization::CenterRadius).unwrap();
        for _ in 0..200 {
            let mut xs = x.clone();
            for v in xs.data_mut() {
                *v = (*v + r.gen_range(-eps..=eps)).clamp(0.0, 1.0);
            }
            let trace = forward(&net, &p, &xs).unwrap();
            for (k, a) in trace.activations.iter().enumerate() {
                for (i, &v) in a.data().iter().enumerate() {
                    prop_assert!(v >= b.lower[k].data()[i] - 1e-9 && v <= b.upper[k].data()[i] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn untrained_verifier_outputs_are_sound(seed in any::<u64>(), eps in 0.0f64..0.4, noise in 0.0f64..2.0) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let label = r.gen_range(0..net.classes);
        let kind = [VerifierKind::Direct, VerifierKind::BackwardForward][r.gen_range(0..2)];
        let spec = VerifierSpec { hidden: 16, ..VerifierSpec::new(kind) };
        let mut v = VerifierNet::<f64>::init(spec, &net, seed).unwrap();
        for (_, t) in v.params.iter_mut() {
            for w in t.data_mut() {
                *w += r.gen_range(-noise..=noise);
            }
        }
        let ver = verify_example(&net, &p, &x, label, eps, None, &DualSource::Verifier(&v)).unwrap();
        for cb in &ver.per_class {
            let spec = vericert::dual::LinearSpec::robustness(label, cb.target, net.classes);
            let best = corner_and_random_max(&net, &p, &x.to_f64_vec(), eps, None, &spec.c, spec.d, 500, &[], seed).unwrap();
            prop_assert!(best.value <= cb.zeta + 1e-6);
        }
    }

    #[test]
    fn reference_forward_matches_graph_forward(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let graph = forward(&net, &p, &x).unwrap().logits().to_f64_vec();
        let reference = reference_forward(&net, &p, &x.to_f64_vec()).unwrap();
        for (a, b) in graph.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn subgradient_never_worse_than_zero_duals(seed in any::<u64>(), eps in 0.0f64..0.4) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let (_, _, spec) = random_spec(&mut r, net.classes);
        let (_, shapes) = net.resolve().unwrap();
        let z0 = zeta(&net, &p, &x, eps, None, &spec, &DualVariables::zeros(&shapes, 1));
        let cfg = SubgradientConfig { steps: 30, ..SubgradientConfig::default() };
        let (lam, best) = optimize_duals_subgradient(&net, &p, &x, eps, None, &spec, &cfg).unwrap();
        prop_assert!(best <= z0);
        prop_assert!((zeta(&net, &p, &x, eps, None, &spec, &lam) - best).abs() <= 1e-9 * best.abs().max(1.0));
    }

    #[test]
    fn zero_epsilon_collapses_to_point_value(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let mut r = rng(seed);
        let (net, p) = tiny_net(&mut r);
        let x = random_input(&mut r, &net);
        let (_, _, spec) = random_spec(&mut r, net.classes);
        let lam = random_duals(&mut r, &net, scale);
        let z = zeta(&net, &p, &x, 0.0, None, &spec, &lam);
        let v = spec.evaluate(&reference_forward(&net, &p, &x.to_f64_vec()).unwrap());
        prop_assert!((z - v).abs() <= 1e-9 * (1.0 + scale));
    }
}
