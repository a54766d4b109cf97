use mfgflow::autodiff::{finite_diff_check_many, Graph};
use mfgflow::densities::DensitySpec;
use mfgflow::flows::{Activation, CouplingKind, FlowConfig, FlowStack};
use mfgflow::objectives::transport_cost_value;
use mfgflow::oracle::{discrete_ot_exact, gaussian_w2, kkt_equal_spacing};
use mfgflow::rng::stream;
use mfgflow::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).unwrap()
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4.0f64..4.0, n * d).prop_map(move |v| matrix(n, d, v))
}

fn random_stack(dim: usize, steps: usize, spline: bool, linear: bool, seed: u64) -> FlowStack {
    let cfg = FlowConfig {
        dim,
        steps,
        hidden: vec![6],
        activation: Activation::Tanh,
        kind: if spline {
            CouplingKind::Spline { bins: 5, bound: 4.0 }
        } else {
            CouplingKind::Affine { clamp: None }
        },
        linear,
    };
    let mut r = stream(seed, 0);
    let mut s = FlowStack::from_config(&cfg, &mut r).unwrap();
    s.randomize(&mut r, 0.3);
    s
}

/// Rotation in the (0, 1) plane applied to every row.
fn rotate(x: &Tensor, angle: f64) -> Tensor {
    let (c, s) = (angle.cos(), angle.sin());
    let mut y = x.clone();
    let d = x.cols();
    for r in 0..x.rows() {
        let (a, b) = (x.row(r)[0], x.row(r)[1]);
        y.data_mut()[r * d] = c * a - s * b;
        y.data_mut()[r * d + 1] = s * a + c * b;
    }
    y
}

fn translate(x: &Tensor, t: &[f64]) -> Tensor {
    let mut y = x.clone();
    let d = x.cols();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += t[i % d];
    }
    y
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composite_gradients_match_finite_differences(x in points(3, 2), y in points(3, 2)) {
        let err = finite_diff_check_many(
            |g: &mut Graph, v| {
                let p = g.mul(v[0], v[1])?;
                let t = g.tanh(p)?;
                let e = g.softplus(v[0])?;
                let s = g.add(t, e)?;
                let l = g.logsumexp(s)?;
                g.sum(l)
            },
            &[x, y],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-6, "relative error {}", err);
    }

    #[test]
    fn flows_invert(seed in 0u64..10_000, dim in 2usize..5, steps in 1usize..5,
                    spline: bool, linear: bool, x in points(6, 4)) {
        let s = random_stack(dim, steps, spline, linear, seed);
        let x = matrix(6, dim, x.data()[..6 * dim].to_vec());
        let f = s.forward_eval(&x).unwrap();
        let b = s.inverse_eval(f.last()).unwrap();
        for (a, c) in b.last().data().iter().zip(x.data()) {
            prop_assert!((a - c).abs() < 1e-9);
        }
        for (a, c) in f.logdet.iter().zip(&b.logdet) {
            prop_assert!((a + c).abs() < 1e-9);
        }
    }

    #[test]
    fn transport_cost_is_rigid_motion_invariant(seed in 0u64..10_000, angle in -3.2f64..3.2,
                                                 t in prop::collection::vec(-5.0f64..5.0, 2),
                                                 z in points(5, 2)) {
        let s = random_stack(2, 4, true, true, seed);
        let states = s.forward_eval(&z).unwrap().states;
        let moved: Vec<Tensor> = states.iter().map(|x| translate(&rotate(x, angle), &t)).collect();
        let (a, b) = (transport_cost_value(&states), transport_cost_value(&moved));
        prop_assert!(close(a, b, 1e-10), "{} vs {}", a, b);
    }

    #[test]
    fn transport_cost_bounds_the_chord(seed in 0u64..10_000, z in points(5, 2)) {
        // Cauchy-Schwarz: K sum |dF|^2 >= |F_K - F_0|^2 per sample.
        let s = random_stack(2, 5, seed % 2 == 0, true, seed);
        let states = s.forward_eval(&z).unwrap().states;
        let end = states.last().unwrap();
        let chord = z.data().iter().zip(end.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 5.0;
        prop_assert!(transport_cost_value(&states) >= chord * (1.0 - 1e-12));
    }

    #[test]
    fn kkt_is_the_straight_line(z in points(3, 3), e in points(3, 3), k in 2usize..16) {
        let sol = kkt_equal_spacing(&z, &e, k).unwrap();
        let mut states = vec![z.clone()];
        states.extend(sol.intermediates.iter().cloned());
        states.push(e.clone());
        let chord = z.data().iter().zip(e.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0;
        prop_assert!(close(sol.cost, chord, 1e-12));
        prop_assert!(close(transport_cost_value(&states), chord, 1e-12));
    }

    #[test]
    fn ot_cost_beats_identity_assignment(x in points(12, 2), y in points(12, 2)) {
        let plan = discrete_ot_exact(&x, &y).unwrap();
        let identity = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 12.0;
        prop_assert!(plan.cost <= identity + 1e-12);
        let mut seen = plan.assignment.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn ot_cost_is_rigid_motion_invariant(x in points(10, 2), y in points(10, 2), angle in -3.2f64..3.2,
                                         t in prop::collection::vec(-5.0f64..5.0, 2)) {
        let a = discrete_ot_exact(&x, &y).unwrap().cost;
        let b = discrete_ot_exact(&translate(&rotate(&x, angle), &t), &translate(&rotate(&y, angle), &t)).unwrap().cost;
        prop_assert!(close(a, b, 1e-9), "{} vs {}", a, b);
    }

    #[test]
    fn ot_cost_ignores_row_order(x in points(9, 3), y in points(9, 3), shift in 1usize..9) {
        let a = discrete_ot_exact(&x, &y).unwrap().cost;
        let idx: Vec<usize> = (0..9).map(|i| (i + shift) % 9).collect();
        let b = discrete_ot_exact(&x, &y.select_rows(&idx)).unwrap().cost;
        prop_assert!(close(a, b, 1e-12));
    }

    #[test]
    fn gaussian_w2_is_a_squared_metric(m1 in prop::collection::vec(-3.0f64..3.0, 3),
                                       m2 in prop::collection::vec(-3.0f64..3.0, 3),
                                       v1 in prop::collection::vec(0.05f64..4.0, 3),
                                       v2 in prop::collection::vec(0.05f64..4.0, 3)) {
        let d = gaussian_w2(&m1, &v1, &m2, &v2).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!(close(d, gaussian_w2(&m2, &v2, &m1, &v1).unwrap(), 1e-12));
        prop_assert!(gaussian_w2(&m1, &v1, &m1, &v1).unwrap().abs() < 1e-12);
    }
}

/// Empirical W2^2 between Gaussian samples approaches the closed form.
#[test]
fn empirical_w2_gap_shrinks_with_n() {
    let (m, v1, v2) = (vec![0.0, 0.0], vec![1.0, 1.0], vec![4.0, 0.25]);
    let exact = gaussian_w2(&m, &v1, &m, &v2).unwrap();
    let p = DensitySpec::gaussian(m.clone(), v1).unwrap();
    let q = DensitySpec::gaussian(m, v2).unwrap();
    let gap = |n: usize, reps: u64| {
        (0..reps)
            .map(|s| {
                let mut r = stream(s, n as u64);
                (discrete_ot_exact(&p.sample(n, &mut r), &q.sample(n, &mut r)).unwrap().cost - exact).abs()
            })
            .sum::<f64>()
            / reps as f64
    };
    let gaps = [gap(128, 4), gap(512, 2), gap(2048, 1)];
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "gaps {:?}", gaps);
}
