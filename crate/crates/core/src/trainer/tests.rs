use super::*;
use crate::flows::{Activation, CouplingKind, FlowConfig};
use crate::objectives::{Interaction, InteractionQuadrature, Population, Terminal, TransportQuadrature, Weights};
use crate::rng::seeded;

fn small_stack(seed: u64) -> FlowStack {
    let cfg = FlowConfig {
        dim: 2,
        steps: 3,
        hidden: vec![8],
        activation: Activation::Tanh,
        kind: CouplingKind::Spline { bins: 4, bound: 5.0 },
        linear: false,
    };
    FlowStack::from_config(&cfg, &mut seeded(seed)).unwrap()
}

fn shift_problem() -> MfgProblem {
    MfgProblem {
        dim: 2,
        steps: 3,
        populations: vec![Population {
            base: DensitySpec::isotropic(vec![0.0, 1.0], 0.3).unwrap(),
            target: DensitySpec::isotropic(vec![0.0, -1.0], 0.3).unwrap(),
        }],
        weights: Weights {
            transport: 0.1,
            interaction: 0.0,
            terminal: 1.0,
        },
        interaction: Interaction::None,
        terminal: Terminal::Jeffreys,
        transport_quadrature: TransportQuadrature::ForwardDiff,
        interaction_quadrature: InteractionQuadrature::RightPoint,
    }
}

fn quick(iterations: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch: 32,
        iterations,
        seed: 11,
        eval_interval: 1,
        ..Default::default()
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = TrainConfig::default();
    let mut p = vec![Tensor::scalar(1.0)];
    let mut st = OptimState::new(&p);
    adam_step(&mut p, &[Tensor::scalar(2.0)], &mut st, &cfg, 0.1).unwrap();
    assert!((p[0].item() - 0.9).abs() < 1e-7, "{}", p[0].item());
    assert_eq!(st.step, 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let cfg = TrainConfig::default();
    let mut p = vec![Tensor::vector(vec![0.5, -0.25])];
    let before = p.clone();
    let mut st = OptimState::new(&p);
    for _ in 0..5 {
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, &cfg, 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_clips_global_norm() {
    let cfg = TrainConfig {
        clip_norm: Some(1.0),
        ..Default::default()
    };
    let mut p = vec![Tensor::vector(vec![0.0, 0.0])];
    let mut st = OptimState::new(&p);
    adam_step(&mut p, &[Tensor::vector(vec![30.0, 40.0])], &mut st, &cfg, 0.1).unwrap();
    let m = st.m[0].data();
    assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let cfg = TrainConfig::default();
    let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
    let mut st = OptimState::new(&p);
    let err = adam_step(&mut p, &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)], &mut st, &cfg, 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, .. } if param == "param1"));
    assert_eq!(p[0].item(), 1.0);
    assert_eq!(st.step, 0);
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert!((cfg.lr_at(0, 100) - 1e-3).abs() < 1e-15);
    assert!((cfg.lr_at(99, 100) - 1e-5).abs() < 1e-15);
    let mid = cfg.lr_at(50, 101);
    assert!((mid - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-12);
    let c = TrainConfig {
        schedule: Schedule::Constant,
        ..cfg
    };
    assert_eq!(c.lr_at(70, 100), c.lr);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { batch: 0, ..Default::default() },
        TrainConfig { clip_norm: Some(-1.0), ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let p = shift_problem();
    let a = train_mfg(&p, vec![small_stack(1)], &quick(40), &mut Silent).unwrap();
    let b = train_mfg(&p, vec![small_stack(1)], &quick(40), &mut Silent).unwrap();
    assert!(a.diverged.is_none());
    assert_eq!(a.state.stacks, b.state.stacks);
    let ca: Vec<_> = a.history.iter().map(|r| r.costs).collect();
    let cb: Vec<_> = b.history.iter().map(|r| r.costs).collect();
    assert_eq!(ca, cb);
    let first = ca[..5].iter().map(|c| c.total).sum::<f64>();
    let last = ca[ca.len() - 5..].iter().map(|c| c.total).sum::<f64>();
    assert!(last < first, "{} -> {}", first, last);
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let p = shift_problem();
    let cfg = quick(8);
    let full = train_mfg(&p, vec![small_stack(2)], &cfg, &mut Silent).unwrap();
    let half = train_mfg_until(&p, TrainState::new(vec![small_stack(2)]), &cfg, 4, &mut Silent).unwrap();
    assert_eq!(half.state.iteration, 4);
    let rest = train_mfg_from(&p, half.state, &cfg, &mut Silent).unwrap();
    assert_eq!(rest.state, full.state);
    let joined: Vec<_> = half.history.iter().chain(&rest.history).map(|r| r.costs).collect();
    let whole: Vec<_> = full.history.iter().map(|r| r.costs).collect();
    assert_eq!(joined, whole);
}

#[test]
fn overflowing_flow_reports_divergence() {
    let mut s = FlowStack::from_config(
        &FlowConfig {
            dim: 2,
            steps: 3,
            hidden: vec![4],
            activation: Activation::Tanh,
            kind: CouplingKind::Affine { clamp: None },
            linear: false,
        },
        &mut seeded(3),
    )
    .unwrap();
    let mut params = s.params().to_vec();
    let last = params.len() - 1;
    params[last] = Tensor::vector(vec![800.0, 0.0]);
    s.set_params(params).unwrap();
    let out = train_mfg(&shift_problem(), vec![s.clone()], &quick(5), &mut Silent).unwrap();
    assert!(out.diverged.as_ref().is_some_and(|e| e.is_numerical()), "{:?}", out.diverged);
    assert_eq!(out.state.iteration, 0);
    assert_eq!(out.state.stacks[0], s);
}

#[test]
fn mismatched_stack_count_is_a_config_error() {
    let err = train_mfg(&shift_problem(), vec![], &quick(1), &mut Silent).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn standardizer_round_numbers() {
    let x = Tensor::matrix(4, 2, vec![1.0, 10.0, 3.0, 10.0, 5.0, 10.0, 7.0, 10.0]).unwrap();
    let s = Standardizer::fit(&x);
    assert_eq!(s.mean, vec![4.0, 10.0]);
    assert!((s.std[0] - 5f64.sqrt()).abs() < 1e-12);
    assert_eq!(s.std[1], 1.0);
    let y = s.apply(&x);
    assert!(y.data().iter().skip(1).step_by(2).all(|v| *v == 0.0));
}

#[test]
fn split_is_a_partition() {
    let x = Tensor::matrix(100, 1, (0..100).map(|i| i as f64).collect()).unwrap();
    let (a, b, c) = split_rows(&x, 0.2, 0.1, 5);
    assert_eq!((a.rows(), b.rows(), c.rows()), (70, 20, 10));
    let mut all: Vec<f64> = a.data().iter().chain(b.data()).chain(c.data()).copied().collect();
    all.sort_by(f64::total_cmp);
    assert_eq!(all, x.data());
}

#[test]
fn density_training_tracks_best_epoch() {
    let mut r = seeded(4);
    let data = DensitySpec::isotropic(vec![2.0, -1.0], 0.5).unwrap().sample(600, &mut r);
    let base = DensitySpec::standard_normal(2);
    let cfg = NfConfig {
        train: TrainConfig {
            lr: 5e-3,
            batch: 64,
            seed: 9,
            ..Default::default()
        },
        ratio: 0.01,
        epochs: 3,
        val_fraction: 0.2,
        test_fraction: 0.2,
        lipschitz_points: 20,
    };
    let out = train_nf(&data, &base, small_stack(5), &cfg, &PowerIteration::default(), &mut Silent).unwrap();
    assert!(out.diverged.is_none());
    assert_eq!(out.history.len(), 3);
    assert_eq!(out.lipschitz.len(), 3);
    let best = out.best_record().unwrap();
    assert!(out.history.iter().all(|r| r.val_nll >= best.val_nll));
    assert!((mean_nll(&out.best, &base, &out.standardizer.apply(&data)).unwrap()).is_finite());
    // standardized Gaussian data: NLL of a unit Gaussian is about 2.84 nats in 2-d
    assert!(best.val_nll < 3.2, "{}", best.val_nll);
}
