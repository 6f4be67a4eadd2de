mod common;

use common::*;
use detxai::micromodel::optim::adamw_update;
use detxai::micromodel::{
    adamw_step, grad_cam, pretrain, train, AdamWConfig, ModelParams, OptimState, PlateauConfig, PlateauState,
    TrainConfig, TransferRegime,
};
use detxai::synthdata::{generate, DomainSpec};
use detxai::topk_mask;
use rand::Rng;

#[test]
fn adamw_first_step_matches_hand_computation() {
    let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
    adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &AdamWConfig::default());
    let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01);
    assert!(rel_err(theta[0], want) <= 1e-12);
    assert!((theta[0] - 0.899).abs() < 1e-8);
}

#[test]
fn frozen_tensors_are_bit_identical_after_many_steps() {
    let mut r = rng(3);
    let mut params = ModelParams::init(&mut r);
    let before = params.clone();
    let mut state = OptimState::new(&params, AdamWConfig::default());
    let frozen: Vec<bool> = (0..10).map(|i| i < 6).collect();
    for _ in 0..50 {
        let mut grads = params.zeros_like();
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g = r.random_range(-1.0..1.0));
        }
        adamw_step(&mut params, &grads, &mut state, &frozen);
    }
    assert_eq!(params.backbone, before.backbone);
    assert_ne!(params.class_head, before.class_head);
}

fn small_domain() -> DomainSpec {
    let mut d = DomainSpec::plain("tiny");
    d.image_size = (16, 16);
    d
}

#[test]
fn transfer_regimes_treat_the_backbone_as_specified() {
    let data = generate(&small_domain(), 12, 1).unwrap().labeled();
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let (backbone, _, _) = pretrain(&data, &data, &cfg).unwrap();
    let run = |regime| {
        let cfg = TrainConfig { regime, ..cfg.clone() };
        train(&data, &data, &cfg, Some(&backbone)).unwrap().0
    };
    assert_eq!(run(TransferRegime::FreezeBackbone).backbone, backbone);
    assert_ne!(run(TransferRegime::FineTuneAll).backbone, backbone);
    let cfg = TrainConfig { regime: TransferRegime::FreezeBackbone, ..cfg.clone() };
    assert!(train(&data, &data, &cfg, None).is_err());
}

fn plateau() -> PlateauState {
    PlateauState::new(1.0, PlateauConfig { patience: 5, factor: 0.1, min_delta: 1e-4 })
}

#[test]
fn plateau_single_reduction_trace() {
    let mut s = plateau();
    assert!(!s.step(1.0));
    let reduced: Vec<bool> = (0..6).map(|_| s.step(1.0)).collect();
    assert_eq!(reduced, [false, false, false, false, false, true]);
    assert_eq!(s.current_lr, 0.1);
    assert_eq!(s.epochs_since_improvement, 0);
}

#[test]
fn plateau_double_reduction_trace() {
    let mut s = plateau();
    s.step(1.0);
    let reductions: Vec<usize> = (0..12).filter(|_| s.step(1.0)).collect();
    assert_eq!(reductions.len(), 2);
    assert_eq!(s.current_lr, 1.0 * 0.1 * 0.1);
    assert!(!s.step(0.5));
    assert_eq!(s.best_val_loss, 0.5);
}

#[test]
fn plateau_improvement_below_min_delta_is_a_stall() {
    let mut s = plateau();
    s.step(1.0);
    for _ in 0..5 {
        s.step(1.0 - 5e-5);
    }
    assert!(s.step(1.0 - 5e-5));
}

fn trained_params(seed: u64) -> ModelParams {
    let data = generate(&small_domain(), 16, seed).unwrap().labeled();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed,
        regime: TransferRegime::NoPretrain,
        ..TrainConfig::default()
    };
    train(&data, &data, &cfg, None).unwrap().0
}

#[test]
fn grad_cam_shape_and_range() {
    let mut r = rng(9);
    for seed in 0..3 {
        let params = trained_params(seed);
        for (h, w) in [(16, 16), (24, 40)] {
            let image = random_image(&mut r, h, w);
            for class in 0..4 {
                let g = grad_cam(&params, &image, class).unwrap();
                assert_eq!((g.height(), g.width()), (h, w));
                assert!(g.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

#[test]
fn grad_cam_is_zero_when_class_weights_are_negative() {
    let mut r = rng(4);
    let mut params = trained_params(1);
    let w = params.class_head.weight.data_mut();
    let n = w.len() / 4;
    w[..n].iter_mut().for_each(|v| *v = -v.abs() - 0.1);
    let g = grad_cam(&params, &random_image(&mut r, 16, 16), 0).unwrap();
    assert!(g.values().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_cam_topk_is_invariant_to_positive_head_rescaling() {
    let mut r = rng(8);
    let mut checked = 0;
    for seed in 0..4 {
        let params = trained_params(seed);
        let image = random_image(&mut r, 32, 32);
        for class in 0..4 {
            let base = grad_cam(&params, &image, class).unwrap();
            let ks = separated_ks(&base, 1e-9, 12);
            if ks.is_empty() {
                continue;
            }
            for scale in [0.3, 2.0, 7.5] {
                let mut scaled = params.clone();
                scaled.class_head.weight.data_mut().iter_mut().for_each(|v| *v *= scale);
                scaled.class_head.bias.data_mut().iter_mut().for_each(|v| *v *= scale);
                let other = grad_cam(&scaled, &image, class).unwrap();
                for &k in &ks {
                    assert_eq!(topk_mask(&base, k).unwrap(), topk_mask(&other, k).unwrap());
                }
            }
            checked += 1;
        }
    }
    assert!(checked > 0, "no map with a separated top-k boundary");
}
