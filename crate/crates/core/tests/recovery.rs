mod common;

use common::*;
use flguard::adversary::Behavior;
use flguard::model::{sgd_step, Model, ModelSpec, ParamVector};
use flguard::recovery::{
    adapt_step, adapted_grad, adapted_loss, compute_lambda, inference_model, sigmoid, AdaptationConfig, LambdaMode,
};
use rand::Rng;

#[test]
fn lambda_stays_in_open_unit_interval() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let model = random_model(&mut r);
        let v = random_params(&model, 1.0, &mut r);
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 4, &mut r);
        let d = compute_lambda(&model, &v, &w, &batch).unwrap();
        assert!(d.lambda > 0.0 && d.lambda < 1.0, "lambda {}", d.lambda);
        assert!((d.lambda - sigmoid(d.loss_div) * sigmoid(d.grad_div)).abs() <= 1e-12);
        let same = compute_lambda(&model, &v, &v, &batch).unwrap();
        assert!((same.lambda - 0.25).abs() <= 1e-12);
    }
}

#[test]
fn adapted_gradient_matches_finite_differences() {
    let mut r = rng(2);
    for _ in 0..100 {
        let model = random_model(&mut r);
        let v = random_params(&model, 1.0, &mut r);
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), r.random_range(1..6), &mut r);
        let lambda = r.random_range(0.0..1.0);
        let g = adapted_grad(&model, &v, &w, &batch, lambda).unwrap();
        assert_matches_finite_differences(|p| adapted_loss(&model, p, &w, &batch, lambda).unwrap(), &v, &g);
    }
}

#[test]
fn adapted_loss_dominates_plain_loss() {
    let mut r = rng(3);
    for _ in 0..200 {
        let model = random_model(&mut r);
        let v = random_params(&model, 1.0, &mut r);
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 5, &mut r);
        let plain = model.loss(&v, &batch).unwrap();
        assert!(adapted_loss(&model, &v, &w, &batch, r.random_range(0.0..1.0)).unwrap() >= plain);
        assert_eq!(adapted_loss(&model, &v, &v, &batch, 0.7).unwrap(), plain);
    }
}

#[test]
fn zero_lambda_step_is_plain_sgd() {
    let mut r = rng(4);
    let cfg = AdaptationConfig {
        frozen_lower_layers: 0,
        lambda: LambdaMode::Fixed(0.0),
    };
    for _ in 0..50 {
        let model = random_model(&mut r);
        let v = random_params(&model, 1.0, &mut r);
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 5, &mut r);
        let (next, _) = adapt_step(&model, &v, &w, &batch, 0.3, &cfg).unwrap();
        let plain = sgd_step(&v, &model.grad(&v, &batch).unwrap(), 0.3).unwrap();
        assert_eq!(next, plain);
    }
}

#[test]
fn small_steps_decrease_the_adapted_objective() {
    let mut r = rng(5);
    let cfg = AdaptationConfig::default();
    for _ in 0..200 {
        let model = random_model(&mut r);
        let v = random_params(&model, 1.0, &mut r);
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 5, &mut r);
        let (next, diag) = adapt_step(&model, &v, &w, &batch, 1e-4, &cfg).unwrap();
        let g = adapted_grad(&model, &v, &w, &batch, diag.lambda).unwrap();
        if g.norm() > 1e-6 {
            let before = adapted_loss(&model, &v, &w, &batch, diag.lambda).unwrap();
            let after = adapted_loss(&model, &next, &w, &batch, diag.lambda).unwrap();
            assert!(after < before, "{after} !< {before}");
        }
    }
}

#[test]
fn frozen_layers_equal_local_after_every_step() {
    let mut r = rng(6);
    let model = Model::new(ModelSpec::mlp(3, 5, 4)).unwrap();
    let cfg = AdaptationConfig {
        frozen_lower_layers: 1,
        lambda: LambdaMode::Dynamic,
    };
    let mut v = random_params(&model, 1.0, &mut r);
    for _ in 0..10 {
        let w = random_params(&model, 1.0, &mut r);
        let batch = random_batch(3, 4, 6, &mut r);
        let (next, _) = adapt_step(&model, &v, &w, &batch, 0.2, &cfg).unwrap();
        let frozen = model.lower_layers_range(1);
        assert_eq!(&next.as_slice()[frozen.clone()], &w.as_slice()[frozen]);
        let top = model.layer_range(1);
        assert_ne!(&next.as_slice()[top.clone()], &w.as_slice()[top]);
        v = next;
    }
}

#[test]
fn inference_model_cases() {
    let mut r = rng(7);
    let mut c = random_client(0, 2, 2, 4, &mut r);
    let global = ParamVector::new(vec![1.0; 6]);
    assert_eq!(inference_model(&c, &global), &global);
    let adapted = ParamVector::new(vec![2.0; 6]);
    c.adapted = Some(adapted.clone());
    assert_eq!(inference_model(&c, &global), &adapted);
    c.behavior = Behavior::Vanilla;
    assert_eq!(c.inference_model(&global), &adapted);
}
