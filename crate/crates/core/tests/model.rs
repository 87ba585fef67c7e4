mod common;

use approx::assert_relative_eq;
use common::*;
use flguard::data::LabeledDataset;
use flguard::model::{sgd_step, train_private, Activation, Batch, Model, ModelSpec, ParamVector, PrivateBudget};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

/// Softmax cross-entropy computed straight from the parameter layout, one
/// example at a time, with the log-partition accumulated in reverse class order.
fn oracle_loss(spec: &ModelSpec, params: &[f64], batch: &Batch) -> f64 {
    let mut total = 0.0;
    for (row, &y) in batch.features.rows().into_iter().zip(&batch.labels) {
        let mut activations: Vec<f64> = row.to_vec();
        let mut offset = 0;
        let layers = spec.layer_sizes.len() - 1;
        for l in 0..layers {
            let (inputs, outputs) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let weights = &params[offset..offset + inputs * outputs];
            let bias = &params[offset + inputs * outputs..offset + inputs * outputs + outputs];
            offset += inputs * outputs + outputs;
            let mut next = vec![0.0; outputs];
            for o in 0..outputs {
                let mut z = bias[o];
                for i in 0..inputs {
                    z += weights[o * inputs + i] * activations[i];
                }
                next[o] = if l + 1 < layers && spec.activation == Activation::Relu { z.max(0.0) } else { z };
            }
            activations = next;
        }
        let max = activations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let partition: f64 = activations.iter().rev().map(|z| (z - max).exp()).sum();
        total += max + partition.ln() - activations[y];
    }
    total / batch.len() as f64
}

#[test]
fn zero_params_give_log_class_count() {
    let mut r = rng(1);
    for classes in 2..7 {
        let model = Model::new(ModelSpec::mlp(3, 4, classes)).unwrap();
        let batch = random_batch(3, classes, 9, &mut r);
        assert_relative_eq!(model.loss(&model.zeros(), &batch).unwrap(), (classes as f64).ln(), epsilon = 1e-12);
    }
}

#[test]
fn confident_correct_prediction_has_zero_loss() {
    let model = Model::new(ModelSpec::softmax_regression(1, 2)).unwrap();
    let batch = Batch::new(array![[1.0]], vec![1]).unwrap();
    // Logit gap of 800 saturates the softmax.
    let params = ParamVector::new(vec![-400.0, 400.0, 0.0, 0.0]);
    assert_eq!(model.loss(&params, &batch).unwrap(), 0.0);
}

#[test]
fn loss_matches_independent_cross_entropy() {
    let mut r = rng(2);
    for _ in 0..50 {
        let model = random_model(&mut r);
        let params = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 8, &mut r);
        let expected = oracle_loss(model.spec(), params.as_slice(), &batch);
        assert_relative_eq!(model.loss(&params, &batch).unwrap(), expected, epsilon = 1e-10);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut r = rng(3);
    for _ in 0..100 {
        let model = random_model(&mut r);
        let params = random_params(&model, 1.0, &mut r);
        let rows = r.random_range(1..9);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), rows, &mut r);
        let analytic = model.grad(&params, &batch).unwrap();
        assert_matches_finite_differences(|p| model.loss(p, &batch).unwrap(), &params, &analytic);
    }
}

#[test]
fn symmetric_two_class_batch_has_zero_output_bias_gradient() {
    let model = Model::new(ModelSpec::softmax_regression(2, 2)).unwrap();
    let batch = Batch::new(array![[0.3, -1.0], [0.3, -1.0]], vec![0, 1]).unwrap();
    let g = model.grad(&model.zeros(), &batch).unwrap();
    for v in &g.as_slice()[model.bias_range(0)] {
        assert_eq!(*v, 0.0);
    }
}

#[test]
fn duplicating_examples_leaves_gradient_unchanged() {
    let mut r = rng(4);
    let model = Model::new(ModelSpec::mlp(3, 5, 4)).unwrap();
    let params = random_params(&model, 0.5, &mut r);
    let batch = random_batch(3, 4, 6, &mut r);
    let doubled = Batch::new(
        ndarray::concatenate![ndarray::Axis(0), batch.features, batch.features],
        [batch.labels.clone(), batch.labels.clone()].concat(),
    )
    .unwrap();
    let a = model.grad(&params, &batch).unwrap();
    let b = model.grad(&params, &doubled).unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert_relative_eq!(x, y, epsilon = 1e-14);
    }
}

#[test]
fn dimension_mismatch_is_structural_error() {
    let model = Model::new(ModelSpec::softmax_regression(3, 2)).unwrap();
    let batch = Batch::new(array![[1.0, 2.0]], vec![0]).unwrap();
    assert!(matches!(model.loss(&model.zeros(), &batch), Err(flguard::Error::Structural(_))));
    let batch = Batch::new(array![[1.0, 2.0, 3.0]], vec![0]).unwrap();
    assert!(matches!(model.grad(&ParamVector::zeros(3), &batch), Err(flguard::Error::Structural(_))));
}

#[test]
fn sgd_step_examples() {
    let p = ParamVector::new(vec![1.0, 2.0]);
    let g = ParamVector::new(vec![1.0, -1.0]);
    assert_eq!(sgd_step(&p, &g, 0.5).unwrap().as_slice(), &[0.5, 2.5]);
    assert_eq!(sgd_step(&p, &ParamVector::zeros(2), 0.7).unwrap(), p);
    let twice = sgd_step(&sgd_step(&p, &g, 0.25).unwrap(), &g, 0.25).unwrap();
    assert_eq!(twice, sgd_step(&p, &g, 0.5).unwrap());
    assert!(sgd_step(&p, &ParamVector::zeros(3), 0.1).is_err());
}

#[test]
fn accuracy_examples() {
    let model = Model::new(ModelSpec::softmax_regression(1, 2)).unwrap();
    let batch = Batch::new(array![[1.0], [-1.0]], vec![1, 0]).unwrap();
    let perfect = ParamVector::new(vec![-1.0, 1.0, 0.0, 0.0]);
    assert_eq!(model.accuracy(&perfect, &batch).unwrap(), 1.0);

    let model = Model::new(ModelSpec::softmax_regression(2, 4)).unwrap();
    let labels = vec![0, 0, 0, 1, 1, 2, 2, 3, 3, 3];
    let batch = Batch::new(Array2::from_elem((10, 2), 0.5), labels).unwrap();
    assert_eq!(model.accuracy(&model.zeros(), &batch).unwrap(), 0.3);
}

#[test]
fn accuracy_matches_per_example_argmax() {
    let mut r = rng(5);
    for _ in 0..50 {
        let model = random_model(&mut r);
        let params = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 12, &mut r);
        let mut hits = 0;
        for i in 0..batch.len() {
            let one = Batch::new(batch.features.slice(ndarray::s![i..i + 1, ..]).to_owned(), vec![0]).unwrap();
            let logits = model.logits(&params, &one).unwrap();
            let row = logits.row(0);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            hits += usize::from(best == batch.labels[i]);
        }
        assert_eq!(model.accuracy(&params, &batch).unwrap(), hits as f64 / batch.len() as f64);
    }
}

fn separable_toy() -> LabeledDataset {
    let features = array![[1.0, 0.2], [0.8, -0.1], [1.2, 0.0], [-1.0, 0.1], [-0.9, -0.2], [-1.1, 0.3]];
    LabeledDataset::new(features, vec![0, 0, 0, 1, 1, 1], 2).unwrap()
}

#[test]
fn private_training_fixture_and_determinism() {
    let model = Model::new(ModelSpec::softmax_regression(2, 2)).unwrap();
    let data = separable_toy();
    let budget = PrivateBudget {
        epochs: 1,
        learning_rate: 0.5,
        batch_size: 2,
    };
    let (p1, s1) = train_private(&model, &data, &data, &budget, &mut rng(9)).unwrap();
    let (p2, s2) = train_private(&model, &data, &data, &budget, &mut rng(9)).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(s1, s2);
    assert!(s1 > 0.5, "score {s1}");
    assert!((0.0..=1.0).contains(&s1));

    let zero = PrivateBudget { epochs: 0, ..budget.clone() };
    assert!(matches!(train_private(&model, &data, &data, &zero, &mut rng(9)), Err(flguard::Error::Config { .. })));
    let empty = data.subset(&[]);
    assert!(matches!(train_private(&model, &empty, &data, &budget, &mut rng(9)), Err(flguard::Error::Config { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_and_accuracy_ignore_row_order(seed in any::<u64>(), rotate in 0usize..8) {
        let mut r = rng(seed);
        let model = random_model(&mut r);
        let params = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 8, &mut r);
        let order: Vec<usize> = (0..8).map(|i| (i + rotate) % 8).collect();
        let features = batch.features.select(ndarray::Axis(0), &order);
        let labels = order.iter().map(|&i| batch.labels[i]).collect();
        let permuted = Batch::new(features, labels).unwrap();
        prop_assert!((model.loss(&params, &batch).unwrap() - model.loss(&params, &permuted).unwrap()).abs() < 1e-12);
        prop_assert_eq!(model.accuracy(&params, &batch).unwrap(), model.accuracy(&params, &permuted).unwrap());
    }

    #[test]
    fn evaluation_is_pure(seed in any::<u64>()) {
        let mut r = rng(seed);
        let model = random_model(&mut r);
        let params = random_params(&model, 1.0, &mut r);
        let batch = random_batch(model.spec().input_dim(), model.class_count(), 5, &mut r);
        let a = model.loss_and_grad(&params, &batch).unwrap();
        let b = model.loss_and_grad(&params, &batch).unwrap();
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert_eq!(a.1, b.1);
    }
}
