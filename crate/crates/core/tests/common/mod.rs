#![allow(dead_code)]

use flguard::client::ClientReport;
use flguard::model::{Batch, Model, ModelSpec, ParamVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_params<R: Rng>(model: &Model, scale: f64, rng: &mut R) -> ParamVector {
    ParamVector::new((0..model.param_count()).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn random_batch<R: Rng>(dim: usize, classes: usize, rows: usize, rng: &mut R) -> Batch {
    let features = Array2::from_shape_fn((rows, dim), |_| rng.random_range(-2.0..2.0));
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(features, labels).unwrap()
}

/// A softmax-regression or one-hidden-layer model with small random sizes.
pub fn random_model<R: Rng>(rng: &mut R) -> Model {
    let dim = rng.random_range(1..6);
    let classes = rng.random_range(2..5);
    let spec = if rng.random_bool(0.5) {
        ModelSpec::softmax_regression(dim, classes)
    } else {
        ModelSpec::mlp(dim, rng.random_range(1..6), classes)
    };
    Model::new(spec).unwrap()
}

pub fn report(id: usize, values: &[f64], n: usize) -> ClientReport {
    ClientReport {
        client_id: id,
        updated_params: ParamVector::new(values.to_vec()),
        beta_hat: 0.0,
        n_i: n,
    }
}

/// Central finite-difference check of `analytic` against `f`.
pub fn assert_matches_finite_differences(
    f: impl Fn(&ParamVector) -> f64,
    at: &ParamVector,
    analytic: &ParamVector,
) {
    let h = 1e-5;
    for i in 0..at.len() {
        let mut up = at.clone();
        let mut down = at.clone();
        up.as_mut_slice()[i] += h;
        down.as_mut_slice()[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let exact = analytic.as_slice()[i];
        let err = (numeric - exact).abs();
        assert!(
            err <= 1e-7 || err <= 1e-4 * exact.abs().max(numeric.abs()),
            "coordinate {i}: analytic {exact}, numeric {numeric}"
        );
    }
}

pub fn dataset(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> flguard::data::LabeledDataset {
    flguard::data::LabeledDataset::new(features, labels, classes).unwrap()
}

pub fn client(
    id: usize,
    train: flguard::data::LabeledDataset,
    test: flguard::data::LabeledDataset,
    private_score: f64,
    behavior: flguard::adversary::Behavior,
) -> flguard::client::ClientState {
    let dim = train.dim();
    flguard::client::ClientState {
        id,
        data: flguard::data::ClientData { train, test },
        private_model: ParamVector::zeros(dim),
        private_score,
        adapted: None,
        behavior,
        fabrication: Default::default(),
        local: Default::default(),
    }
}

/// A client holding `rows` random examples for both training and testing.
pub fn random_client<R: Rng>(id: usize, dim: usize, classes: usize, rows: usize, rng: &mut R) -> flguard::client::ClientState {
    let b = random_batch(dim, classes, rows, rng);
    let data = dataset(b.features, b.labels, classes);
    client(id, data.clone(), data, 0.5, flguard::adversary::Behavior::HonestGuard)
}
