//! How the regularization weight reacts as an adapted model drifts from the
//! local model.

use flguard::data::gen_synthetic;
use flguard::model::{Model, ModelSpec};
use flguard::recovery::compute_lambda;
use flguard::rng::{stream, Purpose};
use rand::Rng;

fn main() -> flguard::Result<()> {
    let mut rng = stream(1, Purpose::Data, &[]);
    let data = gen_synthetic(4, 8, 20, 0.5, &mut rng)?;
    let batch = data.to_batch();
    let model = Model::new(ModelSpec::softmax_regression(8, 4))?;
    let w = model.zeros();
    let direction: Vec<f64> = (0..model.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    for scale in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0] {
        let v = flguard::ParamVector::new(direction.iter().map(|d| d * scale).collect());
        let d = compute_lambda(&model, &v, &w, &batch)?;
        println!(
            "distance {:>7.3}: loss_div {:+.4}  grad_div {:+.4}  lambda {:.4}",
            v.sub(&w).norm(),
            d.loss_div,
            d.grad_div,
            d.lambda
        );
    }
    Ok(())
}
