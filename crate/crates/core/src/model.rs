//! Small differentiable classifiers: softmax regression and ReLU/identity MLPs.
//!
//! Parameters live in one flat [`ParamVector`]. Each dense layer owns a
//! contiguous slot holding its weight matrix (row-major, `outputs x inputs`)
//! followed by its bias, so "the lowest L layers" is always a prefix range.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
}

/// Layer widths from input to output; the last entry is the class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn softmax_regression(inputs: usize, classes: usize) -> Self {
        ModelSpec {
            layer_sizes: vec![inputs, classes],
            activation: Activation::Identity,
        }
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Self {
        ModelSpec {
            layer_sizes: vec![inputs, hidden, classes],
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layer_sizes",
                "need at least an input and an output size",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes", "sizes must be positive"));
        }
        Ok(())
    }

    /// Number of dense layers.
    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

/// Flat model parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|a| a * factor).collect())
    }

    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub(crate) fn ensure_same_layout(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Structural(format!(
                "{what}: parameter lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

/// Feature rows with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Structural("batch has no rows".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Structural(format!(
                "batch has {} rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
struct LayerSlot {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerSlot {
    fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    fn span(&self) -> Range<usize> {
        self.offset..self.bias().end
    }
}

/// A [`ModelSpec`] with its parameter layout resolved.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerSlot>,
    param_count: usize,
}

struct ForwardPass {
    /// Input to each layer (`inputs[0]` is the feature matrix).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation output of each layer; the last entry holds the logits.
    outputs: Vec<Array2<f64>>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_count());
        let mut offset = 0;
        for pair in spec.layer_sizes.windows(2) {
            let slot = LayerSlot {
                inputs: pair[0],
                outputs: pair[1],
                offset,
            };
            offset = slot.span().end;
            layers.push(slot);
        }
        Ok(Model {
            spec,
            layers,
            param_count: offset,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count()
    }

    /// Coordinates owned by layer `layer` (weights then bias).
    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.layers[layer].span()
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        self.layers[layer].bias()
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        self.layers[layer].weights()
    }

    /// Coordinates of the lowest `count` layers.
    pub fn lower_layers_range(&self, count: usize) -> Range<usize> {
        match count {
            0 => 0..0,
            n => 0..self.layers[n - 1].span().end,
        }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.param_count)
    }

    /// Uniform draw in `[-INIT_SCALE, INIT_SCALE]` for every coordinate.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        ParamVector(
            (0..self.param_count)
                .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
                .collect(),
        )
    }

    fn check(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        if params.len() != self.param_count {
            return Err(Error::Structural(format!(
                "model expects {} parameters, got {}",
                self.param_count,
                params.len()
            )));
        }
        if batch.is_empty() {
            return Err(Error::Structural("empty batch".into()));
        }
        if batch.features.ncols() != self.spec.input_dim() {
            return Err(Error::Structural(format!(
                "model expects {} features, batch has {}",
                self.spec.input_dim(),
                batch.features.ncols()
            )));
        }
        let classes = self.class_count();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Structural(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(())
    }

    fn weights<'a>(&self, params: &'a [f64], layer: usize) -> ArrayView2<'a, f64> {
        let slot = &self.layers[layer];
        ArrayView2::from_shape((slot.outputs, slot.inputs), &params[slot.weights()])
            .expect("layout matches slot shape")
    }

    fn bias<'a>(&self, params: &'a [f64], layer: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&params[self.layers[layer].bias()])
    }

    fn activate(&self, z: &Array2<f64>) -> Array2<f64> {
        match self.spec.activation {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    fn forward(&self, params: &ParamVector, features: &Array2<f64>) -> ForwardPass {
        let p = params.as_slice();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        inputs.push(features.clone());
        for l in 0..self.layers.len() {
            let z = inputs[l].dot(&self.weights(p, l).t()) + self.bias(p, l);
            if l < last {
                inputs.push(self.activate(&z));
            }
            outputs.push(z);
        }
        ForwardPass { inputs, outputs }
    }

    /// Raw class scores, one row per example.
    pub fn logits(&self, params: &ParamVector, batch: &Batch) -> Result<Array2<f64>> {
        self.check(params, batch)?;
        Ok(self
            .forward(params, &batch.features)
            .outputs
            .pop()
            .expect("at least one layer"))
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        let logits = self.logits(params, batch)?;
        Ok(mean_cross_entropy(&logits, &batch.labels))
    }

    /// Analytic gradient of [`Model::loss`].
    pub fn grad(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        self.loss_and_grad(params, batch).map(|(_, g)| g)
    }

    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check(params, batch)?;
        let p = params.as_slice();
        let pass = self.forward(params, &batch.features);
        let logits = pass.outputs.last().expect("at least one layer");
        let loss = mean_cross_entropy(logits, &batch.labels);

        let n = batch.len() as f64;
        let mut delta = softmax_rows(logits);
        for (mut row, &y) in delta.rows_mut().into_iter().zip(&batch.labels) {
            row[y] -= 1.0;
        }
        delta.mapv_inplace(|v| v / n);

        let mut grad = vec![0.0; self.param_count];
        for l in (0..self.layers.len()).rev() {
            let slot = &self.layers[l];
            let gw = delta.t().dot(&pass.inputs[l]);
            grad[slot.weights()]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            let gb = delta.sum_axis(Axis(0));
            grad[slot.bias()]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if l > 0 {
                let mut upstream = delta.dot(&self.weights(p, l));
                if self.spec.activation == Activation::Relu {
                    upstream.zip_mut_with(&pass.outputs[l - 1], |d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                delta = upstream;
            }
        }
        Ok((loss, ParamVector(grad)))
    }

    /// Predicted class per row; ties go to the lowest class index.
    pub fn predict(&self, params: &ParamVector, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.logits(params, batch)?;
        Ok(logits.rows().into_iter().map(|row| argmax(row)).collect())
    }

    /// Fraction of rows whose prediction matches the label.
    pub fn accuracy(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        let predicted = self.predict(params, batch)?;
        let hits = predicted
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn mean_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    total / labels.len() as f64
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// `params - eta * g`.
pub fn sgd_step(params: &ParamVector, g: &ParamVector, eta: f64) -> Result<ParamVector> {
    params.ensure_same_layout(g, "sgd_step")?;
    Ok(ParamVector(
        params
            .as_slice()
            .iter()
            .zip(g.as_slice())
            .map(|(p, g)| p - eta * g)
            .collect(),
    ))
}

/// Stand-alone training budget for a client's private model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivateBudget {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for PrivateBudget {
    fn default() -> Self {
        PrivateBudget {
            epochs: 5,
            learning_rate: 0.1,
            batch_size: 10,
        }
    }
}

/// Splits `order` into consecutive batches of `size` rows (the last may be short).
pub(crate) fn batches(data: &LabeledDataset, order: &[usize], size: usize) -> Vec<Batch> {
    order.chunks(size.max(1)).map(|idx| data.select(idx)).collect()
}

/// Trains a client's private model by mini-batch SGD and scores it on the
/// client's test set. Returns the parameters and their test accuracy.
pub fn train_private<R: Rng + ?Sized>(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
    budget: &PrivateBudget,
    rng: &mut R,
) -> Result<(ParamVector, f64)> {
    if budget.epochs == 0 {
        return Err(Error::config("private.epochs", "must be at least 1"));
    }
    if budget.batch_size == 0 {
        return Err(Error::config("private.batch_size", "must be at least 1"));
    }
    if train.is_empty() {
        return Err(Error::config("private", "client has no training examples"));
    }
    if test.is_empty() {
        return Err(Error::config("private", "client has no test examples"));
    }
    let mut params = model.init_params(rng);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..budget.epochs {
        order.shuffle(rng);
        for batch in batches(train, &order, budget.batch_size) {
            let g = model.grad(&params, &batch)?;
            params = sgd_step(&params, &g, budget.learning_rate)?;
        }
    }
    let score = model.accuracy(&params, &test.to_batch())?;
    Ok((params, score))
}
