//! Per-client adapted models trained alongside the global model.
//!
//! The adapted model `v` minimizes `loss(v, b) + lambda * ||v - w||^2`, where
//! `w` is the client's in-progress local copy of the global model and
//! `lambda = sigmoid(loss_div) * sigmoid(grad_div)` is recomputed every batch.

use serde::{Deserialize, Serialize};

use crate::client::ClientState;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, ParamVector};

/// Gradient norms below this make the alignment term zero.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    Dynamic,
    /// Constant weight, for ablations.
    Fixed(f64),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Lowest layers that mirror the global model instead of adapting.
    pub frozen_lower_layers: usize,
    pub lambda: LambdaMode,
}

impl AdaptationConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.frozen_lower_layers >= model.layer_count() {
            return Err(Error::config(
                "adaptation.frozen_lower_layers",
                format!(
                    "{} frozen layers leaves nothing to adapt in a {}-layer model",
                    self.frozen_lower_layers,
                    model.layer_count()
                ),
            ));
        }
        if let LambdaMode::Fixed(v) = self.lambda {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config("adaptation.lambda", "fixed value must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaDiagnostics {
    pub loss_div: f64,
    pub grad_div: f64,
    pub lambda: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss gap, gradient alignment, and the resulting weight.
pub fn compute_lambda(
    model: &Model,
    adapted: &ParamVector,
    local: &ParamVector,
    batch: &Batch,
) -> Result<LambdaDiagnostics> {
    lambda_with_grad(model, adapted, local, batch).map(|(d, _)| d)
}

fn lambda_with_grad(
    model: &Model,
    adapted: &ParamVector,
    local: &ParamVector,
    batch: &Batch,
) -> Result<(LambdaDiagnostics, ParamVector)> {
    adapted.ensure_same_layout(local, "compute_lambda")?;
    let (adapted_loss, grad) = model.loss_and_grad(adapted, batch)?;
    let local_loss = model.loss(local, batch)?;
    let loss_div = adapted_loss - local_loss;
    let grad_norm = grad.norm();
    let grad_div = if grad_norm < GRAD_NORM_FLOOR {
        0.0
    } else {
        adapted.sub(local).dot(&grad) / grad_norm
    };
    let lambda = sigmoid(loss_div) * sigmoid(grad_div);
    Ok((
        LambdaDiagnostics {
            loss_div,
            grad_div,
            lambda,
        },
        grad,
    ))
}

/// `loss(v, b) + lambda * ||v - w||^2`.
pub fn adapted_loss(
    model: &Model,
    adapted: &ParamVector,
    local: &ParamVector,
    batch: &Batch,
    lambda: f64,
) -> Result<f64> {
    adapted.ensure_same_layout(local, "adapted_loss")?;
    Ok(model.loss(adapted, batch)? + lambda * adapted.distance_sq(local))
}

/// Gradient of [`adapted_loss`] in `v` with `lambda` held constant.
pub fn adapted_grad(
    model: &Model,
    adapted: &ParamVector,
    local: &ParamVector,
    batch: &Batch,
    lambda: f64,
) -> Result<ParamVector> {
    adapted.ensure_same_layout(local, "adapted_grad")?;
    let grad = model.grad(adapted, batch)?;
    Ok(add_proximal(grad, adapted, local, lambda))
}

fn add_proximal(mut grad: ParamVector, adapted: &ParamVector, local: &ParamVector, lambda: f64) -> ParamVector {
    if lambda != 0.0 {
        for ((g, v), w) in grad
            .as_mut_slice()
            .iter_mut()
            .zip(adapted.as_slice())
            .zip(local.as_slice())
        {
            *g += 2.0 * lambda * (v - w);
        }
    }
    grad
}

/// One SGD step on the adapted objective. Frozen lower layers are copied from
/// `local` afterwards.
pub fn adapt_step(
    model: &Model,
    adapted: &ParamVector,
    local: &ParamVector,
    batch: &Batch,
    eta: f64,
    config: &AdaptationConfig,
) -> Result<(ParamVector, LambdaDiagnostics)> {
    let (mut diag, grad) = lambda_with_grad(model, adapted, local, batch)?;
    if let LambdaMode::Fixed(value) = config.lambda {
        diag.lambda = value;
    }
    let grad = add_proximal(grad, adapted, local, diag.lambda);
    let frozen = model.lower_layers_range(config.frozen_lower_layers);
    let mut next: Vec<f64> = adapted
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(v, g)| v - eta * g)
        .collect();
    next[frozen.clone()].copy_from_slice(&local.as_slice()[frozen]);
    Ok((ParamVector::new(next), diag))
}

/// The model a client uses for its own predictions: its adapted model if it
/// has ever created one, otherwise the current global model.
pub fn inference_model<'a>(client: &'a ClientState, global: &'a ParamVector) -> &'a ParamVector {
    client.adapted.as_ref().unwrap_or(global)
}
