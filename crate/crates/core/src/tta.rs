//! Entropy-driven test-time adaptation.
//!
//! At inference time no ground truth exists, but every quantization call
//! exposes how confidently its features snap to codebook entries: the
//! softmax of negative distances. Summing the entropy of those rows over
//! all quantized locations gives a label-free objective; descending it
//! with plain gradient steps on the grayscale-attention parameters alone
//! sharpens the queries without touching the codebooks or convolutions.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::codebook::{QuantizationResult, QuantizeOpts};
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::ganet::{reconstruct_rgb_to_hsi, GanetModel};
use crate::msvqvae::cube_constant;
use crate::tensor::{Graph, Scalar, TensorId};

/// Adaptation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    /// Gradient steps per adaptation call.
    pub steps: usize,
    pub learning_rate: f64,
    /// Softmax temperature of the confidence rows.
    pub temperature: f64,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            steps: 10,
            learning_rate: 1e-4,
            temperature: 1.0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Total entropy of the confidence rows of every quantization call: for each
/// quantized position, `−Σ_e P·ln P` over the codebook entries, all summed
/// into one scalar. Always ≥ 0; exactly 0 only for one-hot rows.
pub fn tta_loss<T: Scalar>(
    g: &mut Graph<T>,
    results: &[QuantizationResult],
) -> Result<TensorId> {
    if results.is_empty() {
        return Err(Error::Arg(
            "tta_loss needs at least one quantization result".into(),
        ));
    }
    let mut total: Option<TensorId> = None;
    for r in results {
        let probs = r.probabilities.ok_or_else(|| {
            Error::Arg(
                "quantization result carries no probability matrix; \
                 enable probabilities when quantizing for adaptation"
                    .into(),
            )
        })?;
        let ent = g.row_entropy_sum(probs)?;
        total = Some(match total {
            None => ent,
            Some(t) => g.add(t, ent)?,
        });
    }
    Ok(total.expect("non-empty results"))
}

/// Adapt the model's grayscale-attention parameters to an unlabeled RGB
/// batch by descending [`tta_loss`] with `cfg.steps` plain gradient steps.
///
/// Returns the loss trajectory `[L_0, …, L_steps]`: the value before any
/// update, after each of the `steps` updates — empty when `steps == 0`, in
/// which case the model is untouched. All parameters outside the GA
/// manifest (codebooks included) stay bit-identical.
pub fn adapt(model: &mut GanetModel, batch: &[&HsiCube], cfg: &TtaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Arg("adapt needs a non-empty batch".into()));
    }
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let manifest: HashSet<String> = model.ga_manifest.iter().cloned().collect();
    let opts = QuantizeOpts {
        temperature: cfg.temperature as f32,
        with_probabilities: true,
    };
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let mut g: Graph<f32> = Graph::new();
        let bound = model.params.bind(&mut g)?;
        let books = model.book_ids(&bound)?;
        let mut results = Vec::new();
        for cube in batch {
            let rgb = cube_constant(&mut g, cube)?;
            let fwd = reconstruct_rgb_to_hsi(&mut g, &bound, model, &books, rgb, &opts)?;
            results.extend(fwd.quants);
        }
        let loss = tta_loss(&mut g, &results)?;
        let value = g.scalar_value(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("non-finite adaptation entropy (lr={})", cfg.learning_rate),
            });
        }
        trajectory.push(value);
        if step == cfg.steps {
            break;
        }
        g.backward(loss)?;
        model
            .params
            .sgd_step(&g, &bound, cfg.learning_rate as f32, |e| {
                manifest.contains(&e.name)
            });
    }
    Ok(trajectory)
}
