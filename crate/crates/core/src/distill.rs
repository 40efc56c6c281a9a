//! Few-image fine-tuning with a weight-space distillation regularizer.
//!
//! Given an adapted model (the anchor) and k <= 10 labeled target images,
//! fine-tuning minimizes `L_CE + lambda * C(w, w_anchor)` where `C` is the
//! mean squared (or mean absolute) distance over all parameter
//! coordinates. The anchor never updates; the penalty keeps the fine-tuned
//! weights from drifting far on so few labels.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::segnet::{self, bce_loss_mean, forward, stage_params, ModelParams, NetConfig};
use crate::train::{sgd_update, Grads, SgdConfig, TrainState};
use crate::weather::Scene;

/// Distance function for the weight-space regularizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    /// Mean of squared coordinate differences.
    #[default]
    Mse,
    /// Mean of absolute coordinate differences.
    L1,
}

/// Few-image fine-tuning configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the model-distillation term.
    pub lambda: f64,
    pub distance: DistanceKind,
    /// Maximum number of labeled images consumed.
    pub k: usize,
    pub epochs: usize,
    pub sgd: SgdConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            distance: DistanceKind::Mse,
            k: 10,
            epochs: 12,
            sgd: SgdConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        self.sgd.validate()
    }
}

/// Plain (non-differentiable) weight-space distance between two models.
pub fn model_distance(a: &ModelParams, b: &ModelParams, kind: DistanceKind) -> Result<f64> {
    if !a.shape_compatible(b) {
        return Err(Error::InvalidInput(
            "model distance requires shape-compatible parameter sets".into(),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        for (&va, &vb) in ta.data().iter().zip(tb.data()) {
            let d = va - vb;
            acc += match kind {
                DistanceKind::Mse => d * d,
                DistanceKind::L1 => d.abs(),
            };
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Differentiable distance between staged parameters and a frozen anchor.
/// Gradients flow to the staged side only.
pub fn model_distance_var(
    tape: &Tape,
    staged: &segnet::ModelVars,
    anchor: &ModelParams,
    kind: DistanceKind,
) -> Result<Var> {
    let total = anchor.coordinate_count() as f64;
    let mut acc: Option<Var> = None;
    for (name, tensor) in anchor.iter() {
        let var = staged.get(name)?;
        let frozen = tape.constant(tensor.clone());
        let diff = var.sub(&frozen)?;
        let term = match kind {
            DistanceKind::Mse => diff.mul(&diff)?.sum(),
            DistanceKind::L1 => {
                // |d| = d * sign(d); relu(d) + relu(-d) keeps it on-tape.
                diff.relu().add(&diff.scale(-1.0).relu())?.sum()
            }
        };
        acc = Some(match acc {
            Some(prev) => prev.add(&term)?,
            None => term,
        });
    }
    Ok(acc
        .ok_or_else(|| Error::InvalidInput("empty parameter set".into()))?
        .scale(1.0 / total))
}

/// Relative weight displacement `||a - b|| / ||b||` (Euclidean over all
/// coordinates); used to verify anchor pull at large lambda.
pub fn relative_weight_distance(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    if !a.shape_compatible(b) {
        return Err(Error::InvalidInput(
            "relative distance requires shape-compatible parameter sets".into(),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for ((_, ta), (_, tb)) in a.iter().zip(b.iter()) {
        for (&va, &vb) in ta.data().iter().zip(tb.data()) {
            num += (va - vb) * (va - vb);
            den += vb * vb;
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

/// Fine-tune on `labeled` (at most `cfg.k` scenes are used) starting from
/// the anchor weights. Per update: `L = mean batch CE + lambda * C`.
/// The anchor copy never changes; when `lambda == 0` the code path is plain
/// fine-tuning (no distance term is recorded at all).
///
/// Returns the fine-tuned weights and the per-epoch overall-loss curve.
pub fn finetune_few(
    anchor: &ModelParams,
    labeled: &[Scene],
    net: &NetConfig,
    cfg: &DistillConfig,
) -> Result<(ModelParams, Vec<f64>)> {
    if labeled.is_empty() {
        return Err(Error::InvalidInput("no labeled scenes given".into()));
    }
    cfg.validate()?;
    let used = &labeled[..labeled.len().min(cfg.k)];
    let mut state = TrainState::new(anchor.clone());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut updates = 0usize;
        for chunk in used.chunks(cfg.sgd.batch_size) {
            let tape = Tape::new();
            let vars = stage_params(&tape, &state.params, true);
            let mut ce: Option<Var> = None;
            for scene in chunk {
                let p = forward(net, &vars, &tape, &scene.image)?;
                let loss = bce_loss_mean(&p, &scene.label)?;
                ce = Some(match ce {
                    Some(prev) => prev.add(&loss)?,
                    None => loss,
                });
            }
            let ce = ce.expect("non-empty chunk").scale(1.0 / chunk.len() as f64);
            let overall = if cfg.lambda == 0.0 {
                ce
            } else {
                let distil = model_distance_var(&tape, &vars, anchor, cfg.distance)?;
                ce.add(&distil.scale(cfg.lambda))?
            };
            overall.backward()?;
            let grads: Grads = vars.grads();
            sgd_update(&mut state, &grads, &cfg.sgd)?;
            epoch_loss += overall.item();
            updates += 1;
        }
        epoch_losses.push(epoch_loss / updates as f64);
    }
    Ok((state.params, epoch_losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use crate::tensor::Tensor;
    use crate::weather::generate_scene;

    fn tiny_net() -> NetConfig {
        NetConfig {
            width: 16,
            height: 16,
            channels: vec![4, 8],
            downsamplings: 2,
            attention: true,
            reduction: 8,
        }
    }

    fn two_scalar_models(a: f64, b: f64) -> (ModelParams, ModelParams) {
        let mut ma = ModelParams::default();
        ma.insert("w", Tensor::scalar(a));
        let mut mb = ModelParams::default();
        mb.insert("w", Tensor::scalar(b));
        (ma, mb)
    }

    #[test]
    fn distance_identity_and_arithmetic() {
        let net = tiny_net();
        let w = segnet::init_params(&net, 4).unwrap();
        assert_eq!(model_distance(&w, &w, DistanceKind::Mse).unwrap(), 0.0);
        assert_eq!(model_distance(&w, &w, DistanceKind::L1).unwrap(), 0.0);

        let (ma, mb) = two_scalar_models(1.0, 3.0);
        assert_eq!(model_distance(&ma, &mb, DistanceKind::Mse).unwrap(), 4.0);
        assert_eq!(model_distance(&ma, &mb, DistanceKind::L1).unwrap(), 2.0);
        // Symmetric in value, non-negative.
        assert_eq!(
            model_distance(&ma, &mb, DistanceKind::Mse).unwrap(),
            model_distance(&mb, &ma, DistanceKind::Mse).unwrap()
        );
    }

    #[test]
    fn distance_rejects_incompatible_models() {
        let (ma, _) = two_scalar_models(1.0, 3.0);
        let mut other = ModelParams::default();
        other.insert("w", Tensor::zeros(vec![2]));
        assert!(model_distance(&ma, &other, DistanceKind::Mse).is_err());
    }

    #[test]
    fn distance_gradient_is_two_diff_over_n() {
        let mut anchor = ModelParams::default();
        anchor.insert("a", Tensor::new(vec![2], vec![0.5, -1.0]).unwrap());
        anchor.insert("b", Tensor::scalar(2.0));
        let n = 3.0;
        let theta = [0.9, -0.4, 1.5];
        let f = |tape: &Tape, v: &[Var]| {
            let staged = segnet::ModelVars::from_vars([
                ("a".to_string(), v[0].clone()),
                ("b".to_string(), v[1].clone()),
            ]);
            model_distance_var(tape, &staged, &anchor, DistanceKind::Mse)
        };
        let inputs = vec![
            Tensor::new(vec![2], vec![theta[0], theta[1]]).unwrap(),
            Tensor::scalar(theta[2]),
        ];
        let analytic = gradcheck::analytic_grads(&f, &inputs).unwrap();
        let expect = [
            2.0 * (theta[0] - 0.5) / n,
            2.0 * (theta[1] + 1.0) / n,
            2.0 * (theta[2] - 2.0) / n,
        ];
        assert!((analytic[0].data()[0] - expect[0]).abs() < 1e-12);
        assert!((analytic[0].data()[1] - expect[1]).abs() < 1e-12);
        assert!((analytic[1].data()[0] - expect[2]).abs() < 1e-12);
        let err = gradcheck::grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn huge_lambda_pins_weights_to_anchor() {
        let net = tiny_net();
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        // A fitted anchor, as in the real pipeline: its cross-entropy
        // gradients are small, so the regularizer dominates cleanly.
        let (anchor, _) = crate::train::pretrain_supervised(
            &scenes,
            &net,
            &SgdConfig {
                epochs: 12,
                batch_size: 2,
                ..SgdConfig::default()
            },
            8,
        )
        .unwrap();
        let cfg = DistillConfig {
            lambda: 1e6,
            epochs: 8,
            k: 2,
            sgd: SgdConfig {
                batch_size: 2,
                ..SgdConfig::default()
            },
            ..DistillConfig::default()
        };
        let (tuned, _) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
        let rel = relative_weight_distance(&tuned, &anchor).unwrap();
        assert!(rel <= 1e-3, "relative distance {rel}");
    }

    #[test]
    fn zero_lambda_equals_plain_finetuning() {
        let net = tiny_net();
        let anchor = segnet::init_params(&net, 8).unwrap();
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let cfg = DistillConfig {
            lambda: 0.0,
            epochs: 2,
            k: 2,
            sgd: SgdConfig {
                batch_size: 2,
                ..SgdConfig::default()
            },
            ..DistillConfig::default()
        };
        let (a, la) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
        let (b, lb) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn anchor_is_never_mutated_and_loss_drops() {
        let net = tiny_net();
        let anchor = segnet::init_params(&net, 8).unwrap();
        let before = anchor.clone();
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let cfg = DistillConfig {
            epochs: 6,
            k: 3,
            sgd: SgdConfig {
                batch_size: 3,
                ..SgdConfig::default()
            },
            ..DistillConfig::default()
        };
        let (tuned, losses) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
        assert_eq!(anchor, before);
        assert_ne!(tuned, anchor);
        assert!(losses.last().unwrap() < losses.first().unwrap());
    }

    #[test]
    fn displacement_is_monotone_in_lambda() {
        let net = tiny_net();
        let anchor = segnet::init_params(&net, 8).unwrap();
        let scenes: Vec<Scene> = (0..2).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let mut last = f64::INFINITY;
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let cfg = DistillConfig {
                lambda,
                epochs: 4,
                k: 2,
                sgd: SgdConfig {
                    batch_size: 2,
                    ..SgdConfig::default()
                },
                ..DistillConfig::default()
            };
            let (tuned, _) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
            let d = model_distance(&tuned, &anchor, DistanceKind::Mse).unwrap();
            assert!(
                d <= last + 1e-15,
                "distance {d} grew at lambda {lambda} (prev {last})"
            );
            last = d;
        }
    }

    #[test]
    fn k_caps_the_consumed_scenes() {
        let net = tiny_net();
        let anchor = segnet::init_params(&net, 8).unwrap();
        let scenes: Vec<Scene> = (0..4).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let cfg = DistillConfig {
            k: 2,
            epochs: 1,
            sgd: SgdConfig {
                batch_size: 4,
                ..SgdConfig::default()
            },
            ..DistillConfig::default()
        };
        let (with_four, _) = finetune_few(&anchor, &scenes, &net, &cfg).unwrap();
        let (with_two, _) = finetune_few(&anchor, &scenes[..2], &net, &cfg).unwrap();
        assert_eq!(with_four, with_two);
        assert!(finetune_few(&anchor, &[], &net, &cfg).is_err());
    }
}
