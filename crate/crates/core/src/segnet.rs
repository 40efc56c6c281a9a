//! Self-attention segmentation autoencoder.
//!
//! Pipeline: strided conv encoder -> one gated self-attention block at the
//! bottleneck -> bilinear-upsample + conv decoder -> 1-channel sigmoid head
//! producing a per-pixel road probability at the input resolution.
//!
//! The attention block is residual: `out = gamma * (value @ affinity^T) + x`
//! with `gamma` a learned scalar initialized to zero, so a freshly
//! initialized network is functionally identical to the attention-free one.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var, PROB_EPS};
use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

/// Architecture hyperparameters. Output resolution equals input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub height: usize,
    /// Channel width after each stride-2 encoder stage.
    pub channels: Vec<usize>,
    /// Number of stride-2 downsamplings; must equal `channels.len()`.
    pub downsamplings: usize,
    pub attention: bool,
    /// Attention reduction factor; divides the bottleneck channel count.
    pub reduction: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 64,
            height: 64,
            channels: vec![16, 32],
            downsamplings: 2,
            attention: true,
            reduction: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidConfig(format!(
                "channel widths must be positive, got {:?}",
                self.channels
            )));
        }
        if self.downsamplings != self.channels.len() {
            return Err(Error::InvalidConfig(format!(
                "downsamplings ({}) must match the number of encoder stages ({})",
                self.downsamplings,
                self.channels.len()
            )));
        }
        let div = 1usize << self.downsamplings;
        if self.width % div != 0 || self.height % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "{}x{} input not divisible by 2^{}",
                self.width, self.height, self.downsamplings
            )));
        }
        if self.attention {
            let bottleneck = *self.channels.last().unwrap();
            if self.reduction == 0 || bottleneck % self.reduction != 0 {
                return Err(Error::InvalidConfig(format!(
                    "reduction {} must divide bottleneck channels {}",
                    self.reduction, bottleneck
                )));
            }
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in initialization order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let stages = self.channels.len();
        let mut layout = Vec::new();
        let mut c_in = 3;
        for (i, &c_out) in self.channels.iter().enumerate() {
            layout.push((format!("enc{}.weight", i + 1), vec![c_out, c_in, 3, 3]));
            layout.push((format!("enc{}.bias", i + 1), vec![c_out]));
            c_in = c_out;
        }
        if self.attention {
            let cb = self.channels[stages - 1];
            let cq = cb / self.reduction;
            layout.push(("attn.wf".into(), vec![cq, cb]));
            layout.push(("attn.wg".into(), vec![cq, cb]));
            layout.push(("attn.wh".into(), vec![cb, cb]));
            layout.push(("attn.gamma".into(), vec![1]));
        }
        for j in 0..stages {
            let in_ch = self.channels[stages - 1 - j];
            let out_ch = if stages - 1 - j == 0 {
                self.channels[0]
            } else {
                self.channels[stages - 2 - j]
            };
            layout.push((format!("dec{}.weight", j + 1), vec![out_ch, in_ch, 3, 3]));
            layout.push((format!("dec{}.bias", j + 1), vec![out_ch]));
        }
        layout.push(("head.weight".into(), vec![1, self.channels[0], 1, 1]));
        layout.push(("head.bias".into(), vec![1]));
        layout
    }
}

/// Named parameter set. Iteration follows name order, which together with
/// the fixed layout makes serialization and arithmetic deterministic.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coordinate_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// True when both sets have identical names and shapes.
    pub fn shape_compatible(&self, other: &ModelParams) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(other.map.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }
}

/// Deterministic fan-in-scaled uniform initialization; biases and the
/// attention gate start at zero.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::default();
    for (name, shape) in cfg.param_layout() {
        let numel: usize = shape.iter().product();
        let tensor = if name.ends_with(".bias") || name == "attn.gamma" {
            Tensor::zeros(shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[1]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..numel)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, tensor);
    }
    Ok(params)
}

/// Parameters staged onto a tape, ready for a forward pass.
pub struct ModelVars {
    map: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ModelVars {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    /// Pull accumulated leaf gradients, zeros where a parameter was unused.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, var)| {
                let g = var
                    .grad()
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; var.value().len()]);
                (name.clone(), g)
            })
            .collect()
    }
}

/// Put every parameter on `tape` (trainable leaves or constants).
pub fn stage_params(tape: &Tape, params: &ModelParams, trainable: bool) -> ModelVars {
    let map = params
        .iter()
        .map(|(name, tensor)| {
            let var = if trainable {
                tape.param(tensor.clone())
            } else {
                tape.constant(tensor.clone())
            };
            (name.clone(), var)
        })
        .collect();
    ModelVars { map }
}

/// Gated residual self-attention over a `[c, h, w]` feature map.
///
/// query = Wf x, key = Wg x (c/r channels each), value = Wh x; the affinity
/// is a row-stochastic softmax of query^T key over spatial positions.
pub fn self_attention(f: &Var, wf: &Var, wg: &Var, wh: &Var, gamma: &Var) -> Result<Var> {
    let shape = f.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "attention expects [c, h, w], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let x2 = f.reshape(vec![c, n])?;
    let q = wf.matmul(&x2)?;
    let k = wg.matmul(&x2)?;
    let v = wh.matmul(&x2)?;
    let affinity = q.transpose()?.matmul(&k)?.softmax(1)?;
    let out = v.matmul(&affinity.transpose()?)?;
    out.reshape(vec![c, h, w])?.mul(gamma)?.add(f)
}

/// Forward pass: returns the road-probability map `[1, h, w]`, values
/// strictly inside (0, 1).
pub fn forward(cfg: &NetConfig, vars: &ModelVars, tape: &Tape, image: &Tensor) -> Result<Var> {
    if image.shape() != [3, cfg.height, cfg.width] {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: image.shape().to_vec(),
            rhs: vec![3, cfg.height, cfg.width],
        });
    }
    let stages = cfg.channels.len();
    let mut feat = tape.constant(image.clone());
    for i in 0..stages {
        feat = feat
            .conv2d(vars.get(&format!("enc{}.weight", i + 1))?, 2, 1)?
            .bias_add(vars.get(&format!("enc{}.bias", i + 1))?)?
            .relu();
    }
    if cfg.attention {
        feat = self_attention(
            &feat,
            vars.get("attn.wf")?,
            vars.get("attn.wg")?,
            vars.get("attn.wh")?,
            vars.get("attn.gamma")?,
        )?;
    }
    for j in 0..stages {
        feat = feat
            .upsample2x()?
            .conv2d(vars.get(&format!("dec{}.weight", j + 1))?, 1, 1)?
            .bias_add(vars.get(&format!("dec{}.bias", j + 1))?)?
            .relu();
    }
    let logits = feat
        .conv2d(vars.get("head.weight")?, 1, 0)?
        .bias_add(vars.get("head.bias")?)?;
    Ok(logits.sigmoid())
}

/// Plain inference: forward on a throwaway tape, returning probabilities.
pub fn predict(cfg: &NetConfig, params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars = stage_params(&tape, params, false);
    Ok(forward(cfg, &vars, &tape, image)?.value())
}

/// Binary cross-entropy, summed over pixels:
/// `-sum(Y log P + (1-Y) log(1-P))` with `P` clamped away from {0, 1}.
pub fn bce_loss(p: &Var, target: &BinaryMask) -> Result<Var> {
    let shape = p.shape();
    if shape != [1, target.height(), target.width()] {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            lhs: shape,
            rhs: vec![1, target.height(), target.width()],
        });
    }
    let tape = p.tape();
    let y = tape.constant(target.to_tensor());
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = y.mul(&pc.log())?;
    let neg = y.one_minus().mul(&pc.one_minus().log())?;
    Ok(pos.add(&neg)?.sum().scale(-1.0))
}

/// Per-pixel mean of `bce_loss`, for reporting.
pub fn bce_loss_mean(p: &Var, target: &BinaryMask) -> Result<Var> {
    let n = (target.height() * target.width()) as f64;
    Ok(bce_loss(p, target)?.scale(1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            width: 8,
            height: 8,
            channels: vec![4, 8],
            downsamplings: 2,
            attention: true,
            reduction: 8,
        }
    }

    fn ramp_image(cfg: &NetConfig) -> Tensor {
        let n = 3 * cfg.height * cfg.width;
        let data: Vec<f64> = (0..n).map(|i| (i % 97) as f64 / 96.0).collect();
        Tensor::new(vec![3, cfg.height, cfg.width], data).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_gamma_zero() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.get("attn.gamma").unwrap().data(), &[0.0]);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3).unwrap();
        for (name, shape) in cfg.param_layout() {
            if name.ends_with(".bias") || name == "attn.gamma" {
                continue;
            }
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[1]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for &v in params.get(&name).unwrap().data() {
                assert!(v.abs() <= bound, "{name}: |{v}| > {bound}");
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut cfg = tiny_cfg();
        cfg.width = 10; // not divisible by 4
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.reduction = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.downsamplings = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shape_range_and_determinism() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 11).unwrap();
        let img = ramp_image(&cfg);
        let p1 = predict(&cfg, &params, &img).unwrap();
        assert_eq!(p1.shape(), &[1, cfg.height, cfg.width]);
        for &v in p1.data() {
            assert!(v > 0.0 && v < 1.0);
        }
        let p2 = predict(&cfg, &params, &img).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn forward_rejects_wrong_input_size() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let bad = Tensor::zeros(vec![3, 4, 4]);
        assert!(predict(&cfg, &params, &bad).is_err());
    }

    #[test]
    fn zero_gamma_matches_attention_free_network() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 5).unwrap();
        assert_eq!(params.get("attn.gamma").unwrap().data(), &[0.0]);
        let mut no_attn = cfg.clone();
        no_attn.attention = false;
        let img = ramp_image(&cfg);
        let with = predict(&cfg, &params, &img).unwrap();
        let without = predict(&no_attn, &params, &img).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn attention_on_single_position_is_gated_projection() {
        // 1x1 spatial map: the affinity softmax collapses to the scalar 1,
        // so out = gamma * (Wh x) + x.
        let tape = Tape::new();
        let c = 4;
        let f = tape.constant(Tensor::new(vec![c, 1, 1], vec![0.3, -0.7, 1.1, 0.2]).unwrap());
        let wf = tape.constant(Tensor::full(vec![1, c], 0.11));
        let wg = tape.constant(Tensor::full(vec![1, c], -0.2));
        let wh_data: Vec<f64> = (0..c * c).map(|i| (i as f64 * 0.13).sin()).collect();
        let wh = tape.constant(Tensor::new(vec![c, c], wh_data.clone()).unwrap());
        let gamma = tape.constant(Tensor::scalar(0.5));
        let out = self_attention(&f, &wf, &wg, &wh, &gamma).unwrap().value();
        let x = [0.3, -0.7, 1.1, 0.2];
        for i in 0..c {
            let whx: f64 = (0..c).map(|j| wh_data[i * c + j] * x[j]).sum();
            let expect = 0.5 * whx + x[i];
            assert!((out.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn affinity_rows_are_probability_distributions() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 13).unwrap();
        let tape = Tape::new();
        let cb = *cfg.channels.last().unwrap();
        let f_data: Vec<f64> = (0..cb * 4)
            .map(|i| ((i * 31 % 17) as f64 - 8.0) / 8.0)
            .collect();
        let f = tape.constant(Tensor::new(vec![cb, 2, 2], f_data).unwrap());
        let wf = tape.constant(params.get("attn.wf").unwrap().clone());
        let wg = tape.constant(params.get("attn.wg").unwrap().clone());
        let x2 = f.reshape(vec![cb, 4]).unwrap();
        let aff = wf
            .matmul(&x2)
            .unwrap()
            .transpose()
            .unwrap()
            .matmul(&wg.matmul(&x2).unwrap())
            .unwrap()
            .softmax(1)
            .unwrap()
            .value();
        for row in 0..4 {
            let sum: f64 = aff.data()[row * 4..(row + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let c = 8;
        let mut seed_rng = crate::rng::stream(21, "attn-grad");
        let mut make = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| seed_rng.random_range(-0.8..0.8)).collect();
            Tensor::new(shape, data).unwrap()
        };
        let inputs = vec![
            make(vec![c, 4, 4]),
            make(vec![1, c]),
            make(vec![1, c]),
            make(vec![c, c]),
            Tensor::scalar(0.4),
        ];
        let err = gradcheck::grad_check(
            &|_, v: &[Var]| {
                let att = self_attention(&v[0], &v[1], &v[2], &v[3], &v[4])?;
                Ok(att.mul(&att)?.sum())
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn bce_matches_closed_forms() {
        let tape = Tape::new();
        // P = 0.5 everywhere: both branches contribute ln 2 per pixel.
        let p = tape.constant(Tensor::full(vec![1, 2, 2], 0.5));
        let y = BinaryMask::new(2, 2, vec![1, 0, 1, 1]).unwrap();
        let loss = bce_loss(&p, &y).unwrap().item();
        assert!((loss - 4.0 * std::f64::consts::LN_2).abs() < 1e-12);

        // Confident correct prediction: clamping caps the loss near zero.
        let exact = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap());
        let y2 = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        let loss2 = bce_loss(&exact, &y2).unwrap().item();
        assert!((0.0..=2e-6).contains(&loss2), "loss2 = {loss2}");

        // Hand evaluation.
        let p3 = tape.constant(Tensor::new(vec![1, 1, 2], vec![0.9, 0.2]).unwrap());
        let y3 = BinaryMask::new(1, 2, vec![1, 0]).unwrap();
        let loss3 = bce_loss(&p3, &y3).unwrap().item();
        let expect = -(0.9f64.ln() + 0.8f64.ln());
        assert!((loss3 - expect).abs() < 1e-12);
        assert!((expect - 0.3285).abs() < 1e-4);
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(vec![1, 2, 2], 0.5));
        let y = BinaryMask::new(2, 3, vec![0; 6]).unwrap();
        assert!(bce_loss(&p, &y).is_err());
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 17).unwrap();
        let img = ramp_image(&cfg);
        let y = BinaryMask::new(
            cfg.height,
            cfg.width,
            (0..cfg.height * cfg.width)
                .map(|i| (i % 3 == 0) as u8)
                .collect(),
        )
        .unwrap();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
        let err = gradcheck::grad_check(
            &|tape, vars: &[Var]| {
                let staged =
                    ModelVars::from_vars(names.iter().cloned().zip(vars.iter().cloned()));
                let p = forward(&cfg, &staged, tape, &img)?;
                bce_loss(&p, &y)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "whole-model err = {err}");
    }
}
