//! Training loops: supervised pretraining and two-step source-free
//! adaptation over an entropy-ordered curriculum.
//!
//! Adaptation sees target *images only* — `step1_entropy_min`,
//! `step2_online_selftrain`, and the frozen-label baseline take `&[Tensor]`
//! and have no way to read ground truth. `run_curriculum` holds labeled
//! scenes solely to report per-batch metric snapshots; the returned weights
//! are a function of images, config, and seed alone.
//!
//! All training objectives are per-pixel means (batch-averaged), so
//! learning rates are invariant to image size; the pixel-summed
//! cross-entropy stays available for reporting. Step 1 carries its own
//! learning rate (`step1_lr`) because the entropy term lives on a
//! different scale than the cross-entropy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, PROB_EPS};
use crate::curriculum::{self, CurriculumPlan, EntropyMode};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::rng;
use crate::segnet::{self, bce_loss_mean, forward, stage_params, ModelParams, NetConfig};
use crate::tensor::Tensor;
use crate::weather::Scene;

/// SGD with momentum and decoupled-from-nothing weight decay folded into
/// the gradient: `v <- mu v + (g + wd w); w <- w - lr v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 16,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// How the pseudo-label threshold is chosen each update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// Use `tau` verbatim.
    #[default]
    Fixed,
    /// Expectation matching: threshold at the quantile of the current
    /// predictions that makes the pseudo-road fraction equal the mean
    /// predicted probability. Counters the road-starvation bias of hard
    /// thresholding an under-confident model; fully unsupervised.
    ExpectationMatched,
}

/// Adaptation hyperparameters for the per-mini-batch two-step procedure.
///
/// `sgd` governs step 2 (and supplies momentum / weight decay for both
/// steps); `step1_lr` is the separate rate for the mean-entropy objective,
/// which lives on a much smaller scale than the pixel-summed cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Pseudo-label threshold; a pixel becomes road when `P >= tau`.
    pub tau: f64,
    pub tau_mode: TauMode,
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    pub entropy_mode: EntropyMode,
    /// Number of curriculum mini-batches.
    pub m: usize,
    pub sgd: SgdConfig,
    pub step1_lr: f64,
    /// Outer rounds for the frozen-label baseline (labels refresh once per
    /// round; the total epoch budget still equals `step2_epochs`).
    pub iterative_rounds: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            tau: 0.5,
            tau_mode: TauMode::Fixed,
            step1_epochs: 2,
            step2_epochs: 3,
            entropy_mode: EntropyMode::Paper,
            m: 4,
            sgd: SgdConfig::default(),
            step1_lr: 0.2,
            iterative_rounds: 1,
        }
    }
}

/// Threshold that labels exactly the model's own soft road mass: returns
/// the value `t` such that the fraction of probabilities `>= t` equals the
/// mean probability (the expected road fraction).
pub fn expectation_matched_tau(probability_maps: &[Tensor]) -> f64 {
    let mut values: Vec<f64> = probability_maps
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    let want = (values.len() as f64 * mean).round() as usize;
    let idx = values.len().saturating_sub(want.max(1));
    values[idx].clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be at least 1".into()));
        }
        if !(self.step1_lr > 0.0 && self.step1_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step1 lr must be positive, got {}",
                self.step1_lr
            )));
        }
        if self.iterative_rounds == 0 {
            return Err(Error::InvalidConfig("iterative rounds must be >= 1".into()));
        }
        self.sgd.validate()
    }
}

/// Named gradient set matching a `ModelParams`.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Mutable optimizer state: parameters plus one velocity buffer per
/// parameter (zero-initialized) and bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    velocity: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params
            .iter()
            .map(|(name, t)| (name.clone(), vec![0.0; t.len()]))
            .collect();
        TrainState {
            params,
            velocity,
            step: 0,
            loss_history: Vec::new(),
        }
    }
}

/// One SGD-with-momentum update.
pub fn sgd_update(state: &mut TrainState, grads: &Grads, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    let names: Vec<String> = state.params.iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing gradient for '{name}'")))?;
        let w = state.params.get_mut(name)?;
        if g.len() != w.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_update",
                lhs: w.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
        let v = state.velocity.get_mut(name).expect("velocity mirrors params");
        let wd = cfg.weight_decay;
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + (gi + wd * *wi);
            *wi -= cfg.lr * *vi;
        }
    }
    state.step += 1;
    Ok(())
}

/// FNV-1a over all parameter names and payload bytes; used for carry-over
/// assertions and report auditing.
pub fn params_hash(params: &ModelParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for (name, tensor) in params.iter() {
        eat(name.as_bytes());
        for &v in tensor.data() {
            eat(&v.to_le_bytes());
        }
    }
    h
}

fn mask_bytes_hash(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h = (*h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

/// Accumulate per-image gradients into `total` (element-wise add).
fn add_grads(total: &mut Grads, part: &Grads) {
    for (name, g) in part {
        match total.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                total.insert(name.clone(), g.clone());
            }
        }
    }
}

fn scale_grads(total: &mut Grads, factor: f64) {
    for g in total.values_mut() {
        for v in g.iter_mut() {
            *v *= factor;
        }
    }
}

/// Supervised pretraining on labeled clean scenes. Deterministic given
/// `seed`: init and shuffle streams are derived from it. Returns the final
/// parameters and the per-epoch mean per-pixel loss curve.
pub fn pretrain_supervised(
    scenes: &[Scene],
    net: &NetConfig,
    sgd: &SgdConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>)> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("pretraining dataset is empty".into()));
    }
    sgd.validate()?;
    let params = segnet::init_params(net, rng::derive_seed(seed, "init"))?;
    let mut state = TrainState::new(params);
    let mut shuffle_rng = rng::stream(seed, "shuffle");
    let mut epoch_losses = Vec::with_capacity(sgd.epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for _epoch in 0..sgd.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(sgd.batch_size) {
            let mut grads = Grads::new();
            for &idx in chunk {
                let scene = &scenes[idx];
                let tape = Tape::new();
                let vars = stage_params(&tape, &state.params, true);
                let p = forward(net, &vars, &tape, &scene.image)?;
                let loss = bce_loss_mean(&p, &scene.label)?;
                loss.backward()?;
                add_grads(&mut grads, &vars.grads());
                epoch_loss += loss.item();
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd_update(&mut state, &grads, sgd)?;
        }
        epoch_loss /= scenes.len() as f64;
        state.loss_history.push(epoch_loss);
        epoch_losses.push(epoch_loss);
    }
    Ok((state.params, epoch_losses))
}

/// Differentiable per-pixel mean entropy of a probability map.
fn entropy_loss(p: &crate::autograd::Var, mode: EntropyMode) -> Result<crate::autograd::Var> {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let n = pc.value().len() as f64;
    let single = pc.mul(&pc.log())?;
    let loss = match mode {
        EntropyMode::Paper => single.sum().scale(-1.0 / n),
        EntropyMode::Binary => {
            let q = pc.one_minus();
            let other = q.mul(&q.log())?;
            single.add(&other)?.sum().scale(-1.0 / n)
        }
    };
    Ok(loss)
}

/// Mean prediction entropy of a set of images under the current model.
pub fn mean_entropy(
    net: &NetConfig,
    params: &ModelParams,
    images: &[Tensor],
    mode: EntropyMode,
) -> Result<f64> {
    let mut acc = 0.0;
    for image in images {
        let p = segnet::predict(net, params, image)?;
        acc += curriculum::prediction_entropy(&p, mode);
    }
    Ok(acc / images.len() as f64)
}

/// Loss curve and entropy endpoints of one adaptation step.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub entropy_before: f64,
    pub entropy_after: f64,
    pub losses: Vec<f64>,
    /// FNV hash of the pseudo-label set at each update (step 2 and the
    /// frozen baseline only); lets tests observe label movement.
    pub label_hashes: Vec<u64>,
}

/// Step 1: entropy minimization on unlabeled target images. Labels are
/// never consulted (none are even passed in).
pub fn step1_entropy_min(
    params: ModelParams,
    images: &[Tensor],
    net: &NetConfig,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, StepStats)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("step 1 batch is empty".into()));
    }
    cfg.validate()?;
    let mut stats = StepStats {
        entropy_before: mean_entropy(net, &params, images, cfg.entropy_mode)?,
        ..Default::default()
    };
    let step_sgd = SgdConfig {
        lr: cfg.step1_lr,
        ..cfg.sgd
    };
    let mut state = TrainState::new(params);
    for _epoch in 0..cfg.step1_epochs {
        for chunk in images.chunks(cfg.sgd.batch_size) {
            let mut grads = Grads::new();
            let mut chunk_loss = 0.0;
            for image in chunk {
                let tape = Tape::new();
                let vars = stage_params(&tape, &state.params, true);
                let p = forward(net, &vars, &tape, image)?;
                let loss = entropy_loss(&p, cfg.entropy_mode)?;
                loss.backward()?;
                add_grads(&mut grads, &vars.grads());
                chunk_loss += loss.item();
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd_update(&mut state, &grads, &step_sgd)?;
            stats.losses.push(chunk_loss / chunk.len() as f64);
        }
    }
    stats.entropy_after = mean_entropy(net, &state.params, images, cfg.entropy_mode)?;
    Ok((state.params, stats))
}

/// Step 2: online self-training. Every update recomputes pseudo-labels
/// from the *current* parameters (threshold `tau`, inclusive `>=`), treats
/// them as constants, and takes one SGD step on the cross-entropy against
/// them.
pub fn step2_online_selftrain(
    params: ModelParams,
    images: &[Tensor],
    net: &NetConfig,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, StepStats)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("step 2 batch is empty".into()));
    }
    cfg.validate()?;
    let mut stats = StepStats {
        entropy_before: mean_entropy(net, &params, images, cfg.entropy_mode)?,
        ..Default::default()
    };
    let mut state = TrainState::new(params);
    for _epoch in 0..cfg.step2_epochs {
        for chunk in images.chunks(cfg.sgd.batch_size) {
            // Forward the whole chunk with the current weights, then decide
            // the threshold, then take one step against the fresh labels.
            let staged: Vec<_> = chunk
                .iter()
                .map(|image| {
                    let tape = Tape::new();
                    let vars = stage_params(&tape, &state.params, true);
                    let p = forward(net, &vars, &tape, image)?;
                    let value = p.value();
                    Ok((vars, p, value))
                })
                .collect::<Result<_>>()?;
            let tau = match cfg.tau_mode {
                TauMode::Fixed => cfg.tau,
                TauMode::ExpectationMatched => expectation_matched_tau(
                    &staged.iter().map(|(_, _, v)| v.clone()).collect::<Vec<_>>(),
                ),
            };
            let mut grads = Grads::new();
            let mut chunk_loss = 0.0;
            let mut label_hash: u64 = 0xcbf2_9ce4_8422_2325;
            for (vars, p, value) in &staged {
                let pseudo = metrics::binarize(value, tau)?;
                mask_bytes_hash(&mut label_hash, pseudo.data());
                let loss = bce_loss_mean(p, &pseudo)?;
                loss.backward()?;
                add_grads(&mut grads, &vars.grads());
                chunk_loss += loss.item();
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            sgd_update(&mut state, &grads, &cfg.sgd)?;
            stats.losses.push(chunk_loss / chunk.len() as f64);
            stats.label_hashes.push(label_hash);
        }
    }
    stats.entropy_after = mean_entropy(net, &state.params, images, cfg.entropy_mode)?;
    Ok((state.params, stats))
}

/// Frozen-label baseline: pseudo-labels are generated once per outer round
/// and held fixed while training runs the round's epoch share. Provided as
/// the comparison arm that online self-training is measured against.
pub fn iterative_selftrain_baseline(
    params: ModelParams,
    images: &[Tensor],
    net: &NetConfig,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, StepStats)> {
    if images.is_empty() {
        return Err(Error::InvalidInput("baseline batch is empty".into()));
    }
    cfg.validate()?;
    let mut stats = StepStats {
        entropy_before: mean_entropy(net, &params, images, cfg.entropy_mode)?,
        ..Default::default()
    };
    let mut state = TrainState::new(params);
    let rounds = cfg.iterative_rounds;
    let base = cfg.step2_epochs / rounds;
    let extra = cfg.step2_epochs % rounds;
    for round in 0..rounds {
        let round_epochs = base + usize::from(round < extra);
        if round_epochs == 0 {
            continue;
        }
        // Freeze labels from the current model.
        let frozen: Vec<crate::tensor::BinaryMask> = images
            .iter()
            .map(|image| {
                let p = segnet::predict(net, &state.params, image)?;
                metrics::binarize(&p, cfg.tau)
            })
            .collect::<Result<_>>()?;
        for _epoch in 0..round_epochs {
            for (chunk_imgs, chunk_labels) in images
                .chunks(cfg.sgd.batch_size)
                .zip(frozen.chunks(cfg.sgd.batch_size))
            {
                let mut grads = Grads::new();
                let mut chunk_loss = 0.0;
                let mut label_hash: u64 = 0xcbf2_9ce4_8422_2325;
                for (image, label) in chunk_imgs.iter().zip(chunk_labels) {
                    let tape = Tape::new();
                    let vars = stage_params(&tape, &state.params, true);
                    let p = forward(net, &vars, &tape, image)?;
                    mask_bytes_hash(&mut label_hash, label.data());
                    let loss = bce_loss_mean(&p, label)?;
                    loss.backward()?;
                    add_grads(&mut grads, &vars.grads());
                    chunk_loss += loss.item();
                }
                scale_grads(&mut grads, 1.0 / chunk_imgs.len() as f64);
                sgd_update(&mut state, &grads, &cfg.sgd)?;
                stats.losses.push(chunk_loss / chunk_imgs.len() as f64);
                stats.label_hashes.push(label_hash);
            }
        }
    }
    stats.entropy_after = mean_entropy(net, &state.params, images, cfg.entropy_mode)?;
    Ok((state.params, stats))
}

/// Which self-training variant runs as step 2 of each mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelfTraining {
    Online,
    IterativeFrozen,
}

/// Metrics snapshot recorded after each curriculum mini-batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchSnapshot {
    pub batch_index: usize,
    pub scene_ids: Vec<usize>,
    pub entropy_before: f64,
    pub entropy_after_step1: f64,
    pub entropy_after_step2: f64,
    /// Micro mIoU over the whole adaptation target, after each step.
    pub miou_after_step1: Option<f64>,
    pub miou_after_step2: Option<f64>,
    pub params_hash_after: u64,
}

/// Micro-averaged metrics of a model over labeled scenes.
pub fn evaluate_scenes(
    net: &NetConfig,
    params: &ModelParams,
    scenes: &[Scene],
) -> Result<MetricReport> {
    let mut total = metrics::Confusion::default();
    for scene in scenes {
        let p = segnet::predict(net, params, &scene.image)?;
        let pred = metrics::binarize(&p, metrics::DECISION_THRESHOLD)?;
        total = total.merge(&metrics::confusion(&pred, &scene.label)?);
    }
    Ok(metrics::report(&total))
}

/// Everything a curriculum run produces: the final weights, per-batch
/// metric snapshots, and the weights as they stood after each batch
/// (batch i's weights initialize batch i+1).
pub struct CurriculumOutcome {
    pub final_params: ModelParams,
    pub snapshots: Vec<BatchSnapshot>,
    pub per_batch_params: Vec<ModelParams>,
}

/// Run the two-step procedure over the plan's mini-batches in order, with
/// weight carry-over: batch i+1 starts from the weights batch i produced;
/// the first batch starts from `pretrained`.
///
/// Labels in `scenes` are read only to fill the per-batch metric
/// snapshots; the adaptation path receives images alone.
pub fn run_curriculum(
    net: &NetConfig,
    pretrained: ModelParams,
    plan: &CurriculumPlan,
    scenes: &[Scene],
    cfg: &AdaptConfig,
    variant: SelfTraining,
) -> Result<CurriculumOutcome> {
    if plan.batches.is_empty() {
        return Err(Error::InvalidInput("curriculum plan is empty".into()));
    }
    cfg.validate()?;
    for &id in plan.batches.iter().flatten() {
        if id >= scenes.len() {
            return Err(Error::InvalidInput(format!(
                "plan references scene {id}, but only {} scenes given",
                scenes.len()
            )));
        }
    }
    let mut params = pretrained;
    let mut snapshots = Vec::with_capacity(plan.batches.len());
    let mut per_batch_params = Vec::with_capacity(plan.batches.len());
    for (batch_index, ids) in plan.batches.iter().enumerate() {
        let images: Vec<Tensor> = ids.iter().map(|&id| scenes[id].image.clone()).collect();
        let (after1, stats1) = step1_entropy_min(params, &images, net, cfg)?;
        let miou_after_step1 = evaluate_scenes(net, &after1, scenes)?.miou;
        let (after2, stats2) = match variant {
            SelfTraining::Online => step2_online_selftrain(after1, &images, net, cfg)?,
            SelfTraining::IterativeFrozen => {
                iterative_selftrain_baseline(after1, &images, net, cfg)?
            }
        };
        let miou_after_step2 = evaluate_scenes(net, &after2, scenes)?.miou;
        snapshots.push(BatchSnapshot {
            batch_index,
            scene_ids: ids.clone(),
            entropy_before: stats1.entropy_before,
            entropy_after_step1: stats1.entropy_after,
            entropy_after_step2: stats2.entropy_after,
            miou_after_step1,
            miou_after_step2,
            params_hash_after: params_hash(&after2),
        });
        per_batch_params.push(after2.clone());
        params = after2;
    }
    Ok(CurriculumOutcome {
        final_params: params,
        snapshots,
        per_batch_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::BinaryMask;
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

    fn tiny_adapt() -> AdaptConfig {
        AdaptConfig {
            sgd: SgdConfig {
                batch_size: 2,
                ..SgdConfig::default()
            },
            step1_epochs: 1,
            step2_epochs: 1,
            ..AdaptConfig::default()
        }
    }

    fn scalar_params(w: f64) -> ModelParams {
        let mut p = ModelParams::default();
        p.insert("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let mut state = TrainState::new(scalar_params(1.5));
        let grads: Grads = [("w".to_string(), vec![0.0])].into_iter().collect();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        sgd_update(&mut state, &grads, &cfg).unwrap();
        assert_eq!(state.params.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn sgd_one_step_arithmetic() {
        let mut state = TrainState::new(scalar_params(1.0));
        let grads: Grads = [("w".to_string(), vec![1.0])].into_iter().collect();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
        };
        sgd_update(&mut state, &grads, &cfg).unwrap();
        assert_eq!(state.velocity.get("w").unwrap(), &vec![1.0]);
        assert!((state.params.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_match_hand_unrolled_recurrence() {
        let (lr, mu, wd, g) = (0.05, 0.9, 0.01, 0.7);
        let mut state = TrainState::new(scalar_params(2.0));
        let grads: Grads = [("w".to_string(), vec![g])].into_iter().collect();
        let cfg = SgdConfig {
            lr,
            momentum: mu,
            weight_decay: wd,
            batch_size: 1,
            epochs: 1,
        };
        // Hand unroll.
        let mut w = 2.0;
        let mut v = 0.0;
        for _ in 0..2 {
            v = mu * v + (g + wd * w);
            w -= lr * v;
        }
        sgd_update(&mut state, &grads, &cfg).unwrap();
        sgd_update(&mut state, &grads, &cfg).unwrap();
        assert_eq!(state.params.get("w").unwrap().data()[0], w);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut state = TrainState::new(scalar_params(1.0));
        let grads: Grads = [("w".to_string(), vec![1.0, 2.0])].into_iter().collect();
        assert!(sgd_update(&mut state, &grads, &SgdConfig::default()).is_err());
    }

    #[test]
    fn bce_strictly_decreases_fitting_one_pair() {
        // Full-batch descent on a single (image, mask) pair, mean-form loss,
        // lr 1e-2, no weight decay, no momentum.
        let net = tiny_net();
        let scene = generate_scene(3, 16, 16).unwrap();
        let params = segnet::init_params(&net, 1).unwrap();
        let mut state = TrainState::new(params);
        let cfg = SgdConfig {
            lr: 1e-2,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            epochs: 1,
        };
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let tape = Tape::new();
            let vars = stage_params(&tape, &state.params, true);
            let p = forward(&net, &vars, &tape, &scene.image).unwrap();
            let loss = segnet::bce_loss_mean(&p, &scene.label).unwrap();
            let value = loss.item();
            assert!(value >= 0.0);
            assert!(value < last, "step {step}: {value} !< {last}");
            last = value;
            loss.backward().unwrap();
            sgd_update(&mut state, &vars.grads(), &cfg).unwrap();
        }
    }

    #[test]
    fn pretrain_loss_drops_and_is_deterministic() {
        let net = tiny_net();
        let scenes: Vec<_> = (0..6).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let sgd = SgdConfig {
            epochs: 3,
            batch_size: 2,
            ..SgdConfig::default()
        };
        let (params_a, losses_a) = pretrain_supervised(&scenes, &net, &sgd, 42).unwrap();
        let (params_b, losses_b) = pretrain_supervised(&scenes, &net, &sgd, 42).unwrap();
        assert_eq!(params_a, params_b);
        assert_eq!(losses_a, losses_b);
        assert!(losses_a.last().unwrap() <= losses_a.first().unwrap());
        let (params_c, _) = pretrain_supervised(&scenes, &net, &sgd, 43).unwrap();
        assert_ne!(params_a, params_c);
        assert!(pretrain_supervised(&[], &net, &sgd, 1).is_err());
    }

    #[test]
    fn entropy_gradient_stationary_at_one_over_e() {
        // d(-P log P)/dP = -(log P + 1) vanishes at P = 1/e.
        let tape = Tape::new();
        let p = tape.param(Tensor::scalar(std::f64::consts::E.recip()));
        let loss = entropy_loss(&p, EntropyMode::Paper).unwrap();
        loss.backward().unwrap();
        let g = p.grad().unwrap().data()[0];
        assert!(g.abs() < 1e-12, "gradient at 1/e: {g}");
    }

    #[test]
    fn entropy_loss_matches_scoring_path() {
        let net = tiny_net();
        let params = segnet::init_params(&net, 9).unwrap();
        let images: Vec<Tensor> = (0..3)
            .map(|s| generate_scene(s + 50, 16, 16).unwrap().image)
            .collect();
        // Average of per-image tape losses vs. the plain scoring path.
        let mut tape_mean = 0.0;
        for image in &images {
            let tape = Tape::new();
            let vars = stage_params(&tape, &params, false);
            let p = forward(&net, &vars, &tape, image).unwrap();
            tape_mean += entropy_loss(&p, EntropyMode::Paper).unwrap().item();
        }
        tape_mean /= images.len() as f64;
        let scored = mean_entropy(&net, &params, &images, EntropyMode::Paper).unwrap();
        assert!((tape_mean - scored).abs() <= 1e-12);
    }

    #[test]
    fn pseudo_label_threshold_is_inclusive() {
        let p = Tensor::new(vec![1, 1, 3], vec![0.9, 0.49, 0.5]).unwrap();
        let mask = metrics::binarize(&p, 0.5).unwrap();
        assert_eq!(mask.data(), &[1, 0, 1]);
        let all_half = Tensor::full(vec![1, 2, 2], 0.5);
        assert_eq!(metrics::binarize(&all_half, 0.5).unwrap().data(), &[1; 4]);
    }

    #[test]
    fn online_labels_move_with_the_model() {
        let net = tiny_net();
        let params = segnet::init_params(&net, 31).unwrap();
        let images: Vec<Tensor> = (0..2)
            .map(|s| generate_scene(s + 80, 16, 16).unwrap().image)
            .collect();
        let cfg = AdaptConfig {
            step2_epochs: 6,
            sgd: SgdConfig {
                lr: 3e-3,
                batch_size: 2,
                ..SgdConfig::default()
            },
            ..tiny_adapt()
        };
        let (_, stats) = step2_online_selftrain(params, &images, &net, &cfg).unwrap();
        assert!(stats.label_hashes.len() >= 2);
        assert_ne!(
            stats.label_hashes.first(),
            stats.label_hashes.last(),
            "online pseudo-labels never changed"
        );
    }

    #[test]
    fn iterative_baseline_freezes_labels_within_a_round() {
        let net = tiny_net();
        let params = segnet::init_params(&net, 31).unwrap();
        let images: Vec<Tensor> = (0..2)
            .map(|s| generate_scene(s + 80, 16, 16).unwrap().image)
            .collect();
        let cfg = AdaptConfig {
            step2_epochs: 6,
            iterative_rounds: 1,
            sgd: SgdConfig {
                lr: 3e-3,
                batch_size: 2,
                ..SgdConfig::default()
            },
            ..tiny_adapt()
        };
        let (_, stats) = iterative_selftrain_baseline(params, &images, &net, &cfg).unwrap();
        assert!(stats.label_hashes.len() >= 2);
        assert!(
            stats.label_hashes.windows(2).all(|w| w[0] == w[1]),
            "labels moved inside a frozen round"
        );
    }

    #[test]
    fn zero_budget_baseline_is_identity() {
        let net = tiny_net();
        let params = segnet::init_params(&net, 77).unwrap();
        let images = vec![generate_scene(123, 16, 16).unwrap().image];
        let cfg = AdaptConfig {
            step2_epochs: 0,
            iterative_rounds: 1,
            ..tiny_adapt()
        };
        let (after, stats) = iterative_selftrain_baseline(params.clone(), &images, &net, &cfg).unwrap();
        assert_eq!(after, params);
        assert!(stats.losses.is_empty());
    }

    #[test]
    fn curriculum_composes_steps_with_carry_over() {
        let net = tiny_net();
        let pretrained = segnet::init_params(&net, 5).unwrap();
        let scenes: Vec<Scene> = (0..4).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let cfg = tiny_adapt();
        let plan = CurriculumPlan {
            m: 2,
            batches: vec![vec![0, 1], vec![2, 3]],
        };
        let outcome =
            run_curriculum(&net, pretrained.clone(), &plan, &scenes, &cfg, SelfTraining::Online)
                .unwrap();
        let (final_params, snaps) = (outcome.final_params, outcome.snapshots);
        assert_eq!(snaps.len(), 2);
        assert_eq!(outcome.per_batch_params.len(), 2);
        assert_eq!(outcome.per_batch_params[1], final_params);

        // Manual composition: batch 0 then batch 1, threading the weights.
        let imgs0: Vec<Tensor> = vec![scenes[0].image.clone(), scenes[1].image.clone()];
        let imgs1: Vec<Tensor> = vec![scenes[2].image.clone(), scenes[3].image.clone()];
        let (p1, _) = step1_entropy_min(pretrained, &imgs0, &net, &cfg).unwrap();
        let (p2, _) = step2_online_selftrain(p1, &imgs0, &net, &cfg).unwrap();
        assert_eq!(params_hash(&p2), snaps[0].params_hash_after);
        let (p3, _) = step1_entropy_min(p2, &imgs1, &net, &cfg).unwrap();
        let (p4, _) = step2_online_selftrain(p3, &imgs1, &net, &cfg).unwrap();
        assert_eq!(p4, final_params);
        assert_eq!(params_hash(&p4), snaps[1].params_hash_after);
    }

    #[test]
    fn single_batch_plan_equals_direct_two_step() {
        let net = tiny_net();
        let pretrained = segnet::init_params(&net, 5).unwrap();
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        let cfg = tiny_adapt();
        let plan = CurriculumPlan {
            m: 1,
            batches: vec![vec![0, 1, 2]],
        };
        let via_plan =
            run_curriculum(&net, pretrained.clone(), &plan, &scenes, &cfg, SelfTraining::Online)
                .unwrap()
                .final_params;
        let images: Vec<Tensor> = scenes.iter().map(|s| s.image.clone()).collect();
        let (s1, _) = step1_entropy_min(pretrained, &images, &net, &cfg).unwrap();
        let (s2, _) = step2_online_selftrain(s1, &images, &net, &cfg).unwrap();
        assert_eq!(via_plan, s2);
    }

    #[test]
    fn adaptation_ignores_labels_entirely() {
        let net = tiny_net();
        let pretrained = segnet::init_params(&net, 5).unwrap();
        let scenes: Vec<Scene> = (0..4).map(|s| generate_scene(s, 16, 16).unwrap()).collect();
        // Poison every label.
        let poisoned: Vec<Scene> = scenes
            .iter()
            .map(|s| {
                let flipped: Vec<u8> = s.label.data().iter().map(|&v| 1 - v).collect();
                Scene {
                    label: BinaryMask::new(16, 16, flipped).unwrap(),
                    ..s.clone()
                }
            })
            .collect();
        let cfg = tiny_adapt();
        let plan = CurriculumPlan {
            m: 2,
            batches: vec![vec![0, 1], vec![2, 3]],
        };
        let clean_params =
            run_curriculum(&net, pretrained.clone(), &plan, &scenes, &cfg, SelfTraining::Online)
                .unwrap()
                .final_params;
        let poisoned_params =
            run_curriculum(&net, pretrained, &plan, &poisoned, &cfg, SelfTraining::Online)
                .unwrap()
                .final_params;
        assert_eq!(clean_params, poisoned_params);
        assert_eq!(params_hash(&clean_params), params_hash(&poisoned_params));
    }

    #[test]
    fn empty_plan_is_rejected() {
        let net = tiny_net();
        let pretrained = segnet::init_params(&net, 5).unwrap();
        let plan = CurriculumPlan {
            m: 1,
            batches: vec![],
        };
        assert!(run_curriculum(
            &net,
            pretrained,
            &plan,
            &[],
            &tiny_adapt(),
            SelfTraining::Online
        )
        .is_err());
    }
}
