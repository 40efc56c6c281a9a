//! Entropy scoring and ordered mini-batch planning.
//!
//! Target images are scored by the mean per-pixel entropy of the model's
//! road-probability map, sorted ascending, and split into `m` near-equal
//! mini-batches that are then adapted in order, easiest first. When a
//! dataset already carries severity labels, a plan can be built from those
//! groups directly instead.
//!
//! Two entropy readings are supported: `Paper` uses the single-term
//! `-P log P`; `Binary` uses the full two-sided binary entropy. Scores are
//! per-pixel means so they are invariant to image size.

use serde::{Deserialize, Serialize};

use crate::autograd::PROB_EPS;
use crate::error::{Error, Result};
use crate::segnet::{self, ModelParams, NetConfig};
use crate::tensor::Tensor;
use crate::weather::Scene;

/// Which per-pixel entropy expression to score with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EntropyMode {
    /// Single-term `-P log P`.
    #[default]
    Paper,
    /// Full binary entropy `-[P log P + (1-P) log(1-P)]`.
    Binary,
}

/// Per-image difficulty score in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyScore {
    pub scene_id: usize,
    pub score: f64,
}

/// Entropy-ordered partition of a scene set into `m` mini-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    pub m: usize,
    /// Ordered batches of scene ids; earlier batches have lower entropy.
    pub batches: Vec<Vec<usize>>,
}

impl CurriculumPlan {
    pub fn scene_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// Mean per-pixel prediction entropy of a probability map (natural log).
/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` first.
pub fn prediction_entropy(p: &Tensor, mode: EntropyMode) -> f64 {
    let mut acc = 0.0;
    for &raw in p.data() {
        let v = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        acc += match mode {
            EntropyMode::Paper => -v * v.ln(),
            EntropyMode::Binary => -(v * v.ln() + (1.0 - v) * (1.0 - v).ln()),
        };
    }
    acc / p.len() as f64
}

/// Score every scene with the model's prediction entropy; deterministic,
/// one score per scene in input order.
pub fn score_dataset(
    cfg: &NetConfig,
    params: &ModelParams,
    scenes: &[Scene],
    mode: EntropyMode,
) -> Result<Vec<EntropyScore>> {
    scenes
        .iter()
        .enumerate()
        .map(|(scene_id, scene)| {
            let p = segnet::predict(cfg, params, &scene.image)?;
            Ok(EntropyScore {
                scene_id,
                score: prediction_entropy(&p, mode),
            })
        })
        .collect()
}

/// Sort ascending by (score, scene id) and split into `m` contiguous
/// batches of near-equal size, larger batches first.
pub fn sort_and_partition(scores: &[EntropyScore], m: usize) -> Result<CurriculumPlan> {
    let n = scores.len();
    if m == 0 {
        return Err(Error::InvalidInput("m must be at least 1".into()));
    }
    if m > n {
        return Err(Error::InvalidInput(format!(
            "m = {m} exceeds the number of scenes ({n})"
        )));
    }
    let mut order: Vec<&EntropyScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then_with(|| a.scene_id.cmp(&b.scene_id))
    });
    let big = n / m + usize::from(n % m != 0);
    let small = n / m;
    let n_big = if n % m == 0 { m } else { n % m };
    let mut batches = Vec::with_capacity(m);
    let mut cursor = 0;
    for i in 0..m {
        let size = if i < n_big { big } else { small };
        batches.push(
            order[cursor..cursor + size]
                .iter()
                .map(|s| s.scene_id)
                .collect(),
        );
        cursor += size;
    }
    Ok(CurriculumPlan { m, batches })
}

/// Adopt an explicit severity-ordered grouping as the plan. Groups must be
/// non-empty and mutually disjoint.
pub fn plan_from_severity_labels(groups: &[Vec<usize>]) -> Result<CurriculumPlan> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("no groups given".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (i, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::InvalidInput(format!("group {i} is empty")));
        }
        for &id in group {
            if !seen.insert(id) {
                return Err(Error::InvalidInput(format!(
                    "scene {id} appears in more than one group"
                )));
            }
        }
    }
    Ok(CurriculumPlan {
        m: groups.len(),
        batches: groups.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores_of(values: &[f64]) -> Vec<EntropyScore> {
        values
            .iter()
            .enumerate()
            .map(|(scene_id, &score)| EntropyScore { scene_id, score })
            .collect()
    }

    #[test]
    fn entropy_closed_forms() {
        let confident = Tensor::full(vec![1, 4, 4], 1.0 - 1e-7);
        assert!(prediction_entropy(&confident, EntropyMode::Paper) <= 2e-6);
        assert!(prediction_entropy(&confident, EntropyMode::Binary) <= 2e-6);

        let half = Tensor::full(vec![1, 4, 4], 0.5);
        let paper = prediction_entropy(&half, EntropyMode::Paper);
        assert!((paper - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
        let binary = prediction_entropy(&half, EntropyMode::Binary);
        assert!((binary - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_matches_double_loop_oracle() {
        let mut rng = crate::rng::stream(77, "entropy-oracle");
        use rand::Rng;
        let (h, w) = (5, 7);
        let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.01..0.99)).collect();
        let p = Tensor::new(vec![1, h, w], data.clone()).unwrap();
        let mut oracle = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v: f64 = data[y * w + x].clamp(PROB_EPS, 1.0 - PROB_EPS);
                oracle += -v * v.ln();
            }
        }
        oracle /= (h * w) as f64;
        let got = prediction_entropy(&p, EntropyMode::Paper);
        assert!((got - oracle).abs() <= 1e-12);
    }

    #[test]
    fn partition_sizes_follow_split_rule() {
        let plan = sort_and_partition(&scores_of(&[0.1, 0.9, 0.3, 0.2, 0.8, 0.7, 0.4, 0.5, 0.6, 0.05]), 4).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn single_batch_is_score_order() {
        let plan = sort_and_partition(&scores_of(&[0.5, 0.1, 0.3]), 1).unwrap();
        assert_eq!(plan.batches, vec![vec![1, 2, 0]]);
    }

    #[test]
    fn order_respected_and_ties_break_by_id() {
        let plan = sort_and_partition(&scores_of(&[0.2, 0.2, 0.1, 0.2]), 2).unwrap();
        assert_eq!(plan.batches, vec![vec![2, 0], vec![1, 3]]);
        // Max score of batch i never exceeds min score of batch i+1.
        let scores = scores_of(&[0.2, 0.2, 0.1, 0.2]);
        for pair in plan.batches.windows(2) {
            let max_prev = pair[0]
                .iter()
                .map(|&id| scores[id].score)
                .fold(f64::MIN, f64::max);
            let min_next = pair[1]
                .iter()
                .map(|&id| scores[id].score)
                .fold(f64::MAX, f64::min);
            assert!(max_prev <= min_next);
        }
    }

    #[test]
    fn m_larger_than_n_is_rejected() {
        assert!(sort_and_partition(&scores_of(&[0.1, 0.2]), 3).is_err());
        assert!(sort_and_partition(&scores_of(&[0.1, 0.2]), 0).is_err());
    }

    #[test]
    fn scaling_scores_leaves_plan_unchanged() {
        let base = scores_of(&[0.4, 0.1, 0.7, 0.2, 0.9, 0.3]);
        let scaled: Vec<EntropyScore> = base
            .iter()
            .map(|s| EntropyScore {
                scene_id: s.scene_id,
                score: s.score * 17.0,
            })
            .collect();
        assert_eq!(
            sort_and_partition(&base, 3).unwrap(),
            sort_and_partition(&scaled, 3).unwrap()
        );
    }

    #[test]
    fn severity_plan_adopts_groups_verbatim() {
        let plan =
            plan_from_severity_labels(&[vec![3, 1], vec![0, 2]]).unwrap();
        assert_eq!(plan.m, 2);
        assert_eq!(plan.batches, vec![vec![3, 1], vec![0, 2]]);
        assert!(plan_from_severity_labels(&[vec![], vec![1]]).is_err());
        assert!(plan_from_severity_labels(&[vec![1, 2], vec![2]]).is_err());
    }

    #[test]
    fn severity_singletons_match_sorted_partition() {
        // Severity-sorted singleton ladders equal the entropy sort when the
        // scores increase with severity.
        let scores = scores_of(&[0.1, 0.2, 0.3, 0.4]);
        let from_sort = sort_and_partition(&scores, 4).unwrap();
        let from_labels =
            plan_from_severity_labels(&[vec![0], vec![1], vec![2], vec![3]]).unwrap();
        assert_eq!(from_sort, from_labels);
    }

    #[test]
    fn duplicate_scenes_receive_identical_scores() {
        let cfg = NetConfig {
            width: 16,
            height: 16,
            channels: vec![4, 8],
            downsamplings: 2,
            attention: true,
            reduction: 8,
        };
        let params = segnet::init_params(&cfg, 5).unwrap();
        let scene = crate::weather::generate_scene(2, 16, 16).unwrap();
        let scores =
            score_dataset(&cfg, &params, &[scene.clone(), scene], EntropyMode::Paper).unwrap();
        assert_eq!(scores[0].score, scores[1].score);
        assert!(scores.iter().all(|s| s.score >= 0.0 && s.score.is_finite()));
    }
}
