//! Vanilla masking baselines: random and L1 (magnitude) masks.
//!
//! Both are pure functions of the fine-tuned checkpoint and a removal
//! fraction; neither involves training. They are applied to the same
//! upper-bound checkpoint and target layers as mask fine-tuning, never
//! retrained.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::MaskBits;
use crate::error::{Error, Result};
use crate::mask::{indicator, BinaryMask, IndicatorSpec, MaskKind};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    L1,
}

/// Recipe for one baseline mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Removed fraction, in (0, 1).
    pub k: f64,
    pub targets: Vec<String>,
    /// Only used by the random baseline.
    #[serde(default)]
    pub seed: u64,
}

impl BaselineSpec {
    fn validate(&self, params: &ModelParams) -> Result<()> {
        if !(self.k > 0.0 && self.k < 1.0) {
            return Err(Error::InvalidMaskSpec(format!("k must be in (0, 1), got {}", self.k)));
        }
        if self.targets.is_empty() {
            return Err(Error::EmptyTargets);
        }
        for t in &self.targets {
            params.get(t)?;
        }
        Ok(())
    }
}

/// Removes exactly `round(k * D)` uniformly chosen positions per target
/// tensor (without replacement).
pub fn random_mask(params: &ModelParams, spec: &BaselineSpec) -> Result<BinaryMask> {
    if spec.kind != BaselineKind::Random {
        return Err(Error::InvalidMaskSpec("spec kind must be random".into()));
    }
    spec.validate(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut bits = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for path in &spec.targets {
        let theta = params.get(path)?;
        let d = theta.numel();
        let remove = (spec.k * d as f64).round() as usize;
        let mut b = MaskBits::ones(d);
        for i in rand::seq::index::sample(&mut rng, d, remove) {
            b.set(i, false);
        }
        bits.insert(path.clone(), b);
        shapes.insert(path.clone(), theta.shape().to_vec());
    }
    Ok(BinaryMask::new(
        spec.targets.clone(),
        bits,
        shapes,
        MaskKind::Random { k: spec.k },
        Some(spec.seed),
    ))
}

/// Removes the `round(k * D)` smallest-magnitude weights per target tensor;
/// ties keep the lower flat index.
pub fn l1_mask(params: &ModelParams, spec: &BaselineSpec) -> Result<BinaryMask> {
    if spec.kind != BaselineKind::L1 {
        return Err(Error::InvalidMaskSpec("spec kind must be l1".into()));
    }
    spec.validate(params)?;
    let mut bits = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for path in &spec.targets {
        let theta = params.get(path)?;
        let magnitudes: Vec<f64> = theta.data().iter().map(|v| v.abs()).collect();
        bits.insert(path.clone(), indicator(&magnitudes, IndicatorSpec::Ratio { k: spec.k }));
        shapes.insert(path.clone(), theta.shape().to_vec());
    }
    Ok(BinaryMask::new(
        spec.targets.clone(),
        bits,
        shapes,
        MaskKind::L1 { k: spec.k },
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{init_scores, ScoreInit};
    use crate::model::TransformerConfig;

    fn toy() -> (ModelParams, Vec<String>) {
        let cfg = TransformerConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 256,
            max_seq_len: 16,
        };
        let params = ModelParams::init(&cfg, 5).unwrap();
        let targets = params.maskable_paths(0..2).unwrap();
        (params, targets)
    }

    #[test]
    fn random_mask_exact_count_and_seeding() {
        let (params, targets) = toy();
        let spec = BaselineSpec { kind: BaselineKind::Random, k: 0.1, targets, seed: 3 };
        let m1 = random_mask(&params, &spec).unwrap();
        let m2 = random_mask(&params, &spec).unwrap();
        assert_eq!(m1, m2);
        for path in m1.targets() {
            let d = params.get(path).unwrap().numel();
            assert_eq!(m1.bits(path).unwrap().zeros_count(), (0.1 * d as f64).round() as usize);
        }
        let other = random_mask(&params, &BaselineSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(m1, other);
    }

    #[test]
    fn random_mask_keep_probability_monte_carlo() {
        let (params, _) = toy();
        let targets = vec!["layer.0.attn.q".to_string()];
        let d = params.get(&targets[0]).unwrap().numel();
        let mut keep_total = 0usize;
        let n_seeds = 100;
        for seed in 0..n_seeds {
            let spec = BaselineSpec { kind: BaselineKind::Random, k: 0.1, targets: clone_targets(&targets), seed };
            let m = random_mask(&params, &spec).unwrap();
            keep_total += m.bits(&targets[0]).unwrap().popcount();
        }
        let mean_keep = keep_total as f64 / (n_seeds as usize * d) as f64;
        assert!((mean_keep - 0.9).abs() < 0.02, "mean keep prob {mean_keep}");
    }

    fn clone_targets(t: &[String]) -> Vec<String> {
        t.to_vec()
    }

    #[test]
    fn l1_mask_hand_example() {
        // theta = [5, -0.1, 3, 0.2], k = 0.25 -> remove the smallest |.|
        let magnitudes = [5.0, 0.1, 3.0, 0.2].map(|v: f64| v.abs());
        let bits = indicator(&magnitudes, IndicatorSpec::Ratio { k: 0.25 });
        let v: Vec<bool> = bits.iter().collect();
        assert_eq!(v, [true, false, true, true]);
    }

    #[test]
    fn l1_mask_sign_invariant() {
        let (params, targets) = toy();
        let spec = BaselineSpec { kind: BaselineKind::L1, k: 0.2, targets: targets.clone(), seed: 0 };
        let m1 = l1_mask(&params, &spec).unwrap();

        let mut flipped = params.clone();
        for path in &targets {
            let t = flipped.get(path).unwrap();
            let neg: Vec<f64> = t.data().iter().map(|v| -v).collect();
            let nt = t.with_data(neg).unwrap();
            flipped.set(path, nt).unwrap();
        }
        let m2 = l1_mask(&flipped, &spec).unwrap();
        for path in &targets {
            assert_eq!(m1.bits(path).unwrap(), m2.bits(path).unwrap());
        }
    }

    #[test]
    fn l1_equals_magnitude_scores_through_indicator() {
        let (params, targets) = toy();
        let k = 0.25;
        let spec = BaselineSpec { kind: BaselineKind::L1, k, targets: targets.clone(), seed: 0 };
        let direct = l1_mask(&params, &spec).unwrap();
        let via_scores = init_scores(
            &params,
            &targets,
            IndicatorSpec::Ratio { k },
            ScoreInit::WeightMagnitude,
            0,
        )
        .unwrap()
        .apply_indicator()
        .unwrap();
        for path in &targets {
            assert_eq!(direct.bits(path).unwrap(), via_scores.bits(path).unwrap());
        }
    }
}
