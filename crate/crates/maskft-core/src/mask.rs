//! Learnable binary masks over frozen weights.
//!
//! Each targeted weight tensor gets a same-shaped score tensor `c`. An
//! indicator turns scores into a binary mask: ratio mode removes the
//! `round(K * D)` lowest-scoring entries per tensor (K is the removed
//! fraction), threshold mode keeps entries with `c > T`. The indicator is
//! non-differentiable, so training treats it as the identity on the way
//! back: the score gradient is `upstream_grad * theta` at every position,
//! masked or kept (see [`Tape::ste_mask`]).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bits::MaskBits;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Score-to-mask rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum IndicatorSpec {
    /// Remove the `round(k * D)` lowest-scoring entries of each tensor.
    Ratio { k: f64 },
    /// Keep entries with score strictly above `t`.
    Threshold { t: f64 },
}

impl IndicatorSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            IndicatorSpec::Ratio { k } => {
                if !(k > 0.0 && k < 1.0) {
                    return Err(Error::InvalidMaskSpec(format!("ratio k must be in (0, 1), got {k}")));
                }
            }
            IndicatorSpec::Threshold { t } => {
                if !t.is_finite() {
                    return Err(Error::InvalidMaskSpec(format!("threshold t must be finite, got {t}")));
                }
            }
        }
        Ok(())
    }
}

/// Score initialization strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreInit {
    /// `c = |theta|`: the initial mask equals magnitude pruning.
    WeightMagnitude,
    /// `c ~ U(-0.01, 0.01)`, seeded.
    UniformRandom,
    /// All zeros; only valid in threshold mode (with negative thresholds
    /// the initial mask keeps everything, matching the unmasked model).
    Zeros,
}

/// Learnable mask state: scores, indicator spec, and provenance.
#[derive(Debug, Clone)]
pub struct MaskState {
    targets: Vec<String>,
    scores: BTreeMap<String, Tensor>,
    spec: IndicatorSpec,
    init: ScoreInit,
    seed: u64,
}

/// Builds score tensors for `targets` (paths into `params`).
pub fn init_scores(
    params: &ModelParams,
    targets: &[String],
    spec: IndicatorSpec,
    init: ScoreInit,
    seed: u64,
) -> Result<MaskState> {
    spec.validate()?;
    if targets.is_empty() {
        return Err(Error::EmptyTargets);
    }
    if init == ScoreInit::Zeros && matches!(spec, IndicatorSpec::Ratio { .. }) {
        return Err(Error::InvalidMaskSpec(
            "zeros init with ratio mode is degenerate (all scores tie)".into(),
        ));
    }
    let mut seen = std::collections::BTreeSet::new();
    for path in targets {
        if !seen.insert(path) {
            return Err(Error::InvalidMaskSpec(format!("duplicate target '{path}'")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = BTreeMap::new();
    for path in targets {
        let theta = params.get(path)?;
        let data: Vec<f64> = match init {
            ScoreInit::WeightMagnitude => theta.data().iter().map(|v| v.abs()).collect(),
            ScoreInit::UniformRandom => {
                (0..theta.numel()).map(|_| rng.gen_range(-0.01..0.01)).collect()
            }
            ScoreInit::Zeros => vec![0.0; theta.numel()],
        };
        scores.insert(path.clone(), Tensor::from_vec(data, theta.shape())?);
    }
    Ok(MaskState { targets: targets.to_vec(), scores, spec, init, seed })
}

impl MaskState {
    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn spec(&self) -> IndicatorSpec {
        self.spec
    }

    pub fn init(&self) -> ScoreInit {
        self.init
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scores(&self, path: &str) -> Result<&Tensor> {
        self.scores.get(path).ok_or_else(|| Error::UnknownPath { path: path.to_string() })
    }

    /// Replaces one score tensor (optimizer step).
    pub fn set_scores(&mut self, path: &str, t: Tensor) -> Result<()> {
        let old = self.scores(path)?;
        if old.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_scores",
                lhs: old.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.scores.insert(path.to_string(), t);
        Ok(())
    }

    /// Indicator output for one target tensor.
    pub fn indicator_bits(&self, path: &str) -> Result<MaskBits> {
        Ok(indicator(self.scores(path)?.data(), self.spec))
    }

    /// Indicator output for every target: the current binary mask.
    pub fn apply_indicator(&self) -> Result<BinaryMask> {
        let mut bits = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for path in &self.targets {
            let s = self.scores(path)?;
            bits.insert(path.clone(), indicator(s.data(), self.spec));
            shapes.insert(path.clone(), s.shape().to_vec());
        }
        Ok(BinaryMask {
            targets: self.targets.clone(),
            bits,
            shapes,
            kind: MaskKind::Learned { spec: self.spec, init: self.init },
            seed: Some(self.seed),
        })
    }
}

/// Score-indexed selection. Ratio mode removes the `round(k*D)` lowest
/// scores; among equal scores at the cut, the lower flat index is kept.
pub fn indicator(scores: &[f64], spec: IndicatorSpec) -> MaskBits {
    match spec {
        IndicatorSpec::Threshold { t } => {
            let mut bits = MaskBits::zeros(scores.len());
            for (i, &c) in scores.iter().enumerate() {
                if c > t {
                    bits.set(i, true);
                }
            }
            bits
        }
        IndicatorSpec::Ratio { k } => {
            let d = scores.len();
            let remove = (k * d as f64).round() as usize;
            let mut order: Vec<usize> = (0..d).collect();
            // ascending score; ties broken so higher indices are removed first
            order.sort_unstable_by(|&a, &b| {
                scores[a].total_cmp(&scores[b]).then(b.cmp(&a))
            });
            let mut bits = MaskBits::ones(d);
            for &i in order.iter().take(remove) {
                bits.set(i, false);
            }
            bits
        }
    }
}

/// Straight-through score gradient: `grad(c) = upstream ⊙ theta`, the exact
/// derivative of the masked linear map with the indicator replaced by the
/// identity. Flows to every position, masked or kept.
pub fn ste_score_grad(upstream: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != theta.len() {
        return Err(Error::ShapeMismatch {
            op: "ste_score_grad",
            lhs: vec![upstream.len()],
            rhs: vec![theta.len()],
        });
    }
    Ok(upstream.iter().zip(theta).map(|(g, t)| g * t).collect())
}

/// Records `input @ (theta * mask)` onto the tape with the straight-through
/// backward path into a fresh score leaf. `theta` must be frozen.
pub fn masked_linear_forward(
    tape: &mut Tape,
    input: Var,
    theta: &Tensor,
    scores: &Tensor,
    bits: &MaskBits,
) -> Result<Var> {
    if theta.requires_grad() {
        return Err(Error::InvalidMaskSpec(
            "masked_linear_forward: theta must be frozen".into(),
        ));
    }
    if theta.shape() != scores.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_linear_forward",
            lhs: theta.shape().to_vec(),
            rhs: scores.shape().to_vec(),
        });
    }
    let theta_leaf = tape.leaf(theta);
    let score_leaf = tape.leaf(&scores.clone().with_requires_grad(true));
    let eff = tape.ste_mask(theta_leaf, score_leaf, bits)?;
    tape.matmul(input, eff)
}

/// Provenance of a binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskKind {
    Learned { spec: IndicatorSpec, init: ScoreInit },
    Random { k: f64 },
    L1 { k: f64 },
}

/// Immutable per-path bitsets, 1 = keep, 0 = masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    targets: Vec<String>,
    bits: BTreeMap<String, MaskBits>,
    shapes: BTreeMap<String, Vec<usize>>,
    kind: MaskKind,
    seed: Option<u64>,
}

impl BinaryMask {
    pub fn new(
        targets: Vec<String>,
        bits: BTreeMap<String, MaskBits>,
        shapes: BTreeMap<String, Vec<usize>>,
        kind: MaskKind,
        seed: Option<u64>,
    ) -> Self {
        BinaryMask { targets, bits, shapes, kind, seed }
    }

    /// All-keep mask over `targets`.
    pub fn all_keep(params: &ModelParams, targets: &[String]) -> Result<Self> {
        let mut bits = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for path in targets {
            let t = params.get(path)?;
            bits.insert(path.clone(), MaskBits::ones(t.numel()));
            shapes.insert(path.clone(), t.shape().to_vec());
        }
        Ok(BinaryMask {
            targets: targets.to_vec(),
            bits,
            shapes,
            kind: MaskKind::Learned {
                spec: IndicatorSpec::Threshold { t: -1.0 },
                init: ScoreInit::Zeros,
            },
            seed: None,
        })
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn kind(&self) -> &MaskKind {
        &self.kind
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn bits(&self, path: &str) -> Result<&MaskBits> {
        self.bits.get(path).ok_or_else(|| Error::UnknownPath { path: path.to_string() })
    }

    pub fn shape(&self, path: &str) -> Result<&[usize]> {
        self.shapes
            .get(path)
            .map(|s| s.as_slice())
            .ok_or_else(|| Error::UnknownPath { path: path.to_string() })
    }

    /// Masked-out entries across all targets.
    pub fn total_zeros(&self) -> usize {
        self.bits.values().map(|b| b.zeros_count()).sum()
    }

    pub fn total_len(&self) -> usize {
        self.bits.values().map(|b| b.len()).sum()
    }

    // ── file format ──────────────────────────────────────────────────
    //
    // magic "MFTMASK1" | u32 LE header length | header JSON |
    // per-target bitset blobs (LSB-first, byte-padded) in header order.

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries = Vec::new();
        for t in &self.targets {
            entries.push(MaskFileEntry {
                path: t.clone(),
                shape: self.shapes[t].clone(),
                popcount: self.bits[t].popcount() as u64,
            });
        }
        let header = MaskFileHeader {
            version: MASK_FILE_VERSION,
            kind: self.kind.clone(),
            seed: self.seed,
            targets: entries,
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MASK_MAGIC)?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for t in &self.targets {
            f.write_all(self.bits[t].as_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        Self::from_file_bytes(&buf)
    }

    pub fn from_file_bytes(buf: &[u8]) -> Result<Self> {
        let corrupt = |offset: u64, reason: String| Error::CorruptFile { kind: "mask", offset, reason };
        if buf.len() < 12 || &buf[..8] != MASK_MAGIC {
            return Err(corrupt(0, "bad magic".into()));
        }
        let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let body_start = 12 + header_len;
        if buf.len() < body_start {
            return Err(corrupt(8, format!("header length {header_len} exceeds file size")));
        }
        let header: MaskFileHeader = serde_json::from_slice(&buf[12..body_start])
            .map_err(|e| corrupt(12, format!("header: {e}")))?;
        if header.version != MASK_FILE_VERSION {
            return Err(corrupt(12, format!("unsupported version {}", header.version)));
        }
        let mut bits = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        let mut targets = Vec::new();
        let mut offset = body_start;
        for entry in &header.targets {
            let numel: usize = entry.shape.iter().product();
            let nbytes = numel.div_ceil(8);
            if buf.len() < offset + nbytes {
                return Err(corrupt(
                    offset as u64,
                    format!("bitset for '{}' truncated ({nbytes} bytes expected)", entry.path),
                ));
            }
            let b = MaskBits::from_bytes(numel, buf[offset..offset + nbytes].to_vec())
                .ok_or_else(|| corrupt(offset as u64, format!("dirty padding bits in '{}'", entry.path)))?;
            if b.popcount() as u64 != entry.popcount {
                return Err(corrupt(
                    offset as u64,
                    format!(
                        "popcount mismatch for '{}': header says {}, bitset has {}",
                        entry.path,
                        entry.popcount,
                        b.popcount()
                    ),
                ));
            }
            targets.push(entry.path.clone());
            bits.insert(entry.path.clone(), b);
            shapes.insert(entry.path.clone(), entry.shape.clone());
            offset += nbytes;
        }
        if offset != buf.len() {
            return Err(corrupt(offset as u64, "trailing bytes after last bitset".into()));
        }
        Ok(BinaryMask { targets, bits, shapes, kind: header.kind, seed: header.seed })
    }
}

const MASK_MAGIC: &[u8; 8] = b"MFTMASK1";
const MASK_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MaskFileHeader {
    version: u32,
    kind: MaskKind,
    seed: Option<u64>,
    targets: Vec<MaskFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct MaskFileEntry {
    path: String,
    shape: Vec<usize>,
    popcount: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;

    fn toy_params() -> ModelParams {
        let cfg = TransformerConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 256,
            max_seq_len: 16,
        };
        ModelParams::init(&cfg, 11).unwrap()
    }

    #[test]
    fn weight_magnitude_init_is_abs() {
        let params = toy_params();
        let targets = vec!["layer.0.attn.q".to_string()];
        let state = init_scores(
            &params,
            &targets,
            IndicatorSpec::Ratio { k: 0.25 },
            ScoreInit::WeightMagnitude,
            0,
        )
        .unwrap();
        let theta = params.get("layer.0.attn.q").unwrap();
        let c = state.scores("layer.0.attn.q").unwrap();
        assert!(theta.data().iter().zip(c.data()).all(|(t, c)| *c == t.abs()));
    }

    #[test]
    fn zeros_init_ratio_mode_rejected() {
        let params = toy_params();
        let targets = vec!["layer.0.attn.q".to_string()];
        let err = init_scores(&params, &targets, IndicatorSpec::Ratio { k: 0.1 }, ScoreInit::Zeros, 0);
        assert!(err.is_err());
    }

    #[test]
    fn zeros_init_threshold_is_all_keep() {
        let params = toy_params();
        let targets = params.maskable_paths(0..2).unwrap();
        let state = init_scores(
            &params,
            &targets,
            IndicatorSpec::Threshold { t: -0.035 },
            ScoreInit::Zeros,
            0,
        )
        .unwrap();
        let mask = state.apply_indicator().unwrap();
        assert_eq!(mask.total_zeros(), 0);
    }

    #[test]
    fn same_seed_same_scores() {
        let params = toy_params();
        let targets = params.maskable_paths(0..1).unwrap();
        let mk = |seed| {
            init_scores(&params, &targets, IndicatorSpec::Ratio { k: 0.1 }, ScoreInit::UniformRandom, seed)
                .unwrap()
        };
        let (a, b, c) = (mk(7), mk(7), mk(8));
        for path in &targets {
            assert!(a.scores(path).unwrap().bit_eq(b.scores(path).unwrap()));
        }
        assert!(targets.iter().any(|p| !a.scores(p).unwrap().bit_eq(c.scores(p).unwrap())));
    }

    #[test]
    fn ratio_indicator_removes_lowest() {
        let bits = indicator(&[3.0, 1.0, 2.0, 0.0], IndicatorSpec::Ratio { k: 0.25 });
        let v: Vec<bool> = bits.iter().collect();
        assert_eq!(v, [true, true, true, false]);
    }

    #[test]
    fn threshold_indicator_example() {
        let bits = indicator(&[0.1, -0.05, 0.0], IndicatorSpec::Threshold { t: -0.035 });
        let v: Vec<bool> = bits.iter().collect();
        assert_eq!(v, [true, false, true]);
    }

    #[test]
    fn ratio_exact_count_thousand() {
        let scores: Vec<f64> = (0..1000).map(|i| ((i * 2654435761u64 as usize) % 997) as f64).collect();
        let bits = indicator(&scores, IndicatorSpec::Ratio { k: 0.1 });
        assert_eq!(bits.zeros_count(), 100);
    }

    #[test]
    fn tie_break_keeps_lower_index() {
        let bits = indicator(&[1.0, 1.0, 1.0, 1.0], IndicatorSpec::Ratio { k: 0.5 });
        let v: Vec<bool> = bits.iter().collect();
        assert_eq!(v, [true, true, false, false]);
    }

    #[test]
    fn ste_score_grad_examples() {
        // masked position still receives gradient
        assert_eq!(ste_score_grad(&[0.5], &[2.0]).unwrap(), vec![1.0]);
        // zero weight kills the gradient regardless of upstream
        assert_eq!(ste_score_grad(&[123.0], &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn masked_linear_hand_example() {
        let mut tape = Tape::new();
        let input = tape.constant(vec![1.0, 1.0], &[1, 2]).unwrap();
        let theta = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let scores = Tensor::from_vec(vec![1.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let bits = indicator(scores.data(), IndicatorSpec::Threshold { t: 0.5 });
        let out = masked_linear_forward(&mut tape, input, &theta, &scores, &bits).unwrap();
        assert_eq!(tape.value(out), &[4.0, 4.0]);
    }

    #[test]
    fn mask_file_roundtrip() {
        let params = toy_params();
        let targets = params.maskable_paths(0..2).unwrap();
        let state = init_scores(
            &params,
            &targets,
            IndicatorSpec::Ratio { k: 0.25 },
            ScoreInit::WeightMagnitude,
            3,
        )
        .unwrap();
        let mask = state.apply_indicator().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.mask");
        mask.save(&file).unwrap();
        let loaded = BinaryMask::load(&file).unwrap();
        assert_eq!(mask, loaded);
    }

    #[test]
    fn corrupt_magic_rejected_with_offset() {
        let params = toy_params();
        let targets = params.maskable_paths(0..1).unwrap();
        let mask = BinaryMask::all_keep(&params, &targets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.mask");
        mask.save(&file).unwrap();
        let mut bytes = std::fs::read(&file).unwrap();
        bytes[0] = b'X';
        match BinaryMask::from_file_bytes(&bytes) {
            Err(Error::CorruptFile { offset: 0, .. }) => {}
            other => panic!("expected corrupt-magic error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_bitset_rejected() {
        let params = toy_params();
        let targets = params.maskable_paths(0..1).unwrap();
        let mask = BinaryMask::all_keep(&params, &targets).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("m.mask");
        mask.save(&file).unwrap();
        let bytes = std::fs::read(&file).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            BinaryMask::from_file_bytes(truncated),
            Err(Error::CorruptFile { .. })
        ));
    }
}
