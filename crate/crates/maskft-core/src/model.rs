//! Byte-level decoder-only transformer.
//!
//! Pre-norm blocks: `x += attn(rms_norm(x))`, `x += mlp(rms_norm(x))`,
//! with RMS-normalized output feeding a linear LM head. Positions use a
//! learned embedding table; attention is causal. The six linear weights of
//! each block (attn q/k/v/o, mlp up/down) are the maskable set; embeddings,
//! the LM head, and norm gains are never masked.
//!
//! Parameter paths follow a fixed naming scheme:
//!
//! ```text
//! embed                      [vocab, d_model]
//! pos_embed                  [max_seq_len, d_model]
//! layer.{i}.attn.norm        [d_model]
//! layer.{i}.attn.{q,k,v,o}   [d_model, d_model]
//! layer.{i}.mlp.norm         [d_model]
//! layer.{i}.mlp.up           [d_model, d_ff]
//! layer.{i}.mlp.down         [d_ff, d_model]
//! final_norm                 [d_model]
//! lm_head                    [d_model, vocab]
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskState};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        // Desk-scale default: deep enough for two 4-layer groups.
        TransformerConfig {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            max_seq_len: 128,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Named parameter set. Iteration order is the sorted path order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: TransformerConfig,
    tensors: BTreeMap<String, Tensor>,
}

/// The six maskable sublayers of a block, in canonical order.
pub const MASKABLE_SUBLAYERS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down"];

impl ModelParams {
    /// Seeded random initialization (normal, std 0.02; norm gains at 1).
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut tensors = BTreeMap::new();
        let put = |map: &mut BTreeMap<String, Tensor>, path: &str, t: Tensor| {
            map.insert(path.to_string(), t.with_requires_grad(true));
        };
        put(&mut tensors, "embed", Tensor::randn(&mut rng, &[config.vocab_size, d], 0.02));
        put(&mut tensors, "pos_embed", Tensor::randn(&mut rng, &[config.max_seq_len, d], 0.02));
        for i in 0..config.n_layers {
            put(&mut tensors, &format!("layer.{i}.attn.norm"), Tensor::full(&[d], 1.0)?);
            for p in ["q", "k", "v", "o"] {
                put(&mut tensors, &format!("layer.{i}.attn.{p}"), Tensor::randn(&mut rng, &[d, d], 0.02));
            }
            put(&mut tensors, &format!("layer.{i}.mlp.norm"), Tensor::full(&[d], 1.0)?);
            put(&mut tensors, &format!("layer.{i}.mlp.up"), Tensor::randn(&mut rng, &[d, config.d_ff], 0.02));
            put(&mut tensors, &format!("layer.{i}.mlp.down"), Tensor::randn(&mut rng, &[config.d_ff, d], 0.02));
        }
        put(&mut tensors, "final_norm", Tensor::full(&[d], 1.0)?);
        put(&mut tensors, "lm_head", Tensor::randn(&mut rng, &[d, config.vocab_size], 0.02));
        Ok(ModelParams { config: config.clone(), tensors })
    }

    pub fn from_tensors(config: TransformerConfig, tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { config, tensors }
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors.get(path).ok_or_else(|| Error::UnknownPath { path: path.to_string() })
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    /// Replaces one tensor, keeping its shape contract.
    pub fn set(&mut self, path: &str, t: Tensor) -> Result<()> {
        let old = self.get(path)?;
        if old.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ModelParams::set",
                lhs: old.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.tensors.insert(path.to_string(), t);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// True when `path` names one of the six maskable linears of a block.
    pub fn is_maskable(path: &str) -> bool {
        let Some(rest) = path.strip_prefix("layer.") else { return false };
        let Some((_, sub)) = rest.split_once('.') else { return false };
        MASKABLE_SUBLAYERS.contains(&sub)
    }

    /// Canonical maskable paths for layers in `range`, shallow-first.
    pub fn maskable_paths(&self, range: std::ops::Range<usize>) -> Result<Vec<String>> {
        if range.end > self.config.n_layers || range.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "layer range {range:?} out of bounds for {} layers",
                self.config.n_layers
            )));
        }
        Ok(range
            .flat_map(|i| MASKABLE_SUBLAYERS.iter().map(move |s| format!("layer.{i}.{s}")))
            .collect())
    }

    /// Bitwise equality over every tensor.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((pa, ta), (pb, tb))| pa == pb && ta.bit_eq(tb))
    }

    /// Copy with every tensor detached (no gradient tracking).
    pub fn frozen(&self) -> ModelParams {
        let tensors = self.tensors.iter().map(|(p, t)| (p.clone(), t.detached())).collect();
        ModelParams { config: self.config.clone(), tensors }
    }
}

/// A token sequence tagged with its source domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub source: String,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>, source: impl Into<String>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::SequenceTooShort { len: 0, min: 1 });
        }
        for &id in &ids {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { op: "TokenStream", id, vocab: vocab_size });
            }
        }
        Ok(TokenStream { ids: ids.clone(), source: source.into() })
    }

    pub fn from_bytes(bytes: &[u8], source: impl Into<String>) -> Result<Self> {
        Self::new(bytes.iter().map(|&b| b as u32).collect(), source, 256)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// How targeted linear weights are replaced during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MaskOverlay<'a> {
    /// Learnable scores: each targeted weight becomes
    /// `theta (frozen) * indicator(scores)` with a straight-through backward
    /// path into the scores.
    Scores(&'a MaskState),
    /// A fixed binary mask applied to the targeted weights; no score
    /// gradients, used for evaluating extracted or baseline masks.
    Fixed(&'a BinaryMask),
}

impl MaskOverlay<'_> {
    fn targets(&self) -> &[String] {
        match self {
            MaskOverlay::Scores(s) => s.targets(),
            MaskOverlay::Fixed(m) => m.targets(),
        }
    }
}

/// Per-forward handles to the variables the caller may need gradients for.
pub struct BoundModel {
    pub logits: Var,
    /// Leaf var per parameter path (absent paths were replaced by overlay
    /// machinery only when masked; every path is still present here).
    pub param_vars: BTreeMap<String, Var>,
    /// Leaf var per score tensor when a `Scores` overlay is active.
    pub score_vars: BTreeMap<String, Var>,
}

/// Runs the transformer on `tokens`, recording onto `tape`.
///
/// With an overlay, every targeted linear uses the masked effective weight;
/// all other parameters are used as-is. Leaf `requires_grad` flags follow
/// the tensors in `params` (for scores: always true).
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    tokens: &TokenStream,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<BoundModel> {
    let cfg = &params.config;
    let seq = tokens.len();
    if seq > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq, max: cfg.max_seq_len });
    }
    for &id in &tokens.ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange { op: "forward", id, vocab: cfg.vocab_size });
        }
    }

    // Resolve overlay masks up front so unknown paths fail before any compute.
    let mut masks: BTreeMap<String, crate::bits::MaskBits> = BTreeMap::new();
    if let Some(ov) = &overlay {
        for path in ov.targets() {
            let theta = params.get(path)?;
            let bits = match ov {
                MaskOverlay::Scores(state) => state.indicator_bits(path)?,
                MaskOverlay::Fixed(mask) => mask.bits(path)?.clone(),
            };
            if bits.len() != theta.numel() {
                return Err(Error::InvalidShape {
                    op: "forward",
                    shape: theta.shape().to_vec(),
                    reason: format!("overlay mask for '{path}' has {} bits", bits.len()),
                });
            }
            masks.insert(path.clone(), bits);
        }
    }

    let mut param_vars = BTreeMap::new();
    let mut score_vars = BTreeMap::new();
    for (path, tensor) in params.iter() {
        param_vars.insert(path.clone(), tape.leaf(tensor));
    }

    // Effective weight per path: overlay targets get the masked product.
    let mut effective: BTreeMap<String, Var> = BTreeMap::new();
    for (path, bits) in &masks {
        let theta = param_vars[path];
        let eff = match overlay.as_ref().expect("masks imply overlay") {
            MaskOverlay::Scores(state) => {
                let score_leaf = tape.leaf(&state.scores(path)?.clone().with_requires_grad(true));
                score_vars.insert(path.clone(), score_leaf);
                let frozen = if params.get(path)?.requires_grad() {
                    // MFT freezes theta regardless of how the checkpoint was loaded.
                    tape.leaf(&params.get(path)?.detached())
                } else {
                    theta
                };
                tape.ste_mask(frozen, score_leaf, bits)?
            }
            MaskOverlay::Fixed(_) => {
                let mask_t: Vec<f64> = bits.iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
                let m = tape.constant(mask_t, params.get(path)?.shape())?;
                tape.mul(theta, m)?
            }
        };
        effective.insert(path.clone(), eff);
    }
    let weight = |path: &str| -> Var {
        effective.get(path).copied().unwrap_or_else(|| param_vars[path])
    };

    // Token + position embeddings.
    let tok = tape.embedding(param_vars["embed"], &tokens.ids)?;
    let positions: Vec<u32> = (0..seq as u32).collect();
    let pos = tape.embedding(param_vars["pos_embed"], &positions)?;
    let mut x = tape.add(tok, pos)?;

    // Causal mask: -1e9 above the diagonal, exp() underflows to exactly 0.
    let mut causal = vec![0.0; seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            causal[i * seq + j] = -1e9;
        }
    }
    let causal = tape.constant(causal, &[seq, seq])?;

    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let att_scale = 1.0 / (hd as f64).sqrt();

    for layer in 0..cfg.n_layers {
        let p = |sub: &str| format!("layer.{layer}.{sub}");

        // attention sublayer
        let normed = tape.rms_norm(x, param_vars[&p("attn.norm")])?;
        let q = tape.matmul(normed, weight(&p("attn.q")))?;
        let k = tape.matmul(normed, weight(&p("attn.k")))?;
        let v = tape.matmul(normed, weight(&p("attn.v")))?;
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice(q, 1, h * hd, hd)?;
            let kh = tape.slice(k, 1, h * hd, hd)?;
            let vh = tape.slice(v, 1, h * hd, hd)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, att_scale)?;
            let masked = tape.add(scaled, causal)?;
            let probs = tape.softmax(masked)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let merged = tape.concat(&heads, 1)?;
        let att_out = tape.matmul(merged, weight(&p("attn.o")))?;
        x = tape.add(x, att_out)?;

        // mlp sublayer
        let normed = tape.rms_norm(x, param_vars[&p("mlp.norm")])?;
        let up = tape.matmul(normed, weight(&p("mlp.up")))?;
        let act = tape.gelu(up)?;
        let down = tape.matmul(act, weight(&p("mlp.down")))?;
        x = tape.add(x, down)?;
    }

    let normed = tape.rms_norm(x, param_vars["final_norm"])?;
    let logits = tape.matmul(normed, param_vars["lm_head"])?;
    Ok(BoundModel { logits, param_vars, score_vars })
}

/// Logits for a token sequence, `[seq, vocab]`.
pub fn forward(
    params: &ModelParams,
    tokens: &TokenStream,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let frozen = params.frozen();
    let bound = forward_on_tape(&mut tape, &frozen, tokens, overlay)?;
    Ok(tape.to_tensor(bound.logits))
}

/// Records the mean next-token negative log-likelihood of `tokens` onto
/// `tape`, returning the scalar loss var and the bound leaves.
pub fn autoregressive_loss_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    tokens: &TokenStream,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<(Var, BoundModel)> {
    if tokens.len() < 2 {
        return Err(Error::SequenceTooShort { len: tokens.len(), min: 2 });
    }
    let inputs = TokenStream {
        ids: tokens.ids[..tokens.len() - 1].to_vec(),
        source: tokens.source.clone(),
    };
    let bound = forward_on_tape(tape, params, &inputs, overlay)?;
    let loss = tape.cross_entropy(bound.logits, &tokens.ids[1..])?;
    Ok((loss, bound))
}

/// Mean next-token negative log-likelihood without gradient tracking.
pub fn autoregressive_loss(
    params: &ModelParams,
    tokens: &TokenStream,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let frozen = params.frozen();
    let (loss, _) = autoregressive_loss_on_tape(&mut tape, &frozen, tokens, overlay)?;
    Ok(tape.scalar_value(loss))
}

/// Greedy decoding: appends `n` argmax tokens (ties break toward the lower
/// token id). When the context outgrows `max_seq_len`, the oldest tokens
/// fall out of the window.
pub fn generate(
    params: &ModelParams,
    prompt: &TokenStream,
    n: usize,
    overlay: Option<MaskOverlay<'_>>,
) -> Result<TokenStream> {
    let cfg = &params.config;
    if prompt.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: prompt.len(), max: cfg.max_seq_len });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("generate: n must be >= 1".into()));
    }
    let mut ids = prompt.ids.clone();
    for _ in 0..n {
        let start = ids.len().saturating_sub(cfg.max_seq_len);
        let window = TokenStream { ids: ids[start..].to_vec(), source: prompt.source.clone() };
        let logits = forward(params, &window, overlay)?;
        let vocab = cfg.vocab_size;
        let last = &logits.data()[(window.len() - 1) * vocab..window.len() * vocab];
        let mut best = 0usize;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        ids.push(best as u32);
    }
    TokenStream::new(ids, prompt.source.clone(), cfg.vocab_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            vocab_size: 256,
            max_seq_len: 16,
        }
    }

    #[test]
    fn single_token_logit_shape() {
        let params = ModelParams::init(&tiny_config(), 1).unwrap();
        let toks = TokenStream::from_bytes(b"a", "test").unwrap();
        let logits = forward(&params, &toks, None).unwrap();
        assert_eq!(logits.shape(), &[1, 256]);
    }

    #[test]
    fn over_length_sequence_rejected() {
        let params = ModelParams::init(&tiny_config(), 1).unwrap();
        let toks = TokenStream::from_bytes(&[b'x'; 17], "test").unwrap();
        assert!(matches!(
            forward(&params, &toks, None),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn loss_needs_two_tokens() {
        let params = ModelParams::init(&tiny_config(), 1).unwrap();
        let toks = TokenStream::from_bytes(b"a", "test").unwrap();
        assert!(matches!(
            autoregressive_loss(&params, &toks, None),
            Err(Error::SequenceTooShort { .. })
        ));
    }

    #[test]
    fn untrained_loss_near_uniform() {
        // 0.02-std init keeps logits close to uniform, so the loss starts
        // near ln(vocab).
        let params = ModelParams::init(&tiny_config(), 3).unwrap();
        let toks = TokenStream::from_bytes(b"12+34=46", "test").unwrap();
        let loss = autoregressive_loss(&params, &toks, None).unwrap();
        assert!((loss - 256f64.ln()).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn causality_exact() {
        let params = ModelParams::init(&tiny_config(), 5).unwrap();
        let base = TokenStream::from_bytes(b"abcdefgh", "test").unwrap();
        let mut perturbed = base.clone();
        perturbed.ids[5] = b'Z' as u32;
        let l0 = forward(&params, &base, None).unwrap();
        let l1 = forward(&params, &perturbed, None).unwrap();
        let vocab = 256;
        for pos in 0..5 {
            let a = &l0.data()[pos * vocab..(pos + 1) * vocab];
            let b = &l1.data()[pos * vocab..(pos + 1) * vocab];
            assert!(
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                "logits changed at position {pos} before the perturbation at 5"
            );
        }
        // ...and does change at the perturbed position
        let a = &l0.data()[5 * vocab..6 * vocab];
        let b = &l1.data()[5 * vocab..6 * vocab];
        assert!(a.iter().zip(b).any(|(x, y)| x != y));
    }

    #[test]
    fn greedy_decode_deterministic() {
        let params = ModelParams::init(&tiny_config(), 9).unwrap();
        let prompt = TokenStream::from_bytes(b"2+2=", "test").unwrap();
        let a = generate(&params, &prompt, 4, None).unwrap();
        let b = generate(&params, &prompt, 4, None).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.len(), prompt.len() + 4);
    }

    #[test]
    fn generate_one_token() {
        let params = ModelParams::init(&tiny_config(), 9).unwrap();
        let prompt = TokenStream::from_bytes(b"ab", "test").unwrap();
        let out = generate(&params, &prompt, 1, None).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(&out.ids[..2], &prompt.ids[..]);
    }
}
