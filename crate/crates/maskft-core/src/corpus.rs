//! Deterministic toy corpora: integer arithmetic, bracket matching, and
//! instruction templates, standing in for math / coding / instruction
//! domains.
//!
//! Every example is a (prompt, completion) pair whose completion is a pure
//! function of the prompt, so exact-match evaluation is well-posed. Splits
//! are generated from disjoint seed streams and de-duplicated against each
//! other, so no example string appears in two splits.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate as model_generate, MaskOverlay, ModelParams, TokenStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainName {
    Arith,
    Dyck,
    Instr,
}

impl std::fmt::Display for DomainName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DomainName::Arith => "arith",
            DomainName::Dyck => "dyck",
            DomainName::Instr => "instr",
        };
        f.write_str(s)
    }
}

/// Generator recipe for one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: DomainName,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_val: usize,
    #[serde(default = "default_n_eval")]
    pub n_test: usize,
    pub seed: u64,
    /// Arith: operands drawn from `0..=operand_max`.
    #[serde(default = "default_operand_max")]
    pub operand_max: u32,
    /// Dyck: maximum nesting depth of the open prefix.
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    /// Instr: how many of the fixed templates to use (1..=4).
    #[serde(default = "default_n_templates")]
    pub n_templates: usize,
}

fn default_n_train() -> usize {
    4096
}
fn default_n_eval() -> usize {
    512
}
fn default_operand_max() -> u32 {
    99
}
fn default_max_depth() -> usize {
    8
}
fn default_n_templates() -> usize {
    4
}

impl DomainSpec {
    pub fn new(name: DomainName, seed: u64) -> Self {
        DomainSpec {
            name,
            n_train: default_n_train(),
            n_val: default_n_eval(),
            n_test: default_n_eval(),
            seed,
            operand_max: default_operand_max(),
            max_depth: default_max_depth(),
            n_templates: default_n_templates(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("split sizes must be >= 1".into()));
        }
        match self.name {
            DomainName::Arith if self.operand_max < 9 => {
                Err(Error::InvalidConfig("operand_max must be >= 9".into()))
            }
            DomainName::Dyck if self.max_depth == 0 => {
                Err(Error::InvalidConfig("max_depth must be >= 1".into()))
            }
            DomainName::Instr if !(1..=TEMPLATES.len()).contains(&self.n_templates) => Err(
                Error::InvalidConfig(format!("n_templates must be in 1..={}", TEMPLATES.len())),
            ),
            _ => Ok(()),
        }
    }
}

/// One prompt/completion pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub completion: String,
    pub domain: DomainName,
}

impl Example {
    pub fn text(&self) -> String {
        format!("{}{}", self.prompt, self.completion)
    }
}

/// Train/val/test splits of one (or a mix of) domains.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tag: String,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Generates the three disjoint splits for `spec`.
pub fn generate(spec: &DomainSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut split = |n: usize, stream: u64| -> Result<Vec<Example>> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > n.saturating_mul(1000) {
                return Err(Error::InvalidConfig(format!(
                    "domain {} cannot produce {n} distinct examples; widen the difficulty knobs",
                    spec.name
                )));
            }
            let ex = sample_example(spec, &mut rng);
            if seen.insert(ex.prompt.clone()) {
                out.push(ex);
            }
        }
        Ok(out)
    };
    let train = split(spec.n_train, 1)?;
    let val = split(spec.n_val, 2)?;
    let test = split(spec.n_test, 3)?;
    Ok(Dataset { tag: spec.name.to_string(), train, val, test })
}

fn sample_example<R: Rng>(spec: &DomainSpec, rng: &mut R) -> Example {
    match spec.name {
        DomainName::Arith => {
            let a = rng.gen_range(0..=spec.operand_max);
            let b = rng.gen_range(0..=spec.operand_max);
            let op = *[b'+', b'-', b'*'].iter().nth(rng.gen_range(0..3)).unwrap() as char;
            let result: i64 = match op {
                '+' => a as i64 + b as i64,
                '-' => a as i64 - b as i64,
                _ => a as i64 * b as i64,
            };
            Example {
                prompt: format!("{a}{op}{b}="),
                completion: result.to_string(),
                domain: DomainName::Arith,
            }
        }
        DomainName::Dyck => {
            let prefix = sample_dyck_prefix(spec.max_depth, rng);
            let completion = dyck_closers(&prefix).expect("generated prefix is well-formed");
            Example {
                prompt: format!("{prefix}{DYCK_CUE}"),
                completion,
                domain: DomainName::Dyck,
            }
        }
        DomainName::Instr => {
            let t = rng.gen_range(0..spec.n_templates);
            let len = rng.gen_range(3..=6);
            let word: String = (0..len).map(|_| (b'a' + rng.gen_range(0..26)) as char).collect();
            let (name, f) = TEMPLATES[t];
            Example {
                prompt: format!("{name}{word}"),
                completion: f(&word),
                domain: DomainName::Instr,
            }
        }
    }
}

/// Marks the end of a dyck prefix; the completion that follows is the
/// unique closing sequence.
pub const DYCK_CUE: char = '|';

const OPENS: [char; 3] = ['(', '[', '{'];

fn close_of(open: char) -> char {
    match open {
        '(' => ')',
        '[' => ']',
        _ => '}',
    }
}

fn sample_dyck_prefix<R: Rng>(max_depth: usize, rng: &mut R) -> String {
    let steps = rng.gen_range(1..=2 * max_depth);
    let mut stack: Vec<char> = Vec::new();
    let mut prefix = String::new();
    for _ in 0..steps {
        let open = stack.is_empty() || (stack.len() < max_depth && rng.gen_bool(0.6));
        if open {
            let c = OPENS[rng.gen_range(0..3)];
            stack.push(c);
            prefix.push(c);
        } else {
            prefix.push(close_of(stack.pop().unwrap()));
        }
    }
    if stack.is_empty() {
        let c = OPENS[rng.gen_range(0..3)];
        prefix.push(c);
    }
    prefix
}

/// The closing sequence that balances a bracket prefix, or `None` if the
/// prefix is malformed or already balanced.
pub fn dyck_closers(prefix: &str) -> Option<String> {
    let mut stack = Vec::new();
    for c in prefix.chars() {
        if OPENS.contains(&c) {
            stack.push(c);
        } else if stack.pop().map(close_of) != Some(c) {
            return None;
        }
    }
    if stack.is_empty() {
        return None;
    }
    Some(stack.iter().rev().map(|&c| close_of(c)).collect())
}

type TemplateFn = fn(&str) -> String;

/// Fixed instruction templates with programmatically checkable outputs.
pub const TEMPLATES: [(&str, TemplateFn); 4] = [
    ("repeat twice:", |w| format!("{w}{w}")),
    ("uppercase:", |w| w.to_uppercase()),
    ("reverse:", |w| w.chars().rev().collect()),
    ("first:", |w| w.chars().take(1).collect()),
];

/// Independent label check: does the completion actually answer the prompt?
pub fn verify_example(ex: &Example) -> bool {
    match ex.domain {
        DomainName::Arith => {
            let Some(body) = ex.prompt.strip_suffix('=') else { return false };
            let Some(op_pos) = body.rfind(['+', '-', '*'].as_slice()).filter(|&p| p > 0) else {
                return false;
            };
            let (a, rest) = body.split_at(op_pos);
            let op = rest.chars().next().unwrap();
            let b = &rest[1..];
            let (Ok(a), Ok(b)) = (a.parse::<i64>(), b.parse::<i64>()) else { return false };
            let expect = match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ => return false,
            };
            ex.completion == expect.to_string()
        }
        DomainName::Dyck => {
            let Some(prefix) = ex.prompt.strip_suffix(DYCK_CUE) else { return false };
            dyck_closers(prefix).as_deref() == Some(ex.completion.as_str())
        }
        DomainName::Instr => TEMPLATES.iter().any(|(name, f)| {
            ex.prompt
                .strip_prefix(name)
                .is_some_and(|w| f(w) == ex.completion)
        }),
    }
}

/// Seeded uniform sample without replacement of `ceil(ratio * N)` examples,
/// preserving the original order.
pub fn subset(examples: &[Example], ratio: f64, seed: u64) -> Result<Vec<Example>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!("subset ratio must be in (0, 1], got {ratio}")));
    }
    if ratio == 1.0 {
        return Ok(examples.to_vec());
    }
    let n = examples.len();
    let take = (ratio * n as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| examples[i].clone()).collect())
}

/// Concatenates datasets then shuffles each split with a seeded
/// permutation. Per-domain example counts are preserved.
pub fn mixup(parts: &[&Dataset], seed: u64) -> Result<Dataset> {
    if parts.is_empty() {
        return Err(Error::InvalidConfig("mixup needs at least one dataset".into()));
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut join = |pick: fn(&Dataset) -> &Vec<Example>| {
        let mut all: Vec<Example> = parts.iter().flat_map(|d| pick(d).iter().cloned()).collect();
        all.shuffle(&mut rng);
        all
    };
    Ok(Dataset {
        tag: "mixup".to_string(),
        train: join(|d| &d.train),
        val: join(|d| &d.val),
        test: join(|d| &d.test),
    })
}

/// Greedy-decodes each prompt and scores exact completion matches.
pub fn exact_match_eval(
    params: &ModelParams,
    overlay: Option<MaskOverlay<'_>>,
    examples: &[Example],
) -> Result<f64> {
    exact_match_over(examples, |ex| {
        let prompt = TokenStream::from_bytes(ex.prompt.as_bytes(), ex.domain.to_string())?;
        let out = model_generate(params, &prompt, ex.completion.len(), overlay)?;
        Ok(out.ids[prompt.len()..].iter().map(|&t| t as u8).collect())
    })
}

/// Accuracy of an arbitrary completion function; factored out so tests can
/// swap in oracle or adversarial completers.
pub fn exact_match_over(
    examples: &[Example],
    mut complete: impl FnMut(&Example) -> Result<Vec<u8>>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidConfig("exact_match_eval on empty dataset".into()));
    }
    let mut hits = 0usize;
    for ex in examples {
        if complete(ex)? == ex.completion.as_bytes() {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Writes one example per line: `prompt \t completion`, UTF-8, in order.
pub fn save_tsv(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        debug_assert!(!ex.prompt.contains(['\t', '\n']) && !ex.completion.contains(['\t', '\n']));
        writeln!(f, "{}\t{}", ex.prompt, ex.completion)?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_tsv(path: impl AsRef<Path>, domain: DomainName) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let Some((prompt, completion)) = line.split_once('\t') else {
            return Err(Error::CorruptFile {
                kind: "dataset",
                offset: i as u64,
                reason: format!("line {} has no tab separator", i + 1),
            });
        };
        out.push(Example {
            prompt: prompt.to_string(),
            completion: completion.to_string(),
            domain,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(name: DomainName) -> DomainSpec {
        DomainSpec {
            n_train: 64,
            n_val: 16,
            n_test: 16,
            ..DomainSpec::new(name, 12)
        }
    }

    #[test]
    fn arith_examples_verify() {
        let ds = generate(&small_spec(DomainName::Arith)).unwrap();
        for ex in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(verify_example(ex), "bad example {ex:?}");
        }
    }

    #[test]
    fn dyck_spec_example() {
        assert_eq!(dyck_closers("(([").as_deref(), Some("]))"));
        assert_eq!(dyck_closers("()"), None, "balanced prefix has no completion");
        let ds = generate(&small_spec(DomainName::Dyck)).unwrap();
        for ex in &ds.train {
            assert!(verify_example(ex), "bad example {ex:?}");
        }
    }

    #[test]
    fn instr_examples_verify() {
        let ds = generate(&small_spec(DomainName::Instr)).unwrap();
        for ex in &ds.train {
            assert!(verify_example(ex), "bad example {ex:?}");
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate(&small_spec(DomainName::Arith)).unwrap();
        let b = generate(&small_spec(DomainName::Arith)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn splits_are_disjoint() {
        for name in [DomainName::Arith, DomainName::Dyck, DomainName::Instr] {
            let ds = generate(&small_spec(name)).unwrap();
            let train: BTreeSet<String> = ds.train.iter().map(Example::text).collect();
            let val: BTreeSet<String> = ds.val.iter().map(Example::text).collect();
            let test: BTreeSet<String> = ds.test.iter().map(Example::text).collect();
            assert!(train.is_disjoint(&val), "{name}: train/val overlap");
            assert!(train.is_disjoint(&test), "{name}: train/test overlap");
            assert!(val.is_disjoint(&test), "{name}: val/test overlap");
        }
    }

    #[test]
    fn subset_sizes_and_determinism() {
        let ds = generate(&small_spec(DomainName::Arith)).unwrap();
        assert_eq!(subset(&ds.train, 1.0, 5).unwrap(), ds.train);
        let s = subset(&ds.train, 0.25, 5).unwrap();
        assert_eq!(s.len(), 16);
        assert_eq!(subset(&ds.train, 0.25, 5).unwrap(), s);
        assert_ne!(subset(&ds.train, 0.25, 6).unwrap(), s);
    }

    #[test]
    fn subset_exact_tenth() {
        let exs: Vec<Example> = (0..1000)
            .map(|i| Example {
                prompt: format!("{i}+0="),
                completion: format!("{i}"),
                domain: DomainName::Arith,
            })
            .collect();
        assert_eq!(subset(&exs, 0.1, 0).unwrap().len(), 100);
    }

    #[test]
    fn mixup_preserves_counts() {
        let a = generate(&small_spec(DomainName::Arith)).unwrap();
        let d = generate(&small_spec(DomainName::Dyck)).unwrap();
        let m = mixup(&[&a, &d], 3).unwrap();
        assert_eq!(m.train.len(), a.train.len() + d.train.len());
        let arith_count = m.train.iter().filter(|e| e.domain == DomainName::Arith).count();
        assert_eq!(arith_count, a.train.len());
    }

    #[test]
    fn exact_match_oracle_and_adversary() {
        let ds = generate(&small_spec(DomainName::Arith)).unwrap();
        let oracle = exact_match_over(&ds.test, |ex| Ok(ex.completion.as_bytes().to_vec())).unwrap();
        assert_eq!(oracle, 1.0);
        let wrong = exact_match_over(&ds.test, |ex| {
            let mut b = ex.completion.as_bytes().to_vec();
            b[0] ^= 0x01;
            Ok(b)
        })
        .unwrap();
        assert_eq!(wrong, 0.0);
    }

    #[test]
    fn tsv_roundtrip() {
        let ds = generate(&small_spec(DomainName::Instr)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("instr.train.tsv");
        save_tsv(&ds.train, &p).unwrap();
        let loaded = load_tsv(&p, DomainName::Instr).unwrap();
        assert_eq!(loaded, ds.train);
    }
}
