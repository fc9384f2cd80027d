//! Finite-difference oracles for the autodiff engine.
//!
//! Every differentiable op is wrapped into a scalar objective with a fixed
//! random projection and compared against central differences; the masked
//! linear path is additionally checked as the substituted objective (the
//! indicator replaced by the identity), which is exactly what the
//! straight-through backward rule must differentiate.

use maskft_core::gradcheck::finite_difference_check;
use maskft_core::mask::indicator;
use maskft_core::mask::IndicatorSpec;
use maskft_core::model::{
    autoregressive_loss, autoregressive_loss_on_tape, ModelParams, TokenStream, TransformerConfig,
};
use maskft_core::tape::{Tape, Var};
use maskft_core::tensor::Tensor;
use maskft_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

/// Checks d(objective)/d(x) where `objective = sum(build(x) * proj)` and
/// `proj` is a fixed random projection making every output coordinate
/// matter.
fn check_unary_op(
    name: &str,
    seed: u64,
    x_shape: &[usize],
    build: impl Fn(&mut Tape, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&mut rng, x_shape);
    let run = |xt: &Tensor| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(&xt.clone().with_requires_grad(true));
        let y = build(&mut tape, xv)?;
        let proj_t = {
            let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            rand_tensor(&mut prng, tape.shape(y).to_vec().as_slice())
        };
        let proj = tape.leaf(&proj_t);
        let weighted = tape.mul(y, proj)?;
        let loss = tape.sum(weighted)?;
        let lv = tape.scalar_value(loss);
        tape.backward(loss)?;
        Ok((lv, tape.grad(xv).map(|g| g.to_vec())))
    };
    let (_, grad) = run(&x).unwrap();
    let analytic = grad.expect("x requires grad");
    let err = finite_difference_check(|xt| run(xt).map(|(v, _)| v), &x, H, &analytic).unwrap();
    assert!(err < TOL, "{name} (seed {seed}): max relative error {err:.3e}");
}

#[test]
fn op_gelu() {
    for seed in 0..5 {
        check_unary_op("gelu", seed, &[3, 4], |t, x| t.gelu(x));
    }
}

#[test]
fn op_softmax() {
    for seed in 0..5 {
        check_unary_op("softmax", seed, &[3, 5], |t, x| t.softmax(x));
    }
}

#[test]
fn op_transpose_reshape_slice_concat() {
    for seed in 0..5 {
        check_unary_op("transpose", seed, &[3, 4], |t, x| t.transpose(x));
        check_unary_op("reshape", seed, &[3, 4], |t, x| t.reshape(x, &[2, 6]));
        check_unary_op("slice", seed, &[3, 6], |t, x| t.slice(x, 1, 2, 3));
        check_unary_op("concat", seed, &[2, 3], |t, x| {
            let a = t.slice(x, 1, 0, 1)?;
            let b = t.slice(x, 1, 1, 2)?;
            t.concat(&[b, a], 1)
        });
    }
}

#[test]
fn op_scale_sum_mean() {
    for seed in 0..5 {
        check_unary_op("scale", seed, &[4], |t, x| t.scale(x, -1.7));
        check_unary_op("sum", seed, &[2, 3], |t, x| t.sum(x));
        check_unary_op("mean", seed, &[2, 3], |t, x| t.mean(x));
    }
}

#[test]
fn op_rms_norm_wrt_input_and_gain() {
    for seed in 0..5 {
        // wrt input, gain fixed
        check_unary_op("rms_norm/x", seed, &[3, 4], |t, x| {
            let w = t.constant(vec![1.1, 0.9, -0.5, 1.3], &[4])?;
            t.rms_norm(x, w)
        });
        // wrt gain, input fixed
        check_unary_op("rms_norm/w", seed, &[4], |t, w| {
            let x = t.constant(vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.9, 1.1, -1.6], &[2, 4])?;
            t.rms_norm(x, w)
        });
    }
}

#[test]
fn op_matmul_both_sides() {
    for seed in 0..5 {
        check_unary_op("matmul/lhs", seed, &[3, 4], |t, a| {
            let b = t.constant(vec![0.5; 4 * 2], &[4, 2])?;
            t.matmul(a, b)
        });
        check_unary_op("matmul/rhs", seed, &[4, 2], |t, b| {
            let a = t.constant((0..12).map(|i| 0.3 * i as f64 - 1.5).collect(), &[3, 4])?;
            t.matmul(a, b)
        });
    }
}

#[test]
fn op_add_mul_with_broadcast() {
    for seed in 0..5 {
        check_unary_op("add/same", seed, &[2, 3], |t, a| {
            let b = t.constant(vec![0.2, -0.4, 1.0, 0.7, -1.1, 0.05], &[2, 3])?;
            t.add(a, b)
        });
        check_unary_op("add/bias", seed, &[3], |t, b| {
            let a = t.constant(vec![0.1; 12], &[4, 3])?;
            t.add(a, b)
        });
        check_unary_op("mul/same", seed, &[2, 3], |t, a| {
            let b = t.constant(vec![1.2, -0.3, 0.9, -1.4, 0.6, 0.8], &[2, 3])?;
            t.mul(a, b)
        });
        check_unary_op("mul/broadcast", seed, &[3], |t, b| {
            let a = t.constant(vec![0.5, -0.25, 2.0, 1.0, -1.0, 0.75], &[2, 3])?;
            t.mul(a, b)
        });
    }
}

#[test]
fn op_embedding_wrt_table() {
    for seed in 0..5 {
        check_unary_op("embedding", seed, &[6, 3], |t, table| t.embedding(table, &[1, 4, 1, 0]));
    }
}

#[test]
fn op_cross_entropy_wrt_logits() {
    for seed in 0..5 {
        check_unary_op("cross_entropy", seed, &[4, 7], |t, logits| {
            t.cross_entropy(logits, &[3, 0, 6, 2])
        });
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let dims = [5usize, 7, 6, 4];
        let x0 = rand_tensor(&mut rng, &[2, dims[0]]);
        let weights: Vec<Tensor> = (0..3).map(|i| rand_tensor(&mut rng, &[dims[i], dims[i + 1]])).collect();

        // gradcheck each layer's weight through the whole network
        for target in 0..3 {
            let run = |wt: &Tensor| -> Result<(f64, Option<Vec<f64>>)> {
                let mut tape = Tape::new();
                let mut h = tape.leaf(&x0);
                let mut target_var = None;
                for (i, w) in weights.iter().enumerate() {
                    let wv = if i == target {
                        let v = tape.leaf(&wt.clone().with_requires_grad(true));
                        target_var = Some(v);
                        v
                    } else {
                        tape.leaf(w)
                    };
                    h = tape.matmul(h, wv)?;
                    h = tape.gelu(h)?;
                }
                let loss = tape.sum(h)?;
                let lv = tape.scalar_value(loss);
                tape.backward(loss)?;
                Ok((lv, tape.grad(target_var.unwrap()).map(|g| g.to_vec())))
            };
            let (_, grad) = run(&weights[target]).unwrap();
            let analytic = grad.unwrap();
            let err =
                finite_difference_check(|w| run(w).map(|(v, _)| v), &weights[target], H, &analytic)
                    .unwrap();
            assert!(err < TOL, "mlp layer {target} seed {seed}: rel err {err:.3e}");
        }
    }
}

fn lm_config() -> TransformerConfig {
    TransformerConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 17,
        max_seq_len: 12,
    }
}

#[test]
fn transformer_loss_gradients_match_finite_differences() {
    let cfg = lm_config();
    let params = ModelParams::init(&cfg, 77).unwrap();
    let toks = TokenStream::new(vec![3, 1, 4, 1, 5, 9, 2, 6], "t", cfg.vocab_size).unwrap();

    for path in ["layer.0.attn.q", "layer.1.mlp.up", "layer.0.attn.norm", "embed", "lm_head", "pos_embed"] {
        let base = params.get(path).unwrap().clone();
        let f = |x: &Tensor| -> Result<f64> {
            let mut p = params.clone();
            p.set(path, x.clone())?;
            autoregressive_loss(&p, &toks, None)
        };
        let analytic = {
            let mut tape = Tape::new();
            let (loss, bound) = autoregressive_loss_on_tape(&mut tape, &params, &toks, None).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(bound.param_vars[path]).unwrap().to_vec()
        };
        let err = finite_difference_check(f, &base, H, &analytic).unwrap();
        assert!(err < TOL, "{path}: rel err {err:.3e}");
    }
}

/// The substituted masked objective: forward uses `theta * c` directly
/// (the indicator replaced by the identity). Analytic score gradients must
/// match finite differences of this objective.
#[test]
fn substituted_masked_objective_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let theta = rand_tensor(&mut rng, &[4, 3]);
        let input = rand_tensor(&mut rng, &[2, 4]);
        let scores0 = rand_tensor(&mut rng, &[4, 3]);

        let run = |c: &Tensor| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let i = tape.leaf(&input);
            let th = tape.leaf(&theta);
            let cv = tape.leaf(&c.clone().with_requires_grad(true));
            let eff = tape.mul(th, cv)?;
            let y = tape.matmul(i, eff)?;
            let a = tape.gelu(y)?;
            let loss = tape.sum(a)?;
            let lv = tape.scalar_value(loss);
            tape.backward(loss)?;
            Ok((lv, tape.grad(cv).map(|g| g.to_vec())))
        };
        let (_, grad) = run(&scores0).unwrap();
        let analytic = grad.unwrap();
        let err = finite_difference_check(|c| run(c).map(|(v, _)| v), &scores0, H, &analytic).unwrap();
        assert!(err < TOL, "substituted objective seed {seed}: rel err {err:.3e}");
    }
}

/// At score vectors that are already binary, the indicator is the identity,
/// so the straight-through route and the substituted (mul) route compute
/// the same forward and must report the same score gradients to 1e-12.
#[test]
fn ste_route_equals_substituted_route_at_binary_scores() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let theta = rand_tensor(&mut rng, &[4, 3]);
        let input = rand_tensor(&mut rng, &[2, 4]);
        let c_bits: Vec<f64> = (0..12).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let scores = Tensor::from_vec(c_bits, &[4, 3]).unwrap();
        let bits = indicator(scores.data(), IndicatorSpec::Threshold { t: 0.5 });

        let grad_via = |use_ste: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let i = tape.leaf(&input);
            let th = tape.leaf(&theta);
            let cv = tape.leaf(&scores.clone().with_requires_grad(true));
            let eff = if use_ste {
                tape.ste_mask(th, cv, &bits).unwrap()
            } else {
                tape.mul(th, cv).unwrap()
            };
            let y = tape.matmul(i, eff).unwrap();
            let a = tape.gelu(y).unwrap();
            let loss = tape.sum(a).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(cv).unwrap().to_vec()
        };
        let g_ste = grad_via(true);
        let g_sub = grad_via(false);
        for (a, b) in g_ste.iter().zip(&g_sub) {
            assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
        }
    }
}

/// grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2).
#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let (a, b) = (0.7, -1.3);

    let single = |which: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_requires_grad(true));
        let l1 = {
            let sq = tape.mul(xv, xv).unwrap();
            tape.sum(sq).unwrap()
        };
        let l2 = {
            let g = tape.gelu(xv).unwrap();
            tape.mean(g).unwrap()
        };
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => {
                let s1 = tape.scale(l1, a).unwrap();
                let s2 = tape.scale(l2, b).unwrap();
                tape.add(s1, s2).unwrap()
            }
        };
        tape.backward(loss).unwrap();
        tape.grad(xv).unwrap().to_vec()
    };

    let g1 = single(1);
    let g2 = single(2);
    let gc = single(0);
    for i in 0..gc.len() {
        let expect = a * g1[i] + b * g2[i];
        assert!((gc[i] - expect).abs() <= 1e-12, "index {i}: {} vs {expect}", gc[i]);
    }
}

/// Forward with an all-keep scores overlay is bit-identical to the plain
/// forward.
#[test]
fn all_keep_scores_overlay_is_bitwise_identity() {
    use maskft_core::mask::{init_scores, ScoreInit};
    use maskft_core::model::MaskOverlay;

    let cfg = lm_config();
    let params = ModelParams::init(&cfg, 31).unwrap();
    let toks = TokenStream::new(vec![1, 2, 3, 4, 5, 6], "t", cfg.vocab_size).unwrap();
    let targets = params.maskable_paths(0..2).unwrap();
    let state = init_scores(
        &params,
        &targets,
        IndicatorSpec::Threshold { t: -0.035 },
        ScoreInit::Zeros,
        0,
    )
    .unwrap();

    let plain = autoregressive_loss(&params, &toks, None).unwrap();
    let masked = autoregressive_loss(&params, &toks, Some(MaskOverlay::Scores(&state))).unwrap();
    assert_eq!(plain.to_bits(), masked.to_bits(), "{plain} vs {masked}");
}

/// A random mask changes the loss; an all-ones fixed mask does not.
#[test]
fn fixed_mask_identity_and_effect() {
    use maskft_core::mask::BinaryMask;
    use maskft_core::model::MaskOverlay;

    let cfg = lm_config();
    let params = ModelParams::init(&cfg, 32).unwrap();
    let toks = TokenStream::new(vec![7, 8, 9, 10, 11], "t", cfg.vocab_size).unwrap();
    let targets = params.maskable_paths(0..2).unwrap();

    let keep = BinaryMask::all_keep(&params, &targets).unwrap();
    let plain = autoregressive_loss(&params, &toks, None).unwrap();
    let kept = autoregressive_loss(&params, &toks, Some(MaskOverlay::Fixed(&keep))).unwrap();
    assert_eq!(plain.to_bits(), kept.to_bits());

    // zero out one tensor entirely; the loss must move
    let mut bits = std::collections::BTreeMap::new();
    let mut shapes = std::collections::BTreeMap::new();
    for t in &targets {
        let n = params.get(t).unwrap().numel();
        let b = if t.ends_with("attn.q") {
            maskft_core::bits::MaskBits::zeros(n)
        } else {
            maskft_core::bits::MaskBits::ones(n)
        };
        bits.insert(t.clone(), b);
        shapes.insert(t.clone(), params.get(t).unwrap().shape().to_vec());
    }
    let harsh = BinaryMask::new(
        targets.clone(),
        bits,
        shapes,
        maskft_core::mask::MaskKind::L1 { k: 0.5 },
        None,
    );
    let masked = autoregressive_loss(&params, &toks, Some(MaskOverlay::Fixed(&harsh))).unwrap();
    assert_ne!(plain.to_bits(), masked.to_bits());
}
